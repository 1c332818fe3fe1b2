"""Autonomous nut-tightening stack for a 7-DoF serial arm.

Submodules:
    rigidbody  kinematics and dynamics of the arm
    world      screw-joint world simulator with rigid grasp and F/T sensing
    planner    keyframe planner, constrained IK and the stage state machine
    control    stiffness and hybrid force/position controllers
    harness    experiment runner (nominal, ablation, robustness)
"""

__version__ = "0.1.0"
