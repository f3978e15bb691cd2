"""PETS and DR-PETS planning toolkit.

Model-based planning with a probabilistic ensemble dynamics model and
CEM-based MPC, plus a distributionally robust planning objective that
penalizes the ensemble return by an epsilon-scaled norm of per-member
objective gradients. Includes desk-scale pendulum and cartpole swing-up
simulators and a perturbation-sweep experiment harness.
"""

from ._kernels import active_backend

__all__ = ["active_backend"]
__version__ = "0.1.0"
