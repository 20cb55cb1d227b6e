"""Distributionally robust contextual MPC for collision avoidance.

Submodules:

* ``dynamics``: kinematic bicycle model and its Euler discretization.
* ``rkhs``: RBF kernels, conditional kernel mean embeddings, MMD and radii.
* ``predict``: constant-velocity and kernel-embedding obstacle predictors.
* ``drcvar``: distributionally robust CVaR collision rows.
* ``nlpsolve``: augmented Lagrangian / SLSQP solver and gradient checker.
* ``planner``: receding-horizon NLP construction (NMPC, CMPC, DRCMPC).
* ``sim``: closed-loop simulation, obstacle behaviors and scenarios.
* ``experiments``: datasets, subset selection, campaigns and MMD tables.
"""

__version__ = "0.1.0"
