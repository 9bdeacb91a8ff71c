"""Two-layer nonlinear MPC for a ball-in-labyrinth game, with simulator and baselines."""

__version__ = "0.1.0"
