"""deskgrasp: simulation-based Bayesian grasp planning on a tabletop toy world."""

__version__ = "0.1.0"
