"""Path-following MPC force/motion control with learned contact models."""

__version__ = "0.1.0"
