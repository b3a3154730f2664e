"""Scale-aware direct monocular visual odometry with depth-prediction residuals."""

__version__ = "0.1.0"
