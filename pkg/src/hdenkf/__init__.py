"""High-dimensional ensemble Kalman filtering with regularized forecast covariances."""

__version__ = "0.1.0"
