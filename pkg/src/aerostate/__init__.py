"""State estimation and SLAM toolkit for a downward-camera quadrotor."""

__version__ = "0.1.0"
