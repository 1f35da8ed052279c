"""Learned monocular visual odometry from dense 3D flow, with occupancy-octree mapping."""

__version__ = "0.1.0"
