"""Building-scale RGB-D reconstruction: alignment, scan-to-map odometry,
loop closure, multi-session pose graphs and segmented TSDF fusion."""

__version__ = "0.1.0"
