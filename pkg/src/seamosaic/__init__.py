"""Real-time seabed mapping pipeline.

Blocks: visual odometry with windowed bundle adjustment, RANSAC plane
fitting, incremental 2D image mosaicing with world-file export, planar
point-cloud projection, and a live stream service for operator viewers.
"""

__version__ = "0.1.0"
