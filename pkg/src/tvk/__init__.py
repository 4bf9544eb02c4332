"""Two-view structure-from-motion toolkit.

Learned depth/motion estimation at desk scale (bootstrap, iterative and
refinement networks over a synthetic dataset generator) plus the classical
two-frame pipeline (normalized 8-point, RANSAC, reprojection refinement,
dense triangulation) used for comparison.
"""

__version__ = "0.1.0"
