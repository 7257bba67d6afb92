"""Desk-scale supervised lobe-resection stack.

Planning operates on labeled anatomical point clouds in millimeters;
execution runs against a voxelized synthetic phantom under a
human-in-the-loop command protocol.
"""

from lobesim.geometry import (
    ClusterResult,
    DegenerateInputError,
    NeighborIndex,
    PrincipalAxes,
    Ray,
    RigidTransform,
    kabsch_align,
    kmeans,
    pca,
    ray_collides,
)

__all__ = [
    "ClusterResult",
    "DegenerateInputError",
    "NeighborIndex",
    "PrincipalAxes",
    "Ray",
    "RigidTransform",
    "kabsch_align",
    "kmeans",
    "pca",
    "ray_collides",
]
