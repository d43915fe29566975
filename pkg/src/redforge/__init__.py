"""Joint shape retrieval and part-based deformation for partial point clouds."""

__version__ = "0.1.0"
