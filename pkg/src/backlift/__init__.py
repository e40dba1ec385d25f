"""Multi-view 2D feature back-projection onto triangle meshes and few-shot
3D keypoint detection via soft assignment optimization."""

__version__ = "0.1.0"
