"""Sequential affordance reasoning on 3D Gaussian scenes, at desk scale.

Submodules: ``scene`` (data model, PLY and annotation I/O), ``datagen``
(procedural scenes and instructions), ``raster`` (tile rasterizer and blend
weights), ``lift`` (2D->3D feature lifting), ``autograd`` (the numpy
reverse-mode engine), ``model``, ``train``, ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
