"""Shape completion of partial point clouds from a class-level generic primitive.

Modules: ``cloud`` (point clouds, k-d tree queries), ``formats`` (PLY and
manifests), ``autodiff`` (tensors, Adam), ``gp`` (primitive construction,
MLS), ``registration`` (ICP), ``gfs`` (deformation labels), ``net`` (the
completion network), ``pipeline`` (patches, views, datasets), ``metrics``
and ``cli``.
"""

__version__ = "0.1.0"
