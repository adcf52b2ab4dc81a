"""Radiance fields trained and rendered with depth-guided near-surface sampling.

Modules:

* ``geom``: pinhole cameras, rays, projection and back-projection
* ``dataio``: datasets on disk, synthetic scenes, PNG and PLY files
* ``pointcloud``: refined point cloud built from multi-view depth
* ``depthmap``: cloud projection and hole filling
* ``sampling``: near-surface, full-range and inverse-CDF ray samples
* ``field``: encoded MLP, hand-written backprop, ADAM, checkpoints
* ``render``: compositing, ray rendering, loss and PSNR
* ``trainer``: training loop, evaluation and sweeps
* ``cli``: the ``nsnerf`` command
"""

__version__ = "0.1.0"
