"""Learned tri-category realism metric for LiDAR point clouds.

Submodules: ``geom`` (clouds, range images, IO), ``spatial`` (FPS/KNN),
``nn`` (layers, Adam, checkpoints), ``metric`` (the metric network),
``datagen`` (synthetic scene generators), ``baselines`` (Chamfer/MAE/MSE),
``upsample`` (vertical range-image up-sampling) and ``cli``.
"""

__version__ = "0.1.0"
