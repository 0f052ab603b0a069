"""Coarse-to-fine articulated mesh recovery from single images, in numpy.

Modules: meshkit (meshes, hierarchy), artmodel (skinned body model),
camrender (projection, soft rasterizer), autodiff (tape engine), neural
(encoder, heads, MRGCN), losses, datagen, trainer, evaluation, cli.
"""

__version__ = "0.1.0"
