"""idclab: a desk-scale image difference captioning lab.

Submodules: ``tensor`` (autodiff), ``model`` (captioner), ``imaging`` (scenes,
rendering, augmentation), ``captions``, ``dataset``, ``metrics``,
``training`` and ``cli``.
"""

__version__ = "0.1.0"
