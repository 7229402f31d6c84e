"""Pixel-level domain adaptation toolkit.

A generator maps source-domain images plus a noise vector to target-styled
images, a discriminator tells adapted images from real target ones, and a
task network (classifier, optionally with a pose head) trains on source and
adapted pixels at the same time. Everything runs on a small numpy-backed
reverse-mode autodiff core in :mod:`pixelda.autodiff`.
"""

__version__ = "0.1.0"
