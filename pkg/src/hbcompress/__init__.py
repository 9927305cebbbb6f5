"""Learned two-decoder (Heegard-Berger) compression of a Gaussian source with side information.

Modules: ``diffengine`` (reverse-mode autodiff and MLPs), ``sampling``,
``bounds`` (closed-form rate-distortion bounds and finite-alphabet
information measures), ``source``, ``schemes`` (joint, marginal and
conditional compressors), ``trainer``, ``codec`` (arithmetic coding),
``viz`` and ``cli``.
"""

__version__ = "0.1.0"
