"""Desk-scale 2D emission-tomography Plug-and-Play ADMM reconstruction.

Subpackages: sim (phantoms, projector, Poisson data), recon (likelihood and
OSEM baselines), prox (penalized-likelihood data step), net (denoiser and
differentiation engine), train (two-phase learning), admm (the PnP loop),
cli (batch experiment commands).
"""

__version__ = "0.1.0"

from . import admm, net, prox, recon, sim, train  # noqa: F401
