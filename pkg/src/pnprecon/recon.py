"""Poisson log-likelihood, its gradient, and MLEM/OSEM baselines."""

from dataclasses import dataclass

import numpy as np
import scipy.ndimage as ndi

from . import sim

__all__ = [
    "LikelihoodModel",
    "OsemConfig",
    "default_n_subsets",
    "log_likelihood",
    "ll_gradient",
    "mlem_step",
    "osem_reconstruct",
    "uniform_start",
    "mse",
    "gaussian_postfilter_sweep",
]


@dataclass(frozen=True)
class LikelihoodModel:
    """A system model paired with one observed sinogram.

    Measured data are integer counts; real-valued y is accepted so that
    noise-free experiments can set y to the exact expectation.
    """

    model: sim.SystemModel
    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.size != self.model.n_rows:
            raise ValueError("sinogram does not match the system model")
        if np.any(y < 0) or not np.all(np.isfinite(y)):
            raise ValueError("observed sinogram must be finite and nonnegative")
        object.__setattr__(self, "y", y.reshape(self.model.sino_shape()))

    @property
    def sensitivity(self):
        return self.model.sensitivity

    @property
    def mask(self):
        return self.model.mask


@dataclass(frozen=True)
class OsemConfig:
    n_iterations: int = 8
    n_subsets: int = 1

    def __post_init__(self):
        if self.n_iterations < 1 or self.n_subsets < 1:
            raise ValueError("n_iterations and n_subsets must be >= 1")


def default_n_subsets(n_angles, cap=14):
    """Largest divisor of n_angles not exceeding cap."""
    best = 1
    for d in range(1, cap + 1):
        if n_angles % d == 0:
            best = d
    return best


def _expected(lm, x):
    return sim.forward_project(lm.model, x).ravel()


def log_likelihood(lm, x):
    """Sum of y*ln(ybar) - ybar; the constant ln(y!) is omitted.

    Bins with ybar = 0 contribute 0 when y = 0 and -inf when y > 0.
    """
    ybar = _expected(lm, x)
    y = lm.y.ravel()
    if np.any((ybar == 0) & (y > 0)):
        return -np.inf
    pos = ybar > 0
    return float(np.sum(y[pos] * np.log(ybar[pos])) - np.sum(ybar))


def ll_gradient(lm, x):
    """Gradient A^T mult (y/ybar - 1); masked pixels get 0."""
    ybar = _expected(lm, x)
    y = lm.y.ravel()
    bad = (ybar == 0) & (y > 0)
    if np.any(bad):
        raise ZeroDivisionError(
            f"expected counts vanish at bin {int(np.argmax(bad))} with observed counts")
    ratio = np.zeros_like(ybar)
    pos = ybar > 0
    ratio[pos] = y[pos] / ybar[pos]
    grad = sim.back_project(lm.model, ratio - 1.0)
    grad.ravel()[~lm.mask.ravel()] = 0.0
    return grad


def _em_ratio_backproj(lm, x, rows=None):
    """A^T mult (y/ybar) restricted to the given sinogram rows."""
    ybar = _expected(lm, x)
    y = lm.y.ravel()
    bad = (ybar == 0) & (y > 0)
    if np.any(bad):
        raise ZeroDivisionError(
            f"expected counts vanish at bin {int(np.argmax(bad))} with observed counts")
    ratio = np.zeros_like(ybar)
    pos = ybar > 0
    ratio[pos] = y[pos] / ybar[pos]
    if rows is not None:
        keep = np.zeros_like(ratio)
        keep[rows] = ratio[rows]
        ratio = keep
    return sim.back_project(lm.model, ratio)


def mlem_step(lm, x):
    """One multiplicative EM update; zero-sensitivity pixels stay 0."""
    x = np.asarray(x, dtype=float)
    sens = lm.sensitivity.ravel()
    mask = sens > 0
    num = _em_ratio_backproj(lm, x).ravel()
    out = np.zeros_like(x.ravel())
    out[mask] = x.ravel()[mask] * num[mask] / sens[mask]
    return out.reshape(x.shape)


def _subset_rows(geom, n_subsets):
    rows = []
    for s in range(n_subsets):
        angles = np.arange(s, geom.n_angles, n_subsets)
        rows.append((angles[:, None] * geom.n_bins
                     + np.arange(geom.n_bins)[None, :]).ravel())
    return rows


def uniform_start(model):
    """All-ones image on unmasked pixels, the default EM initialization."""
    x0 = np.ones(model.n_pixels)
    x0[~model.mask.ravel()] = 0.0
    return x0.reshape((model.grid_size, model.grid_size))


def osem_reconstruct(lm, cfg, x0=None):
    """Ordered-subsets EM over angle-interleaved subsets.

    n_subsets = 1 reproduces plain MLEM bit for bit.
    """
    geom = lm.model.geometry
    if geom.n_angles % cfg.n_subsets != 0:
        raise ValueError("n_subsets must divide n_angles")
    x = uniform_start(lm.model) if x0 is None else np.asarray(x0, dtype=float).copy()
    if cfg.n_subsets == 1:
        for _ in range(cfg.n_iterations):
            x = mlem_step(lm, x)
        return x
    rows = _subset_rows(geom, cfg.n_subsets)
    sub_sens = []
    for r in rows:
        ones = np.zeros(lm.model.n_rows)
        ones[r] = 1.0
        sub_sens.append(sim.back_project(lm.model, ones).ravel())
    xf = x.ravel()
    for _ in range(cfg.n_iterations):
        for r, sens in zip(rows, sub_sens):
            mask = sens > 0
            num = _em_ratio_backproj(lm, xf, rows=r).ravel()
            new = np.zeros_like(xf)
            new[mask] = xf[mask] * num[mask] / sens[mask]
            xf = new
    return xf.reshape(x.shape)


def mse(a, b):
    """Mean squared error over all pixels."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.mean((a - b) ** 2))


def gaussian_postfilter_sweep(x_osem, x_ref, sigmas):
    """Pick the separable reflective-Gaussian sigma minimizing MSE to x_ref."""
    if len(sigmas) == 0:
        raise ValueError("sigmas must be nonempty")
    best_sigma = None
    best_err = np.inf
    best_img = None
    for sigma in sigmas:
        if sigma == 0:
            filt = np.asarray(x_osem, dtype=float).copy()
        else:
            filt = ndi.gaussian_filter(np.asarray(x_osem, dtype=float),
                                       sigma, mode="reflect")
        err = mse(filt, x_ref)
        if err < best_err:
            best_sigma, best_err, best_img = sigma, err, filt
    return best_sigma, best_img
