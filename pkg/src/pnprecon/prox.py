"""Penalized-likelihood proximal solver for the ADMM data step.

Solves  argmin_{x >= 0}  -LL(y, x) + (rho/2) ||x - v||^2  by separable
surrogate iterations with a closed-form per-pixel quadratic root.  v may
contain negative entries; the chosen root is nonnegative regardless.
"""

from dataclasses import dataclass

import numpy as np

from . import recon

__all__ = ["ProxConfig", "surrogate_root", "prox_neg_ll",
           "subproblem_objective", "kkt_residual"]


@dataclass(frozen=True)
class ProxConfig:
    rho: float
    n_inner: int = 30
    tol: float = 1e-8

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive (rho = 0 is the plain ML "
                             "problem; use the recon module)")
        if self.n_inner < 1 or self.tol < 0:
            raise ValueError("invalid inner-iteration configuration")


def surrogate_root(s, b, v, rho):
    """Nonnegative root of rho x^2 + (s - rho v) x - b = 0.

    At rho = 0 the root degenerates to the plain EM update b / s.  The
    b-form is used when rho v - s < 0 to avoid cancellation.
    """
    s = np.asarray(s, dtype=float)
    b = np.asarray(b, dtype=float)
    v = np.asarray(v, dtype=float)
    if rho == 0:
        return b / s
    c = rho * v - s
    disc = np.sqrt(c * c + 4.0 * rho * b)
    with np.errstate(invalid="ignore", divide="ignore"):
        stable = np.where(c < 0,
                          np.divide(2.0 * b, disc - c,
                                    out=np.zeros_like(b), where=(disc - c) > 0),
                          (c + disc) / (2.0 * rho))
    return stable


def prox_neg_ll(lm, v, cfg, x_init, callback=None):
    """Surrogate iterations for the penalized Poisson subproblem.

    Stops after cfg.n_inner iterations or when the relative iterate change
    drops below cfg.tol.  callback(it, x), when given, sees every iterate.
    """
    v = np.asarray(v, dtype=float).ravel()
    x = np.asarray(x_init, dtype=float).ravel().copy()
    if v.size != lm.model.n_pixels or x.size != lm.model.n_pixels:
        raise ValueError("image size does not match the system model")
    sens = lm.sensitivity.ravel()
    mask = sens > 0
    if not np.any(mask):
        raise ValueError("system model has all-zero sensitivity")
    # the iteration needs a strictly positive start: exact zeros are
    # absorbing for the multiplicative likelihood term
    pos = x[(x > 0) & mask]
    floor = 1e-8 * (float(pos.mean()) if pos.size else 1.0)
    x = np.maximum(x, floor)
    x[~mask] = 0.0
    shape = (lm.model.grid_size, lm.model.grid_size)

    A = lm.model.weights
    At = lm.model.weights_t
    mult = lm.model.mult_factors
    bg = lm.model.background
    y = lm.y.ravel()
    counts = y > 0
    sm, vm = sens[mask], v[mask]
    for it in range(cfg.n_inner):
        ybar = mult * (A @ x) + bg
        if np.any(ybar[counts] == 0):
            bad = counts & (ybar == 0)
            raise ZeroDivisionError(
                f"expected counts vanish at bin {int(np.argmax(bad))} "
                "with observed counts")
        ratio = np.divide(y, ybar, out=np.zeros_like(ybar), where=ybar > 0)
        b = x * (At @ (mult * ratio))
        x_new = np.zeros_like(x)
        x_new[mask] = surrogate_root(sm, b[mask], vm, cfg.rho)
        delta = np.linalg.norm(x_new - x)
        denom = max(np.linalg.norm(x), 1e-30)
        x = x_new
        if callback is not None:
            callback(it, x.reshape(shape))
        if delta / denom < cfg.tol:
            break
    return x.reshape(shape)


def subproblem_objective(lm, v, rho, x):
    """-LL(x) + (rho/2) ||x - v||^2 over unmasked pixels."""
    v = np.asarray(v, dtype=float).ravel()
    x = np.asarray(x, dtype=float).ravel()
    mask = lm.mask.ravel()
    pen = 0.5 * rho * float(np.sum((x[mask] - v[mask]) ** 2))
    return -recon.log_likelihood(lm, x) + pen


def kkt_residual(lm, v, rho, x):
    """max_j |min(x_j, g_j)| with g the subproblem gradient; 0 at a minimizer."""
    v = np.asarray(v, dtype=float).ravel()
    x = np.asarray(x, dtype=float).ravel()
    g = (-recon.ll_gradient(lm, x).ravel() + rho * (x - v))
    mask = lm.mask.ravel()
    stat = np.minimum(x[mask], g[mask])
    return float(np.max(np.abs(stat))) if stat.size else 0.0
