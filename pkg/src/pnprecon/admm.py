"""The Plug-and-Play ADMM loop, its fixed-point diagnostic, and rho sweeps.

Per iteration:  x <- prox of -LL at (z - u);  z <- D(x + u);  u <- u + x - z.
The recorded primal residual is ||x - z|| and the dual residual is
rho * ||z_new - z_old||, both over unmasked pixels; each must vanish for
the scheme to have converged.
"""

from dataclasses import dataclass, field

import numpy as np

from . import net, prox, recon
from .util import NumericalAbort

__all__ = ["AdmmConfig", "AdmmState", "History", "SweepReport", "admm_pnp",
           "apply_T", "rho_sweep", "default_rho_grid"]


@dataclass(frozen=True)
class AdmmConfig:
    prox: prox.ProxConfig
    n_iterations: int = 40
    record_t_residual: bool = False

    def __post_init__(self):
        if self.n_iterations < 1:
            raise ValueError("need at least one iteration")

    @property
    def rho(self):
        return self.prox.rho

    @classmethod
    def make(cls, rho, n_iterations=40, n_inner=30, tol=1e-8,
             record_t_residual=False):
        return cls(prox=prox.ProxConfig(rho=rho, n_inner=n_inner, tol=tol),
                   n_iterations=n_iterations,
                   record_t_residual=record_t_residual)


@dataclass
class AdmmState:
    """Post-update iterates handed to on_iterate observers."""

    x: np.ndarray
    z: np.ndarray
    u: np.ndarray
    k: int


@dataclass
class History:
    rho: float
    primal: list = field(default_factory=list)
    dual: list = field(default_factory=list)
    log_likelihood: list = field(default_factory=list)
    mse: list = field(default_factory=list)          # empty when no reference
    t_residual: list = field(default_factory=list)   # empty unless recorded

    HEADER = ("iteration", "primal_residual_norm", "dual_residual_norm",
              "log_likelihood", "mse_vs_ref", "t_residual")

    def __len__(self):
        return len(self.primal)

    def as_rows(self):
        rows = []
        for k in range(len(self.primal)):
            rows.append([
                k + 1,
                self.primal[k],
                self.dual[k],
                self.log_likelihood[k],
                self.mse[k] if self.mse else "",
                self.t_residual[k] if self.t_residual else "",
            ])
        return rows


def _as_denoiser(denoiser):
    if isinstance(denoiser, net.DenoiserParams):
        params = denoiser
        return lambda img: net.forward(params, img)
    if callable(denoiser):
        return denoiser
    raise TypeError("denoiser must be DenoiserParams or a callable image -> image")


def _masked_norm(arr, mask):
    return float(np.linalg.norm(arr.ravel()[mask.ravel()]))


def admm_pnp(lm, denoiser, cfg, z0=None, x_ref=None, on_iterate=None):
    """Run the Plug-and-Play loop; returns (final x, History).

    z0 defaults to an OSEM reconstruction (8 iterations, interleaved
    subsets) and u starts at zero.  The prox is warm-started with the
    previous x iterate (first call: z0).  on_iterate(state: AdmmState),
    when given, sees every post-update state.
    """
    denoise = _as_denoiser(denoiser)
    mask = lm.mask
    if z0 is None:
        n_sub = recon.default_n_subsets(lm.model.geometry.n_angles)
        z0 = recon.osem_reconstruct(lm, recon.OsemConfig(8, n_sub))
    z = np.asarray(z0, dtype=float).copy()
    if not np.all(np.isfinite(z)):
        raise ValueError("z0 must be finite")
    u = np.zeros_like(z)
    x_warm = np.clip(z, 0.0, None)
    hist = History(rho=cfg.rho)
    for k in range(cfg.n_iterations):
        x = prox.prox_neg_ll(lm, z - u, cfg.prox, x_warm)
        z_new = denoise(x + u)
        u = u + x - z_new
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z_new))
                and np.all(np.isfinite(u))):
            raise NumericalAbort(f"non-finite iterate at iteration {k + 1}")
        hist.primal.append(_masked_norm(x - z_new, mask))
        hist.dual.append(cfg.rho * _masked_norm(z_new - z, mask))
        hist.log_likelihood.append(recon.log_likelihood(lm, x))
        if x_ref is not None:
            hist.mse.append(recon.mse(x, x_ref))
        z = z_new
        x_warm = x
        if cfg.record_t_residual:
            w = z - u
            tw = _apply_t_general(
                lambda img: prox.prox_neg_ll(lm, img, cfg.prox, x_warm),
                denoise, w)
            hist.t_residual.append(_masked_norm(tw - w, mask))
        if on_iterate is not None:
            on_iterate(AdmmState(x=x, z=z, u=u, k=k + 1))
    return x, hist


def _apply_t_general(prox_fn, denoise_fn, w):
    """T(w) = w/2 + (2 D - Id)(2 Prox - Id)(w) / 2."""
    w = np.asarray(w, dtype=float)
    r = 2.0 * prox_fn(w) - w
    return 0.5 * w + 0.5 * (2.0 * denoise_fn(r) - r)


def apply_T(lm, denoiser, cfg, w):
    """One application of the fixed-point operator equivalent to an ADMM step.

    ||T(w) - w|| vanishes exactly at the scheme's fixed points; it is a
    diagnostic, not part of the iteration itself.
    """
    denoise = _as_denoiser(denoiser)
    if not np.all(np.isfinite(np.asarray(w, dtype=float))):
        raise ValueError("w must be finite")
    x_warm = np.clip(np.asarray(w, dtype=float), 0.0, None)
    return _apply_t_general(
        lambda img: prox.prox_neg_ll(lm, img, cfg.prox, x_warm),
        denoise, w)


@dataclass
class SweepReport:
    rhos: list
    histories: list          # one History per rho
    final_mse: list          # nan when no reference
    primal_ratio: list       # residual at K over residual at 1
    dual_ratio: list
    meets_threshold: list    # both ratios < 0.1
    primal_monotone: list    # non-increasing curve (5% slack)
    dual_monotone: list

    CURVE_HEADER = ("rho", "iteration", "primal_residual_norm",
                    "dual_residual_norm", "log_likelihood", "mse_vs_ref")
    SUMMARY_HEADER = ("rho", "final_primal", "final_dual", "primal_ratio",
                      "dual_ratio", "meets_threshold", "primal_monotone",
                      "dual_monotone", "final_log_likelihood", "final_mse")

    def curve_rows(self):
        rows = []
        for rho, hist in zip(self.rhos, self.histories):
            for k in range(len(hist)):
                rows.append([rho, k + 1, hist.primal[k], hist.dual[k],
                             hist.log_likelihood[k],
                             hist.mse[k] if hist.mse else ""])
        return rows

    def summary_rows(self):
        rows = []
        for i, (rho, hist) in enumerate(zip(self.rhos, self.histories)):
            rows.append([rho, hist.primal[-1], hist.dual[-1],
                         self.primal_ratio[i], self.dual_ratio[i],
                         int(self.meets_threshold[i]),
                         int(self.primal_monotone[i]),
                         int(self.dual_monotone[i]),
                         hist.log_likelihood[-1],
                         self.final_mse[i]])
        return rows


def _is_monotone(curve, slack=0.05):
    c = np.asarray(curve)
    return bool(np.all(c[1:] <= c[:-1] * (1.0 + slack)))


def rho_sweep(lm, denoiser, rhos, n_iterations=40, z0=None, x_ref=None,
              n_inner=30, tol=1e-8):
    """Run admm_pnp once per rho and label each residual curve."""
    rhos = list(rhos)
    if not rhos or any(r <= 0 for r in rhos):
        raise ValueError("rhos must be a nonempty list of positive values")
    report = SweepReport(rhos=rhos, histories=[], final_mse=[],
                         primal_ratio=[], dual_ratio=[], meets_threshold=[],
                         primal_monotone=[], dual_monotone=[])
    for rho in rhos:
        cfg = AdmmConfig.make(rho, n_iterations=n_iterations,
                              n_inner=n_inner, tol=tol)
        x, hist = admm_pnp(lm, denoiser, cfg, z0=z0, x_ref=x_ref)
        pr = hist.primal[-1] / hist.primal[0] if hist.primal[0] > 0 else 0.0
        dr = hist.dual[-1] / hist.dual[0] if hist.dual[0] > 0 else 0.0
        report.histories.append(hist)
        report.final_mse.append(hist.mse[-1] if hist.mse else float("nan"))
        report.primal_ratio.append(pr)
        report.dual_ratio.append(dr)
        report.meets_threshold.append(pr < 0.1 and dr < 0.1)
        report.primal_monotone.append(_is_monotone(hist.primal))
        report.dual_monotone.append(_is_monotone(hist.dual))
    return report


def default_rho_grid(lm, denoiser, z0=None, n_values=8, decades=4.0,
                     pilot_iterations=20, pilot_grid=None):
    """Log-spaced grid centred on the pilot rho with the smallest
    iteration-20 primal residual."""
    if pilot_grid is None:
        scale = float(np.mean(lm.sensitivity[lm.mask]))
        pilot_grid = [scale * f for f in (0.01, 0.1, 1.0, 10.0)]
    best_rho, best_res = None, np.inf
    for rho in pilot_grid:
        cfg = AdmmConfig.make(rho, n_iterations=pilot_iterations)
        _, hist = admm_pnp(lm, denoiser, cfg, z0=z0)
        if hist.primal[-1] < best_res:
            best_rho, best_res = rho, hist.primal[-1]
    half = decades / 2.0
    return list(best_rho * np.logspace(-half, half, n_values))
