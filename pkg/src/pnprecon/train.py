"""Dataset construction, the two-term training loss, Adam, and the
two-phase protocol (PRE: supervised MSE only; JAC: MSE plus the
nonexpansiveness hinge on the sampled Jacobian spectral norm)."""

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import net, recon, sim
from .util import NumericalAbort, derive_seed

__all__ = [
    "DatasetItem",
    "Dataset",
    "TrainConfig",
    "AdamState",
    "build_dataset",
    "sample_tilde",
    "loss_and_grad",
    "adam_step",
    "train_phase",
    "TrainingLog",
    "ADAM_BETA1",
    "ADAM_BETA2",
    "ADAM_EPS",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class DatasetItem:
    phantom_id: int
    dose_scale: float
    seed: int
    x_noisy: np.ndarray     # OSEM reconstruction of the simulated counts
    x_ref: np.ndarray       # noise-free reference (dose-scaled activity)
    split: str              # "train" | "test"


@dataclass(frozen=True)
class Dataset:
    items: tuple

    def split(self, name):
        return [it for it in self.items if it.split == name]


@dataclass(frozen=True)
class TrainConfig:
    phase: str                  # "pre" | "jac"
    epochs: int
    learning_rate: float
    batch_size: int
    beta: float = 0.0
    alpha: float = 0.1
    epsilon: float = 0.05
    power_iters: int = 10
    seed: int = 0
    sigma_eval_samples: int = 8     # test-sigma samples logged per epoch

    def __post_init__(self):
        if self.phase not in ("pre", "jac"):
            raise ValueError("phase must be 'pre' or 'jac'")
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("invalid optimizer configuration")
        if self.beta < 0 or self.alpha < 0 or not 0 <= self.epsilon < 1:
            raise ValueError("invalid hinge hyperparameters")
        if self.phase == "pre" and self.beta != 0:
            raise ValueError("the PRE phase trains with beta = 0")


def item_model(base_model, dose_scale):
    """Acquisition model of one realization: the background estimate
    scales with the injected dose (it is derived from the data)."""
    return dataclasses.replace(base_model,
                               background=dose_scale * base_model.background)


def build_dataset(phantom_specs, geom, doses, base_seed, osem_cfg,
                  n_test_phantoms=1, background_fraction=0.2, norm_seed=0):
    """Simulate, reconstruct and pair every (phantom, dose) combination.

    doses is either one list shared by all phantoms or one list per
    phantom.  Each item's noise-free reference is the dose-scaled
    activity map: the image that actually produced the counts.  The last
    n_test_phantoms phantoms form the test split, so train and test
    phantoms are disjoint by construction.
    """
    n_phantoms = len(phantom_specs)
    if n_phantoms < 2:
        raise ValueError("need at least 2 phantoms for a nontrivial split")
    if not 1 <= n_test_phantoms < n_phantoms:
        raise ValueError("test phantoms must leave at least one for training")
    if np.ndim(doses[0]) == 0:
        doses = [list(doses)] * n_phantoms
    items = []
    for p, spec in enumerate(phantom_specs):
        activity, mu = sim.make_phantom(spec)
        model = sim.build_system_model(geom, mu, norm_seed=norm_seed)
        model = sim.with_background(model, activity, background_fraction)
        split = "test" if p >= n_phantoms - n_test_phantoms else "train"
        for d, dose in enumerate(doses[p]):
            seed = derive_seed(base_seed, p, d)
            counts = sim.simulate_counts(model, activity, dose, seed)
            lm = recon.LikelihoodModel(model=item_model(model, dose), y=counts)
            x_noisy = recon.osem_reconstruct(lm, osem_cfg)
            items.append(DatasetItem(
                phantom_id=p, dose_scale=float(dose), seed=seed,
                x_noisy=x_noisy, x_ref=dose * activity, split=split))
    return Dataset(items=tuple(items))


def sample_tilde(x_ref, d_out, kappa):
    """Convex combination kappa * x_ref + (1 - kappa) * d_out."""
    if not 0.0 <= kappa <= 1.0:
        raise ValueError("kappa must lie in [0, 1]")
    return kappa * np.asarray(x_ref, float) + (1.0 - kappa) * np.asarray(d_out, float)


def loss_and_grad(params, batch, cfg, rng, power_warm=None):
    """Batch loss  sum_b ||D(x_b) - ref_b||^2 + beta * hinge_b  and gradient.

    The hinge is evaluated at x_tilde drawn per element (fresh kappa), with
    the spectral norm estimated by warm-started power iteration; the same
    power-iteration direction is reused, frozen, inside the gradient.
    In the PRE phase the penalty is skipped entirely.
    """
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    loss_mse = 0.0
    loss_pen = 0.0
    gvec = np.zeros(net.n_params(params.arch))
    with_penalty = cfg.phase == "jac" and cfg.beta > 0
    for item in batch:
        out = net.forward(params, item.x_noisy)
        diff = out - item.x_ref
        loss_mse += float(np.sum(diff * diff))
        gvec += net.grad_to_vector(net.param_grad_mse(params, item.x_noisy,
                                                      item.x_ref))
        if not with_penalty:
            continue
        kappa = float(rng.uniform())
        x_tilde = sample_tilde(item.x_ref, out, kappa)
        key = (item.phantom_id, round(item.dose_scale, 12))
        u0 = power_warm.get(key) if power_warm is not None else None
        sigma, u = net.spectral_norm_l(
            params, x_tilde, max_iters=cfg.power_iters,
            seed=int(rng.integers(2 ** 62)), u0=u0)
        if power_warm is not None:
            power_warm[key] = u
        pen_grad, sigma_hat = net.param_grad_penalty(
            params, x_tilde, u, epsilon=cfg.epsilon, alpha=cfg.alpha)
        value, _ = net.hinge(sigma_hat, cfg.epsilon, cfg.alpha)
        loss_pen += value
        gvec += cfg.beta * net.grad_to_vector(pen_grad)
    loss_total = loss_mse + cfg.beta * loss_pen
    return loss_total, loss_mse, loss_pen, gvec


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(m=np.zeros(n), v=np.zeros(n), step=0)


def adam_step(params_vec, grad_vec, state, lr):
    """Standard bias-corrected Adam update on flat parameter vectors."""
    step = state.step + 1
    m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grad_vec
    v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grad_vec * grad_vec
    mhat = m / (1.0 - ADAM_BETA1 ** step)
    vhat = v / (1.0 - ADAM_BETA2 ** step)
    new_vec = params_vec - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
    return new_vec, AdamState(m=m, v=v, step=step)


@dataclass
class TrainingLog:
    adam_constants: str
    rows: list = field(default_factory=list)   # per-epoch dict rows

    HEADER = ("epoch", "loss_total", "loss_mse", "loss_pen",
              "test_mse", "test_sigma_max", "test_sigma_mean")

    def as_rows(self):
        return [[r[k] for k in self.HEADER] for r in self.rows]


def _test_metrics(params, test_items, cfg, rng):
    """Mean test MSE plus sampled test spectral norms for the epoch log."""
    if not test_items:
        return float("nan"), float("nan"), float("nan")
    mses = []
    outs = []
    for item in test_items:
        out = net.forward(params, item.x_noisy)
        outs.append(out)
        mses.append(recon.mse(out, item.x_ref))
    sigmas = []
    n = min(cfg.sigma_eval_samples, len(test_items))
    for j in range(n):
        idx = int(rng.integers(len(test_items)))
        kappa = float(rng.uniform())
        x_tilde = sample_tilde(test_items[idx].x_ref, outs[idx], kappa)
        sigma, _ = net.spectral_norm_l(params, x_tilde,
                                       max_iters=cfg.power_iters,
                                       seed=int(rng.integers(2 ** 62)))
        sigmas.append(sigma)
    return (float(np.mean(mses)),
            float(np.max(sigmas)) if sigmas else float("nan"),
            float(np.mean(sigmas)) if sigmas else float("nan"))


def train_phase(params0, dataset, cfg):
    """Epoch loop over shuffled seeded batches; returns (params, log)."""
    train_items = dataset.split("train")
    test_items = dataset.split("test")
    if not train_items:
        raise ValueError("dataset has no training items")
    rng = np.random.default_rng(cfg.seed)
    vec = net.params_to_vector(params0)
    state = AdamState.zeros(vec.size)
    log = TrainingLog(adam_constants=(
        f"adam_beta1={ADAM_BETA1},adam_beta2={ADAM_BETA2},adam_eps={ADAM_EPS}"))
    power_warm = {}
    arch = params0.arch
    n = len(train_items)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        tot = tot_mse = tot_pen = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = [train_items[i] for i in order[start:start + cfg.batch_size]]
            params = net.vector_to_params(arch, vec)
            loss, mse_part, pen_part, gvec = loss_and_grad(
                params, batch, cfg, rng, power_warm=power_warm)
            if not np.isfinite(loss):
                raise NumericalAbort(
                    f"non-finite loss at epoch {epoch}, batch start {start}")
            vec, state = adam_step(vec, gvec, state, cfg.learning_rate)
            tot += loss
            tot_mse += mse_part
            tot_pen += pen_part
        params = net.vector_to_params(arch, vec)
        test_mse, sig_max, sig_mean = _test_metrics(params, test_items, cfg, rng)
        log.rows.append({
            "epoch": epoch,
            "loss_total": tot / n,
            "loss_mse": tot_mse / n,
            "loss_pen": tot_pen / n,
            "test_mse": test_mse,
            "test_sigma_max": sig_max,
            "test_sigma_mean": sig_mean,
        })
    return net.vector_to_params(arch, vec), log
