"""Residual convolutional denoiser and its differentiation engine.

The operator is  D(x) = s * (w + cnn(w))  with  w = x / s  and s the mean
of the positive entries of x (floored at 1e-12, treated as a constant in
all derivatives).  Because s cancels in the input Jacobian, jvp and vjp
are exactly the Jacobian products of the unnormalized residual stack
evaluated at w.

Implemented products:
  jvp / vjp            first-order input derivatives,
  param_grad_mse       d ||D(x) - target||^2 / d theta,
  param_grad_penalty   d h(||2 jvp(u) - u||) / d theta for a frozen unit u,
                       which differentiates through the jvp graph (the
                       mixed second-order path needed by the hinge loss),
  spectral_norm_l      power iteration for sigma(2 J - I).

Convolutions are zero-padded 'same' and run as im2col matmuls so every
adjoint is the literal matrix transpose.
"""

import math
from dataclasses import dataclass

import numpy as np

from .util import atomic_write_bytes

__all__ = [
    "ArchConfig",
    "DenoiserParams",
    "ParamGradient",
    "init_params",
    "identity_params",
    "input_scale",
    "forward",
    "jvp",
    "vjp",
    "spectral_norm_l",
    "param_grad_mse",
    "param_grad_penalty",
    "hinge",
    "params_to_vector",
    "vector_to_params",
    "grad_to_vector",
    "save_checkpoint",
    "load_checkpoint",
]

_NET_MAGIC = b"PNPNET1\x00"
_ACTIVATIONS = {"softplus": 0, "relu": 1}
_LOG2 = math.log(2.0)
_SCALE_FLOOR = 1e-12


@dataclass(frozen=True)
class ArchConfig:
    n_layers: int = 5
    channels: int = 16
    kernel: int = 3
    activation: str = "softplus"
    global_skip: bool = True

    def __post_init__(self):
        if self.n_layers < 2:
            raise ValueError("need at least 2 layers")
        if self.channels < 1:
            raise ValueError("need at least 1 channel")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not self.global_skip:
            raise ValueError("the operator is defined with a global skip")

    def layer_shapes(self):
        """(out_channels, in_channels) per layer: 1 -> C -> ... -> C -> 1."""
        chans = [1] + [self.channels] * (self.n_layers - 1) + [1]
        return [(chans[i + 1], chans[i]) for i in range(self.n_layers)]


@dataclass
class DenoiserParams:
    arch: ArchConfig
    kernels: list       # per layer (c_out, c_in, k, k)
    biases: list        # per layer (c_out,)

    def __post_init__(self):
        shapes = self.arch.layer_shapes()
        if len(self.kernels) != self.arch.n_layers or len(self.biases) != self.arch.n_layers:
            raise ValueError("parameter count does not match architecture")
        k = self.arch.kernel
        for (co, ci), ker, b in zip(shapes, self.kernels, self.biases):
            if ker.shape != (co, ci, k, k) or b.shape != (co,):
                raise ValueError("parameter shapes do not match architecture")
            if not (np.all(np.isfinite(ker)) and np.all(np.isfinite(b))):
                raise ValueError("parameters must be finite")


@dataclass
class ParamGradient:
    kernels: list
    biases: list


def init_params(arch, seed, scale=0.1):
    """Small random hidden layers, zero last layer: D starts as identity."""
    rng = np.random.default_rng(seed)
    kernels = []
    biases = []
    k = arch.kernel
    for i, (co, ci) in enumerate(arch.layer_shapes()):
        fan_in = ci * k * k
        if i == arch.n_layers - 1:
            ker = np.zeros((co, ci, k, k))
        else:
            ker = rng.normal(0.0, scale / math.sqrt(fan_in), size=(co, ci, k, k))
        kernels.append(ker)
        biases.append(np.zeros(co))
    return DenoiserParams(arch=arch, kernels=kernels, biases=biases)


def identity_params(arch):
    """All-zero parameters: the residual branch vanishes and D = Id."""
    kernels = [np.zeros((co, ci, arch.kernel, arch.kernel))
               for co, ci in arch.layer_shapes()]
    biases = [np.zeros(co) for co, _ in arch.layer_shapes()]
    return DenoiserParams(arch=arch, kernels=kernels, biases=biases)


# ---------------------------------------------------------------------------
# activations (value, first and second derivative)


def _sigmoid(t):
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _act(name, t):
    if name == "softplus":
        # shifted so that act(0) = 0, keeping zero parameters = identity
        return np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t))) - _LOG2
    return np.maximum(t, 0.0)


def _act_d(name, t):
    if name == "softplus":
        return _sigmoid(t)
    return (t > 0).astype(float)


def _act_dd(name, t):
    if name == "softplus":
        s = _sigmoid(t)
        return s * (1.0 - s)
    return np.zeros_like(t)


# ---------------------------------------------------------------------------
# im2col convolution core


def _im2col(x, k):
    """(C, H, W) -> (H*W, C*k*k) patches with zero 'same' padding."""
    c, h, w = x.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    return win.transpose(1, 2, 0, 3, 4).reshape(h * w, c * k * k)


def _col2im(cols, c, h, w, k):
    """Exact adjoint of _im2col: scatter-add patches back."""
    pad = k // 2
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad))
    cols = cols.reshape(h, w, c, k, k)
    for di in range(k):
        for dj in range(k):
            xp[:, di:di + h, dj:dj + w] += cols[:, :, :, di, dj].transpose(2, 0, 1)
    return xp[:, pad:pad + h, pad:pad + w]


def _conv(cols, kernel, bias, h, w):
    co = kernel.shape[0]
    out = cols @ kernel.reshape(co, -1).T
    if bias is not None:
        out = out + bias[None, :]
    return out.T.reshape(co, h, w)


def _conv_adjoint(gam, kernel, h, w):
    co, ci, k, _ = kernel.shape
    cols_grad = gam.reshape(co, h * w).T @ kernel.reshape(co, -1)
    return _col2im(cols_grad, ci, h, w, k)


def _conv_param_grad(cols, gam, kernel_shape):
    co, ci, k, _ = kernel_shape
    gflat = gam.reshape(co, -1)
    dk = (gflat @ cols).reshape(co, ci, k, k)
    db = gflat.sum(axis=1)
    return dk, db


# ---------------------------------------------------------------------------
# forward and first-order products


def input_scale(x):
    """Mean of the positive entries, floored; constant in all Jacobians."""
    x = np.asarray(x, dtype=float)
    pos = x[x > 0]
    s = float(pos.mean()) if pos.size else 0.0
    return max(s, _SCALE_FLOOR)


def _stack_forward(params, w):
    """Run the residual stack at w; cache per-layer inputs and pre-activations."""
    arch = params.arch
    act = arch.activation
    h, wd = w.shape
    a = w[None, :, :]
    cols_list = []
    z_list = []
    for layer in range(arch.n_layers):
        cols = _im2col(a, arch.kernel)
        z = _conv(cols, params.kernels[layer], params.biases[layer], h, wd)
        cols_list.append(cols)
        z_list.append(z)
        if layer < arch.n_layers - 1:
            a = _act(act, z)
    return z_list, cols_list


def _stack_eval(params, w):
    """Residual-branch output at an already-normalized input."""
    z_list, _ = _stack_forward(params, w)
    return z_list[-1][0]


def forward(params, x):
    """Apply the denoiser: scale-normalize, residual CNN, rescale."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("denoiser input must be finite")
    s = input_scale(x)
    w = x / s
    z_list, _ = _stack_forward(params, w)
    # algebraically s * (w + z_L); written so zero residual returns x exactly
    return x + s * z_list[-1][0]


def linearization_cache(params, x):
    """Activation derivatives of the primal chain at x, computed once.

    jvp/vjp at a fixed x depend on the primal pass only through these;
    power iteration reuses the cache across all of its products.
    """
    x = np.asarray(x, dtype=float)
    s = input_scale(x)
    z_list, _ = _stack_forward(params, x / s)
    act = params.arch.activation
    return [_act_d(act, z) for z in z_list[:-1]]


def _jvp_cached(params, dacts, tan):
    arch = params.arch
    h, wd = tan.shape
    t = tan[None, :, :]
    for layer in range(arch.n_layers):
        zt = _conv(_im2col(t, arch.kernel), params.kernels[layer], None, h, wd)
        if layer < arch.n_layers - 1:
            t = dacts[layer] * zt
        else:
            t = zt
    return tan + t[0]


def _vjp_cached(params, dacts, cot):
    arch = params.arch
    h, wd = cot.shape
    g = cot[None, :, :]
    for layer in range(arch.n_layers - 1, -1, -1):
        g = _conv_adjoint(g, params.kernels[layer], h, wd)
        if layer > 0:
            g = dacts[layer - 1] * g
    return cot + g[0]


def jvp(params, x, tan):
    """Jacobian-vector product of forward at x (s held constant)."""
    x = np.asarray(x, dtype=float)
    tan = np.asarray(tan, dtype=float)
    if tan.shape != x.shape:
        raise ValueError("tangent shape mismatch")
    return _jvp_cached(params, linearization_cache(params, x), tan)


def vjp(params, x, cot):
    """Jacobian-transpose-vector product of forward at x."""
    x = np.asarray(x, dtype=float)
    cot = np.asarray(cot, dtype=float)
    if cot.shape != x.shape:
        raise ValueError("cotangent shape mismatch")
    return _vjp_cached(params, linearization_cache(params, x), cot)


def spectral_norm_l(params, x, max_iters=10, tol=1e-7, seed=0, u0=None):
    """Power iteration for sigma(J_L) with L = 2 D - Id at the point x.

    Iterates u <- normalize(J^T J u); returns (||J u||, u) after at most
    max_iters applications or once the estimate changes by less than tol.
    The returned sigma is always a valid lower bound on the true norm.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    x = np.asarray(x, dtype=float)
    if u0 is None:
        rng = np.random.default_rng(seed)
        u = rng.standard_normal(x.shape)
    else:
        u = np.asarray(u0, dtype=float).copy()
    u /= np.linalg.norm(u)

    dacts = linearization_cache(params, x)

    def j_apply(v):
        return 2.0 * _jvp_cached(params, dacts, v) - v

    def jt_apply(v):
        return 2.0 * _vjp_cached(params, dacts, v) - v

    sigma = None
    for _ in range(max_iters):
        ju = j_apply(u)
        new_sigma = float(np.linalg.norm(ju))
        if sigma is not None and abs(new_sigma - sigma) < tol:
            sigma = new_sigma
            break
        sigma = new_sigma
        w = jt_apply(ju)
        nw = np.linalg.norm(w)
        if nw == 0:
            break
        u = w / nw
    sigma = float(np.linalg.norm(j_apply(u)))
    return sigma, u


# ---------------------------------------------------------------------------
# parameter gradients


def _zero_grad(params):
    return ParamGradient(kernels=[np.zeros_like(k) for k in params.kernels],
                         biases=[np.zeros_like(b) for b in params.biases])


def param_grad_mse(params, x, target):
    """Gradient of ||forward(x) - target||^2 w.r.t. every parameter."""
    x = np.asarray(x, dtype=float)
    target = np.asarray(target, dtype=float)
    if target.shape != x.shape:
        raise ValueError("target shape mismatch")
    arch = params.arch
    act = arch.activation
    s = input_scale(x)
    w = x / s
    z_list, cols_list = _stack_forward(params, w)
    h, wd = w.shape
    out = x + s * z_list[-1][0]
    grad = _zero_grad(params)
    g = (s * 2.0 * (out - target))[None, :, :]
    for layer in range(arch.n_layers - 1, -1, -1):
        dk, db = _conv_param_grad(cols_list[layer], g,
                                  params.kernels[layer].shape)
        grad.kernels[layer] += dk
        grad.biases[layer] += db
        if layer > 0:
            g = _conv_adjoint(g, params.kernels[layer], h, wd)
            g = _act_d(act, z_list[layer - 1]) * g
    return grad


def hinge(sigma, epsilon, alpha):
    """max(sigma + epsilon - 1, 0)^(1+alpha) and its derivative in sigma."""
    slack = sigma + epsilon - 1.0
    if slack <= 0:
        return 0.0, 0.0
    return slack ** (1.0 + alpha), (1.0 + alpha) * slack ** alpha


def param_grad_penalty(params, x_tilde, u_fixed, epsilon=0.05, alpha=0.1):
    """Gradient w.r.t. theta of h(||2 jvp(theta; x_tilde, u) - u||), u frozen.

    Differentiates through the jvp computation graph, so both the tangent
    chain and the primal pre-activations contribute (the latter through
    the second derivative of the activation).  Returns (grad, sigma_hat).
    """
    x_tilde = np.asarray(x_tilde, dtype=float)
    u = np.asarray(u_fixed, dtype=float)
    if u.shape != x_tilde.shape:
        raise ValueError("direction shape mismatch")
    nu = np.linalg.norm(u)
    if abs(nu - 1.0) > 1e-8:
        raise ValueError("u_fixed must be a unit vector")
    arch = params.arch
    act = arch.activation
    n_layers = arch.n_layers
    k = arch.kernel
    s = input_scale(x_tilde)
    w = x_tilde / s
    h, wd = w.shape

    # primal + tangent forward, caching everything the reverse sweep needs
    z_list, cols_a = _stack_forward(params, w)
    t = u[None, :, :]
    zt_list = []
    cols_t = []
    for layer in range(n_layers):
        cols = _im2col(t, k)
        zt = _conv(cols, params.kernels[layer], None, h, wd)
        cols_t.append(cols)
        zt_list.append(zt)
        if layer < n_layers - 1:
            t = _act_d(act, z_list[layer]) * zt

    g_vec = u + 2.0 * zt_list[-1][0]
    sigma = float(np.linalg.norm(g_vec))
    value, slope = hinge(sigma, epsilon, alpha)
    grad = _zero_grad(params)
    if slope == 0.0 or sigma == 0.0:
        return grad, sigma

    gbar = (g_vec / sigma)[None, :, :]
    zt_bar = 2.0 * gbar                     # d sigma / d zt_L
    z_bar = np.zeros_like(z_list[-1])       # last layer has no activation
    for layer in range(n_layers - 1, -1, -1):
        dk_t, _ = _conv_param_grad(cols_t[layer], zt_bar,
                                   params.kernels[layer].shape)
        dk_a, db_a = _conv_param_grad(cols_a[layer], z_bar,
                                      params.kernels[layer].shape)
        grad.kernels[layer] += dk_t + dk_a
        grad.biases[layer] += db_a
        if layer == 0:
            break
        t_bar = _conv_adjoint(zt_bar, params.kernels[layer], h, wd)
        a_bar = _conv_adjoint(z_bar, params.kernels[layer], h, wd)
        zp = z_list[layer - 1]
        d1 = _act_d(act, zp)
        zt_bar = d1 * t_bar
        z_bar = _act_dd(act, zp) * zt_list[layer - 1] * t_bar + d1 * a_bar

    for layer in range(n_layers):
        grad.kernels[layer] *= slope
        grad.biases[layer] *= slope
    return grad, sigma


# ---------------------------------------------------------------------------
# flattening helpers (Adam and checkpoints operate on one vector)


def params_to_vector(params):
    parts = []
    for ker, b in zip(params.kernels, params.biases):
        parts.append(ker.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts)


def grad_to_vector(grad):
    parts = []
    for ker, b in zip(grad.kernels, grad.biases):
        parts.append(ker.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts)


def vector_to_params(arch, vec):
    vec = np.asarray(vec, dtype=float)
    kernels = []
    biases = []
    pos = 0
    k = arch.kernel
    for co, ci in arch.layer_shapes():
        nk = co * ci * k * k
        kernels.append(vec[pos:pos + nk].reshape(co, ci, k, k).copy())
        pos += nk
        biases.append(vec[pos:pos + co].copy())
        pos += co
    if pos != vec.size:
        raise ValueError("parameter vector length does not match architecture")
    return DenoiserParams(arch=arch, kernels=kernels, biases=biases)


def n_params(arch):
    k = arch.kernel
    return sum(co * ci * k * k + co for co, ci in arch.layer_shapes())


# ---------------------------------------------------------------------------
# checkpoint format: magic, arch block, raw little-endian float64


def save_checkpoint(path, params):
    arch = params.arch
    head = _NET_MAGIC + np.array(
        [arch.n_layers, arch.channels, arch.kernel,
         _ACTIVATIONS[arch.activation], int(arch.global_skip)],
        dtype="<u4").tobytes()
    payload = params_to_vector(params).astype("<f8").tobytes()
    atomic_write_bytes(path, head + payload)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _NET_MAGIC:
        raise ValueError(f"{path}: not a PNPNET1 checkpoint")
    fields = np.frombuffer(raw[8:28], dtype="<u4")
    names = {v: k for k, v in _ACTIVATIONS.items()}
    arch = ArchConfig(n_layers=int(fields[0]), channels=int(fields[1]),
                      kernel=int(fields[2]), activation=names[int(fields[3])],
                      global_skip=bool(fields[4]))
    vec = np.frombuffer(raw[28:], dtype="<f8")
    if vec.size != n_params(arch):
        raise ValueError(f"{path}: parameter payload does not match header")
    return vector_to_params(arch, vec)
