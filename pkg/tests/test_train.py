"""Dataset building, loss decomposition, Adam, and the two training phases."""

import numpy as np
import pytest

from pnprecon import net, recon, sim, train


def tiny_dataset(n_phantoms=3, n_doses=2, grid=16, n_test=1):
    specs = [sim.random_phantom_spec(grid, seed=40 + p) for p in range(n_phantoms)]
    geom = sim.GeometryConfig(n_angles=12, n_bins=int(grid * 1.5) + 2, bin_width=1.0)
    doses = list(np.linspace(0.8, 1.6, n_doses))
    return train.build_dataset(specs, geom, doses, base_seed=5,
                               osem_cfg=recon.OsemConfig(4, 4),
                               n_test_phantoms=n_test, norm_seed=3)


def test_dataset_size_is_phantoms_times_doses():
    ds = tiny_dataset(n_phantoms=3, n_doses=2)
    assert len(ds.items) == 6


def test_dataset_split_phantom_disjoint():
    ds = tiny_dataset(n_phantoms=3, n_doses=2, n_test=1)
    train_ph = {it.phantom_id for it in ds.split("train")}
    test_ph = {it.phantom_id for it in ds.split("test")}
    assert train_ph and test_ph
    assert train_ph.isdisjoint(test_ph)


def test_dataset_rebuild_bit_identical():
    a = tiny_dataset()
    b = tiny_dataset()
    for ia, ib in zip(a.items, b.items):
        np.testing.assert_array_equal(ia.x_noisy, ib.x_noisy)
        np.testing.assert_array_equal(ia.x_ref, ib.x_ref)
        assert ia.seed == ib.seed


def test_dataset_needs_two_phantoms():
    spec = sim.random_phantom_spec(16, seed=1)
    geom = sim.GeometryConfig(n_angles=8, n_bins=26, bin_width=1.0)
    with pytest.raises(ValueError, match="phantoms"):
        train.build_dataset([spec], geom, [1.0], 0, recon.OsemConfig(1, 1))


def test_sample_tilde_endpoints_and_midpoint():
    rng = np.random.default_rng(0)
    x_ref = rng.random((8, 8))
    d_out = rng.random((8, 8))
    np.testing.assert_array_equal(train.sample_tilde(x_ref, d_out, 1.0), x_ref)
    np.testing.assert_array_equal(train.sample_tilde(x_ref, d_out, 0.0), d_out)
    mid = train.sample_tilde(x_ref, d_out, 0.5)
    np.testing.assert_allclose(mid, (x_ref + d_out) / 2.0, rtol=1e-15)
    with pytest.raises(ValueError):
        train.sample_tilde(x_ref, d_out, 1.5)


def _pre_cfg(**kw):
    base = dict(phase="pre", epochs=1, learning_rate=1e-3, batch_size=1)
    base.update(kw)
    return train.TrainConfig(**base)


def _jac_cfg(**kw):
    base = dict(phase="jac", epochs=1, learning_rate=5e-4, batch_size=2,
                beta=10.0, alpha=0.1, epsilon=0.05, power_iters=10)
    base.update(kw)
    return train.TrainConfig(**base)


def test_loss_beta_zero_equals_mse_and_gradient():
    ds = tiny_dataset()
    arch = net.ArchConfig(n_layers=2, channels=3, kernel=3)
    params = net.init_params(arch, seed=0)
    batch = list(ds.items[:2])
    rng = np.random.default_rng(1)
    total, mse_part, pen, gvec = train.loss_and_grad(
        params, batch, _pre_cfg(), rng)
    assert pen == 0.0
    assert total == mse_part
    want = np.zeros_like(gvec)
    for item in batch:
        want += net.grad_to_vector(net.param_grad_mse(params, item.x_noisy,
                                                      item.x_ref))
    np.testing.assert_array_equal(gvec, want)


def test_loss_identity_denoiser_noise_free_inputs():
    # D = Id on x_b = ref_b: MSE = 0 and sigma = 1, so each element
    # contributes hinge(1) = eps^(1+alpha)
    ds = tiny_dataset()
    arch = net.ArchConfig(n_layers=2, channels=3, kernel=3)
    params = net.identity_params(arch)
    items = [train.DatasetItem(phantom_id=i.phantom_id, dose_scale=i.dose_scale,
                               seed=i.seed, x_noisy=i.x_ref, x_ref=i.x_ref,
                               split=i.split)
             for i in ds.items[:3]]
    rng = np.random.default_rng(2)
    cfg = _jac_cfg(epsilon=0.05, alpha=0.1)
    total, mse_part, pen, gvec = train.loss_and_grad(params, items, cfg, rng)
    assert mse_part == 0.0
    assert pen == pytest.approx(3 * 0.05 ** 1.1, rel=1e-12)
    assert total == pytest.approx(10.0 * pen, rel=1e-12)


def test_loss_decomposition_exact():
    ds = tiny_dataset()
    arch = net.ArchConfig(n_layers=2, channels=3, kernel=3)
    params = net.vector_to_params(
        arch, np.random.default_rng(3).normal(0, 0.5, net.n_params(arch)))
    rng = np.random.default_rng(4)
    cfg = _jac_cfg(beta=7.0)
    total, mse_part, pen, _ = train.loss_and_grad(params, list(ds.items[:3]),
                                                  cfg, rng)
    assert total == mse_part + 7.0 * pen


def test_full_loss_gradient_matches_finite_differences():
    ds = tiny_dataset(grid=16)
    arch = net.ArchConfig(n_layers=2, channels=2, kernel=3)
    vec0 = np.random.default_rng(5).normal(0, 0.6, net.n_params(arch))
    item = ds.items[0]
    eps, alpha, beta = 0.05, 0.1, 10.0

    # freeze kappa and the power direction so the loss is a plain function
    params0 = net.vector_to_params(arch, vec0)
    kappa = 0.4
    x_tilde0 = train.sample_tilde(item.x_ref,
                                  net.forward(params0, item.x_noisy), kappa)
    _, u = net.spectral_norm_l(params0, x_tilde0, max_iters=10, seed=6)

    def loss(vec):
        p = net.vector_to_params(arch, vec)
        out = net.forward(p, item.x_noisy)
        mse_part = float(np.sum((out - item.x_ref) ** 2))
        # x_tilde depends on theta through D(x_b)
        x_tilde = train.sample_tilde(item.x_ref, out, kappa)
        g = 2.0 * net.jvp(p, x_tilde, u) - u
        value, _ = net.hinge(float(np.linalg.norm(g)), eps, alpha)
        return mse_part + beta * value

    # the analytic gradient treats x_tilde as fixed (stop-gradient), so the
    # finite-difference comparison freezes it too
    def loss_stopgrad(vec):
        p = net.vector_to_params(arch, vec)
        out = net.forward(p, item.x_noisy)
        mse_part = float(np.sum((out - item.x_ref) ** 2))
        g = 2.0 * net.jvp(p, x_tilde0, u) - u
        value, _ = net.hinge(float(np.linalg.norm(g)), eps, alpha)
        return mse_part + beta * value

    grad = net.grad_to_vector(net.param_grad_mse(params0, item.x_noisy,
                                                 item.x_ref))
    pen_grad, sigma = net.param_grad_penalty(params0, x_tilde0, u,
                                             epsilon=eps, alpha=alpha)
    assert sigma + eps > 1.0
    grad = grad + beta * net.grad_to_vector(pen_grad)
    rng = np.random.default_rng(7)
    h = 1e-6
    for j in rng.choice(vec0.size, size=15, replace=False):
        e = np.zeros(vec0.size)
        e[j] = h
        fd = (loss_stopgrad(vec0 + e) - loss_stopgrad(vec0 - e)) / (2 * h)
        assert abs(fd - grad[j]) / max(abs(grad[j]), 1e-8) < 1e-3


def test_adam_zero_gradient_keeps_params():
    vec = np.array([1.0, -2.0, 3.0])
    state = train.AdamState.zeros(3)
    new, state = train.adam_step(vec, np.zeros(3), state, lr=0.1)
    np.testing.assert_array_equal(new, vec)


def test_adam_first_step_magnitude_is_lr():
    # bias correction makes the first step lr * sign(g) up to the eps guard
    for scale in (1e-3, 1.0, 1e6):
        vec = np.zeros(4)
        grad = np.full(4, scale)
        new, _ = train.adam_step(vec, grad, train.AdamState.zeros(4), lr=0.01)
        np.testing.assert_allclose(np.abs(new), 0.01, rtol=1e-4)


def test_adam_converges_on_scalar_quadratic():
    # minimize (w - 3)^2
    vec = np.array([0.0])
    state = train.AdamState.zeros(1)
    for _ in range(500):
        grad = 2.0 * (vec - 3.0)
        vec, state = train.adam_step(vec, grad, state, lr=0.05)
    assert abs(vec[0] - 3.0) < 1e-6


def test_train_pre_reduces_mse_on_toy_set():
    # one training phantom at five doses; MSE must halve within 30 epochs
    ds = tiny_dataset(n_phantoms=2, n_doses=5, n_test=1)
    arch = net.ArchConfig(n_layers=3, channels=6, kernel=3)
    params0 = net.init_params(arch, seed=8, scale=0.3)
    cfg = _pre_cfg(epochs=30, learning_rate=1e-2, seed=9)
    params, log = train.train_phase(params0, ds, cfg)
    assert len(log.rows) == 30
    first = log.rows[0]["loss_mse"]
    last = log.rows[-1]["loss_mse"]
    assert last <= 0.5 * first
    cols = set(train.TrainingLog.HEADER)
    assert set(log.rows[0]) == cols


def test_train_jac_enforces_sigma_on_toy_set():
    # after the constrained phase, sampled test spectral norms sit under 1.05
    ds = tiny_dataset(n_phantoms=3, n_doses=5, n_test=1)
    arch = net.ArchConfig(n_layers=3, channels=6, kernel=3)
    params0 = net.init_params(arch, seed=8, scale=0.3)
    pre, _ = train.train_phase(params0, ds, _pre_cfg(
        epochs=30, learning_rate=1e-2, seed=9, sigma_eval_samples=2))
    jac, log = train.train_phase(pre, ds, _jac_cfg(
        epochs=14, learning_rate=5e-3, batch_size=5, seed=10,
        sigma_eval_samples=2))
    assert len(log.rows) == 14
    rng = np.random.default_rng(99)
    test = ds.split("test")
    sigmas = []
    for j in range(20):
        item = test[j % len(test)]
        x_tilde = train.sample_tilde(item.x_ref,
                                     net.forward(jac, item.x_noisy),
                                     float(rng.uniform()))
        sigma, _ = net.spectral_norm_l(jac, x_tilde, max_iters=15,
                                       seed=int(rng.integers(2 ** 62)))
        sigmas.append(sigma)
    assert max(sigmas) < 1.05


def test_train_reproducible():
    ds = tiny_dataset(n_phantoms=2, n_doses=1)
    arch = net.ArchConfig(n_layers=2, channels=3, kernel=3)
    params0 = net.init_params(arch, seed=10)
    cfg = _pre_cfg(epochs=3, seed=11)
    p1, log1 = train.train_phase(params0, ds, cfg)
    p2, log2 = train.train_phase(params0, ds, cfg)
    np.testing.assert_array_equal(net.params_to_vector(p1),
                                  net.params_to_vector(p2))
    assert log1.rows == log2.rows


def test_train_jac_penalty_inactive_matches_pre_gradient():
    # identity denoiser with eps=0: every sigma = 1 keeps the hinge dead,
    # so the JAC gradient equals the PRE gradient bit for bit
    ds = tiny_dataset(n_phantoms=2, n_doses=1)
    arch = net.ArchConfig(n_layers=2, channels=3, kernel=3)
    params = net.identity_params(arch)
    batch = list(ds.items)
    _, _, _, g_pre = train.loss_and_grad(params, batch, _pre_cfg(),
                                         np.random.default_rng(12))
    cfg = _jac_cfg(epsilon=0.0)
    _, _, pen, g_jac = train.loss_and_grad(params, batch, cfg,
                                           np.random.default_rng(13))
    assert pen == 0.0
    np.testing.assert_array_equal(g_pre, g_jac)


def test_train_nonfinite_loss_aborts():
    from pnprecon.util import NumericalAbort
    ds = tiny_dataset(n_phantoms=2, n_doses=1)
    arch = net.ArchConfig(n_layers=2, channels=3, kernel=3)
    params0 = net.init_params(arch, seed=14)
    params0.kernels[0][:] = 1e200   # overflow through both layers
    params0.kernels[1][:] = 1e200
    cfg = _pre_cfg(epochs=1, seed=15)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericalAbort, match="epoch 0"):
            train.train_phase(params0, ds, cfg)


def test_train_config_validation():
    with pytest.raises(ValueError):
        train.TrainConfig(phase="mid", epochs=1, learning_rate=1e-3, batch_size=1)
    with pytest.raises(ValueError):
        train.TrainConfig(phase="pre", epochs=1, learning_rate=1e-3,
                          batch_size=1, beta=5.0)
    with pytest.raises(ValueError):
        train.TrainConfig(phase="jac", epochs=0, learning_rate=1e-3, batch_size=1)
