"""Two-phase denoiser training at toy scale: supervised first, then the
nonexpansiveness hinge on the sampled Jacobian spectral norm.

Reproduces the qualitative picture: the unconstrained network ends with
spectral norms of 2D - Id above 1, the constrained phase pulls them below.
Takes a minute or two on one CPU core.
"""

import numpy as np

from pnprecon import net, recon, sim, train

# toy dataset: 3 phantoms (2 train / 1 test) x 4 doses at 24x24
specs = [sim.random_phantom_spec(24, seed=60 + p) for p in range(3)]
geom = sim.GeometryConfig(n_angles=24, n_bins=36, bin_width=1.0)
doses = list(np.logspace(-0.3, 0.3, 4))
dataset = train.build_dataset(specs, geom, doses, base_seed=17,
                              osem_cfg=recon.OsemConfig(6, 6),
                              n_test_phantoms=1, norm_seed=4)
print(f"dataset: {len(dataset.split('train'))} train / "
      f"{len(dataset.split('test'))} test items")

arch = net.ArchConfig(n_layers=3, channels=8, kernel=3)
params = net.init_params(arch, seed=1, scale=0.3)


def certify(tag, params, n=40):
    rng = np.random.default_rng(99)
    test = dataset.split("test")
    sigmas = []
    for j in range(n):
        item = test[j % len(test)]
        x_tilde = train.sample_tilde(item.x_ref,
                                     net.forward(params, item.x_noisy),
                                     float(rng.uniform()))
        sigma, _ = net.spectral_norm_l(params, x_tilde, max_iters=20,
                                       seed=int(rng.integers(2 ** 62)))
        sigmas.append(sigma)
    sigmas = np.array(sigmas)
    print(f"{tag}: sigma(2D - Id) over {n} test points: "
          f"min {sigmas.min():.3f}, mean {sigmas.mean():.3f}, "
          f"max {sigmas.max():.3f}, share <= 1.05: {np.mean(sigmas <= 1.05):.0%}")


pre_cfg = train.TrainConfig(phase="pre", epochs=30, learning_rate=5e-3,
                            batch_size=1, seed=2, sigma_eval_samples=4)
params_pre, log_pre = train.train_phase(params, dataset, pre_cfg)
print(f"supervised phase: per-item MSE {log_pre.rows[0]['loss_mse']:.1f} -> "
      f"{log_pre.rows[-1]['loss_mse']:.1f}")
certify("after supervised phase", params_pre)

jac_cfg = train.TrainConfig(phase="jac", epochs=14, learning_rate=2e-3,
                            batch_size=4, beta=10.0, alpha=0.1, epsilon=0.05,
                            power_iters=10, seed=3, sigma_eval_samples=4)
params_jac, log_jac = train.train_phase(params_pre, dataset, jac_cfg)
print(f"constrained phase: hinge penalty {log_jac.rows[0]['loss_pen']:.4f} -> "
      f"{log_jac.rows[-1]['loss_pen']:.4f}")
certify("after constrained phase", params_jac)
