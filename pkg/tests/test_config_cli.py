"""Config parsing/diagnostics and the five CLI commands end to end."""

import pytest

from pnprecon import cli, net
from pnprecon.config import (ConfigError, canonical_text, config_hash,
                             load_config, parse_config)

TINY_CFG = """
seed = 2024

[phantoms]
count = 3
n_test = 1
grid_size = 16
family_seed = 40

[geometry]
n_angles = 12
n_bins = 26

[simulation]
n_doses = 2
dose_center = 1.2
background_fraction = 0.2

[osem]
n_iterations = 4
n_subsets = 4

[net]
n_layers = 2
channels = 3
kernel = 3
certify_power_iters = 10

[train.pre]
epochs = 2
learning_rate = 0.005
sigma_eval_samples = 2

[train.jac]
epochs = 1
batch_size = 2
power_iters = 5
sigma_eval_samples = 2

[admm]
rho = 30.0
iterations = 3
n_test_sims = 2
filter_sigmas = 0,1.0

[sweep]
rhos = 10.0,300.0
iterations = 3
"""

@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    cfg_path = root / "tiny.cfg"
    cfg_path.write_text(TINY_CFG)
    return root, str(cfg_path)


def test_parse_and_defaults():
    cfg = parse_config(TINY_CFG)
    assert cfg.seed == 2024
    assert cfg["phantoms"]["count"] == 3
    assert cfg["geometry"]["bin_width"] == 1.0       # default
    assert cfg["train.jac"]["beta"] == 10.0          # default
    assert cfg["admm"]["filter_sigmas"] == [0.0, 1.0]


def test_unknown_section_and_key_rejected():
    with pytest.raises(ConfigError, match="line 1.*unknown section"):
        parse_config("[nonsense]\n")
    with pytest.raises(ConfigError, match="line 2.*unknown key"):
        parse_config("[phantoms]\nbogus = 3\n")
    with pytest.raises(ConfigError, match="line 3.*duplicate"):
        parse_config("[phantoms]\ncount = 2\ncount = 3\n")
    with pytest.raises(ConfigError, match="line 2.*bad value"):
        parse_config("[phantoms]\ncount = two\n")
    with pytest.raises(ConfigError, match="key = value"):
        parse_config("[phantoms]\njust words\n")


def test_canonical_roundtrip():
    cfg = parse_config(TINY_CFG)
    canon = canonical_text(cfg)
    again = parse_config(canon)
    assert again.values == cfg.values
    assert canonical_text(again) == canon
    assert config_hash(again) == config_hash(cfg)


def test_global_key_only_before_sections():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("[phantoms]\nseed = 3\n")


def test_cli_pipeline_end_to_end(workspace):
    root, cfg_path = workspace
    assert cli.main(["simulate", "--config", cfg_path]) == 0
    data = root / "runs" / "data"
    manifest = (data / "manifest.csv").read_text().splitlines()
    assert manifest[0] == "item,phantom,dose_scale,seed,split"
    assert len(manifest) - 1 == 3 * 2
    splits = [line.split(",")[-1] for line in manifest[1:]]
    assert splits.count("test") == 2     # one test phantom x two doses
    assert (data / "provenance.txt").exists()

    # idempotent re-run: byte-identical outputs
    before = {p.name: p.read_bytes() for p in data.iterdir()}
    assert cli.main(["simulate", "--config", cfg_path]) == 0
    after = {p.name: p.read_bytes() for p in data.iterdir()}
    assert before == after

    # jac before pre is an error
    assert cli.main(["train", "--config", cfg_path, "--phase", "jac"]) == 2

    assert cli.main(["train", "--config", cfg_path, "--phase", "pre"]) == 0
    tdir = root / "runs" / "train"
    log = (tdir / "train_pre.csv").read_text().splitlines()
    assert log[0].startswith("# adam_beta1=")
    assert log[1] == ",".join(("epoch", "loss_total", "loss_mse", "loss_pen",
                               "test_mse", "test_sigma_max", "test_sigma_mean"))
    assert len(log) - 2 == 2

    assert cli.main(["train", "--config", cfg_path, "--phase", "jac"]) == 0
    assert (tdir / "jac.ckpt").exists()

    ckpt = str(tdir / "jac.ckpt")
    assert cli.main(["reconstruct", "--config", cfg_path,
                     "--checkpoint", ckpt]) == 0
    rdir = root / "runs" / "recon"
    summary = (rdir / "summary.csv").read_text().splitlines()
    assert summary[0] == "item,method,mse,log_likelihood,final_primal,final_dual,extra"
    assert len(summary) - 1 == 2 * 3   # two sims x three methods
    histories = sorted(p.name for p in rdir.iterdir() if "history" in p.name)
    assert len(histories) == 2
    hist_lines = (rdir / histories[0]).read_text().splitlines()
    assert len(hist_lines) - 1 == 3    # K iterations

    assert cli.main(["sweep", "--config", cfg_path, "--checkpoint", ckpt]) == 0
    sdir = root / "runs" / "sweep"
    curves = (sdir / "sweep_curves.csv").read_text().splitlines()
    assert len(curves) - 1 == 2 * 3    # |rhos| x K
    summary2 = (sdir / "sweep_summary.csv").read_text().splitlines()
    assert len(summary2) - 1 == 2

    assert cli.main(["certify", "--config", cfg_path, "--checkpoint", ckpt,
                     "--n-samples", "5"]) == 0
    cdir = root / "runs" / "certify"
    cert = (cdir / "certify.csv").read_text().splitlines()
    assert len(cert) - 1 == 5


def test_cli_reruns_are_byte_identical(workspace):
    root, cfg_path = workspace
    ckpt = str(root / "runs" / "train" / "jac.ckpt")
    out1 = root / "again1"
    out2 = root / "again2"
    for out in (out1, out2):
        assert cli.main(["reconstruct", "--config", cfg_path,
                         "--checkpoint", ckpt, "--out", str(out)]) == 0
        assert cli.main(["certify", "--config", cfg_path, "--checkpoint", ckpt,
                         "--n-samples", "4", "--out", str(out)]) == 0
    for name in ("summary.csv", "certify.csv", "certify_summary.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_cli_identity_checkpoint_certifies_sigma_one(workspace, tmp_path):
    root, cfg_path = workspace
    arch = net.ArchConfig(n_layers=2, channels=3, kernel=3)
    ident = tmp_path / "identity.ckpt"
    net.save_checkpoint(ident, net.identity_params(arch))
    out = tmp_path / "cert"
    assert cli.main(["certify", "--config", cfg_path, "--checkpoint", str(ident),
                     "--n-samples", "6", "--out", str(out)]) == 0
    lines = (out / "certify.csv").read_text().splitlines()
    sigmas = [float(line.split(",")[-1]) for line in lines[1:]]
    assert sigmas == [1.0] * 6


def test_cli_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[phantoms]\nwhat = 1\n")
    assert cli.main(["simulate", "--config", str(bad)]) == 2
    missing = tmp_path / "missing.cfg"
    assert cli.main(["simulate", "--config", str(missing)]) == 2


def test_cli_reconstruct_rho_override(workspace, tmp_path):
    root, cfg_path = workspace
    ckpt = str(root / "runs" / "train" / "jac.ckpt")
    out = tmp_path / "rho_override"
    assert cli.main(["reconstruct", "--config", cfg_path, "--checkpoint", ckpt,
                     "--rho", "60.0", "--iters", "2", "--out", str(out)]) == 0
    summary = (out / "summary.csv").read_text().splitlines()
    admm_rows = [l for l in summary[1:] if ",admm," in l]
    assert all(l.endswith(",60") for l in admm_rows)
    name = next(p for p in out.iterdir() if "history" in p.name)
    assert len(name.read_text().splitlines()) - 1 == 2
