"""Networks, training configuration, the step loop, and checkpoints."""

import dataclasses
from pathlib import Path

import numpy as np
import pytest
import torch

from pgblind.bench import write_toy_dataset
from pgblind.networks import DenoiserNet, EstimatorNet, infer
from pgblind.revisible import LOGVAR_MAX, LOGVAR_MIN, ReVisibleConfig
from pgblind.tensor_core import ImageTensor, SeededRng, load_raw_tensor
from pgblind.trainer import (
    METRICS_COLUMNS,
    NonFiniteLossError,
    TrainConfig,
    TrainState,
    calibrate_estimator_constant,
    config_to_entries,
    load_checkpoint,
    load_clean_images,
    parse_config_text,
    run_training,
    save_checkpoint,
    train_config_from_dict,
    train_config_from_file,
    train_step,
)


class TestDenoiserNet:
    def test_parameter_budget(self):
        net = DenoiserNet(channels=1)
        n = sum(p.numel() for p in net.parameters())
        assert n <= 300_000

    def test_output_shapes(self):
        net = DenoiserNet(channels=3)
        x = torch.rand(2, 3, 32, 48)
        mean, logvar = net(x)
        assert mean.shape == (2, 3, 32, 48)
        assert logvar.shape == (2, 3, 32, 48)

    def test_logvar_clamped_under_scaled_weights(self):
        net = DenoiserNet(channels=1)
        with torch.no_grad():
            for p in net.parameters():
                p.mul_(50.0)
            _, logvar = net(torch.rand(1, 1, 16, 16) * 10)
        assert float(logvar.min()) >= LOGVAR_MIN
        assert float(logvar.max()) <= LOGVAR_MAX

    def test_gradients_reach_all_parameters(self):
        net = DenoiserNet(channels=1)
        mean, logvar = net(torch.rand(1, 1, 16, 16))
        (mean.sum() + logvar.sum()).backward()
        assert all(p.grad is not None for p in net.parameters())


class TestEstimatorNet:
    def test_output_shape_and_positivity(self):
        net = EstimatorNet(channels=1)
        for scale in (0.0, 1.0, 100.0, -100.0):
            out = net(torch.full((2, 1, 24, 24), scale))
            assert out.shape == (2, 3)
            assert torch.all(out > 0)

    def test_calibration_fixes_output(self):
        net = EstimatorNet(channels=1)
        calibrate_estimator_constant(net, 0.05, 0.02, 0.03)
        for seed in (0, 1):
            x = torch.rand(3, 1, 20, 20, generator=torch.Generator().manual_seed(seed))
            out = net(x)
            expected = torch.tensor([0.05, 0.02, 0.03])
            torch.testing.assert_close(out, expected.expand(3, 3),
                                       rtol=1e-5, atol=1e-6)


class TestInfer:
    def test_matches_visible_mean_on_aligned_input(self):
        torch.manual_seed(0)
        net = DenoiserNet(channels=1)
        img = ImageTensor(SeededRng(1).uniform((32, 32)).astype(np.float32))
        out = infer(net, img)
        net.eval()
        with torch.no_grad():
            mean, _ = net(img.to_torch().unsqueeze(0))
        np.testing.assert_allclose(out.data[:, :, 0], mean[0, 0].numpy(),
                                   rtol=1e-6, atol=1e-7)

    def test_odd_shapes_padded_and_cropped(self):
        net = DenoiserNet(channels=1)
        img = ImageTensor(SeededRng(2).uniform((35, 41)).astype(np.float32))
        out = infer(net, img)
        assert out.data.shape == (35, 41, 1)

    def test_restores_training_mode(self):
        net = DenoiserNet(channels=1)
        net.train()
        infer(net, ImageTensor.full(16, 16, value=0.5))
        assert net.training


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.epochs == 30
        assert cfg.scheme == "t+j"
        assert cfg.revisible.lambda_final == 11.0

    @pytest.mark.parametrize("kwargs,match", [
        (dict(scheme="t+x"), "scheme"),
        (dict(fill="median"), "fill"),
        (dict(grain="cgx"), "grain"),
        (dict(epochs=0), ">= 1"),
        (dict(patch_size=30), "divisible by 4"),
        (dict(alpha=-0.1), "non-negative"),
        (dict(lr_denoiser=0.0), "positive"),
        (dict(weight_decay=-1e-8), "non-negative"),
        (dict(val_count=0), ">= 1"),
        (dict(channels=2), "1 or 3"),
    ])
    def test_validation(self, kwargs, match):
        with pytest.raises(ValueError, match=match):
            TrainConfig(**kwargs)


class TestConfigParsing:
    def test_comments_blanks_and_values(self):
        text = """
        # training setup
        epochs = 5
        scheme = t+p   # frozen estimator
        iid = false
        lambda_final = 9.5
        """
        entries = parse_config_text(text)
        assert entries == {"epochs": "5", "scheme": "t+p", "iid": "false",
                           "lambda_final": "9.5"}
        cfg = train_config_from_dict(entries)
        assert cfg.epochs == 5
        assert cfg.scheme == "t+p"
        assert cfg.revisible.iid is False
        assert cfg.revisible.lambda_final == 9.5

    def test_malformed_line(self):
        with pytest.raises(ValueError, match="line 2"):
            parse_config_text("epochs = 5\nbogus line\n")

    def test_duplicate_key(self):
        with pytest.raises(ValueError, match="duplicate"):
            parse_config_text("epochs = 5\nepochs = 6\n")

    def test_empty_value(self):
        with pytest.raises(ValueError, match="empty"):
            parse_config_text("epochs = \n")

    def test_unknown_key_lists_known(self):
        with pytest.raises(ValueError, match="unknown config key 'epoch'"):
            train_config_from_dict({"epoch": "5"})

    def test_bool_words(self):
        for word, val in [("true", True), ("Yes", True), ("1", True),
                          ("on", True), ("false", False), ("NO", False),
                          ("0", False), ("off", False)]:
            cfg = train_config_from_dict({"iid": word})
            assert cfg.revisible.iid is val
        with pytest.raises(ValueError, match="boolean"):
            train_config_from_dict({"iid": "maybe"})

    def test_round_trip(self):
        cfg = TrainConfig(epochs=7, scheme="t+f", alpha=0.03,
                          revisible=ReVisibleConfig(lambda_final=20.0, iid=False))
        entries = config_to_entries(cfg)
        rebuilt = train_config_from_dict(
            {k: str(v) for k, v in entries.items()})
        assert rebuilt == cfg

    def test_from_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("epochs = 3\nseed = 42\n")
        cfg = train_config_from_file(path)
        assert (cfg.epochs, cfg.seed) == (3, 42)


def _make_batch(n=2, c=1, size=32, seed=3):
    rng = SeededRng(seed)
    return torch.from_numpy(
        (0.2 + 0.6 * rng.uniform((n, c, size, size))).astype(np.float32))


def _micro_cfg(**kwargs):
    # patch 32 keeps the noise-fit loss viable on the corner blocks too:
    # ceil(3 * 32 / 4) = 24 gives 81 shifted patches >= 64
    base = dict(epochs=2, batch_size=2, patch_size=32, patches_per_image=1,
                alpha=0.05, sigma=0.02, cell_size=2, val_count=2, seed=0)
    base.update(kwargs)
    return TrainConfig(**base)


class TestTrainStep:
    def test_updates_both_networks_under_joint_scheme(self):
        torch.manual_seed(0)
        state = TrainState.create(_micro_cfg(scheme="t+j"))
        before_d = [p.detach().clone() for p in state.denoiser.parameters()]
        before_e = [p.detach().clone() for p in state.estimator.parameters()]
        out = train_step(_make_batch(), state)
        assert set(out) == {"nll", "est_loss", "total", "lambda"}
        assert all(np.isfinite(v) for v in out.values())
        assert any(not torch.equal(a, b) for a, b in
                   zip(before_d, state.denoiser.parameters()))
        assert any(not torch.equal(a, b) for a, b in
                   zip(before_e, state.estimator.parameters()))

    def test_pretrained_scheme_freezes_estimator_bitwise(self):
        torch.manual_seed(0)
        state = TrainState.create(_micro_cfg(scheme="t+p"))
        before = [p.detach().clone() for p in state.estimator.parameters()]
        for _ in range(3):
            train_step(_make_batch(), state)
        assert all(torch.equal(a, b) for a, b in
                   zip(before, state.estimator.parameters()))
        assert state.opt_estimator is None

    def test_fixed_scheme_uses_config_constants(self):
        torch.manual_seed(0)
        from pgblind.trainer import _noise_params_for_batch
        state = TrainState.create(_micro_cfg(scheme="t+f", alpha=0.07, sigma=0.01))
        p, raw = _noise_params_for_batch(state, _make_batch())
        assert torch.all(raw[:, 0] == 0.07)
        assert torch.all(raw[:, 1] == 0.01)
        assert torch.all(raw[:, 2] == 0.01)

    def test_nan_weights_raise_named_term(self):
        torch.manual_seed(0)
        state = TrainState.create(_micro_cfg())
        with torch.no_grad():
            state.denoiser.head_mean.weight.fill_(float("nan"))
        with pytest.raises(NonFiniteLossError) as exc:
            train_step(_make_batch(), state)
        assert exc.value.term == "nll"

    def test_lambda_defaults_to_schedule(self):
        torch.manual_seed(0)
        state = TrainState.create(_micro_cfg(epochs=2))
        state.set_epoch(1)
        out = train_step(_make_batch(), state)
        assert out["lambda"] == 11.0

    def test_lr_halving(self):
        cfg = _micro_cfg(epochs=50)
        state = TrainState.create(cfg)
        state.set_epoch(0)
        assert state.opt_denoiser.param_groups[0]["lr"] == pytest.approx(1e-3)
        state.set_epoch(20)
        assert state.opt_denoiser.param_groups[0]["lr"] == pytest.approx(5e-4)
        state.set_epoch(40)
        assert state.opt_denoiser.param_groups[0]["lr"] == pytest.approx(2.5e-4)
        assert state.opt_estimator.param_groups[0]["lr"] == pytest.approx(6.25e-6)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        torch.manual_seed(1)
        cfg = _micro_cfg(scheme="t+p")
        den, est = DenoiserNet(1), EstimatorNet(1)
        save_checkpoint(tmp_path / "ckpt", den, est, cfg)
        den2, est2, cfg2 = load_checkpoint(tmp_path / "ckpt")
        assert cfg2 == cfg
        for a, b in zip(den.state_dict().values(), den2.state_dict().values()):
            assert torch.equal(a, b)
        for a, b in zip(est.state_dict().values(), est2.state_dict().values()):
            assert torch.equal(a, b)

    def test_manifest_structure(self, tmp_path):
        cfg = _micro_cfg()
        manifest = save_checkpoint(tmp_path / "c", DenoiserNet(1),
                                   EstimatorNet(1), cfg)
        lines = Path(manifest).read_text().splitlines()
        params = [l for l in lines if l.startswith("param ")]
        configs = [l for l in lines if l.startswith("config ")]
        assert params and configs
        first = params[0].split()
        assert first[0] == "param"
        assert first[1].startswith("denoiser.")
        assert first[3] == "float32"
        stored = load_raw_tensor(Path(manifest).parent / first[4])
        assert stored.shape[0] == 1 and stored.shape[2] == 1

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path)

    def test_corrupt_payload_size(self, tmp_path):
        cfg = _micro_cfg()
        manifest = save_checkpoint(tmp_path / "c", DenoiserNet(1),
                                   EstimatorNet(1), cfg)
        ckpt = Path(manifest).parent
        first_file = next(l.split()[4] for l in manifest.read_text().splitlines()
                          if l.startswith("param "))
        arr = load_raw_tensor(ckpt / first_file)
        from pgblind.tensor_core import save_raw_tensor
        save_raw_tensor(ckpt / first_file, arr[:, :-1, :])
        with pytest.raises(ValueError, match="values"):
            load_checkpoint(ckpt)


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("toys")
    write_toy_dataset(root, 6, height=48, width=48, seed=21)
    return root


class TestRunTraining:
    def test_micro_run(self, toy_dir, tmp_path):
        cfg = _micro_cfg(patch_size=32, patches_per_image=1, alpha=0.01,
                         sigma=0.02)
        res = run_training(toy_dir, cfg, tmp_path / "run", plot=False)
        assert len(res.history) == 2
        assert res.history[0]["lambda"] == 3.0
        assert res.history[1]["lambda"] == 11.0
        metrics = Path(res.metrics_path).read_text().splitlines()
        assert metrics[0].startswith("#")
        header = metrics[0].lstrip("# ").split("\t")
        assert tuple(header[:len(METRICS_COLUMNS)]) == METRICS_COLUMNS
        assert len(metrics) == 1 + cfg.epochs
        assert np.isfinite(res.final_psnr)
        assert np.isfinite(res.noisy_psnr)
        assert (Path(res.out_dir) / "manifest.txt").exists()

    def test_deterministic_across_runs(self, toy_dir, tmp_path):
        cfg = _micro_cfg(patch_size=32)
        r1 = run_training(toy_dir, cfg, tmp_path / "a", plot=False)
        r2 = run_training(toy_dir, cfg, tmp_path / "b", plot=False)
        b1 = Path(r1.metrics_path).read_bytes()
        b2 = Path(r2.metrics_path).read_bytes()
        assert b1 == b2

    def test_seed_changes_trajectory(self, toy_dir, tmp_path):
        r1 = run_training(toy_dir, _micro_cfg(patch_size=32, seed=0),
                          tmp_path / "a", plot=False)
        r2 = run_training(toy_dir, _micro_cfg(patch_size=32, seed=1),
                          tmp_path / "b", plot=False)
        assert Path(r1.metrics_path).read_bytes() != Path(r2.metrics_path).read_bytes()

    def test_load_clean_images_sorted_and_typed(self, toy_dir):
        items = load_clean_images(toy_dir)
        names = [n for n, _ in items]
        assert names == sorted(names)
        assert all(isinstance(t, ImageTensor) for _, t in items)

    def test_empty_dataset_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="images"):
            load_clean_images(tmp_path)
