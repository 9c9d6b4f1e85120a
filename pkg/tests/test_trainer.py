import dataclasses
import json

import numpy as np
import pytest
import torch

from stssl.dataio import MixedBatchSampler, load_dataset, split_labeled
from stssl.model import init_params
from stssl.trainer import (CheckpointError, NonFiniteLossError, TrainConfig, _windows, compute_losses,
                           fit, load_checkpoint, model_from_checkpoint, parse_override, predict_video,
                           prepare_batch, save_checkpoint, train_step)

from conftest import tiny_config


def test_defaults():
    c = TrainConfig()
    assert (c.batch_size, c.frames, c.skip, c.lr) == (8, 8, 2, 1e-4)
    assert (c.lambda_, c.lambda1, c.lambda2, c.coherence_window) == (0.1, 0.3, 0.7, 2)
    assert c.plateau.decay_factor == 0.1 and c.plateau.patience == 5


def test_flat_roundtrip_and_digest():
    c = tiny_config(mode="semi-grad")
    flat = c.to_flat()
    assert "lambda" in flat and "model.head" in flat and "ramp.fraction" in flat
    again = TrainConfig.from_flat(json.loads(json.dumps(flat)))
    assert again == c and again.digest() == c.digest()
    assert c.with_overrides({"seed": 9}).digest() != c.digest()
    with pytest.raises(KeyError, match="bogus"):
        TrainConfig.from_flat({"bogus": 1})


def test_parse_override_types():
    base = TrainConfig()
    assert parse_override("epochs=7", base) == ("epochs", 7)
    assert parse_override("lambda=0.5", base) == ("lambda", 0.5)
    assert parse_override("model.encoder_channels=[2,4,8]", base) == ("model.encoder_channels", [2, 4, 8])
    assert parse_override("ramp.length=12", base) == ("ramp.length", 12)
    assert parse_override("mode=semi-cc", base) == ("mode", "semi-cc")
    with pytest.raises(KeyError):
        parse_override("nope=1", base)
    with pytest.raises(ValueError):
        parse_override("epochs", base)


def test_config_validation():
    with pytest.raises(ValueError, match="mode"):
        TrainConfig(mode="semi")
    with pytest.raises(ValueError, match="non-negative"):
        TrainConfig(lambda1=-0.3)
    with pytest.raises(ValueError, match="dtype"):
        TrainConfig(dtype="float16")


@pytest.mark.parametrize("length,frames,skip", [(16, 8, 2), (10, 8, 1), (23, 8, 2), (9, 4, 2)])
def test_windows_cover_every_frame(length, frames, skip):
    covered = set()
    for s in _windows(length, frames, skip):
        idx = list(range(s, s + frames * skip, skip))
        assert idx[-1] < length
        covered.update(idx)
    assert covered == set(range(length))


@pytest.fixture
def batch_setup(tiny_root):
    cfg = tiny_config(mode="semi-var", dtype="float64")
    index = split_labeled(load_dataset(tiny_root), 0.5, 0)
    sampler = MixedBatchSampler(index, 4, seed=0, num_frames=8, skip=1, resolution=(16, 16))
    model_cfg = dataclasses.replace(cfg.model, num_classes=index.class_count, output_size=[8, 16, 16])
    cfg = dataclasses.replace(cfg, model=model_cfg)
    return cfg, sampler, init_params(model_cfg, 0, torch.float64)


def test_prepare_batch_marks_unlabeled(batch_setup):
    cfg, sampler, _ = batch_setup
    prepared = prepare_batch(sampler.sample_mixed_batch(), cfg, np.random.default_rng(0),
                             source_hw={v: (32, 32) for v in sampler.index.annotations})
    assert prepared["x"].shape == (4, 3, 8, 16, 16) and prepared["x"].dtype == torch.float64
    assert prepared["is_labeled"].sum() == 2
    assert (prepared["labels"][~prepared["is_labeled"]] == -1).all()
    assert prepared["targets"].shape == (4, 8, 16, 16)
    assert prepared["targets"][~prepared["is_labeled"]].abs().sum() == 0


@pytest.mark.parametrize("mode", ["semi-cc", "semi-lc", "semi-var", "semi-grad"])
def test_breakdown_matches_mode(batch_setup, mode):
    cfg, sampler, model = batch_setup
    cfg = dataclasses.replace(cfg, mode=mode)
    prepared = prepare_batch(sampler.sample_mixed_batch(), cfg, np.random.default_rng(1))
    total, parts, masks = compute_losses(model, prepared, cfg, w=0.5)
    assert parts["L_cc"] > 0
    assert (parts["L_lc"] == 0) == (mode == "semi-cc")
    expected = parts["L_sup_cls"] + parts["L_sup_loc"] + 0.1 * (0.3 * parts["L_cc"] + 0.7 * parts["L_lc"])
    assert total.item() == pytest.approx(expected, rel=1e-12)
    assert set(masks) == {"semi-var": {"var"}, "semi-grad": {"grad"}}.get(mode, set())


def test_finite_difference_with_frozen_masks(batch_setup):
    cfg, sampler, model = batch_setup
    prepared = prepare_batch(sampler.sample_mixed_batch(), cfg, np.random.default_rng(2))
    total, _, masks = compute_losses(model, prepared, cfg, w=0.7)
    model.zero_grad()
    total.backward()
    param = model.out.weight
    analytic = param.grad.flatten()[1].item()
    eps = 1e-6
    values = []
    for sign in (1, -1):
        with torch.no_grad():
            param.view(-1)[1] += sign * eps
        values.append(compute_losses(model, prepared, cfg, 0.7, masks)[0].item())
        with torch.no_grad():
            param.view(-1)[1] -= sign * eps
    numeric = (values[0] - values[1]) / (2 * eps)
    assert abs(numeric - analytic) <= 1e-4 * abs(numeric)


def test_train_step_changes_parameters(batch_setup):
    cfg, sampler, model = batch_setup
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    before = [p.detach().clone() for p in model.parameters()]
    rec = train_step(model, opt, sampler.sample_mixed_batch(), cfg, 0, 0.5, np.random.default_rng(0))
    assert rec["step"] == 0 and np.isfinite(rec["total"])
    assert any(not torch.equal(a, b) for a, b in zip(before, model.parameters()))


def test_non_finite_loss_raises(batch_setup):
    cfg, sampler, model = batch_setup
    cfg = dataclasses.replace(cfg, mode="supervised")
    with torch.no_grad():
        model.out.bias.fill_(float("nan"))
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    with pytest.raises(NonFiniteLossError, match="step 3"):
        train_step(model, opt, sampler.sample_mixed_batch(), cfg, 3, 1.0, np.random.default_rng(0))


def read_trace(path):
    return [json.loads(line)["total"] for line in open(path)]


def test_fit_writes_artifacts(tiny_root, tmp_path):
    result = fit(tiny_config(mode="semi-grad"), tiny_root, tmp_path / "run")
    evals = [json.loads(line) for line in open(result.eval_log)]
    assert [e["epoch"] for e in evals] == [0, 1]
    assert {"f_map@0.5", "v_map@0.5", "w", "lr"} <= set(evals[0])
    assert len(read_trace(result.train_log)) == 2 * 2  # ceil(6 / 4) steps per epoch
    manifest = json.loads((result.last_checkpoint / "manifest.json").read_text())
    assert manifest["epoch"] == 2 and manifest["seed"] == 0
    for name in ("split.json", "config.json", "report.json"):
        assert (tmp_path / "run" / name).exists()
    model, cfg = model_from_checkpoint(result.last_checkpoint)
    frames, scores = predict_video(model, load_dataset(tiny_root).load_video("vid_0000"), cfg)
    assert sorted(frames) == list(range(10)) and scores.shape == (2,)


def test_resume_matches_uninterrupted(tiny_root, tmp_path, monkeypatch):
    monkeypatch.setenv("STSSL_DETERMINISTIC", "1")
    cfg = tiny_config(mode="semi-var", dtype="float64", epochs=3)
    full = fit(cfg, tiny_root, tmp_path / "full")
    fit(cfg, tiny_root, tmp_path / "part", stop_after_epoch=1)
    resumed = fit(cfg, tiny_root, tmp_path / "part", resume=True)
    assert read_trace(resumed.train_log) == read_trace(full.train_log)
    assert resumed.eval_log.read_text() == full.eval_log.read_text()


def test_checkpoint_tamper_detected(tiny_root, tmp_path):
    result = fit(tiny_config(mode="supervised", epochs=1), tiny_root, tmp_path / "run")
    ckpt = result.last_checkpoint
    blob = bytearray((ckpt / "params.bin").read_bytes())
    blob[-1] ^= 0xFF
    (ckpt / "params.bin").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="params.bin"):
        load_checkpoint(ckpt)
    manifest = json.loads((ckpt / "manifest.json").read_text())
    manifest["config"]["lr"] = 1.0
    (ckpt / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="config hash"):
        load_checkpoint(ckpt)


def test_checkpoint_config_mismatch(tmp_path):
    cfg = tiny_config()
    model = init_params(cfg.model, 0)
    save_checkpoint(tmp_path / "c", model, None, cfg, 1)
    assert load_checkpoint(tmp_path / "c", cfg)["manifest"]["epoch"] == 1
    with pytest.raises(CheckpointError, match="lr"):
        load_checkpoint(tmp_path / "c", cfg.with_overrides({"lr": 0.5}))
    assert load_checkpoint(tmp_path / "c", cfg.with_overrides({"lr": 0.5}), allow_mismatch=True)
    with pytest.raises(CheckpointError, match="model.capsule_dim"):
        load_checkpoint(tmp_path / "c", cfg.with_overrides({"model.capsule_dim": 8}), allow_mismatch=True)


def test_resume_with_changed_config_refused(tiny_root, tmp_path):
    fit(tiny_config(epochs=1), tiny_root, tmp_path / "run")
    with pytest.raises(CheckpointError, match="lambda1"):
        fit(tiny_config(epochs=2, lambda1=0.5), tiny_root, tmp_path / "run", resume=True)
