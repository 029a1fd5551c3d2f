import json
import zipfile

import numpy as np
import pytest
import torch

from space_clip.config import ModelConfig, TrainConfig
from space_clip.data import DepthDataset, synthetic_dataset
from space_clip.decoder import SpaceClip
from space_clip.encoder import parameter_checksum
from space_clip.metrics import Protocol
from space_clip.training import (
    CheckpointError,
    TrainingError,
    _collate,
    evaluate,
    expected_lr,
    file_sha256,
    fit,
    load_checkpoint,
    make_optimizer,
    make_scheduler,
    model_from_checkpoint,
    save_checkpoint,
    train_step,
    trainable_state,
)

SIZE = (64, 128)
TINY = ModelConfig(decoder_channels=[32, 16, 16, 8], output_size=SIZE, encoder_mode="resize")


def tiny_model(stub, **kw):
    return SpaceClip(stub, ModelConfig(**{**TINY.__dict__, **kw}))


def tiny_data(n=4, seed=0, train=False):
    return DepthDataset(samples=synthetic_dataset(n, seed, size=SIZE), train=train, size=SIZE)


def batch(ds, idx=(0, 1)):
    return _collate([ds[i] for i in idx])


# ---------------------------------------------------------------- optimizer


def test_optimizer_covers_exactly_trainable_parameters(stub):
    model = tiny_model(stub)
    opt = make_optimizer(model, TrainConfig())
    in_opt = {id(p) for g in opt.param_groups for p in g["params"]}
    assert in_opt == {id(p) for p in model.trainable_parameters()}
    assert not in_opt & {id(p) for p in model.backbone.parameters()}
    assert all(g["lr"] == 1e-4 for g in opt.param_groups)
    decays = sorted(g["weight_decay"] for g in opt.param_groups)
    assert decays == [0.0, 0.01]
    no_decay = next(g for g in opt.param_groups if g["weight_decay"] == 0.0)["params"]
    norm_weight = model.decoder.semantic_blocks[0].norm1.weight
    assert any(p is norm_weight for p in no_decay)


def test_first_step_moves_toward_minimum(rng):
    p = torch.nn.Parameter(torch.from_numpy(rng.uniform(-2, 2, 20)))
    opt = make_optimizer([p], TrainConfig(weight_decay=0.0))
    before = p.detach().clone()
    (p**2).sum().backward()
    opt.step()
    assert (p.detach().abs() < before.abs()).all()
    # Adam's first step has magnitude lr in every coordinate
    np.testing.assert_allclose((before - p.detach()).abs().numpy(), 1e-4, rtol=1e-3)


def test_scheduler_halves_every_two_epochs():
    cfg = TrainConfig()
    opt = make_optimizer([torch.nn.Parameter(torch.zeros(2, 2))], cfg)
    sched = make_scheduler(opt, cfg)
    seen = []
    for _ in range(10):
        seen.append(opt.param_groups[0]["lr"])
        opt.step()
        sched.step()
    np.testing.assert_allclose(seen[:6], [1e-4, 1e-4, 5e-5, 5e-5, 2.5e-5, 2.5e-5], rtol=1e-12)
    assert seen[9] == pytest.approx(6.25e-6)
    assert [expected_lr(e, cfg) for e in range(10)] == pytest.approx(seen)


def test_scheduler_gamma_one_is_constant():
    cfg = TrainConfig(scheduler_gamma=1.0)
    opt = make_optimizer([torch.nn.Parameter(torch.zeros(2, 2))], cfg)
    sched = make_scheduler(opt, cfg)
    for _ in range(6):
        opt.step()
        sched.step()
    assert opt.param_groups[0]["lr"] == 1e-4


# ---------------------------------------------------------------- steps


def test_gradient_clipping_bounds_norm(stub):
    model = tiny_model(stub)
    ds = tiny_data()
    cfg = TrainConfig(clip_norm=0.25)
    rec = train_step(model, batch(ds), make_optimizer(model, cfg), cfg)
    assert rec.grad_norm > 0.25
    assert rec.grad_norm_clipped <= 0.25 * (1 + 1e-5)


def test_gradient_clipping_noop_below_threshold(stub):
    model = tiny_model(stub)
    cfg = TrainConfig(clip_norm=1e9)
    rec = train_step(model, batch(tiny_data()), make_optimizer(model, cfg), cfg)
    # the two norms are reduced in different float32 orders
    assert rec.grad_norm_clipped == pytest.approx(rec.grad_norm, rel=1e-5)


def test_step_leaves_backbone_untouched(stub):
    model = tiny_model(stub)
    before = parameter_checksum(model.backbone)
    cfg = TrainConfig()
    opt = make_optimizer(model, cfg)
    for _ in range(2):
        train_step(model, batch(tiny_data()), opt, cfg)
    assert parameter_checksum(model.backbone) == before


def test_non_finite_loss_names_batch(stub):
    model = tiny_model(stub)
    b = batch(tiny_data(), (2, 3))
    b["image"][:] = float("nan")
    with pytest.raises(TrainingError, match="synthetic/0/0002"):
        train_step(model, b, make_optimizer(model, TrainConfig()), TrainConfig())


def test_evaluate_returns_per_image_reports(stub):
    agg, per = evaluate(tiny_model(stub), tiny_data(3), Protocol(crop="none"), batch_size=2)
    assert len(per) == 3
    assert agg.abs_rel == pytest.approx(np.mean([r.abs_rel for r in per]))


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(stub, tmp_path):
    model = tiny_model(stub)
    cfg = TrainConfig()
    train_step(model, batch(tiny_data()), make_optimizer(model, cfg), cfg)
    path = save_checkpoint(tmp_path / "a.ckpt", model, cfg, epoch=3, best_abs_rel=0.2)
    ckpt = load_checkpoint(path)
    assert ckpt.epoch == 3 and ckpt.best_abs_rel == 0.2 and ckpt.train_config == cfg
    torch.manual_seed(99)
    restored = model_from_checkpoint(ckpt, stub)
    x = batch(tiny_data(2, seed=5))["image"]
    model.eval()
    with torch.no_grad():
        assert (model(x) - restored(x)).abs().max().item() <= 1e-6


def test_checkpoint_holds_no_backbone_weights(stub, tmp_path):
    model = tiny_model(stub)
    path = save_checkpoint(tmp_path / "a.ckpt", model, TrainConfig(), 0, 0.5)
    with zipfile.ZipFile(path) as zf:
        arrays = [n for n in zf.namelist() if n.startswith("arrays/")]
        manifest = json.loads(zf.read("manifest.json"))
    assert arrays and all(n.startswith(("arrays/decoder.", "arrays/film.")) for n in arrays)
    assert len(arrays) == len(trainable_state(model))
    assert manifest["backbone"]["kind"] == "stub"


def test_checkpoint_bytes_are_deterministic(stub, tmp_path):
    model = tiny_model(stub)
    a = save_checkpoint(tmp_path / "a.ckpt", model, TrainConfig(), 0, 0.5)
    b = save_checkpoint(tmp_path / "b.ckpt", model, TrainConfig(), 0, 0.5)
    assert file_sha256(a) == file_sha256(b)


def test_corrupt_checkpoint_detected(stub, tmp_path):
    model = tiny_model(stub)
    path = save_checkpoint(tmp_path / "a.ckpt", model, TrainConfig(), 0, 0.5)
    with zipfile.ZipFile(path) as zf:
        entries = {n: zf.read(n) for n in zf.namelist()}
    victim = next(n for n in entries if n.startswith("arrays/"))
    entries[victim] = entries[victim][:-4] + b"\x00\x00\x00\x01"
    bad = tmp_path / "bad.ckpt"
    with zipfile.ZipFile(bad, "w") as zf:
        for n, d in entries.items():
            zf.writestr(n, d)
    with pytest.raises(CheckpointError, match="integrity"):
        load_checkpoint(bad)
    with pytest.raises(CheckpointError, match="cannot open"):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_checkpoint_rejects_other_topology(stub, tmp_path):
    path = save_checkpoint(tmp_path / "a.ckpt", tiny_model(stub), TrainConfig(), 0, 0.5)
    with pytest.raises(CheckpointError):
        load_checkpoint(path).apply_to(tiny_model(stub, use_film=False))


# ---------------------------------------------------------------- fit


FIT_CFG = TrainConfig(batch_size=2, epochs=3, steps_per_epoch=2, seed=42)


def test_fit_is_deterministic(stub, tmp_path):
    runs = []
    for name in ("a", "b"):
        torch.manual_seed(0)
        model = tiny_model(stub)
        res = fit(model, tiny_data(train=True), cfg=FIT_CFG, out_dir=tmp_path / name, max_steps=3)
        runs.append(res)
    assert [s.loss for s in runs[0].steps] == [s.loss for s in runs[1].steps]
    assert file_sha256(runs[0].last_checkpoint) == file_sha256(runs[1].last_checkpoint)


def test_fit_writes_log_and_checkpoints(stub, tmp_path):
    torch.manual_seed(0)
    res = fit(tiny_model(stub), tiny_data(), val_data=tiny_data(2, seed=9), cfg=FIT_CFG, out_dir=tmp_path)
    assert [h.epoch for h in res.history] == [0, 1, 2]
    assert [h.lr for h in res.history] == pytest.approx([1e-4, 1e-4, 5e-5])
    assert res.best_checkpoint.exists() and res.last_checkpoint.exists()
    lines = [json.loads(x) for x in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert sum(x["kind"] == "step" for x in lines) == 6
    assert sum(x["kind"] == "epoch" for x in lines) == 3
    assert res.best_abs_rel == min(h.val_abs_rel for h in res.history)


def test_resume_restores_schedule_and_matches_straight_run(stub, tmp_path):
    torch.manual_seed(0)
    straight = tiny_model(stub)
    fit(straight, tiny_data(train=True), cfg=FIT_CFG, out_dir=tmp_path / "straight")

    torch.manual_seed(0)
    first = tiny_model(stub)
    fit(first, tiny_data(train=True), cfg=TrainConfig(**{**FIT_CFG.__dict__, "epochs": 2}),
        out_dir=tmp_path / "part")
    torch.manual_seed(123)
    resumed = tiny_model(stub)
    res = fit(resumed, tiny_data(train=True), cfg=FIT_CFG, out_dir=tmp_path / "resumed",
              resume=tmp_path / "part" / "last.ckpt")
    assert [h.epoch for h in res.history] == [2]
    assert res.history[0].lr == pytest.approx(expected_lr(2, FIT_CFG))
    a, b = trainable_state(straight), trainable_state(resumed)
    assert max(np.abs(a[k] - b[k]).max() for k in a) <= 1e-6


def test_fit_rejects_empty_dataset(stub):
    with pytest.raises(TrainingError, match="empty"):
        fit(tiny_model(stub), [], cfg=FIT_CFG)
