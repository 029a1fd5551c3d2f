"""Optimization loop, evaluation pass, and checkpoint archives.

Only the decoder and FiLM generators are optimized. Checkpoints are zip
archives with a JSON manifest (configs plus per-array SHA-256), one ``.npy``
entry per trainable tensor, and a pickled blob with optimizer, scheduler,
and RNG state for resuming. Entries carry a fixed timestamp so identical runs
produce byte-identical files.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import math
import pickle
import random
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.utils.data import DataLoader

from . import config as config_mod
from .config import ConfigError, ModelConfig, TrainConfig
from .decoder import DepthMap, SpaceClip
from .encoder import Backbone
from .losses import total_loss
from .metrics import MetricsReport, Protocol, aggregate_reports, compute_metrics

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "space-clip-checkpoint/1"
_ZIP_DATE = (2020, 1, 1, 0, 0, 0)


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.benchmark = False


# ---------------------------------------------------------------- optimizer / scheduler


def _named_trainable(model) -> list[tuple[str, nn.Parameter, bool]]:
    """(name, param, decays) for every trainable parameter of ``model``."""
    if isinstance(model, SpaceClip):
        modules = model.trainable_modules()
    elif isinstance(model, nn.Module):
        modules = {"": model}
    else:
        params = [p for p in model if p.requires_grad]
        return [(f"param{i}", p, p.dim() > 1) for i, p in enumerate(params)]
    out = []
    for prefix, mod in modules.items():
        for mod_name, sub in mod.named_modules():
            for pname, p in sub.named_parameters(recurse=False):
                if not p.requires_grad:
                    continue
                is_norm = isinstance(sub, (nn.GroupNorm, nn.LayerNorm, nn.BatchNorm2d))
                is_film_bias = prefix == "film" and pname == "bias"
                name = ".".join(x for x in (prefix, mod_name, pname) if x)
                out.append((name, p, not (is_norm or is_film_bias)))
    return out


def make_optimizer(model, cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW over trainable parameters; norm layers and FiLM biases skip weight decay."""
    named = _named_trainable(model)
    if not named:
        raise ConfigError("no trainable parameters to optimize")
    decay = [p for _, p, d in named if d]
    no_decay = [p for _, p, d in named if not d]
    groups = [g for g in (
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ) if g["params"]]
    return torch.optim.AdamW(groups, lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps)


def make_scheduler(optimizer, cfg: TrainConfig) -> torch.optim.lr_scheduler.StepLR:
    return torch.optim.lr_scheduler.StepLR(
        optimizer, step_size=cfg.scheduler_step_epochs, gamma=cfg.scheduler_gamma
    )


def expected_lr(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr * cfg.scheduler_gamma ** (epoch // cfg.scheduler_step_epochs)


# ---------------------------------------------------------------- steps


@dataclass
class StepRecord:
    step: int
    epoch: int
    lr: float
    loss: float
    silog: float
    ssim: float
    grad_norm: float
    grad_norm_clipped: float


def _global_grad_norm(params) -> float:
    grads = [p.grad.detach().flatten() for p in params if p.grad is not None]
    if not grads:
        return 0.0
    return float(torch.linalg.vector_norm(torch.cat(grads)))


def train_step(model: SpaceClip, batch: dict, optimizer, cfg: TrainConfig,
               step: int = 0, epoch: int = 0) -> StepRecord:
    model.train()
    params = list(model.trainable_parameters())
    pred = model(batch["image"])
    losses = total_loss(pred, batch["depth"], batch["valid"], cfg.loss)
    if not torch.isfinite(losses.total):
        ids = list(batch.get("source_id", batch.get("index", [])))
        raise TrainingError(f"non-finite loss {losses.total.item()} at step {step}; batch ids: {ids}")
    optimizer.zero_grad(set_to_none=True)
    losses.total.backward()
    pre = float(nn.utils.clip_grad_norm_(params, cfg.clip_norm))
    post = _global_grad_norm(params)
    lr = optimizer.param_groups[0]["lr"]
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return StepRecord(step, epoch, lr, losses.total.item(), losses.silog.item(),
                      losses.ssim.item(), pre, post)


# ---------------------------------------------------------------- evaluation


@torch.no_grad()
def evaluate(model: SpaceClip, dataset, protocol: Protocol = Protocol(), batch_size: int = 4
             ) -> tuple[MetricsReport, list[MetricsReport]]:
    model.eval()
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False)
    per_image = []
    for batch in loader:
        pred = model(batch["image"]).numpy()
        for p, d, v in zip(pred, batch["depth"].numpy(), batch["valid"].numpy()):
            per_image.append(compute_metrics(DepthMap.dense(p), DepthMap(d, v), protocol))
    return aggregate_reports(per_image), per_image


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    weights: dict[str, np.ndarray]
    model_config: ModelConfig
    train_config: TrainConfig
    epoch: int
    best_abs_rel: float
    backbone: dict = field(default_factory=dict)
    rng_state: bytes = b""
    train_state: bytes = b""

    def apply_to(self, model: SpaceClip) -> SpaceClip:
        if model.cfg != self.model_config:
            raise CheckpointError("checkpoint model config does not match the target model")
        expected = trainable_state(model)
        missing = set(expected) - set(self.weights)
        extra = set(self.weights) - set(expected)
        if missing or extra:
            raise CheckpointError(f"weight names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, mod in model.trainable_modules().items():
            sd = {k[len(name) + 1:]: torch.from_numpy(v.copy()) for k, v in self.weights.items()
                  if k.startswith(name + ".")}
            for k, v in sd.items():
                if tuple(v.shape) != tuple(mod.state_dict()[k].shape):
                    raise CheckpointError(
                        f"{name}.{k}: checkpoint shape {tuple(v.shape)} != model {tuple(mod.state_dict()[k].shape)}"
                    )
            mod.load_state_dict(sd)
        return model


def trainable_state(model: SpaceClip) -> dict[str, np.ndarray]:
    out = {}
    for name, mod in model.trainable_modules().items():
        for k, v in mod.state_dict().items():
            out[f"{name}.{k}"] = v.detach().cpu().numpy()
    return out


def _npy_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def _to_numpy_tree(obj):
    if isinstance(obj, torch.Tensor):
        return ("__tensor__", obj.detach().cpu().numpy())
    if isinstance(obj, dict):
        return {k: _to_numpy_tree(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(_to_numpy_tree(v) for v in obj)
    return obj


def _from_numpy_tree(obj):
    if isinstance(obj, tuple) and len(obj) == 2 and obj[0] == "__tensor__":
        return torch.from_numpy(obj[1])
    if isinstance(obj, dict):
        return {k: _from_numpy_tree(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(_from_numpy_tree(v) for v in obj)
    return obj


def capture_rng_state(loader_generator: torch.Generator | None = None) -> bytes:
    state = {
        "python": random.getstate(),
        "numpy": np.random.get_state(),
        "torch": torch.get_rng_state().numpy(),
        "loader": None if loader_generator is None else loader_generator.get_state().numpy(),
    }
    return pickle.dumps(state, protocol=4)


def restore_rng_state(blob: bytes, loader_generator: torch.Generator | None = None) -> None:
    state = pickle.loads(blob)
    random.setstate(state["python"])
    np.random.set_state(state["numpy"])
    torch.set_rng_state(torch.from_numpy(state["torch"]))
    if loader_generator is not None and state["loader"] is not None:
        loader_generator.set_state(torch.from_numpy(state["loader"]))


def save_checkpoint(path: str | Path, model: SpaceClip, train_cfg: TrainConfig, epoch: int,
                    best_abs_rel: float, rng_state: bytes = b"", train_state: bytes = b"",
                    backbone: dict | None = None) -> Path:
    path = Path(path)
    weights = trainable_state(model)
    leaked = [k for k in weights if not k.startswith(("decoder.", "film."))]
    if leaked:
        raise CheckpointError(f"refusing to store non-decoder parameters: {leaked}")
    blobs = {f"arrays/{k}.npy": _npy_bytes(v) for k, v in sorted(weights.items())}
    blobs["rng_state.pkl"] = rng_state
    blobs["train_state.pkl"] = train_state
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "model_config": config_mod.to_dict(model.cfg),
        "train_config": config_mod.to_dict(train_cfg),
        "backbone": backbone if backbone is not None else model.backbone.describe(),
        "epoch": epoch,
        "best_abs_rel": None if math.isnan(best_abs_rel) else best_abs_rel,
        "sha256": {k: hashlib.sha256(v).hexdigest() for k, v in sorted(blobs.items())},
    }
    blobs = {"manifest.json": json.dumps(manifest, indent=2, sort_keys=True).encode(), **blobs}
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, data in blobs.items():
            zf.writestr(zipfile.ZipInfo(name, date_time=_ZIP_DATE), data)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except (FileNotFoundError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
        blobs = {}
        for name, digest in manifest["sha256"].items():
            data = zf.read(name)
            if hashlib.sha256(data).hexdigest() != digest:
                raise CheckpointError(f"{path}: integrity check failed for {name}")
            blobs[name] = data
    weights = {
        name[len("arrays/"):-len(".npy")]: np.load(io.BytesIO(data), allow_pickle=False)
        for name, data in blobs.items() if name.startswith("arrays/")
    }
    tc = dict(manifest["train_config"])
    tc["loss"] = config_mod.LossConfig(**tc.get("loss", {}))
    best = manifest["best_abs_rel"]
    return Checkpoint(
        weights=weights,
        model_config=ModelConfig(**manifest["model_config"]),
        train_config=TrainConfig(**tc),
        epoch=manifest["epoch"],
        best_abs_rel=float("nan") if best is None else best,
        backbone=manifest.get("backbone", {}),
        rng_state=blobs.get("rng_state.pkl", b""),
        train_state=blobs.get("train_state.pkl", b""),
    )


def model_from_checkpoint(ckpt: Checkpoint, backbone: Backbone) -> SpaceClip:
    model = SpaceClip(backbone, ckpt.model_config)
    ckpt.apply_to(model)
    model.eval()
    return model


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- fit


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_silog: float
    val_abs_rel: float
    seconds: float


@dataclass
class FitResult:
    history: list[EpochRecord]
    steps: list[StepRecord]
    best_checkpoint: Path | None
    last_checkpoint: Path | None
    best_abs_rel: float


def _collate(items: list[dict]) -> dict:
    return {
        "image": torch.stack([it["image"] for it in items]),
        "depth": torch.stack([it["depth"] for it in items]),
        "valid": torch.stack([it["valid"] for it in items]),
        "index": [it["index"] for it in items],
        "source_id": [it["source_id"] for it in items],
    }


def _batches(loader: DataLoader, n_steps: int | None):
    if n_steps is None:
        yield from loader
        return
    done = 0
    while done < n_steps:
        for batch in loader:
            yield batch
            done += 1
            if done == n_steps:
                return


class _RunLog:
    def __init__(self, path: Path | None):
        self.fh = open(path, "a") if path is not None else None

    def write(self, kind: str, record) -> None:
        if self.fh is not None:
            self.fh.write(json.dumps({"kind": kind, **dataclasses.asdict(record)}) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


def fit(model: SpaceClip, train_data, val_data=None, cfg: TrainConfig = TrainConfig(),
        out_dir: str | Path | None = None, protocol: Protocol = Protocol(split="val"),
        resume: str | Path | None = None, max_steps: int | None = None,
        on_step=None) -> FitResult:
    """Train for ``cfg.epochs`` epochs with per-epoch lr decay and best-by-AbsRel selection.

    ``train_data`` / ``val_data`` are map-style datasets yielding dicts with
    ``image``, ``depth``, ``valid``. With ``out_dir`` set, ``best.ckpt``,
    ``last.ckpt`` and an append-only ``train_log.jsonl`` are written there.
    ``max_steps`` stops early (mid-epoch) and is meant for smoke runs.
    """
    if len(train_data) == 0:
        raise TrainingError("training set is empty")
    seed_everything(cfg.seed, cfg.deterministic)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    runlog = _RunLog(out / "train_log.jsonl" if out else None)

    optimizer = make_optimizer(model, cfg)
    scheduler = make_scheduler(optimizer, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    loader = DataLoader(train_data, batch_size=cfg.batch_size, shuffle=True, generator=gen,
                        collate_fn=_collate, num_workers=cfg.num_workers)

    start_epoch, best = 0, float("inf")
    if resume is not None:
        ckpt = load_checkpoint(resume)
        ckpt.apply_to(model)
        state = _from_numpy_tree(pickle.loads(ckpt.train_state))
        optimizer.load_state_dict(state["optimizer"])
        scheduler.load_state_dict(state["scheduler"])
        restore_rng_state(ckpt.rng_state, gen)
        start_epoch = ckpt.epoch + 1
        best = state.get("best", best)

    history, steps = [], []
    best_path = last_path = None
    step = 0
    try:
        for epoch in range(start_epoch, cfg.epochs):
            t0 = time.time()
            if hasattr(train_data, "set_epoch"):
                train_data.set_epoch(epoch)
            lr = optimizer.param_groups[0]["lr"]
            ep_steps = []
            for batch in _batches(loader, cfg.steps_per_epoch):
                rec = train_step(model, batch, optimizer, cfg, step=step, epoch=epoch)
                ep_steps.append(rec)
                runlog.write("step", rec)
                if on_step is not None:
                    on_step(rec)
                step += 1
                if max_steps is not None and step >= max_steps:
                    break
            steps.extend(ep_steps)
            scheduler.step()

            val_abs_rel = float("nan")
            if val_data is not None and len(val_data):
                val_abs_rel = evaluate(model, val_data, protocol, batch_size=cfg.batch_size)[0].abs_rel
            rec = EpochRecord(
                epoch=epoch,
                lr=lr,
                train_loss=float(np.mean([s.loss for s in ep_steps])),
                train_silog=float(np.mean([s.silog for s in ep_steps])),
                val_abs_rel=val_abs_rel,
                seconds=time.time() - t0,
            )
            history.append(rec)
            runlog.write("epoch", rec)
            log.info("epoch %d lr %.3g loss %.4f val abs_rel %.4f", epoch, lr, rec.train_loss, val_abs_rel)

            score = val_abs_rel if not math.isnan(val_abs_rel) else rec.train_loss
            improved = score < best
            if improved:
                best = score
            if out is not None:
                train_state = pickle.dumps(_to_numpy_tree({
                    "optimizer": optimizer.state_dict(),
                    "scheduler": scheduler.state_dict(),
                    "best": best,
                }), protocol=4)
                rng = capture_rng_state(gen)
                best_val = val_abs_rel if not math.isnan(val_abs_rel) else float("nan")
                last_path = save_checkpoint(out / "last.ckpt", model, cfg, epoch, best_val, rng, train_state)
                if improved:
                    best_path = save_checkpoint(out / "best.ckpt", model, cfg, epoch, best_val, rng, train_state)
            if max_steps is not None and step >= max_steps:
                break
    finally:
        runlog.close()
    return FitResult(history, steps, best_path, last_path, best)
