"""Training and evaluation loops, checkpoints, prediction and error diagnosis."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Sequence

import numpy as np
import torch
from scipy import ndimage

from .core import (ModelConfig, TrainConfig, format_config, parse_config_text,
                   validate_config, validate_train_config)
from .data import SampleTriplet, collate, make_batches
from .errors import CheckpointShapeError, DivergenceError, ShapeError
from .losses import LossWeights, downsample_majority, model_losses
from .metrics import EvalReport, build_report, iou
from .model import RefSegModel, build_model, trainable_parameters

log = logging.getLogger(__name__)

CKPT_VERSION = 1


# ---------------------------------------------------------------- schedule

def lr_at(step: int, total_steps: int, tcfg: TrainConfig) -> float:
    """Linear warm-up then cosine decay to ``min_lr`` (never above the base lr)."""
    base = tcfg.lr
    floor = min(tcfg.min_lr, base)
    warm = int(round(tcfg.warmup_frac * total_steps))
    if warm and step < warm:
        return base * (step + 1) / warm
    span = max(1, total_steps - warm)
    progress = min(1.0, (step - warm) / span)
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------- train state

@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    batch_in_epoch: int = 0
    best_gIoU: float = -1.0

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


@dataclass
class TrainResult:
    model: RefSegModel
    state: TrainState
    log: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    best_path: Path | None = None
    last_path: Path | None = None


def _optimizer(model: RefSegModel, tcfg: TrainConfig) -> torch.optim.AdamW:
    params = [p for _, p in trainable_parameters(model)]
    return torch.optim.AdamW(params, lr=tcfg.lr, weight_decay=tcfg.weight_decay)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | Path, model: RefSegModel, tcfg: TrainConfig | None = None,
                    optimizer: torch.optim.Optimizer | None = None,
                    state: TrainState | None = None) -> Path:
    """Single ``.npz`` archive: little-endian arrays keyed by parameter name,
    plus the flat config text and optional optimizer/train state."""
    arrays: dict[str, np.ndarray] = {}
    for name, t in model.state_dict().items():
        a = t.detach().cpu().numpy()
        arrays["param/" + name] = a.astype("<f4") if a.dtype.kind == "f" else a.astype("<i8")
    arrays["meta/config"] = np.frombuffer(format_config(model.cfg, tcfg).encode("utf-8"),
                                          dtype=np.uint8)
    arrays["meta/version"] = np.array([CKPT_VERSION], dtype="<i8")
    if state is not None:
        arrays["meta/state"] = np.frombuffer(state.to_json().encode("utf-8"), dtype=np.uint8)
    if optimizer is not None:
        for i, p in enumerate(optimizer.param_groups[0]["params"]):
            st = optimizer.state.get(p)
            if not st:
                continue
            arrays[f"optim/{i}/exp_avg"] = st["exp_avg"].cpu().numpy().astype("<f4")
            arrays[f"optim/{i}/exp_avg_sq"] = st["exp_avg_sq"].cpu().numpy().astype("<f4")
            arrays[f"optim/{i}/step"] = np.array([float(st["step"])], dtype="<f4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)
    return path


@dataclass
class Checkpoint:
    model: RefSegModel
    cfg: ModelConfig
    tcfg: TrainConfig
    state: TrainState | None
    optim: dict[int, dict[str, np.ndarray]]


def load_checkpoint(path: str | Path, cfg: ModelConfig | None = None) -> Checkpoint:
    """Rebuild the model and check every stored array against its expected shape.

    When ``cfg`` is given the stored weights must fit a model built from it.
    """
    with np.load(path) as z:
        files = {k: z[k] for k in z.files}
    stored_cfg, tcfg = parse_config_text(files["meta/config"].tobytes().decode("utf-8"))
    cfg = validate_config(cfg or stored_cfg)
    model = build_model(cfg)
    own = model.state_dict()
    params = {k[len("param/"):]: v for k, v in files.items() if k.startswith("param/")}
    missing = sorted(set(own) - set(params))
    extra = sorted(set(params) - set(own))
    if missing or extra:
        raise CheckpointShapeError(f"parameter names differ; missing={missing[:5]} "
                                   f"unexpected={extra[:5]}")
    loaded = {}
    for name, ref in own.items():
        arr = params[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointShapeError(f"{name}: stored shape {arr.shape} "
                                       f"!= expected {tuple(ref.shape)}")
        loaded[name] = torch.from_numpy(np.array(arr)).to(ref.dtype)
    model.load_state_dict(loaded)
    state = None
    if "meta/state" in files:
        state = TrainState(**json.loads(files["meta/state"].tobytes().decode("utf-8")))
    optim: dict[int, dict[str, np.ndarray]] = {}
    for k, v in files.items():
        if k.startswith("optim/"):
            _, idx, kind = k.split("/")
            optim.setdefault(int(idx), {})[kind] = v
    return Checkpoint(model, cfg, tcfg, state, optim)


def _restore_optimizer(opt: torch.optim.Optimizer, optim: dict[int, dict[str, np.ndarray]]):
    params = opt.param_groups[0]["params"]
    for i, st in optim.items():
        p = params[i]
        if st["exp_avg"].shape != tuple(p.shape):
            raise CheckpointShapeError(f"optimizer state {i} shape {st['exp_avg'].shape} "
                                       f"!= parameter {tuple(p.shape)}")
        opt.state[p] = {
            "step": torch.tensor(float(st["step"][0])),
            "exp_avg": torch.from_numpy(np.array(st["exp_avg"])).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(np.array(st["exp_avg_sq"])).to(p.dtype),
        }


# ---------------------------------------------------------------- inference

@torch.no_grad()
def predict_batch(model: RefSegModel, samples: Sequence[SampleTriplet]) -> dict[str, np.ndarray]:
    was_training = model.training
    model.eval()
    images, texts, _ = collate(samples)
    out = model.run_texts(images.to(model.tokens.filter.dtype), texts)
    model.train(was_training)
    return {
        "logits": out.logits.float().numpy(),
        "masks": (out.logits > 0).numpy().astype(np.uint8),
        "p_dense": out.p_dense.float().numpy(),
        "iou_pred": out.iou_pred.float().numpy(),
    }


def predict(model: RefSegModel, image: np.ndarray, text: str) -> tuple[np.ndarray, np.ndarray]:
    """Binary ``H2 x W2`` mask and the ``(H2/4) x (W2/4)`` dense prompt map for one pair."""
    cfg = model.cfg
    image = np.asarray(image, dtype=np.float32)
    if image.shape != (cfg.H2, cfg.W2, 3):
        raise ShapeError(f"image must be {cfg.H2} x {cfg.W2} x 3, got {image.shape}")
    sample = SampleTriplet(image, text, np.zeros((cfg.H2, cfg.W2), np.uint8), "query")
    out = predict_batch(model, [sample])
    return out["masks"][0], out["p_dense"][0]


def evaluate_model(model: RefSegModel, samples: Sequence[SampleTriplet],
                   batch_size: int = 32, categories: dict | None = None) -> EvalReport:
    pairs = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        preds = predict_batch(model, chunk)["masks"]
        pairs += [(s.id, p, s.mask) for s, p in zip(chunk, preds)]
    if categories is None:
        categories = {s.id: s.category for s in samples if s.category}
    return build_report(pairs, categories)


# ---------------------------------------------------------------- training

def _validate(model, val_set, state: TrainState, result: TrainResult, checkpoint) -> None:
    rep = evaluate_model(model, val_set)
    result.evals.append({"epoch": state.epoch, "step": state.step,
                         "gIoU": rep.gIoU, "cIoU": rep.cIoU})
    log.info("epoch %d val gIoU %.4f cIoU %.4f", state.epoch, rep.gIoU, rep.cIoU)
    if rep.gIoU > state.best_gIoU:
        state.best_gIoU = rep.gIoU
        result.best_path = checkpoint("best.ckpt.npz")


def train(cfg: ModelConfig, tcfg: TrainConfig, dataset: Sequence[SampleTriplet],
          out_dir: str | Path | None = None, val_set: Sequence[SampleTriplet] | None = None,
          *, resume: str | Path | None = None, stop_after: int | None = None,
          log_stream: IO[str] | None = None, save_every: int = 0) -> TrainResult:
    """AdamW over the trainable subset with warm-up + cosine schedule.

    ``stop_after`` halts after that many optimizer steps in total (the schedule
    still spans the full run, so a resumed run continues it exactly).  Each
    step's loss breakdown is written as one JSON line to ``log_stream``.
    """
    cfg = validate_config(cfg)
    tcfg = validate_train_config(tcfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    weights = LossWeights.from_config(cfg)

    if resume is not None:
        ck = load_checkpoint(resume, cfg)
        model, state = ck.model, ck.state or TrainState()
        opt = _optimizer(model, tcfg)
        _restore_optimizer(opt, ck.optim)
    else:
        model, state = build_model(cfg), TrainState()
        opt = _optimizer(model, tcfg)
    model.train()

    steps_per_epoch = math.ceil(len(dataset) / tcfg.batch_size)
    total_steps = tcfg.max_steps or tcfg.epochs * steps_per_epoch
    result = TrainResult(model, state)
    params = [p for _, p in trainable_parameters(model)]

    def checkpoint(name: str) -> Path | None:
        if out is None:
            return None
        return save_checkpoint(out / name, model, tcfg, opt, state)

    done = False
    while not done and state.step < total_steps:
        batches = make_batches(dataset, tcfg.batch_size, cfg.seed, state.epoch)
        for b_idx, batch in enumerate(batches):
            if b_idx < state.batch_in_epoch:
                continue
            lr = lr_at(state.step, total_steps, tcfg)
            for g in opt.param_groups:
                g["lr"] = lr
            images, texts, masks = collate(batch)
            outputs = model.run_texts(images, texts)
            objective, _, breakdown = model_losses(outputs, masks, weights, cfg.iou_loss_weight)
            if not torch.isfinite(objective):
                raise DivergenceError(f"non-finite loss at step {state.step}: {breakdown}")
            opt.zero_grad(set_to_none=True)
            objective.backward()
            if tcfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, tcfg.grad_clip)
            opt.step()
            record = {"step": state.step, "epoch": state.epoch, "lr": lr, **breakdown}
            result.log.append(record)
            if log_stream is not None and state.step % tcfg.log_every == 0:
                log_stream.write(json.dumps(record) + "\n")
                log_stream.flush()
            state.step += 1
            state.batch_in_epoch = b_idx + 1
            if state.batch_in_epoch == steps_per_epoch:
                state.epoch += 1
                state.batch_in_epoch = 0
                if val_set is not None and state.epoch % tcfg.eval_every == 0:
                    _validate(model, val_set, state, result, checkpoint)
            if save_every and state.step % save_every == 0:
                checkpoint(f"step{state.step:06d}.ckpt.npz")
            if state.step >= total_steps or (stop_after is not None and state.step >= stop_after):
                done = True
                break
    result.last_path = checkpoint("last.ckpt.npz")
    return result


# ---------------------------------------------------------------- diagnosis

def _peak_region(p_dense: np.ndarray) -> np.ndarray:
    """Connected region around the argmax of the half-maximum-thresholded map."""
    lo, hi = float(p_dense.min()), float(p_dense.max())
    binary = p_dense >= lo + 0.5 * (hi - lo) if hi > lo else np.ones_like(p_dense, bool)
    labels, _ = ndimage.label(binary)
    peak = np.unravel_index(int(np.argmax(p_dense)), p_dense.shape)
    return labels == labels[peak]


def diagnose(pred_mask: np.ndarray, p_dense: np.ndarray, gt: np.ndarray,
             loc_threshold: float = 0.1, seg_threshold: float = 0.5) -> str:
    """``localization_error`` when the dense prompt's peak region misses the
    target, ``segmentation_error`` when it hits but the final mask is poor,
    otherwise ``ok``."""
    gt_low = downsample_majority(torch.as_tensor(np.asarray(gt, dtype=np.float32)),
                                 p_dense.shape).numpy()
    if iou(_peak_region(np.asarray(p_dense)), gt_low) < loc_threshold:
        return "localization_error"
    if iou(pred_mask, gt) < seg_threshold:
        return "segmentation_error"
    return "ok"
