"""Training, evaluation and prediction drivers."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import data as D
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import ConfusionMatrix, MetricReport, accumulate_cm, binarize, dice_loss, metrics_from_cm
from .model import ModelConfig, ParamStore, check_divisible, forward, init_params
from .optim import OptimizerState, adamw_step
from .tensor import Tensor, backward

logger = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """Non-finite loss during training."""


@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 0.0025
    batch_size: int = 8
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    lr_schedule: str = "constant"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if not (self.lr > 0 and self.eps > 0):
            raise ValueError("lr and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.lr_schedule != "constant":
            raise ValueError(f"unsupported lr schedule {self.lr_schedule!r}; only 'constant'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    steps: int
    val_f1: float | None = None

    def line(self) -> str:
        val = "nan" if self.val_f1 is None else f"{self.val_f1:.2f}"
        return f"epoch={self.epoch} train_loss={self.train_loss:.6f} steps={self.steps} val_f1={val}"


def stack_samples(samples: Sequence[D.BitemporalSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    t1 = np.stack([s.t1 for s in samples]).astype(np.float32)
    t2 = np.stack([s.t2 for s in samples]).astype(np.float32)
    masks = np.stack([s.mask for s in samples]).astype(np.uint8)
    return t1, t2, masks


def predict_proba(params: ParamStore, config: ModelConfig, t1: np.ndarray, t2: np.ndarray,
                  batch_size: int = 8) -> np.ndarray:
    """Change probabilities [N, H, W] for stacked image pairs."""
    out = []
    for i in range(0, len(t1), batch_size):
        p = forward(Tensor(t1[i : i + batch_size]), Tensor(t2[i : i + batch_size]), params, config)
        out.append(p.data[:, 0])
    return np.concatenate(out) if out else np.zeros((0,) + t1.shape[2:], dtype=np.float32)


def confusion(params: ParamStore, config: ModelConfig, t1, t2, masks, batch_size: int = 8) -> ConfusionMatrix:
    cm = ConfusionMatrix()
    for i in range(0, len(t1), batch_size):
        prob = predict_proba(params, config, t1[i : i + batch_size], t2[i : i + batch_size], batch_size)
        cm = accumulate_cm(binarize(prob, config.threshold), masks[i : i + batch_size], cm)
    return cm


def fit_arrays(
    cfg: TrainConfig,
    t1: np.ndarray,
    t2: np.ndarray,
    masks: np.ndarray,
    val: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
    params: ParamStore | None = None,
    on_epoch: Callable[[EpochRecord, ParamStore], None] | None = None,
) -> tuple[ParamStore, list[EpochRecord]]:
    """Seeded mini-batch AdamW on dice loss; returns params and per-epoch log."""
    if len(t1) == 0:
        raise ValueError("training set is empty")
    check_divisible(t1.shape[2], t1.shape[3], cfg.model)
    if params is None:
        params = init_params(cfg.model, cfg.seed)
    state = OptimizerState.for_params(params)
    rng = np.random.default_rng(cfg.seed + 1)
    n = len(t1)
    log: list[EpochRecord] = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            params.zero_grad()
            pred = forward(Tensor(t1[idx]), Tensor(t2[idx]), params, cfg.model)
            loss = dice_loss(pred, masks[idx][:, None].astype(np.float32))
            value = loss.item()
            step += 1
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at step {step} (epoch {epoch})")
            backward(loss)
            adamw_step(params, state, cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)
            losses.append(value)
        rec = EpochRecord(epoch, float(np.mean(losses)), len(losses))
        if val is not None and len(val[0]):
            rec.val_f1 = metrics_from_cm(confusion(params, cfg.model, *val, cfg.batch_size)).f1
        logger.info(rec.line())
        log.append(rec)
        if on_epoch is not None:
            on_epoch(rec, params)
    return params, log


@dataclass
class TrainResult:
    params: ParamStore
    log: list[EpochRecord]
    last_checkpoint: Path
    best_checkpoint: Path | None


def train(cfg: TrainConfig, manifest: D.Manifest, out_dir) -> TrainResult:
    """Train on the manifest's train split, writing checkpoints and logs to ``out_dir``.

    ``last.ckpt`` is rewritten every epoch; ``best.ckpt`` tracks the best
    validation F1 when a val split exists.  ``train_log.txt`` holds one line
    per epoch and ``train_log.jsonl`` the same as JSON records.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_samples = manifest.load_split("train")
    if not train_samples:
        raise ValueError("manifest has an empty train split")
    val_samples = manifest.load_split("val")
    val = stack_samples(val_samples) if val_samples else None
    last = out / "last.ckpt"
    best = out / "best.ckpt" if val is not None else None
    best_f1 = [-1.0]
    text_log = open(out / "train_log.txt", "w", encoding="utf-8")
    json_log = open(out / "train_log.jsonl", "w", encoding="utf-8")

    def on_epoch(rec: EpochRecord, params: ParamStore) -> None:
        text_log.write(rec.line() + "\n")
        json_log.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
        text_log.flush()
        json_log.flush()
        meta = {"epoch": rec.epoch, "train_config": _train_meta(cfg)}
        save_checkpoint(last, params, cfg.model, meta)
        if best is not None and rec.val_f1 is not None and rec.val_f1 > best_f1[0]:
            best_f1[0] = rec.val_f1
            save_checkpoint(best, params, cfg.model, meta)

    try:
        params, log = fit_arrays(cfg, *stack_samples(train_samples), val=val, on_epoch=on_epoch)
    finally:
        text_log.close()
        json_log.close()
    return TrainResult(params, log, last, best)


def _train_meta(cfg: TrainConfig) -> dict:
    d = cfg.to_dict()
    d.pop("model")
    return d


def evaluate(checkpoint, manifest: D.Manifest, split: str = "test", out_path=None,
             oracle: bool = False, batch_size: int = 8) -> tuple[MetricReport, ConfusionMatrix]:
    """Global confusion matrix and metrics over one split.

    ``checkpoint`` is a checkpoint path or a ``(params, config)`` pair.
    ``oracle=True`` scores the ground truth against itself, bypassing the model.
    """
    samples = manifest.load_split(split)
    if not samples:
        raise ValueError(f"split {split!r} is empty")
    t1, t2, masks = stack_samples(samples)
    if oracle:
        cm = accumulate_cm(masks, masks)
    else:
        if isinstance(checkpoint, tuple):
            params, config = checkpoint
        else:
            params, config, _ = load_checkpoint(checkpoint)
        if t1.shape[1] != config.input_channels:
            raise ValueError(
                f"checkpoint expects {config.input_channels} input channels, data has {t1.shape[1]}"
            )
        check_divisible(t1.shape[2], t1.shape[3], config)
        cm = confusion(params, config, t1, t2, masks, batch_size)
    report = metrics_from_cm(cm)
    if out_path is not None:
        Path(out_path).write_text(
            json.dumps({"split": split, "metrics": report.to_dict(), "confusion": cm.to_dict()},
                       sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )
    return report, cm


def predict(checkpoint, t1_path, t2_path, out_dir, gt_path=None) -> dict[str, Path]:
    """Write ``prob.png``, ``mask.png`` and, with ground truth, ``error.png``."""
    params, config, _ = load_checkpoint(checkpoint)
    for p in (t1_path, t2_path) + ((gt_path,) if gt_path else ()):
        if not Path(p).is_file():
            raise FileNotFoundError(f"input not found: {p}")
    t1 = D.read_image(t1_path)
    t2 = D.read_image(t2_path)
    if t1.shape != t2.shape:
        raise ValueError(f"t1 {t1.shape} and t2 {t2.shape} are not congruent")
    check_divisible(t1.shape[1], t1.shape[2], config)
    prob = predict_proba(params, config, t1[None], t2[None])[0]
    prob8 = np.rint(255.0 * prob.astype(np.float64)).astype(np.uint8)
    mask = binarize(prob8 / 255.0, config.threshold)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {"prob": out / "prob.png", "mask": out / "mask.png"}
    D.write_gray(written["prob"], prob8)
    D.write_mask(written["mask"], mask)
    if gt_path:
        gt = D.read_mask(gt_path)
        if gt.shape != mask.shape:
            raise ValueError(f"ground truth {gt.shape} does not match prediction {mask.shape}")
        written["error"] = out / "error.png"
        D.write_image(written["error"], D.render_error_map(mask, gt))
    return written
