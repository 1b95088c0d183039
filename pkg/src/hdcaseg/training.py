"""SGD with momentum, poly learning-rate decay, augmentation, training loop and mIoU."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import checkpoint
from .hdca import check_level_invariants
from .model import IGNORE_INDEX, SegModel, cross_entropy_loss, model_forward, predict_labels, tta_predict
from .synthdata import SceneSample
from .tensor import ComputationRecord, NonFiniteError, Tensor, backward, bilinear_resize

log = logging.getLogger(__name__)


def poly_lr(iteration: int, iter_max: int, base_lr: float, power: float = 0.9) -> float:
    if not 0 <= iteration <= iter_max:
        raise ValueError(f"iteration {iteration} outside [0, {iter_max}]")
    return base_lr * (1.0 - iteration / iter_max) ** power


@dataclass
class OptimizerState:
    base_lr: float
    iter_max: int
    momentum: float = 0.9
    weight_decay: float = 1e-4
    iteration: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {
            "opt.iter": np.array([self.iteration], dtype=np.float64),
            "opt.iter_max": np.array([self.iter_max], dtype=np.float64),
            "opt.base_lr": np.array([self.base_lr], dtype=np.float64),
            "opt.momentum": np.array([self.momentum], dtype=np.float64),
            "opt.weight_decay": np.array([self.weight_decay], dtype=np.float64),
        }
        out.update({f"opt.velocity.{k}": v for k, v in self.velocity.items()})
        return out

    @classmethod
    def from_tensors(cls, t: Mapping[str, np.ndarray]) -> "OptimizerState":
        try:
            state = cls(base_lr=float(t["opt.base_lr"][0]), iter_max=int(t["opt.iter_max"][0]),
                        momentum=float(t["opt.momentum"][0]), weight_decay=float(t["opt.weight_decay"][0]),
                        iteration=int(t["opt.iter"][0]))
        except KeyError as e:
            raise checkpoint.CheckpointError(f"optimizer section lacks {e.args[0]}") from None
        prefix = "opt.velocity."
        state.velocity = {k[len(prefix):]: np.array(v) for k, v in t.items() if k.startswith(prefix)}
        return state


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState,
             lr: float | None = None) -> float:
    """One momentum-SGD update with L2 weight decay folded into the velocity.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    The learning rate defaults to the poly schedule at ``state.iteration``,
    which is then advanced.  Returns the learning rate used.
    """
    if lr is None:
        lr = poly_lr(state.iteration, state.iter_max, state.base_lr)
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v + g + state.weight_decay * p.data
        state.velocity[name] = v.astype(p.dtype)
        p.data = (p.data - lr * state.velocity[name]).astype(p.dtype)
    state.iteration += 1
    return lr


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass
class Geometry:
    scale: float
    top: int
    left: int
    flip: bool


def nearest_resize(labels: np.ndarray, h2: int, w2: int) -> np.ndarray:
    H, W = labels.shape
    ri = np.minimum(((np.arange(h2) + 0.5) * H / h2).astype(np.int64), H - 1)
    ci = np.minimum(((np.arange(w2) + 0.5) * W / w2).astype(np.int64), W - 1)
    return labels[ri[:, None], ci[None, :]]


def apply_geometry(sample: SceneSample, g: Geometry, crop: int, ignore_index: int = IGNORE_INDEX) -> SceneSample:
    """Scale, pad (bottom/right) to at least ``crop``, crop at (top, left), then mirror."""
    H, W = sample.labels.shape
    h2, w2 = max(1, int(round(H * g.scale))), max(1, int(round(W * g.scale)))
    img = sample.image.astype(np.float32)
    if (h2, w2) != (H, W):
        img = bilinear_resize(Tensor(img), h2, w2).data
    lab = nearest_resize(sample.labels, h2, w2)
    ph, pw = max(0, crop - h2), max(0, crop - w2)
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)))
        lab = np.pad(lab, ((0, ph), (0, pw)), constant_values=ignore_index)
    img = img[:, g.top:g.top + crop, g.left:g.left + crop]
    lab = lab[g.top:g.top + crop, g.left:g.left + crop]
    if g.flip:
        img, lab = img[..., ::-1], lab[..., ::-1]
    return SceneSample(np.ascontiguousarray(img), np.ascontiguousarray(lab))


def draw_geometry(shape: tuple[int, int], rng: np.random.Generator, crop: int,
                  scale_range=(0.5, 2.0), flip_prob: float = 0.5) -> Geometry:
    H, W = shape
    s = float(rng.uniform(*scale_range))
    h2, w2 = max(crop, int(round(H * s))), max(crop, int(round(W * s)))
    top = int(rng.integers(0, h2 - crop + 1))
    left = int(rng.integers(0, w2 - crop + 1))
    return Geometry(s, top, left, bool(rng.random() < flip_prob))


def augment(sample: SceneSample, rng: np.random.Generator, crop: int, scale_range=(0.5, 2.0),
            flip_prob: float = 0.5, ignore_index: int = IGNORE_INDEX) -> SceneSample:
    if crop % 8:
        raise ValueError(f"crop size must be divisible by 8, got {crop}")
    g = draw_geometry(sample.labels.shape, rng, crop, scale_range, flip_prob)
    return apply_geometry(sample, g, crop, ignore_index)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    iters: int = 2000
    batch_size: int = 4
    crop: int = 64
    base_lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    scale_min: float = 0.5
    scale_max: float = 2.0
    flip_prob: float = 0.5
    augment: bool = True
    checkpoint_every: int = 0
    check_invariants: bool = True

    def __post_init__(self):
        if self.crop % 8:
            raise ValueError(f"crop must be divisible by 8, got {self.crop}")
        if self.iters < 1 or self.batch_size < 1:
            raise ValueError("iters and batch_size must be positive")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    loss_log: list[tuple[int, float, float]]
    optimizer: OptimizerState
    checkpoints: list[Path] = field(default_factory=list)


def format_log_line(it: int, lr: float, loss: float) -> str:
    return f"{it}\t{lr!r}\t{loss!r}"


def make_batch(dataset: Sequence[SceneSample], cfg: TrainConfig, iteration: int,
               ignore_index: int = IGNORE_INDEX) -> tuple[np.ndarray, np.ndarray]:
    """Batch for one iteration; a pure function of (seed, iteration) so resumes replay exactly."""
    rng = np.random.default_rng([cfg.seed, iteration])
    idx = rng.choice(len(dataset), size=cfg.batch_size, replace=len(dataset) < cfg.batch_size)
    imgs, labs = [], []
    for i in idx:
        s = dataset[int(i)]
        if cfg.augment:
            s = augment(s, rng, cfg.crop, (cfg.scale_min, cfg.scale_max), cfg.flip_prob, ignore_index)
        imgs.append(s.image)
        labs.append(s.labels)
    return np.stack(imgs).astype(np.float32), np.stack(labs).astype(np.int64)


def save_training_checkpoint(path, model: SegModel, state: OptimizerState) -> None:
    checkpoint.save(path, model.state_dict(), state.to_tensors())


def load_training_checkpoint(path, model: SegModel) -> OptimizerState | None:
    tensors, opt = checkpoint.load(path)
    model.load_state_dict(tensors)
    return OptimizerState.from_tensors(opt) if opt else None


def train(model: SegModel, dataset: Sequence[SceneSample], cfg: TrainConfig,
          out_dir=None, state: OptimizerState | None = None,
          on_step: Callable[[int, float, float], None] | None = None) -> TrainResult:
    """Run (or resume, when ``state`` is given) poly-LR momentum SGD for ``cfg.iters`` steps.

    With ``out_dir`` the loss log is appended to ``loss.log`` and checkpoints
    are written every ``cfg.checkpoint_every`` iterations plus at the end.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    ignore = model.config.ignore_index
    if state is None:
        state = OptimizerState(cfg.base_lr, cfg.iters, cfg.momentum, cfg.weight_decay)
    params = model.named_parameters()
    out = Path(out_dir) if out_dir is not None else None
    logf = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logf = open(out / "loss.log", "a" if state.iteration else "w")
    result = TrainResult([], state)
    try:
        while state.iteration < state.iter_max:
            it = state.iteration
            images, labels = make_batch(dataset, cfg, it, ignore)
            try:
                with ComputationRecord(params) as rec:
                    logits, maps = model_forward(model, Tensor(images), training=True)
                    loss = cross_entropy_loss(logits, labels, ignore)
                if cfg.check_invariants:
                    for p in maps:
                        check_level_invariants(p)
                grads = backward(loss, rec)
            except NonFiniteError as e:
                raise TrainingDiverged(f"iteration {it}: {e}") from e
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise TrainingDiverged(f"iteration {it}: loss is {lv}")
            lr = sgd_step(params, grads, state)
            result.loss_log.append((it, lr, lv))
            if logf is not None:
                logf.write(format_log_line(it, lr, lv) + "\n")
            if on_step is not None:
                on_step(it, lr, lv)
            if it % 100 == 0:
                log.info("iter %d lr %.6g loss %.4f", it, lr, lv)
            done = state.iteration
            if out is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < state.iter_max:
                path = out / f"checkpoint_{done:06d}.ckpt"
                save_training_checkpoint(path, model, state)
                result.checkpoints.append(path)
        if out is not None:
            path = out / "checkpoint_final.ckpt"
            save_training_checkpoint(path, model, state)
            result.checkpoints.append(path)
    finally:
        if logf is not None:
            logf.close()
    return result


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


class MetricAccumulator:
    def __init__(self, num_classes: int, ignore_index: int = IGNORE_INDEX):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.confusion = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, labels: np.ndarray) -> None:
        pred, labels = np.asarray(pred).astype(np.int64), np.asarray(labels).astype(np.int64)
        if pred.shape != labels.shape:
            raise ValueError(f"prediction {pred.shape} vs labels {labels.shape}")
        mask = labels != self.ignore_index
        k = self.num_classes
        idx = labels[mask] * k + pred[mask]
        self.confusion += np.bincount(idx, minlength=k * k).reshape(k, k)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN where the class never occurs in labels or predictions."""
        tp = np.diag(self.confusion).astype(np.float64)
        denom = self.confusion.sum(0) + self.confusion.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)

    def mean_iou(self) -> float:
        iou = self.iou()
        return float(np.nanmean(iou)) if np.isfinite(iou).any() else float("nan")

    def pixel_accuracy(self) -> float:
        return float(np.trace(self.confusion) / max(self.total, 1))


@dataclass
class EvalResult:
    per_class_iou: np.ndarray
    mean_iou: float
    pixel_accuracy: float
    confusion: np.ndarray


def evaluate(model: SegModel, dataset: Sequence[SceneSample], tta: bool = False,
             scales: Sequence[float] = (1.0,), flip: bool = False, batch_size: int = 8) -> EvalResult:
    acc = MetricAccumulator(model.config.num_classes, model.config.ignore_index)
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start:start + batch_size]
        images = np.stack([s.image for s in chunk]).astype(np.float32)
        if tta:
            pred = tta_predict(model, images, scales, flip)
        else:
            pred = predict_labels(model, images)
        for p, s in zip(pred, chunk):
            acc.update(p, s.labels)
    return EvalResult(acc.iou(), acc.mean_iou(), acc.pixel_accuracy(), acc.confusion)
