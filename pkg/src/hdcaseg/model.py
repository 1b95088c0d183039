"""Backbone + HDCA pyramid + 1x1 classifier, with loss and prediction paths."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import Backbone, BackboneConfig, backbone_forward, reduce_features
from .hdca import HdcaConfig, HdcaStack, RegionProbabilityMap
from .layers import Module, cast_module, kaiming
from .tensor import Tensor, bilinear_resize, concat_channels, conv2d, cross_entropy

IGNORE_INDEX = 255


@dataclass
class ModelConfig:
    num_classes: int = 6
    ignore_index: int = IGNORE_INDEX
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    # None builds the no-context baseline: classifier directly on the reduced features
    hdca: HdcaConfig | None = field(default_factory=HdcaConfig)


class SegModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        bcfg = config.backbone
        self.backbone = Backbone(bcfg, rng, dtype)
        self.children["backbone"] = self.backbone
        self.hdca: HdcaStack | None = None
        if config.hdca is not None:
            self.hdca = HdcaStack(config.hdca, bcfg.out_channels, bcfg.reduced_channels, rng, dtype)
            self.children["hdca"] = self.hdca
        cls_in = self.classifier_in_channels
        self.classifier = Module()
        self.classifier.params["weight"] = kaiming(rng, (config.num_classes, cls_in, 1, 1), dtype)
        self.classifier.params["weight"].data *= np.sqrt(0.5)
        self.classifier.params["bias"] = Tensor(np.zeros(config.num_classes, dtype=dtype))
        self.children["classifier"] = self.classifier

    @property
    def classifier_in_channels(self) -> int:
        reduced = self.config.backbone.reduced_channels
        if self.hdca is None:
            return reduced
        extra = reduced if self.config.hdca.include_reduced else 0
        return self.hdca.out_channels + extra

    @property
    def dtype(self):
        return self.classifier.params["weight"].dtype

    def astype(self, dtype) -> "SegModel":
        cast_module(self, dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.named_parameters().items()}
        out.update(self.named_buffers())
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params, buffers = self.named_parameters(), self.named_buffers()
        shapes = {k: t.shape for k, t in params.items()}
        shapes.update({k: b.shape for k, b in buffers.items()})
        missing = sorted(set(shapes) - set(state))
        unexpected = sorted(set(state) - set(shapes))
        mismatched = [f"{k}: checkpoint {tuple(state[k].shape)} vs model {shapes[k]}"
                      for k in sorted(set(shapes) & set(state)) if tuple(state[k].shape) != shapes[k]]
        if missing or unexpected or mismatched:
            raise StateMismatchError(missing, unexpected, mismatched)
        for k, t in params.items():
            t.data = np.array(state[k], dtype=t.dtype)
        for k, b in buffers.items():
            b[...] = state[k]

    def forward(self, images: Tensor, training: bool = False) -> tuple[Tensor, list[RegionProbabilityMap]]:
        return model_forward(self, images, training)

    __call__ = forward


class StateMismatchError(ValueError):
    """Checkpoint tensors do not line up with the model's named tensors."""

    def __init__(self, missing, unexpected, mismatched):
        self.missing, self.unexpected, self.mismatched = missing, unexpected, mismatched
        lines = ["checkpoint does not match model:"]
        lines += [f"  missing in checkpoint: {k}" for k in missing]
        lines += [f"  not in model: {k}" for k in unexpected]
        lines += [f"  shape differs: {k}" for k in mismatched]
        super().__init__("\n".join(lines))


def model_forward(model: SegModel, images: Tensor, training: bool = False):
    """(B, 3, H, W) images -> ((B, K, H, W) logits, region maps at 1/8 scale)."""
    H, W = images.shape[-2:]
    if H % 8 or W % 8:
        raise ValueError(f"input height and width must be divisible by 8, got {H}x{W}")
    if images.dtype != model.dtype:
        images = Tensor(images.data.astype(model.dtype))
    x = backbone_forward(model.backbone, images, training)
    xr = reduce_features(model.backbone, x, training)
    maps: list[RegionProbabilityMap] = []
    if model.hdca is None:
        feats = xr
    else:
        feats, maps = model.hdca(x, xr, training)
        if model.config.hdca.include_reduced:
            feats = concat_channels([xr, feats])
    logits = conv2d(feats, model.classifier.params["weight"], model.classifier.params["bias"])
    return bilinear_resize(logits, H, W), maps


def cross_entropy_loss(logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    return cross_entropy(logits, labels, ignore_index)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-3, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-3, keepdims=True)


def _as_batch(image) -> tuple[Tensor, bool]:
    t = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float32))
    if t.ndim == 3:
        return Tensor(t.data[None]), True
    return t, False


def predict_proba(model: SegModel, image) -> np.ndarray:
    batch, single = _as_batch(image)
    logits, _ = model_forward(model, batch, training=False)
    probs = _softmax_np(logits.data)
    return probs[0] if single else probs


def predict_labels(model: SegModel, image) -> np.ndarray:
    """Argmax over classes; ties resolve to the lowest class index."""
    batch, single = _as_batch(image)
    logits, _ = model_forward(model, batch, training=False)
    labels = np.argmax(logits.data, axis=-3).astype(np.int64)
    return labels[0] if single else labels


def round_to_8(n: float) -> int:
    return max(8, int(round(n / 8.0)) * 8)


def tta_probabilities(model: SegModel, image, scales=(1.0,), flip: bool = False) -> np.ndarray:
    """Average class probabilities over rescaled (and optionally mirrored) copies."""
    scales = list(scales)
    if not scales:
        raise ValueError("tta needs at least one scale")
    batch, single = _as_batch(image)
    H, W = batch.shape[-2:]
    acc = None
    count = 0
    for s in scales:
        h2, w2 = round_to_8(H * s), round_to_8(W * s)
        resized = bilinear_resize(batch, h2, w2)
        variants = [(resized, False)]
        if flip:
            variants.append((Tensor(np.ascontiguousarray(resized.data[..., ::-1])), True))
        for inp, flipped in variants:
            logits, _ = model_forward(model, inp, training=False)
            probs = _softmax_np(logits.data)
            if flipped:
                probs = np.ascontiguousarray(probs[..., ::-1])
            probs = bilinear_resize(Tensor(probs), H, W).data
            acc = probs if acc is None else acc + probs
            count += 1
    acc = acc / count
    return acc[0] if single else acc


def tta_predict(model: SegModel, image, scales=(1.0,), flip: bool = False) -> np.ndarray:
    return np.argmax(tta_probabilities(model, image, scales, flip), axis=-3).astype(np.int64)
