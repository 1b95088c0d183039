"""Hierarchical dynamic context aggregation.

Each level infers a soft partition of the feature map into ``s_n`` regions,
pools backbone features inside every region, averages them by region mass,
reduces their width and broadcasts them back to the pixels.  Levels run
coarse to fine; level ``n`` sees the output of level ``n - 1`` when deciding
its regions.  All functions accept unbatched ``(C, h, w)`` or batched
``(B, C, h, w)`` maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .layers import BatchNorm, Module, kaiming
from .tensor import (
    Tensor,
    ShapeError,
    concat_channels,
    conv2d,
    divide_rows,
    linear,
    matmul,
    reduce_sum,
    relu,
    reshape,
    softmax_channels,
    swapaxes,
)


@dataclass
class HdcaConfig:
    region_schedule: tuple[int, ...] = (2, 4, 8, 16)
    context_channels: int = 16
    hidden_channels: int | None = None
    eps_region: float = 1e-6
    include_reduced: bool = False

    def __post_init__(self):
        self.region_schedule = tuple(int(s) for s in self.region_schedule)
        validate_schedule(self.region_schedule)
        if self.context_channels < 1:
            raise ValueError("context_channels must be positive")


def validate_schedule(schedule: Sequence[int]) -> None:
    if len(schedule) == 0:
        raise ValueError("region schedule must not be empty")
    if any(s < 2 for s in schedule):
        raise ValueError(f"every region count must be >= 2, got {list(schedule)}")
    if any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError(f"region schedule must be strictly increasing, got {list(schedule)}")


@dataclass
class ContextVectors:
    raw: Tensor          # (.., s_n, C)
    normalized: Tensor   # (.., s_n, C)
    reduced: Tensor      # (.., s_n, C_n)
    region_mass: Tensor  # (.., s_n)
    features: Tensor | None = field(default=None, repr=False)  # the pooled X


@dataclass
class RegionProbabilityMap:
    values: Tensor       # (.., s_n, h, w)
    level: int
    contexts: ContextVectors | None = field(default=None, repr=False)

    @property
    def regions(self) -> int:
        return self.values.shape[-3]


class HdcaLevel(Module):
    """Parameters of one hierarchy level."""

    def __init__(self, rng, level: int, regions: int, feat_channels: int, reduced_channels: int,
                 prev_channels: int, context_channels: int, hidden_channels: int, dtype=np.float32):
        super().__init__()
        self.level = level
        self.regions = regions
        in_ch = reduced_channels + prev_channels
        self.params["conv3.weight"] = kaiming(rng, (hidden_channels, in_ch, 3, 3), dtype)
        self.norm = BatchNorm(hidden_channels, dtype)
        self.children["norm"] = self.norm
        self.params["regions.weight"] = kaiming(rng, (regions, hidden_channels, 1, 1), dtype)
        self.params["regions.bias"] = Tensor(np.zeros(regions, dtype=dtype))
        self.params["reduce.weight"] = Tensor(
            (rng.standard_normal((context_channels, feat_channels)) / np.sqrt(feat_channels)).astype(dtype))
        self.params["reduce.bias"] = Tensor(np.zeros(context_channels, dtype=dtype))

    @property
    def in_channels(self) -> int:
        return self.params["conv3.weight"].shape[1]


def infer_regions(x_reduced: Tensor, prev_context: Tensor | None, level: HdcaLevel,
                  training: bool = False) -> RegionProbabilityMap:
    if level.level == 1 and prev_context is not None:
        raise ValueError("level 1 takes no previous context")
    if level.level > 1 and prev_context is None:
        raise ValueError(f"level {level.level} needs the previous level's context")
    if prev_context is not None:
        if prev_context.shape[-2:] != x_reduced.shape[-2:]:
            raise ShapeError(f"infer_regions: spatial mismatch {x_reduced.shape} vs {prev_context.shape}")
        inp = concat_channels([x_reduced, prev_context])
    else:
        inp = x_reduced
    h = conv2d(inp, level.params["conv3.weight"], padding=1)
    h = relu(level.norm(h, training))
    logits = conv2d(h, level.params["regions.weight"], level.params["regions.bias"])
    return RegionProbabilityMap(softmax_channels(logits), level.level)


def _flat(t: Tensor) -> Tensor:
    return reshape(t, t.shape[:-2] + (t.shape[-2] * t.shape[-1],))


def aggregate_contexts(p: RegionProbabilityMap | Tensor, x: Tensor) -> Tensor:
    """Probability-weighted feature sums per region, shape (.., s_n, C)."""
    pv = p.values if isinstance(p, RegionProbabilityMap) else p
    if pv.shape[-2:] != x.shape[-2:] or pv.shape[:-3] != x.shape[:-3]:
        raise ShapeError(f"aggregate_contexts: region map {pv.shape} vs features {x.shape}")
    return matmul(_flat(pv), swapaxes(_flat(x), -1, -2))


def normalize_contexts(v: Tensor, p: RegionProbabilityMap | Tensor,
                       eps: float = 1e-6) -> tuple[Tensor, Tensor]:
    """Divide every region's sum by its mass; returns (averages, mass)."""
    pv = p.values if isinstance(p, RegionProbabilityMap) else p
    mass = reduce_sum(_flat(pv), -1)
    return divide_rows(v, mass, eps), mass


def reduce_contexts(vbar: Tensor, level: HdcaLevel | None = None, weight: Tensor | None = None,
                    bias: Tensor | None = None) -> Tensor:
    if level is not None:
        weight, bias = level.params["reduce.weight"], level.params["reduce.bias"]
    return linear(vbar, weight, bias)


def reproject(p: RegionProbabilityMap | Tensor, v: Tensor) -> Tensor:
    """Broadcast per-region vectors back to pixels: (.., C_n, h, w)."""
    pv = p.values if isinstance(p, RegionProbabilityMap) else p
    if pv.shape[-3] != v.shape[-2]:
        raise ShapeError(f"reproject: {pv.shape[-3]} regions vs context rows {v.shape}")
    h, w = pv.shape[-2:]
    out = matmul(swapaxes(v, -1, -2), _flat(pv))
    return reshape(out, out.shape[:-1] + (h, w))


def forward_level(x: Tensor, x_reduced: Tensor, prev: Tensor | None, level: HdcaLevel,
                  training: bool = False, eps: float = 1e-6,
                  regions: Tensor | None = None) -> tuple[Tensor, RegionProbabilityMap]:
    """One hierarchy level.  ``regions`` replaces the inferred map when given."""
    if regions is None:
        p = infer_regions(x_reduced, prev, level, training)
    else:
        p = RegionProbabilityMap(regions, level.level)
    v = aggregate_contexts(p, x)
    vbar, mass = normalize_contexts(v, p, eps)
    vred = reduce_contexts(vbar, level)
    p.contexts = ContextVectors(v, vbar, vred, mass, x)
    return reproject(p, vred), p


class HdcaStack(Module):
    def __init__(self, config: HdcaConfig, feat_channels: int, reduced_channels: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.config = config
        hidden = config.hidden_channels or reduced_channels
        self.levels: list[HdcaLevel] = []
        prev = 0
        for n, s in enumerate(config.region_schedule, start=1):
            lvl = HdcaLevel(rng, n, s, feat_channels, reduced_channels, prev,
                            config.context_channels, hidden, dtype)
            self.levels.append(lvl)
            self.children[f"level{n}"] = lvl
            prev = config.context_channels

    @property
    def out_channels(self) -> int:
        return len(self.levels) * self.config.context_channels

    def __call__(self, x: Tensor, x_reduced: Tensor, training: bool = False):
        return forward_stack(x, x_reduced, self.config, self.levels, training)


def forward_stack(x: Tensor, x_reduced: Tensor, config: HdcaConfig, levels: Sequence[HdcaLevel],
                  training: bool = False) -> tuple[Tensor, list[RegionProbabilityMap]]:
    """Run every level in order; returns the channel-concatenated pyramid and all region maps."""
    if not levels:
        raise ValueError("region schedule must not be empty")
    outs, maps = [], []
    prev = None
    for level in levels:
        prev, p = forward_level(x, x_reduced, prev, level, training, config.eps_region)
        outs.append(prev)
        maps.append(p)
    pyramid = outs[0] if len(outs) == 1 else concat_channels(outs)
    return pyramid, maps


def extract_region_maps(maps: Sequence[RegionProbabilityMap | Tensor | np.ndarray]) -> list[np.ndarray]:
    """Per-level argmax over regions (ties go to the lowest index)."""
    out = []
    for m in maps:
        arr = m.values.data if isinstance(m, RegionProbabilityMap) else getattr(m, "data", m)
        out.append(np.argmax(np.asarray(arr), axis=-3).astype(np.int64))
    return out


def check_level_invariants(p: RegionProbabilityMap, x: Tensor | None = None, stoch_tol: float = 1e-6,
                           cons_tol: float = 1e-4) -> None:
    """Raise AssertionError if ``p`` is not row-stochastic or pooling leaked mass."""
    pv = p.values.data.astype(np.float64)
    sums = pv.sum(axis=-3)
    if pv.min() < 0 or pv.max() > 1 or np.abs(sums - 1).max() > stoch_tol:
        raise AssertionError(f"level {p.level}: region map not row-stochastic "
                             f"(max |sum-1| = {np.abs(sums - 1).max():.3g})")
    if p.contexts is None:
        return
    x = x if x is not None else p.contexts.features
    v = p.contexts.raw.data.astype(np.float64)
    total = x.data.astype(np.float64).sum(axis=(-2, -1))
    err = np.abs(v.sum(axis=-2) - total)
    if err.max() > cons_tol:
        raise AssertionError(f"level {p.level}: context conservation violated by {err.max():.3g}")
