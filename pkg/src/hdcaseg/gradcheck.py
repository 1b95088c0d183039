"""Float64 finite-difference audit of every differentiable kernel and of a full HDCA stack.

Kernels are looked up on the ``tensor`` module at call time, so a test can
swap one out and watch the suite flag it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import hdca as H
from . import tensor as T

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    op: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def check(fn: Callable[..., T.Tensor], inputs: list[T.Tensor], eps: float = 1e-5,
          seed: int = 0) -> float:
    """Worst relative error between autodiff and central differences over all ``inputs``.

    The output is contracted with a fixed random tensor so that no gradient
    direction cancels by symmetry.
    """
    rng = np.random.default_rng(seed)
    probe = fn(*inputs)
    weights = T.Tensor(rng.standard_normal(probe.shape))

    def scalar(*args):
        return T.reduce_sum(T.mul(fn(*args), weights))

    for t in inputs:
        t.requires_grad = True
    with T.ComputationRecord() as rec:
        loss = scalar(*inputs)
    analytic = T.grad_of(loss, rec, inputs)
    worst = 0.0
    for t, g in zip(inputs, analytic):
        numeric = T.finite_difference_grad(lambda _x: scalar(*inputs), t, eps)
        worst = max(worst, T.relative_error(g, numeric))
    return worst


def _r(rng, *shape, low=None):
    a = rng.standard_normal(shape)
    if low is not None:
        a = rng.uniform(low, low + 1.0, shape)
    return T.Tensor(a.astype(np.float64))


def _kernel_cases(rng) -> list[tuple[str, Callable, list[T.Tensor]]]:
    running = (np.zeros(3), np.ones(3))
    rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    labels = rng.integers(0, 4, (2, 3, 3))
    labels[0, 0, 0] = 255
    return [
        ("matmul", lambda a, b: T.matmul(a, b), [_r(rng, 3, 4), _r(rng, 4, 5)]),
        ("matmul_batched", lambda a, b: T.matmul(a, b), [_r(rng, 2, 3, 4), _r(rng, 2, 4, 5)]),
        ("linear", lambda x, w, b: T.linear(x, w, b), [_r(rng, 2, 3, 5), _r(rng, 4, 5), _r(rng, 4)]),
        ("conv2d_3x3_dilated", lambda x, w, b: T.conv2d(x, w, b, dilation=2),
         [_r(rng, 2, 5, 5), _r(rng, 3, 2, 3, 3), _r(rng, 3)]),
        ("conv2d_3x3_stride2", lambda x, w: T.conv2d(x, w, stride=2),
         [_r(rng, 2, 2, 6, 6), _r(rng, 3, 2, 3, 3)]),
        ("conv2d_1x1", lambda x, w, b: T.conv2d(x, w, b), [_r(rng, 2, 3, 4, 4), _r(rng, 2, 3, 1, 1), _r(rng, 2)]),
        ("softmax_channels", lambda x: T.softmax_channels(x), [_r(rng, 4, 3, 3)]),
        ("bilinear_resize_up", lambda x: T.bilinear_resize(x, 5, 6), [_r(rng, 2, 3, 3)]),
        ("bilinear_resize_down", lambda x: T.bilinear_resize(x, 3, 2), [_r(rng, 2, 6, 5)]),
        ("concat_channels", lambda a, b: T.concat_channels([a, b]), [_r(rng, 2, 3, 3), _r(rng, 3, 3, 3)]),
        ("batch_norm_train", lambda x, g, b: T.batch_norm(x, g, b, *[r.copy() for r in running], True),
         [_r(rng, 2, 3, 4, 4), _r(rng, 3), _r(rng, 3)]),
        ("batch_norm_eval", lambda x, g, b: T.batch_norm(x, g, b, rm, rv, False),
         [_r(rng, 2, 3, 4, 4), _r(rng, 3), _r(rng, 3)]),
        ("relu", lambda x: T.relu(x), [_r(rng, 3, 4, 4)]),
        ("add", lambda a, b: T.add(a, b), [_r(rng, 3, 4), _r(rng, 4)]),
        ("scale", lambda x: T.scale(x, -1.7), [_r(rng, 3, 4)]),
        ("mul", lambda a, b: T.mul(a, b), [_r(rng, 3, 4), _r(rng, 3, 4)]),
        ("reduce_sum", lambda x: T.reduce_sum(x, (0, 2)), [_r(rng, 3, 4, 2)]),
        ("divide_rows", lambda v, d: T.divide_rows(v, d), [_r(rng, 2, 3, 4), _r(rng, 2, 3, low=0.5)]),
        ("reshape_swapaxes", lambda x: T.swapaxes(T.reshape(x, (4, 6)), 0, 1), [_r(rng, 2, 3, 4)]),
        ("slice", lambda x: x[1:, :2], [_r(rng, 3, 4)]),
        ("flip_w", lambda x: T.flip_w(x), [_r(rng, 2, 3, 4)]),
        ("cross_entropy", lambda z: T.cross_entropy(z, labels), [_r(rng, 2, 4, 3, 3)]),
    ]


def _stack_case(rng):
    cfg = H.HdcaConfig(region_schedule=(2, 3), context_channels=4)
    stack = H.HdcaStack(cfg, feat_channels=8, reduced_channels=4, rng=rng, dtype=np.float64)
    params = list(stack.named_parameters().values())
    x, xr = _r(rng, 8, 6, 6), _r(rng, 4, 6, 6)
    n_params = len(params)

    def fn(*args):
        y, _ = H.forward_stack(args[n_params], args[n_params + 1], cfg, stack.levels, training=True)
        return y

    # the stack reads its parameters from the level objects; keep args and params the same objects
    return "hdca_forward_stack", fn, params + [x, xr]


def run_suite(eps: float = 1e-5, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    cases = _kernel_cases(rng) + [_stack_case(rng)]
    results = []
    for name, fn, inputs in cases:
        t0 = time.perf_counter()
        err = check(fn, inputs, eps, seed)
        results.append(CheckResult(name, err, time.perf_counter() - t0))
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = [f"{'op':<24} {'max rel err':>12}  status"]
    for r in results:
        lines.append(f"{r.op:<24} {r.max_rel_error:12.3e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
