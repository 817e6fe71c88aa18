"""Finite-difference checks over every primitive and the main composites.

Each check builds a random instance from a seeded generator and contracts
the output with a random tensor ``R`` so that the scalar under test has
gradients of order one.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import SE2
from .gradcheck import finite_difference_check, parameter_check
from .mvmi import project, score_global, score_local
from .network import NetworkConfig, init_params
from .pipeline import forward_intermediate
from .scene import GridConfig, LabelGrid, Scene, SceneData
from .warp import bilinear_warp

TIGHT = 1e-6
LOOSE = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    seed: int
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance


def _contract(out, rng):
    r = rng.standard_normal(out.shape)
    return lambda y: (y * r).sum()


def _unary(op, positive=False):
    def check(rng):
        x = rng.standard_normal((3, 4))
        if positive:
            x = np.abs(x) + 0.5
        f = _contract(op(T.tensor(x)), rng)
        return finite_difference_check(lambda t: f(op(t)), T.tensor(x))
    return check


def _binary(op, positive_b=False):
    def check(rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((3, 4) if rng.uniform() < 0.5 else (4,))
        if positive_b:
            b = np.abs(b) + 0.5
        f = _contract(op(T.tensor(a), T.tensor(b)), rng)
        ea = finite_difference_check(lambda t: f(op(t, T.tensor(b))), T.tensor(a))
        eb = finite_difference_check(lambda t: f(op(T.tensor(a), t)), T.tensor(b))
        return max(ea, eb)
    return check


def _conv(stride, padding, k=3):
    def check(rng):
        x = rng.standard_normal((8, 8, 2))
        w = rng.standard_normal((k, k, 2, 3))
        b = rng.standard_normal(3)
        op = lambda x_, w_, b_: T.conv2d(x_, w_, b_, stride=stride, padding=padding)  # noqa: E731
        f = _contract(op(T.tensor(x), T.tensor(w), T.tensor(b)), rng)
        return max(
            finite_difference_check(lambda t: f(op(t, T.tensor(w), T.tensor(b))), T.tensor(x)),
            finite_difference_check(lambda t: f(op(T.tensor(x), t, T.tensor(b))), T.tensor(w)),
            finite_difference_check(lambda t: f(op(T.tensor(x), T.tensor(w), t)), T.tensor(b)),
        )
    return check


def _linear(rng):
    x, w, b = rng.standard_normal(16), rng.standard_normal((16, 8)), rng.standard_normal(8)
    f = _contract(T.linear(T.tensor(x), T.tensor(w), T.tensor(b)), rng)
    h = 1e-3  # affine in each argument: no truncation error, less rounding than 1e-6
    return max(
        finite_difference_check(lambda t: f(T.linear(t, T.tensor(w), T.tensor(b))), T.tensor(x), h),
        finite_difference_check(lambda t: f(T.linear(T.tensor(x), t, T.tensor(b))), T.tensor(w), h),
        finite_difference_check(lambda t: f(T.linear(T.tensor(x), T.tensor(w), t)), T.tensor(b), h),
    )


def _matmul(rng):
    a, b = rng.standard_normal((2, 3, 5)), rng.standard_normal((5, 4))
    f = _contract(T.matmul(T.tensor(a), T.tensor(b)), rng)
    return max(
        finite_difference_check(lambda t: f(T.matmul(t, T.tensor(b))), T.tensor(a)),
        finite_difference_check(lambda t: f(T.matmul(T.tensor(a), t)), T.tensor(b)),
    )


def _shape_op(op, shape=(4, 5, 3)):
    def check(rng):
        x = rng.standard_normal(shape)
        f = _contract(op(T.tensor(x)), rng)
        return finite_difference_check(lambda t: f(op(t)), T.tensor(x))
    return check


def _concat(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 4))
    f = _contract(T.concat([T.tensor(a), T.tensor(b)], axis=1), rng)
    return max(
        finite_difference_check(lambda t: f(T.concat([t, T.tensor(b)], axis=1)), T.tensor(a)),
        finite_difference_check(lambda t: f(T.concat([T.tensor(a), t], axis=1)), T.tensor(b)),
    )


def _stack(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    f = _contract(T.stack([T.tensor(a), T.tensor(b)]), rng)
    return max(
        finite_difference_check(lambda t: f(T.stack([t, T.tensor(b)])), T.tensor(a)),
        finite_difference_check(lambda t: f(T.stack([T.tensor(a), t])), T.tensor(b)),
    )


def _warp(rng):
    x = rng.standard_normal((6, 6, 2))
    tf = SE2(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-0.6, 0.6))
    f = _contract(bilinear_warp(T.tensor(x), tf), rng)
    return finite_difference_check(lambda t: f(bilinear_warp(t, tf)), T.tensor(x))


def _segments(op):
    def check(rng):
        x = rng.standard_normal((6, 2, 2, 1))
        sizes = [1, 3, 2]
        f = _contract(op(T.tensor(x), sizes), rng)
        return finite_difference_check(lambda t: f(op(t, sizes)), T.tensor(x))
    return check


# -- composites --------------------------------------------------------------------------------
SMALL_GRID = GridConfig(size=8)


def _toy_scene(rng, n_agents=3) -> SceneData:
    agents = tuple(SE2(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-0.5, 0.5)) for _ in range(n_agents))
    scene = Scene(0, 16.0, np.zeros((0, 5)), agents, 0)
    bev = (rng.uniform(size=(n_agents, 8, 8, 4)) < 0.3).astype(np.float64)
    empty = LabelGrid(np.zeros((8, 8)), np.zeros((8, 8, 4)), np.zeros((0, 4)), ())
    return SceneData(scene, bev, (empty,) * n_agents, (frozenset(),) * n_agents, (np.zeros((0, 3)),) * n_agents)


SOFTMAX_INVARIANT = ("col.conv1.w", "col.conv2.b")


def _pipeline(rng):
    params = init_params(NetworkConfig(), SMALL_GRID, rng, with_discriminators=False)
    data = _toy_scene(rng)
    fwd = forward_intermediate([data], params, SMALL_GRID.resolution * 2)
    r1, r2 = rng.standard_normal(fwd.cls_logits.shape), rng.standard_normal(fwd.reg.shape)

    def loss(p):
        out = forward_intermediate([data], p, SMALL_GRID.resolution * 2)
        return (out.cls_logits * r1).sum() + (out.reg * r2).sum()

    tensors = dict(params.tensors)
    errs = [parameter_check(loss, tensors, name, n_coords=4, rng=rng) for name in sorted(tensors) if name not in SOFTMAX_INVARIANT]
    # rows of col.conv1.w that see the ego view shift every sender's logit alike
    # wherever the relu is open, so their gradients sit below the difference noise
    w = tensors["col.conv1.w"]
    cin, cout = w.shape[2] // 2, w.shape[3]
    coords = rng.choice(cin * cout, size=4, replace=False)

    def sender_rows(t):
        return loss({**tensors, "col.conv1.w": t})

    errs.append(finite_difference_check(sender_rows, w, indices=coords))
    (g_bias,) = T.backward(loss(params), [params["col.conv2.b"]])
    if np.abs(g_bias).max() > 1e-12:  # the bias cancels in the softmax
        return math.inf
    return max(errs)


def _disc_setup(rng, k=3):
    params = init_params(NetworkConfig(), SMALL_GRID, rng)
    ind = rng.standard_normal((k, 4, 4, 32))
    collab = rng.standard_normal((k, 4, 4, 32))
    return params, ind, collab


def _score_global(rng):
    params, ind, collab = _disc_setup(rng)
    r = rng.standard_normal(ind.shape[0])

    def run(p, i, c):
        return (score_global(i, project(c, p), p) * r).sum()

    tensors = dict(params.tensors)
    errs = [
        finite_difference_check(lambda t: run(params, t, T.tensor(collab)), T.tensor(ind), indices=rng.choice(ind.size, 24, replace=False)),
        finite_difference_check(lambda t: run(params, T.tensor(ind), t), T.tensor(collab), indices=rng.choice(collab.size, 24, replace=False)),
    ]
    for name in ("disc.proj.w", "disc.g1.w", "disc.g2.w", "disc.g3.w", "disc.g3.b"):
        errs.append(parameter_check(lambda p: run(p, T.tensor(ind), T.tensor(collab)), tensors, name, n_coords=8, rng=rng))
    return max(errs)


def _score_local(rng):
    params, ind, collab = _disc_setup(rng)
    r = rng.standard_normal(ind.shape[:3])

    def run(p, i, c):
        return (score_local(i, project(c, p), p) * r).sum()

    tensors = dict(params.tensors)
    errs = [
        finite_difference_check(lambda t: run(params, t, T.tensor(collab)), T.tensor(ind), indices=rng.choice(ind.size, 24, replace=False)),
        finite_difference_check(lambda t: run(params, T.tensor(ind), t), T.tensor(collab), indices=rng.choice(collab.size, 24, replace=False)),
    ]
    for name in ("disc.proj.w", "disc.l1.w", "disc.l1.b", "disc.l2.w", "disc.l2.b"):
        errs.append(parameter_check(lambda p: run(p, T.tensor(ind), T.tensor(collab)), tensors, name, n_coords=8, rng=rng))
    return max(errs)


CHECKS = {
    "add": (_binary(T.add), LOOSE),
    "mul": (_binary(T.mul), LOOSE),
    "sub": (_binary(lambda a, b: a - b), LOOSE),
    "div": (_binary(lambda a, b: a / b, positive_b=True), LOOSE),
    "exp": (_unary(T.exp), LOOSE),
    "log": (_unary(T.log, positive=True), LOOSE),
    "relu": (_unary(T.relu), TIGHT),
    "sigmoid": (_unary(T.sigmoid), TIGHT),
    "softplus": (_unary(T.softplus), TIGHT),
    "smooth_l1": (_unary(T.smooth_l1), LOOSE),
    "linear": (_linear, TIGHT),
    "matmul": (_matmul, LOOSE),
    "sum": (_shape_op(lambda t: T.reduce_sum(t, axis=1)), LOOSE),
    "reshape": (_shape_op(lambda t: T.reshape(t, (5, 12))), LOOSE),
    "getitem": (_shape_op(lambda t: t[1:, ::2]), LOOSE),
    "take": (_shape_op(lambda t: T.take(t, [2, 0, 2], axis=1)), LOOSE),
    "concat": (_concat, LOOSE),
    "stack": (_stack, LOOSE),
    "conv2d_same": (_conv(1, "same"), LOOSE),
    "conv2d_stride2": (_conv(2, "same"), LOOSE),
    "conv2d_valid": (_conv(1, "valid"), LOOSE),
    "conv2d_1x1": (_conv(1, "same", k=1), LOOSE),
    "upsample": (_shape_op(lambda t: T.upsample_nearest(t, 2)), LOOSE),
    "bilinear_warp": (_warp, LOOSE),
    "softmax": (_shape_op(lambda t: T.softmax(t, axis=0)), LOOSE),
    "segment_sum": (_segments(T.segment_sum), LOOSE),
    "segment_softmax": (_segments(T.segment_softmax), LOOSE),
    "encode_warp_fuse_decode": (_pipeline, LOOSE),
    "score_global": (_score_global, LOOSE),
    "score_local": (_score_local, LOOSE),
}


def run_gradient_suite(seeds=range(10), names=None) -> list:
    results = []
    for name in names or CHECKS:
        check, tol = CHECKS[name]
        for seed in seeds:
            results.append(CheckResult(name, seed, check(np.random.default_rng([seed, len(name)])), tol))
    return results


def suite_table(results) -> str:
    lines = [f"{'check':<26}{'worst error':>14}{'tolerance':>12}  status"]
    for name in dict.fromkeys(r.name for r in results):
        rs = [r for r in results if r.name == name]
        worst = max(r.error for r in rs)
        ok = all(r.passed for r in rs)
        lines.append(f"{name:<26}{worst:>14.3e}{rs[0].tolerance:>12.0e}  {'pass' if ok else 'FAIL'}")
    return "\n".join(lines)


def timed_suite(seeds=range(10)):
    start = time.perf_counter()
    results = run_gradient_suite(seeds)
    return results, time.perf_counter() - start
