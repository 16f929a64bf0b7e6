"""Central finite-difference checks for every registered op.

Each op is run once on a tape with float64 leaves, its recorded backward is
fed a random upstream gradient R, and the result is compared with central
differences of sum(op(x) * R).  Inputs to relu and maxpool are drawn away
from kinks and ties so the finite differences are well defined.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .ops import REGISTRY
from .tensor import Tape, Tensor

STEP = 1e-5
TOLERANCE = 1e-4
CASES_PER_OP = 20
MAX_SHAPE = (4, 4, 6, 6)


def _away_from_zero(rng, shape, margin=0.05):
    v = rng.uniform(margin, 1.0, shape)
    return v * rng.choice([-1.0, 1.0], shape)


def _distinct(rng, shape, gap=0.01):
    """Values whose pairwise gaps are at least ``gap`` (no ties within a pool window)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap - n * gap / 2).reshape(shape) + rng.uniform(0, gap / 10)


def _nchw(rng, max_c=4, min_hw=1, even=False):
    b = int(rng.integers(1, 5))
    c = int(rng.integers(1, max_c + 1))
    if even:
        h, w = (2 * int(rng.integers(1, 4)) for _ in range(2))
    else:
        h, w = (int(rng.integers(min_hw, 7)) for _ in range(2))
    return b, c, h, w


def _case_conv2d(rng, i):
    stride = (1, 2)[i % 2]
    padding = (0, 1, 2)[(i // 2) % 3]
    k = int(rng.integers(1, 4))
    b, c, h, w = _nchw(rng, min_hw=max(1, k - 2 * padding))
    o = int(rng.integers(1, 5))
    with_bias = i % 4 != 3
    arrays = [rng.standard_normal((b, c, h, w)), rng.standard_normal((o, c, k, k))]
    if with_bias:
        arrays.append(rng.standard_normal(o))
        return arrays, lambda x, wt, bias: REGISTRY["conv2d"](x, wt, bias, stride=stride, padding=padding)
    return arrays, lambda x, wt: REGISTRY["conv2d"](x, wt, None, stride=stride, padding=padding)


def _case_batchnorm2d(rng, i):
    b, c, h, w = _nchw(rng)
    if b * h * w < 2:
        b = 2
    x = rng.standard_normal((b, c, h, w)) * rng.uniform(0.5, 2) + rng.uniform(-1, 1)
    gamma = rng.uniform(0.5, 1.5, c)
    beta = rng.standard_normal(c)
    training = i % 4 != 3
    rm, rv = rng.standard_normal(c), rng.uniform(0.5, 2, c)

    def fn(x, g, bt):
        return REGISTRY["batchnorm2d"](x, g, bt, rm.copy(), rv.copy(), training=training)

    return [x, gamma, beta], fn


def _case_relu(rng, i):
    return [_away_from_zero(rng, _nchw(rng))], REGISTRY["relu"]


def _case_maxpool2x2(rng, i):
    return [_distinct(rng, _nchw(rng, even=True))], REGISTRY["maxpool2x2"]


def _case_upsample_nearest2x(rng, i):
    b, c, h, w = _nchw(rng)
    return [rng.standard_normal((b, c, min(h, 3), min(w, 3)))], REGISTRY["upsample_nearest2x"]


def _case_add(rng, i):
    s = _nchw(rng)
    return [rng.standard_normal(s), rng.standard_normal(s)], REGISTRY["add"]


def _case_mul(rng, i):
    s = _nchw(rng)
    return [rng.standard_normal(s), rng.standard_normal(s)], REGISTRY["mul"]


def _case_scale(rng, i):
    factor = float(rng.uniform(-2, 2))
    return [rng.standard_normal(_nchw(rng))], lambda x: REGISTRY["scale"](x, factor)


def _case_concat_channels(rng, i):
    b, _, h, w = _nchw(rng)
    k = 2 + i % 2
    return [rng.standard_normal((b, int(rng.integers(1, 3)), h, w)) for _ in range(k)], REGISTRY["concat_channels"]


def _case_reshape(rng, i):
    b, c, h, w = _nchw(rng)
    target = [(b, c * h * w), (b * c, h, w), (b, c, h * w, 1)][i % 3]
    return [rng.standard_normal((b, c, h, w))], lambda x: REGISTRY["reshape"](x, target)


def _case_sum_all(rng, i):
    return [rng.standard_normal(_nchw(rng))], REGISTRY["sum_all"]


def _case_mse_loss(rng, i):
    s = _nchw(rng)
    return [rng.standard_normal(s), rng.standard_normal(s)], REGISTRY["mse_loss"]


CASES: dict[str, Callable] = {
    "conv2d": _case_conv2d,
    "batchnorm2d": _case_batchnorm2d,
    "relu": _case_relu,
    "maxpool2x2": _case_maxpool2x2,
    "upsample_nearest2x": _case_upsample_nearest2x,
    "add": _case_add,
    "mul": _case_mul,
    "scale": _case_scale,
    "concat_channels": _case_concat_channels,
    "reshape": _case_reshape,
    "sum_all": _case_sum_all,
    "mse_loss": _case_mse_loss,
}


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(max |a|, max |n|), guarded against all-zero gradients."""
    denom = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / denom)


def check_case(fn: Callable, arrays: list[np.ndarray], rng: np.random.Generator, h: float = STEP) -> float:
    """Worst relative error over all inputs of one op application."""
    leaves = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
    if len(tape) != 1:
        raise RuntimeError(f"expected exactly one recorded node, got {len(tape)}")
    r = rng.standard_normal(out.shape)
    analytic = tape.nodes[0].backward(r)

    def objective() -> float:
        return float(np.sum(fn(*[Tensor(l.data) for l in leaves]).data * r))

    worst = 0.0
    for leaf, a in zip(leaves, analytic):
        numeric = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = objective()
            flat[j] = orig - h
            down = objective()
            flat[j] = orig
            numeric.reshape(-1)[j] = (up - down) / (2 * h)
        a = np.zeros_like(numeric) if a is None else np.asarray(a, dtype=np.float64)
        worst = max(worst, relative_error(a, numeric))
    return worst


@dataclass
class OpReport:
    op: str
    cases: int
    max_error: float
    passed: bool
    shapes: list[tuple[tuple[int, ...], ...]] = field(default_factory=list)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.op:<20s} cases={self.cases:3d}  max_rel_err={self.max_error:.2e}"


@dataclass
class GradcheckReport:
    ops: list[OpReport]
    seconds: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.ops)

    def lines(self) -> list[str]:
        out = [r.line() for r in self.ops]
        n_fail = sum(not r.passed for r in self.ops)
        out.append(f"{len(self.ops)} ops, {n_fail} failed, {self.seconds:.1f}s")
        return out


def run_gradcheck(seed: int = 0, cases_per_op: int = CASES_PER_OP, tolerance: float = TOLERANCE,
                  ops: list[str] | None = None) -> GradcheckReport:
    names = list(REGISTRY) if ops is None else list(ops)
    missing = [n for n in names if n not in CASES]
    if missing:
        raise KeyError(f"no gradient-check cases for registered op(s) {missing}")
    t0 = time.perf_counter()
    reports = []
    for k, name in enumerate(names):
        rng = np.random.default_rng([seed, k])
        worst, shapes = 0.0, []
        for i in range(cases_per_op):
            arrays, fn = CASES[name](rng, i)
            shapes.append(tuple(a.shape for a in arrays))
            worst = max(worst, check_case(fn, arrays, rng))
        reports.append(OpReport(name, cases_per_op, worst, worst < tolerance, shapes))
    return GradcheckReport(reports, time.perf_counter() - t0)
