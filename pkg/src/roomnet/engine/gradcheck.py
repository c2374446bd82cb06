"""Central finite-difference checks for every registered op and a tiny RoomNet.

Relative error of a gradient tensor is ``max|analytic - numeric|`` over the
probed entries divided by the largest gradient magnitude seen for that
tensor (floored at ``ABS_FLOOR`` so exactly-zero gradients, such as a conv
bias feeding batch norm, compare on an absolute scale).

ReLU masks and pooling argmaxes are piecewise decisions; with max-unpooling
downstream an argmax switch is a jump, not just a kink.  By default the
probes replay the decisions of the unperturbed pass, so the finite
difference is taken on the same smooth branch that backward differentiates.
With ``freeze_decisions=False`` probes that change a decision are skipped
and resampled instead.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from roomnet.engine import ops
from roomnet.engine.tensor import DecisionRecorder, Tape, Tensor, backward

STEP = 1e-3
TOLERANCE = 1e-4
ABS_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    probes: int
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error <= TOLERANCE)


def _evaluate(fn: Callable[[], Tensor], replay: Optional[list] = None) -> tuple[float, list]:
    with DecisionRecorder(replay) as log:
        value = float(fn().data)
    return value, log


def _same(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_gradients(name: str, fn: Callable[[], Tensor], tensors: list[Tensor], step: float = STEP,
                    max_probes: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                    max_attempts: int = 4, freeze_decisions: bool = True) -> GradCheckResult:
    """Compare backward() against central differences of ``fn`` w.r.t. each tensor in ``tensors``.

    ``fn`` must rebuild the computation from the current ``.data`` of the
    tensors on every call.  With ``max_probes`` only that many random
    entries per tensor are probed.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = fn()
    backward(tape, loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    _, base_log = _evaluate(fn)
    replay = base_log if freeze_decisions else None

    worst, probes, skipped = 0.0, 0, 0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        if max_probes is None or flat.size <= max_probes:
            order = list(range(flat.size))
        else:
            order = list(rng.permutation(flat.size))
        budget = flat.size if max_probes is None else min(max_probes, flat.size)
        done = attempts = 0
        diffs, numerics = [], []
        for idx in order:
            if done >= budget or attempts >= budget * max_attempts:
                break
            attempts += 1
            orig = flat[idx]
            flat[idx] = orig + step
            fp, log_p = _evaluate(fn, replay)
            flat[idx] = orig - step
            fm, log_m = _evaluate(fn, replay)
            flat[idx] = orig
            if not (_same(log_p, base_log) and _same(log_m, base_log)):
                skipped += 1
                continue
            numeric = (fp - fm) / (2 * step)
            diffs.append(abs(float(a.reshape(-1)[idx]) - numeric))
            numerics.append(abs(numeric))
            done += 1
        if diffs:
            scale = max(float(np.abs(a).max()), max(numerics), ABS_FLOOR)
            worst = max(worst, max(diffs) / scale)
        probes += done
    return GradCheckResult(name, worst, probes, skipped)


# ---------------------------------------------------------------- op cases

def _t(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def _away_from_zero(rng, shape, margin=0.05):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(margin, 1.0, size=shape)


def _spaced(rng, shape, spacing=0.05):
    n = int(np.prod(shape))
    return (rng.permutation(n) * spacing - n * spacing / 2).reshape(shape)


def _projected(out: Tensor, proj: np.ndarray) -> Tensor:
    return ops.sum(ops.mul(out, Tensor(proj)))


def _case(name: str, rng: np.random.Generator):
    """(tensors to check, closure computing a scalar) for one registered op."""
    if name == "add":
        a, b = _t(rng.normal(size=(3, 4))), _t(rng.normal(size=(4,)))
        proj = rng.normal(size=(3, 4))
        return [a, b], lambda: _projected(ops.add(a, b), proj)
    if name == "sub":
        a, b = _t(rng.normal(size=(2, 3))), _t(rng.normal(size=(2, 3)))
        proj = rng.normal(size=(2, 3))
        return [a, b], lambda: _projected(ops.sub(a, b), proj)
    if name == "mul":
        a, b = _t(rng.normal(size=(3, 4))), _t(rng.normal(size=(1, 4)))
        proj = rng.normal(size=(3, 4))
        return [a, b], lambda: _projected(ops.mul(a, b), proj)
    if name == "sum":
        a = _t(rng.normal(size=(2, 3)))
        return [a], lambda: ops.mul(ops.sum(ops.mul(a, a)), 0.5)
    if name == "reshape":
        a = _t(rng.normal(size=(2, 6)))
        proj = rng.normal(size=(3, 4))
        return [a], lambda: _projected(ops.reshape(a, (3, 4)), proj)
    if name == "concat":
        a, b = _t(rng.normal(size=(2, 3, 2, 2))), _t(rng.normal(size=(2, 1, 2, 2)))
        proj = rng.normal(size=(2, 4, 2, 2))
        return [a, b], lambda: _projected(ops.concat([a, b], axis=1), proj)
    if name == "relu":
        a = _t(_away_from_zero(rng, (4, 5)))
        proj = rng.normal(size=(4, 5))
        return [a], lambda: _projected(ops.relu(a), proj)
    if name == "conv2d":
        x, w, b = _t(rng.normal(size=(2, 3, 7, 7))), _t(rng.normal(size=(4, 3, 3, 3))), _t(rng.normal(size=4))
        p1, p2 = rng.normal(size=(2, 4, 7, 7)), rng.normal(size=(2, 4, 4, 4))
        return [x, w, b], lambda: ops.add(_projected(ops.conv2d(x, w, b, 1, 1), p1),
                                          _projected(ops.conv2d(x, w, b, 2, 1), p2))
    if name == "max_pool2d":
        x = _t(_spaced(rng, (2, 3, 4, 4)))
        proj = rng.normal(size=(2, 3, 2, 2))
        return [x], lambda: _projected(ops.max_pool2d_indices(x, 2)[0], proj)
    if name == "max_unpool2d":
        _, idx = ops.max_pool2d_indices(Tensor(_spaced(rng, (2, 3, 4, 4))), 2)
        y = _t(rng.normal(size=(2, 3, 2, 2)))
        proj = rng.normal(size=(2, 3, 4, 4))
        return [y], lambda: _projected(ops.max_unpool2d(y, idx, (2, 3, 4, 4)), proj)
    if name == "upsample_nearest":
        x = _t(rng.normal(size=(1, 2, 2, 3)))
        proj = rng.normal(size=(1, 2, 4, 6))
        return [x], lambda: _projected(ops.upsample_nearest(x, 2), proj)
    if name == "batch_norm2d":
        x = _t(rng.normal(size=(3, 2, 3, 3)) * 2 + 1)
        g, b = _t(rng.uniform(0.5, 1.5, 2)), _t(rng.normal(size=2))
        rm, rv = rng.normal(size=2), rng.uniform(0.5, 2.0, 2)
        p1, p2 = rng.normal(size=x.shape), rng.normal(size=x.shape)
        return [x, g, b], lambda: ops.add(
            _projected(ops.batch_norm2d(x, g, b, np.zeros(2), np.ones(2), train=True), p1),
            _projected(ops.batch_norm2d(x, g, b, rm.copy(), rv.copy(), train=False), p2))
    if name == "dropout":
        x = _t(rng.normal(size=(4, 6)))
        proj = rng.normal(size=(4, 6))
        return [x], lambda: _projected(ops.dropout(x, 0.5, True, np.random.default_rng(7)), proj)
    if name == "fully_connected":
        x, w, b = _t(rng.normal(size=(3, 4))), _t(rng.normal(size=(4, 5))), _t(rng.normal(size=5))
        proj = rng.normal(size=(3, 5))
        return [x, w, b], lambda: _projected(ops.fully_connected(x, w, b), proj)
    if name == "softmax_cross_entropy":
        z = _t(rng.normal(size=(4, 11)))
        targets = rng.integers(0, 11, size=4)
        return [z], lambda: ops.softmax_cross_entropy(z, targets)
    if name == "weighted_sse":
        p = _t(rng.normal(size=(2, 3, 2, 2)))
        gt, w = rng.normal(size=p.shape), rng.choice([0.0, 0.2, 1.0], size=p.shape)
        return [p], lambda: ops.weighted_sse(p, gt, w)
    raise KeyError(f"no gradient-check case for op {name!r}")


def check_op(name: str, seed: int = 0) -> GradCheckResult:
    tensors, fn = _case(name, np.random.default_rng(seed))
    return check_gradients(name, fn, tensors)


# ---------------------------------------------------------------- end to end

TINY_SIZES = {
    "tiny": dict(input_size=32, widths=(4, 8, 8, 16, 16), side_hidden=(16, 16)),
    "small": dict(input_size=64, widths=(4, 8, 16, 16, 16), side_hidden=(16, 16)),
}


def check_model(size: str = "tiny", variant: str = "mred", iterations: int = 2, seed: int = 0,
                max_probes: int = 6) -> GradCheckResult:
    """Deep-supervised joint loss of a float64 model on two noise images.

    Targets come from synthetic layouts; the images are Gaussian noise,
    which keeps pooling windows far from ties.
    """
    from roomnet.data import generate_synthetic_scene
    from roomnet.heatmaps import heatmap_targets
    from roomnet.model import ModelConfig, build_model, forward, joint_loss

    cfg = ModelConfig(variant=variant, iterations=iterations if variant not in ("vanilla", "stacked", "stacked-skip") else 1,
                      deep_supervision=True, dtype="float64", **TINY_SIZES[size])
    model = build_model(cfg, np.random.default_rng(seed))
    samples = [generate_synthetic_scene(seed + i, (3 * i + 1) % 11, cfg.input_size, cfg.input_size, 1)
               for i in range(2)]
    images = np.random.default_rng(seed + 3).normal(size=(2, 3, cfg.input_size, cfg.input_size))
    gt, w = heatmap_targets([s.layout for s in samples], cfg.output_size)
    types = [s.layout.room_type for s in samples]

    def fn():
        trace = forward(model, images, train=True, rng=np.random.default_rng(seed + 1))
        return joint_loss(trace, gt, w, types, cfg.loss_weight, True)

    label = f"roomnet[{variant}, {size}, T={cfg.iterations}]"
    return check_gradients(label, fn, model.parameters(), max_probes=max_probes,
                           rng=np.random.default_rng(seed + 2))


def run_suite(size: str = "tiny", include_model: bool = True) -> list[GradCheckResult]:
    results = [check_op(name) for name in ops.DIFFERENTIABLE_OPS]
    if include_model:
        results.append(check_model(size))
    return results


def format_report(results: list[GradCheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'op':<{width}}  {'max rel err':>12}  {'probes':>6}  {'skipped':>7}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.max_rel_error:>12.3e}  {r.probes:>6}  {r.skipped:>7}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
