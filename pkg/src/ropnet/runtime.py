"""Static execution plans over one pre-allocated arena, plus the FPS harness.

A plan walks the layer list once at build time: every intermediate tensor
gets an offset in a flat arena, chosen first-fit among the gaps left by
buffers whose last reader has already run.  Binding a plan allocates the arena,
creates the per-op views and precomputes the constants (converted weights,
batch-norm inverse std), so executing it performs no allocation of
activations.  Kernels are the same ones the eager path uses, which keeps the
two engines bitwise equal.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import tensor as T
from .errors import CapabilityError, ParameterError, ShapeError
from .model import ModelSpec, forward, infer_shapes, load_model, validate

MODES = ("eager", "planned_percall", "planned_preinit")
BENCH_HEADER = ("model", "mode", "n_images", "runtimes", "mean_fps", "std_fps", "normalized_fps")


@dataclass(frozen=True)
class Buffer:
    offset: int
    shape: tuple

    @property
    def size(self):
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class PlannedOp:
    layer: object
    inputs: tuple
    output: Buffer


@dataclass
class ExecutionPlan:
    spec: ModelSpec
    params: dict = field(repr=False)
    batch_shape: tuple
    dtype: np.dtype
    input: Buffer
    ops: tuple
    arena_elements: int
    _bound: object = field(default=None, repr=False, compare=False)

    @property
    def output(self):
        return self.ops[-1].output

    @property
    def arena_bytes(self):
        return self.arena_elements * self.dtype.itemsize

    def no_reuse_elements(self):
        """Arena size if every tensor had a private buffer."""
        return self.input.size + sum(op.output.size for op in self.ops)

    def layout(self):
        """Hashable summary for comparing plans."""
        return (self.batch_shape, str(self.dtype), self.input,
                tuple((op.layer.name, op.inputs, op.output) for op in self.ops), self.arena_elements)


def _first_fit(live, size):
    """Lowest offset where ``size`` elements fit between live ``(offset, size)`` blocks."""
    cursor = 0
    for off, sz in sorted(live):
        if off - cursor >= size:
            return cursor
        cursor = max(cursor, off + sz)
    return cursor


def plan(spec: ModelSpec, params, batch_shape, dtype=np.float32) -> ExecutionPlan:
    """Schedule ``spec`` for a fixed ``batch_shape`` ``(N, H, W, C)``."""
    batch_shape = tuple(batch_shape)
    if any(d is None or not isinstance(d, (int, np.integer)) or d < 1 for d in batch_shape):
        raise CapabilityError(f"planning needs a fully static positive batch shape, got {batch_shape}")
    if batch_shape[1:] != tuple(spec.input_shape):
        raise ShapeError(f"batch shape {batch_shape} does not match model input {spec.input_shape}")
    if not spec.layers:
        raise CapabilityError(f"model {spec.name!r} has no layers")
    validate(spec, params, binary_head=False)
    dtype = np.dtype(dtype)
    n = batch_shape[0]
    shapes = [(n, *s) for s in infer_shapes(spec)]

    # tensor t is produced by step t-1 (t = 0 is the input) and read by step t
    last_use = {t: t for t in range(len(shapes))}
    last_use[len(shapes) - 1] = len(shapes)  # graph output stays live
    live, offsets = {}, {}

    def alloc(t):
        size = int(np.prod(shapes[t]))
        offsets[t] = _first_fit(live.values(), size)
        live[t] = (offsets[t], size)

    alloc(0)
    high_water = live[0][0] + live[0][1]
    ops = []
    for step, layer in enumerate(spec.layers):
        alloc(step + 1)
        high_water = max(high_water, offsets[step + 1] + live[step + 1][1])
        ops.append(PlannedOp(layer, (Buffer(offsets[step], shapes[step]),), Buffer(offsets[step + 1], shapes[step + 1])))
        for t in [t for t in live if last_use[t] <= step]:
            del live[t]
    return ExecutionPlan(spec, params, batch_shape, dtype, Buffer(0, shapes[0]), tuple(ops), high_water)


# --------------------------------------------------------------------------
# binding and execution


def _view(arena, buf):
    return arena[buf.offset:buf.offset + buf.size].reshape(buf.shape)


def _make_step(op: PlannedOp, arena, params, dtype):
    layer, name = op.layer, op.layer.name
    x = _view(arena, op.inputs[0])
    y = _view(arena, op.output)
    kind = layer.kind
    if kind in ("conv", "depthwise_conv"):
        w = np.ascontiguousarray(params[f"{name}.weight"], dtype=dtype)
        cfg = layer.conv_config(x.shape[-1] if kind == "depthwise_conv" else None)
        pad_t, pad_l = cfg.pads(x.shape[1], x.shape[2])
        kernel = _kernels.conv2d_into if kind == "conv" else _kernels.depthwise_into
        stride = cfg.stride
        return lambda: kernel(x, w, stride, pad_t, pad_l, y)
    if kind == "batch_norm":
        gamma = params[f"{name}.gamma"].astype(dtype)
        beta = params[f"{name}.beta"].astype(dtype)
        mean = params[f"{name}.running_mean"].astype(dtype)
        inv_std = T.inverse_std(params[f"{name}.running_var"], layer.eps, dtype)
        return lambda: T.batch_norm_infer(x, gamma, beta, mean, inv_std, out=y)
    if kind == "relu":
        return lambda: T.relu(x, out=y)
    if kind == "sigmoid":
        return lambda: T.sigmoid(x, out=y)
    if kind == "flatten":
        return lambda: T.flatten(x, out=y)
    if kind == "global_avg_pool":
        return lambda: T.global_avg_pool(x, out=y)
    if kind == "dense":
        w = np.ascontiguousarray(params[f"{name}.weight"], dtype=dtype)
        b = params[f"{name}.bias"].astype(dtype)

        def dense():
            _kernels.matmul_into(x, w, y)
            np.add(y, b, out=y)
        return dense
    raise CapabilityError(f"unsupported layer kind {kind!r}")


class BoundPlan:
    """A plan with its arena allocated and every step pre-wired."""

    def __init__(self, plan: ExecutionPlan):
        self.plan = plan
        self.arena = np.empty(plan.arena_elements, dtype=plan.dtype)
        self.input = _view(self.arena, plan.input)
        self.output = _view(self.arena, plan.output)
        self.steps = [_make_step(op, self.arena, plan.params, plan.dtype) for op in plan.ops]

    def check_input(self, x):
        x = np.asarray(x)
        if x.shape != self.plan.batch_shape:
            raise ShapeError(f"input shape {x.shape} does not match planned shape {self.plan.batch_shape}")
        return x

    def run(self, x):
        self.input[...] = self.check_input(x)
        for step in self.steps:
            step()
        return self.output.copy()

    def run_checked(self, x):
        """Run with canary fills; returns ``(output, corruptions)``.

        The arena starts as NaN.  After each step every other live buffer
        must be bytewise unchanged and the step's output must contain no NaN
        (i.e. was fully written).  Each violation is reported as a string.
        """
        self.arena.fill(np.nan)
        self.input[...] = self.check_input(x)
        corruptions = []
        live = {0: self.plan.input}
        for k, (op, step) in enumerate(zip(self.plan.ops, self.steps)):
            before = {t: _view(self.arena, b).tobytes() for t, b in live.items()}
            step()
            out = _view(self.arena, op.output)
            if np.isnan(out).any():
                corruptions.append(f"step {k} ({op.layer.name}): output not fully written")
            for t, b in live.items():
                if _view(self.arena, b).tobytes() != before[t]:
                    corruptions.append(f"step {k} ({op.layer.name}) clobbered live tensor {t}")
            live = {k + 1: op.output}
        return self.output.copy(), corruptions


def bind(plan: ExecutionPlan) -> BoundPlan:
    return BoundPlan(plan)


def execute_planned(plan: ExecutionPlan, x):
    """Run ``x`` through the plan; the binding is built on first use and reused."""
    if plan._bound is None:
        plan._bound = BoundPlan(plan)
    return plan._bound.run(x)


# --------------------------------------------------------------------------
# FPS harness


@dataclass
class FpsReport:
    model: str
    mode: str
    n_images: int
    runtimes: int
    seconds: list
    normalized_fps: float = 1.0

    @property
    def fps(self):
        return [self.n_images / s for s in self.seconds]

    @property
    def mean_fps(self):
        return statistics.fmean(self.fps)

    @property
    def std_fps(self):
        return statistics.pstdev(self.fps)


def _timed(fn, runtimes, warmup):
    for _ in range(warmup):
        fn()
    seconds = []
    for _ in range(runtimes):
        t0 = time.perf_counter()
        fn()
        seconds.append(max(time.perf_counter() - t0, 1e-12))
    return seconds


def bench_model(spec: ModelSpec, params, mode, n_images, runtimes, seed=0, warmup=1, name=None):
    """Time ``runtimes`` passes over ``n_images`` seeded random images, one at a time."""
    if mode not in MODES:
        raise ParameterError(f"unknown bench mode {mode!r}; choose from {', '.join(MODES)}")
    if n_images < 1 or runtimes < 1:
        raise ParameterError("n_images and runtimes must be >= 1")
    rng = np.random.default_rng(seed)
    images = rng.random((n_images, 1, *spec.input_shape), dtype=np.float32)

    if mode == "eager":
        def rep():
            for img in images:
                forward(spec, params, img, "infer")
    elif mode == "planned_percall":
        def rep():
            bound = bind(plan(spec, params, images.shape[1:]))
            for img in images:
                bound.run(img)
    else:
        bound = bind(plan(spec, params, images.shape[1:]))

        def rep():
            for img in images:
                bound.run(img)
    seconds = _timed(rep, runtimes, warmup)
    return FpsReport(name or spec.name, mode, n_images, runtimes, seconds)


def fps_bench(model_path, mode, n_images, runtimes, seed=0, warmup=1):
    spec, params = load_model(model_path)
    return bench_model(spec, params, mode, n_images, runtimes, seed, warmup)


def normalize_reports(reports):
    """Scale ``normalized_fps`` so the fastest report in the list is 1.0."""
    reports = list(reports)
    if reports:
        best = max(r.mean_fps for r in reports)
        for r in reports:
            r.normalized_fps = r.mean_fps / best
    return reports


def export_bench_csv(reports, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(BENCH_HEADER)
        for r in reports:
            writer.writerow([r.model, r.mode, r.n_images, r.runtimes,
                             f"{r.mean_fps:.6f}", f"{r.std_fps:.6f}", f"{r.normalized_fps:.6f}"])


def read_bench_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("n_images", "runtimes"):
            r[k] = int(r[k])
        for k in ("mean_fps", "std_fps", "normalized_fps"):
            r[k] = float(r[k])
    return rows
