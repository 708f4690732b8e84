"""Rasterization of primitives and shift-reduce execution of CSG programs.

Rasters are numpy bool arrays.  2D arrays are indexed ``[row, col]``; the
cell ``(r, c)`` is sampled at its center ``x = c + 0.5, y = r + 0.5``.  3D
arrays are indexed ``[row, col, depth]`` with ``z = d + 0.5``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .lang import (BoolOp, CSGError, GrammarConfig, Instruction, Primitive, Program, Stop,
                   ValidityReport, validate)


class InvalidProgram(CSGError):
    def __init__(self, report: ValidityReport):
        super().__init__(f"invalid program: {report}")
        self.report = report


class DimMismatch(CSGError, ValueError):
    pass


@lru_cache(maxsize=8)
def _centers(shape: tuple[int, ...]):
    """Cell-center coordinates as broadcastable (x, y[, z]) arrays."""
    axes = [np.arange(n, dtype=np.float64) + 0.5 for n in shape]
    if len(shape) == 2:
        y = axes[0][:, None]
        x = axes[1][None, :]
        return x, y
    y = axes[0][:, None, None]
    x = axes[1][None, :, None]
    z = axes[2][None, None, :]
    return x, y, z


def _membership(prim: Primitive, shape: tuple[int, ...]) -> np.ndarray:
    k = prim.kind
    p = [float(v) for v in prim.params]
    if len(shape) == 2:
        x, y = _centers(shape)
        cx, cy, r = p
        dx, dy = x - cx, y - cy
        if k == "circle":
            return dx * dx + dy * dy <= r * r
        if k == "square":
            # half side r/sqrt(2), compared in squared form so grid inputs are exact
            return (2 * dx * dx <= r * r) & (2 * dy * dy <= r * r)
        if k == "triangle":
            # apex at (cx, cy - r); flanks have slope sqrt(3); base at y = cy + r/2
            da = y - (cy - r)
            return (da >= 0) & (da * da >= 3 * dx * dx) & (dy <= r / 2)
        raise ValueError(f"not a 2D primitive: {k}")
    x, y, z = _centers(shape)
    if k == "cylinder":
        cx, cy, cz, r, h = p
    else:
        cx, cy, cz, r = p
    dx, dy, dz = x - cx, y - cy, z - cz
    if k == "sphere":
        return dx * dx + dy * dy + dz * dz <= r * r
    if k == "cube":
        # side r
        return (4 * dx * dx <= r * r) & (4 * dy * dy <= r * r) & (4 * dz * dz <= r * r)
    if k == "cylinder":
        return (dx * dx + dy * dy <= r * r) & (4 * dz * dz <= h * h)
    raise ValueError(f"not a 3D primitive: {k}")


@lru_cache(maxsize=4096)
def _render_cached(prim: Primitive, shape: tuple[int, ...]) -> np.ndarray:
    out = np.broadcast_to(_membership(prim, shape), shape).copy()
    out.setflags(write=False)
    return out


def render_primitive(prim: Primitive, config: GrammarConfig) -> np.ndarray:
    """Occupancy raster of one primitive.  The returned array is read-only
    for grid primitives (it is shared through a cache)."""
    shape = config.shape
    if prim.continuous:
        return np.broadcast_to(_membership(prim, shape), shape).copy()
    return _render_cached(prim, shape)


def apply_op(kind: str | BoolOp, b: np.ndarray, a: np.ndarray) -> np.ndarray:
    """``b op a`` where ``a`` is the first-popped (top) operand."""
    if isinstance(kind, BoolOp):
        kind = kind.kind
    if a.shape != b.shape:
        raise DimMismatch(f"{b.shape} vs {a.shape}")
    if kind == "union":
        return b | a
    if kind == "intersect":
        return b & a
    if kind == "subtract":
        return b & ~a
    raise ValueError(f"unknown op {kind!r}")


@dataclass
class TraceStep:
    instruction: Instruction
    depth: int
    top: np.ndarray


class ExecStack:
    """Mutable stack of rasters driven one instruction at a time.

    Used by the executor and by decoders that need the intermediate stack.
    An op on a stack with fewer than two items marks the stack ``broken``
    and leaves it unchanged.
    """

    def __init__(self, config: GrammarConfig, items=None):
        self.config = config
        self.items: list[np.ndarray] = list(items) if items else []
        self.broken = False
        self.n_steps = 0

    def __len__(self):
        return len(self.items)

    def copy(self) -> "ExecStack":
        s = ExecStack(self.config, self.items)
        s.broken, s.n_steps = self.broken, self.n_steps
        return s

    def push(self, ins: Instruction) -> None:
        self.n_steps += 1
        if isinstance(ins, Primitive):
            self.items.append(render_primitive(ins, self.config))
        elif isinstance(ins, BoolOp):
            if len(self.items) < 2:
                self.broken = True
                return
            a = self.items.pop()
            b = self.items.pop()
            self.items.append(apply_op(ins.kind, b, a))
        elif isinstance(ins, Stop):
            pass
        else:
            raise TypeError(ins)

    @property
    def top(self) -> np.ndarray | None:
        return self.items[-1] if self.items else None


def execute(p: Program, config: GrammarConfig, trace: bool = True):
    """Run ``p`` and return ``(raster, trace)``.

    Raises InvalidProgram if the program does not validate.
    """
    report = validate(p, config.max_length)
    if not report.valid:
        raise InvalidProgram(report)
    stack = ExecStack(config)
    steps = []
    for ins in p.body:
        stack.push(ins)
        if trace:
            steps.append(TraceStep(ins, len(stack), stack.top))
    return stack.top, steps


def render(p: Program, config: GrammarConfig) -> np.ndarray:
    return execute(p, config, trace=False)[0]


def stack_observation(stack: ExecStack | list, k: int, shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Top-``k`` maps of the stack as a (k, *shape) bool array; channel 0 is
    the top of the stack, missing entries are all zero."""
    if k < 1:
        raise ValueError("k must be >= 1")
    items = stack.items if isinstance(stack, ExecStack) else list(stack)
    if shape is None:
        if isinstance(stack, ExecStack):
            shape = stack.config.shape
        elif items:
            shape = items[0].shape
        else:
            raise ValueError("shape required for an empty item list")
    out = np.zeros((k,) + tuple(shape), dtype=bool)
    for c, item in enumerate(reversed(items[-k:])):
        out[c] = item
    return out
