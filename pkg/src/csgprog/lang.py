"""CSG instruction language: grammar configuration, program text, vocabularies
and static validation.

Programs are postfix sequences.  A primitive pushes a shape, a boolean op pops
two shapes ``A`` (top) then ``B`` and pushes ``B op A``.  ``stop`` terminates.
"""

from __future__ import annotations

import enum
import hashlib
import re
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

PRIMITIVES_2D = ("circle", "square", "triangle")
PRIMITIVES_3D = ("cube", "cylinder", "sphere")
OPS = ("union", "intersect", "subtract")
STOP_WORD = "stop"

# Short forms used in the 3D grammar notation.
KIND_ALIASES = {"sp": "sphere", "cu": "cube", "cy": "cylinder"}


class CSGError(Exception):
    pass


class ProgramSyntaxError(CSGError, ValueError):
    """A token could not be parsed."""


class RangeError(CSGError, ValueError):
    """A primitive parameter lies off the configured grid."""


class ConfigError(CSGError, ValueError):
    pass


def _arith(start: int, step: int, end: int) -> tuple[int, ...]:
    if step <= 0:
        raise ConfigError(f"grid step must be positive, got {step}")
    return tuple(range(start, end + 1, step))


@dataclass(frozen=True)
class GrammarConfig:
    dim: int = 2
    canvas_extent: int = 64
    location_grid: tuple[int, ...] = _arith(8, 8, 56)
    radius_grid: tuple[int, ...] = _arith(8, 4, 32)
    height_grid: tuple[int, ...] = _arith(8, 4, 32)
    primitive_kinds: tuple[str, ...] = ()
    op_kinds: tuple[str, ...] = OPS
    max_length: int = 13
    containment_filter: bool = False

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ConfigError(f"dimensionality must be 2 or 3, got {self.dim}")
        if not self.primitive_kinds:
            object.__setattr__(self, "primitive_kinds", PRIMITIVES_2D if self.dim == 2 else PRIMITIVES_3D)
        allowed = PRIMITIVES_2D if self.dim == 2 else PRIMITIVES_3D
        bad = [k for k in self.primitive_kinds if k not in allowed]
        if bad:
            raise ConfigError(f"primitive kinds {bad} not available in {self.dim}D")
        if not self.op_kinds or any(o not in OPS for o in self.op_kinds):
            raise ConfigError(f"op kinds must be a nonempty subset of {OPS}")
        if self.max_length < 3:
            raise ConfigError("max_length must be at least 3")
        grids = [self.location_grid, self.radius_grid] + ([self.height_grid] if self.dim == 3 else [])
        for g in grids:
            if not g:
                raise ConfigError("empty parameter grid")
            if any(v <= 0 or v > self.canvas_extent for v in g):
                raise ConfigError(f"grid values must lie in (0, {self.canvas_extent}]: {g}")

    @classmethod
    def default_3d(cls, **kw) -> "GrammarConfig":
        return cls(dim=3, **kw)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.canvas_extent,) * self.dim

    @property
    def diagonal(self) -> float:
        return self.canvas_extent * self.dim ** 0.5

    def n_params(self, kind: str) -> int:
        if self.dim == 2:
            return 3
        return 5 if kind == "cylinder" else 4

    # -- flat key/value file format ------------------------------------
    _KEYS = (
        "dimensionality", "canvas_extent",
        "location_start", "location_step", "location_end",
        "radius_start", "radius_step", "radius_end",
        "height_start", "height_step", "height_end",
        "max_length", "containment_filter",
    )

    def to_text(self) -> str:
        """Serialize as ``key = int`` lines.  Grids must be arithmetic."""
        vals = {"dimensionality": self.dim, "canvas_extent": self.canvas_extent}
        for name, grid in (("location", self.location_grid), ("radius", self.radius_grid),
                           ("height", self.height_grid)):
            step = grid[1] - grid[0] if len(grid) > 1 else 1
            if tuple(range(grid[0], grid[-1] + 1, step)) != tuple(grid):
                raise ConfigError(f"{name} grid is not an arithmetic sequence")
            vals[f"{name}_start"], vals[f"{name}_step"], vals[f"{name}_end"] = grid[0], step, grid[-1]
        vals["max_length"] = self.max_length
        vals["containment_filter"] = int(self.containment_filter)
        return "".join(f"{k} = {vals[k]}\n" for k in self._KEYS)

    @classmethod
    def from_text(cls, text: str) -> "GrammarConfig":
        vals = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in cls._KEYS:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            try:
                vals[key] = int(val)
            except ValueError:
                raise ConfigError(f"line {lineno}: {key} must be an integer") from None
        dim = vals.get("dimensionality", 2)
        kw = {"dim": dim}
        if "canvas_extent" in vals:
            kw["canvas_extent"] = vals["canvas_extent"]
        defaults = {"location": (8, 8, 56), "radius": (8, 4, 32), "height": (8, 4, 32)}
        for name, (s, st, e) in defaults.items():
            kw[f"{name}_grid"] = _arith(vals.get(f"{name}_start", s), vals.get(f"{name}_step", st),
                                        vals.get(f"{name}_end", e))
        kw["max_length"] = vals.get("max_length", 13)
        kw["containment_filter"] = bool(vals.get("containment_filter", 0))
        return cls(**kw)


Number = Union[int, float]


@dataclass(frozen=True)
class Primitive:
    """A shape instruction.  ``params`` is (x, y, r) in 2D, (x, y, z, r) for
    sphere/cube and (x, y, z, r, h) for cylinder."""

    kind: str
    params: tuple[Number, ...]
    continuous: bool = False

    def __str__(self):
        return f"{self.kind}({','.join(_fmt_num(v, self.continuous) for v in self.params)})"

    @property
    def center(self) -> tuple[Number, ...]:
        return self.params[:-2] if self.kind == "cylinder" else self.params[:-1]

    @property
    def radius(self) -> Number:
        return self.params[-2] if self.kind == "cylinder" else self.params[-1]

    @property
    def height(self) -> Number | None:
        return self.params[-1] if self.kind == "cylinder" else None

    def sort_key(self):
        # (kind, x, y, z, r, h) with absent fields as -1
        p = list(self.params)
        if len(p) == 3:
            x, y, r = p
            z = h = -1
        elif len(p) == 4:
            x, y, z, r = p
            h = -1
        else:
            x, y, z, r, h = p
        return (self.kind, x, y, z, r, h)


@dataclass(frozen=True)
class BoolOp:
    kind: str

    def __str__(self):
        return self.kind


@dataclass(frozen=True)
class Stop:
    def __str__(self):
        return STOP_WORD


STOP = Stop()
Instruction = Union[Primitive, BoolOp, Stop]


def _fmt_num(v: Number, continuous: bool) -> str:
    if not continuous:
        return str(int(v))
    return repr(float(v))


@dataclass(frozen=True)
class Program:
    instructions: tuple[Instruction, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "instructions", tuple(self.instructions))
        for i, ins in enumerate(self.instructions):
            if isinstance(ins, Stop) and i != len(self.instructions) - 1:
                raise ProgramSyntaxError(f"stop at position {i} is not the last instruction")

    @property
    def terminated(self) -> bool:
        return bool(self.instructions) and isinstance(self.instructions[-1], Stop)

    @property
    def body(self) -> tuple[Instruction, ...]:
        """Instructions without the trailing stop."""
        return self.instructions[:-1] if self.terminated else self.instructions

    @property
    def primitives(self) -> list[Primitive]:
        return [i for i in self.instructions if isinstance(i, Primitive)]

    @property
    def continuous(self) -> bool:
        return any(p.continuous for p in self.primitives)

    def __len__(self):
        return len(self.body)

    def __iter__(self):
        return iter(self.instructions)

    def __str__(self):
        return format_program(self)

    def with_stop(self) -> "Program":
        return self if self.terminated else Program(self.instructions + (STOP,))

    def without_stop(self) -> "Program":
        return Program(self.body)


_TOKEN = re.compile(r"^([a-z]+)\(([^()]*)\)$")
_INT = re.compile(r"^[+-]?\d+$")


def _check_grid(kind: str, params: Sequence[int], config: GrammarConfig, token: str):
    if config.dim == 2:
        grids = [config.location_grid] * 2 + [config.radius_grid]
    else:
        grids = [config.location_grid] * 3 + [config.radius_grid]
        if kind == "cylinder":
            grids.append(config.height_grid)
    for v, g in zip(params, grids):
        if v not in g:
            raise RangeError(f"{token}: parameter {v} is not on grid {list(g)}")


def parse_instruction(token: str, config: GrammarConfig, enforce_grid: bool = True) -> Instruction:
    if token == STOP_WORD:
        return STOP
    if token in OPS:
        if token not in config.op_kinds:
            raise ProgramSyntaxError(f"operation {token!r} not enabled in this grammar")
        return BoolOp(token)
    m = _TOKEN.match(token)
    if not m:
        raise ProgramSyntaxError(f"malformed token {token!r}")
    kind = KIND_ALIASES.get(m.group(1), m.group(1))
    if kind not in config.primitive_kinds:
        raise ProgramSyntaxError(f"unknown primitive kind {m.group(1)!r}")
    fields = [s.strip() for s in m.group(2).split(",")]
    if len(fields) != config.n_params(kind):
        raise ProgramSyntaxError(f"{token}: expected {config.n_params(kind)} parameters, got {len(fields)}")
    if all(_INT.match(f) for f in fields):
        params = tuple(int(f) for f in fields)
        if enforce_grid:
            _check_grid(kind, params, config, token)
        return Primitive(kind, params)
    try:
        params = tuple(float(f) for f in fields)
    except ValueError:
        raise ProgramSyntaxError(f"malformed parameters in {token!r}") from None
    return Primitive(kind, params, continuous=True)


def parse_program(text: str, config: GrammarConfig | None = None, enforce_grid: bool = True) -> Program:
    """Parse whitespace-separated tokens such as ``circle(32,32,28) square(32,40,24) union``.

    Integer parameters must lie on the configured grids unless
    ``enforce_grid`` is off.  Tokens with any non-integer parameter are
    read as continuous primitives and are never grid-checked.
    """
    config = config or GrammarConfig()
    return Program(tuple(parse_instruction(t, config, enforce_grid) for t in text.split()))


def format_program(p: Program) -> str:
    return " ".join(str(i) for i in p.instructions)


# -- vocabulary -------------------------------------------------------------

def primitive_bbox(prim: Primitive) -> tuple[float, ...]:
    """Tight axis-aligned box of the primitive's membership region.

    Returns (x0, y0, x1, y1) in 2D and (x0, y0, z0, x1, y1, z1) in 3D, in
    canvas units (x grows with column, y with row, z with depth).
    """
    k, r = prim.kind, float(prim.radius)
    c = [float(v) for v in prim.center]
    if k in ("circle", "sphere"):
        half = [r] * len(c)
    elif k == "square":
        half = [r / 2 ** 0.5] * 2
    elif k == "cube":
        half = [r / 2] * 3
    elif k == "cylinder":
        half = [r, r, float(prim.height) / 2]
    elif k == "triangle":
        w = r * 3 ** 0.5 / 2
        return (c[0] - w, c[1] - r, c[0] + w, c[1] + r / 2)
    else:
        raise ValueError(k)
    return tuple(ci - h for ci, h in zip(c, half)) + tuple(ci + h for ci, h in zip(c, half))


def _contained(prim: Primitive, extent: int) -> bool:
    box = primitive_bbox(prim)
    n = len(box) // 2
    return all(box[i] >= 0 for i in range(n)) and all(box[n + i] <= extent for i in range(n))


class Vocabulary:
    """Deterministic indexed enumeration of every legal instruction."""

    def __init__(self, entries: Iterable[Instruction], config: GrammarConfig):
        self.entries: tuple[Instruction, ...] = tuple(entries)
        self.config = config
        self._index = {e: i for i, e in enumerate(self.entries)}
        if len(self._index) != len(self.entries):
            raise ValueError("duplicate vocabulary entries")
        self.stop_id = self._index[STOP]
        self.op_ids = tuple(self._index[BoolOp(o)] for o in OPS if BoolOp(o) in self._index)
        self.n_primitives = sum(isinstance(e, Primitive) for e in self.entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i: int) -> Instruction:
        return self.entries[i]

    def __contains__(self, ins) -> bool:
        return ins in self._index

    def index_of(self, ins: Instruction) -> int:
        try:
            return self._index[ins]
        except KeyError:
            raise KeyError(f"{ins} is not in the vocabulary") from None

    def encode(self, p: Program) -> list[int]:
        return [self.index_of(i) for i in p.instructions]

    def decode(self, ids: Iterable[int]) -> Program:
        out = []
        for i in ids:
            ins = self.entries[int(i)]
            out.append(ins)
            if isinstance(ins, Stop):
                break
        return Program(tuple(out))

    def hash(self) -> str:
        h = hashlib.sha256()
        for e in self.entries:
            h.update(str(e).encode())
            h.update(b"\n")
        return h.hexdigest()

    def kind_of(self, i: int) -> str:
        """'primitive', 'op' or 'stop'."""
        e = self.entries[i]
        if isinstance(e, Primitive):
            return "primitive"
        return "op" if isinstance(e, BoolOp) else "stop"


def build_vocabulary(config: GrammarConfig) -> Vocabulary:
    import itertools

    prims = []
    L, R, H = config.location_grid, config.radius_grid, config.height_grid
    for kind in config.primitive_kinds:
        if config.dim == 2:
            combos = itertools.product(L, L, R)
        elif kind == "cylinder":
            combos = itertools.product(L, L, L, R, H)
        else:
            combos = itertools.product(L, L, L, R)
        for params in combos:
            p = Primitive(kind, params)
            if config.containment_filter and not _contained(p, config.canvas_extent):
                continue
            prims.append(p)
    prims.sort(key=Primitive.sort_key)
    ops = [BoolOp(o) for o in OPS if o in config.op_kinds]
    return Vocabulary(prims + ops + [STOP], config)


# -- validation -------------------------------------------------------------

class Failure(enum.Enum):
    EMPTY = "Empty"
    TOO_LONG = "TooLong"
    STACK_UNDERFLOW = "StackUnderflow"
    NON_SINGLETON_FINAL = "NonSingletonFinal"


@dataclass(frozen=True)
class ValidityReport:
    valid: bool
    failure: Failure | None = None
    # underflow position or final stack size, depending on failure
    detail: int | None = None

    def __str__(self):
        if self.valid:
            return "valid"
        if self.detail is None:
            return self.failure.value
        return f"{self.failure.value}({self.detail})"


def validate(p: Program, max_length: int | None = 13) -> ValidityReport:
    body = p.body
    if not body:
        return ValidityReport(False, Failure.EMPTY)
    if max_length is not None and len(body) > max_length:
        return ValidityReport(False, Failure.TOO_LONG, len(body))
    depth = 0
    for i, ins in enumerate(body):
        if isinstance(ins, BoolOp):
            if depth < 2:
                return ValidityReport(False, Failure.STACK_UNDERFLOW, i)
            depth -= 1
        else:
            depth += 1
    if depth != 1:
        return ValidityReport(False, Failure.NON_SINGLETON_FINAL, depth)
    return ValidityReport(True)


def stack_depths(p: Program) -> list[int]:
    """Stack depth after each body instruction (no underflow checking)."""
    out, d = [], 0
    for ins in p.body:
        d += -1 if isinstance(ins, BoolOp) else 1
        out.append(d)
    return out


COMMUTATIVE = ("union", "intersect")


def canonical_order(p: Program) -> Program:
    """Same program with the operands of every union and intersection
    swapped into a fixed order (smaller primitive sort keys first).

    The rendered result is unchanged; only the instruction order differs.
    Invalid programs are returned as they are.
    """
    if not validate(p, None).valid:
        return p

    def key(seq):
        return [(0, ins.sort_key()) if isinstance(ins, Primitive) else (1, OPS.index(ins.kind)) for ins in seq]

    stack: list[list] = []
    for ins in p.body:
        if isinstance(ins, BoolOp):
            a = stack.pop()
            b = stack.pop()
            if ins.kind in COMMUTATIVE and key(a) < key(b):
                a, b = b, a
            stack.append(b + a + [ins])
        else:
            stack.append([ins])
    out = tuple(stack[0])
    return Program(out + ((STOP,) if p.terminated else ()))
