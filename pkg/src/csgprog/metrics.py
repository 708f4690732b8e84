"""Edge maps, exact Euclidean distance transforms, Chamfer distance, IOU and
the shaped reward used for policy-gradient training."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .lang import GrammarConfig, Program, validate
from .render import DimMismatch, InvalidProgram, render

INF = np.inf
_BIG = 1e20  # stands in for +inf inside the envelope computation

DEFAULT_GAMMA = 20.0


def edge_map(r: np.ndarray) -> np.ndarray:
    """Occupied cells with at least one unoccupied face neighbour.

    Cells outside the canvas count as unoccupied, so an occupied cell on the
    border is always an edge.
    """
    r = np.asarray(r, dtype=bool)
    padded = np.pad(r, 1, constant_values=False)
    interior = np.ones_like(r)
    core = tuple(slice(1, -1) for _ in range(r.ndim))
    for ax in range(r.ndim):
        for shift in (-1, 1):
            sl = list(core)
            sl[ax] = slice(1 + shift, padded.shape[ax] - 1 + shift)
            interior &= padded[tuple(sl)]
    return r & ~interior


@numba.njit(cache=True)
def _dt1d(f, n, d, v, z):
    # Lower envelope of parabolas rooted at (q, f[q]).
    k = 0
    start = 0
    while start < n and f[start] >= _BIG:
        start += 1
    if start == n:
        for q in range(n):
            d[q] = _BIG
        return
    v[0] = start
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(start + 1, n):
        if f[q] >= _BIG:
            continue
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        dq = q - v[k]
        d[q] = dq * dq + f[v[k]]


@numba.njit(cache=True)
def _dt_lines(a):
    # In-place squared-distance transform along the last axis of a 2D view.
    rows, n = a.shape
    f = np.empty(n)
    d = np.empty(n)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    for i in range(rows):
        for j in range(n):
            f[j] = a[i, j]
        _dt1d(f, n, d, v, z)
        for j in range(n):
            a[i, j] = d[j]


def squared_distance_transform(edges: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance (in cells) from every cell center to the
    nearest True cell.  Separable: one 1D lower-envelope pass per axis."""
    edges = np.asarray(edges, dtype=bool)
    out = np.where(edges, 0.0, _BIG)
    for ax in range(edges.ndim):
        moved = np.ascontiguousarray(np.moveaxis(out, ax, -1))
        flat = moved.reshape(-1, moved.shape[-1])
        _dt_lines(flat)
        out = np.moveaxis(flat.reshape(moved.shape), -1, ax)
    return np.ascontiguousarray(out)


def distance_transform(edges: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance to the nearest edge cell; +inf everywhere if
    there are no edge cells."""
    sq = squared_distance_transform(edges)
    if not np.asarray(edges).any():
        return np.full(sq.shape, INF)
    return np.sqrt(sq)


@dataclass(frozen=True)
class Chamfer:
    normalized: float
    pixels: float


def chamfer(x_edges: np.ndarray, y_edges: np.ndarray, diagonal: float | None = None) -> Chamfer:
    """Symmetric Chamfer distance between two edge maps.

    ``pixels`` is in cell units; ``normalized`` divides by the canvas
    diagonal (``n * sqrt(ndim)`` for a cubic canvas of side ``n``).  If either
    edge set is empty the distance is maximal (normalized 1).
    """
    x_edges = np.asarray(x_edges, dtype=bool)
    y_edges = np.asarray(y_edges, dtype=bool)
    if x_edges.shape != y_edges.shape:
        raise DimMismatch(f"{x_edges.shape} vs {y_edges.shape}")
    if diagonal is None:
        diagonal = float(np.sqrt(np.sum(np.square(x_edges.shape))))
    if not x_edges.any() or not y_edges.any():
        return Chamfer(1.0, float(diagonal))
    dx = distance_transform(x_edges)
    dy = distance_transform(y_edges)
    px = 0.5 * dy[x_edges].mean() + 0.5 * dx[y_edges].mean()
    return Chamfer(float(px / diagonal), float(px))


def raster_chamfer(a: np.ndarray, b: np.ndarray) -> Chamfer:
    """Chamfer distance between the edge maps of two rasters."""
    return chamfer(edge_map(a), edge_map(b))


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimMismatch(f"{a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def shape_reward(cd_normalized, gamma: float = DEFAULT_GAMMA):
    """f(x) = (1 - x) ** gamma."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return (1.0 - cd_normalized) ** gamma


def shaped_reward(p: Program, target: np.ndarray, gamma: float = DEFAULT_GAMMA,
                  config: GrammarConfig | None = None, target_edges: np.ndarray | None = None) -> float:
    """Reward in [0, 1]: zero for invalid programs or empty renders, else
    ``(1 - Ch(Edge(target), Edge(render(p)))) ** gamma``."""
    config = config or GrammarConfig(dim=np.ndim(target))
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if not validate(p, config.max_length).valid:
        return 0.0
    try:
        out = render(p, config)
    except InvalidProgram:
        return 0.0
    if not out.any():
        return 0.0
    if target_edges is None:
        target_edges = edge_map(target)
    cd = chamfer(target_edges, edge_map(out), config.diagonal)
    return float(shape_reward(cd.normalized, gamma))
