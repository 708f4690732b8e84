"""Nearest-neighbour retrieval baseline: return the stored program whose
rendering is closest in Chamfer distance to the query."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .lang import Program
from .metrics import distance_transform, edge_map, iou


class EmptyIndex(ValueError):
    pass


@dataclass
class NNIndex:
    rasters: np.ndarray  # (N, *shape) bool
    edges: np.ndarray  # (N, *shape) bool
    dists: np.ndarray  # (N, *shape) distance fields of the edges
    programs: list[Program]

    def __len__(self):
        return len(self.programs)


def nn_build_index(rasters: Sequence[np.ndarray], programs: Sequence[Program]) -> NNIndex:
    if len(rasters) != len(programs):
        raise ValueError("rasters and programs differ in length")
    if not len(programs):
        raise EmptyIndex("cannot index zero records")
    r = np.stack([np.asarray(x, dtype=bool) for x in rasters])
    e = np.stack([edge_map(x) for x in r])
    d = np.stack([distance_transform(x) for x in e])
    return NNIndex(r, e, d, list(programs))


def nn_scores(index: NNIndex, target: np.ndarray) -> np.ndarray:
    """Pixel Chamfer distance from ``target`` to every indexed raster, using
    the cached edge distance fields."""
    diag = float(np.sqrt(np.sum(np.square(target.shape))))
    te = edge_map(target)
    out = np.full(len(index), diag)
    if not te.any():
        return out
    td = distance_transform(te)
    for i in range(len(index)):
        e = index.edges[i]
        if e.any():
            out[i] = 0.5 * index.dists[i][te].mean() + 0.5 * td[e].mean()
    return out


def nn_retrieve(index: NNIndex, target: np.ndarray, return_id: bool = False):
    """Program of the closest record; ties broken by higher IOU, then by the
    lower record id."""
    if not len(index):
        raise EmptyIndex("index is empty")
    cd = nn_scores(index, target)
    best = np.flatnonzero(cd == cd.min())
    if len(best) > 1:
        ious = np.array([iou(index.rasters[i], target) for i in best])
        best = best[ious == ious.max()]
    i = int(best[0])
    return (index.programs[i], i) if return_id else index.programs[i]
