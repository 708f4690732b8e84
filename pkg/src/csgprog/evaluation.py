"""Reconstruction reports and primitive-detection scoring (AP / MAP)."""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .lang import GrammarConfig, Primitive, Program, format_program, primitive_bbox
from .metrics import DEFAULT_GAMMA, chamfer, edge_map, iou, shaped_reward
from .render import InvalidProgram, render
from .search import beam_search, program_cd, refine

REPORT_FIELDS = ["id", "cd_pixels", "cd_normalized", "iou", "reward", "program_length", "k", "refine_iters",
                 "program", "error"]


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def mean(self, key: str) -> float:
        vals = [r[key] for r in self.rows if r.get(key) is not None and not r.get("error")]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def aggregate(self) -> dict:
        return {k: self.mean(k) for k in ("cd_pixels", "cd_normalized", "iou", "reward", "program_length")}

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, REPORT_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(r)
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as f:
                f.write(text)
        return text

    def summary(self) -> str:
        agg = self.aggregate
        lines = [f"items: {len(self.rows)}"]
        lines += [f"mean {k}: {v:.4f}" for k, v in agg.items()]
        errs = sum(1 for r in self.rows if r.get("error"))
        if errs:
            lines.append(f"errors: {errs}")
        return "\n".join(lines) + "\n"


def score_program(p: Program, target: np.ndarray, config: GrammarConfig, gamma: float = DEFAULT_GAMMA) -> dict:
    """Metrics of one program against one target."""
    try:
        out = render(p, config)
    except InvalidProgram as e:
        return {"cd_pixels": config.diagonal, "cd_normalized": 1.0, "iou": 0.0, "reward": 0.0,
                "program_length": len(p), "program": format_program(p), "error": str(e)}
    cd = chamfer(edge_map(target), edge_map(out), config.diagonal)
    return {"cd_pixels": cd.pixels, "cd_normalized": cd.normalized, "iou": iou(out, target),
            "reward": shaped_reward(p, target, gamma, config), "program_length": len(p),
            "program": format_program(p), "error": ""}


def best_of(programs: Sequence[Program], target: np.ndarray, config: GrammarConfig) -> tuple[Program, float]:
    """Lowest pixel CD program (first one on ties)."""
    te = edge_map(target)
    best, best_cd = None, np.inf
    for p in programs:
        cd = program_cd(p, te, config)
        if cd < best_cd:
            best, best_cd = p, cd
    return best, best_cd


def eval_reconstruction(policy, targets: Sequence[np.ndarray], k: int, refine_iters: int,
                        config: GrammarConfig, mask: bool = True, ids=None) -> EvalReport:
    """Beam search each target, keep the beam program closest in CD, refine
    it for ``refine_iters`` Powell cycles and record its metrics."""
    report = EvalReport()
    ids = list(ids) if ids is not None else list(range(len(targets)))
    for i, t in zip(ids, targets):
        beams = beam_search(policy, t, k, config, mask=mask)
        p, _ = best_of(beams, t, config)
        if p is None:
            report.rows.append({"id": i, "cd_pixels": config.diagonal, "cd_normalized": 1.0, "iou": 0.0,
                                "reward": 0.0, "program_length": 0, "k": k, "refine_iters": refine_iters,
                                "program": "", "error": "no program decoded"})
            continue
        if refine_iters:
            p = refine(p, t, refine_iters, config)
        row = {"id": i, "k": k, "refine_iters": refine_iters}
        row.update(score_program(p, t, config))
        report.rows.append(row)
    return report


# -- detection ---------------------------------------------------------------

@dataclass(frozen=True)
class Detection:
    kind: str
    box: tuple
    score: float

    @classmethod
    def of(cls, prim: Primitive, score: float = 1.0) -> "Detection":
        return cls(prim.kind, primitive_bbox(prim), score)


def detections_from_beams(beams: Sequence[Program], k: int) -> list[Detection]:
    """Score = number of beam programs containing the primitive / ``k``."""
    counts: Counter = Counter()
    first = {}
    for n, p in enumerate(beams):
        for prim in dict.fromkeys(p.primitives):
            counts[prim] += 1
            first.setdefault(prim, (n, len(first)))
    order = sorted(counts, key=lambda q: (-counts[q], first[q]))
    return [Detection.of(q, counts[q] / k) for q in order]


def detection_scores(policy, target: np.ndarray, k: int, config: GrammarConfig, mask: bool = True):
    if k < 1:
        raise ValueError("k must be >= 1")
    return detections_from_beams(beam_search(policy, target, k, config, mask=mask), k)


def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of axis-aligned boxes given as (lo..., hi...)."""
    n = len(a) // 2
    inter = 1.0
    for i in range(n):
        lo, hi = max(a[i], b[i]), min(a[n + i], b[n + i])
        if hi <= lo:
            return 0.0
        inter *= hi - lo
    vol = lambda x: float(np.prod([x[n + i] - x[i] for i in range(n)]))
    return inter / (vol(a) + vol(b) - inter)


def average_precision(scores: Sequence[float], tp: Sequence[bool], n_gt: int) -> float:
    """Area under the interpolated precision/recall curve (all points)."""
    if n_gt == 0:
        return float("nan")
    order = np.argsort(-np.asarray(scores, dtype=float), kind="stable")
    tp = np.asarray(tp, dtype=float)[order]
    ctp, cfp = np.cumsum(tp), np.cumsum(1 - tp)
    rec = ctp / n_gt
    prec = ctp / np.maximum(ctp + cfp, np.finfo(float).tiny)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def map_evaluation(detections: Sequence[Sequence[Detection]], ground_truth: Sequence[Sequence[Detection]],
                   iou_threshold: float = 0.5):
    """Per-class AP and their mean.

    Detections of one class are ranked by score across all images (stable on
    image order).  Each is matched to the unmatched same-class ground-truth
    box of highest IoU in its image; it is a true positive when that IoU is at
    least ``iou_threshold``.  Classes without ground truth are skipped.
    """
    if len(detections) != len(ground_truth):
        raise ValueError("need one detection list per image")
    classes = sorted({g.kind for gts in ground_truth for g in gts})
    ap = {}
    for c in classes:
        dets = [(d.score, img, d) for img, ds in enumerate(detections) for d in ds if d.kind == c]
        dets.sort(key=lambda x: -x[0])
        gts = {img: [g for g in gs if g.kind == c] for img, gs in enumerate(ground_truth)}
        used = {img: [False] * len(g) for img, g in gts.items()}
        n_gt = sum(len(g) for g in gts.values())
        flags = []
        for _, img, d in dets:
            best, best_j = 0.0, -1
            for j, g in enumerate(gts[img]):
                if used[img][j]:
                    continue
                o = box_iou(d.box, g.box)
                if o > best:
                    best, best_j = o, j
            hit = best_j >= 0 and best >= iou_threshold
            if hit:
                used[img][best_j] = True
            flags.append(hit)
        ap[c] = average_precision([x[0] for x in dets], flags, n_gt)
    m = float(np.mean(list(ap.values()))) if ap else float("nan")
    return ap, m
