"""Decoding over a step-wise policy and visually-guided parameter refinement.

A policy here is anything with ``stack_k``, ``vocab`` and the two methods::

    start(target) -> ctx
    step(ctx, states, prev_tokens, stacks) -> (log_probs[n, V], new_states)

``prev_tokens`` holds ``None`` at the first step; ``stacks`` are
``ExecStack`` objects reflecting the tokens emitted so far (only maintained
when ``stack_k > 0``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .lang import GrammarConfig, Primitive, Program, Vocabulary
from .metrics import chamfer, edge_map
from .render import ExecStack, InvalidProgram, render

log = logging.getLogger(__name__)


def grammar_mask(vocab: Vocabulary, n_tokens: int, depth: int, max_length: int) -> np.ndarray:
    """Tokens that keep a partial program completable: an op needs two
    operands, stop needs exactly one, and a primitive must leave room for the
    ops that reduce the stack within ``max_length``."""
    m = np.zeros(len(vocab), dtype=bool)
    if n_tokens + 1 + depth <= max_length:
        m[:vocab.n_primitives] = True
    if depth >= 2:
        m[list(vocab.op_ids)] = True
    if depth == 1:
        m[vocab.stop_id] = True
    return m


def _depth_after(vocab: Vocabulary, depth: int, tok: int) -> int:
    kind = vocab.kind_of(tok)
    if kind == "primitive":
        return depth + 1
    if kind == "op":
        return depth - 1 if depth >= 2 else depth
    return depth


@dataclass
class _Hyp:
    tokens: list
    logp: float
    state: object = None
    stack: ExecStack | None = None
    depth: int = 0


def _extend(h: _Hyp, tok: int, logp: float, state, vocab: Vocabulary, track_stack: bool) -> _Hyp:
    stack = None
    if track_stack:
        stack = h.stack.copy()
        stack.push(vocab[tok])
    return _Hyp(h.tokens + [tok], logp, state, stack, _depth_after(vocab, h.depth, tok))


def _start(policy, config: GrammarConfig) -> _Hyp:
    return _Hyp([], 0.0, None, ExecStack(config) if policy.stack_k else None, 0)


def greedy_decode(policy, target: np.ndarray, config: GrammarConfig, mask: bool = True) -> Program:
    """Most likely token at every step (ties go to the lowest id) until stop
    or the length cap; the executor advances on every emitted token."""
    vocab = policy.vocab
    ctx = policy.start(target)
    h = _start(policy, config)
    for t in range(config.max_length + 1):
        logp, states = policy.step(ctx, [h.state], [h.tokens[-1] if h.tokens else None], [h.stack])
        scores = logp[0].copy()
        if mask:
            scores[~grammar_mask(vocab, t, h.depth, config.max_length)] = -np.inf
        tok = int(np.argmax(scores))
        if tok == vocab.stop_id:
            return vocab.decode(h.tokens + [tok])
        if t == config.max_length:
            break
        h = _extend(h, tok, h.logp + scores[tok], states[0], vocab, bool(policy.stack_k))
    return vocab.decode(h.tokens)


def beam_search(policy, target: np.ndarray, k: int, config: GrammarConfig, mask: bool = True,
                return_scores: bool = False):
    """Length-synchronous beam search.

    Each step scores every one-token extension of the live hypotheses and
    keeps the ``k`` best (ties: lower hypothesis index, then lower token id).
    Extensions ending in stop retire to a pool; the result is the top ``k`` of
    the pool by total log-probability, padded with length-capped unfinished
    hypotheses when the pool is short.
    """
    if k < 1:
        raise ValueError("beam width must be >= 1")
    vocab = policy.vocab
    track = bool(policy.stack_k)
    L = config.max_length
    ctx = policy.start(target)
    alive = [_start(policy, config)]
    finished: list[tuple[float, int, list]] = []
    truncated: list[tuple[float, int, list]] = []
    order = 0
    for t in range(L + 1):
        logp, states = policy.step(ctx, [h.state for h in alive],
                                   [h.tokens[-1] if h.tokens else None for h in alive],
                                   [h.stack for h in alive])
        total = np.array([h.logp for h in alive])[:, None] + logp
        if mask:
            for i, h in enumerate(alive):
                total[i, ~grammar_mask(vocab, t, h.depth, L)] = -np.inf
        flat = total.ravel()
        cand = np.argsort(-flat, kind="stable")[:k]
        nxt = []
        for c in cand:
            score = flat[c]
            if score == -np.inf:
                break
            i, tok = divmod(int(c), len(vocab))
            h = alive[i]
            if tok == vocab.stop_id:
                finished.append((score, order, h.tokens + [tok]))
            elif t == L:
                truncated.append((h.logp, order, list(h.tokens)))
            else:
                nxt.append(_extend(h, tok, score, states[i], vocab, track))
            order += 1
        alive = nxt
        if not alive:
            break
        if len(finished) >= k:
            kth = sorted(finished, key=lambda f: (-f[0], f[1]))[k - 1][0]
            if max(h.logp for h in alive) < kth:
                break
    ranked = sorted(finished, key=lambda f: (-f[0], f[1]))[:k]
    if len(ranked) < k:
        seen = set()
        for f in sorted(truncated, key=lambda f: (-f[0], f[1])):
            key = tuple(f[2])
            if key not in seen:
                seen.add(key)
                ranked.append(f)
            if len(ranked) == k:
                break
    progs = [vocab.decode(f[2]) for f in ranked]
    if return_scores:
        return progs, [float(f[0]) for f in ranked]
    return progs


@dataclass
class Rollout:
    tokens: list
    program: Program

    @property
    def terminated(self) -> bool:
        return self.program.terminated


def sample_rollouts(policy, target: np.ndarray, m: int, config: GrammarConfig,
                    rng: np.random.Generator) -> list[Rollout]:
    """``m`` ancestral samples without grammar masking.

    Sampling stops at stop or after ``max_length + 1`` steps; a last token
    that is not stop is dropped, leaving an unterminated rollout of
    ``max_length`` instructions.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    vocab = policy.vocab
    track = bool(policy.stack_k)
    L = config.max_length
    ctx = policy.start(target)
    hyps = [_start(policy, config) for _ in range(m)]
    live = list(range(m))
    done: dict[int, list] = {}
    for t in range(L + 1):
        sub = [hyps[i] for i in live]
        logp, states = policy.step(ctx, [h.state for h in sub], [h.tokens[-1] if h.tokens else None for h in sub],
                                   [h.stack for h in sub])
        p = np.exp(logp - logp.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        u = rng.random(len(sub))
        still = []
        for j, i in enumerate(live):
            cdf = np.cumsum(p[j])
            tok = int(min(np.searchsorted(cdf, u[j] * cdf[-1], side="right"), len(vocab) - 1))
            h = hyps[i]
            if tok == vocab.stop_id:
                done[i] = h.tokens + [tok]
            elif t == L:
                done[i] = list(h.tokens)
            else:
                hyps[i] = _extend(h, tok, 0.0, states[j], vocab, track)
                still.append(i)
        live = still
        if not live:
            break
    return [Rollout(done[i], Program(tuple(vocab[t] for t in done[i]))) for i in range(m)]


# -- visually-guided refinement ---------------------------------------------

def _param_bounds(prim: Primitive, extent: int):
    n_loc = len(prim.center)
    b = [(0.0, float(extent))] * n_loc + [(1.0, extent / 2.0)]
    if prim.kind == "cylinder":
        b.append((1.0, extent / 2.0))
    return b


def _with_params(p: Program, flat: np.ndarray) -> Program:
    out, pos = [], 0
    for ins in p.body:
        if isinstance(ins, Primitive):
            n = len(ins.params)
            out.append(Primitive(ins.kind, tuple(float(v) for v in flat[pos:pos + n]), continuous=True))
            pos += n
        else:
            out.append(ins)
    if p.terminated:
        out.append(p.instructions[-1])
    return Program(tuple(out))


def program_cd(p: Program, target_edges: np.ndarray, config: GrammarConfig) -> float:
    """Pixel Chamfer distance between a program's rendering and target
    edges; the canvas diagonal for invalid or empty renders."""
    try:
        r = render(p, config)
    except InvalidProgram:
        return config.diagonal
    return chamfer(target_edges, edge_map(r), config.diagonal).pixels


def refine(p: Program, target: np.ndarray, max_iters: int = 10, config: GrammarConfig | None = None,
           return_cd: bool = False):
    """Optimize every primitive's continuous parameters (structure and kinds
    fixed) to minimise pixel Chamfer distance to ``target``.

    One iteration is one Powell cycle over all coordinates.  Locations are
    bounded to the canvas, radii and heights to ``[1, extent/2]``.  The result
    is never worse than the input; it is the input itself when nothing
    improves.
    """
    config = config or GrammarConfig(dim=np.ndim(target))
    tedges = edge_map(target)
    start_cd = program_cd(p, tedges, config)
    if max_iters <= 0 or not p.primitives:
        return (p, start_cd) if return_cd else p
    x0 = np.array([float(v) for prim in p.primitives for v in prim.params])
    bounds = [b for prim in p.primitives for b in _param_bounds(prim, config.canvas_extent)]
    x0 = np.clip(x0, [b[0] for b in bounds], [b[1] for b in bounds])

    best = {"cd": start_cd, "x": None}

    def objective(x):
        cd = program_cd(_with_params(p, x), tedges, config)
        if cd < best["cd"]:
            best["cd"], best["x"] = cd, np.array(x)
        return cd

    optimize.minimize(objective, x0, method="Powell", bounds=bounds,
                      options={"maxiter": max_iters, "xtol": 1e-2, "ftol": 1e-4})
    if best["x"] is None:
        return (p, start_cd) if return_cd else p
    out = _with_params(p, best["x"])
    return (out, best["cd"]) if return_cd else out
