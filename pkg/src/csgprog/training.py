"""Supervised (teacher-forced cross-entropy) and REINFORCE training."""

from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .lang import GrammarConfig, Program, Vocabulary, canonical_order
from .metrics import DEFAULT_GAMMA, edge_map, shaped_reward
from .policy import ProgramPolicy, TorchPolicy, make_batch, prefix_stacks, token_nll
from .search import sample_rollouts

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    mode: str = "supervised"
    lr: float | None = None  # 1e-3 (Adam) for supervised, 1e-2 (SGD) for reinforce
    momentum: float = 0.9
    weight_decay: float = 0.0
    # reorder union/intersect operands of the training programs (render unchanged)
    canonical: bool = False
    batch_size: int = 32
    epochs: int = 40
    rollouts: int = 5  # M, samples per target
    gamma: float = DEFAULT_GAMMA
    baseline_decay: float = 0.9
    grad_clip: float = 5.0
    seed: int = 0
    steps: int = 200  # reinforce updates

    def __post_init__(self):
        if self.mode not in ("supervised", "reinforce"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.lr is None:
            self.lr = 1e-3 if self.mode == "supervised" else 1e-2
        if self.lr <= 0 or self.rollouts < 1 or self.gamma <= 0:
            raise ValueError("lr and gamma must be positive and rollouts >= 1")

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        """``key = value`` lines with the field names as keys."""
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"unknown training key {key!r}")
            if key == "mode":
                kw[key] = val
            elif key == "canonical":
                kw[key] = val.lower() in ("1", "true", "yes", "on")
            elif key in ("batch_size", "epochs", "rollouts", "seed", "steps"):
                kw[key] = int(val)
            else:
                kw[key] = float(val)
        return cls(**kw)


def _optimizer(model, cfg: TrainConfig):
    if cfg.mode == "supervised":
        return torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


class CSVLog:
    def __init__(self, path, header):
        self.path = Path(path) if path else None
        self.header = header
        if self.path:
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(header)

    def write(self, row: dict):
        if self.path:
            with open(self.path, "a", newline="") as f:
                csv.writer(f).writerow([row.get(h, "") for h in self.header])


def evaluate_nll(model: ProgramPolicy, rasters, programs, vocab: Vocabulary, batch_size: int = 128):
    """Mean per-token NLL and accuracy with dropout off."""
    was = model.training
    model.eval()
    tot_loss = tot_acc = tot_n = 0.0
    with torch.no_grad():
        for i in range(0, len(programs), batch_size):
            b = make_batch(rasters[i:i + batch_size], programs[i:i + batch_size], vocab, model.arch.stack_k)
            loss, acc = token_nll(model, b)
            n = b.mask.sum().item()
            tot_loss += loss.item() * n
            tot_acc += acc * n
            tot_n += n
    model.train(was)
    return tot_loss / tot_n, tot_acc / tot_n


def train_supervised(model: ProgramPolicy, train: tuple[Sequence, Sequence], vocab: Vocabulary,
                     cfg: TrainConfig, val: tuple[Sequence, Sequence] | None = None,
                     log_path=None, checkpoint_path=None, time_limit: float | None = None):
    """Teacher-forced maximum likelihood.

    ``train`` and ``val`` are ``(rasters, programs)``.  Returns the model
    restored to its best-validation weights (last weights without ``val``)
    and the per-epoch history.  Row 0 of the history is the untrained model.
    """
    from .policy import save_checkpoint

    rasters, programs = list(train[0]), list(train[1])
    if not programs:
        raise ValueError("empty training set")
    if cfg.canonical:
        programs = [canonical_order(p) for p in programs]
        if val is not None:
            val = (val[0], [canonical_order(p) for p in val[1]])
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = _optimizer(model, cfg)
    csv_log = CSVLog(log_path, ["step", "loss", "acc", "val_loss", "val_acc", "lr", "seconds"])
    history = []
    best_val, best_state = np.inf, None
    t0 = time.time()

    def record(epoch, loss, acc):
        row = {"step": epoch, "loss": loss, "acc": acc, "lr": cfg.lr, "seconds": time.time() - t0}
        if val is not None:
            row["val_loss"], row["val_acc"] = evaluate_nll(model, val[0], val[1], vocab)
        history.append(row)
        csv_log.write(row)
        return row

    loss0, acc0 = evaluate_nll(model, rasters, programs, vocab)
    record(0, loss0, acc0)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(len(programs))
        tot, tot_acc, tot_n = 0.0, 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            b = make_batch([rasters[j] for j in idx], [programs[j] for j in idx], vocab, model.arch.stack_k)
            loss, acc = token_nll(model, b)
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            n = b.mask.sum().item()
            tot += loss.item() * n
            tot_acc += acc * n
            tot_n += n
        row = record(epoch, tot / tot_n, tot_acc / tot_n)
        log.info("epoch %d loss %.4f acc %.3f val %s", epoch, row["loss"], row["acc"], row.get("val_loss"))
        if val is not None and row["val_loss"] < best_val:
            best_val = row["val_loss"]
            best_state = copy.deepcopy(model.state_dict())
            if checkpoint_path:
                save_checkpoint(checkpoint_path, model, vocab)
        if time_limit is not None and time.time() - t0 > time_limit:
            log.warning("time limit reached after epoch %d", epoch)
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    elif checkpoint_path:
        save_checkpoint(checkpoint_path, model, vocab)
    model.eval()
    return model, history


# -- REINFORCE ---------------------------------------------------------------

@dataclass
class BaselineState:
    value: float = 0.0
    decay: float = 0.9

    def updated(self, mean_reward: float) -> "BaselineState":
        return BaselineState(self.decay * self.value + (1 - self.decay) * mean_reward, self.decay)


def reinforce_loss(seq_logp: torch.Tensor, rewards, baseline: float = 0.0) -> torch.Tensor:
    """Surrogate whose gradient is minus the Monte-Carlo policy gradient
    ``mean_m (R_m - b) * grad sum_t log pi(a_t^m)``."""
    adv = torch.as_tensor(np.asarray(rewards, dtype=np.float64) - baseline, dtype=seq_logp.dtype)
    return -(adv * seq_logp).mean()


def sequence_logp(model: ProgramPolicy, targets: Sequence[np.ndarray], token_lists: Sequence[list],
                  vocab: Vocabulary) -> torch.Tensor:
    """Sum of log-probabilities of each token sequence under teacher forcing,
    with stack maps replayed from the sequence's own prefix."""
    T = max(len(t) for t in token_lists)
    tokens = torch.full((len(token_lists), T), -1, dtype=torch.long)
    for i, seq in enumerate(token_lists):
        tokens[i, :len(seq)] = torch.tensor(seq, dtype=torch.long)
    stacks = None
    if model.arch.stack_k:
        progs = [Program(tuple(vocab[t] for t in seq)) for seq in token_lists]
        stacks = torch.from_numpy(np.stack([prefix_stacks(p, vocab.config, model.arch.stack_k, T) for p in progs]))
    tgt = torch.from_numpy(np.stack([np.asarray(t, dtype=bool) for t in targets]))
    logits = model(tgt, tokens, stacks)
    logp = F.log_softmax(logits, -1).gather(-1, tokens.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    return (logp * (tokens >= 0)).sum(1)


def rollout_reward(rollout, target_edges, target, gamma: float, config: GrammarConfig) -> float:
    """Shaped reward; unterminated rollouts score zero."""
    if not rollout.terminated:
        return 0.0
    return shaped_reward(rollout.program, target, gamma, config, target_edges=target_edges)


def reinforce_step(model: ProgramPolicy, targets: Sequence[np.ndarray], vocab: Vocabulary, cfg: TrainConfig,
                   baseline: BaselineState, rng: np.random.Generator, optimizer=None,
                   target_edges: Sequence[np.ndarray] | None = None):
    """Sample ``cfg.rollouts`` unmasked programs per target, score them and
    accumulate the baselined policy gradient into ``.grad``.

    Dropout is off while sampling and while recomputing log-probabilities, so
    the gradient is that of the sampling distribution.  The step is applied
    when ``optimizer`` is given.  Returns ``(grads, mean_reward, baseline)``;
    the baseline used for this step is the one passed in.
    """
    config = vocab.config
    model.eval()
    policy = TorchPolicy(model, vocab)
    if target_edges is None:
        target_edges = [edge_map(t) for t in targets]
    seqs, rewards, tgts = [], [], []
    for t, te in zip(targets, target_edges):
        for r in sample_rollouts(policy, t, cfg.rollouts, config, rng):
            seqs.append(r.tokens)
            rewards.append(rollout_reward(r, te, t, cfg.gamma, config))
            tgts.append(t)
    model.zero_grad()
    nonempty = [i for i, s in enumerate(seqs) if s]
    if nonempty:
        lp = sequence_logp(model, [tgts[i] for i in nonempty], [seqs[i] for i in nonempty], vocab)
        # rollouts with no tokens contribute zero gradient but count in the mean
        loss = reinforce_loss(lp, [rewards[i] for i in nonempty], baseline.value) * len(nonempty) / len(seqs)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    grads = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
             for n, p in model.named_parameters()}
    if optimizer is not None:
        optimizer.step()
    mean_r = float(np.mean(rewards))
    return grads, mean_r, baseline.updated(mean_r)


def train_reinforce(model: ProgramPolicy, targets: Sequence[np.ndarray], vocab: Vocabulary, cfg: TrainConfig,
                    log_path=None, checkpoint_path=None, baseline: BaselineState | None = None):
    """Policy-gradient fine-tuning on unlabeled targets.  Batches of
    ``cfg.batch_size`` targets are drawn without replacement, reshuffled
    each pass.  Returns the model and the per-step history."""
    from .policy import save_checkpoint

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = _optimizer(model, cfg)
    baseline = baseline or BaselineState(0.0, cfg.baseline_decay)
    edges = [edge_map(t) for t in targets]
    csv_log = CSVLog(log_path, ["step", "reward", "baseline", "lr"])
    history = []
    order = rng.permutation(len(targets))
    pos = 0
    for step in range(1, cfg.steps + 1):
        if pos + cfg.batch_size > len(order):
            order, pos = rng.permutation(len(targets)), 0
        idx = order[pos:pos + cfg.batch_size]
        pos += cfg.batch_size
        _, mean_r, baseline = reinforce_step(model, [targets[i] for i in idx], vocab, cfg, baseline, rng, opt,
                                             [edges[i] for i in idx])
        row = {"step": step, "reward": mean_r, "baseline": baseline.value, "lr": cfg.lr}
        history.append(row)
        csv_log.write(row)
        if step % 10 == 0:
            log.info("rl step %d reward %.4f baseline %.4f", step, mean_r, baseline.value)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, vocab)
    model.eval()
    return model, history
