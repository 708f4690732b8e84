"""Sequence policies over the instruction vocabulary.

``ProgramPolicy`` is a convolutional encoder feeding a GRU decoder.  With
``stack_k > 0`` the encoder input at step ``t`` is the target concatenated with
the top ``stack_k`` maps of the execution stack after the first ``t`` tokens,
so the encoder runs once per step instead of once per shape.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .lang import GrammarConfig, Primitive, Program, Vocabulary
from .render import ExecStack, stack_observation


@dataclass(frozen=True)
class ArchConfig:
    stack_k: int = 0
    conv_channels: tuple[int, ...] = (8, 16, 32)
    code_width: int = 128
    hidden: int = 128
    fc_width: int = 128
    embed_width: int = 32
    dropout: float = 0.2
    # two extra input channels holding the normalised cell coordinates
    coord_channels: bool = True
    # integer factor the input is max-pooled by before the first conv (3D runs use 2)
    downsample: int = 1
    # add per-factor scores (kind, x, y, r, ...) to every primitive's logit;
    # the output is still one softmax over the whole vocabulary
    factored_logits: bool = True
    dim: int = 2
    canvas_extent: int = 64

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ArchConfig":
        d = json.loads(text)
        d["conv_channels"] = tuple(d["conv_channels"])
        return cls(**d)


@dataclass
class DecoderState:
    hidden: torch.Tensor
    step: int = 0


def _factor_table(vocab: Vocabulary):
    """(n_primitives, n_factors) indices into the concatenated factor scores,
    and the size of each factor."""
    cfg = vocab.config
    prims = [e for e in vocab.entries if isinstance(e, Primitive)]
    names = ["x", "y", "z"][:cfg.dim]
    factors = [("kind",)] + [(n,) for n in names] + [("r",), ("x", "y"), ("kind", "r")]
    if cfg.dim == 3:
        factors.append(("h",))

    def field(p, name):
        if name == "kind":
            return p.kind
        if name in ("x", "y", "z"):
            return p.center[names.index(name)]
        return p.radius if name == "r" else p.height

    cols, sizes, offset = [], [], 0
    for f in factors:
        values = sorted({tuple(field(p, n) for n in f) for p in prims}, key=repr)
        pos = {v: i for i, v in enumerate(values)}
        cols.append([offset + pos[tuple(field(p, n) for n in f)] for p in prims])
        sizes.append(len(values))
        offset += len(values)
    return torch.tensor(cols, dtype=torch.long).T.contiguous(), sizes


class ProgramPolicy(nn.Module):
    def __init__(self, arch: ArchConfig, vocab: Vocabulary):
        super().__init__()
        self.arch = arch
        vocab_size = len(vocab)
        self.vocab_size = vocab_size
        self.start_token = vocab_size  # sentinel outside the vocabulary
        conv = nn.Conv2d if arch.dim == 2 else nn.Conv3d
        in_ch = 1 + arch.stack_k + (arch.dim if arch.coord_channels else 0)
        layers = []
        for ch in arch.conv_channels:
            layers += [conv(in_ch, ch, 3, stride=2, padding=1), nn.ReLU()]
            in_ch = ch
        self.convs = nn.Sequential(*layers)
        side = arch.canvas_extent // arch.downsample
        for _ in arch.conv_channels:
            side = (side + 1) // 2
        self.code = nn.Linear(in_ch * side ** arch.dim, arch.code_width)
        self.embed = nn.Embedding(vocab_size + 1, arch.embed_width)
        self.gru = nn.GRUCell(arch.code_width + arch.embed_width, arch.hidden)
        self.fc1 = nn.Linear(arch.hidden, arch.fc_width)
        self.fc2 = nn.Linear(arch.fc_width, arch.fc_width)
        self.classify = nn.Linear(arch.fc_width, vocab_size)
        self.drop = nn.Dropout(arch.dropout)
        self._coords = None
        self.n_primitives = vocab.n_primitives
        if arch.factored_logits and vocab.n_primitives:
            table, sizes = _factor_table(vocab)
            self.register_buffer("factor_index", table, persistent=False)
            self.factor_scores = nn.Linear(arch.fc_width, sum(sizes))

    def _coord_grid(self, like: torch.Tensor) -> torch.Tensor:
        spatial = like.shape[2:]
        if self._coords is None or self._coords.shape[1:] != spatial or self._coords.dtype != like.dtype:
            axes = [torch.linspace(-1, 1, n, dtype=like.dtype) for n in spatial]
            self._coords = torch.stack(torch.meshgrid(*axes, indexing="ij"))
        return self._coords.expand(like.shape[0], *self._coords.shape)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """``x``: (B, 1 + stack_k, *spatial) float tensor -> (B, code_width)."""
        if self.arch.downsample > 1:
            pool = F.max_pool2d if self.arch.dim == 2 else F.max_pool3d
            x = pool(x, self.arch.downsample)
        if self.arch.coord_channels:
            x = torch.cat([x, self._coord_grid(x)], dim=1)
        h = self.convs(x).flatten(1)
        return F.relu(self.code(self.drop(h)))

    def decode_step(self, code: torch.Tensor, prev: torch.Tensor, h: torch.Tensor):
        """One decoder step; returns (logits, new hidden)."""
        inp = torch.cat([self.drop(code), self.embed(prev)], dim=1)
        h = self.gru(inp, h)
        z = F.relu(self.fc1(self.drop(h)))
        z = F.relu(self.fc2(self.drop(z)))
        logits = self.classify(z)
        if self.arch.factored_logits and self.n_primitives:
            extra = self.factor_scores(z)[:, self.factor_index].sum(-1)
            logits = torch.cat([logits[:, :self.n_primitives] + extra, logits[:, self.n_primitives:]], 1)
        return logits, h

    def init_hidden(self, batch: int) -> torch.Tensor:
        p = self.classify.weight
        return torch.zeros(batch, self.arch.hidden, dtype=p.dtype, device=p.device)

    def forward(self, targets: torch.Tensor, tokens: torch.Tensor, stacks: torch.Tensor | None = None):
        """Teacher-forced logits.

        targets: (B, *spatial); tokens: (B, T) ids (any padding value is fine,
        only positions < T are read); stacks: (B, T, K, *spatial) stack maps
        seen before emitting each token (required iff stack_k > 0).
        Returns logits (B, T, V).
        """
        B, T = tokens.shape
        dtype = self.classify.weight.dtype
        tgt = targets.to(dtype).unsqueeze(1)
        if self.arch.stack_k:
            x = torch.cat([tgt.unsqueeze(1).expand(B, T, *tgt.shape[1:]), stacks.to(dtype)], dim=2)
            codes = self.encode(x.flatten(0, 1)).view(B, T, -1)
        else:
            codes = self.encode(tgt).unsqueeze(1).expand(B, T, -1)
        prev = torch.cat([torch.full((B, 1), self.start_token, dtype=torch.long), tokens[:, :-1].clamp(min=0)], 1)
        h = self.init_hidden(B)
        out = []
        for t in range(T):
            logits, h = self.decode_step(codes[:, t], prev[:, t], h)
            out.append(logits)
        return torch.stack(out, 1)


def init_policy(arch: ArchConfig, vocab: Vocabulary, seed: int = 0) -> ProgramPolicy:
    """Seeded initialization.  The classification layer starts near zero so
    the untrained policy is close to uniform over the vocabulary."""
    if len(vocab) == 0:
        raise ValueError("empty vocabulary")
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = ProgramPolicy(arch, vocab)
        heads = [model.classify] + ([model.factor_scores] if hasattr(model, "factor_scores") else [])
        for head in heads:
            nn.init.normal_(head.weight, std=1e-3)
            nn.init.zeros_(head.bias)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def arch_for(config: GrammarConfig, stack_k: int = 0, **kw) -> ArchConfig:
    kw.setdefault("downsample", 1 if config.dim == 2 else 2)
    return ArchConfig(stack_k=stack_k, dim=config.dim, canvas_extent=config.canvas_extent, **kw)


# -- teacher-forcing batches -------------------------------------------------

def prefix_stacks(program: Program, config: GrammarConfig, k: int, length: int | None = None) -> np.ndarray:
    """Stack maps seen before each token of ``program`` (including its stop):
    entry ``t`` is the top-``k`` view after executing the first ``t`` tokens.
    Invalid ops leave the stack unchanged."""
    ins = list(program.instructions)
    n = len(ins) if length is None else length
    out = np.zeros((n, k) + config.shape, dtype=bool)
    stack = ExecStack(config)
    for t in range(n):
        out[t] = stack_observation(stack, k)
        if t < len(ins):
            stack.push(ins[t])
    return out


@dataclass
class Batch:
    targets: torch.Tensor
    tokens: torch.Tensor  # (B, T), -1 padded
    stacks: torch.Tensor | None

    @property
    def mask(self) -> torch.Tensor:
        return self.tokens >= 0


def make_batch(targets: Sequence[np.ndarray], programs: Sequence[Program], vocab: Vocabulary,
               stack_k: int = 0) -> Batch:
    """Tokenize programs (appending stop) and build stack maps from the
    ground-truth prefixes."""
    config = vocab.config
    seqs = [vocab.encode(p.with_stop()) for p in programs]
    T = max(len(s) for s in seqs)
    tokens = torch.full((len(seqs), T), -1, dtype=torch.long)
    for i, s in enumerate(seqs):
        tokens[i, :len(s)] = torch.tensor(s)
    stacks = None
    if stack_k:
        stacks = torch.from_numpy(np.stack([prefix_stacks(p.with_stop(), config, stack_k, T) for p in programs]))
    tgt = torch.from_numpy(np.stack([np.asarray(t, dtype=bool) for t in targets]))
    return Batch(tgt, tokens, stacks)


def token_nll(model: ProgramPolicy, batch: Batch):
    """Per-token negative log-likelihood (masked mean) and token accuracy."""
    logits = model(batch.targets, batch.tokens, batch.stacks)
    mask = batch.mask
    logp = F.log_softmax(logits, -1)
    tok = batch.tokens.clamp(min=0)
    nll = -logp.gather(-1, tok.unsqueeze(-1)).squeeze(-1)
    loss = (nll * mask).sum() / mask.sum()
    acc = ((logits.argmax(-1) == tok) & mask).sum().item() / mask.sum().item()
    return loss, acc


def supervised_grads(model: ProgramPolicy, batch: Batch):
    """Mean per-token cross-entropy and its gradient for every parameter."""
    model.zero_grad()
    loss, _ = token_nll(model, batch)
    loss.backward()
    return loss.item(), {n: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
                         for n, p in model.named_parameters()}


# -- step-wise interface used by the decoders --------------------------------

@dataclass
class Observation:
    target: np.ndarray
    stack_channels: np.ndarray  # (K, *shape); K may be 0

    @property
    def k(self) -> int:
        return len(self.stack_channels)


def policy_step(model: ProgramPolicy, obs: Observation, state: DecoderState | None, prev_token: int | None):
    """Distribution over the vocabulary for the next token.

    ``prev_token`` None (or ``state`` None) means the first step.  Returns
    ``(probs, new_state)``; deterministic (dropout off) for a model in eval
    mode.
    """
    dtype = model.classify.weight.dtype
    with torch.no_grad():
        parts = [np.asarray(obs.target, dtype=bool)[None]]
        if model.arch.stack_k:
            parts.append(np.asarray(obs.stack_channels, dtype=bool))
        x = torch.from_numpy(np.concatenate(parts)).to(dtype).unsqueeze(0)
        code = model.encode(x)
        if state is None:
            state = DecoderState(model.init_hidden(1), 0)
        prev = torch.tensor([model.start_token if prev_token is None else prev_token])
        logits, h = model.decode_step(code, prev, state.hidden)
        probs = torch.softmax(logits.double(), -1)[0].numpy()
    return probs, DecoderState(h, state.step + 1)


class TorchPolicy:
    """Adapter exposing a ``ProgramPolicy`` to the search routines.

    The search protocol is ``start(target) -> ctx`` followed by repeated
    ``step(ctx, states, prev_tokens, stacks) -> (log_probs[n, V], states)``.
    """

    def __init__(self, model: ProgramPolicy, vocab: Vocabulary):
        self.model = model.eval()
        self.vocab = vocab
        self.stack_k = model.arch.stack_k

    def start(self, target: np.ndarray):
        dtype = self.model.classify.weight.dtype
        tgt = torch.from_numpy(np.asarray(target, dtype=bool)).to(dtype)[None]
        ctx = {"target": tgt, "code": None}
        if not self.stack_k:
            with torch.no_grad():
                ctx["code"] = self.model.encode(tgt[None])
        return ctx

    def step(self, ctx, states, prev_tokens, stacks):
        m = self.model
        n = len(prev_tokens)
        with torch.no_grad():
            if self.stack_k:
                maps = np.stack([stack_observation(s, self.stack_k) for s in stacks])
                tgt = ctx["target"].expand(n, *ctx["target"].shape[1:])
                x = torch.cat([tgt.unsqueeze(1), torch.from_numpy(maps).to(tgt.dtype)], dim=1)
                code = m.encode(x)
            else:
                code = ctx["code"].expand(n, -1)
            h = torch.stack([s if s is not None else m.init_hidden(1)[0] for s in states])
            prev = torch.tensor([m.start_token if t is None else t for t in prev_tokens])
            logits, h = m.decode_step(code, prev, h)
            logp = torch.log_softmax(logits.double(), -1).numpy()
        return logp, list(h)


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"CSGPOL\x00\x01"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: ProgramPolicy, vocab: Vocabulary) -> None:
    """Layout: magic(8) | u32 version | u32 arch-json length | arch json |
    32-byte vocabulary sha256 | u64 parameter count | float32 LE parameters
    (``state_dict`` order)."""
    arch = model.arch.to_json().encode()
    flat = torch.cat([p.detach().reshape(-1).float() for p in model.state_dict().values()]).numpy()
    blob = b"".join([
        CKPT_MAGIC,
        struct.pack("<II", CKPT_VERSION, len(arch)),
        arch,
        bytes.fromhex(vocab.hash()),
        struct.pack("<Q", flat.size),
        flat.astype("<f4").tobytes(),
    ])
    Path(path).write_bytes(blob)


def load_checkpoint(path, vocab: Vocabulary) -> ProgramPolicy:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError("not a policy checkpoint")
    version, alen = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 16
    arch = ArchConfig.from_json(data[off:off + alen].decode())
    off += alen
    vhash = data[off:off + 32].hex()
    off += 32
    if vhash != vocab.hash():
        raise CheckpointError("checkpoint was trained against a different vocabulary")
    (n,) = struct.unpack_from("<Q", data, off)
    off += 8
    flat = np.frombuffer(data, "<f4", n, off)
    model = ProgramPolicy(arch, vocab)
    state = model.state_dict()
    if sum(v.numel() for v in state.values()) != n:
        raise CheckpointError("parameter count does not match the architecture")
    pos = 0
    for key, v in state.items():
        state[key] = torch.from_numpy(flat[pos:pos + v.numel()].copy()).view_as(v).to(v.dtype)
        pos += v.numel()
    model.load_state_dict(state)
    return model.eval()
