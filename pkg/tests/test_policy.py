import math

import numpy as np
import pytest
import torch

from csgprog.lang import GrammarConfig, build_vocabulary, parse_program
from csgprog.policy import (ArchConfig, CheckpointError, Observation, TorchPolicy, arch_for, init_policy,
                            load_checkpoint, make_batch, policy_step, prefix_stacks, save_checkpoint,
                            token_nll)
from csgprog.render import ExecStack, render, stack_observation
from oracle import finite_difference_errors

SMALL_ARCH = dict(conv_channels=(4, 4, 4), code_width=16, hidden=16, fc_width=16, embed_width=8)


def batch_for(cfg, vocab, texts, k):
    progs = [parse_program(t, cfg) for t in texts]
    return make_batch([render(p, cfg) for p in progs], progs, vocab, k)


def test_init_deterministic(vocab, cfg):
    a = init_policy(arch_for(cfg, 0), vocab, seed=3)
    b = init_policy(arch_for(cfg, 0), vocab, seed=3)
    c = init_policy(arch_for(cfg, 0), vocab, seed=4)
    for (n, p), q in zip(a.state_dict().items(), b.state_dict().values()):
        assert torch.equal(p, q), n
    assert not torch.equal(a.code.weight, c.code.weight)


def test_untrained_loss_is_log_vocab(vocab, cfg, nested_program):
    model = init_policy(arch_for(cfg, 0), vocab, seed=0).eval()
    b = batch_for(cfg, vocab, [str(nested_program), "circle(8,8,8)"], 0)
    loss, _ = token_nll(model, b)
    assert abs(loss.item() - math.log(len(vocab))) < 0.01


@pytest.mark.parametrize("k", [0, 3])
def test_policy_step_normalized_and_deterministic(vocab, cfg, nested_program, k):
    model = init_policy(arch_for(cfg, k), vocab, seed=1).eval()
    t = render(nested_program, cfg)
    obs = Observation(t, np.zeros((k, 64, 64), bool))
    p1, s1 = policy_step(model, obs, None, None)
    p2, _ = policy_step(model, obs, None, None)
    assert p1.shape == (len(vocab),) and abs(p1.sum() - 1) < 1e-9 and (p1 >= 0).all()
    assert np.array_equal(p1, p2)
    p3, s3 = policy_step(model, obs, s1, 5)
    assert abs(p3.sum() - 1) < 1e-9 and s3.step == 2


@pytest.mark.parametrize("k", [0, 3])
def test_step_interface_matches_teacher_forcing(vocab, cfg, nested_program, k):
    torch.manual_seed(0)
    model = init_policy(arch_for(cfg, k, **SMALL_ARCH), vocab, seed=2).eval()
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.1 * torch.randn_like(p))
    b = batch_for(cfg, vocab, [str(nested_program)], k)
    with torch.no_grad():
        ref = torch.log_softmax(model(b.targets, b.tokens, b.stacks).double(), -1)[0].numpy()
    pol = TorchPolicy(model, vocab)
    ctx = pol.start(render(nested_program, cfg))
    stack, state, prev = ExecStack(cfg), None, None
    for t, tok in enumerate(b.tokens[0].tolist()):
        logp, states = pol.step(ctx, [state], [prev], [stack])
        assert np.allclose(logp[0], ref[t], atol=1e-5)
        state, prev = states[0], tok
        stack = stack.copy()
        stack.push(vocab[tok])


def test_prefix_stacks(cfg, nested_program):
    s = prefix_stacks(nested_program.with_stop(), cfg, 2)
    assert s.shape == (8, 2, 64, 64)
    assert not s[0].any()
    stack = ExecStack(cfg)
    for t, ins in enumerate(nested_program.instructions):
        assert np.array_equal(s[t], stack_observation(stack, 2))
        stack.push(ins)


@pytest.mark.parametrize("k", [0, 3])
def test_finite_difference_gradients(vocab, cfg, nested_program, k):
    torch.manual_seed(k)
    model = init_policy(arch_for(cfg, k, **SMALL_ARCH), vocab, seed=k)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.05 * torch.randn_like(p))
    b = batch_for(cfg, vocab, [str(nested_program), "square(24,40,12) circle(40,24,16) union"], k)
    errs = finite_difference_errors(model, b, 120, np.random.default_rng(k))
    assert errs.max() < 1e-4, errs.max()


def test_checkpoint_round_trip(tmp_path, vocab, cfg, nested_program):
    model = init_policy(arch_for(cfg, 3, **SMALL_ARCH), vocab, seed=5)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.1 * torch.randn_like(p))
    save_checkpoint(tmp_path / "m.ckpt", model, vocab)
    back = load_checkpoint(tmp_path / "m.ckpt", vocab)
    assert back.arch == model.arch
    for a, b in zip(model.state_dict().values(), back.state_dict().values()):
        assert torch.equal(a.float(), b)
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:8] == b"CSGPOL\x00\x01"


def test_checkpoint_rejects_other_vocabulary(tmp_path, vocab, cfg):
    model = init_policy(arch_for(cfg, 0, **SMALL_ARCH), vocab, seed=0)
    save_checkpoint(tmp_path / "m.ckpt", model, vocab)
    other = build_vocabulary(GrammarConfig(containment_filter=True))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.ckpt", other)
    (tmp_path / "bad.ckpt").write_bytes(b"nonsense")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt", vocab)


def test_arch_json_round_trip():
    a = ArchConfig(stack_k=2, conv_channels=(4, 8), dim=3, downsample=2)
    assert ArchConfig.from_json(a.to_json()) == a
