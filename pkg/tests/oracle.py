"""Independent reference implementations used by the tests.

Nothing here touches the stack executor or the distance-transform code.
"""

import itertools

import numpy as np

from csgprog.lang import BoolOp, Primitive


def _doubled_centers(n, dim):
    # cell centers times two: odd integers, so every predicate is exact integer math
    c = 2 * np.arange(n, dtype=np.int64) + 1
    if dim == 2:
        return c[None, :], c[:, None]  # X (cols), Y (rows)
    return c[None, :, None], c[:, None, None], c[None, None, :]


def membership(prim: Primitive, n=64):
    """Analytic membership at cell centers for grid (integer) primitives."""
    p = [int(v) for v in prim.params]
    k = prim.kind
    if k in ("circle", "square", "triangle"):
        X, Y = _doubled_centers(n, 2)
        cx, cy, r = (2 * v for v in p)
        dx, dy = X - cx, Y - cy
        if k == "circle":
            return dx ** 2 + dy ** 2 <= r ** 2
        if k == "square":
            return (2 * dx ** 2 <= r ** 2) & (2 * dy ** 2 <= r ** 2)
        apex = Y - (cy - r)
        return (apex >= 0) & (apex ** 2 >= 3 * dx ** 2) & (2 * dy <= r)
    X, Y, Z = _doubled_centers(n, 3)
    cx, cy, cz, r = (2 * v for v in p[:4])
    dx, dy, dz = X - cx, Y - cy, Z - cz
    if k == "sphere":
        return dx ** 2 + dy ** 2 + dz ** 2 <= r ** 2
    if k == "cube":
        return (4 * dx ** 2 <= r ** 2) & (4 * dy ** 2 <= r ** 2) & (4 * dz ** 2 <= r ** 2)
    h = 2 * p[4]
    return (dx ** 2 + dy ** 2 <= r ** 2) & (4 * dz ** 2 <= h ** 2)


def to_tree(program):
    """Postfix -> nested tuples ('op', left, right) / Primitive."""
    nodes = []
    for ins in program.body:
        if isinstance(ins, BoolOp):
            a = nodes.pop()
            b = nodes.pop()
            nodes.append((ins.kind, b, a))
        else:
            nodes.append(ins)
    assert len(nodes) == 1
    return nodes[0]


def evaluate_tree(node, n=64, dim=2):
    if isinstance(node, Primitive):
        m = membership(node, n)
        return np.broadcast_to(m, (n,) * dim)
    op, left, right = node
    b, a = evaluate_tree(left, n, dim), evaluate_tree(right, n, dim)
    if op == "union":
        return np.logical_or(b, a)
    if op == "intersect":
        return np.logical_and(b, a)
    return np.logical_and(b, np.logical_not(a))


def oracle_render(program, n=64, dim=2):
    return np.array(evaluate_tree(to_tree(program), n, dim), dtype=bool)


def brute_edges(r):
    """Edge cells by explicit neighbour scan."""
    out = np.zeros_like(r, dtype=bool)
    for idx in itertools.product(*(range(s) for s in r.shape)):
        if not r[idx]:
            continue
        for ax in range(r.ndim):
            for d in (-1, 1):
                j = list(idx)
                j[ax] += d
                if j[ax] < 0 or j[ax] >= r.shape[ax] or not r[tuple(j)]:
                    out[idx] = True
    return out


def brute_distance(edges):
    """Distance from every cell to the nearest edge cell, by exhaustive search."""
    pts = np.argwhere(edges).astype(float)
    grid = np.indices(edges.shape).reshape(edges.ndim, -1).T.astype(float)
    if len(pts) == 0:
        return np.full(edges.shape, np.inf)
    d2 = ((grid[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    return np.sqrt(d2.min(1)).reshape(edges.shape)


def brute_chamfer_pixels(x_edges, y_edges):
    xs = np.argwhere(x_edges).astype(float)
    ys = np.argwhere(y_edges).astype(float)
    d = np.sqrt(((xs[:, None, :] - ys[None, :, :]) ** 2).sum(-1))
    return 0.5 * d.min(1).mean() + 0.5 * d.min(0).mean()


def finite_difference_errors(model, batch, n_coords, rng, eps=1e-4):
    """Relative error between autograd and central differences on randomly
    drawn parameter coordinates (drawn proportionally to tensor size), in
    float64 with dropout off.  The denominator is floored at 1e-6."""
    import torch

    from csgprog.policy import supervised_grads, token_nll

    model = model.double().eval()
    _, grads = supervised_grads(model, batch)
    params = dict(model.named_parameters())
    names = [n for n, p in params.items()]
    sizes = np.array([params[n].numel() for n in names], dtype=float)
    errs = []
    for _ in range(n_coords):
        n = names[rng.choice(len(names), p=sizes / sizes.sum())]
        p = params[n]
        i = int(rng.integers(p.numel()))
        flat = p.data.view(-1)
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + eps
            up = token_nll(model, batch)[0].item()
            flat[i] = orig - eps
            down = token_nll(model, batch)[0].item()
            flat[i] = orig
        num = (up - down) / (2 * eps)
        ana = grads[n].view(-1)[i].item()
        errs.append(abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    return np.array(errs)
