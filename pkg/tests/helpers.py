"""Shared test helpers: random parameters, samples and finite differences."""

import numpy as np

from outfitret import numgraph as ng
from outfitret.dataio import OutfitSample
from outfitret.params import HeadParams


def randomize(params: HeadParams, rng, scale=0.3) -> HeadParams:
    """Replace every array with noise so no branch is an exact identity."""
    out = {}
    for name, value in params.items():
        noise = rng.uniform(-scale, scale, size=value.shape)
        if name.endswith("_g"):
            noise = 1.0 + noise
        elif name.endswith("adapter_o.weight") or name.endswith("adapter_t.weight"):
            noise = np.eye(value.shape[0]) + noise
        out[name] = noise.astype(value.dtype)
    return HeadParams(out)


def random_samples(rng, b, dim, n_o=(1, 5), n_t=(1, 7), prefix="s"):
    samples = []
    for k in range(b):
        no = int(rng.integers(n_o[0], n_o[1] + 1))
        nt = int(rng.integers(n_t[0], n_t[1] + 1))
        samples.append(OutfitSample(
            f"{prefix}{k}", [f"{prefix}{k}_{i}" for i in range(no)],
            rng.uniform(-1, 1, (no, dim)), [f"w{j}" for j in range(nt)],
            rng.uniform(-1, 1, (nt, dim))))
    return samples


def relative_error(a, b, floor=0.0):
    """Norm-based relative error; ``floor`` keeps structurally zero gradients comparable."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def finite_difference(loss_fn, params: HeadParams, names=None, h=1e-5) -> dict:
    """Central differences of ``loss_fn(params) -> float`` for every entry."""
    grads = {}
    for name in names or list(params):
        base = params[name]
        g = np.zeros_like(base, dtype=np.float64)
        flat = base.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn(params)
            flat[i] = old - h
            down = loss_fn(params)
            flat[i] = old
            g.reshape(-1)[i] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def analytic_gradients(loss_node_fn, params: HeadParams) -> dict:
    nodes = params.leaves()
    loss = loss_node_fn(nodes)
    grads = ng.gradients(loss, nodes.values())
    return {name: grads[node] for name, node in nodes.items()}
