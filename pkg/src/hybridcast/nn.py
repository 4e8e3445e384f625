"""Layers used by the policies: dense/MLP and a fused GRU cell."""
import numpy as np

from .autodiff import ContractError, ParamStore, Tensor, linear, make, relu, _sigmoid

ACTIVATIONS = {"relu": relu, "identity": lambda t: t, None: lambda t: t}


def init_linear(store: ParamStore, name, n_in, n_out, rng, scale=None):
    scale = np.sqrt(2.0 / n_in) if scale is None else scale
    store.add(f"{name}.W", rng.normal(0.0, scale, size=(n_in, n_out)))
    store.add(f"{name}.b", np.zeros(n_out))


def init_mlp(store, name, sizes, rng, last_scale=None):
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        init_linear(store, f"{name}.{i}", a, b, rng, scale=last_scale if last else None)


def mlp(store, name, x, activations):
    """Run the dense stack ``name.0, name.1, ...`` with one activation per layer."""
    h = x
    for i, act in enumerate(activations):
        W, b = store[f"{name}.{i}.W"], store[f"{name}.{i}.b"]
        if h.shape[-1] != W.shape[0]:
            raise ContractError(f"{name}.{i}: input width {h.shape[-1]} != {W.shape[0]}")
        h = ACTIVATIONS[act](linear(h, W, b))
    return h


def init_gru(store, name, n_in, n_hidden, rng):
    k = 1.0 / np.sqrt(n_hidden)
    store.add(f"{name}.Wi", rng.uniform(-k, k, size=(n_in, 3 * n_hidden)))
    store.add(f"{name}.Wh", rng.uniform(-k, k, size=(n_hidden, 3 * n_hidden)))
    store.add(f"{name}.bi", np.zeros(3 * n_hidden))
    store.add(f"{name}.bh", np.zeros(3 * n_hidden))


def gru_cell(x, h, Wi, Wh, bi, bh):
    """One GRU update (reset/update/new gates, tanh candidate)."""
    xd, hd = x.data, h.data
    H = hd.shape[-1]
    if Wi.shape[0] != xd.shape[-1] or Wh.shape[0] != H:
        raise ContractError("gru_cell dimension mismatch")
    gi = xd @ Wi.data + bi.data
    gh = hd @ Wh.data + bh.data
    r = _sigmoid(gi[:, :H] + gh[:, :H])
    z = _sigmoid(gi[:, H : 2 * H] + gh[:, H : 2 * H])
    ghn = gh[:, 2 * H :]
    n = np.tanh(gi[:, 2 * H :] + r * ghn)
    out = (1.0 - z) * n + z * hd

    def pull(g):
        dz = g * (hd - n) * z * (1.0 - z)
        dn = g * (1.0 - z) * (1.0 - n * n)
        dr = dn * ghn * r * (1.0 - r)
        dgi = np.concatenate([dr, dz, dn], axis=1)
        dgh = np.concatenate([dr, dz, dn * r], axis=1)
        return (
            dgi @ Wi.data.T,
            g * z + dgh @ Wh.data.T,
            xd.T @ dgi,
            hd.T @ dgh,
            dgi.sum(axis=0),
            dgh.sum(axis=0),
        )

    return make(out, (x, h, Wi, Wh, bi, bh), pull, "gru_cell")


def gru(store, name, x, h):
    return gru_cell(x, h, store[f"{name}.Wi"], store[f"{name}.Wh"], store[f"{name}.bi"], store[f"{name}.bh"])


def zeros_like_store(store: ParamStore):
    out = ParamStore()
    for n, t in store.items():
        out.add(n, np.zeros_like(t.data))
    return out


def tensor(x):
    return Tensor(x)
