import numpy as np
import pytest

from linleak.client import loss
from linleak.data import calibrate, synth_batch
from linleak.model import AttackConfig, build_binning_cutoffs
from linleak.tensors import SparseMatrixCOO


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """Two clients, B=2, 8x8 grayscale: small enough for finite differences."""
    return AttackConfig(num_clients=2, batch_size=2, channels=1, height=8, width=8, ratio=2.0)


def cutoffs_for(cfg, seed=99, n=400):
    calib = synth_batch(seed, n, cfg.channels, cfg.height, cfg.width)
    return build_binning_cutoffs(calibrate(calib), cfg.units)


def batches_for(cfg, seed=0):
    return [synth_batch([seed, m], cfg.batch_size, cfg.channels, cfg.height, cfg.width)
            for m in range(cfg.num_clients)]


def dense_params(model):
    out = {}
    for name in model.param_names():
        t = getattr(model, name)
        out[name] = t.to_dense() if isinstance(t, SparseMatrixCOO) else np.array(t, dtype=float)
    return out


def finite_difference(model, batch, h=1e-5):
    """Central differences of the loss w.r.t. every stored entry of every tensor.

    Dense tensors are perturbed entrywise; COO tensors only on their stored
    pattern (the result is returned in dense layout, zero off-pattern).
    """
    grads = {}
    for name in model.param_names():
        t = getattr(model, name)
        if isinstance(t, SparseMatrixCOO):
            g = np.zeros(t.values.shape)
            for k in range(t.nnz):
                vals = []
                for sgn in (1, -1):
                    v = t.values.copy()
                    v[k] += sgn * h
                    pert = SparseMatrixCOO(t.shape, t.row_idx, t.col_idx, v, check=False)
                    vals.append(loss(model.replace(**{name: pert}), batch))
                g[k] = (vals[0] - vals[1]) / (2 * h)
            grads[name] = SparseMatrixCOO(t.shape, t.row_idx, t.col_idx, g, check=False).to_dense()
            continue
        arr = np.array(t, dtype=float)
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            vals = []
            for sgn in (1, -1):
                a = arr.copy()
                a[idx] += sgn * h
                vals.append(loss(model.replace(**{name: a}), batch))
            g[idx] = (vals[0] - vals[1]) / (2 * h)
        grads[name] = g
    return grads


def max_rel_err(a, n):
    scale = np.maximum(np.abs(a), np.abs(n))
    big = scale > 1e-6
    rel = np.abs(a - n)[big] / scale[big]
    return max(rel.max() if rel.size else 0.0, np.abs(a - n)[~big].max(initial=0.0) * 1e-3)
