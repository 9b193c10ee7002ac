"""Honest-client computation: analytic forward/backward and FedAVG.

The sparse path (COO FC1) only touches conv channels and FC1 columns that
carry data for this client; every skipped quantity is an exact zero, so both
paths return the same gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .data import ImageBatch
from .errors import ShapeMismatch
from .model import MaliciousModel, param_shapes
from .tensors import SparseMatrixCOO


@dataclass
class ForwardTrace:
    conv_out: np.ndarray | None
    fc1_input: np.ndarray          # B x fc1_in (only active columns populated when sparse)
    fc1_preact: np.ndarray
    fc1_act: np.ndarray
    fc2_out: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    loss: float
    patches: np.ndarray | None = None   # im2col of the padded input, reused by backward


@dataclass
class ClientUpdate:
    """Batch-averaged gradients keyed by tensor name (FC1 may be COO)."""

    grads: dict
    client_index: int
    batch_size: int

    @property
    def representation(self) -> dict:
        return {k: ("coo" if isinstance(v, SparseMatrixCOO) else "dense") for k, v in self.grads.items()}

    def dense(self, name) -> np.ndarray:
        g = self.grads[name]
        return g.to_dense() if isinstance(g, SparseMatrixCOO) else g

    def nnz(self) -> int:
        return sum(g.nnz if isinstance(g, SparseMatrixCOO) else int(np.count_nonzero(g))
                   for g in self.grads.values())

    def to_vector(self, cfg) -> np.ndarray:
        """Flatten to one dense float64 vector in canonical parameter order."""
        shapes = param_shapes(cfg)
        out = np.zeros(sum(int(np.prod(s)) for _, s in shapes))
        off = 0
        for name, shape in shapes:
            n = int(np.prod(shape))
            g = self.grads[name]
            if isinstance(g, SparseMatrixCOO):
                out[off + g.linear_index()] = g.values
            else:
                out[off:off + n] = np.asarray(g).reshape(-1)
            off += n
        return out


def _check(model: MaliciousModel, batch: ImageBatch):
    cfg = model.cfg
    want = (cfg.channels, cfg.height, cfg.width)
    if tuple(batch.image_shape) != want:
        raise ShapeMismatch(f"batch images are {tuple(batch.image_shape)}, model expects {want}")


def _patches(x: np.ndarray, k: int) -> np.ndarray:
    """Batched im2col: (B, C*k*k, H*W) for stride 1 and 'same' padding."""
    p = k // 2
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))      # B, C, H, W, k, k
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(B, C * k * k, H * W)


def _conv_forward(model: MaliciousModel, x: np.ndarray, channels):
    """Conv outputs for ``channels`` as (B, len(channels), H*W), plus the patches."""
    cols = _patches(x, model.cfg.kernel_size)
    K = model.conv_kernels[channels].reshape(len(channels), -1)
    out = np.matmul(K, cols)
    out += model.conv_biases[channels, None]
    return out, cols


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(model: MaliciousModel, batch: ImageBatch) -> ForwardTrace:
    _check(model, batch)
    cfg = model.cfg
    x = batch.images
    B = len(batch)
    conv_out = patches = None
    if model.has_conv:
        nc = cfg.num_clients * cfg.channels
        hw = cfg.height * cfg.width
        ch = model.active_channels if model.sparse else np.arange(nc)
        if ch.size == nc:
            out, patches = _conv_forward(model, x, ch)
            conv_out = out.reshape(B, nc, cfg.height, cfg.width)
        else:
            conv_out = np.zeros((B, nc, cfg.height, cfg.width))
            if ch.size:
                out, patches = _conv_forward(model, x, ch)
                conv_out.reshape(B, nc, hw)[:, ch] = out
        fc1_in = conv_out.reshape(B, -1)
    else:
        fc1_in = x.reshape(B, -1)

    if model.sparse and model.fc1_dense_block is not None:
        rows, sel, Wb = model.fc1_dense_block
        pre = np.tile(model.fc1_biases, (B, 1))
        pre[:, rows] += fc1_in[:, sel] @ Wb.T
    elif model.sparse:
        W1 = model.fc1_weights
        xt = np.ascontiguousarray(fc1_in[:, model.fc1_active_cols].T)
        pre = kernels.coo_matmul_t(W1.row_idx, model.fc1_local_cols, W1.values, xt, W1.rows).T
        pre = pre + model.fc1_biases
    else:
        pre = fc1_in @ model.fc1_weights.T + model.fc1_biases
    act = np.maximum(pre, 0.0)
    fc2 = act @ model.fc2_weights.T + model.fc2_biases
    logits = fc2 @ model.stub_weights.T
    probs = _softmax(logits)
    nll = -np.log(np.maximum(probs[np.arange(B), batch.labels], np.finfo(float).tiny))
    return ForwardTrace(conv_out, fc1_in, pre, act, fc2, logits, probs, float(nll.mean()), patches)


def loss(model: MaliciousModel, batch: ImageBatch) -> float:
    return forward(model, batch).loss


def backward(model: MaliciousModel, batch: ImageBatch, trace: ForwardTrace | None = None) -> ClientUpdate:
    """Analytic gradients of the batch-mean cross-entropy for every tensor."""
    if trace is None:
        trace = forward(model, batch)
    cfg = model.cfg
    B = len(batch)
    dlog = trace.probs.copy()
    dlog[np.arange(B), batch.labels] -= 1.0
    dlog /= B
    g = {}
    g["stub_weights"] = dlog.T @ trace.fc2_out
    dfc2 = dlog @ model.stub_weights
    g["fc2_weights"] = dfc2.T @ trace.fc1_act
    g["fc2_biases"] = dfc2.sum(axis=0)
    dpre = (dfc2 @ model.fc2_weights) * (trace.fc1_preact > 0)
    g["fc1_biases"] = dpre.sum(axis=0)

    if model.sparse:
        W1 = model.fc1_weights
        if model.fc1_dense_block is not None:
            rows, sel, _ = model.fc1_dense_block
            live = np.any(dpre[:, rows] != 0, axis=0)           # ReLU-gated rows are all zero
            vals = (dpre[:, rows[live]].T @ trace.fc1_input[:, sel]).reshape(-1)
            if live.all():
                ri, ci = W1.row_idx, W1.col_idx
            else:
                shape = (rows.size, -1)
                ri = W1.row_idx.reshape(shape)[live].reshape(-1)
                ci = W1.col_idx.reshape(shape)[live].reshape(-1)
        else:
            xt = np.ascontiguousarray(trace.fc1_input[:, model.fc1_active_cols].T)
            dt = np.ascontiguousarray(dpre.T)
            vals = kernels.coo_sddmm_t(W1.row_idx, model.fc1_local_cols, dt, xt)
            ri, ci = W1.row_idx, W1.col_idx
        # stored entries stay canonical: exact zeros are dropped
        keep = vals != 0
        if not keep.all():
            ri, ci, vals = ri[keep], ci[keep], vals[keep]
        g["fc1_weights"] = SparseMatrixCOO(W1.shape, ri, ci, vals, check=False)
    else:
        g["fc1_weights"] = dpre.T @ trace.fc1_input

    if model.has_conv:
        nc = cfg.num_clients * cfg.channels
        kshape = model.conv_kernels.shape
        if model.frozen_conv:
            g["conv_kernels"] = np.zeros(kshape)
            g["conv_biases"] = np.zeros(nc)
        else:
            ch = model.active_channels if model.sparse else np.arange(nc)
            dk = np.zeros(kshape)
            db = np.zeros(nc)
            if ch.size:
                dconv = _fc1_input_grad(model, dpre, ch).reshape(B, len(ch), -1)
                patches = trace.patches
                if patches is None:
                    patches = _patches(batch.images, cfg.kernel_size)
                dk[ch] = np.matmul(dconv, patches.transpose(0, 2, 1)).sum(axis=0).reshape(
                    (len(ch),) + kshape[1:])
                db[ch] = dconv.sum(axis=(0, 2))
            g["conv_kernels"] = dk
            g["conv_biases"] = db
    return ClientUpdate(g, model.client_index, B)


def _fc1_input_grad(model: MaliciousModel, dpre: np.ndarray, channels) -> np.ndarray:
    """dL/d(conv_out) restricted to ``channels``."""
    cfg = model.cfg
    B = dpre.shape[0]
    hw = cfg.height * cfg.width
    if model.sparse:
        W1 = model.fc1_weights
        if model.fc1_dense_block is not None:
            rows, _, Wb = model.fc1_dense_block
            dxa = dpre[:, rows] @ Wb
        else:
            order = model.fc1_col_order
            dt = np.ascontiguousarray(dpre.T)
            dxa = kernels.coo_matmul_t(model.fc1_local_cols[order], W1.row_idx[order],
                                       W1.values[order], dt, model.fc1_active_cols.size).T
        pos = np.searchsorted(channels, model.fc1_active_cols // hw)
        idx = pos * hw + model.fc1_active_cols % hw
        if idx.size == len(channels) * hw and np.array_equal(idx, np.arange(idx.size)):
            dx = dxa
        else:
            dx = np.zeros((B, len(channels) * hw))
            dx[:, idx] = dxa
    elif len(channels) * hw == model.fc1_weights.shape[1]:
        dx = dpre @ model.fc1_weights
    else:
        cols = (channels[:, None] * hw + np.arange(hw)).reshape(-1)
        dx = dpre @ model.fc1_weights[:, cols]
    return dx.reshape(B, len(channels), cfg.height, cfg.width)


def fedavg_update(model: MaliciousModel, batch: ImageBatch, local_steps: int, lr: float) -> ClientUpdate:
    """Plain local gradient descent over ``local_steps`` mini-batches with the conv frozen.

    Returns the pseudo-gradient ``(initial - final) / lr``, accumulated as the
    sum of step gradients so one step reproduces :func:`backward` exactly.
    """
    if local_steps < 1:
        raise ValueError("local_steps must be >= 1")
    if not lr > 0:
        raise ValueError("lr must be > 0")
    _check(model, batch)
    cur = model.replace(frozen_conv=True)
    total = None
    for idx in np.array_split(np.arange(len(batch)), local_steps):
        if idx.size == 0:
            continue
        upd = backward(cur, batch[idx])
        if total is None:
            total = {k: (v.to_dense() if isinstance(v, SparseMatrixCOO) else v.copy())
                     for k, v in upd.grads.items()}
        else:
            for k, v in upd.grads.items():
                total[k] += v.to_dense() if isinstance(v, SparseMatrixCOO) else v
        cur = _step(cur, upd, lr)
    if model.sparse:
        W1 = model.fc1_weights
        vals = total["fc1_weights"][W1.row_idx, W1.col_idx]
        keep = vals != 0
        total["fc1_weights"] = SparseMatrixCOO(W1.shape, W1.row_idx[keep], W1.col_idx[keep],
                                               vals[keep], check=False)
    return ClientUpdate(total, model.client_index, len(batch))


def _step(model: MaliciousModel, upd: ClientUpdate, lr: float) -> MaliciousModel:
    new = {}
    for name, g in upd.grads.items():
        if name.startswith("conv_"):
            continue
        w = getattr(model, name)
        if isinstance(w, SparseMatrixCOO):
            gd = np.zeros(w.nnz)
            pos = np.searchsorted(w.linear_index(), g.linear_index())
            gd[pos] = g.values
            new[name] = SparseMatrixCOO(w.shape, w.row_idx, w.col_idx, w.values - lr * gd, check=False)
        else:
            new[name] = w - lr * g
    return model.replace(**new)
