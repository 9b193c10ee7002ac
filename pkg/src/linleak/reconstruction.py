"""Server-side image recovery from FC1 gradients.

Three estimators:

* ``reconstruct_with_bias`` - adjacent-row differences of weight and bias gradients
  (needs per-client bias gradients).
* ``reconstruct_weight_only`` - weight gradients only: ``|row_i - row_{i+1}|`` scaled to
  a maximum of 1.  Works on an aggregate where bias gradients are mixed.
* ``reconstruct_trap`` - single-row weight/bias ratio for trap-weight layers.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import LayoutMismatch
from .model import BlockLayout, param_shapes

EXACT_EPS = 1e-9


class Status(enum.Enum):
    RECOVERED = "Recovered"
    EMPTY_BIN = "EmptyBin"
    SUSPECTED_COLLISION = "SuspectedCollision"


@dataclass
class BinRecovery:
    client_index: int          # -1 when rows are shared by all clients
    bin_index: int
    raw_delta: np.ndarray
    image_estimate: np.ndarray | None
    status: Status


@dataclass
class Demuxed:
    blocks: list               # per-client U x dim weight-gradient blocks
    bias_grads: np.ndarray
    bias_aggregated: bool


def quantized_eps(num_clients: int, scale: float) -> float:
    return 4.0 * num_clients / scale


def _slices(cfg):
    off = 0
    out = {}
    for name, shape in param_shapes(cfg):
        n = int(np.prod(shape))
        out[name] = (slice(off, off + n), shape)
        off += n
    return out, off


def fc1_gradients(vector: np.ndarray, cfg):
    """View the FC1 weight/bias gradients inside a flat update vector."""
    sl, total = _slices(cfg)
    if vector.size != total:
        raise LayoutMismatch(f"update has {vector.size} entries, layout expects {total}")
    ws, wshape = sl["fc1_weights"]
    bs, _ = sl["fc1_biases"]
    return vector[ws].reshape(wshape), vector[bs]


def demux(agg_vector: np.ndarray, cfg, layout: BlockLayout | None = None) -> Demuxed:
    """Split an (aggregate) update into per-client FC1 column blocks."""
    layout = layout or BlockLayout.from_config(cfg)
    if layout != BlockLayout.from_config(cfg):
        raise LayoutMismatch("layout does not match configuration")
    W, b = fc1_gradients(np.asarray(agg_vector), cfg)
    if layout.shared:
        blocks = [W]
    else:
        blocks = [W[:, layout.column_block(m)] for m in range(layout.num_clients)]
    return Demuxed(blocks, b.copy(), bias_aggregated=layout.num_clients > 1)


def _reshape(v, image_shape):
    return v.reshape(image_shape) if image_shape is not None else v


def reconstruct_with_bias(block, bias_grads, cutoffs=None, *, eps=EXACT_EPS, client_index=-1,
                    image_shape=None):
    """Recover one image per bin from adjacent-row weight/bias differences."""
    block = np.asarray(block, dtype=np.float64)
    b = np.asarray(bias_grads, dtype=np.float64)
    U = block.shape[0]
    dW = block.copy()
    dW[:-1] -= block[1:]
    db = b.copy()
    db[:-1] -= b[1:]
    out = []
    for i in range(U):
        if abs(db[i]) > eps:
            est = np.clip(dW[i] / db[i], 0.0, 1.0)
            out.append(BinRecovery(client_index, i, dW[i], _reshape(est, image_shape), Status.RECOVERED))
        else:
            out.append(BinRecovery(client_index, i, dW[i], None, Status.EMPTY_BIN))
    return out


def reconstruct_weight_only(block, cutoffs=None, *, eps=EXACT_EPS, client_index=-1, image_shape=None):
    """Weight-only recovery: ``|row_i - row_{i+1}| / max(...)``."""
    block = np.asarray(block, dtype=np.float64)
    dW = block.copy()
    dW[:-1] -= block[1:]
    mag = np.abs(dW)
    peak = mag.max(axis=1) if mag.size else np.zeros(block.shape[0])
    out = []
    for i in range(block.shape[0]):
        if peak[i] > eps:
            est = np.clip(mag[i] / peak[i], 0.0, 1.0)
            out.append(BinRecovery(client_index, i, dW[i], _reshape(est, image_shape), Status.RECOVERED))
        else:
            out.append(BinRecovery(client_index, i, dW[i], None, Status.EMPTY_BIN))
    return out


def reconstruct_trap(block, bias_grads, *, eps=EXACT_EPS, client_index=-1, image_shape=None):
    """Per-neuron weight/bias ratio; no nesting between rows."""
    block = np.asarray(block, dtype=np.float64)
    b = np.asarray(bias_grads, dtype=np.float64)
    out = []
    for i in range(block.shape[0]):
        if abs(b[i]) > eps:
            est = np.clip(block[i] / b[i], 0.0, 1.0)
            out.append(BinRecovery(client_index, i, block[i], _reshape(est, image_shape), Status.RECOVERED))
        else:
            out.append(BinRecovery(client_index, i, block[i], None, Status.EMPTY_BIN))
    return out
