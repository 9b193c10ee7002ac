"""Construction of the attack module the server ships to each client.

Pipeline: conv (identity passthrough kernels, one channel block per client)
-> FC1 leak layer (ReLU) -> FC2 resize layer -> linear stub -> softmax CE.

Variants
--------
mandrake_sparse
    Per-client conv block; FC1 has ``B * ratio`` units and is nonzero only on
    the client's column block, stored as COO.
mandrake_dense
    Same numbers as ``mandrake_sparse`` with every tensor stored dense.
rtf_dense
    No conv layer; FC1 has ``N * B * ratio`` dense brightness-binning units
    shared by all clients.
trap_weights
    Same shape as ``rtf_dense`` but FC1 rows are half-negative / half-positive
    random weights with zero biases.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .data import CalibrationSample
from .errors import ConfigError, DegenerateCalibration, LayoutOverflow
from .tensors import SparseMatrixCOO

VARIANTS = ("mandrake_sparse", "mandrake_dense", "rtf_dense", "trap_weights")
SHARED_VARIANTS = ("rtf_dense", "trap_weights")
BINNING_VARIANTS = ("mandrake_sparse", "mandrake_dense", "rtf_dense")
DEFAULT_MEMORY_BUDGET = 2 * 2**30


@dataclass(frozen=True)
class AttackConfig:
    num_clients: int = 20
    batch_size: int = 16
    channels: int = 3
    height: int = 32
    width: int = 32
    ratio: float = 4.0
    kernel_size: int = 3
    variant: str = "mandrake_sparse"
    trap_scale: float = 0.95
    num_classes: int = 10
    seed: int = 0
    memory_budget: int = DEFAULT_MEMORY_BUDGET

    def __post_init__(self):
        bad = {}
        if self.num_clients < 1:
            bad["num_clients"] = "must be >= 1"
        if self.batch_size < 1:
            bad["batch_size"] = "must be >= 1"
        if self.channels < 1 or self.height < 1 or self.width < 1:
            bad["channels/height/width"] = "must be >= 1"
        if not self.ratio > 0:
            bad["ratio"] = "must be > 0"
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            bad["kernel_size"] = "must be a positive odd integer"
        if self.variant not in VARIANTS:
            bad["variant"] = f"must be one of {', '.join(VARIANTS)}"
        if not 0.90 <= self.trap_scale <= 0.99:
            bad["trap_scale"] = "must lie in [0.90, 0.99]"
        if self.num_classes < 1:
            bad["num_classes"] = "must be >= 1"
        if bad:
            raise ConfigError("invalid attack configuration", bad)

    @property
    def dim(self) -> int:
        return self.channels * self.height * self.width

    @property
    def shared(self) -> bool:
        return self.variant in SHARED_VARIANTS

    @property
    def sparse(self) -> bool:
        return self.variant == "mandrake_sparse"

    @property
    def units(self) -> int:
        """FC1 unit count U."""
        per_client = self.batch_size * self.ratio
        if self.shared:
            return max(1, round(self.num_clients * per_client))
        return max(1, round(per_client))

    def replace(self, **kw) -> "AttackConfig":
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class BlockLayout:
    """Where each client's data lands in the FC1 input space."""

    num_clients: int
    channels: int
    dim: int
    units: int
    shared: bool

    @classmethod
    def from_config(cls, cfg: AttackConfig) -> "BlockLayout":
        return cls(cfg.num_clients, cfg.channels, cfg.dim, cfg.units, cfg.shared)

    @property
    def fc1_in(self) -> int:
        return self.dim if self.shared else self.num_clients * self.dim

    def channel_block(self, m: int) -> range:
        if self.shared:
            raise ValueError("shared layouts have no per-client channel blocks")
        return range(m * self.channels, (m + 1) * self.channels)

    def column_block(self, m: int) -> slice:
        if self.shared:
            return slice(0, self.dim)
        return slice(m * self.dim, (m + 1) * self.dim)


def param_shapes(cfg: AttackConfig, include_stub: bool = True):
    """Ordered (name, shape) list of every trainable tensor."""
    U, d = cfg.units, cfg.dim
    shapes = []
    if not cfg.shared:
        nc = cfg.num_clients * cfg.channels
        k = cfg.kernel_size
        shapes += [("conv_kernels", (nc, cfg.channels, k, k)), ("conv_biases", (nc,))]
    shapes += [
        ("fc1_weights", (U, BlockLayout.from_config(cfg).fc1_in)),
        ("fc1_biases", (U,)),
        ("fc2_weights", (d, U)),
        ("fc2_biases", (d,)),
    ]
    if include_stub:
        shapes.append(("stub_weights", (cfg.num_classes + 1, d)))
    return shapes


def parameter_counts(cfg: AttackConfig) -> dict:
    """Exact parameter arithmetic for the attack module (stub excluded).

    Never instantiates tensors, so it is safe at ImageNet scale.
    """
    N, U, d = cfg.num_clients, cfg.units, cfg.dim
    fc1 = U * BlockLayout.from_config(cfg).fc1_in
    fc2 = d * U
    fc1_nonzero = fc1 if cfg.shared else fc1 // N
    if cfg.shared:
        conv, bias = 0, U + d
    else:
        conv = N * cfg.channels * cfg.channels * cfg.kernel_size**2
        bias = U + d + N * cfg.channels
    return {
        "fc1_weights": fc1,
        "fc1_nonzero": fc1_nonzero,
        "fc2_weights": fc2,
        "total_weights": fc1 + fc2,
        "nonzero_weights": fc1_nonzero + fc2,
        "conv_params": conv,
        "bias_params": bias,
        "total": fc1 + fc2 + conv + bias,
        "stub_params": (cfg.num_classes + 1) * d,
    }


def build_binning_cutoffs(calib: CalibrationSample, U: int) -> np.ndarray:
    """Brightness cutoffs at the empirical quantiles ``i / U`` (linear interpolation)."""
    if U < 1:
        raise ValueError("U must be >= 1")
    v = calib.brightness_values
    if v[0] == v[-1]:
        raise DegenerateCalibration("all calibration brightness values are equal")
    return np.quantile(v, np.arange(U) / U, method="linear")


@dataclass(eq=False)
class MaliciousModel:
    """Parameters of one client's copy of the attack module."""

    cfg: AttackConfig
    client_index: int
    layout: BlockLayout
    conv_kernels: np.ndarray | None
    conv_biases: np.ndarray | None
    fc1_weights: np.ndarray | SparseMatrixCOO
    fc1_biases: np.ndarray
    fc2_weights: np.ndarray
    fc2_biases: np.ndarray
    stub_weights: np.ndarray
    cutoffs: np.ndarray | None = None
    frozen_conv: bool = False
    storage: dict = field(default_factory=dict)

    @property
    def sparse(self) -> bool:
        return isinstance(self.fc1_weights, SparseMatrixCOO)

    @property
    def has_conv(self) -> bool:
        return self.conv_kernels is not None

    def param_names(self):
        return [n for n, _ in param_shapes(self.cfg)]

    def tensors(self) -> dict:
        return {n: getattr(self, n) for n in self.param_names()}

    def replace(self, **kw) -> "MaliciousModel":
        return dataclasses.replace(self, **kw)

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for _, s in param_shapes(self.cfg))

    # sparse FC1 helpers (pattern-only, cached)
    @cached_property
    def fc1_active_cols(self) -> np.ndarray:
        if self.sparse:
            return np.unique(self.fc1_weights.col_idx)
        return np.arange(self.layout.fc1_in)

    @cached_property
    def fc1_local_cols(self) -> np.ndarray:
        return np.searchsorted(self.fc1_active_cols, self.fc1_weights.col_idx)

    @cached_property
    def fc1_col_order(self) -> np.ndarray:
        """Permutation sorting COO entries by (local col, row) for the transposed product."""
        return np.lexsort((self.fc1_weights.row_idx, self.fc1_local_cols))

    @cached_property
    def fc1_dense_block(self):
        """``(row_ids, col_sel, W_sub)`` when the COO pattern is a full rectangle, else None.

        Every row of the block stores every active column, so the product can
        go through BLAS on the ``len(row_ids) x n_active`` submatrix.
        ``col_sel`` is a slice when the active columns are contiguous.
        """
        if not self.sparse:
            return None
        W = self.fc1_weights
        cols = self.fc1_active_cols
        row_ids = np.unique(W.row_idx)
        if W.nnz == 0 or W.nnz != row_ids.size * cols.size:
            return None
        if not (np.array_equal(W.row_idx, np.repeat(row_ids, cols.size))
                and np.array_equal(self.fc1_local_cols, np.tile(np.arange(cols.size), row_ids.size))):
            return None
        sel = cols
        if cols[-1] - cols[0] + 1 == cols.size:
            sel = slice(int(cols[0]), int(cols[-1]) + 1)
        return row_ids, sel, W.values.reshape(row_ids.size, cols.size)

    @cached_property
    def active_channels(self) -> np.ndarray:
        """Conv output channels that are nonzero or read by FC1."""
        if not self.has_conv:
            return np.zeros(0, dtype=np.int64)
        hw = self.cfg.height * self.cfg.width
        nz = np.flatnonzero(np.any(self.conv_kernels.reshape(len(self.conv_kernels), -1) != 0, axis=1)
                            | (self.conv_biases != 0))
        read = np.unique(self.fc1_active_cols // hw)
        return np.union1d(nz, read).astype(np.int64)

    def instantiated_bytes(self) -> int:
        total = 0
        for t in self.tensors().values():
            if isinstance(t, SparseMatrixCOO):
                total += t.nnz * 24
            elif t is not None:
                total += t.size * 8
        return total


def _estimated_bytes(cfg: AttackConfig) -> int:
    counts = parameter_counts(cfg)
    fc1 = counts["fc1_nonzero"] * 24 if cfg.sparse else counts["fc1_weights"] * 8
    rest = counts["total"] - counts["fc1_weights"] + counts["stub_params"]
    return fc1 + rest * 8


def _stub(cfg: AttackConfig, fc2_col: np.ndarray, rng) -> np.ndarray:
    """Stub rows: random class rows orthogonal to the FC2 direction plus one sink row.

    Only the sink row sees the FC1 activations, so every image's downstream
    gradient factor is positive and independent of its label.
    """
    d, U = cfg.dim, cfg.units
    rows = rng.standard_normal((cfg.num_classes, d)) / np.sqrt(d)
    rows -= np.outer(rows @ fc2_col, fc2_col)
    sink = fc2_col / U
    return np.vstack([rows, sink[None, :]])


def build_model(cfg: AttackConfig, m: int = 0, cutoffs=None) -> MaliciousModel:
    """Instantiate client ``m``'s attack module.

    ``cutoffs`` (length U) is required for binning variants and ignored for
    trap weights.  Shared variants give every client the same model.
    """
    if not 0 <= m < cfg.num_clients:
        raise ValueError(f"client index {m} out of range for {cfg.num_clients} clients")
    need = _estimated_bytes(cfg)
    if need > cfg.memory_budget:
        raise LayoutOverflow(f"{cfg.variant} with N={cfg.num_clients} needs ~{need} bytes, "
                             f"budget is {cfg.memory_budget}")
    layout = BlockLayout.from_config(cfg)
    U, d = cfg.units, cfg.dim
    rng = np.random.default_rng([cfg.seed, 0x5EED])

    fc2_col = np.full(d, 1.0 / np.sqrt(d))
    fc2 = np.tile(fc2_col[:, None], (1, U))
    stub = _stub(cfg, fc2_col, rng)

    conv_k = conv_b = None
    if not cfg.shared:
        C, k = cfg.channels, cfg.kernel_size
        conv_k = np.zeros((cfg.num_clients * C, C, k, k))
        for c in range(C):
            conv_k[m * C + c, c, k // 2, k // 2] = 1.0
        conv_b = np.zeros(cfg.num_clients * C)

    if cfg.variant == "trap_weights":
        fc1, b1 = _trap_rows(U, d, cfg.trap_scale, np.random.default_rng([cfg.seed, 0x7AB])), np.zeros(U)
        cutoffs = None
    else:
        if cutoffs is None:
            raise ValueError(f"{cfg.variant} needs binning cutoffs")
        cutoffs = np.asarray(cutoffs, dtype=np.float64)
        if cutoffs.shape != (U,):
            raise ValueError(f"expected {U} cutoffs, got {cutoffs.shape}")
        b1 = -cutoffs.copy()
        cols = layout.column_block(m)
        if cfg.sparse:
            r = np.repeat(np.arange(U, dtype=np.int64), d)
            c = np.tile(np.arange(cols.start, cols.stop, dtype=np.int64), U)
            fc1 = SparseMatrixCOO((U, layout.fc1_in), r, c, np.full(U * d, 1.0 / d))
        else:
            fc1 = np.zeros((U, layout.fc1_in))
            fc1[:, cols] = 1.0 / d

    return MaliciousModel(cfg=cfg, client_index=m, layout=layout, conv_kernels=conv_k,
                          conv_biases=conv_b, fc1_weights=fc1, fc1_biases=b1, fc2_weights=fc2,
                          fc2_biases=np.zeros(d), stub_weights=stub, cutoffs=cutoffs,
                          storage={"fc1_weights": "coo" if cfg.sparse else "dense"})


def _trap_rows(U: int, d: int, scale: float, rng) -> np.ndarray:
    sigma = 1.0 / d
    w = np.abs(rng.normal(0.0, sigma, size=(U, d)))
    neg = np.argsort(rng.random((U, d)), axis=1)[:, : d // 2]
    np.put_along_axis(w, neg, -np.take_along_axis(w, neg, axis=1) / scale, axis=1)
    return w
