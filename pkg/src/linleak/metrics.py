"""Leakage scoring, SSIM, resource (byte) accounting and update timing."""

from __future__ import annotations

import gc
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import brightness
from .errors import ShapeMismatch
from .model import AttackConfig, BlockLayout, build_model, parameter_counts, param_shapes
from .reconstruction import Status
from .tensors import MIB, coo_nbytes, csr_nbytes, dense_nbytes

SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WIN, SSIM_STRIDE = 8, 4
MATCH_MAXABS = 1e-2
MATCH_SSIM = 0.95
CANDIDATES_PER_RECOVERY = 4


# ------------------------------------------------------------------ SSIM

def _as_chw(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    return x


def _window_stats(x, win_h, win_w):
    # x: (..., C, H, W) -> windows (..., C, nh, nw, win_h, win_w)
    w = sliding_window_view(x, (win_h, win_w), axis=(-2, -1))[..., ::SSIM_STRIDE, ::SSIM_STRIDE, :, :]
    return w.reshape(w.shape[:-2] + (-1,))


def ssim_many(a, b) -> np.ndarray:
    """SSIM along leading axes; last three axes are C x H x W."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"ssim shapes differ: {a.shape} vs {b.shape}")
    H, W = a.shape[-2:]
    wh, ww = min(SSIM_WIN, H), min(SSIM_WIN, W)
    wa = _window_stats(a, wh, ww)
    wb = _window_stats(b, wh, ww)
    mu_a = wa.mean(-1)
    mu_b = wb.mean(-1)
    va = wa.var(-1)
    vb = wb.var(-1)
    cov = (wa * wb).mean(-1) - mu_a * mu_b
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2))
    return smap.mean(axis=(-1, -2)).mean(axis=-1)


def ssim(a, b) -> float:
    """Mean SSIM (8x8 uniform windows, stride 4, L=1) averaged over channels."""
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"ssim shapes differ: {a.shape} vs {b.shape}")
    return float(ssim_many(a, b))


# ---------------------------------------------------------------- oracles

@dataclass
class OracleResult:
    leaked: set                 # {(client, image_index)}
    assignment: dict            # (client, image_index) -> bin / neuron (-1 none)
    total_images: int

    @property
    def rate(self) -> float:
        return len(self.leaked) / self.total_images if self.total_images else 0.0


def bin_index(b, cutoffs) -> np.ndarray:
    """Highest unit activated (brightness strictly above its cutoff); -1 if none."""
    return np.searchsorted(np.asarray(cutoffs), np.asarray(b), side="left") - 1


def occupancy_oracle(batches, cutoffs, layout: BlockLayout | None = None) -> OracleResult:
    """Images that are the sole occupant of their brightness bin.

    Bins are per client, or pooled across clients when the layout is shared.
    """
    shared = layout is not None and layout.shared
    assignment = {}
    groups = {}
    for m, batch in enumerate(batches):
        bins = bin_index(brightness(batch.images), cutoffs)
        for i, k in enumerate(bins):
            assignment[(m, i)] = int(k)
            if k >= 0:
                groups.setdefault((-1 if shared else m, int(k)), []).append((m, i))
    leaked = {members[0] for members in groups.values() if len(members) == 1}
    return OracleResult(leaked, assignment, sum(len(b) for b in batches))


def activation_oracle(batches, fc1_weights, fc1_biases) -> OracleResult:
    """Trap-weight oracle: images that alone activate at least one neuron (pooled)."""
    X = np.concatenate([b.flat() for b in batches])
    ids = [(m, i) for m, b in enumerate(batches) for i in range(len(b))]
    active = (X @ np.asarray(fc1_weights).T + fc1_biases) > 0         # images x neurons
    counts = active.sum(axis=0)
    leaked = set()
    assignment = {k: -1 for k in ids}
    for n in np.flatnonzero(counts == 1):
        img = int(np.flatnonzero(active[:, n])[0])
        leaked.add(ids[img])
        if assignment[ids[img]] < 0:
            assignment[ids[img]] = int(n)
    return OracleResult(leaked, assignment, len(ids))


# --------------------------------------------------------------- matching

@dataclass
class Match:
    client_index: int
    bin_index: int
    image: tuple                # (client, image_index)
    max_abs_error: float
    ssim: float


@dataclass
class LeakageReport:
    total_images: int
    leaked_count: int
    leakage_rate: float
    per_client: dict
    matches: list
    oracle_leaked_count: int | None = None
    oracle_leaked: set | None = None

    @property
    def leaked(self) -> set:
        return {m.image for m in self.matches}

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([m.ssim for m in self.matches])) if self.matches else 0.0

    @property
    def oracle_rate(self) -> float | None:
        if self.oracle_leaked_count is None:
            return None
        return self.oracle_leaked_count / self.total_images if self.total_images else 0.0


def _rescaled_maxabs(est, gt):
    """Max-abs error after the least-squares positive rescaling of ``est``."""
    e = est.reshape(len(est), -1)
    g = gt.reshape(len(gt), -1)
    ee = np.einsum("ij,ij->i", e, e)
    alpha = np.where(ee > 0, np.einsum("ij,ij->i", e, g) / np.where(ee > 0, ee, 1), 0.0)
    alpha = np.maximum(alpha, 0.0)
    return np.abs(alpha[:, None] * e - g).max(axis=1)


def match_and_score(recoveries, batches, *, max_abs_tol=MATCH_MAXABS, ssim_tol=MATCH_SSIM,
                    oracle: OracleResult | None = None) -> LeakageReport:
    """Greedy one-to-one matching of recovered estimates to ground truth.

    Candidates for a recovery are same-client images (all images for shared
    rows), narrowed to the most correlated few.  A pair matches when the
    rescaled max-abs error is below ``max_abs_tol`` or SSIM exceeds
    ``ssim_tol``; pairs are accepted best SSIM first, ties to the lower bin.
    Unmatched recoveries are marked ``SuspectedCollision``.
    """
    pools = {}
    for m, batch in enumerate(batches):
        pools[m] = (batch.images, [(m, i) for i in range(len(batch))])
    all_imgs = np.concatenate([b.images for b in batches]) if batches else np.zeros((0, 1, 1, 1))
    all_ids = [(m, i) for m, b in enumerate(batches) for i in range(len(b))]

    cands = []
    recovered = [r for r in recoveries if r.status is Status.RECOVERED]
    by_pool = {}
    for r in recovered:
        by_pool.setdefault(r.client_index, []).append(r)
    for pool_key, recs in by_pool.items():
        imgs, ids = (all_imgs, all_ids) if pool_key < 0 else pools[pool_key]
        if len(ids) == 0:
            continue
        E = np.stack([r.image_estimate.reshape(imgs.shape[1:]) for r in recs])
        Ef = E.reshape(len(E), -1)
        Gf = imgs.reshape(len(imgs), -1)
        Ec = Ef - Ef.mean(1, keepdims=True)
        Gc = Gf - Gf.mean(1, keepdims=True)
        en = np.linalg.norm(Ec, axis=1)
        gn = np.linalg.norm(Gc, axis=1)
        corr = (Ec @ Gc.T) / np.maximum(np.outer(en, gn), 1e-300)
        k = min(CANDIDATES_PER_RECOVERY, len(ids))
        top = np.argsort(-corr, axis=1, kind="stable")[:, :k]
        ri = np.repeat(np.arange(len(recs)), k)
        gi = top.reshape(-1)
        err = _rescaled_maxabs(E[ri], imgs[gi])
        ss = ssim_many(E[ri], imgs[gi])
        for a, b, e_, s_ in zip(ri, gi, err, ss):
            if e_ < max_abs_tol or s_ > ssim_tol:
                cands.append((-float(s_), recs[a].bin_index, recs[a].client_index, id(recs[a]),
                              recs[a], ids[b], float(e_)))

    cands.sort(key=lambda c: (c[0], c[1], c[2], c[5]))
    used_rec, used_img = set(), set()
    matches = []
    for neg_s, bin_i, cl, rid, rec, img, err in cands:
        if rid in used_rec or img in used_img:
            continue
        used_rec.add(rid)
        used_img.add(img)
        matches.append(Match(rec.client_index, rec.bin_index, img, err, -neg_s))
    for r in recovered:
        if id(r) not in used_rec:
            r.status = Status.SUSPECTED_COLLISION

    total = sum(len(b) for b in batches)
    per_client = {m: 0 for m in range(len(batches))}
    for mt in matches:
        per_client[mt.image[0]] += 1
    return LeakageReport(total, len(matches), len(matches) / total if total else 0.0, per_client,
                         matches, None if oracle is None else len(oracle.leaked),
                         None if oracle is None else set(oracle.leaked))


# ------------------------------------------------------------- resources

@dataclass
class ResourceReport:
    server_to_client_bytes: int
    client_to_server_bytes: int
    param_counts: dict
    storage: dict                 # tensor -> (format, bytes)
    csr_server_to_client_bytes: int
    update_compute_seconds: dict = field(default_factory=dict)

    @staticmethod
    def mb(nbytes: int) -> float:
        return nbytes / MIB


def resource_report(cfg: AttackConfig, sa: bool = True, datasize: int = 4) -> ResourceReport:
    """Byte accounting for the attack module, from arithmetic only.

    Server -> client: the module in its declared storage (COO FC1 for the
    sparse variant, 4-byte dense for everything else).  Client -> server: a
    dense vector over every parameter when SA is on, since masking fills in
    all zeros; without SA the update keeps the model's storage.
    """
    pc = parameter_counts(cfg)
    storage = {}
    for name, shape in param_shapes(cfg, include_stub=False):
        n = int(np.prod(shape))
        if name == "fc1_weights" and cfg.sparse:
            storage[name] = ("coo", coo_nbytes(pc["fc1_nonzero"], 2, datasize))
        else:
            storage[name] = ("dense", dense_nbytes(n, datasize))
    s2c = sum(b for _, b in storage.values())
    csr = s2c
    if cfg.sparse:
        csr = s2c - storage["fc1_weights"][1] + csr_nbytes(cfg.units, pc["fc1_nonzero"], 8, datasize)
    c2s = dense_nbytes(pc["total"], datasize) if sa else s2c
    return ResourceReport(s2c, c2s, pc, storage, csr)


# ---------------------------------------------------------------- timing

# 8192 hidden units on a 32x32x3 input is ~25M weights, the size of a ResNet-50
PAYLOAD_HIDDEN = 8192


class PayloadMLP:
    """Dense stand-in for the host network whose update time the attack adds to."""

    def __init__(self, dim: int, hidden: int = 256, num_classes: int = 10, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.w1 = rng.standard_normal((hidden, dim)) / np.sqrt(dim)
        self.w2 = rng.standard_normal((num_classes, hidden)) / np.sqrt(hidden)

    def update(self, x: np.ndarray, labels: np.ndarray):
        B = x.shape[0]
        h = np.maximum(x @ self.w1.T, 0)
        z = h @ self.w2.T
        p = np.exp(z - z.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        p[np.arange(B), labels % p.shape[1]] -= 1
        p /= B
        g2 = p.T @ h
        dh = (p @ self.w2) * (h > 0)
        g1 = dh.T @ x
        return g1, g2


def time_update(cfg: AttackConfig, batch, cutoffs_by_units, *, payload_hidden: int = PAYLOAD_HIDDEN,
                repetitions: int = 5, variants=("mandrake_sparse", "mandrake_dense", "rtf_dense")) -> dict:
    """Median wall-clock seconds of one client update (forward + backward) per variant.

    ``cutoffs_by_units`` maps a unit count to binning cutoffs (so each variant
    gets correctly sized cutoffs from the same calibration).
    """
    from .client import backward, forward

    if repetitions < 5:
        raise ValueError("repetitions must be >= 5")
    payload = PayloadMLP(cfg.dim, payload_hidden, cfg.num_classes, cfg.seed)
    x = batch.flat()
    out = {}
    for v in variants:
        vcfg = cfg.replace(variant=v)
        model = build_model(vcfg, 0, cutoffs_by_units(vcfg.units))
        backward(model, batch, forward(model, batch))            # warm-up
        times = []
        gc_was_on = gc.isenabled()
        gc.disable()
        try:
            for _ in range(repetitions):
                t0 = time.perf_counter()
                payload.update(x, batch.labels)
                backward(model, batch, forward(model, batch))
                times.append(time.perf_counter() - t0)
        finally:
            if gc_was_on:
                gc.enable()
        out[v] = statistics.median(times)
        del model
    return out
