import numpy as np
import pytest

from linleak.client import backward
from linleak.data import ImageBatch, brightness, synth_batch
from linleak.errors import LayoutMismatch
from linleak.metrics import match_and_score
from linleak.model import AttackConfig, BlockLayout, build_model
from linleak.reconstruction import (Status, demux, fc1_gradients, quantized_eps, reconstruct_with_bias,
                                    reconstruct_weight_only, reconstruct_trap)
from linleak.secure_agg import FieldParams, aggregate, mask, pair_seeds, quantize

from conftest import cutoffs_for

FP = FieldParams()


def _with_brightness(seed, target, shape=(1, 4, 4)):
    """Smooth-ish image whose mean is exactly ``target``."""
    r = np.random.default_rng(seed)
    x = target + 0.1 * (r.random(shape) - 0.5)
    x += target - x.mean()
    return x


def _sa_round(cfg, batches, cutoffs):
    seeds = pair_seeds(cfg.num_clients, 5)
    plain, masked = [], []
    for m, b in enumerate(batches):
        v = backward(build_model(cfg, m, cutoffs), b).to_vector(cfg)
        plain.append(v)
        masked.append(mask(quantize(v, FP), m, seeds, FP, cfg.num_clients))
    return plain, aggregate(masked, FP, expected=cfg.num_clients).values


def test_with_bias_two_images_two_bins():
    cfg = AttackConfig(num_clients=1, batch_size=2, channels=1, height=4, width=4, ratio=1.0)
    x1, x2 = _with_brightness(1, 0.3), _with_brightness(2, 0.7)
    batch = ImageBatch(np.stack([x1, x2]), [0, 1])
    upd = backward(build_model(cfg, 0, [0.0, 0.5]), batch)
    W, b = fc1_gradients(upd.to_vector(cfg), cfg)
    rec = reconstruct_with_bias(W, b, image_shape=(1, 4, 4))
    assert [r.status for r in rec] == [Status.RECOVERED, Status.RECOVERED]
    np.testing.assert_allclose(rec[0].image_estimate, x1, atol=1e-12)
    np.testing.assert_allclose(rec[1].image_estimate, x2, atol=1e-12)


def test_eq1_single_image_single_unit():
    cfg = AttackConfig(num_clients=1, batch_size=1, channels=1, height=3, width=3, ratio=1.0)
    x = _with_brightness(3, 0.4, (1, 3, 3))
    upd = backward(build_model(cfg, 0, [0.1]), ImageBatch(x[None], [2]))
    W, b = fc1_gradients(upd.to_vector(cfg), cfg)
    rec = reconstruct_with_bias(W, b, image_shape=(1, 3, 3))
    np.testing.assert_allclose(rec[0].image_estimate, x, rtol=1e-14)


def test_with_bias_collision_gives_weighted_blend():
    cfg = AttackConfig(num_clients=1, batch_size=2, channels=1, height=4, width=4, ratio=1.0)
    model = build_model(cfg, 0, [0.0, 0.9])
    x1, x2 = _with_brightness(4, 0.35), _with_brightness(5, 0.6)
    batch = ImageBatch(np.stack([x1, x2]), [0, 0])
    W, b = fc1_gradients(backward(model, batch).to_vector(cfg), cfg)
    rec = reconstruct_with_bias(W, b, image_shape=(1, 4, 4))
    # reference: per-image downstream factors from single-image passes
    g = [backward(model, batch[[i]]).grads["fc1_biases"][0] for i in (0, 1)]
    blend = (g[0] * x1 + g[1] * x2) / (g[0] + g[1])
    np.testing.assert_allclose(rec[0].image_estimate, np.clip(blend, 0, 1), atol=1e-12)
    assert rec[1].status is Status.EMPTY_BIN
    report = match_and_score(rec, [batch])
    assert report.leaked_count == 0
    assert rec[0].status is Status.SUSPECTED_COLLISION


def test_with_bias_empty_bins():
    rec = reconstruct_with_bias(np.zeros((3, 4)), np.zeros(3))
    assert all(r.status is Status.EMPTY_BIN and r.image_estimate is None for r in rec)


def test_weight_only_scale_invariance(rng):
    block = rng.normal(size=(5, 12))
    a = reconstruct_weight_only(block)
    b = reconstruct_weight_only(block * 37.5)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x.image_estimate, y.image_estimate, rtol=1e-13)


def test_weight_only_exact_and_brightness_shift_under_masking():
    cfg = AttackConfig(num_clients=3, batch_size=2, channels=3, height=8, width=8, ratio=2.0)
    cutoffs = np.array([0.0, 0.2, 0.35, 0.5])
    def shaped(seed, mean, peak):
        f = synth_batch(seed, 1, 3, 8, 8).images[0]
        f = f - f.mean()
        return np.clip(mean + (peak - mean) * f / f.max(), 0, 1)   # max pixel exactly ``peak``

    batches = [ImageBatch(np.stack([shaped([m, 1], 0.6, 1.0), shaped([m, 2], 0.3, 0.8)]), [0, 1])
               for m in range(3)]
    _, agg = _sa_round(cfg, batches, cutoffs)
    dm = demux(agg, cfg)
    for m, block in enumerate(dm.blocks):
        rec = reconstruct_weight_only(block, eps=quantized_eps(3, FP.scale), image_shape=(3, 8, 8))
        bins = np.searchsorted(cutoffs, brightness(batches[m].images)) - 1
        assert len(set(bins)) == 2
        hi, lo = batches[m].images
        est_hi = rec[bins[0]].image_estimate
        est_lo = rec[bins[1]].image_estimate
        assert np.abs(est_hi - hi).max() < 1e-3
        assert lo.max() == 0.8
        assert np.abs(est_lo - lo / 0.8).max() < 1e-3


def test_demux_identity_for_one_client(rng):
    cfg = AttackConfig(num_clients=1, batch_size=2, channels=1, height=4, width=4)
    n = sum(int(np.prod(s)) for s in [(1, 1, 3, 3), (1,), (8, 16), (8,), (16, 8), (16,), (11, 16)])
    v = rng.normal(size=n)
    dm = demux(v, cfg)
    W, b = fc1_gradients(v, cfg)
    assert np.array_equal(dm.blocks[0], W) and np.array_equal(dm.bias_grads, b)
    assert not dm.bias_aggregated


def test_demux_blocks_equal_client_gradients():
    cfg = AttackConfig(num_clients=3, batch_size=4, channels=1, height=6, width=6)
    cut = cutoffs_for(cfg)
    batches = [synth_batch([7, m], 4, 1, 6, 6) for m in range(3)]
    plain, agg = _sa_round(cfg, batches, cut)
    dm = demux(agg, cfg)
    layout = BlockLayout.from_config(cfg)
    for m in range(3):
        W, _ = fc1_gradients(plain[m], cfg)
        np.testing.assert_allclose(dm.blocks[m], W[:, layout.column_block(m)], atol=3 * 2.0**-25)


def test_demux_of_zero_and_layout_checks():
    cfg = AttackConfig(num_clients=2, batch_size=1, channels=1, height=2, width=2)
    n = sum(int(np.prod(s)) for s in [(2, 1, 3, 3), (2,), (4, 8), (4,), (4, 4), (4,), (11, 4)])
    dm = demux(np.zeros(n), cfg)
    assert all(not b.any() for b in dm.blocks)
    with pytest.raises(LayoutMismatch):
        demux(np.zeros(n + 1), cfg)
    with pytest.raises(LayoutMismatch):
        demux(np.zeros(n), cfg, BlockLayout.from_config(cfg.replace(num_clients=3)))


def test_trap_cases():
    x1 = _with_brightness(8, 0.5).ravel()
    x2 = _with_brightness(9, 0.4).ravel()
    block = np.stack([0.3 * x1, 0.2 * x1 + 0.5 * x2, np.zeros(16)])
    bias = np.array([0.3, 0.7, 0.0])
    rec = reconstruct_trap(block, bias)
    np.testing.assert_allclose(rec[0].image_estimate, x1, rtol=1e-14)
    np.testing.assert_allclose(rec[1].image_estimate, (0.2 * x1 + 0.5 * x2) / 0.7, rtol=1e-14)
    assert rec[2].status is Status.EMPTY_BIN


def test_trap_end_to_end_single_activations():
    cfg = AttackConfig(num_clients=1, batch_size=4, channels=1, height=6, width=6,
                       variant="trap_weights", ratio=8.0, trap_scale=0.99)
    model = build_model(cfg)
    batch = synth_batch(3, 4, 1, 6, 6)
    W, b = fc1_gradients(backward(model, batch).to_vector(cfg), cfg)
    active = (batch.flat() @ model.fc1_weights.T) > 0
    rec = reconstruct_trap(W, b, image_shape=(1, 6, 6))
    solo = np.flatnonzero(active.sum(axis=0) == 1)
    assert solo.size
    for n in solo:
        i = int(np.flatnonzero(active[:, n])[0])
        np.testing.assert_allclose(rec[n].image_estimate, batch.images[i], atol=1e-12)
    for n in np.flatnonzero(active.sum(axis=0) == 0):
        assert rec[n].status is Status.EMPTY_BIN


def test_quantized_eps():
    assert quantized_eps(20, 2.0**24) == 80 / 2**24
