"""Command-line experiment harness.

Subcommands::

    linleak run        [--config FILE] [--key value ...]
    linleak sweep      [--config FILE] [--sweep_clients 1,2,4 ...]
    linleak size-table [--output FILE]
    linleak self-test

Config files are flat ``key = value`` lines (``#`` comments).  Command-line
``--key value`` pairs override the file.  Exit codes: 0 success, 2 config
error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import itertools
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import client as client_mod
from . import kernels, secure_agg
from .data import ImageBatch, calibrate, load_cifar_binary, load_idx, synth_batch
from .errors import BudgetExceeded, ConfigError, LinleakError
from .metrics import (LeakageReport, ResourceReport, activation_oracle, match_and_score,
                      occupancy_oracle, resource_report)
from .model import (DEFAULT_MEMORY_BUDGET, VARIANTS, AttackConfig, _estimated_bytes,
                    build_binning_cutoffs, build_model)
from .reconstruction import (EXACT_EPS, demux, fc1_gradients, quantized_eps, reconstruct_with_bias,
                             reconstruct_weight_only, reconstruct_trap)
from .tensors import MIB

log = logging.getLogger("linleak")

CSV_COLUMNS = ["variant", "N", "B", "ratio", "dataset", "sa", "leakage_rate", "oracle_rate",
               "mean_ssim", "s2c_bytes", "c2s_bytes", "update_seconds", "seed"]

ALIASES = {"N": "num_clients", "B": "batch_size", "sa": "sa_enabled", "r": "ratio"}


def _parse_list(text, conv):
    if isinstance(text, (list, tuple)):
        return [conv(t) for t in text]
    return [conv(t.strip()) for t in str(text).split(",") if t.strip()]


@dataclass
class ExperimentConfig:
    num_clients: int = 20
    batch_size: int = 16
    channels: int = 3
    height: int = 32
    width: int = 32
    ratio: float = 4.0
    kernel_size: int = 3
    variant: str = "mandrake_sparse"
    trap_scale: float = 0.95
    trap_scale_auto: bool = False      # sweep: pick trap_scale per cell from TRAP_SCALES
    tune_seeds: int = 10
    num_classes: int = 10
    seed: int = 0
    dataset: str = "synthetic"
    sa_enabled: bool = True
    modulus: int = secure_agg.MERSENNE_61
    frac_bits: int = 24
    clip_bound: float = 1.0e3
    local_steps: int = 1
    lr: float = 0.01
    calib_size: int = 2000
    brightness_spread: float = 0.4
    force_max_pixel: bool = False
    sweep_clients: list = field(default_factory=list)
    sweep_ratio: list = field(default_factory=list)
    sweep_variant: list = field(default_factory=list)
    repeats: int = 1                   # sweep: seeds seed .. seed+repeats-1 per cell
    output: str = ""
    timing: bool = False
    workers: int = 1
    memory_budget: int = DEFAULT_MEMORY_BUDGET

    def attack_config(self) -> AttackConfig:
        names = {f.name for f in dataclasses.fields(AttackConfig)}
        return AttackConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def field_params(self) -> secure_agg.FieldParams:
        return secure_agg.FieldParams(self.modulus, self.frac_bits, self.clip_bound)

    def validate(self):
        bad = {}
        try:
            self.attack_config()
        except ConfigError as e:
            bad.update(e.fields)
        if self.local_steps < 1:
            bad["local_steps"] = "must be >= 1"
        if not self.lr > 0:
            bad["lr"] = "must be > 0"
        if self.calib_size < 2:
            bad["calib_size"] = "must be >= 2"
        if not (self.dataset == "synthetic" or self.dataset.split(":", 1)[0] in ("idx", "cifar", "cifar100")):
            bad["dataset"] = "expected synthetic, idx:IMAGES[,LABELS], cifar:PATH or cifar100:PATH"
        for v in self.sweep_variant:
            if v not in VARIANTS:
                bad["sweep_variant"] = f"unknown variant {v!r}"
        if self.workers < 1:
            bad["workers"] = "must be >= 1"
        if self.repeats < 1:
            bad["repeats"] = "must be >= 1"
        if self.tune_seeds < 1:
            bad["tune_seeds"] = "must be >= 1"
        if self.sa_enabled:
            try:
                self.field_params().check(max([self.num_clients] + list(self.sweep_clients)))
            except ConfigError as e:
                bad.update(e.fields)
        if bad:
            raise ConfigError("invalid experiment configuration", bad)
        return self

    def axes(self):
        return (self.sweep_variant or [self.variant],
                self.sweep_clients or [self.num_clients],
                self.sweep_ratio or [self.ratio])


_LIST_FIELDS = {"sweep_clients": int, "sweep_ratio": float, "sweep_variant": str}


def _coerce(name, raw):
    f = {f.name: f for f in dataclasses.fields(ExperimentConfig)}[name]
    if name in _LIST_FIELDS:
        vals = _parse_list(raw, _LIST_FIELDS[name])
        if not vals:
            raise ValueError("sweep axis is empty")
        return vals
    if isinstance(raw, str):
        raw = raw.strip()
    t = f.type if isinstance(f.type, str) else f.type.__name__
    if t == "bool":
        if isinstance(raw, bool):
            return raw
        low = str(raw).lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if t == "int":
        return int(float(raw)) if str(raw).lower().startswith(("1e", "2e")) else int(raw)
    if t == "float":
        return float(raw)
    return str(raw)


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value", {f"line {lineno}": line})
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def make_config(values: dict | None = None, **overrides) -> ExperimentConfig:
    """Build and validate an ExperimentConfig from string or typed values."""
    merged = dict(values or {})
    merged.update(overrides)
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    kw, bad = {}, {}
    for k, v in merged.items():
        name = ALIASES.get(k, k.replace("-", "_"))
        if name not in known:
            bad[k] = "unknown key"
            continue
        try:
            kw[name] = _coerce(name, v)
        except (TypeError, ValueError) as e:
            bad[name] = str(e)
    try:
        cfg = ExperimentConfig(**kw).validate()
    except ConfigError as e:
        bad.update(e.fields)
    if bad:
        raise ConfigError("invalid experiment configuration", bad)
    return cfg


# ------------------------------------------------------------------ data

def _split_clients(pool: ImageBatch, N: int, B: int, seed: int):
    need = N * B
    if len(pool) < need + 2:
        raise ConfigError("dataset too small", {"dataset": f"{len(pool)} images, need {need} + calibration"})
    perm = np.random.default_rng([seed, 3]).permutation(len(pool))
    batches = [pool[perm[m * B:(m + 1) * B]] for m in range(N)]
    return batches, pool[perm[need:]]


def load_data(cfg: ExperimentConfig):
    """Return (client batches, calibration images, effective config).

    Trap weights need no calibration; the synthetic path then skips it.
    """
    if cfg.dataset == "synthetic":
        batches = [synth_batch([cfg.seed, 1, m], cfg.batch_size, cfg.channels, cfg.height, cfg.width,
                               cfg.brightness_spread, num_classes=cfg.num_classes,
                               force_max_pixel=cfg.force_max_pixel)
                   for m in range(cfg.num_clients)]
        calib = None
        if cfg.variant != "trap_weights":
            calib = synth_batch([cfg.seed, 2], cfg.calib_size, cfg.channels, cfg.height, cfg.width,
                                cfg.brightness_spread, num_classes=cfg.num_classes)
        return batches, calib, cfg
    kind, spec = cfg.dataset.split(":", 1)
    parts = spec.split(",")
    if kind == "idx":
        pool = load_idx(parts[0], parts[1] if len(parts) > 1 else None)
    else:
        pool = load_cifar_binary(parts[0], label_bytes=2 if kind == "cifar100" else 1)
    c, h, w = pool.image_shape
    cfg = dataclasses.replace(cfg, channels=c, height=h, width=w,
                              num_classes=max(cfg.num_classes, int(pool.labels.max()) + 1))
    batches, rest = _split_clients(pool, cfg.num_clients, cfg.batch_size, cfg.seed)
    return batches, rest[: cfg.calib_size], cfg


# -------------------------------------------------------------- pipeline

@dataclass
class RunResult:
    leakage: LeakageReport
    resources: ResourceReport
    row: dict
    masked_density: float | None = None
    cutoffs: np.ndarray | None = None
    batches: list | None = None
    recoveries: list | None = None


def _client_update(model, batch, cfg: ExperimentConfig):
    if cfg.local_steps > 1:
        return client_mod.fedavg_update(model, batch, cfg.local_steps, cfg.lr)
    return client_mod.backward(model, batch)


def run(cfg: ExperimentConfig, *, keep_artifacts: bool = False) -> RunResult:
    """One FL round: build models, compute updates, (mask and) aggregate, attack, score."""
    batches, calib, cfg = load_data(cfg)
    acfg = cfg.attack_config()
    N = acfg.num_clients
    cutoffs = None
    if acfg.variant != "trap_weights":
        cutoffs = build_binning_cutoffs(calibrate(calib), acfg.units)
    img_shape = (acfg.channels, acfg.height, acfg.width)

    shared_model = build_model(acfg, 0, cutoffs) if acfg.shared else None
    fp = cfg.field_params()
    recoveries = []
    agg_total = None
    masked_density = None
    seeds = secure_agg.pair_seeds(N, cfg.seed) if cfg.sa_enabled else None
    update_times = []

    for m, batch in enumerate(batches):
        model = shared_model if shared_model is not None else build_model(acfg, m, cutoffs)
        t0 = time.perf_counter()
        upd = _client_update(model, batch, cfg)
        update_times.append(time.perf_counter() - t0)
        vec = upd.to_vector(acfg)
        if cfg.sa_enabled:
            masked = secure_agg.mask(secure_agg.quantize(vec, fp), m, seeds, fp, N)
            if masked_density is None:
                masked_density = masked.density()
            if agg_total is None:
                agg_total = masked.field_values
            else:
                secure_agg.accumulate(agg_total, masked.field_values, fp)
        else:
            W, b = fc1_gradients(vec, acfg)
            if acfg.variant == "trap_weights":
                recoveries += reconstruct_trap(W, b, client_index=m, image_shape=img_shape)
            else:
                block = W if acfg.shared else W[:, model.layout.column_block(m)]
                recoveries += reconstruct_with_bias(block, b, cutoffs, client_index=m, image_shape=img_shape)
        del model, upd, vec

    if cfg.sa_enabled:
        agg = secure_agg.dequantize(agg_total, fp)
        del agg_total
        eps = quantized_eps(N, fp.scale)
        dm = demux(agg, acfg)
        if acfg.variant == "trap_weights":
            recoveries = reconstruct_trap(dm.blocks[0], dm.bias_grads, eps=eps, image_shape=img_shape)
        elif acfg.shared:
            recoveries = reconstruct_with_bias(dm.blocks[0], dm.bias_grads, cutoffs, eps=eps, image_shape=img_shape)
        else:
            for m, block in enumerate(dm.blocks):
                recoveries += reconstruct_weight_only(block, cutoffs, eps=eps, client_index=m, image_shape=img_shape)

    if acfg.variant == "trap_weights":
        if cfg.sa_enabled:
            oracle = activation_oracle(batches, shared_model.fc1_weights, shared_model.fc1_biases)
        else:
            parts = [activation_oracle([b], shared_model.fc1_weights, shared_model.fc1_biases)
                     for b in batches]
            oracle = _merge_oracles(parts)
    else:
        layout = shared_model.layout if (shared_model is not None and cfg.sa_enabled) else None
        oracle = occupancy_oracle(batches, cutoffs, layout)

    report = match_and_score(recoveries, batches, oracle=oracle)
    res = resource_report(acfg, sa=cfg.sa_enabled)
    if cfg.timing:
        res.update_compute_seconds[acfg.variant] = float(np.mean(update_times))
    row = csv_row(cfg, report, res)
    out = RunResult(report, res, row, masked_density)
    if keep_artifacts:
        out.cutoffs, out.batches, out.recoveries = cutoffs, batches, recoveries
    return out


def _merge_oracles(parts):
    from .metrics import OracleResult
    leaked, assignment = set(), {}
    for m, p in enumerate(parts):
        leaked |= {(m, i) for (_, i) in p.leaked}
        assignment.update({(m, i): v for (_, i), v in p.assignment.items()})
    return OracleResult(leaked, assignment, sum(p.total_images for p in parts))


def csv_row(cfg: ExperimentConfig, rep: LeakageReport, res: ResourceReport) -> dict:
    secs = res.update_compute_seconds.get(cfg.variant)
    return {
        "variant": cfg.variant,
        "N": cfg.num_clients,
        "B": cfg.batch_size,
        "ratio": f"{cfg.ratio:g}",
        "dataset": cfg.dataset,
        "sa": int(cfg.sa_enabled),
        "leakage_rate": f"{rep.leakage_rate:.6f}",
        "oracle_rate": "" if rep.oracle_rate is None else f"{rep.oracle_rate:.6f}",
        "mean_ssim": f"{rep.mean_ssim:.6f}",
        "s2c_bytes": res.server_to_client_bytes,
        "c2s_bytes": res.client_to_server_bytes,
        "update_seconds": "" if secs is None else f"{secs:.6f}",
        "seed": cfg.seed,
    }


def write_csv(rows, path=None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    text = buf.getvalue()
    if path:
        Path(path).write_text(text)
    return text


TRAP_SCALES = tuple(np.round(np.arange(0.90, 0.995, 0.01), 2))


def tune_trap_scale(cfg: ExperimentConfig, seeds, scales=TRAP_SCALES):
    """Trap scale with the highest mean oracle leakage over ``seeds``.

    Scoring uses the activation oracle (which the full pipeline reproduces
    exactly) so the grid search needs no masking or reconstruction.  Ties go
    to the smaller scale.  Returns ``(best_scale, {scale: mean_rate})``.
    """
    per_scale = {float(ts): [] for ts in scales}
    for s in seeds:
        batches, _, base = load_data(dataclasses.replace(cfg, variant="trap_weights", seed=s))
        for ts in per_scale:
            c = dataclasses.replace(base, trap_scale=ts)
            model = build_model(c.attack_config())
            per_scale[ts].append(activation_oracle(batches, model.fc1_weights, model.fc1_biases).rate)
    rates = {ts: float(np.mean(v)) for ts, v in per_scale.items()}
    best = max(rates, key=lambda k: (rates[k], -k))
    return best, rates


# ----------------------------------------------------------------- sweep

def sweep_cells(cfg: ExperimentConfig):
    variants, clients, ratios = cfg.axes()
    cells = []
    for v, n, r in sorted(itertools.product(variants, clients, ratios)):
        cells.append(dataclasses.replace(cfg, variant=v, num_clients=n, ratio=r,
                                         sweep_variant=[], sweep_clients=[], sweep_ratio=[]))
    for c in cells:
        need = _estimated_bytes(c.attack_config())
        if need > c.memory_budget:
            raise BudgetExceeded(
                "sweep cell exceeds memory budget",
                {f"variant={c.variant},N={c.num_clients},ratio={c.ratio:g}":
                 f"needs ~{need / MIB:.1f} MiB > {c.memory_budget / MIB:.1f} MiB"})
    return cells


def _run_cell(c):
    if c.trap_scale_auto and c.variant == "trap_weights":
        best, _ = tune_trap_scale(c, range(c.seed, c.seed + c.tune_seeds))
        log.info("N=%d ratio=%g: tuned trap_scale=%.2f", c.num_clients, c.ratio, best)
        c = dataclasses.replace(c, trap_scale=best)
    return [run(dataclasses.replace(c, seed=c.seed + k)).row for k in range(c.repeats)]


def sweep(cfg: ExperimentConfig):
    """CSV rows over the cartesian product of the sweep axes, in sorted order.

    Each cell contributes ``repeats`` rows (consecutive seeds).  With
    ``trap_scale_auto`` a trap-weight cell first picks its scale by the
    oracle grid search over ``tune_seeds`` seeds.
    """
    cells = sweep_cells(cfg)
    if cfg.workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            parts = list(ex.map(_run_cell, cells))
    else:
        parts = [_run_cell(c) for c in cells]
    return [row for part in parts for row in part]


# ------------------------------------------------------------ size table

SIZE_TABLE_DATASETS = [
    ("MNIST", 1, 28, 28),
    ("CIFAR-100", 3, 32, 32),
    ("TinyImageNet", 3, 64, 64),
    ("ImageNet", 3, 256, 256),
]
SIZE_COLUMNS = ["dataset", "N", "B", "rtf_mb", "dense_mb", "sparse_mb", "sparse_csr_mb",
                "rtf_bytes", "dense_bytes", "sparse_bytes", "sparse_csr_bytes"]


def size_table(clients=(100, 1000), batch_size: int = 64, ratio: float = 4.0):
    """Server-to-client module sizes per dataset and client count (pure arithmetic)."""
    rows = []
    for name, c, h, w in SIZE_TABLE_DATASETS:
        for n in clients:
            base = AttackConfig(num_clients=n, batch_size=batch_size, channels=c, height=h, width=w,
                                ratio=ratio)
            rtf = resource_report(base.replace(variant="rtf_dense"))
            dense = resource_report(base.replace(variant="mandrake_dense"))
            sparse = resource_report(base.replace(variant="mandrake_sparse"))
            rows.append({
                "dataset": name, "N": n, "B": batch_size,
                "rtf_mb": f"{rtf.server_to_client_bytes / MIB:.2f}",
                "dense_mb": f"{dense.server_to_client_bytes / MIB:.2f}",
                "sparse_mb": f"{sparse.server_to_client_bytes / MIB:.2f}",
                "sparse_csr_mb": f"{sparse.csr_server_to_client_bytes / MIB:.2f}",
                "rtf_bytes": rtf.server_to_client_bytes,
                "dense_bytes": dense.server_to_client_bytes,
                "sparse_bytes": sparse.server_to_client_bytes,
                "sparse_csr_bytes": sparse.csr_server_to_client_bytes,
            })
    return rows


def size_table_csv(rows, path=None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SIZE_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    text = buf.getvalue()
    if path:
        Path(path).write_text(text)
    return text


# ------------------------------------------------------------- self-test

def self_test(out=sys.stdout) -> bool:
    """Quick end-to-end checks; prints one line per check."""
    checks = []

    def check(name, fn):
        try:
            ok = bool(fn())
        except Exception as e:  # noqa: BLE001 - report, do not crash
            ok = False
            name = f"{name} ({type(e).__name__}: {e})"
        checks.append(ok)
        print(f"[{'PASS' if ok else 'FAIL'}] {name}", file=out)

    small = dict(num_clients=3, batch_size=8, channels=3, height=32, width=32, calib_size=300)

    def exact_oracle():
        r = run(make_config(small, sa_enabled=False))
        return r.leakage.leaked == r.leakage.oracle_leaked

    def sa_cancel():
        fp = secure_agg.FieldParams()
        rng = np.random.default_rng(0)
        q = [secure_agg.quantize(rng.normal(size=64), fp) for _ in range(3)]
        seeds = secure_agg.pair_seeds(3, 7)
        masked = [secure_agg.mask(qi, m, seeds, fp, 3) for m, qi in enumerate(q)]
        plain, _ = secure_agg.field_sum([x.residues for x in q], fp)
        return np.array_equal(secure_agg.field_sum(masked, fp)[0], plain)

    def sizes():
        row = size_table(clients=(1000,))[1]
        return abs(float(row["rtf_mb"]) - 6000.99) / 6000.99 < 0.02 and \
            abs(float(row["sparse_mb"]) - 18.33) / 18.33 < 0.02

    print(f"kernel backend: {kernels.BACKEND}", file=out)
    check("exact-mode leaked set equals occupancy oracle", exact_oracle)
    check("pairwise masks cancel in the field", sa_cancel)
    check("size table reproduces 6000.99 / 18.33 MB at N=1000", sizes)
    return all(checks)


# ------------------------------------------------------------------- CLI

def _build_parser():
    p = argparse.ArgumentParser(prog="linleak", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("run", "sweep"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat key=value config file")
    st = sub.add_parser("size-table")
    st.add_argument("--output", default="")
    st.add_argument("--batch_size", type=int, default=64)
    st.add_argument("--ratio", type=float, default=4.0)
    st.add_argument("--clients", default="100,1000")
    sub.add_parser("self-test")
    return p


def _overrides(extra):
    """Turn ``--key value`` / ``--flag`` tokens into a dict."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError("unexpected argument", {tok: "expected --key value"})
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        elif i + 1 < len(extra) and not extra[i + 1].startswith("--"):
            val = extra[i + 1]
            i += 2
        else:
            val = "true"
            i += 1
        out[key] = val
    return out


def main(argv=None) -> int:
    parser = _build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "self-test":
            return 0 if self_test() else 3
        if args.command == "size-table":
            if extra:
                raise ConfigError("unexpected arguments", {"args": " ".join(extra)})
            clients = _parse_list(args.clients, int)
            text = size_table_csv(size_table(clients, args.batch_size, args.ratio), args.output or None)
            if not args.output:
                sys.stdout.write(text)
            return 0
        values = parse_config_text(Path(args.config).read_text()) if args.config else {}
        values.update(_overrides(extra))
        cfg = make_config(values)
        if args.command == "run":
            rows = [run(cfg).row]
        else:
            rows = sweep(cfg)
        text = write_csv(rows, cfg.output or None)
        if not cfg.output:
            sys.stdout.write(text)
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (LinleakError, OSError, ValueError, MemoryError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
