import csv
import io
from pathlib import Path

import numpy as np
import pytest

from linleak.errors import BudgetExceeded, ConfigError
from linleak.harness import (
    CSV_COLUMNS,
    main,
    make_config,
    parse_config_text,
    run,
    self_test,
    size_table,
    sweep,
    sweep_cells,
    write_csv,
)

DATA = Path(__file__).parent / "data"

PINNED = {"N": 2, "B": 4, "channels": 3, "height": 16, "width": 16, "calib_size": 200, "seed": 3}

# MiB per (dataset, N): RtF, dense, sparse
REFERENCE_SIZES = {
    ("MNIST", 100): (153.2, 77.3, 4.6),
    ("MNIST", 1000): (1532.2, 766.4, 4.6),
    ("CIFAR-100", 100): (600.1, 303.0, 18.0),
    ("CIFAR-100", 1000): (6001.0, 3003.3, 18.3),
    ("TinyImageNet", 100): (2400.1, 1212.1, 72.1),
    ("TinyImageNet", 1000): (24001.0, 12012.4, 72.4),
    ("ImageNet", 100): (38400.9, 19392.8, 1152.8),
    ("ImageNet", 1000): (384001.7, 192193.1, 1153.1),
}


def rows_of(text):
    return list(csv.DictReader(io.StringIO(text)))


# ------------------------------------------------------------------ config

def test_config_text_and_aliases():
    vals = parse_config_text("# desk profile\nN = 3\nB=8  # batch\n\nsa = off\nsweep_clients = 1, 2,4\n")
    cfg = make_config(vals)
    assert (cfg.num_clients, cfg.batch_size, cfg.sa_enabled) == (3, 8, False)
    assert cfg.sweep_clients == [1, 2, 4]


def test_config_errors_name_fields():
    with pytest.raises(ConfigError) as e:
        make_config({"N": 0, "bogus": 1, "lr": "-1"})
    assert {"bogus", "lr"} <= set(e.value.fields)
    assert any("num_clients" in k or k == "N" for k in e.value.fields)


def test_config_line_without_equals():
    with pytest.raises(ConfigError):
        parse_config_text("N 3\n")


def test_empty_sweep_axis_rejected():
    with pytest.raises(ConfigError):
        make_config({"sweep_clients": " , "})


def test_sweep_axis_list_types():
    cfg = make_config({"sweep_ratio": "2,4", "sweep_variant": "rtf_dense"})
    assert cfg.sweep_ratio == [2.0, 4.0] and cfg.sweep_variant == ["rtf_dense"]
    with pytest.raises(ConfigError):
        make_config({"sweep_variant": "rtf_dense,nope"})


# --------------------------------------------------------------------- run

def test_csv_schema_golden():
    rows = []
    for sa in ("true", "false"):
        for v in ("mandrake_sparse", "rtf_dense"):
            rows.append(run(make_config(PINNED, sa=sa, variant=v)).row)
    text = write_csv(rows)
    assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
    assert text == (DATA / "golden_run.csv").read_text()


def test_run_is_deterministic():
    cfg = make_config(PINNED)
    assert write_csv([run(cfg).row]) == write_csv([run(cfg).row])


def test_run_without_sa_matches_oracle_exactly():
    res = run(make_config(PINNED, sa="false", N=3))
    assert res.leakage.leaked == res.leakage.oracle_leaked


def test_timing_column_only_when_requested():
    plain = run(make_config(PINNED)).row
    timed = run(make_config(PINNED, timing="true")).row
    assert plain["update_seconds"] == ""
    assert float(timed["update_seconds"]) > 0


# ------------------------------------------------------------------- sweep

def test_sweep_rows_in_axis_order():
    cfg = make_config(PINNED, sweep_variant="rtf_dense,mandrake_sparse", sweep_clients="2,1")
    keys = [(c.variant, c.num_clients) for c in sweep_cells(cfg)]
    assert keys == sorted(keys) and len(keys) == 4
    rows = sweep(cfg)
    assert [(r["variant"], r["N"]) for r in rows] == keys


def test_sweep_parallel_matches_serial():
    cfg = make_config(PINNED, sweep_clients="1,2", repeats=2)
    serial = write_csv(sweep(cfg))
    parallel = write_csv(sweep(make_config(PINNED, sweep_clients="1,2", repeats=2, workers=2)))
    assert serial == parallel
    assert [r["seed"] for r in rows_of(serial)] == ["3", "4", "3", "4"]


def test_budget_exceeded_names_cell():
    # N=1 fits in 480 kB, N=64 does not
    cfg = make_config(PINNED, sweep_clients="1,64", memory_budget=480_000)
    with pytest.raises(BudgetExceeded) as e:
        sweep_cells(cfg)
    assert list(e.value.fields) == ["variant=mandrake_sparse,N=64,ratio=4"]


@pytest.mark.slow
def test_binning_leakage_flat_in_client_count():
    # equal image count per N: 64 client batches each
    means = {}
    for n in (1, 2, 4, 8, 16):
        rows = sweep(make_config(sweep_clients=str(n), repeats=64 // n, B=16))
        means[n] = np.mean([float(r["leakage_rate"]) for r in rows])
    assert max(means.values()) - min(means.values()) < 0.05, means


@pytest.mark.slow
def test_trap_leakage_falls_with_client_count():
    cfg = make_config(variant="trap_weights", sweep_clients="1,2,4,8,16", B=16,
                      trap_scale_auto="true", tune_seeds=10, repeats=10)
    rows = sweep(cfg)
    by_n = {}
    for r in rows:
        by_n.setdefault(int(r["N"]), []).append(float(r["leakage_rate"]))
    rates = [np.mean(by_n[n]) for n in sorted(by_n)]
    rises = [b - a for a, b in zip(rates, rates[1:]) if b > a]
    assert len(rises) <= 1 and all(d <= 0.02 for d in rises), rates
    assert rates[-1] < rates[0], rates


# -------------------------------------------------------------- size table

def test_size_table_matches_reference_grid():
    rows = size_table()
    assert len(rows) == 8
    for r in rows:
        rtf, dense, sparse = REFERENCE_SIZES[(r["dataset"], r["N"])]
        assert float(r["rtf_mb"]) == pytest.approx(rtf, rel=0.02)
        assert float(r["dense_mb"]) == pytest.approx(dense, rel=0.02)
        assert float(r["sparse_mb"]) == pytest.approx(sparse, rel=0.02)
        assert r["rtf_bytes"] / 2**20 == pytest.approx(float(r["rtf_mb"]), abs=0.005)


# --------------------------------------------------------------------- CLI

def test_cli_run_with_config_file_and_overrides(tmp_path, capsys):
    conf = tmp_path / "exp.conf"
    conf.write_text("N = 2\nB = 4\nchannels = 3\nheight = 16\nwidth = 16\ncalib_size = 200\nseed = 9\n")
    out = tmp_path / "out.csv"
    assert main(["run", "--config", str(conf), "--N", "3", "--sa", "false", "--output", str(out)]) == 0
    (row,) = rows_of(out.read_text())
    assert (row["N"], row["sa"], row["seed"], row["B"]) == ("3", "0", "9", "4")


def test_cli_writes_stdout(capsys):
    assert main(["run", "--N", "1", "--B", "2", "--height", "16", "--width", "16",
                 "--calib_size", "50"]) == 0
    assert capsys.readouterr().out.startswith("variant,N,B")


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["run", "--N", "0"]) == 2
    assert main(["run", "--no_such_key", "1"]) == 2
    assert main(["sweep", "--sweep_clients", ","]) == 2
    assert main(["sweep", "--sweep_clients", "1,50", "--memory_budget", "1000"]) == 2
    assert "variant=mandrake_sparse,N=1,ratio=4" in capsys.readouterr().err
    assert main(["run", "--dataset", f"idx:{tmp_path / 'missing.idx'}"]) == 3
    assert "error:" in capsys.readouterr().err


def test_cli_size_table(tmp_path):
    out = tmp_path / "sizes.csv"
    assert main(["size-table", "--output", str(out)]) == 0
    rows = rows_of(out.read_text())
    assert len(rows) == 8 and rows[0]["dataset"] == "MNIST"


def test_self_test_passes():
    buf = io.StringIO()
    assert self_test(buf)
    lines = [ln for ln in buf.getvalue().splitlines() if ln.startswith("[")]
    assert lines and all(ln.startswith("[PASS]") for ln in lines)
