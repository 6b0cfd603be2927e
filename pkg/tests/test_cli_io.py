import io
import json
import re
import warnings

import numpy as np
import pytest

from bsplit.cli_io import (ConfigError, RegimeWarning, RunConfig, SnapshotError, chart_points, csv_columns,
                           emit_charts, emit_csv, main, parse_config, read_csv, read_snapshot, selftest,
                           serialize_config, svg_chart, write_snapshot)
from bsplit.core import DistributionField, PhysParams, SpaceGrid, VelocityGrid
from bsplit.splitting import RunState, SplittingSchedule

TINY = """\
# tiny run
[grid]
n_velocity = 12
spatial_dims = 1
n_space = 8
[schedule]
T = 0.2
N = 4
[barrier]
enabled = true
C1 = 2.0
delta = 0.05
[diagnostics]
snapshot_every = 2
q_list = 4, 8
[output]
directory = {out}
"""


def make_state(vg, sg, seed=0, position=2, sch=SplittingSchedule(1.0, 4)):
    vals = np.random.default_rng(seed).normal(size=(sg.size, vg.size))
    return RunState(DistributionField(vals, sch.time(position)), position, sch)


def test_config_defaults_and_roundtrip():
    cfg = parse_config("")
    assert cfg == RunConfig()
    cfg = parse_config(TINY.format(out="x"))
    assert cfg.grid.n_velocity == 12 and cfg.barrier.enabled and cfg.diagnostics.q_list == (4.0, 8.0)
    assert parse_config(serialize_config(cfg)) == cfg


def test_regime_warning():
    with pytest.warns(RegimeWarning):
        cfg = parse_config("[physics]\ngamma = 2.0\ns = 0.9\n")
    assert not cfg.regime_ok
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        parse_config("[physics]\ngamma = 1.0\ns = 0.5\n")


@pytest.mark.parametrize("text, line, word", [
    ("[grid]\nradius = 6\n\nradius = 7\n", 4, "duplicate"),
    ("[grid]\nradius = 6\nwidth = 3\n", 3, "unknown key"),
    ("[gird]\n", 1, "unknown section"),
    ("[grid]\nn_velocity = many\n", 2, "bad value"),
    ("radius = 6\n", 1, "outside"),
    ("[schedule]\nN = 3\n", 1, "invalid"),
])
def test_config_errors_name_the_line(text, line, word):
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert f"line {line}" in str(err.value) and word in str(err.value)


def test_snapshot_roundtrip_bit_exact(tmp_path):
    vg, sg = VelocityGrid(6.0, 8), SpaceGrid(4, 1)
    st = make_state(vg, sg)
    p = tmp_path / "a.snap"
    write_snapshot(st, vg, sg, PhysParams(), 8.0, p)
    header, back = read_snapshot(p, expect=(vg, sg))
    assert np.array_equal(back.field.values, st.field.values)
    assert (back.position, back.schedule, back.field.time_stamp) == (2, st.schedule, 0.5)
    assert header.parity == 0 and header.q == 8.0


def test_snapshot_big_endian():
    vg, sg = VelocityGrid(6.0, 8), SpaceGrid()
    st = make_state(vg, sg, 3, 1)
    buf = io.BytesIO()
    write_snapshot(st, vg, sg, PhysParams(), 8.0, buf, byteorder=">")
    raw = buf.getvalue()
    assert raw[8:9] == b">"
    _, back = read_snapshot(io.BytesIO(raw))
    assert np.array_equal(back.field.values, st.field.values)
    assert back.parity == 1


def test_snapshot_corruption_detected(tmp_path):
    vg, sg = VelocityGrid(6.0, 8), SpaceGrid()
    p = tmp_path / "a.snap"
    write_snapshot(make_state(vg, sg), vg, sg, PhysParams(), 8.0, p)
    blob = p.read_bytes()
    p.write_bytes(blob[:-100])
    with pytest.raises(SnapshotError, match="checksum"):
        read_snapshot(p)
    flipped = bytearray(blob)
    flipped[200] ^= 1
    with pytest.raises(SnapshotError, match="checksum"):
        read_snapshot(io.BytesIO(bytes(flipped)))
    with pytest.raises(SnapshotError, match="magic"):
        read_snapshot(io.BytesIO(b"PNG" + blob[3:]))


def test_snapshot_dimension_mismatch(tmp_path):
    vg, sg = VelocityGrid(6.0, 16), SpaceGrid()
    p = tmp_path / "a.snap"
    write_snapshot(make_state(vg, sg), vg, sg, PhysParams(), 8.0, p)
    with pytest.raises(SnapshotError, match="n=16.*n=24"):
        read_snapshot(p, expect=(VelocityGrid(6.0, 24), sg))
    with pytest.raises(SnapshotError):
        write_snapshot(make_state(vg, sg), VelocityGrid(6.0, 24), sg, PhysParams(), 8.0, p)


def test_csv_layout(tmp_path):
    p = tmp_path / "d.csv"
    assert emit_csv([], p, (8.0,)) == csv_columns((8.0,))
    assert p.read_text().strip().split(",") == csv_columns((8.0,))
    rows = [{"time": 0.0, "kind": "init", "mass": 1.0, "momentum_1": 0.0, "momentum_2": 0.0,
             "momentum_3": 0.0, "energy": 3.0, "entropy": -4.0, "sup_q4": 1e-3, "sup_q8": 1e-2,
             "barrier_margin": float("nan"), "negative_mass": 0.0},
            {"time": 0.1, "kind": "D", "mass": 1.0, "momentum_1": 0.0, "momentum_2": 0.0,
             "momentum_3": 0.0, "energy": 3.0, "entropy": -4.1, "sup_q4": 1e-4, "sup_q8": 1e-3,
             "barrier_margin": 0.5, "negative_mass": 0.0, "const_qs": 2.5}]
    cols = emit_csv(rows, p, (4.0, 8.0))
    assert cols == csv_columns((4.0, 8.0), ["qs"])
    assert cols[-3:] == ["barrier_margin", "negative_mass", "const_qs"]
    lines = p.read_text().strip().splitlines()
    assert all(len(line.split(",")) == len(cols) for line in lines)
    rcols, back = read_csv(p)
    assert rcols == cols
    assert back[1]["const_qs"] == 2.5 and "const_qs" not in back[0]
    assert back[1]["sup_q8"] == 1e-3 and back[0]["kind"] == "init"
    charts = emit_charts(p, tmp_path, 8.0)
    assert [c.name for c in charts] == ["decay.svg", "barrier_margin.svg", "moment_drift.svg"]


def test_svg_single_point_and_polyline():
    one = svg_chart([1.0], [2.0], "t", "x label", "y label")
    assert "<circle" in one and "<polyline" not in one
    assert "x label" in one and "y label" in one
    many = svg_chart(np.arange(1, 6), 10.0 ** -np.arange(5), "decay", "time", "sup", logx=True, logy=True)
    pts = np.array([[float(a) for a in p.split(",")]
                    for p in re.search(r'points="([^"]+)"', many).group(1).split()])
    assert np.all(np.diff(pts[:, 0]) > 0) and np.all(np.diff(pts[:, 1]) > 0)
    empty = svg_chart([], [], "none", "x", "y")
    assert "<polyline" not in empty and "<circle" not in empty


def test_chart_points_frame():
    pts = chart_points(np.array([0.0, 1.0]), np.array([5.0, 5.0]))
    assert pts[0, 0] < pts[1, 0] and pts[0, 1] == pts[1, 1]


def test_selftest_passes():
    results = selftest()
    assert len(results) >= 10
    assert all(ok for _, ok in results), [n for n, ok in results if not ok]


def test_cli_errors(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[grid]\nradius = 6\nradius = 6\n")
    assert main(["run", str(bad)]) == 1
    assert "line 3" in capsys.readouterr().err
    assert main(["diagnose", str(tmp_path / "missing.snap")]) == 1


@pytest.mark.slow
def test_cli_run_diagnose_resume(tmp_path, capsys):
    out = tmp_path / "out"
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY.format(out=out))
    assert main(["run", str(cfg)]) == 0
    report = json.loads((out / "run_report.json").read_text())
    assert report["abort_reason"] == "completed" and report["position"] == 4
    snaps = sorted(out.glob("run_*.snap"))
    assert [s.name for s in snaps] == ["run_000002.snap", "run_000004.snap"]
    for name in ("diagnostics.csv", "decay.svg", "barrier_margin.svg", "moment_drift.svg", "config.txt"):
        assert (out / name).exists()
    cols, rows = read_csv(out / "diagnostics.csv")
    assert len(rows) == 5 and "sup_q4" in cols
    assert main(["diagnose", str(snaps[-1])]) == 0
    assert "position 4/4" in capsys.readouterr().out
    assert main(["resume", str(snaps[0]), str(cfg), "--extend", "0.1"]) == 0
    rep = json.loads((out / "resume" / "resume_report.json").read_text())
    assert rep["position"] == 6
    assert main(["resume", str(snaps[0]), str(cfg), "--extend", "0.05"]) == 1
