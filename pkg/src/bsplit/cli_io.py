"""Run configuration, snapshot files, diagnostics CSV, SVG charts and the command line.

Config grammar
--------------
Plain text, one ``key = value`` per line inside ``[section]`` blocks; ``#``
starts a comment.  Booleans are ``true``/``false`` (also ``yes``/``no``,
``on``/``off``), optional numbers accept ``none``, lists are comma
separated.  Unknown sections or keys, duplicate keys and malformed values are
errors that name the line.  See :data:`SECTIONS` for the keys and defaults.

Snapshot layout
---------------
``b"BSPLIT1\\0"``, one byte endianness tag (``<`` or ``>``), then the header
fields of :data:`HEADER_FORMAT` in that byte order, the payload as 64-bit
floats in the same byte order with shape ``(n_space_nodes, n_velocity_nodes)``
(row-major, both lattices enumerated lexicographically with the last axis
fastest), and finally the 32-byte SHA-256 digest of everything before it.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import math
import struct
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .collision import QuadratureSpec
from .core import DistributionField, PhysParams, SpaceGrid, VelocityGrid
from .homogeneous import StepperConfig
from .initial_data import PerturbationSpec
from .splitting import DiagnosticsConfig, ParityError, RunState, SplittingSchedule


class ConfigError(ValueError):
    """Malformed configuration text; the message names the line."""


class RegimeWarning(UserWarning):
    """``gamma + 2 s`` outside ``[0, 2]``."""


class SnapshotError(ValueError):
    """Unreadable, corrupted or incompatible snapshot file."""


@dataclass(frozen=True)
class GridSection:
    radius: float = 6.0
    n_velocity: int = 16
    spatial_dims: int = 0
    n_space: int = 1

    def __post_init__(self):
        VelocityGrid(self.radius, self.n_velocity)
        SpaceGrid(self.n_space, self.spatial_dims)

    def build(self, dim: int = 3) -> tuple[VelocityGrid, SpaceGrid]:
        return VelocityGrid(self.radius, self.n_velocity, dim), SpaceGrid(self.n_space, self.spatial_dims)


@dataclass(frozen=True)
class ScheduleSection:
    T: float = 1.0
    N: int = 20

    def __post_init__(self):
        SplittingSchedule(self.T, self.N)

    def build(self) -> SplittingSchedule:
        return SplittingSchedule(self.T, self.N)


@dataclass(frozen=True)
class BarrierSection:
    enabled: bool = False
    delta: float = 1e-3
    C1: float = 1.0
    q: float = 8.0


@dataclass(frozen=True)
class PerturbationSection:
    kind: str = "separable-smooth"
    amplitude: float = 1e-2
    q: float = 8.0
    spatial_modes: int = 1
    seed: int = 0
    project: bool = True

    def __post_init__(self):
        self.spec()

    def spec(self) -> PerturbationSpec:
        return PerturbationSpec(self.kind, self.amplitude, self.q, self.spatial_modes, self.seed)


@dataclass(frozen=True)
class OutputSection:
    directory: str = "bsplit-out"
    csv_name: str = "diagnostics.csv"
    charts: bool = True


SECTIONS = {
    "physics": PhysParams,
    "grid": GridSection,
    "schedule": ScheduleSection,
    "stepper": StepperConfig,
    "quadrature": QuadratureSpec,
    "barrier": BarrierSection,
    "perturbation": PerturbationSection,
    "diagnostics": DiagnosticsConfig,
    "output": OutputSection,
}


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration, one frozen record per section."""

    physics: PhysParams = field(default_factory=PhysParams)
    grid: GridSection = field(default_factory=GridSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    stepper: StepperConfig = field(default_factory=StepperConfig)
    quadrature: QuadratureSpec = field(default_factory=QuadratureSpec)
    barrier: BarrierSection = field(default_factory=BarrierSection)
    perturbation: PerturbationSection = field(default_factory=PerturbationSection)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    output: OutputSection = field(default_factory=OutputSection)

    @property
    def regime_ok(self) -> bool:
        return self.physics.regime_ok

    def grids(self) -> tuple[VelocityGrid, SpaceGrid]:
        return self.grid.build(self.physics.dim)


_TRUE, _FALSE = {"true", "yes", "on", "1"}, {"false", "no", "off", "0"}


def _parse_value(kind: str, text: str):
    optional = kind.endswith("| None")
    base = kind.replace("| None", "").strip()
    if optional and text.lower() == "none":
        return None
    if base == "bool":
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if base == "int":
        return int(text)
    if base == "float":
        return float(text)
    if base == "tuple":
        return tuple(float(p) for p in text.split(",") if p.strip())
    if base == "str":
        if not text:
            raise ValueError("empty string")
        return text
    raise TypeError(f"unsupported field type {kind}")


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


def parse_config(text: str) -> RunConfig:
    """Parse configuration text; missing keys take their defaults."""
    values: dict[str, dict] = {}
    first_line: dict[str, int] = {}
    section = None
    seen: dict[tuple, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"line {lineno}: malformed section header {raw.strip()!r}")
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            values.setdefault(section, {})
            first_line.setdefault(section, lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside of any [section]")
        key, val = (p.strip() for p in line.split("=", 1))
        types = {f.name: f.type for f in dataclasses.fields(SECTIONS[section])}
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{section}]")
        if (section, key) in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} in [{section}] "
                              f"(first set on line {seen[(section, key)]})")
        seen[(section, key)] = lineno
        try:
            values[section][key] = _parse_value(types[key], val)
        except ValueError as err:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {err}") from None
    built = {}
    for name, cls in SECTIONS.items():
        try:
            built[name] = cls(**values.get(name, {}))
        except (ValueError, TypeError) as err:
            raise ConfigError(f"line {first_line.get(name, 0)}: invalid [{name}] section: {err}") from None
    cfg = RunConfig(**built)
    if not cfg.regime_ok:
        p = cfg.physics
        warnings.warn(f"gamma + 2s = {p.gamma + 2 * p.s:g} lies outside [0, 2]", RegimeWarning, stacklevel=2)
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    """Full text form; ``parse_config(serialize_config(c)) == c``."""
    out = []
    for name in SECTIONS:
        out.append(f"[{name}]")
        sec = getattr(cfg, name)
        for f in dataclasses.fields(sec):
            out.append(f"{f.name} = {_format_value(getattr(sec, f.name))}")
        out.append("")
    return "\n".join(out)


# --- snapshots -------------------------------------------------------------

MAGIC = b"BSPLIT1\0"
HEADER_FORMAT = "iiiidddddqqdqq"
HEADER_FIELDS = ("dim", "spatial_dims", "n_space", "n_velocity", "radius", "gamma", "s", "q",
                 "time_stamp", "position", "N", "T", "parity", "payload_len")


@dataclass(frozen=True)
class SnapshotHeader:
    dim: int
    spatial_dims: int
    n_space: int
    n_velocity: int
    radius: float
    gamma: float
    s: float
    q: float
    time_stamp: float
    position: int
    N: int
    T: float
    parity: int
    payload_len: int

    def grids(self) -> tuple[VelocityGrid, SpaceGrid]:
        return VelocityGrid(self.radius, self.n_velocity, self.dim), SpaceGrid(self.n_space, self.spatial_dims)

    def schedule(self) -> SplittingSchedule:
        return SplittingSchedule(self.T, self.N)


def write_snapshot(state: RunState, vgrid: VelocityGrid, sgrid: SpaceGrid, params: PhysParams, q: float,
                   target, byteorder: str = "<") -> None:
    """Write ``state`` to a path or binary file object."""
    if byteorder not in "<>":
        raise ValueError("byteorder must be '<' or '>'")
    vals = np.asarray(state.field.values)
    if vals.shape != (sgrid.size, vgrid.size):
        raise SnapshotError("field shape does not match the grids")
    sch = state.schedule
    head = struct.pack(byteorder + HEADER_FORMAT, vgrid.dim, sgrid.spatial_dims, sgrid.n_per_axis,
                       vgrid.n_per_axis, vgrid.radius, params.gamma, params.s, float(q),
                       state.field.time_stamp, state.position, sch.N, sch.T, state.position % 2, vals.size)
    body = MAGIC + byteorder.encode() + head + vals.astype(np.dtype(np.float64).newbyteorder(byteorder)).tobytes()
    blob = body + hashlib.sha256(body).digest()
    if hasattr(target, "write"):
        target.write(blob)
    else:
        Path(target).parent.mkdir(parents=True, exist_ok=True)
        Path(target).write_bytes(blob)


def read_snapshot(source, expect: tuple[VelocityGrid, SpaceGrid] | None = None) -> tuple[SnapshotHeader, RunState]:
    """Read a snapshot; ``expect`` (velocity grid, space grid) enforces compatibility."""
    blob = source.read() if hasattr(source, "read") else Path(source).read_bytes()
    if len(blob) < len(MAGIC) + 1 or blob[: len(MAGIC)] != MAGIC:
        raise SnapshotError("not a snapshot file (magic mismatch)")
    if len(blob) < 32 or hashlib.sha256(blob[:-32]).digest() != blob[-32:]:
        raise SnapshotError("snapshot checksum mismatch (truncated or corrupted file)")
    order = blob[len(MAGIC): len(MAGIC) + 1].decode()
    if order not in "<>":
        raise SnapshotError(f"unknown endianness tag {order!r}")
    off = len(MAGIC) + 1
    size = struct.calcsize(order + HEADER_FORMAT)
    header = SnapshotHeader(*struct.unpack(order + HEADER_FORMAT, blob[off: off + size]))
    vgrid, sgrid = header.grids()
    if header.payload_len != vgrid.size * sgrid.size:
        raise SnapshotError("payload length inconsistent with header dimensions")
    payload = np.frombuffer(blob[off + size: -32], dtype=np.dtype(np.float64).newbyteorder(order))
    if payload.size != header.payload_len:
        raise SnapshotError("payload size mismatch")
    if expect is not None:
        ev, es = expect
        if (ev.n_per_axis, ev.radius, ev.dim) != (vgrid.n_per_axis, vgrid.radius, vgrid.dim):
            raise SnapshotError(f"snapshot velocity grid (n={vgrid.n_per_axis}, R={vgrid.radius:g}) does not "
                                f"match the run (n={ev.n_per_axis}, R={ev.radius:g})")
        if (es.n_per_axis, es.spatial_dims) != (sgrid.n_per_axis, sgrid.spatial_dims):
            raise SnapshotError("snapshot space grid does not match the run")
    if header.parity != header.position % 2:
        raise SnapshotError("header parity inconsistent with schedule position")
    vals = payload.astype(np.float64).reshape(sgrid.size, vgrid.size)
    state = RunState(DistributionField(vals, header.time_stamp), header.position, header.schedule())
    return header, state


# --- diagnostics CSV ------------------------------------------------------------

BASE_COLUMNS = ("time", "kind", "mass", "momentum_1", "momentum_2", "momentum_3", "energy", "entropy")
TAIL_COLUMNS = ("barrier_margin", "negative_mass")


def csv_columns(q_list, constant_names=()) -> list[str]:
    """Documented column order: base moments, one ``sup_q*`` per exponent, barrier
    margin, negative mass, then ``const_*`` fitted constants."""
    return (list(BASE_COLUMNS) + [f"sup_q{q:g}" for q in q_list] + list(TAIL_COLUMNS)
            + [f"const_{c}" for c in constant_names])


def emit_csv(rows, path, q_list=(8.0,)) -> list[str]:
    """Write diagnostics rows; constants absent from a row are left blank."""
    consts = []
    for r in rows:
        for k in r:
            if k.startswith("const_") and k[6:] not in consts:
                consts.append(k[6:])
    cols = csv_columns(q_list, consts)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if c not in r else (r[c] if isinstance(r[c], str) else repr(float(r[c])))
                        for c in cols])
    return cols


def read_csv(path) -> tuple[list[str], list[dict]]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        cols = next(rd)
        rows = []
        for rec in rd:
            row = {}
            for c, v in zip(cols, rec):
                if v == "":
                    continue
                row[c] = v if c == "kind" else float(v)
            rows.append(row)
    return cols, rows


# --- SVG charts -----------------------------------------------------------------

_W, _H, _PAD = 640, 400, 60


def _scale(vals, log):
    v = np.asarray(vals, dtype=float)
    return np.log10(v) if log else v


def chart_points(x, y, logx=False, logy=False) -> np.ndarray:
    """Pixel coordinates of a series inside the plotting frame."""
    xs, ys = _scale(x, logx), _scale(y, logy)
    lo_x, hi_x = (xs.min(), xs.max()) if xs.size else (0.0, 1.0)
    lo_y, hi_y = (ys.min(), ys.max()) if ys.size else (0.0, 1.0)
    span_x = hi_x - lo_x or 1.0
    span_y = hi_y - lo_y or 1.0
    px = _PAD + (xs - lo_x) / span_x * (_W - 2 * _PAD)
    py = _H - _PAD - (ys - lo_y) / span_y * (_H - 2 * _PAD)
    return np.column_stack([px, py])


def svg_chart(x, y, title: str, xlabel: str, ylabel: str, logx=False, logy=False) -> str:
    """Self-contained SVG line chart (single points become a marker)."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    ok = np.isfinite(x) & np.isfinite(y)
    if logx:
        ok &= x > 0
    if logy:
        ok &= y > 0
    x, y = x[ok], y[ok]
    pts = chart_points(x, y, logx, logy)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
             f'viewBox="0 0 {_W} {_H}">',
             f'<rect width="{_W}" height="{_H}" fill="white"/>',
             f'<text x="{_W / 2}" y="24" text-anchor="middle" font-size="16">{title}</text>',
             f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - _PAD}" y2="{_H - _PAD}" stroke="black"/>',
             f'<line x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{_H - _PAD}" stroke="black"/>',
             f'<text x="{_W / 2}" y="{_H - 15}" text-anchor="middle" font-size="13">{xlabel}</text>',
             f'<text x="18" y="{_H / 2}" text-anchor="middle" font-size="13" '
             f'transform="rotate(-90 18 {_H / 2})">{ylabel}</text>']
    if x.size:
        fmt = "{:.4g}"
        parts.append(f'<text x="{_PAD}" y="{_H - _PAD + 16}" font-size="11">{fmt.format(x.min())}</text>')
        parts.append(f'<text x="{_W - _PAD}" y="{_H - _PAD + 16}" text-anchor="end" font-size="11">'
                     f'{fmt.format(x.max())}</text>')
        parts.append(f'<text x="{_PAD - 4}" y="{_H - _PAD}" text-anchor="end" font-size="11">'
                     f'{fmt.format(y.min())}</text>')
        parts.append(f'<text x="{_PAD - 4}" y="{_PAD + 4}" text-anchor="end" font-size="11">'
                     f'{fmt.format(y.max())}</text>')
    if len(pts) == 1:
        parts.append(f'<circle cx="{pts[0, 0]:.2f}" cy="{pts[0, 1]:.2f}" r="4" fill="steelblue"/>')
    elif len(pts) > 1:
        coords = " ".join(f"{a:.2f},{b:.2f}" for a, b in pts)
        parts.append(f'<polyline fill="none" stroke="steelblue" stroke-width="2" points="{coords}"/>')
    parts.append("</svg>")
    return "\n".join(parts)


def emit_charts(csv_path, out_dir, q: float | None = None) -> list[Path]:
    """Decay (log-log), barrier margin and moment drift charts from a diagnostics CSV."""
    cols, rows = read_csv(csv_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t = np.array([r.get("time", math.nan) for r in rows])
    sup_cols = [c for c in cols if c.startswith("sup_q")]
    col = f"sup_q{q:g}" if q is not None else (sup_cols[0] if sup_cols else None)
    written = []
    if col is not None:
        y = np.array([r.get(col, math.nan) for r in rows])
        p = out / "decay.svg"
        p.write_text(svg_chart(t, y, f"decay of {col}", "time t", f"{col} (log)", logx=True, logy=True))
        written.append(p)
    y = np.array([r.get("barrier_margin", math.nan) for r in rows])
    p = out / "barrier_margin.svg"
    p.write_text(svg_chart(t, y, "barrier margin", "time t", "min U(t) g(v) - |f|"))
    written.append(p)
    m = np.array([r.get("mass", math.nan) for r in rows])
    e = np.array([r.get("energy", math.nan) for r in rows])
    drift = (np.abs(m - m[0]) / abs(m[0]) + np.abs(e - e[0]) / abs(e[0])) if len(rows) else m
    p = out / "moment_drift.svg"
    p.write_text(svg_chart(t, drift, "conserved-moment drift", "time t",
                           "relative mass + energy drift"))
    written.append(p)
    return written


# --- command line ---------------------------------------------------------------

def build_run(cfg: RunConfig, need_engine: bool = True):
    """Grids, engine (if requested) and initial field for a config."""
    from .collision import CollisionEngine
    from .initial_data import make_perturbation, project_moments

    vgrid, sgrid = cfg.grids()
    engine = CollisionEngine(cfg.physics, vgrid, cfg.quadrature) if need_engine else None
    f0 = make_perturbation(cfg.perturbation.spec(), vgrid, sgrid)
    if cfg.perturbation.project:
        f0 = project_moments(f0, vgrid)
    return vgrid, sgrid, engine, f0


def _barrier(cfg: RunConfig):
    from .diagnostics import BarrierSpec
    b = cfg.barrier
    return BarrierSpec(b.delta, b.C1, b.q) if b.enabled else None


def _finish(cfg: RunConfig, result, vgrid, sgrid, out: Path, tag: str) -> int:
    q = cfg.perturbation.q
    for snap in result.snapshots:
        write_snapshot(snap, vgrid, sgrid, cfg.physics, q, out / f"{tag}_{snap.position:06d}.snap")
    csv_path = out / cfg.output.csv_name
    emit_csv(result.rows, csv_path, cfg.diagnostics.q_list)
    if cfg.output.charts:
        emit_charts(csv_path, out)
    report = {"abort_reason": result.abort_reason, "detail": result.abort_detail,
              "position": result.state.position, "time": result.state.field.time_stamp,
              "paper_regime": result.paper_regime, "regime_ok": cfg.regime_ok,
              "jumps": result.jumps}
    (out / f"{tag}_report.json").write_text(json.dumps(report, indent=2))
    print(f"{tag}: {result.abort_reason} at position {result.state.position} "
          f"(t = {result.state.field.time_stamp:.6g}); outputs in {out}")
    if result.abort_reason == "barrier-violated":
        print(f"barrier violated: {result.abort_detail}")
    return 0 if result.abort_reason in ("completed", "barrier-violated") else 2


def _load_config(path) -> RunConfig:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RegimeWarning)
        cfg = parse_config(Path(path).read_text())
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    return cfg


def cmd_run(args) -> int:
    from .splitting import run
    cfg = _load_config(args.config)
    vgrid, sgrid, engine, f0 = build_run(cfg)
    out = Path(cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(serialize_config(cfg))
    result = run(f0, cfg.schedule.build(), engine, vgrid, sgrid, cfg.stepper, _barrier(cfg), cfg.diagnostics)
    return _finish(cfg, result, vgrid, sgrid, out, "run")


def cmd_resume(args) -> int:
    from .collision import CollisionEngine
    from .splitting import resume
    cfg = _load_config(args.config)
    vgrid, sgrid = cfg.grids()
    header, state = read_snapshot(args.snapshot, expect=(vgrid, sgrid))
    extra = cfg.schedule.T if args.extend is None else args.extend
    engine = CollisionEngine(cfg.physics, vgrid, cfg.quadrature)
    result = resume(state, extra, engine, vgrid, sgrid, cfg.stepper, _barrier(cfg), cfg.diagnostics,
                    parity=header.parity)
    out = Path(cfg.output.directory) / "resume"
    out.mkdir(parents=True, exist_ok=True)
    return _finish(cfg, result, vgrid, sgrid, out, "resume")


def cmd_diagnose(args) -> int:
    from .diagnostics import hydro_fields, near_equilibrium_implies_hydro, weighted_sup
    header, state = read_snapshot(args.snapshot)
    vgrid, _ = header.grids()
    vals = state.field.values
    hf = hydro_fields(vals, vgrid)
    mass, *mom, energy = hf.totals()
    print(f"time {header.time_stamp:.6g}  position {header.position}/{header.N}  parity {header.parity}")
    print(f"mass {mass:.12g}  momentum {' '.join(f'{m:.3e}' for m in mom)}  energy {energy:.12g}")
    print(f"entropy {hf.entropy.mean():.12g}  negative mass {hf.negative_mass.sum():.3e}")
    for q in sorted({4.0, 8.0, header.q}):
        print(f"sup <v>^{q:g} |f| = {weighted_sup(vals, vgrid, q):.6e}")
    q_h = max(header.q, vgrid.dim + 2.5)
    res = near_equilibrium_implies_hydro(vals, vgrid, q_h)
    print(f"hydrodynamic bounds (q = {q_h:g}): {res}")
    return 0


def cmd_verify_lemmas(args) -> int:
    from .collision import CollisionEngine
    from .diagnostics import lemma_suite
    cfg = _load_config(args.config)
    vgrid, _ = cfg.grids()
    engine = CollisionEngine(cfg.physics, vgrid, cfg.quadrature)
    n = args.samples or cfg.diagnostics.lemma_samples
    reports = lemma_suite(engine, n_samples=n, n_cancellation=args.cancellation)
    out = Path(cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "lemmas.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "samples", "fitted_constant", "half_constant", "relative_change", "passed"])
        for r in reports:
            w.writerow([r.name, r.samples, repr(r.fitted_constant), repr(r.half_constant),
                        repr(r.relative_change), r.passed])
            print(f"{r.name:14s} n={r.samples:3d} C={r.fitted_constant:.5g} "
                  f"half={r.half_constant:.5g} change={r.relative_change:.3%} "
                  f"{'PASS' if r.passed else 'FAIL'}")
    return 0


def cmd_selftest(args) -> int:
    results = selftest()
    for name, ok in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return 0 if all(ok for _, ok in results) else 1


def selftest() -> list[tuple[str, bool]]:
    """Quick deterministic example checks; no files are read or written."""
    from .collision import CollisionEngine
    from .diagnostics import (GAUSSIAN_ENTROPY_3D, GWeight, aniso_distance, c1_of_q,
                              equilibration_monitor, hydro_fields)
    from .homogeneous import collision_rhs
    from .initial_data import make_perturbation, project_moments, validate_envelope
    from .transport import MollifierSpec, mollify, transport_step

    out = []

    def check(name, fn):
        try:
            out.append((name, bool(fn())))
        except Exception as err:  # noqa: BLE001 - report, do not crash
            out.append((f"{name} ({type(err).__name__}: {err})", False))

    vg = VelocityGrid(6.0, 16)
    zero = np.zeros((1, vg.size))
    hf = hydro_fields(zero, vg)
    check("maxwellian mass 1", lambda: abs(hf.mass[0] - 1) < 1e-6)
    check("maxwellian energy 3", lambda: abs(hf.energy[0] - 3) < 1e-5)
    check("maxwellian entropy", lambda: abs(hf.entropy[0] - GAUSSIAN_ENTROPY_3D) < 1e-4)
    check("aniso distance equal speeds", lambda: abs(aniso_distance([1, 0, 0], [0, 1, 0]) - math.sqrt(2)) < 1e-15)
    check("c1(10) = 0.005", lambda: abs(c1_of_q(10) - 0.005) < 1e-15)
    g = GWeight(8.0)
    check("g >= <v>^-q and g <= 2", lambda: bool(np.all(g(vg.nodes) >= (1 + vg.speed ** 2) ** -4)
                                                 and np.all(g(vg.nodes) <= 2)))
    sg = SpaceGrid(16, 1)
    x = sg.nodes[:, 0]
    wave = np.cos(2 * np.pi * 3 * x)[:, None] * np.ones((1, vg.size))
    tau = 0.137
    exact = np.cos(2 * np.pi * 3 * (x[:, None] - 2 * tau * vg.nodes[None, :, 0]))
    check("transport plane wave", lambda: np.abs(transport_step(wave, vg, sg, tau) - exact).max() < 1e-12)
    const = np.ones((sg.size, 5))
    check("mollifier keeps constants", lambda: np.abs(mollify(const, sg, MollifierSpec(0.25)) - 1).max() < 1e-14)
    f0 = make_perturbation(PerturbationSpec(), vg, sg)
    p = project_moments(f0, vg)
    check("projection idempotent", lambda: np.abs(project_moments(p, vg).values - p.values).max() < 1e-12)
    check("envelope boundary is strict", lambda: not validate_envelope(
        (1 + vg.speed ** 2) ** -4 * 1e-2, vg, 1e-2, 8.0)[0])
    check("config roundtrip", lambda: parse_config(serialize_config(RunConfig())) == RunConfig())

    def snap():
        buf = io.BytesIO()
        st = RunState(DistributionField(np.random.default_rng(0).normal(size=(sg.size, vg.size))), 0,
                      SplittingSchedule(1.0, 2))
        write_snapshot(st, vg, sg, PhysParams(), 8.0, buf)
        buf.seek(0)
        return np.array_equal(read_snapshot(buf)[1].field.values, st.field.values)
    check("snapshot roundtrip", snap)
    t = np.linspace(1, 10, 40)
    check("monitor recovers p = 2", lambda: abs(equilibration_monitor(t, 3 * t ** -2.0).p - 2) < 0.1)
    small = VelocityGrid(6.0, 8)
    eng = CollisionEngine(PhysParams(), small)
    check("zero is a fixed point", lambda: not np.any(collision_rhs(eng, np.zeros(small.size))))
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="bsplit", description="Splitting solver for the non-cutoff "
                                     "Boltzmann equation near a Maxwellian.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run a configured splitting simulation")
    p.add_argument("config")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("verify-lemmas", help="fit the inequality constants on a sample family")
    p.add_argument("config")
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--cancellation", type=int, default=10, help="number of cancellation sample points")
    p.set_defaults(func=cmd_verify_lemmas)
    p = sub.add_parser("diagnose", help="print diagnostics of a snapshot")
    p.add_argument("snapshot")
    p.set_defaults(func=cmd_diagnose)
    p = sub.add_parser("resume", help="continue a run from a snapshot")
    p.add_argument("snapshot")
    p.add_argument("config")
    p.add_argument("--extend", type=float, default=None, help="extra time (default: schedule T of config)")
    p.set_defaults(func=cmd_resume)
    p = sub.add_parser("selftest", help="run the built-in example checks")
    p.set_defaults(func=cmd_selftest)
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SnapshotError, ParityError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
