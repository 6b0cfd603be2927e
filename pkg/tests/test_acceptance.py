"""Acceptance criteria 1-12 at their stated tolerances.

Each test records one PASS/FAIL line (printed immediately and again in the
terminal summary) before asserting, so a failing criterion still reports
what was measured.
"""
import io
import math

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES

from bsplit.cli_io import read_snapshot, write_snapshot
from bsplit.collision import CarlemanQuadrature, CollisionEngine, Density, QuadratureSpec, cancellation_defect, q_s
from bsplit.core import DistributionField, PhysParams, SpaceGrid, VelocityGrid, maxwellian
from bsplit.diagnostics import (BarrierSpec, GWeight, SampleFamily, equilibration_monitor, good_bad_split,
                                hydro_fields, lemma_suite, weighted_sup)
from bsplit.homogeneous import StepperConfig, collision_rhs
from bsplit.initial_data import PerturbationSpec, make_perturbation, project_moments
from bsplit.splitting import DiagnosticsConfig, SplittingSchedule, matched_jump_ratios, resume, run
from bsplit.transport import transport_step

pytestmark = pytest.mark.slow

HOMOGENEOUS = SpaceGrid()


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)


def projected(kind, amplitude, vgrid, sgrid, modes=1):
    spec = PerturbationSpec(kind, amplitude, 8.0, modes)
    return project_moments(make_perturbation(spec, vgrid, sgrid), vgrid)


def moment_drift(rows):
    """Largest relative drift of mass and energy, and of momentum per unit mass."""
    m = np.array([r["mass"] for r in rows])
    e = np.array([r["energy"] for r in rows])
    p = np.array([[r[f"momentum_{k}"] for k in (1, 2, 3)] for r in rows])
    return dict(mass=np.abs(m - m[0]).max() / m[0], energy=np.abs(e - e[0]).max() / e[0],
                momentum=np.linalg.norm(p - p[0], axis=1).max() / m[0])


# 1 ----------------------------------------------------------------------------

def test_c01_equilibrium_fixed_point(engine16, grid16):
    zero = DistributionField(np.zeros((1, grid16.size)))
    res = run(zero, SplittingSchedule(1.0, 20), engine16, grid16, HOMOGENEOUS)
    worst = max(r["sup_q8"] for r in res.rows)
    ok = res.abort_reason == "completed" and worst < 1e-6
    record(1, ok, f"max_t sup<v>^8|f| = {worst:.1e} (< 1e-6), t <= 1, n = 16")
    assert ok


# 2 ----------------------------------------------------------------------------

def test_c02_conservation(engine16, grid16):
    sg = SpaceGrid(16, 1)
    f0 = projected("random-fourier", 1e-2, grid16, sg)
    sch = SplittingSchedule(1.0, 20)
    on = moment_drift(run(f0, sch, engine16, grid16, sg, StepperConfig(conserve=True)).rows)
    off = moment_drift(run(f0, sch, engine16, grid16, sg, StepperConfig(conserve=False)).rows)
    fine_engine = CollisionEngine(PhysParams(), grid16, QuadratureSpec().doubled("hyperplane"))
    off2 = moment_drift(run(f0, sch, fine_engine, grid16, sg, StepperConfig(conserve=False)).rows)
    on_max, off_max, off2_max = max(on.values()), max(off.values()), max(off2.values())
    shrink = off_max / off2_max if off2_max > 0 else math.inf
    ok = on_max < 1e-12 and off_max < 1e-3 and shrink >= 4.0
    record(2, ok, f"drift ON {on_max:.1e} (< 1e-12); OFF {off_max:.1e} (< 1e-3); "
                  f"OFF shrink under doubled hyperplane nodes {shrink:.2f}x (>= 4x)")
    assert on_max < 1e-12
    assert off_max < 1e-3
    assert shrink >= 4.0


# 3 ----------------------------------------------------------------------------

def test_c03_entropy_trend(engine16, grid16):
    f0 = projected("separable-smooth", 1e-2, grid16, HOMOGENEOUS)
    res = run(f0, SplittingSchedule(1.0, 20), engine16, grid16, HOMOGENEOUS)
    H = np.array([r["entropy"] for r in res.rows])
    kinds = [r["kind"] for r in res.rows]
    rises = [H[i] - H[i - 1] for i in range(1, len(H)) if kinds[i] == "D"]
    worst = max(rises)
    ok = res.abort_reason == "completed" and worst <= 1e-4
    record(3, ok, f"max entropy increase over {len(rises)} collision substeps = {worst:.1e} (<= 1e-4)")
    assert ok


# 4 ----------------------------------------------------------------------------

def test_c04_cancellation_identity(grid16):
    params = PhysParams()
    family = SampleFamily()
    shapes = family.shapes(grid16.nodes) * grid16.active[None, :]
    errors = {}
    for name, quad in (("default", QuadratureSpec()), ("doubled", QuadratureSpec().doubled("hyperplane"))):
        geom = CarlemanQuadrature(params, grid16, quad)
        errs = []
        for u in family.parameters(10):
            prm = family.unpack(u)
            F = Density(grid16, family.amplitude * prm["coef"] @ shapes, 1.0)
            lhs, rhs = cancellation_defect(F, prm["point"], geom)
            errs.append(abs(lhs - rhs) / abs(rhs))
        errors[name] = max(errs)
    ok = errors["default"] < 0.05 and errors["doubled"] < 0.02
    record(4, ok, f"max relative error at 10 points: default {100 * errors['default']:.2f}% (< 5%), "
                  f"doubled nodes {100 * errors['doubled']:.2f}% (< 2%)")
    assert ok


# 5 ----------------------------------------------------------------------------

def test_c05_barrier_propagation(engine16, grid16):
    delta, q, T = 1e-3, 8.0, 2.0
    f0 = projected("separable-smooth", delta, grid16, HOMOGENEOUS)
    g = GWeight(q)
    # empirical bound of the right-hand side against the barrier at t = 0
    fitted = float(np.max(np.abs(collision_rhs(engine16, f0.values)[0]) / (delta * g(grid16.nodes))))
    barrier = BarrierSpec(delta, 2.0 * fitted, q)
    res = run(f0, SplittingSchedule(T, 40), engine16, grid16, HOMOGENEOUS, barrier=barrier)
    margins = np.array([r["barrier_margin"] for r in res.rows])
    finite = margins[np.isfinite(margins)]
    flag_ok = res.paper_regime == (math.log(delta) + barrier.C1 * T < math.log(0.5))
    ok = res.abort_reason == "completed" and bool(np.all(margins > 0)) and flag_ok
    record(5, ok, f"C1 = {barrier.C1:.1f}; min margin {finite.min():.2e} over {len(finite)} rows with finite U "
                  f"({len(margins) - len(finite)} rows with U overflowed); paper_regime = {res.paper_regime}")
    assert ok


# 6 ----------------------------------------------------------------------------

def test_c06_good_part_sign(engine16, grid16):
    geom = engine16.geom
    everywhere = lambda p: np.ones(np.shape(p)[:-1], bool)  # noqa: E731
    results = []
    for q in (8.0, 12.0, 16.0):
        g = GWeight(q)
        # half of the envelope eps <v>^-q, eps = 1e-2
        f = 0.5e-2 * g(grid16.nodes) * grid16.active
        for r in (4.0, 5.0, 6.0):
            v_bar = np.array([r, 0.0, 0.0])
            G, B = good_bad_split(f, grid16, v_bar, q, g, geom)
            total = q_s(Density(grid16, f, 1.0, everywhere), g, v_bar, geom)
            results.append((q, r, G, B, total, abs(G + B - total) / abs(total)))
    negative = sum(G < 0 for _, _, G, *_ in results)
    recompose = max(rel for *_, rel in results)
    ok = negative == 9 and recompose < 1e-10
    record(6, ok, f"G < 0 in {negative}/9 cases (max G = {max(G for _, _, G, *_ in results):.1e}); "
                  f"G + B = Q_s to {recompose:.1e} (< 1e-10)")
    assert recompose < 1e-10
    assert negative == 9


# 7 ----------------------------------------------------------------------------

def test_c07_transport_exactness():
    vg = VelocityGrid(6.0, 8)
    worst_phase, worst_group = 0.0, 0.0
    for dims, n in ((1, 32), (2, 16), (3, 8)):
        sg = SpaceGrid(n, dims)
        k = np.array([1, -2, 3][:dims])
        X = sg.nodes
        V = vg.nodes[:, :dims]
        f = np.cos(2 * np.pi * X @ k)[:, None] * np.ones((1, vg.size))
        tau = 0.137
        exact = np.cos(2 * np.pi * (X @ k)[:, None] - 2 * np.pi * 2 * tau * (V @ k)[None, :])
        worst_phase = max(worst_phase, np.abs(transport_step(f, vg, sg, tau) - exact).max())
        rng = np.random.default_rng(dims)
        # a real field cannot carry a phase at the Nyquist frequency; test without it
        spec = np.fft.fftn(rng.normal(size=sg.shape + (vg.size,)), axes=tuple(range(dims)))
        for ax in range(dims):
            idx = [slice(None)] * (dims + 1)
            idx[ax] = n // 2
            spec[tuple(idx)] = 0.0
        r = np.fft.ifftn(spec, axes=tuple(range(dims))).real.reshape(f.shape)
        a, b = 0.05, 0.21
        two = transport_step(transport_step(r, vg, sg, a), vg, sg, b)
        worst_group = max(worst_group, np.abs(two - transport_step(r, vg, sg, a + b)).max() / np.abs(r).max())
    ok = worst_phase < 1e-12 and worst_group < 1e-12
    record(7, ok, f"plane-wave error {worst_phase:.1e}, group-property error {worst_group:.1e} (< 1e-12)")
    assert ok


# 8 ----------------------------------------------------------------------------

def test_c08_mollifier_scaling(small_engine, small_grid):
    sg = SpaceGrid(64, 1)
    f0 = projected("random-fourier", 1e-2, small_grid, sg)
    coarse = run(f0, SplittingSchedule(0.5, 4), small_engine, small_grid, sg)
    fine = run(f0, SplittingSchedule(0.5, 8), small_engine, small_grid, sg,
               diag=DiagnosticsConfig(snapshot_every=2))
    ratios = matched_jump_ratios(coarse, fine, sg)
    ok = bool(np.all((ratios >= 0.2) & (ratios <= 0.3)))
    record(8, ok, f"jump ratios h/2 : h = {', '.join(f'{r:.3f}' for r in ratios)} (in [0.2, 0.3]), h = 1/8")
    assert ok


# 9 ----------------------------------------------------------------------------

def test_c09_splitting_self_convergence(small_engine, small_grid):
    sg = SpaceGrid(16, 1)
    f0 = projected("random-fourier", 1e-2, small_grid, sg)
    final = {N: run(f0, SplittingSchedule(0.5, N), small_engine, small_grid, sg,
                    diag=DiagnosticsConfig(every=0)).state.field.values for N in (16, 32, 64)}
    d1 = weighted_sup(final[16] - final[32], small_grid, 8.0)
    d2 = weighted_sup(final[32] - final[64], small_grid, 8.0)
    ratio = d1 / d2
    ok = ratio >= 1.8
    record(9, ok, f"sup<v>^8 differences {d1:.2e} / {d2:.2e} = {ratio:.2f} (>= 1.8), "
                  f"observed order {math.log2(ratio):.2f}")
    assert ok


# 10 ---------------------------------------------------------------------------

def test_c10_equilibration_trend(engine16, grid16):
    t = np.linspace(0.1, 10.0, 40)
    synthetic = equilibration_monitor(t, 0.7 * t ** -2.0)
    f0 = projected("separable-smooth", 5e-2, grid16, HOMOGENEOUS)
    res = run(f0, SplittingSchedule(4.0, 80), engine16, grid16, HOMOGENEOUS)
    times = np.array([r["time"] for r in res.rows])
    sup8 = np.array([r["sup_q8"] for r in res.rows])
    # below this level the series is round-off in the last digits
    floor = 1e-10 * sup8[0]
    rep = equilibration_monitor(times, sup8, floor=floor)
    ok = (res.abort_reason == "completed" and rep.p > 0 and rep.monotone_fraction >= 0.9
          and abs(synthetic.p - 2.0) < 0.1)
    record(10, ok, f"p = {rep.p:.2f} (> 0), non-increasing pairs {100 * rep.monotone_fraction:.0f}% (>= 90%), "
                   f"floor {floor:.1e}; synthetic p = {synthetic.p:.4f} (2 +/- 5%)")
    assert ok


# 11 ---------------------------------------------------------------------------

def test_c11_lemma_suite_stability(engine16):
    reports = {r.name: r for r in lemma_suite(engine16, n_samples=50)}
    tracked = ("qs_bound", "kernel_inner", "kernel_outer", "commutator")
    changes = {n: reports[n].relative_change for n in tracked}
    coercive = reports["coercivity"].fitted_constant
    ok = all(c < 0.10 for c in changes.values()) and coercive > 0
    detail = ", ".join(f"{n} {100 * c:.1f}%" for n, c in changes.items())
    record(11, ok, f"change 25 -> 50 samples: {detail} (< 10%); coercivity constant {coercive:.2e} (> 0)")
    assert ok


# 12 ---------------------------------------------------------------------------

def test_c12_determinism_and_persistence(small_engine, small_grid):
    sg = SpaceGrid(8, 1)
    f0 = projected("random-fourier", 1e-2, small_grid, sg)
    full = run(f0, SplittingSchedule(0.2, 8), small_engine, small_grid, sg)
    again = run(f0, SplittingSchedule(0.2, 8), small_engine, small_grid, sg)
    identical = (np.array_equal(full.state.field.values, again.state.field.values)
                 and repr(full.rows) == repr(again.rows))
    half = run(f0, SplittingSchedule(0.1, 4), small_engine, small_grid, sg)
    buf = io.BytesIO()
    write_snapshot(half.state, small_grid, sg, PhysParams(), 8.0, buf)
    header, back = read_snapshot(io.BytesIO(buf.getvalue()), expect=(small_grid, sg))
    roundtrip = np.array_equal(back.field.values, half.state.field.values) and back.position == 4
    rest = resume(back, 0.1, small_engine, small_grid, sg, parity=header.parity)
    gap = np.abs(rest.state.field.values - full.state.field.values).max()
    ok = identical and roundtrip and gap <= 1e-12
    record(12, ok, f"bit-identical reruns: {identical}; snapshot bit-exact: {roundtrip}; "
                   f"run(T) vs run(T/2)+resume max difference {gap:.1e} (<= 1e-12)")
    assert ok
