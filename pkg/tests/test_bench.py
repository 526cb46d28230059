import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from stokes_els.bench import (AGGREGATE_COLUMNS, CSV_COLUMNS, STRATEGIES, Scenario, ScenarioError, build_geometry,
                              default_targets, in_fluid, main, min_solves, run_scenario, run_snapshot_batch,
                              snapshot_panels, sweep)

SMALL_FISH = {"preset": "fish", "n_panels": 48}
REFINE = {"type": "refine", "panels": [0, 1], "m": 4}


def test_circle_direct_hbs():
    rep = run_scenario({"name": "c", "geometry": {"preset": "circle", "n_panels": 16}, "strategy": "Direct-HBS",
                        "repeats": 1})
    assert rep.E <= 1e-8
    assert rep.T_comp > 0 and rep.T_inv > 0 and rep.T_Dsol > 0


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_every_strategy_on_refined_fish(strategy):
    rep = run_scenario({"name": "f", "geometry": SMALL_FISH, "strategy": strategy, "action": REFINE,
                        "repeats": 1})
    assert rep.E <= 1e-8
    assert (rep.N_k, rep.N_c, rep.N_p) == (736, 32, 128)
    row = rep.row()
    assert all(v == "" or v >= 0 for k, v in row.items() if k.startswith("T_"))
    if strategy.startswith("Direct"):
        assert row["T_Dsol"] != "" and row["n_iter"] == 0
    elif strategy.startswith("PGMRES"):
        assert row["T_PGsol"] != "" and row["n_iter"] <= 3
    else:
        assert row["T_Gsol"] != "" and row["n_iter"] > 3


def test_add_holes_direct_local():
    action = {"type": "add_holes", "holes": [{"preset": "circle", "center": [0.2, 0.0], "scale": 0.15,
                                              "n_panels": 10}]}
    rep = run_scenario({"name": "h", "geometry": {"preset": "fish", "n_panels": 32}, "strategy": "Direct-Local",
                        "action": action, "repeats": 1})
    assert rep.N_c == 0 and rep.N_p == 160
    assert rep.E <= 1e-8


def test_report_fields_deterministic():
    s = {"name": "d", "geometry": SMALL_FISH, "strategy": "GMRES-Local", "action": REFINE, "repeats": 1, "seed": 4}
    a, b = run_scenario(s), run_scenario(s)
    for k in ("N_k", "N_c", "N_p", "k", "k_kc", "k_kp", "k_pk", "n_iter", "E"):
        assert getattr(a, k) == getattr(b, k)


def test_diagnostics_conditioning():
    rep = run_scenario({"name": "d", "geometry": SMALL_FISH, "strategy": "Direct-Local", "action": REFINE,
                        "repeats": 1, "diagnostics": True})
    cond = rep.diagnostics["conditioning"]
    assert cond["kappa_W"] <= cond["bound"]


@pytest.mark.parametrize("bad", [
    {"name": "x", "geometry": SMALL_FISH, "strategy": "Direct-Local"},
    {"name": "x", "geometry": SMALL_FISH, "strategy": "Fast"},
    {"name": "x", "geometry": SMALL_FISH, "colour": "red"},
    {"name": "x", "geometry": SMALL_FISH, "eps_compress": 2.0},
    {"name": "x", "geometry": SMALL_FISH, "action": {"type": "explode"}},
    {"geometry": SMALL_FISH},
])
def test_invalid_scenarios(bad):
    with pytest.raises(ValueError):
        Scenario.from_dict(bad)


def test_scenario_roundtrip():
    s = Scenario.from_dict({"name": "r", "geometry": SMALL_FISH, "strategy": "GMRES-HBS"})
    assert Scenario.from_dict(s.to_dict()) == s


def test_geometry_specs():
    assert build_geometry({"preset": "channel", "n_panels": 20}).N == 320
    lat = build_geometry({"lattice": "star_lattice"})
    assert len(lat.components) == 9 and lat.N == 9 * 16 * 16
    comps = build_geometry({"components": [{"preset": "circle", "n_panels": 12},
                                           {"preset": "circle", "scale": 0.2, "n_panels": 6}]})
    assert [c.role for c in comps.components] == ["wall", "obstacle"]


def test_geometry_errors():
    from stokes_els import GeometryError
    with pytest.raises(GeometryError):
        build_geometry({"components": [{"preset": "circle", "n_panels": 12},
                                       {"preset": "circle", "center": [2.0, 0.0], "scale": 0.2, "n_panels": 6}]})
    with pytest.raises(GeometryError):
        build_geometry({"preset": "nowhere"})


def test_targets_in_fluid():
    d = build_geometry({"preset": "fish", "n_panels": 32})
    pts = default_targets(d, 20, seed=1)
    assert len(pts) == 20 and np.all(in_fluid(d, pts))


def test_min_solves():
    assert min_solves(10.0, 2.0, 1.0) == 10
    assert min_solves(10.0, 1.0, 2.0) == float("inf")


def test_sweep_panels():
    s = Scenario.from_dict({"name": "s", "geometry": {"preset": "circle"}, "strategy": "Direct-HBS",
                            "repeats": 1})
    reps = sweep(s, "N", [8, 16])
    assert [r.N_k for r in reps] == [128, 256]
    assert reps[0].scenario == "s[N=8]"


# -- snapshot batches -----------------------------------------------------

LATTICE2 = {"lattice": {"nx": 2, "ny": 2}, "n_panels": 32}


def _near_bodies():
    th = [0.0, 2 * np.pi / 5, 4 * np.pi / 5, 6 * np.pi / 5, 8 * np.pi / 5, 0.0]
    cells = [(0, 0), (1, 0), (0, 1), (1, 1), (0, 0), (1, 1)]
    return [(cx + 0.43 * np.cos(t), cy + 0.43 * np.sin(t)) for (cx, cy), t in zip(cells, th)]


def test_snapshot_rule():
    d = build_geometry(LATTICE2)
    assert snapshot_panels(d, (0.0, 0.0)) == []
    assert snapshot_panels(d, _near_bodies()[0])


def test_snapshots_without_refinement():
    s = {"name": "z", "geometry": LATTICE2, "strategy": ["Direct-Local", "GMRES-indy"], "repeats": 1,
         "action": {"type": "snapshots", "bodies": [(0, 0), (1, 1), (0, 1)]}}
    reports, aggregate = run_snapshot_batch(s)
    assert len(reports) == 6
    assert all(r.T_Rsol is None and r.T_Osol is not None for r in reports)
    assert all(r.E <= 1e-8 for r in reports)
    assert all(a["T_Rsol"] is None and a["n_unrefined"] == 3 for a in aggregate)


@pytest.mark.slow
def test_snapshot_batch_shape_and_cache():
    near = _near_bodies()
    centers = [(0, 0), (1, 0), (0, 1), (1, 1), (0, 0), (1, 0), (0, 1)]
    s = {"name": "b", "geometry": LATTICE2, "strategy": "Direct-Local", "repeats": 1,
         "action": {"type": "snapshots", "bodies": near + centers + near, "m": 4}}
    reports, (agg,) = run_snapshot_batch(s)
    assert agg["n_refined"] == 12 and agg["n_unrefined"] == 7 and agg["cache_hits"] == 6
    assert agg["E_max"] <= 1e-8
    first, again = reports[:6], reports[13:]
    for a, b in zip(first, again):
        assert not a.cache_hit and b.cache_hit
        assert a.T_Rsol >= 5 * b.T_Rsol


def test_snapshot_body_in_fluid_rejected():
    s = {"name": "w", "geometry": LATTICE2, "strategy": "Direct-Local",
         "action": {"type": "snapshots", "bodies": [(0.5, 0.5)]}}
    with pytest.raises(ScenarioError):
        run_snapshot_batch(s)


# -- command line ---------------------------------------------------------

def _write(tmp_path, obj, name="s.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_cli_run(tmp_path):
    path = _write(tmp_path, [{"name": "a", "geometry": {"preset": "circle", "n_panels": 12}, "repeats": 1},
                             {"name": "b", "geometry": {"preset": "circle", "n_panels": 12}, "repeats": 1,
                              "strategy": "Direct-Local", "action": {"type": "refine", "panels": [0]}}])
    out = tmp_path / "r.csv"
    assert main(["run", path, "--out", str(out), "--seed", "3", "--threads", "1", "--diagnostics"]) == 0
    with open(out) as fh:
        assert next(csv.reader(fh)) == list(CSV_COLUMNS)
    rows = _rows(out)
    assert [r["scenario"] for r in rows] == ["a", "b"]
    assert float(rows[1]["E"]) <= 1e-8
    side = json.loads((tmp_path / "r_diagnostics.json").read_text())
    assert "conditioning" in side["reports"][1]["diagnostics"]


def test_cli_snapshot_outputs(tmp_path):
    path = _write(tmp_path, {"name": "s", "geometry": LATTICE2, "strategy": ["Direct-Local"], "repeats": 1,
                             "action": {"type": "snapshots", "bodies": [(0, 0)]}})
    out = tmp_path / "snap.csv"
    assert main(["run", path, "--out", str(out)]) == 0
    with open(tmp_path / "snap_aggregate.csv") as fh:
        assert next(csv.reader(fh)) == list(AGGREGATE_COLUMNS)


def test_cli_sweep(tmp_path):
    path = _write(tmp_path, {"name": "w", "geometry": {"preset": "circle"}, "repeats": 1})
    out = tmp_path / "w.csv"
    assert main(["sweep", path, "--param", "N", "--values", "8", "12", "--out", str(out)]) == 0
    assert [int(r["N_k"]) for r in _rows(out)] == [128, 192]


def test_cli_gmres_failure_exit_code(tmp_path):
    path = _write(tmp_path, {"name": "g", "geometry": {"preset": "fish", "n_panels": 24}, "strategy": "GMRES-HBS",
                             "gmres_maxiter": 2, "repeats": 1})
    assert main(["run", path, "--out", str(tmp_path / "g.csv")]) == 2


def test_cli_geometry_error_exit_code(tmp_path):
    path = _write(tmp_path, {"name": "x", "geometry": {"curve": {"kind": "fourier",
                                                                 "params": [[1, 1.0, 0.0], [-3, 1.5, 0.0]]}}})
    assert main(["run", path, "--out", str(tmp_path / "x.csv")]) == 3


def test_cli_bad_scenario_exit_code(tmp_path):
    path = _write(tmp_path, {"name": "x"})
    assert main(["run", path, "--out", str(tmp_path / "x.csv")]) == 1


def test_console_script(tmp_path):
    path = _write(tmp_path, {"name": "c", "geometry": {"preset": "circle", "n_panels": 8}, "repeats": 1})
    out = tmp_path / "c.csv"
    proc = subprocess.run([sys.executable, "-m", "stokes_els.bench", "run", path, "--out", str(out)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert _rows(out)[0]["strategy"] == "Direct-HBS"
