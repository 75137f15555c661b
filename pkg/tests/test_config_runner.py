import csv
import dataclasses
import io
import json

import pytest

from speclab import pipeline, runner
from speclab.config import (BlowupConfig, BranchFit, ExperimentConfig, MeshRule, canonical_json, from_dict, load,
                            preset, preset_names)
from speclab.errors import ConfigError, SpecLabError

TINY = ExperimentConfig(
    name="tiny", mode="TUBE", epsilon_list=(0.4, 0.3, 0.2),
    mesh=MeshRule(h_factor=2.0, h_far=0.1, grading_levels=2, levels=2),
    blowup=BlowupConfig(R_list=(2.0, 4.0, 8.0), h_target=0.1, grading_levels=2, h_far=0.5),
    fits=(BranchFit(1, 1, (0.4, 0.3, 0.2), (1.0, 3.0)),),
    criteria=("AC1", "AC5", "AC7", "AC10"), rayleigh_vectors=5)


def _code(exc_info):
    return exc_info.value.code


# ---------------------------------------------------------------- config

def test_presets_load_and_roundtrip():
    names = preset_names()
    assert {"ground", "ramification", "mixed", "blowup", "lemma"} <= set(names)
    for n in names:
        cfg = preset(n)
        again = from_dict(json.loads(cfg.canonical()))
        assert again == cfg and again.key() == cfg.key()


@pytest.mark.parametrize("change,code", [
    ({"epsilon_list": (0.1, 0.2)}, "EPS_ORDER"),
    ({"epsilon_list": (0.2, 0.2)}, "EPS_ORDER"),
    ({"epsilon_list": (1.2,)}, "EPS_RANGE"),
    ({"epsilon_list": ()}, "EPS_EMPTY"),
    ({"mode": "CIRCLE"}, "BAD_MODE"),
    ({"N": 0}, "BAD_TARGET"),
    ({"mesh": MeshRule(levels=1)}, "BAD_MESH_RULE"),
    ({"blowup": BlowupConfig(R_list=(4.0, 2.0))}, "BAD_RADII"),
    ({"fits": (BranchFit(2, 1, (0.4,), (1, 3)),)}, "BAD_FIT"),
    ({"fits": (BranchFit(1, 1, (0.5,), (1, 3)),)}, "BAD_FIT"),
    ({"mesh": MeshRule(h_factor=1.0, h_far=0.5)}, "EPS_UNRESOLVED"),
])
def test_config_rejections(change, code):
    with pytest.raises(ConfigError) as e:
        dataclasses.replace(TINY, **change)
    assert _code(e) == code


def test_from_dict_rejects_unknown_key():
    with pytest.raises(ConfigError) as e:
        from_dict({"name": "x", "mode": "LEMMA", "colour": 3})
    assert _code(e) == "UNKNOWN_KEY"


def test_load_missing(tmp_path):
    with pytest.raises(ConfigError) as e:
        load(tmp_path / "nope.json")
    assert _code(e) == "NOT_FOUND"
    with pytest.raises(ConfigError):
        preset("nope")


def test_canonical_is_order_independent():
    assert canonical_json({"b": 1, "a": [0.1, 2]}) == canonical_json({"a": (0.1, 2), "b": 1})


def test_keys_are_stable_and_discriminating():
    assert TINY.key() == dataclasses.replace(TINY).key()
    assert TINY.with_seed(1).key() != TINY.key()
    # a point key ignores the rest of the sweep
    shorter = dataclasses.replace(TINY, epsilon_list=(0.4, 0.3), fits=())
    assert shorter.point_key(0.3) == TINY.point_key(0.3)
    assert TINY.point_key(0.3) != TINY.point_key(0.4)


# ---------------------------------------------------------------- runner

@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cache = runner.Cache(root / "cache")
    first = runner.run(TINY, root / "a", cache=cache)
    second = runner.run(TINY, root / "b", cache=cache)
    return root, first, second


def test_run_passes_and_writes_bundle(tiny_run):
    root, first, _ = tiny_run
    assert runner.all_passed(first)
    assert [s["criterion_id"] for s in first["summary"]] == list(TINY.criteria)
    for name in ("config.json", "records.json", "sweep.csv", "fits.json", "fits.csv", "summary.json",
                 "order.json", "blowup_form.json"):
        assert (root / "a" / name).exists(), name
    assert first["solver_calls"] > 0


def test_cache_hit_skips_solvers_and_reproduces(tiny_run):
    root, first, second = tiny_run
    assert second["solver_calls"] == 0
    for name in ("records.json", "summary.json", "sweep.csv", "fits.json"):
        assert (root / "a" / name).read_bytes() == (root / "b" / name).read_bytes()


def test_serial_rerun_is_byte_identical(tmp_path):
    small = dataclasses.replace(TINY, epsilon_list=(0.4, 0.3), fits=(), criteria=("AC5",))
    a = runner.run(small, tmp_path / "a", cache=runner.Cache(tmp_path / "c1"))
    b = runner.run(small, tmp_path / "b", cache=runner.Cache(tmp_path / "c2"))
    assert a["solver_calls"] == b["solver_calls"] > 0
    assert (tmp_path / "a" / "records.json").read_bytes() == (tmp_path / "b" / "records.json").read_bytes()


def test_sweep_csv_layout(tiny_run):
    root, first, _ = tiny_run
    rows = list(csv.reader(io.StringIO((root / "a" / "sweep.csv").read_text())))
    assert rows[0][0] == "epsilon" and rows[0][-1] == "error"
    assert [float(r[0]) for r in rows[1:]] == list(TINY.epsilon_list)


def test_report_table(tiny_run):
    root, _, _ = tiny_run
    text = runner.report(root / "a")
    assert text.count("PASS") == len(TINY.criteria)
    assert (root / "a" / "report.csv").exists() and (root / "a" / "report.dat").exists()


def test_report_not_found(tmp_path):
    with pytest.raises(ConfigError) as e:
        runner.report(tmp_path)
    assert _code(e) == "NOT_FOUND"


def test_failed_point_is_recorded_and_turns_red(tmp_path, monkeypatch):
    real = pipeline.sweep_point

    def flaky(cfg, eps):
        if eps == 0.3:
            raise SpecLabError("synthetic failure", code="NO_CONVERGENCE")
        return real(cfg, eps)
    monkeypatch.setattr(pipeline, "sweep_point", flaky)
    cfg = dataclasses.replace(TINY, name="flaky")
    bundle = runner.run(cfg, tmp_path / "out", cache=runner.Cache(tmp_path / "c"))
    assert "error" in bundle["records"][1]
    verdict = {s["criterion_id"]: s["pass"] for s in bundle["summary"]}
    assert not verdict["AC1"] and not verdict["AC5"]
    rows = list(csv.reader(io.StringIO((tmp_path / "out" / "sweep.csv").read_text())))
    assert len(rows) == 4
    assert "NO_CONVERGENCE" in rows[2][-1]
    # failures are not cached
    assert runner.Cache(tmp_path / "c").get("points", cfg.point_key(0.3)) is None


def _record(eps, gaps):
    n = len(gaps)
    return {"epsilon": eps, "lambda_raw": [1.0] * n, "lambda_rich": [1.0] * n, "gap": gaps, "floor": [0.0] * n,
            "chi2": 0.5, "mu": [0.1] * n, "theorem_residual": [0.0] * n, "T": [0.2] * n, "norm_ratio": [0.3] * n}


def test_csv_rows_cluster_ratio_and_error():
    recs = [_record(0.3, [0.2, 0.05]), {"epsilon": 0.2, "error": "[X] boom"}, _record(0.1, [0.02, 0.001])]
    header, rows = runner.csv_rows(2, recs)
    assert "gap2/gap1" in header and "gap_2" in header
    i = header.index("gap2/gap1")
    assert float(rows[0][i]) == pytest.approx(0.25)
    assert float(rows[2][i]) == pytest.approx(0.05)
    assert rows[1][-1] == "[X] boom" and all(c == "" for c in rows[1][1:-1])
    assert all(len(r) == len(header) for r in rows)


def test_lemma_run(tmp_path):
    cfg = dataclasses.replace(preset("lemma"), lemma_models=20, lemma_max_size=12)
    bundle = runner.run(cfg, tmp_path / "out", cache=runner.Cache(tmp_path / "c"))
    assert runner.all_passed(bundle)
    assert bundle["lemma"]["models"] == 20
    rows = list(csv.reader(io.StringIO((tmp_path / "out" / "lemma.csv").read_text())))
    assert len(rows) == 21
    assert "rows" not in json.loads((tmp_path / "out" / "lemma.json").read_text())
