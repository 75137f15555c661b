import json
import subprocess
import sys

import pytest

from speclab import cli
from speclab.config import preset


def test_parser_accepts_flags_on_both_sides():
    p = cli.build_parser()
    a = p.parse_args(["--preset", "mixed", "eigs", "--eps", "0.2", "--count", "3"])
    assert (a.command, a.preset, a.eps, a.count) == ("eigs", "mixed", 0.2, 3)
    b = p.parse_args(["sweep", "--preset", "ground", "--jobs", "4", "--serial"])
    assert (b.preset, b.jobs, b.serial) == ("ground", 4, True)
    c = p.parse_args(["--seed", "7", "lemma"])
    assert c.seed == 7


def test_every_command_registered():
    p = cli.build_parser()
    for name in cli.COMMANDS:
        assert p.parse_args([name]).command == name


def test_unknown_preset_rejected():
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["sweep", "--preset", "nope"])


def test_report_without_bundle_exits_2(tmp_path, capsys):
    assert cli.main(["report", "--out", str(tmp_path)]) == cli.EXIT_ERROR
    assert "[NOT_FOUND]" in capsys.readouterr().err


def test_fit_without_bundle_exits_2(tmp_path):
    assert cli.main(["fit", "--out", str(tmp_path)]) == cli.EXIT_ERROR


def test_polya_rejects_tube_config(tmp_path):
    assert cli.main(["polya", "--preset", "ground", "--out", str(tmp_path)]) == cli.EXIT_ERROR


def test_lemma_small_config(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SPECLAB_CACHE", str(tmp_path / "cache"))
    cfg = json.loads(preset("lemma").canonical())
    cfg.update(lemma_models=15, lemma_max_size=10)
    path = tmp_path / "lemma.json"
    path.write_text(json.dumps(cfg))
    assert cli.main(["lemma", "--config", str(path), "--out", str(tmp_path / "out")]) == 0
    assert "AC6 PASS" in capsys.readouterr().out
    assert cli.main(["report", "--out", str(tmp_path / "out")]) == 0


def test_mesh_and_torsion_json(tmp_path, capsys):
    assert cli.main(["mesh", "--preset", "ground", "--eps", "0.2", "--out", str(tmp_path), "--matrix-market"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["fingerprint"]
    assert (tmp_path / "K.mtx").exists() and (tmp_path / "M.mtx").exists()
    assert cli.main(["torsion", "--preset", "ground", "--eps", "0.2", "--k", "2"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["T"] > 0 and "z^2" in res["f"]


def test_console_script_module_entry():
    out = subprocess.run([sys.executable, "-m", "speclab.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "sweep" in out.stdout
