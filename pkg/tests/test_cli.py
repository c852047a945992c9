from __future__ import annotations

import json
import subprocess
import sys

from dmadapt.cli import EXIT_CONFIG, RunConfig, build_parser, effective_config, main

INVERTED = """MeshVersionFormatted 2
Dimension 3
Vertices
4
0 0 0 0
1 0 0 0
0 1 0 0
0 0 1 0
Tetrahedra
1
1 2 4 3 1
Triangles
4
2 3 4 1
1 4 3 1
1 2 4 1
1 3 2 1
End
"""

SMALL = ["--cube", "2", "--metric", "uniform:1", "--complexity", "300", "--splits", "2x1x1"]


def test_check_cube_exit_zero(tmp_path, capsys):
    assert main(["check", "--cube", "3", "--metric", "uniform:0.3", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["tetrahedra"] == 162 and rep["vertices"] == 64
    assert (tmp_path / "edge_length_hist.csv").exists()


def test_check_inverted_lists_finding(tmp_path, capsys):
    p = tmp_path / "inv.mesh"
    p.write_text(INVERTED)
    code = main(["check", "--mesh", str(p), "--metric", "uniform:1", "--out", str(tmp_path)])
    out, err = capsys.readouterr()
    assert code != 0
    assert out.splitlines() == ["nonpositive_volume: 0"]
    assert err.startswith("error: ConformityError:") and err.count("\n") == 1


def test_decompose_manifest(tmp_path):
    assert main(["decompose", "--cube", "3", "--splits", "2x1x1", "--out", str(tmp_path)]) == 0
    man = json.loads((tmp_path / "partition.json").read_text())
    assert man["n_subdomains"] == 2 and len(man["sizes"]) == 2
    assert len(man["interface_points"]) > 0 and man["simply_connected"]
    assert sum(man["sizes"]) == 162


def test_too_many_splits_fails(tmp_path, capsys):
    code = main(["decompose", "--cube", "1", "--splits", "100x100x100", "--out", str(tmp_path)])
    err = capsys.readouterr().err
    assert code != 0 and err.startswith("error: DecompositionError")


def test_adapt_too_many_splits_fails(tmp_path, capsys):
    code = main(["adapt", "--cube", "1", "--splits", "100x100x100", "--complexity", "50",
                 "--metric", "uniform:1", "--skip-coarse", "--out", str(tmp_path)])
    assert code != 0
    assert "DecompositionError" in capsys.readouterr().err


def test_bad_splits_is_config_error(tmp_path, capsys):
    assert main(["decompose", "--cube", "2", "--splits", "2x2", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_missing_source_is_config_error(capsys):
    assert main(["check", "--metric", "polar2"]) == EXIT_CONFIG
    assert "--mesh" in capsys.readouterr().err


def test_unknown_metric(tmp_path, capsys):
    assert main(["check", "--cube", "1", "--metric", "bogus", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_workers_env_fallback(monkeypatch):
    monkeypatch.setenv("ADAPT_WORKERS", "3")
    cfg = effective_config(build_parser().parse_args(["adapt", "--cube", "2"]))
    assert cfg.resolved_workers() == 3
    cfg = effective_config(build_parser().parse_args(["adapt", "--cube", "2", "--workers", "2"]))
    assert cfg.resolved_workers() == 2
    monkeypatch.delenv("ADAPT_WORKERS")
    assert RunConfig(cube=2).resolved_workers() == 1


def test_config_file_and_override(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('complexity = 123.0\nsplits = [1, 2, 3]\ninterior_nsmth = 9\nseed = 4\n')
    args = build_parser().parse_args(["adapt", "--cube", "2", "--config", str(p), "--seed", "5"])
    cfg = effective_config(args)
    assert cfg.complexity == 123.0 and cfg.split_tuple() == (1, 2, 3)
    assert cfg.interior_nsmth == 9 and cfg.seed == 5
    params = cfg.pipeline_params()
    assert params.interior.n_smooth_iters == 9 and params.target_complexity == 123.0


def test_config_unknown_key(tmp_path, capsys):
    p = tmp_path / "c.toml"
    p.write_text("bogus = 1\n")
    assert main(["check", "--cube", "1", "--config", str(p)]) == EXIT_CONFIG


def test_every_option_has_a_config_key():
    keys = {f for f in RunConfig.__dataclass_fields__}
    for sub in build_parser()._subparsers._group_actions[0].choices.values():
        for act in sub._actions:
            if act.dest not in ("help", "config"):
                assert act.dest in keys, act.dest


def test_defaults_follow_cube_settings():
    p = RunConfig(cube=8).pipeline_params()
    assert p.interface.num_layers == 3 and p.interior.num_layers == 3
    assert p.interior.n_quality_iters == 3 and p.interior.n_smooth_iters == 5
    assert p.interior.use_pre_collapse and p.interior.use_post_collapse
    assert not p.interface.use_post_collapse
    assert p.coarse_fraction == 15.0


def test_adapt_writes_artifacts(tmp_path, capsys):
    out = tmp_path / "a"
    assert main(["adapt", *SMALL, "--workers", "2", "--seed", "1", "--out", str(out)]) == 0
    for name in ("adapted.mesh", "adapted.sol", "adapted.gids", "report.json", "trace.txt",
                 "timing.json", "mean_ratio_hist.csv", "edge_length_hist.csv"):
        assert (out / name).exists(), name
    rep = json.loads((out / "report.json").read_text())
    assert rep["config"]["workers"] == 2 and rep["config"]["splits"] == "2x1x1"
    assert rep["conformity_findings"] == [] and rep["frozen_interface_problems"] == []
    timing = json.loads((out / "timing.json").read_text())
    for k in ("decomposition", "interface_preprocessing", "interface_adaptation",
              "simply_connected", "pack_send"):
        assert k in timing
    assert set(timing["worker"]) == {"unpack", "interior_preprocessing", "interior_adaptation",
                                     "pack"}
    assert len((out / "trace.txt").read_text().splitlines()) == 6


def test_adapt_seeded_single_worker_repeatable(tmp_path):
    reports = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        assert main(["adapt", *SMALL, "--workers", "1", "--seed", "7", "--out", str(out)]) == 0
        d = json.loads((out / "report.json").read_text())
        d["config"].pop("out")
        reports.append(d)
    assert reports[0] == reports[1]


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "dmadapt.cli", "check", "--cube", "2", "--metric",
                        "uniform:0.5", "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert r.stdout.startswith("vertices 27 tetrahedra 48")
