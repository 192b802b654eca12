import json
import os

import numpy as np
import pytest

from glwalk.cli import main, reports_from_csv
from glwalk.estimators import rate_fit
from glwalk.io import SchemaError, config_hash, encode_csv, read_csv, write_csv
from glwalk.plot import count_markers, plot

SCALAR = {"family": "scalar_gauge", "d": 2, "law": "discrete", "values": [0.0, 1.0], "probs": [0.9, 0.1]}


def write_config(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def be_config(**over):
    cfg = {"seed": 3, "ensemble": SCALAR,
           "be_curve": {"n_grid": [16, 32, 64, 128], "paths": 4000, "lambda": {"paths": 100},
                        "rate_fit": {"model": "power_law"}},
           "rate_fit": {"input": "be_curve.csv", "model": "power_law"}}
    cfg.update(over)
    return cfg


def run(tmp_path, command, cfg, *extra):
    return main([command, "--config", write_config(tmp_path, cfg), *extra])


def test_zero_paths_is_a_config_error(tmp_path, capsys):
    cfg = be_config()
    cfg["be_curve"]["paths"] = 0
    assert run(tmp_path, "be-curve", cfg, "--out", str(tmp_path / "o")) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("glwalk-error: config:")


def test_seed_is_mandatory(tmp_path, capsys):
    cfg = be_config()
    del cfg["seed"]
    assert run(tmp_path, "be-curve", cfg) == 2
    assert "seed" in capsys.readouterr().err


def test_lambda_run_must_be_ten_times_longer(tmp_path):
    cfg = be_config()
    cfg["be_curve"]["lambda"]["n"] = 1000
    assert run(tmp_path, "be-curve", cfg, "--out", str(tmp_path)) == 2


def test_budget_error_code(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("GLWALK_BUDGET", "1000")
    assert run(tmp_path, "lyapunov", {"seed": 1, "ensemble": SCALAR, "lyapunov": {"n": 1000, "paths": 10}},
               "--out", str(tmp_path)) == 3
    assert capsys.readouterr().err.startswith("glwalk-error: budget:")


def test_degenerate_variance_code(tmp_path, capsys):
    cfg = {"seed": 1, "ensemble": {"family": "orthogonal_only", "d": 2},
           "variance": {"method": "batch_means", "paths": 8}}
    assert run(tmp_path, "variance", cfg, "--out", str(tmp_path)) == 4
    assert capsys.readouterr().err.startswith("glwalk-error: degenerate:")
    assert (tmp_path / "variance.csv").exists()


def test_noise_dominated_code(tmp_path, capsys):
    cfg = be_config()
    cfg["be_curve"]["paths"] = 200
    assert run(tmp_path, "be-curve", cfg, "--out", str(tmp_path)) == 5
    assert capsys.readouterr().err.startswith("glwalk-error: noise:")
    manifest = json.loads((tmp_path / "manifest_be-curve.json").read_text())
    assert "be_curve.csv" in manifest["files"]


def test_runs_are_byte_identical_across_repeats_and_workers(tmp_path):
    cfg = be_config()
    outs = []
    for i, w in enumerate((1, 1, 4)):
        out = tmp_path / f"o{i}"
        assert run(tmp_path, "be-curve", cfg, "--out", str(out), "--workers", str(w)) == 0
        outs.append(out)
    names = sorted(p.name for p in outs[0].glob("*.csv"))
    assert names == ["be_curve.csv", "estimates.csv", "rate_fit.csv", "walk.csv"]
    for o in outs[1:]:
        for name in names:
            assert (o / name).read_bytes() == (outs[0] / name).read_bytes()
    m = [json.loads((o / "manifest_be-curve.json").read_text()) for o in outs]
    assert m[0]["files"] == m[1]["files"] == m[2]["files"]
    assert m[0]["config_hash"] == m[2]["config_hash"]


def test_separate_rate_fit_reproduces_fused_fit(tmp_path):
    out = tmp_path / "o"
    cfg = be_config()
    assert run(tmp_path, "be-curve", cfg, "--out", str(out)) == 0
    fused = (out / "rate_fit.csv").read_bytes()
    (out / "rate_fit.csv").unlink()
    assert run(tmp_path, "rate-fit", cfg, "--out", str(out)) == 0
    assert (out / "rate_fit.csv").read_bytes() == fused
    # the in-memory fit agrees with the persisted one
    rep = reports_from_csv(out / "be_curve.csv")["vec_norm"]
    fit = rate_fit(rep, "power_law", None, 400, 3)
    _, rows = read_csv(out / "rate_fit.csv", "rate_fit")
    assert float(rows[0]["slope"]) == fit.slope


def test_walk_csv_columns(tmp_path):
    out = tmp_path / "o"
    assert run(tmp_path, "be-curve", be_config(), "--out", str(out)) == 0
    _, rows = read_csv(out / "walk.csv", "walk")
    assert len(rows) == 4000 * 4
    assert list(rows[0]) == ["path_id", "n", "log_vec_norm", "log_mat_norm", "log_spec_radius"]


@pytest.mark.parametrize("command,block", [
    ("lyapunov", {"n": 1000, "paths": 20}),
    ("variance", {"method": "both", "paths": 20, "n": 1024, "max_lag": 50}),
    ("depcoef", {"p": 1, "k_grid": [1, 2, 4, 8], "replicates": 200, "q": 3.0,
                 "pair_strategy": {"kind": "both", "count": 4}}),
    ("gap", {"n_max": 500, "points": 10, "paths": 20}),
    ("blocks", {"layout": {"n": 64, "m": 4}, "J_nu": 4, "J_c": 16, "reports": ["decompose", "structure"],
                "structure": {"replicates": 100, "outer": 20, "inner": 8}}),
])
def test_other_commands_write_csv_and_manifest(tmp_path, command, block):
    cfg = {"seed": 2, "ensemble": {"family": "two_atom"}, command.replace("-", "_"): block}
    out = tmp_path / "o"
    assert run(tmp_path, command, cfg, "--out", str(out)) == 0
    manifest = json.loads((out / f"manifest_{command}.json").read_text())
    assert manifest["files"] and manifest["seed"] == 2
    for name in manifest["files"]:
        read_csv(out / name)


def test_blocks_rows_carry_layout(tmp_path):
    cfg = {"seed": 2, "ensemble": {"family": "two_atom"},
           "blocks": {"layout": {"n": 64, "m": 4}, "J_nu": 4, "J_c": 16, "reports": ["decompose"]}}
    out = tmp_path / "o"
    assert run(tmp_path, "blocks", cfg, "--out", str(out)) == 0
    _, rows = read_csv(out / "blocks.csv", "blocks")
    assert all((r["m"], r["N"], r["J_nu"], r["J_c"]) == ("4", "8", "4", "16") for r in rows)
    assert max(float(r["identity_residual"]) for r in rows) < 1e-12


def test_csv_round_trip_and_float_precision(tmp_path):
    x = 0.1 + 0.2
    p = write_csv(tmp_path / "g.csv", "gap", [(10, x, np.float64(1 / 3), np.int64(7), 16)])
    text = p.read_text().splitlines()
    assert text[0] == "# glwalk-schema: gap v1"
    _, rows = read_csv(p, "gap")
    assert float(rows[0]["max_gap"]) == x and rows[0]["paths"] == "7"
    with pytest.raises(SchemaError):
        read_csv(p, "depcoef")


def test_atomic_write_leaves_no_partial_file(tmp_path, monkeypatch):
    target = tmp_path / "be_curve.csv"

    def boom(*a, **k):
        raise KeyboardInterrupt

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(KeyboardInterrupt):
        write_csv(target, "gap", [(1, 0.0, 0.0, 1, 16)])
    assert not target.exists() and not list(tmp_path.iterdir())


def test_config_hash_ignores_scheduling_keys():
    a = {"seed": 1, "workers": 1, "ensemble": SCALAR}
    b = {"seed": 1, "workers": 8, "output_dir": "x", "ensemble": SCALAR}
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash({**a, "seed": 2})


def test_empty_csv_is_a_schema_error(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    with pytest.raises(SchemaError):
        plot(p, "be_curve")
    p.write_bytes(encode_csv("be_curve", []))
    with pytest.raises(SchemaError):
        plot(p, "be_curve")


def test_two_point_curve_plot_structure(tmp_path):
    p = write_csv(tmp_path / "c.csv", "be_curve",
                  [("vec_norm", 256, 0.05, 0.004, 100000, 0.1, 0.3, 1),
                   ("vec_norm", 1024, 0.025, 0.004, 100000, 0.1, 0.3, 1)])
    svg = plot(p, "be_curve", tmp_path / "c.svg").read_text()
    assert count_markers(svg, "data") == 2
    assert svg.count('id="ref-') == 1
    svg_q = plot(p, "be_curve", tmp_path / "cq.svg", q=2.5).read_text()
    assert svg_q.count('id="ref-') == 2


def test_plot_kind_must_match_schema(tmp_path):
    p = write_csv(tmp_path / "g.csv", "gap", [(1, 0.0, 0.0, 1, 16)])
    with pytest.raises(SchemaError):
        plot(p, "depcoef")
    assert plot(p, "gap", tmp_path / "g.svg").exists()


def test_plot_command(tmp_path):
    src = write_csv(tmp_path / "c.csv", "be_curve",
                    [("vec_norm", n, 0.5 / np.sqrt(n), 0.004, 100000, 0.1, 0.3, 1) for n in (16, 64, 256, 1024)])
    cfg = {"plot": {"input": str(src), "kind": "rate_fit", "q": 4.0}}
    assert run(tmp_path, "plot", cfg, "--out", str(tmp_path / "o")) == 0
    svg = (tmp_path / "o" / "rate_fit.svg").read_text()
    assert 'id="fit"' in svg and count_markers(svg) == 4
