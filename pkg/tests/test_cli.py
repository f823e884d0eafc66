import csv
import json

import numpy as np
import pytest

from dasf.cli import aggregate_curves, fig2_regimes, load_config, main, ConfigError


def write_config(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg, indent=2))
    return str(p)


def mmse_cfg(**engine):
    return {
        "problem": {"id": "mmse", "Q": 2},
        "graph": {"kind": "er", "K": 5, "channels": 3, "p": 0.8, "seed": 1},
        "signal": {"seed": 2},
        "engine": {"max_iterations": 30, **engine},
    }


def lcmv_cfg(Q=2, L=2, K=5, kind="er", runs=None):
    cfg = {
        "problem": {"id": "lcmv", "Q": Q, "L": L},
        "graph": {"kind": kind, "K": K, "channels": 3, "seed": 3},
        "signal": {"seed": 4},
        "engine": {"max_iterations": 40, "tol": 0.0},
    }
    if runs:
        cfg["monte_carlo"] = {"runs": runs}
    return cfg


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# -- run --------------------------------------------------------------------------


def test_run_writes_artifacts_with_monotone_f(tmp_path):
    cfg = write_config(tmp_path, mmse_cfg())
    assert main(["run", "--config", cfg, "--out-dir", str(tmp_path / "o")]) == 0
    rows = read_csv(tmp_path / "o" / "run.csv")
    f = np.array([float(r["f"]) for r in rows])
    assert np.all(np.diff(f) <= 1e-10 * (1 + np.abs(f[1:])))
    summary = json.loads((tmp_path / "o" / "run.json").read_text())
    assert summary["config_echo"]["problem"]["id"] == "mmse"
    assert {c["condition"] for c in summary["conditions_final"]} == {"1a", "1b", "bounds", "rankH", "lemma5"}
    assert (tmp_path / "o" / "run_iterate.npz").exists()


def test_rerun_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path, lcmv_cfg())
    for d in ("a", "b"):
        assert main(["run", "--config", cfg, "--out-dir", str(tmp_path / d)]) == 0
    for name in ("run.csv", "run.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_override_changes_instance(tmp_path):
    cfg = write_config(tmp_path, mmse_cfg())
    main(["run", "--config", cfg, "--out-dir", str(tmp_path / "a")])
    main(["run", "--config", cfg, "--out-dir", str(tmp_path / "b"), "--seed-override", "5"])
    assert (tmp_path / "a" / "run.csv").read_bytes() != (tmp_path / "b" / "run.csv").read_bytes()


def test_unknown_key_names_key_and_line(tmp_path, capsys):
    cfg = mmse_cfg()
    cfg["engine"]["max_iters"] = 3
    path = write_config(tmp_path, cfg)
    assert main(["run", "--config", path, "--out-dir", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "engine.max_iters" in err
    line = next(n for n, text in enumerate(open(path).read().splitlines(), 1) if "max_iters" in text)
    assert f"line {line}" in err


@pytest.mark.parametrize(
    "section,key,value,needle",
    [
        ("problem", "id", "pca", "problem.id"),
        ("problem", "Q", 0, "problem.Q"),
        ("graph", "kind", "ring", "graph.kind"),
        ("graph", "p", 1.5, "graph.p"),
        ("engine", "mode", "fast", "engine.mode"),
    ],
)
def test_bad_values_rejected(tmp_path, section, key, value, needle):
    cfg = mmse_cfg()
    cfg[section][key] = value
    with pytest.raises(ConfigError, match=needle.replace(".", r"\.")):
        load_config(write_config(tmp_path, cfg))


def test_invalid_json_and_missing_file(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"problem": ')
    assert main(["run", "--config", str(p)]) == 1
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == 1


def test_runtime_failure_exit_code(tmp_path, capsys):
    # one sample per batch makes every local covariance singular
    cfg = lcmv_cfg()
    cfg["engine"].update({"mode": "batch", "N": 1})
    assert main(["run", "--config", write_config(tmp_path, cfg), "--out-dir", str(tmp_path)]) == 2
    assert "runtime failure" in capsys.readouterr().err


def test_edge_list_with_isolated_node_is_config_error(tmp_path):
    cfg = mmse_cfg()
    cfg["graph"] = {"kind": "edges", "K": 3, "edges": [[0, 1]]}
    assert main(["run", "--config", write_config(tmp_path, cfg), "--out-dir", str(tmp_path)]) == 1


# -- mc ---------------------------------------------------------------------------


def test_single_run_mc_aggregate_equals_run(tmp_path):
    cfg = write_config(tmp_path, lcmv_cfg(runs=1))
    assert main(["mc", "--config", cfg, "--out-dir", str(tmp_path / "mc")]) == 0
    agg = read_csv(tmp_path / "mc" / "aggregate.csv")
    run = read_csv(tmp_path / "mc" / "run_000.csv")
    assert [a["mean_eps"] for a in agg] == [r["eps_vs_oracle"] for r in run]
    assert all(float(a["sem_eps"]) == 0.0 for a in agg)


def test_mc_mean_error_decreases_and_parallel_matches(tmp_path):
    cfg = write_config(tmp_path, lcmv_cfg(runs=4))
    assert main(["mc", "--config", cfg, "--out-dir", str(tmp_path / "s")]) == 0
    assert main(["mc", "--config", cfg, "--out-dir", str(tmp_path / "p"), "--parallelism", "2"]) == 0
    a = (tmp_path / "s" / "aggregate.csv").read_bytes()
    assert a == (tmp_path / "p" / "aggregate.csv").read_bytes()
    mean = np.array([float(r["mean_eps"]) for r in read_csv(tmp_path / "s" / "aggregate.csv")])
    assert mean[-1] < 1e-3 * mean[0]


def test_sem_is_sample_std_over_sqrt_runs():
    curves = [[1.0, 0.5], [3.0, 0.1, 0.05], [2.0, 0.3]]
    mean, sem = aggregate_curves(curves)
    padded = np.array([[1.0, 0.5, 0.5], [3.0, 0.1, 0.05], [2.0, 0.3, 0.3]])
    np.testing.assert_allclose(mean, padded.mean(axis=0))
    np.testing.assert_allclose(sem, padded.std(axis=0, ddof=1) / np.sqrt(3))


# -- check ------------------------------------------------------------------------


def test_check_unconstrained_mmse(tmp_path):
    cfg = write_config(tmp_path, mmse_cfg())
    main(["run", "--config", cfg, "--out-dir", str(tmp_path)])
    assert main(["check", "--config", cfg, "--iterate", str(tmp_path / "run_iterate.npz"), "--out-dir", str(tmp_path), "--conditions", "1a"]) == 0
    (rep,) = json.loads((tmp_path / "conditions.json").read_text())["reports"]
    assert rep["passed"] and rep["reason"] == "unconstrained"


def test_check_lcmv_full_rank_a_passes_1a(tmp_path):
    cfg = write_config(tmp_path, lcmv_cfg(Q=2, L=2))
    main(["run", "--config", cfg, "--out-dir", str(tmp_path)])
    assert main(["check", "--config", cfg, "--iterate", str(tmp_path / "run_iterate.npz"), "--out-dir", str(tmp_path)]) == 0
    reps = {r["condition"]: r for r in json.loads((tmp_path / "conditions.json").read_text())["reports"]}
    assert reps["1a"]["passed"]


def test_check_lcmv_q_below_l(tmp_path):
    cfg = write_config(tmp_path, lcmv_cfg(Q=1, L=2, K=3, kind="path"))
    X = np.random.default_rng(0).standard_normal((9, 1))
    np.savez(tmp_path / "it.npz", X0=X)
    assert main(["check", "--config", cfg, "--iterate", str(tmp_path / "it.npz"), "--out-dir", str(tmp_path)]) == 0
    reps = {r["condition"]: r for r in json.loads((tmp_path / "conditions.json").read_text())["reports"]}
    assert not reps["1a"]["passed"]
    assert reps["1b"]["passed"]


def test_check_missing_iterate_is_runtime_failure(tmp_path):
    cfg = write_config(tmp_path, mmse_cfg())
    assert main(["check", "--config", cfg, "--iterate", str(tmp_path / "missing.npz"), "--out-dir", str(tmp_path)]) == 2


# -- reproduce-fig2 -----------------------------------------------------------------


def test_fig2_regimes_straddle_bound():
    r = fig2_regimes(8, 2)
    assert 2 * r["below"] < 8 and 2 * r["at"] == 8 and 2 * r["above"] > 8


def test_reproduce_fig2_small(tmp_path):
    args = ["reproduce-fig2", "--runs", "1", "--K", "4", "--Mk", "3", "--Q", "1", "--factor", "5", "--out-dir", str(tmp_path)]
    assert main(args) == 0
    summary = json.loads((tmp_path / "fig2_summary.json").read_text())
    assert set(summary["cells"]) == {f"{k}/{r}" for k in ("er", "tree") for r in ("below", "at", "above")}
    for kind in ("er", "tree"):
        for regime in ("below", "at", "above"):
            rows = read_csv(tmp_path / f"fig2_{kind}_{regime}.csv")
            assert len(rows) == 20
