import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pyramidcir.errors import ConfigError, DataError, NumericError, ParameterError
from pyramidcir.evalcli import pipeline as pl
from pyramidcir.evalcli.cli import main
from pyramidcir.evalcli.config import PipelineConfig, load_config
from pyramidcir.evalcli.metrics import evaluate, recall_at_k, restrict, subset_recall_at_k, target_ranks

TINY = ["data.n_triplets=40", "data.n_val=10", "data.pool_size=24", "model.D=16", "model.n_heads=2",
        "train.epochs=1", "train.batch_size=8", "backbone.n_layers=2", "backbone.epochs=1",
        "refine.top_n=5", "rep.max_samples=8"]


# ---------------------------------------------------------------- metrics

def test_random_ranking_recall_is_k_over_pool(rng):
    P, n = 200, 4000
    ids = [f"c{i}" for i in range(P)]
    rankings = [list(rng.permutation(ids)) for _ in range(n)]
    targets = [ids[int(rng.integers(P))] for _ in range(n)]
    for k in (1, 5, 10, 50):
        p = k / P
        assert abs(recall_at_k(rankings, targets, k) - p) <= 3 * np.sqrt(p * (1 - p) / n)


def test_random_subset_recall(rng):
    n = 4000
    ids = [f"c{i}" for i in range(50)]
    rankings, targets, subsets = [], [], []
    for _ in range(n):
        sub = list(rng.choice(ids, 6, replace=False))
        rankings.append(list(rng.permutation(ids)))
        subsets.append(sub)
        targets.append(sub[0])
    for k in (1, 2, 3):
        p = k / 6
        assert abs(subset_recall_at_k(rankings, targets, subsets, k) - p) <= 3 * np.sqrt(p * (1 - p) / n)


def test_hand_example():
    rankings = [["a", "b", "c"], ["c", "a", "b"]]
    assert list(target_ranks(rankings, ["b", "b"])) == [1, 2]
    assert recall_at_k(rankings, ["b", "b"], 2) == 0.5
    assert restrict(["c", "a", "b"], ["b", "c"]) == ["c", "b"]
    assert subset_recall_at_k(rankings, ["b", "b"], [["a", "b"], ["b", "d"]], 1) == 0.5


@given(st.lists(st.permutations(list("abcdefgh")), min_size=1, max_size=20), st.data())
def test_report_invariants(rankings, data):
    targets = [data.draw(st.sampled_from(r)) for r in rankings]
    subsets = [sorted({t} | set(r[:3])) for t, r in zip(targets, rankings)]
    rep = evaluate(rankings, targets, subsets, ks=(1, 2, 5, 8), subset_ks=(1, 2, 3))
    vals = [rep.recall[k] for k in (1, 2, 5, 8)]
    assert all(0 <= v <= 1 for v in vals) and vals == sorted(vals) and vals[-1] == 1.0
    assert rep.r_mean == pytest.approx(np.mean(vals + list(rep.subset_recall.values())))
    assert list(rep.columns()) == ["R@1", "R@2", "R@5", "R@8", "Rs@1", "Rs@2", "Rs@3", "R_mean"]


def test_metric_errors():
    with pytest.raises(ParameterError):
        recall_at_k([["a"]], ["a"], 0)
    with pytest.raises(DataError):
        recall_at_k([["a"]], ["z"], 1)
    with pytest.raises(DataError):
        subset_recall_at_k([["a", "b"]], ["a"], [["b"]], 1)
    with pytest.raises(DataError):
        recall_at_k([], [], 1)


# ---------------------------------------------------------------- config

def test_config_defaults_and_fingerprint():
    a, b = PipelineConfig(), PipelineConfig()
    assert a.fingerprint() == b.fingerprint() and len(a.fingerprint()) == 16
    assert a.override(["refine.lam=0.1"]).fingerprint() != b.fingerprint()
    assert a.refine.lam == 0.1


def test_config_round_trip(tmp_path):
    cfg = PipelineConfig().override(["seed=3", "sweep.lam=[0, 0.5]", "refine.layers=last"])
    (tmp_path / "c.json").write_text(cfg.to_json())
    back = load_config(tmp_path / "c.json")
    assert back.to_dict() == cfg.to_dict() and back.fingerprint() == cfg.fingerprint()


@pytest.mark.parametrize("bad", ["refine.lam=1.5", "refine.normalize=zscore", "rep.source=x", "eval.ks=[0]",
                                 "refine.lambda=0.1", "nope.x=1", "train.epochs=1.5", "refine", "seed=x",
                                 "refine.renormalize_yes_no=1"])
def test_bad_overrides(bad):
    with pytest.raises(ConfigError):
        load_config(None, [bad])


def test_bad_config_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "v.json").write_text(json.dumps({"schema_version": 99}))
    with pytest.raises(ConfigError):
        load_config(tmp_path / "v.json")
    (tmp_path / "s.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "s.json")


def test_int_promotes_to_float():
    assert PipelineConfig().override(["refine.alpha=1"]).refine.alpha == 1.0


# ---------------------------------------------------------------- CLI

def test_cli_config_error_exit_code(tmp_path, capsys):
    assert main(["--workdir", str(tmp_path), "--set", "refine.lam=2", "gen-data"]) == 2
    assert main(["--workdir", str(tmp_path), "--set", "bogus.key=1", "gen-data"]) == 2
    assert "error:" in capsys.readouterr().err


def test_cli_data_error_exit_code(tmp_path):
    assert main(["--workdir", str(tmp_path / "empty"), "index"]) == 3


def test_cli_numeric_error_exit_code(tmp_path, monkeypatch):
    def boom(ws):
        raise NumericError("diverged")
    monkeypatch.setattr(pl, "gen_data", boom)
    assert main(["--workdir", str(tmp_path), "gen-data"]) == 4


def test_cli_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["sweep", "--param", "tau"])
    assert exc.value.code == 2


def test_convert_png(tmp_path, capsys):
    from PIL import Image as PILImage
    arr = (np.arange(4 * 4 * 3) * 5 % 256).astype(np.uint8).reshape(4, 4, 3)
    PILImage.fromarray(arr).save(tmp_path / "x.png")
    assert main(["convert-png", str(tmp_path / "x.png"), str(tmp_path / "x.cimg")]) == 0
    assert json.loads(capsys.readouterr().out)["shape"] == [4, 4, 3]


# ---------------------------------------------------------------- end to end

@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    for cmd in (["gen-data"], ["train"], ["index"], ["extract-rep"], ["refine"], ["eval"]):
        assert main(["--workdir", str(root)] + sum([["--set", s] for s in TINY], []) + cmd) == 0
    return pl.Workspace(root, load_config(None, TINY))


def test_stage_outputs(workspace):
    for name in ("config.json", "corpus/manifest.json", "matcher.ckpt", "backbone.ckpt", "index.cidx",
                 "retrieval.jsonl", "raugrep.bin", "rerank.jsonl", "metrics.json", "timings.json"):
        assert workspace.path(name).exists(), name
    m = json.loads(workspace.path("metrics.json").read_text())
    assert m["config_fingerprint"] == workspace.fp
    assert set(m) == {"config_fingerprint", "first_stage", "refined"}
    assert "timings" not in m["first_stage"]
    assert json.loads(workspace.path("config.json").read_text())["schema_version"] == 1


def test_refined_tail_matches_first_stage(workspace):
    first = pl.load_results(workspace)
    refined = pl.read_rerank(workspace.path("rerank.jsonl"))
    for a, b in zip(first, refined):
        assert a.ids[5:] == b.ids[5:] and sorted(a.ids[:5]) == sorted(b.ids[:5])


def test_sweep_rows_and_failure_marker(workspace):
    rows = pl.sweep(workspace, "alpha", [0.0, -1.0])
    assert rows[0].status == "ok" and rows[1].status == "failed:ParameterError"
    text = pl.sweep_csv(rows, workspace.cfg, workspace.fp)
    lines = text.splitlines()
    assert lines[0] == f"# config_fingerprint: {workspace.fp}"
    assert lines[1].startswith("param,value,status,R@1")
    assert lines[3].startswith("alpha,-1.0,failed:ParameterError,,")


def test_alpha_zero_equals_lambda_sweep_at_same_alpha(workspace):
    base = pl.sweep(workspace, "lam", [0.0])[0].metrics
    first = pl.metrics_for(workspace, [r.ids for r in pl.load_results(workspace)])
    assert base.columns() == first.columns()


def test_layer_sweep(workspace):
    rows = pl.sweep(workspace, "inject_position", ["first", "last", "top"])
    assert [r.status for r in rows] == ["ok", "ok", "failed:ConfigError"]


def test_projection_and_cost(workspace):
    labels, coords = pl.projection(workspace, n_samples=6)
    assert labels.count("q") == labels.count("q+c") == labels.count("q+n") == 6 and coords.shape == (18, 2)
    out = pl.write_projection(workspace, n_samples=6)
    assert out.read_text().splitlines()[1] == "label,x,y"
    rep = pl.cost_report(workspace, tr_queries=2, scaling=[2, 4])
    tfr = {p["name"]: p for p in rep["paradigms"]}["TFR"]
    assert tfr["training_seconds"] == 0.0
    assert [s["top_n"] for s in rep["scaling"]] == [2, 4]


def test_unknown_sweep_param(workspace):
    with pytest.raises(pl.PipelineError):
        pl.sweep(workspace, "tau")
