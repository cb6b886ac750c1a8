import csv
import json

import numpy as np
import pytest

from isosft.cli import main
from isosft.errors import EmptyGrid
from isosft.pipeline import (load_template_fit, read_results,
                             save_template_fit, sweep_lambdas)
from isosft.solver import LossWeights, SolverConfig, reconstruct_sequence
from isosft.evaluate import evaluate
from isosft.synth import load_bundle

from conftest import affine_fit

SHEET_A = [[130.0, 0.0], [0.0, 100.0], [0.0, 0.0]]
SHEET_C = [-65.0, -50.0, 260.0]
FAST = {"max_frame_iters": 20, "early_stop_window": 0}


@pytest.fixture
def bundle(tmp_path):
    out = tmp_path / "b"
    assert main(["synth", "--out", str(out), "--frames", "3",
                 "--noise-px", "0.5", "--seed", "2"]) == 0
    seq = load_bundle(out)
    # a planar fit of the flat template stands in for the slow over-fit
    save_template_fit(out / "template_fit.json",
                      affine_fit(seq.template, SHEET_A, SHEET_C))
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(FAST))
    return out, cfg


def test_template_fit_checkpoint_round_trip(tmp_path, bundle):
    out, _ = bundle
    fit = load_template_fit(out / "template_fit.json")
    save_template_fit(tmp_path / "again.json", fit)
    back = load_template_fit(tmp_path / "again.json")
    np.testing.assert_array_equal(back.net.theta, fit.net.theta)
    np.testing.assert_array_equal(back.template_metrics,
                                  fit.template_metrics)
    np.testing.assert_array_equal(back.param_points, fit.param_points)


def test_reconstruct_then_eval(tmp_path, bundle):
    out, cfg = bundle
    for method in ("neural", "classical"):
        res = tmp_path / f"{method}.jsonl"
        assert main(["reconstruct", "--bundle", str(out), "--method",
                     method, "--config", str(cfg), "--out", str(res)]) == 0
        recs = [json.loads(line) for line in res.read_text().splitlines()]
        assert len(recs) == 3
        assert {r["method"] for r in recs} == {method}
        report = tmp_path / f"{method}.json"
        plot = tmp_path / f"{method}.csv"
        assert main(["eval", "--bundle", str(out), "--results", str(res),
                     "--out", str(report), "--csv", str(plot)]) == 0
        rep = json.loads(report.read_text())
        # independent one-line oracle over the raw records
        truth = [json.loads(l)["vertices"]
                 for l in (out / "frames.jsonl").read_text().splitlines()]
        oracle = np.mean([np.linalg.norm(np.array(r["vertex_estimates"])
                                         - np.array(v), axis=1).mean()
                          for r, v in zip(recs, truth)])
        assert abs(rep["sequence_mean"] - oracle) < 1e-12
        assert rep["methods"] == [method]
        rows = list(csv.DictReader(plot.open()))
        assert len(rows) == 3 and float(rows[0]["error"]) >= 0


def test_results_are_byte_stable(tmp_path, bundle):
    out, cfg = bundle
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for path in (a, b):
        assert main(["reconstruct", "--bundle", str(out), "--config",
                     str(cfg), "--out", str(path)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.jsonl.timing.json").exists()


def test_error_records_and_exit_codes(tmp_path, bundle, capsys):
    out, cfg = bundle
    res = tmp_path / "r.jsonl"
    main(["reconstruct", "--bundle", str(out), "--method", "classical",
          "--out", str(res)])
    short = tmp_path / "short.jsonl"
    short.write_text("\n".join(res.read_text().splitlines()[:2]) + "\n")
    report = tmp_path / "report.json"
    capsys.readouterr()
    code = main(["eval", "--bundle", str(out), "--results", str(short),
                 "--out", str(report)])
    err = json.loads(capsys.readouterr().err)
    assert code == 3 and err["error"] == "ShapeMismatch"
    assert not report.exists()
    assert main(["eval", "--bundle", str(tmp_path / "none"), "--results",
                 str(res), "--out", str(report)]) == 6
    bad = tmp_path / "bad.json"
    bad.write_text('{"lr": 1e-3, "nonsense": 1}')
    assert main(["reconstruct", "--bundle", str(out), "--config", str(bad),
                 "--out", str(res)]) == 2
    assert main(["sweep", "--bundle", str(out), "--grid", "1;2"]) == 2
    assert main(["sweep", "--bundle", str(out), "--values"]) == 2
    with pytest.raises(SystemExit):
        main(["reconstruct", "--bundle", str(out), "--method", "magic",
              "--out", str(res)])


def test_sweep_rows(tmp_path, bundle):
    out, cfg = bundle
    seq = load_bundle(out)
    fit = load_template_fit(out / "template_fit.json")
    config = SolverConfig(**FAST)
    with pytest.raises(EmptyGrid):
        sweep_lambdas(seq, [], config, fit)
    rows = sweep_lambdas(seq, [(0.01, 0.001)], config, fit)
    sols = reconstruct_sequence(fit, seq.camera, seq.matches,
                                LossWeights(0.01, 0.001), config)
    direct = evaluate([s.vertex_estimates for s in sols], seq.frames,
                      seq.template)
    assert len(rows) == 1 and rows[0]["error"] == direct.sequence_mean
    table = tmp_path / "sweep.csv"
    assert main(["sweep", "--bundle", str(out), "--config", str(cfg),
                 "--grid", "0,0", "0.1,0", "--out", str(table)]) == 0
    rows = list(csv.DictReader(table.open()))
    errs = [float(r["error"]) for r in rows]
    assert len(rows) == 2 and errs == sorted(errs)


def test_read_results_orders_frames(tmp_path):
    path = tmp_path / "r.jsonl"
    path.write_text('{"frame": 1, "vertex_estimates": [[1, 1, 1]]}\n'
                    '{"frame": 0, "vertex_estimates": [[0, 0, 0]]}\n')
    est, _ = read_results(path)
    np.testing.assert_array_equal(est[:, 0, 0], [0, 1])
