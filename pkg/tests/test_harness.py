import json
import math

import numpy as np
import pytest
from typer.testing import CliRunner

from dedupstore.errors import FormatError, ShapeError
from dedupstore.harness import pipeline
from dedupstore.harness.cli import app
from dedupstore.harness.family import (
    ModelFamilySpec,
    blocked_forward,
    count_differing_blocks,
    generate_family,
    model_tensors,
    validation_set,
)
from dedupstore.harness.oracles import dense_oracle_infer
from dedupstore.harness.simulate import WorkloadSpec, request_sequence, simulate

runner = CliRunner()


def write(path, text):
    path.write_text(text)
    return path


class TestFamily:
    def test_identical_when_rho_zero(self):
        fam = generate_family(ModelFamilySpec(num_models=3, rho=0.0))
        for model in fam[1:]:
            for a, b in zip(model.weights, fam[0].weights):
                assert a.tobytes() == b.tobytes()

    def test_rho_redraws_exact_block_count(self):
        spec = ModelFamilySpec(num_models=3, layers=(64, 64, 8), rho=0.1, seed=4)
        fam = generate_family(spec)
        for model in fam[1:]:
            assert count_differing_blocks(fam[0].weights[0], model.weights[0], (8, 8)) == math.ceil(0.1 * 64)
            assert count_differing_blocks(fam[0].weights[1], model.weights[1], (8, 8)) == 1

    def test_seeds(self):
        a = generate_family(ModelFamilySpec(num_models=1, seed=1))[0].weights[0]
        b = generate_family(ModelFamilySpec(num_models=1, seed=2))[0].weights[0]
        assert not np.array_equal(a, b)
        again = generate_family(ModelFamilySpec(num_models=1, seed=1))[0].weights[0]
        assert a.tobytes() == again.tobytes()

    def test_validation_labels(self):
        spec = ModelFamilySpec(num_models=1, label_noise=0.0)
        base = generate_family(spec)[0]
        x, y = validation_set(spec, base)
        assert x.shape == (256, 64)
        out = dense_oracle_infer(base.weights, base.biases, x, spec.activations)
        np.testing.assert_array_equal(y, out.argmax(axis=1))

    def test_blocked_forward_matches_dense(self):
        spec = ModelFamilySpec(num_models=1, layers=(32, 16, 16, 8), validation_size=40)
        model = generate_family(spec)[0]
        x, _ = validation_set(spec, model)
        got = blocked_forward(model_tensors(spec, 0, model), model.biases, x, spec.activations)
        want = dense_oracle_infer(model.weights, model.biases, x, spec.activations)
        assert np.abs(got - want).max() <= 1e-12

    def test_spec_rejects_uneven_layers(self):
        with pytest.raises(ShapeError, match="not evenly blocked"):
            ModelFamilySpec(layers=(64, 30, 2))

    @pytest.mark.parametrize("kw", [{"rho": 1.5}, {"num_models": 0}, {"layers": (8,)}, {"validation_size": 0}])
    def test_spec_validation(self, kw):
        with pytest.raises(ValueError):
            ModelFamilySpec(**kw)

    def test_spec_file_round_trip(self, tmp_path):
        spec = ModelFamilySpec(num_models=2, rho=0.25, seed=9)
        path = write(tmp_path / "f.spec", spec.to_text())
        assert ModelFamilySpec.from_file(path) == spec

    @pytest.mark.parametrize(
        "text, match",
        [
            ("num_models=2\n", "version"),
            ("version=2\n", "version"),
            ("version=1\ncolour=red\n", "unknown keys"),
            ("version=1\nnum_models=two\n", "invalid literal"),
        ],
    )
    def test_spec_file_errors(self, tmp_path, text, match):
        with pytest.raises(FormatError, match=match):
            ModelFamilySpec.from_file(write(tmp_path / "f.spec", text))


class TestWorkload:
    def test_parse(self, tmp_path):
        path = write(tmp_path / "w", "version=1\n# four models\nrates=0.4,0.3,0.2,0.1\nticks=50\nseed=3\n")
        w = WorkloadSpec.from_file(path)
        assert w.rates == (0.4, 0.3, 0.2, 0.1) and w.ticks == 50 and w.policy == "optimized-L"

    @pytest.mark.parametrize("text", ["version=1\nticks=5\n", "version=1\nrates=1\nspeed=2\n"])
    def test_parse_errors(self, tmp_path, text):
        with pytest.raises(FormatError):
            WorkloadSpec.from_file(write(tmp_path / "w", text))

    @pytest.mark.parametrize("kw", [{"rates": (-1.0,)}, {"rates": (1.0,), "ticks": 0}, {"rates": (1.0,), "policy": "FIFO"}])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            WorkloadSpec(**kw)

    def test_request_sequence_deterministic(self):
        a = request_sequence({0: 1.0, 1: 2.0}, 30, 5)
        assert a == request_sequence({0: 1.0, 1: 2.0}, 30, 5)
        assert [t for t, _ in a] == sorted(t for t, _ in a)

    def test_simulate_trace_matches_stats(self):
        pages = {0: [0, 1, 2], 1: [0, 1, 3]}
        result = simulate(pages, {0: 1.0, 1: 1.0}, 20, 3, "optimized-L", seed=1)
        hits = sum(hit for *_, hit in result.trace)
        assert hits == result.stats.hits
        assert len(result.trace) == result.stats.hits + result.stats.misses

    def test_unknown_policy(self):
        with pytest.raises(ValueError, match="unknown policy"):
            simulate({0: [1]}, {0: 1.0}, 1, 1, "ARC")


SPEC = "version=1\nnum_models={n}\nlayers=64,32,8\nblock_shape=8,8\nseed={seed}\nrho={rho}\nvalidation_size=128\n"
WORKLOAD = "version=1\nrates={rates}\nticks=60\nseed=2\ncapacity_pages=3\n"


def run_pipeline(tmp_path, name, n=3, rho=0.0, seed=1, threshold=0.0, algo="two-stage"):
    store = tmp_path / name
    spec = write(tmp_path / f"{name}.spec", SPEC.format(n=n, seed=seed, rho=rho))
    wl = write(tmp_path / f"{name}.wl", WORKLOAD.format(rates=",".join(["0.5"] * n)))
    steps = [
        ["ingest", "--spec", str(spec), "--store", str(store)],
        ["dedup", "--store", str(store), "--threshold", str(threshold), "--batch", "5"],
        ["pack", "--store", str(store), "--algo", algo, "--capacity", "8"],
        ["materialize", "--store", str(store)],
        ["simulate", "--store", str(store), "--workload", str(wl), "--policy", "optimized-L"],
        ["simulate", "--store", str(store), "--workload", str(wl), "--policy", "locality-set", "--capacity-pages", "2"],
        ["report", "--store", str(store), "--format", "json"],
    ]
    outputs = []
    for args in steps:
        res = runner.invoke(app, args)
        assert res.exit_code == 0, (args, res.output)
        outputs.append(res.output)
    return store, outputs


class TestCli:
    def test_full_pipeline(self, tmp_path):
        store, outputs = run_pipeline(tmp_path, "a")
        report = json.loads(outputs[-1])
        assert report["pages_before"] == 15 and report["pages_after"] == 5
        assert report["distinct_blocks"] == 36
        assert set(report["hit_ratios"]) == {"optimized-L", "locality-set"}
        assert all(m["accuracy_before"] == m["accuracy_after"] for m in report["models"])
        assert outputs[4].endswith(f"total hit_ratio={report['hit_ratios']['optimized-L']:.4f}\n")
        res = runner.invoke(app, ["audit", "--store", str(store)])
        assert res.exit_code == 0 and res.output == "ok\n"

    def test_text_report(self, tmp_path):
        store, _ = run_pipeline(tmp_path, "a", n=2)
        res = runner.invoke(app, ["report", "--store", str(store), "--timing"])
        assert res.exit_code == 0
        assert "compression_ratio=0.5000" in res.output
        assert "time dedup=" in res.output
        assert (store / "report.txt").exists()

    def test_pipeline_is_deterministic(self, tmp_path):
        a, out_a = run_pipeline(tmp_path, "a", rho=0.3, threshold=0.02)
        b, out_b = run_pipeline(tmp_path, "b", rho=0.3, threshold=0.02)
        assert out_a[1:] == out_b[1:]
        for name in ("manifest", "index.ddix", "mappings.txt", "scheme.txt", "report.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name
        assert sorted(p.name for p in (a / "pages").iterdir()) == sorted(p.name for p in (b / "pages").iterdir())
        for p in (a / "pages").iterdir():
            assert p.read_bytes() == (b / "pages" / p.name).read_bytes()

    def test_zero_threshold_keeps_accuracy(self, tmp_path):
        store, outputs = run_pipeline(tmp_path, "a", n=3, rho=0.5, threshold=0.0)
        report = json.loads(outputs[-1])
        for row in report["models"]:
            assert row["accuracy_after"] >= row["accuracy_before"]
        # perturbed blocks are not merged with the base model's blocks
        summary = pipeline.read_dedup_summary(store)[1]
        assert all(float(r["final"]) >= float(r["baseline"]) for r in summary)

    def test_reported_accuracy_is_recomputed_from_pages(self, tmp_path):
        store, outputs = run_pipeline(tmp_path, "a", n=2, rho=0.5, threshold=1.0)
        report = json.loads(outputs[-1])
        summary = pipeline.read_dedup_summary(store)[1]
        for row, dedup in zip(report["models"], summary):
            assert row["accuracy_after"] == float(dedup["final"])

    @pytest.mark.parametrize(
        "args, stage",
        [
            (["dedup"], "ingest"),
            (["pack"], "dedup"),
            (["materialize"], "pack"),
            (["report"], "ingest"),
        ],
    )
    def test_missing_prerequisite_exit_2(self, tmp_path, args, stage):
        res = runner.invoke(app, args + ["--store", str(tmp_path / "empty")])
        assert res.exit_code == 2
        assert f"run `dedupstore {stage}` first" in res.output

    def test_simulate_before_materialize(self, tmp_path):
        store = tmp_path / "s"
        spec = write(tmp_path / "f.spec", SPEC.format(n=1, seed=0, rho=0.0))
        wl = write(tmp_path / "w", WORKLOAD.format(rates="1"))
        assert runner.invoke(app, ["ingest", "--spec", str(spec), "--store", str(store)]).exit_code == 0
        res = runner.invoke(app, ["simulate", "--store", str(store), "--workload", str(wl)])
        assert res.exit_code == 2 and "materialize" in res.output

    def test_invalid_spec_exit_1(self, tmp_path):
        spec = write(tmp_path / "bad.spec", "version=1\nlayers=64,30,2\n")
        res = runner.invoke(app, ["ingest", "--spec", str(spec), "--store", str(tmp_path / "s")])
        assert res.exit_code == 1
        assert "not evenly blocked" in res.output

    def test_missing_spec_file_exit_2(self, tmp_path):
        res = runner.invoke(app, ["ingest", "--spec", str(tmp_path / "nope"), "--store", str(tmp_path / "s")])
        assert res.exit_code == 2

    def test_bad_capacity_exit_1(self, tmp_path):
        store, _ = run_pipeline(tmp_path, "a", n=1)
        res = runner.invoke(app, ["pack", "--store", str(store), "--capacity", "0"])
        assert res.exit_code == 1

    def test_wrong_rate_count_exit_1(self, tmp_path):
        store, _ = run_pipeline(tmp_path, "a", n=2)
        wl = write(tmp_path / "w", WORKLOAD.format(rates="1,1,1"))
        res = runner.invoke(app, ["simulate", "--store", str(store), "--workload", str(wl)])
        assert res.exit_code == 1 and "3 rates for 2 models" in res.output

    def test_rerunning_a_stage_drops_later_artifacts(self, tmp_path):
        store, _ = run_pipeline(tmp_path, "a", n=2)
        assert runner.invoke(app, ["pack", "--store", str(store), "--algo", "baseline"]).exit_code == 0
        assert not list(store.glob("simulate-*.txt"))
        assert not (store / "manifest").exists()
        assert runner.invoke(app, ["materialize", "--store", str(store)]).exit_code == 0
        assert runner.invoke(app, ["audit", "--store", str(store)]).exit_code == 0

    def test_audit_reports_damage(self, tmp_path):
        store, _ = run_pipeline(tmp_path, "a", n=2)
        (store / "pages" / "77.pg").write_bytes(b"x")
        # opening for audit runs recovery first, so the orphan is cleaned up
        assert runner.invoke(app, ["audit", "--store", str(store)]).exit_code == 0
        assert not (store / "pages" / "77.pg").exists()
        next(iter(sorted((store / "pages").iterdir()))).unlink()
        res = runner.invoke(app, ["audit", "--store", str(store)])
        assert res.exit_code == 1 and "missing" in res.output

    def test_help(self):
        res = runner.invoke(app, ["--help"])
        assert res.exit_code == 0
        for cmd in ("ingest", "dedup", "pack", "materialize", "simulate", "report"):
            assert cmd in res.output
