import csv
import json

import jsonschema
import numpy as np
import pytest

from contracert.cli import field_rows, main
from contracert.interval import symmetric_box
from contracert.modelio import (
    ModelFormatError,
    load_model,
    load_schema,
    problem_fingerprint,
    save_model,
)
from contracert.nn import controller_eval
from contracert.metric import eval_M
from contracert.verifier import ContractionProblem

from conftest import pendulum_problem

CONFIG = {
    "plant": {"name": "inverted_pendulum"},
    "controller": {"hidden": [8, 8]},
    "metric": {"hidden": [8, 8]},
    "training": {"initial_r": 4, "max_epochs": 100, "seed": 0},
}


def write_config(tmp_path, cfg=CONFIG):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return p


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = write_config(tmp)
    code = main(["train", str(cfg), "--out", str(tmp / "out")])
    return code, tmp / "out", cfg


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


class TestModelIO:
    def test_roundtrip_bit_identical(self, rng, tmp_path):
        prob = pendulum_problem(rng, rate=0.25)
        save_model(prob, tmp_path / "m.json")
        back = load_model(tmp_path / "m.json")
        X = rng.normal(0, 2, size=(100, 2))
        np.testing.assert_array_equal(controller_eval(back.controller, X), controller_eval(prob.controller, X))
        np.testing.assert_array_equal(eval_M(back.metric, X), eval_M(prob.metric, X))
        assert back.rate == 0.25
        assert problem_fingerprint(back) == problem_fingerprint(prob)

    def test_fingerprint_changes_with_weights(self, rng):
        prob = pendulum_problem(rng)
        before = problem_fingerprint(prob)
        W, b = prob.metric.base.layers[0]
        W[0, 0] = np.nextafter(W[0, 0], np.inf)
        assert problem_fingerprint(prob) != before

    def test_malformed(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"version": 1}')
        with pytest.raises(ModelFormatError):
            load_model(p)
        p.write_text("not json")
        with pytest.raises(ModelFormatError):
            load_model(p)


class TestTrain:
    def test_outputs(self, trained):
        code, out, _ = trained
        assert code == 0
        for name in ("model.json", "certificate.json", "model_final.json", "state.json", "train_log.csv"):
            assert (out / name).exists()
        cert = json.loads((out / "certificate.json").read_text())
        jsonschema.validate(cert, load_schema("certificate"))
        assert cert["all_verified"] and len(cert["cells"]) == 16
        assert cert["metric_upper_bound"] >= 0.1
        rows = read_csv(out / "train_log.csv")
        assert rows[0][:3] == ["epoch", "loss", "r"] and len(rows) == 101
        ckpts = sorted((out / "checkpoints").glob("model_epoch*.json"))
        assert ckpts and len(ckpts) == len(list((out / "checkpoints").glob("lambda_epoch*.json")))

    def test_resume(self, trained, tmp_path):
        _, out, cfg = trained
        import shutil

        run = tmp_path / "resumed"
        shutil.copytree(out, run)
        code = main(["train", str(cfg), "--out", str(run), "--resume", str(run / "state.json"), "--max-epochs", "105"])
        assert code == 0
        rows = read_csv(run / "train_log.csv")
        assert [int(r[0]) for r in rows[-5:]] == [100, 101, 102, 103, 104]
        assert json.loads((run / "state.json").read_text())["epoch"] == 105

    def test_env_seed(self, tmp_path, monkeypatch):
        cfg = dict(CONFIG, training={"initial_r": 2, "max_epochs": 1, "seed": 0})
        p = write_config(tmp_path, cfg)
        main(["train", str(p), "--out", str(tmp_path / "a")])
        monkeypatch.setenv("CONTRACERT_SEED", "5")
        main(["train", str(p), "--out", str(tmp_path / "b")])
        a = json.loads((tmp_path / "a" / "state.json").read_text())["theta"]
        b = json.loads((tmp_path / "b" / "state.json").read_text())["theta"]
        assert a != b


class TestVerify:
    def test_checkpoint_verifies(self, trained, tmp_path, capsys):
        _, out, _ = trained
        cert = json.loads((out / "certificate.json").read_text())
        h = cert["domain"]["hi"]
        code = main(["verify", str(out / "model.json"), "--half-widths", *map(str, h), "--r", "4", "--out", str(tmp_path / "c.json")])
        assert code == 0 and "VERIFIED" in capsys.readouterr().out
        again = json.loads((tmp_path / "c.json").read_text())
        assert [c["lambda_max"] for c in again["cells"]] == [c["lambda_max"] for c in cert["cells"]]
        assert again["fingerprint"] == cert["fingerprint"]

    def test_unverified_exit(self, trained):
        _, out, _ = trained
        assert main(["verify", str(out / "model.json"), "--domain=-3..3", "--domain=-8..8"]) == 2

    def test_adaptive(self, trained, tmp_path):
        _, out, _ = trained
        code = main(["verify", str(out / "model.json"), "--half-widths", "0.05", "0.1", "--adaptive", "--max-depth", "2"])
        assert code in (0, 2)

    def test_malformed_model_exit(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text('{"controller": 3}')
        assert main(["verify", str(p), "--half-widths", "0.1", "0.1"]) == 65
        assert main(["verify", str(tmp_path / "missing.json"), "--half-widths", "0.1", "0.1"]) == 65

    def test_bad_domain(self, trained):
        _, out, _ = trained
        assert main(["verify", str(out / "model.json"), "--domain=1..0", "--domain=0..1"]) == 64
        assert main(["verify", str(out / "model.json"), "--half-widths", "0.1"]) == 64


class TestConfigErrors:
    @pytest.mark.parametrize(
        "cfg",
        [
            dict(CONFIG, training={"learning_rate": 0.0}),
            dict(CONFIG, training={"learning_rate": -0.1}),
            dict(CONFIG, colour="blue"),
            dict(CONFIG, plant={"name": "cartpole"}),
            dict(CONFIG, training={"start_half_widths": [0.1]}),
        ],
    )
    def test_exit_64(self, cfg, tmp_path):
        assert main(["train", str(write_config(tmp_path, cfg)), "--out", str(tmp_path / "o")]) == 64

    def test_usage_error(self):
        with pytest.raises(SystemExit) as e:
            main(["frobnicate"])
        assert e.value.code == 64

    def test_missing_config(self, tmp_path):
        assert main(["train", str(tmp_path / "nope.json")]) == 64


class TestSimulate:
    def test_csv(self, trained, tmp_path):
        _, out, _ = trained
        code = main(["simulate", str(out / "model.json"), "--x0", "0.1", "0.0", "--T", "1", "--dt", "0.01", "--out", str(tmp_path / "s.csv")])
        assert code == 0
        rows = read_csv(tmp_path / "s.csv")
        assert rows[0] == ["t", "x1", "x2", "u1"] and len(rows) == 102
        assert float(rows[1][1]) == 0.1

    def test_divergence_exit(self, tmp_path, rng):
        from contracert.metric import NeuralContractionMetric
        from contracert.plant import LinearPlant

        prob = ContractionProblem(LinearPlant(np.eye(1) * 80, np.zeros((1, 1))), None, NeuralContractionMetric.constant_metric(np.eye(1)))
        save_model(prob, tmp_path / "m.json")
        assert main(["simulate", str(tmp_path / "m.json"), "--x0", "1", "--T", "100", "--out", str(tmp_path / "s.csv")]) == 3


class TestExportField:
    def test_two_by_two(self, trained, tmp_path):
        _, out, _ = trained
        code = main(["export-field", str(out / "model.json"), "--domain=-0.1..0.1", "--domain=-0.2..0.2", "--grid", "2", "--out", str(tmp_path / "f.csv")])
        assert code == 0
        rows = read_csv(tmp_path / "f.csv")
        assert rows[0] == ["x1", "x2", "dx1", "dx2", "u"] and len(rows) == 5
        prob = load_model(out / "model.json")
        for r in rows[1:]:
            x1, x2, dx1, dx2, u = map(float, r)
            x = np.array([x1, x2])
            ref = prob.plant.f(x) + prob.plant.B @ controller_eval(prob.controller, x)
            np.testing.assert_allclose([dx1, dx2], ref, rtol=1e-12, atol=1e-12)

    def test_origin_has_zero_input(self, trained):
        _, out, _ = trained
        prob = load_model(out / "model.json")
        rows = field_rows(prob, symmetric_box([1.0, 1.0]), 3)
        centre = rows[4]
        assert centre[0] == 0.0 and centre[1] == 0.0
        # batched evaluation rounds differently from the single-point anchor
        np.testing.assert_allclose(centre[2:], 0.0, atol=1e-12)
