import json
from pathlib import Path

import numpy as np
import pytest

from compdgm import cli, io
from compdgm.metrics import delta_mcc, mcc_block
from compdgm.numerics import Rng
from compdgm.optim import TrainConfig, model_for_config
from compdgm.simgen import SimConfig, generate_contrastive

SMALL_SIM = {"n_background": 120, "n_target": 100, "seed": 5}
SMALL_FIT = {"p_hat": 5, "q_hat": 5, "epochs": 1, "batch_size": 16}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    return cli.cmd_simulate(SMALL_SIM, tmp_path_factory.mktemp("data") / "ds")


@pytest.fixture(scope="module")
def fitted(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit") / "run"
    with pytest.warns(RuntimeWarning, match="validation split"):
        cli.cmd_fit(dataset, SMALL_FIT, out)
    return out


def test_simulate_default_size(tmp_path):
    out = cli.cmd_simulate({}, tmp_path / "d")
    data = io.read_dataset(out)
    assert data.x_background.shape == (1500, 150) and data.x_target.shape == (1500, 150)
    assert json.loads((out / "manifest.json").read_text())["seeds"] == [0]


def test_simulate_is_byte_identical(tmp_path, dataset):
    again = cli.cmd_simulate(SMALL_SIM, tmp_path / "again")
    for name in ("X_background.csv", "X_target.csv", "latents.csv", "meta.json"):
        assert (again / name).read_bytes() == (dataset / name).read_bytes()


def test_nb_meta_carries_dispersions(tmp_path):
    out = cli.cmd_simulate({**SMALL_SIM, "noise": "nb"}, tmp_path / "nb")
    theta = json.loads((out / "meta.json").read_text())["theta_true"]
    assert len(theta) == 150 and all(1 < t < 5 for t in theta)


def test_dataset_round_trip_matches_generator(dataset):
    ds = generate_contrastive(SimConfig.from_dict(SMALL_SIM))
    data = io.read_dataset(dataset)
    np.testing.assert_array_equal(data.x_target, ds.x_target)
    np.testing.assert_array_equal(data.z_true, ds.z_true)
    np.testing.assert_array_equal(data.s_true, ds.s_true)


def test_csv_integers_and_shortest_floats(tmp_path):
    x = np.array([[1.0, 2.0], [0.1, 1 / 3]])
    io.write_matrix_csv(tmp_path / "a.csv", x[:1], ["a", "b"])
    assert (tmp_path / "a.csv").read_text().splitlines()[1] == "1,2"
    io.write_matrix_csv(tmp_path / "b.csv", x, ["a", "b"])
    _, back = io.read_matrix_csv(tmp_path / "b.csv")
    np.testing.assert_array_equal(back, x)
    (tmp_path / "c.csv").write_text("a,b\n1,2\n3\n")
    with pytest.raises(ValueError):
        io.read_matrix_csv(tmp_path / "c.csv")


def test_array_checkpoint_bit_identity(tmp_path):
    r = Rng(0)
    arrays = {"w": r.normal((3, 4)), "tiny": np.array([5e-324, -0.0, np.pi])}
    io.save_arrays(tmp_path / "ck", arrays, {"k": 1})
    back, meta = io.load_arrays(tmp_path / "ck")
    for k, v in arrays.items():
        assert back[k].tobytes() == v.tobytes()
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert manifest["byte_order"] == "little-endian" and manifest["dtype"] == "f64"
    assert meta["k"] == 1


def test_model_checkpoint_round_trip(tmp_path):
    cfg = TrainConfig(likelihood="nb", p_hat=2, q_hat=3)
    m = model_for_config(cfg, 7)
    io.save_model(tmp_path / "m", m)
    back = io.load_model(tmp_path / "m")
    for k, p in m.parameters().items():
        assert back.parameters()[k].data.tobytes() == p.data.tobytes()
    assert (back.p_hat, back.q_hat, back.n_features) == (2, 3, 7)


def test_fit_writes_all_artifacts(fitted):
    for name in ("checkpoint/manifest.json", "checkpoint/params.bin", "history.jsonl", "manifest.json"):
        assert (fitted / name).exists()
    manifest = json.loads((fitted / "manifest.json").read_text())
    assert all(Path(p).exists() for p in manifest["artifacts"].values())


def test_eval_report_consistency(dataset, fitted, tmp_path):
    rep = cli.cmd_eval(dataset, fitted / "checkpoint", tmp_path / "metrics.json")
    assert abs(rep.delta_mcc - delta_mcc(rep.pearson)) <= 1e-12
    assert rep.spearman is not None and rep.cmcc_pearson is not None and rep.final_cka is not None
    on_disk = json.loads((tmp_path / "metrics.json").read_text())
    assert on_disk["delta_mcc"] == rep.delta_mcc


def test_eval_vae_uses_cpca_split(dataset, tmp_path):
    with pytest.warns(RuntimeWarning):
        cli.cmd_fit(dataset, {**SMALL_FIT, "model": "vae"}, tmp_path / "vae")
    rep = cli.cmd_eval(dataset, tmp_path / "vae" / "checkpoint", tmp_path / "m.json")
    assert rep.salient_units is not None and len(rep.salient_units) == 5


def test_eval_dimension_mismatch(dataset, tmp_path):
    io.save_model(tmp_path / "bad", model_for_config(TrainConfig(), 9))
    with pytest.raises(ValueError, match="dimension mismatch"):
        cli.cmd_eval(dataset, tmp_path / "bad", tmp_path / "m.json")


def test_true_latents_score_one():
    ds = generate_contrastive(SimConfig.from_dict(SMALL_SIM))
    n_b = ds.x_background.shape[0]
    blk = mcc_block(ds.z_true, ds.s_true, ds.z_true, ds.s_true, slice(n_b, None))
    assert abs(blk.mcc_zz - 1) <= 1e-12 and abs(blk.mcc_ss - 1) <= 1e-12


def test_ingest_round_trip_and_missing_latents(dataset, tmp_path):
    with pytest.raises(ValueError):
        io.ingest_external(dataset / "X_background.csv", dataset / "latents.csv", tmp_path / "x")
    labels = np.arange(100)[:, None] % 3
    io.write_matrix_csv(tmp_path / "labels.csv", labels, ["label"])
    out = io.ingest_external(dataset / "X_background.csv", dataset / "X_target.csv", tmp_path / "ing",
                             tmp_path / "labels.csv")
    for name in ("X_background.csv", "X_target.csv"):
        assert (out / name).read_bytes() == (dataset / name).read_bytes()
    data = io.read_dataset(out)
    assert data.z_true is None and data.meta["has_latents"] is False
    with pytest.warns(RuntimeWarning):
        cli.cmd_fit(out, SMALL_FIT, tmp_path / "fit")
    rep = cli.cmd_eval(out, tmp_path / "fit" / "checkpoint", tmp_path / "m.json")
    assert rep.pearson is None and rep.delta_mcc is None
    assert rep.ari is not None and rep.nmi is not None and rep.asw is not None


def test_ingest_rejects_bad_counts(tmp_path):
    io.write_matrix_csv(tmp_path / "b.csv", np.array([[1.0, -2.0]]), ["a", "b"])
    io.write_matrix_csv(tmp_path / "t.csv", np.array([[1.0, 2.0]]), ["a", "b"])
    with pytest.raises(ValueError, match="negative"):
        io.ingest_external(tmp_path / "b.csv", tmp_path / "t.csv", tmp_path / "o")
    io.write_matrix_csv(tmp_path / "t3.csv", np.array([[1.0, 2.0, 3.0]]), ["a", "b", "c"])
    with pytest.raises(ValueError, match="column count"):
        io.ingest_external(tmp_path / "t.csv", tmp_path / "t3.csv", tmp_path / "o")


def test_config_rejects_unknown_and_nested(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"epochs": 1, "learning_rate": 0.1}))
    assert cli.main(["fit", "--data", str(tmp_path), "--config", str(tmp_path / "c.json"),
                     "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "n.json").write_text(json.dumps({"a": {"b": 1}}))
    with pytest.raises(ValueError, match="flat"):
        io.load_json_config(tmp_path / "n.json")
    with pytest.raises(ValueError, match="learning_rate"):
        TrainConfig.from_dict({"learning_rate": 0.1})


def test_grids():
    assert len(cli.table_grid("t1")) == 6
    assert len(cli.table_grid("t2")) == 8
    t3 = cli.table_grid("t3")
    assert len(t3) == 12
    assert sorted({c[2]["penalty_lambda"] for c in t3 if c[2]["regularizer"] == "penalty"}) == [0, 10, 50, 100, 200]
    with pytest.raises(ValueError):
        cli.table_grid("t9")


def test_aggregate_std_matches_direct():
    runs = [{"pearson": {"mcc_zz": v, "mcc_zs": 0.1, "mcc_sz": 0.2, "mcc_ss": 0.9}, "delta_mcc": v / 2}
            for v in (0.8, 0.85, 0.9, 0.83)]
    agg = cli.aggregate(runs)
    vals = np.array([0.8, 0.85, 0.9, 0.83])
    assert abs(agg["MCC_zz"][1] - vals.std(ddof=1)) <= 1e-12
    assert abs(agg["delta-MCC"][0] - (vals / 2).mean()) <= 1e-12


def test_reproduce_small_grid(tmp_path, monkeypatch):
    cells = [("tiny", {"n_background": 80, "n_target": 80}, {"batch_size": 16, "p_hat": 2, "q_hat": 2})]
    monkeypatch.setattr(cli, "table_grid", lambda table: cells)
    with pytest.warns(RuntimeWarning):
        raw = cli.cmd_reproduce("t1", [0, 1], tmp_path, epochs=1)
    runs = raw["tiny"]["runs"]
    assert len(runs) == 2 and raw["tiny"]["failures"] == []
    table = (tmp_path / "t1.md").read_text()
    d = np.array([r["delta_mcc"] for r in runs])
    assert f"{d.mean():.2f} ± {d.std(ddof=1):.2f}" in table
    # cached: a second call reads the stored metrics instead of retraining
    again = cli.cmd_reproduce("t1", [0, 1], tmp_path, epochs=1)
    assert again["tiny"]["runs"] == runs
    with pytest.raises(ValueError):
        cli.cmd_reproduce("t1", [0], tmp_path)


def test_reproduce_marks_failed_cells(tmp_path, monkeypatch):
    cells = [("broken", {}, {"objective": "XX"})]
    monkeypatch.setattr(cli, "table_grid", lambda table: cells)
    raw = cli.cmd_reproduce("t2", [0, 1], tmp_path, epochs=1)
    assert len(raw["broken"]["failures"]) == 2
    assert "failed" in (tmp_path / "t2.md").read_text()


def test_check_theory_command(tmp_path, capsys):
    assert cli.main(["check-theory", "all", "--out", str(tmp_path)]) == 0
    reports = json.loads((tmp_path / "checks.json").read_text())
    assert len(reports) == 4 and all(r["passed"] for r in reports)
    assert cli.main(["check-theory", "linear", "--negative-control"]) == 0
    assert "FAIL" in capsys.readouterr().out


def test_cli_end_to_end(tmp_path):
    (tmp_path / "sim.json").write_text(json.dumps({"n_background": 60, "n_target": 60}))
    (tmp_path / "fit.json").write_text(json.dumps({"epochs": 1, "batch_size": 16, "p_hat": 2, "q_hat": 2}))
    assert cli.main(["simulate", "--config", str(tmp_path / "sim.json"), "--out", str(tmp_path / "d"),
                     "--seed", "3"]) == 0
    with pytest.warns(RuntimeWarning):
        assert cli.main(["fit", "--data", str(tmp_path / "d"), "--config", str(tmp_path / "fit.json"),
                         "--out", str(tmp_path / "f")]) == 0
    assert cli.main(["eval", "--data", str(tmp_path / "d"), "--checkpoint", str(tmp_path / "f" / "checkpoint"),
                     "--out", str(tmp_path / "m.json")]) == 0
    assert json.loads((tmp_path / "m.json").read_text())["pearson"] is not None
