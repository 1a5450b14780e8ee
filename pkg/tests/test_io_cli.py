import csv
import json

import numpy as np
import pytest
import yaml

from pdmtl import io
from pdmtl.cli import main
from pdmtl.nn import ConfigurationError
from pdmtl.trainer import RunConfig

TINY = """\
epochs: 3
encoder_dims: [10, 8, 6]
steps_per_epoch: 2
batch_size: 16
shared_batch_size: 32
data:
  n_train: 400
  n_test: 100
  n_shared: 100
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY)
    return p


def block_z():
    z = np.full((4, 4), -0.2)
    for a, b in ((0, 3), (1, 2)):
        z[a, b] = z[b, a] = 1.5
    np.fill_diagonal(z, 2.0)
    return z


def test_empty_config_gives_defaults():
    cfg, out = io.parse_config_text("")
    assert cfg == RunConfig()
    assert out is None
    assert (cfg.n_clients, cfg.topology_mode, cfg.lr, cfg.k2, cfg.h) == (4, "dynamic", 2e-5, 2, 5)


def test_k2_zero_names_field():
    with pytest.raises(ConfigurationError, match="k2"):
        io.parse_config_text("k2: 0\n")


def test_unknown_keys_rejected():
    with pytest.raises(ConfigurationError, match="lrr"):
        io.parse_config_text("lrr: 0.1\n")
    with pytest.raises(ConfigurationError, match="data.n_tran"):
        io.parse_config_text("data:\n  n_tran: 5\n")


def test_parse_error_reports_position():
    with pytest.raises(io.ConfigParseError, match=r"line 2, column 6"):
        io.parse_config_text("epochs: 3\nk1: 1: 2\n")


def test_non_mapping_rejected():
    with pytest.raises(io.ConfigParseError):
        io.parse_config_text("- 1\n- 2\n")


def test_round_trip(tmp_path):
    cfg = RunConfig(epochs=7, topology_freeze_epoch=21, averaging="average_Z")
    cfg.data.covariance = "six_task"
    cfg.n_clients = 6
    p = tmp_path / "c.yaml"
    p.write_text(io.dump_config(cfg, output_dir="somewhere"))
    back, out = io.parse_config(p)
    assert back == cfg
    assert out == "somewhere"
    p.write_text(io.dump_config(RunConfig()))
    assert io.parse_config(p)[0] == RunConfig()


def test_convergence_epoch():
    assert io.convergence_epoch([1.0, 0.5, 0.3, 0.2, 0.2]) == 4
    assert io.convergence_epoch([1.0, 0.209, 0.2, 0.25]) == 2
    assert io.convergence_epoch([0.1, 0.5]) == 1


def test_fmt_refuses_non_finite():
    with pytest.raises(ValueError):
        io._fmt(float("nan"))
    assert float(io._fmt(0.1)) == 0.1


def test_run_writes_bundle(tmp_path, tiny_cfg, capsys):
    out = tmp_path / "bundle"
    assert main(["run", "--config", str(tiny_cfg), "--out", str(out)]) == 0
    files = sorted(p.name for p in out.iterdir())
    assert files == sorted(io.BUNDLE_FILES)
    rows = list(csv.DictReader(open(out / "losses.csv")))
    assert len(rows) == 3 * 4
    assert all(np.isfinite(float(r["test_loss"])) for r in rows)
    topo_doc = json.loads((out / "topology.json").read_text())
    assert len(topo_doc["epochs"]) == 3
    assert topo_doc["epochs"][0]["z"] is not None
    heat = list(csv.reader(open(out / "heatmaps.csv")))
    assert heat[0] == ["epoch", "row", "w_0", "w_1", "w_2", "w_3"]
    assert len(heat) == 1 + 3 * 4
    echoed = yaml.safe_load((out / "config.yaml").read_text())
    assert echoed["epochs"] == 3 and echoed["lr"] == 2e-5
    assert b"\r" not in (out / "losses.csv").read_bytes()


def test_run_flags_override(tmp_path, tiny_cfg):
    out = tmp_path / "fc"
    code = main(["run", "--config", str(tiny_cfg), "--out", str(out), "--mode", "fully-connected", "--seed", "3", "--epochs", "2"])
    assert code == 0
    echoed = yaml.safe_load((out / "config.yaml").read_text())
    assert echoed["topology_mode"] == "fully_connected"
    assert echoed["seed"] == 3 and echoed["epochs"] == 2
    doc = json.loads((out / "topology.json").read_text())
    assert all(e["z"] is None for e in doc["epochs"])


def test_bundles_byte_identical(tmp_path, tiny_cfg):
    for name in ("a", "b"):
        main(["run", "--config", str(tiny_cfg), "--out", str(tmp_path / name)])
    for f in ("losses.csv", "topology.json", "heatmaps.csv", "config.yaml"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_bad_config_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("k2: 0\n")
    assert main(["run", "--config", str(p)]) == 2
    err = capsys.readouterr().err
    assert "k2" in err and len(err.strip().splitlines()) == 1


def test_inspect_topology_block_fixture(tmp_path, capsys):
    p = tmp_path / "z.json"
    p.write_text(json.dumps({"z": block_z().tolist()}))
    assert main(["inspect-topology", str(p)]) == 0
    out = capsys.readouterr().out
    assert "clusters: {{0,3},{1,2}}" in out
    assert "chosen k: 2" in out


def test_inspect_topology_reads_csv_and_bundle(tmp_path, tiny_cfg, capsys):
    p = tmp_path / "z.csv"
    p.write_text("\n".join(",".join(repr(float(v)) for v in row) for row in block_z()) + "\n")
    assert main(["inspect-topology", str(p)]) == 0
    assert "{{0,3},{1,2}}" in capsys.readouterr().out
    main(["run", "--config", str(tiny_cfg), "--out", str(tmp_path / "r")])
    capsys.readouterr()
    assert main(["inspect-topology", str(tmp_path / "r" / "topology.json"), "--epoch", "2"]) == 0
    assert "eigenvalues:" in capsys.readouterr().out
    assert main(["inspect-topology", str(tmp_path / "r" / "topology.json"), "--epoch", "99"]) == 2


def write_losses(path, curves):
    with open(path, "w") as fh:
        fh.write("epoch,task_id,train_loss,test_loss\n")
        for e in range(len(curves[0])):
            for k, c in enumerate(curves):
                fh.write(f"{e + 1},{k},{c[e]!r},{c[e]!r}\n")


def test_compare_table(tmp_path, capsys):
    fast = [1.0, 0.5, 0.3, 0.3, 0.3, 0.3]
    slow = [1.0, 0.9, 0.8, 0.6, 0.4, 0.3]
    write_losses(tmp_path / "a.csv", [fast, fast])
    write_losses(tmp_path / "b.csv", [slow, fast])
    rows = io.compare_losses(tmp_path / "a.csv", tmp_path / "b.csv")
    assert [(r["convergence_a"], r["convergence_b"]) for r in rows] == [(3, 6), (3, 3)]
    assert rows[0]["speedup"] == 2.0
    assert main(["compare", str(tmp_path / "a.csv"), str(tmp_path / "b.csv"), "--label-a", "dyn", "--label-b", "fc"]) == 0
    out = capsys.readouterr().out
    assert "dyn" in out and "1.05" in out
    assert len(out.strip().splitlines()) == 2 + 2


def test_compare_missing_file_exit_code(tmp_path, capsys):
    assert main(["compare", str(tmp_path / "nope.csv"), str(tmp_path / "nope2.csv")]) == 1
    assert capsys.readouterr().err.startswith("pdmtl:")


def test_gen_data_and_reload(tmp_path, tiny_cfg, capsys):
    path = tmp_path / "d.npz"
    assert main(["gen-data", "--config", str(tiny_cfg), "--out", str(path)]) == 0
    ds = io.load_dataset(path)
    assert (len(ds.train), len(ds.test), len(ds.shared)) == (400, 100, 100)
    out = tmp_path / "fromfile"
    assert main(["run", "--config", str(tiny_cfg), "--dataset", str(path), "--out", str(out)]) == 0
    direct = tmp_path / "direct"
    main(["run", "--config", str(tiny_cfg), "--out", str(direct)])
    assert (out / "losses.csv").read_bytes() == (direct / "losses.csv").read_bytes()


def test_dataset_cache_reuses_file(tmp_path, tiny_cfg):
    cfg, _ = io.parse_config(tiny_cfg)
    a = io.cached_dataset(cfg, tmp_path)
    files = list(tmp_path.glob("dataset-*.npz"))
    assert len(files) == 1 and a.cache_key() in files[0].name
    b = io.cached_dataset(cfg, tmp_path)
    np.testing.assert_array_equal(a.train.x, b.train.x)
    cfg.seed = 9
    io.cached_dataset(cfg, tmp_path)
    assert len(list(tmp_path.glob("dataset-*.npz"))) == 2


def test_mismatched_header_rejected(tmp_path, tiny_cfg):
    cfg, _ = io.parse_config(tiny_cfg)
    path = io.save_dataset(io.cached_dataset(cfg, tmp_path), tmp_path / "t.npz")
    with np.load(path) as f:
        arrays = dict(f)
    header = json.loads(str(arrays["header"]))
    header["seed"] += 1
    arrays["header"] = np.array(json.dumps(header))
    np.savez(tmp_path / "bad.npz", **arrays)
    with pytest.raises(ConfigurationError, match="digest"):
        io.load_dataset(tmp_path / "bad.npz")
