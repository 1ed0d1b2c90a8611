import csv
import gzip
import io
import struct

import numpy as np
import pytest

from frozen_slt import nn_core
from frozen_slt.harness import cli
from frozen_slt.harness.config import ConfigError, ExperimentConfig, dump_config, load_config, parse_pairs
from frozen_slt.harness.datasets import (DATA_ENV, DatasetError, load_dataset, read_cifar10, read_cifar10_batch,
                                         read_idx, split_train_val)
from frozen_slt.harness.runner import (CSV_COLUMNS, compare_modes, rows_to_csv, run_config, sweep, sweep_configs)


def toy_cfg(**kw):
    base = dict(arch="mlp", dataset="toy_gaussians", epochs=3, lr0=0.1, batch_size=32, repetitions=1,
                slt_sparsity=0.5)
    base.update(kw)
    return ExperimentConfig(**base)


def write_idx(path, arr, code=0x08):
    head = struct.pack(">HBB", 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(head + arr.astype(">u1" if code == 0x08 else arr.dtype).tobytes())


def parse_csv(text):
    return list(csv.DictReader(io.StringIO(text)))


class TestIdx:
    def test_round_trip_plain_and_gzip(self, tmp_path):
        a = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
        for name in ("a.idx", "a.idx.gz"):
            write_idx(tmp_path / name, a)
            np.testing.assert_array_equal(read_idx(tmp_path / name), a)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"\x01\x00\x08\x01" + bytes(8))
        with pytest.raises(DatasetError, match="byte 0"):
            read_idx(tmp_path / "x")

    def test_truncated_payload(self, tmp_path):
        write_idx(tmp_path / "x", np.zeros((4, 4), np.uint8))
        raw = (tmp_path / "x").read_bytes()
        (tmp_path / "x").write_bytes(raw[:-3])
        with pytest.raises(DatasetError, match="byte 12"):
            read_idx(tmp_path / "x")

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetError):
            read_idx(tmp_path / "nope")


class TestMnist:
    def test_subset_split(self, mnist_dir):
        d = load_dataset("mnist", mnist_dir, seed=0)
        assert len(d.x_train) == 3200 and len(d.x_val) == 800 and len(d.x_test) == 1000
        assert d.input_shape == (1, 28, 28) and d.num_classes == 10
        assert abs(float(d.x_train.mean())) < 1e-3

    def test_full_size_split_arithmetic(self):
        tr, va = split_train_val(60000, 0)
        assert len(tr) == 48000 and len(va) == 12000
        assert not np.intersect1d(tr, va).size

    def test_split_deterministic(self):
        a = split_train_val(1000, 5)
        b = split_train_val(1000, 5)
        c = split_train_val(1000, 6)
        assert np.array_equal(a[1], b[1]) and not np.array_equal(a[1], c[1])

    def test_env_root(self, mnist_dir, monkeypatch):
        monkeypatch.setenv(DATA_ENV, str(mnist_dir))
        assert len(load_dataset("mnist", train_limit=100).x_train) == 100

    def test_no_root(self, monkeypatch):
        monkeypatch.delenv(DATA_ENV, raising=False)
        with pytest.raises(DatasetError):
            load_dataset("mnist")

    def test_label_count_mismatch(self, tmp_path):
        write_idx(tmp_path / "train-images-idx3-ubyte", np.zeros((3, 2, 2), np.uint8))
        write_idx(tmp_path / "train-labels-idx1-ubyte", np.zeros(2, np.uint8))
        write_idx(tmp_path / "t10k-images-idx3-ubyte", np.zeros((1, 2, 2), np.uint8))
        write_idx(tmp_path / "t10k-labels-idx1-ubyte", np.zeros(1, np.uint8))
        with pytest.raises(DatasetError, match="3 images but 2 labels"):
            load_dataset("mnist", tmp_path)


class TestCifar:
    def records(self, labels):
        rec = np.zeros((len(labels), 3073), np.uint8)
        rec[:, 0] = labels
        rec[:, 1:] = np.arange(3072) % 251
        return rec.tobytes()

    def test_reads_batches(self, tmp_path):
        for k in range(1, 6):
            (tmp_path / f"data_batch_{k}.bin").write_bytes(self.records([k % 10, 3]))
        (tmp_path / "test_batch.bin").write_bytes(self.records([9]))
        x, y, xt, yt = read_cifar10(tmp_path)
        assert x.shape == (10, 3, 32, 32) and yt.tolist() == [9]
        assert x[0, 0, 0, 1] == pytest.approx(1 / 255)
        d = load_dataset("cifar10", tmp_path)
        assert len(d.x_train) + len(d.x_val) == 10 and d.mean.shape == (3,)

    def test_bad_label_offset(self, tmp_path):
        (tmp_path / "b.bin").write_bytes(self.records([1, 12]))
        with pytest.raises(DatasetError, match="byte 3073"):
            read_cifar10_batch(tmp_path / "b.bin")

    def test_bad_length(self, tmp_path):
        (tmp_path / "b.bin").write_bytes(bytes(100))
        with pytest.raises(DatasetError):
            read_cifar10_batch(tmp_path / "b.bin")

    def test_missing_batch(self, tmp_path):
        with pytest.raises(DatasetError, match="data_batch_1"):
            read_cifar10(tmp_path)


class TestConfig:
    def test_file_and_override_precedence(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("# comment\nmode = slt_frozen\nfreeze_ratio = 0.4\nepochs = 7\nbatchnorm = yes\n")
        cfg = load_config(p, ["epochs=2", "prune_ratio = none"])
        assert cfg.freeze_ratio == 0.4 and cfg.epochs == 2 and cfg.batchnorm is True and cfg.prune_ratio is None

    @pytest.mark.parametrize("line", ["nokey", "bogus = 1", "epochs = many", "batchnorm = maybe"])
    def test_bad_lines(self, line):
        with pytest.raises(ConfigError):
            parse_pairs([line])

    @pytest.mark.parametrize("kw", [{"mode": "x"}, {"mode": "slt_dense", "freeze_ratio": 0.3},
                                    {"mode": "slt_pruned", "lock_ratio": 0.1}, {"strategy": "uniform"},
                                    {"repetitions": 0}, {"lr0": -1.0}])
    def test_validation(self, kw):
        with pytest.raises(ConfigError):
            ExperimentConfig(**kw)

    def test_pruned_default_ratio(self):
        assert ExperimentConfig(mode="slt_pruned", slt_sparsity=0.5).plan_ratios() == (0.45, 0.45, 0.0)

    def test_dump_round_trip(self):
        cfg = toy_cfg(freeze_ratio=0.3)
        assert load_config(None, dump_config(cfg).splitlines()) == cfg


class TestRunner:
    def test_row_columns_and_mode_sizes(self):
        rows = compare_modes(toy_cfg(freeze_ratio=0.6), ("slt_dense", "slt_pruned", "slt_frozen", "weight_training"))
        out = parse_csv(rows_to_csv(rows))
        assert list(out[0]) == list(CSV_COLUMNS)
        assert all(r["status"] == "ok" for r in out)
        n = int(out[0]["num_params"])
        bits = {r["mode"]: int(r["supermask_bits"]) for r in out}
        assert bits["slt_dense"] == n
        assert bits["slt_frozen"] == n - round(0.6 * n)
        assert bits["slt_frozen"] < bits["slt_pruned"] < bits["slt_dense"]
        assert out[1]["prune_ratio"] == f"{round(0.45 * n) / n:.6f}"
        wt = out[3]
        assert int(wt["weight_bits"]) == 32 * n and int(wt["supermask_bits"]) == 0

    def test_std_only_with_repetitions(self):
        one = parse_csv(rows_to_csv([run_config(toy_cfg(epochs=1))]))[0]
        two = parse_csv(rows_to_csv([run_config(toy_cfg(epochs=1, repetitions=2))]))[0]
        assert one["acc_std"] == "" and two["acc_std"] != ""
        assert len(two["acc_per_rep"].split(";")) == 2

    def test_failure_recorded_per_row(self):
        bad = toy_cfg(prune_ratio=0.1, lock_ratio=0.6)  # k = 0.5 outside [0.1, 0.4]
        rows = [run_config(bad), run_config(toy_cfg(epochs=1))]
        out = parse_csv(rows_to_csv(rows))
        assert out[0]["status"].startswith("error: WindowError")
        assert out[1]["status"] == "ok"

    def test_prune_lock_sweep_configs(self):
        cfgs = sweep_configs("prune_ratio", [0.1, 0.3], toy_cfg(freeze_ratio=0.6))
        assert [(c.prune_ratio, c.lock_ratio) for c in cfgs] == [(0.1, 0.5), (0.3, 0.3)]
        with pytest.raises(ValueError):
            sweep_configs("prune_ratio", [0.7], toy_cfg(freeze_ratio=0.6))

    def test_empty_sweep(self):
        with pytest.raises(ValueError):
            sweep("freeze_ratio", [], toy_cfg())

    def test_width_sweep_scales_dense_layers(self):
        rows = sweep("width_multiplier", [0.5, 1, 2], toy_cfg(epochs=1))
        n = [r.num_params for r in rows]
        hidden = [nn_core.build_arch("mlp", (2,), 2, w).layers[0].fan_out for w in (0.5, 1, 2)]
        assert hidden == [32, 64, 128]
        assert n[0] < n[1] < n[2]

    def test_byte_identical_csv(self):
        a = rows_to_csv(sweep("freeze_ratio", [0.0, 0.4], toy_cfg(repetitions=2)))
        b = rows_to_csv(sweep("freeze_ratio", [0.0, 0.4], toy_cfg(repetitions=2)))
        assert a == b


class TestCli:
    TOY = ["--set", "arch=mlp", "--set", "dataset=toy_gaussians", "--set", "epochs=2", "--set", "lr0=0.1",
           "--set", "repetitions=1", "--set", "batch_size=32"]

    def test_train(self, tmp_path):
        out = tmp_path / "r.csv"
        assert cli.main(["train", *self.TOY, "--set", "freeze_ratio=0.4", "--out", str(out)]) == 0
        assert parse_csv(out.read_text())[0]["status"] == "ok"

    def test_train_config_file(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("arch = mlp\ndataset = toy_gaussians\nepochs = 1\nrepetitions = 1\nlr0 = 0.1\n")
        assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "r.csv")]) == 0

    def test_failed_row_exit_code(self, tmp_path):
        code = cli.main(["train", *self.TOY, "--set", "prune_ratio=0.1", "--set", "lock_ratio=0.6",
                         "--out", str(tmp_path / "r.csv")])
        assert code == 1

    def test_config_error_exit_code(self, capsys):
        assert cli.main(["train", "--set", "mode=nonsense"]) == 2
        assert "error:" in capsys.readouterr().err

    def test_sweep_and_compare(self, tmp_path):
        assert cli.main(["sweep", *self.TOY, "--axis", "freeze_ratio", "--values", "0,0.4",
                         "--out", str(tmp_path / "s.csv")]) == 0
        assert len(parse_csv((tmp_path / "s.csv").read_text())) == 2
        assert cli.main(["compare", *self.TOY, "--set", "freeze_ratio=0.4", "--modes", "slt_dense,slt_frozen",
                         "--out", str(tmp_path / "c.csv")]) == 0

    def test_pack_unpack_size(self, tmp_path, capsys):
        t = tmp_path / "t.ftkt"
        assert cli.main(["pack", *self.TOY, "--set", "freeze_ratio=0.4", "--out", str(t),
                         "--metrics", str(tmp_path / "m.csv")]) == 0
        assert t.read_bytes()[:4] == b"FTKT"
        assert cli.main(["unpack", str(t), "--dataset", "toy_gaussians"]) == 0
        assert "test_acc=" in capsys.readouterr().out
        assert cli.main(["size", str(t)]) == 0
        assert cli.main(["size", "--set", "arch=conv6", "--set", "freeze_ratio=0.5"]) == 0
        out = capsys.readouterr().out
        assert "supermask_bits=1130592" in out

    def test_ssa_verify(self, tmp_path):
        out = tmp_path / "ssa.csv"
        assert cli.main(["ssa-verify", "--n-grid", "4,8", "--trials", "10", "--out", str(out)]) == 0
        rows = parse_csv(out.read_text())
        assert [r["n"] for r in rows] == ["4", "8"]

    def test_unpack_corrupt_file(self, tmp_path, capsys):
        bad = tmp_path / "bad.ftkt"
        bad.write_bytes(b"FTKT" + bytes(80))
        assert cli.main(["unpack", str(bad)]) == 2


def test_pack_requires_out():
    assert cli.main(["pack", "--set", "arch=mlp", "--set", "dataset=toy_gaussians"]) == 2
