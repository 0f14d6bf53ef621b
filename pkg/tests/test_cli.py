import json

import numpy as np
import pytest

from clim.cli import build_train_config, load_config_doc, main
from clim.data import load_ppm_dir, load_tensor_file
from clim.errors import ValidationError


def run(argv, capsys=None):
    code = main(argv)
    return code


@pytest.fixture()
def data_file(tmp_path):
    path = tmp_path / "data.clim"
    assert main(["gen-data", "--classes", "4", "--per-class", "12", "--side", "16",
                 "--seed", "1", "--out", str(path)]) == 0
    return path


@pytest.fixture()
def run_dir(tmp_path, data_file):
    out = tmp_path / "run"
    code = main(["pretrain", "--data", str(data_file), "--out", str(out),
                 "--epochs", "1", "--strategy", "instance", "--mixing", "none",
                 "--resolutions", "16", "--batch-size", "16", "--seed", "5"])
    assert code == 0
    return out


class TestGenData:
    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a.clim", tmp_path / "b.clim"
        args = ["gen-data", "--classes", "3", "--per-class", "5", "--seed", "2"]
        assert main(args + ["--out", str(a)]) == 0
        assert main(args + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_zero_classes_rejected(self, tmp_path):
        assert main(["gen-data", "--classes", "0", "--out", str(tmp_path / "x.clim")]) == 1

    def test_loadable(self, data_file):
        ds = load_tensor_file(data_file)
        assert len(ds) == 48 and ds.class_count == 4


class TestPretrain:
    def test_writes_artifacts(self, run_dir):
        assert (run_dir / "config.json").exists()
        assert (run_dir / "metrics.tsv").exists()
        assert (run_dir / "ckpt_epoch1.clim").exists()
        lines = (run_dir / "metrics.tsv").read_text().splitlines()
        assert len(lines) == 3  # 48 samples / batch 16
        assert len(lines[0].split("\t")) == 6

    def test_epochs_zero_writes_initial_checkpoint(self, tmp_path, data_file):
        out = tmp_path / "zero"
        assert main(["pretrain", "--data", str(data_file), "--out", str(out),
                     "--epochs", "0", "--resolutions", "16"]) == 0
        assert (out / "ckpt_epoch0.clim").exists()
        assert (out / "metrics.tsv").read_text() == ""

    def test_replay_identical_metrics(self, tmp_path, data_file):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            assert main(["pretrain", "--data", str(data_file), "--out", str(out),
                         "--epochs", "1", "--strategy", "instance", "--mixing", "none",
                         "--resolutions", "16", "--batch-size", "16", "--seed", "5"]) == 0
            outs.append((out / "metrics.tsv").read_bytes())
        assert outs[0] == outs[1]

    def test_missing_data_flag(self, tmp_path):
        assert main(["pretrain", "--out", str(tmp_path / "x")]) == 1

    def test_missing_data_file(self, tmp_path):
        assert main(["pretrain", "--data", str(tmp_path / "none.clim"),
                     "--out", str(tmp_path / "x")]) == 2

    def test_bad_strategy(self, tmp_path, data_file):
        assert main(["pretrain", "--data", str(data_file), "--out", str(tmp_path / "x"),
                     "--strategy", "nonsense"]) == 1


class TestEval:
    @pytest.mark.parametrize("metric", ["linear", "knn", "intra-sim"])
    def test_metric_lines(self, run_dir, data_file, metric, capsys):
        code = main(["eval", "--ckpt", str(run_dir / "ckpt_epoch1.clim"),
                     "--data", str(data_file), "--metric", metric,
                     "--epochs", "5", "--seed", "3"])
        out = capsys.readouterr().out
        assert code == 0
        fields = out.strip().split("\t")
        assert len(fields) == 3 and fields[2] == "3"
        float(fields[1])

    def test_seed_loop_adds_mean(self, run_dir, data_file, capsys):
        code = main(["eval", "--ckpt", str(run_dir / "ckpt_epoch1.clim"),
                     "--data", str(data_file), "--metric", "knn",
                     "--seeds", "3", "--seed", "0"])
        out = capsys.readouterr().out.strip().splitlines()
        assert code == 0 and len(out) == 4
        assert out[-1].split("\t")[2] == "mean"

    def test_unlabeled_rejected(self, tmp_path, run_dir, data_file, capsys):
        from clim.data import Dataset, save_tensor_file

        ds = load_tensor_file(data_file)
        bare = Dataset(images=ds.images)
        path = tmp_path / "unlabeled.clim"
        save_tensor_file(bare, path)
        code = main(["eval", "--ckpt", str(run_dir / "ckpt_epoch1.clim"),
                     "--data", str(path), "--metric", "linear"])
        assert code == 1
        assert "labels required" in capsys.readouterr().err

    def test_out_file_appended(self, run_dir, data_file, tmp_path, capsys):
        target = tmp_path / "eval.txt"
        for _ in range(2):
            assert main(["eval", "--ckpt", str(run_dir / "ckpt_epoch1.clim"),
                         "--data", str(data_file), "--metric", "intra-sim",
                         "--out", str(target)]) == 0
        capsys.readouterr()
        assert len(target.read_text().strip().splitlines()) == 2

    def test_missing_checkpoint(self, data_file, tmp_path):
        assert main(["eval", "--ckpt", str(tmp_path / "none.clim"),
                     "--data", str(data_file), "--metric", "linear"]) == 2


class TestSelect:
    def test_output_parseable(self, run_dir, data_file, capsys):
        code = main(["select", "--ckpt", str(run_dir / "ckpt_epoch1.clim"),
                     "--data", str(data_file), "--anchor", "7", "--k", "10",
                     "--clusters", "3"])
        out = capsys.readouterr().out.strip().splitlines()
        assert code == 0
        header = dict(line.split("\t") for line in out[:4])
        assert header["anchor"] == "7"
        sizes = {k: int(v) for k, v in header.items() if k != "anchor"}
        rows = [line.split("\t") for line in out[4:]]
        assert all(len(r) == 3 for r in rows)
        assert sum(1 for r in rows if r[0] == "omega2") == sizes["omega2_size"] == 10
        assert sum(1 for r in rows if r[0] == "omega_p") == sizes["omega_p_size"]
        omega_p = {r[1] for r in rows if r[0] == "omega_p"}
        omega1 = {r[1] for r in rows if r[0] == "omega1"}
        omega2 = {r[1] for r in rows if r[0] == "omega2"}
        assert omega_p <= (omega1 & omega2)
        assert "7" not in omega_p

    def test_anchor_out_of_range(self, run_dir, data_file):
        assert main(["select", "--ckpt", str(run_dir / "ckpt_epoch1.clim"),
                     "--data", str(data_file), "--anchor", "999"]) == 1


class TestAugment:
    def test_deterministic_bytes(self, tmp_path, data_file):
        dirs = []
        for name in ("v1", "v2"):
            out = tmp_path / name
            assert main(["augment", "--data", str(data_file), "--anchor", "3",
                         "--positive", "9", "--resolutions", "16,8", "--seed", "7",
                         "--out", str(out)]) == 0
            dirs.append(out)
        for f in sorted(dirs[0].iterdir()):
            assert f.read_bytes() == (dirs[1] / f.name).read_bytes()

    def test_manifest_matches_emitted_pixels(self, tmp_path, data_file):
        out = tmp_path / "views"
        assert main(["augment", "--data", str(data_file), "--anchor", "0",
                     "--positive", "1", "--resolutions", "16", "--seed", "11",
                     "--out", str(out)]) == 0
        line = (out / "manifest.tsv").read_text().strip().splitlines()[0]
        anchor_i, pos_i, res, lam, bbox, seed = line.split("\t")
        x0, y0, x1, y1 = (int(v) for v in bbox.split(","))
        area = (x1 - x0) * (y1 - y0)
        assert float(lam) == 1.0 - area / int(res) ** 2

    def test_self_mix_is_plain_augmentation(self, tmp_path, data_file, capsys):
        out = tmp_path / "selfmix"
        assert main(["augment", "--data", str(data_file), "--anchor", "2",
                     "--positive", "2", "--resolutions", "16", "--seed", "3",
                     "--out", str(out)]) == 0
        ds = load_ppm_dir(out)
        assert len(ds) == 1

    def test_index_out_of_range(self, tmp_path, data_file):
        assert main(["augment", "--data", str(data_file), "--anchor", "900",
                     "--positive", "1", "--out", str(tmp_path / "x")]) == 1


class TestReport:
    def test_aggregates_runs(self, tmp_path, data_file, capsys):
        runs = []
        for seed in (1, 2):
            out = tmp_path / f"run{seed}"
            assert main(["pretrain", "--data", str(data_file), "--out", str(out),
                         "--epochs", "1", "--strategy", "instance", "--mixing", "none",
                         "--resolutions", "16", "--seed", str(seed)]) == 0
            assert main(["eval", "--ckpt", str(out / "ckpt_epoch1.clim"),
                         "--data", str(data_file), "--metric", "knn",
                         "--out", str(out / "eval.txt")]) == 0
            runs.append(str(out))
        capsys.readouterr()
        assert main(["report", "--runs"] + runs) == 0
        out_text = capsys.readouterr().out
        lines = out_text.strip().splitlines()
        assert lines[0].startswith("strategy\tmixing")
        assert len(lines) == 2  # same config, two seeds -> one aggregate row
        assert "\t2\t" in lines[1]


class TestConfigDocument:
    def test_unknown_section(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"nonsense": {}}))
        with pytest.raises(ValidationError) as err:
            load_config_doc(str(path))
        assert "nonsense" in str(err.value)

    def test_unknown_key_named(self, tmp_path):
        doc = {"train": {"leerning_rate": 0.1}}
        with pytest.raises(ValidationError) as err:
            build_train_config(doc)
        assert "train.leerning_rate" in str(err.value)

    def test_type_error_names_key(self):
        with pytest.raises(ValidationError) as err:
            build_train_config({"train": {"epochs": "many"}})
        assert "train.epochs" in str(err.value) and "integer" in str(err.value)

    def test_flags_override_config(self):
        cfg = build_train_config({"train": {"epochs": 10, "strategy": "knn"}},
                                 strategy="instance", epochs=None)
        assert cfg.epochs == 10 and cfg.strategy == "instance"

    def test_resolutions_override_lands_in_aug(self):
        cfg = build_train_config({}, resolutions=(16, 8))
        assert cfg.aug.resolutions == (16, 8)

    def test_round_trips_through_document(self):
        from clim.cli import config_as_document

        cfg = build_train_config({"train": {"epochs": 4, "seed": 9},
                                  "augment": {"resolutions": [16, 8], "alpha": 1.5}})
        doc = config_as_document(cfg)
        rebuilt = build_train_config(json.loads(json.dumps(doc)))
        assert rebuilt == cfg

    def test_help_lists_defaults(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["gen-data", "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        assert "--blob-stddev" in text and "0.55" in text
