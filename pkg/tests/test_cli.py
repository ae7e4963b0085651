import json
import os

import pytest

from cograd import cli
from cograd.errors import ConfigError, FormatError


def small_config(tmp_path, **extra):
    cfg = {
        "dims": {"feature": 8, "hidden": 12},
        "train": {"epochs": 2, "batch_size": 16},
        "synthetic": {"n_examples": [60, 40]},
        "paths": {"data_dir": str(tmp_path / "data"),
                  "out_dir": str(tmp_path / "out"),
                  "checkpoint": "model.ckpt"},
    }
    for key, value in extra.items():
        if isinstance(value, dict):
            cfg.setdefault(key, {}).update(value)
        else:
            cfg[key] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def run(args):
    return cli.main(args)


class TestConfig:
    def test_defaults_validate(self):
        cli.validate_config(cli.DEFAULT_CONFIG)

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="synthetic.rhoo"):
            cli.validate_config({"synthetic": {"rhoo": 0.5}})

    def test_out_of_range_named(self):
        with pytest.raises(ConfigError, match="synthetic.rho"):
            cli.validate_config({"synthetic": {"rho": 1.5}})

    def test_type_mismatch(self):
        with pytest.raises(ConfigError, match="train.epochs"):
            cli.validate_config({"train": {"epochs": "ten"}})

    def test_bool_is_not_a_number(self):
        with pytest.raises(ConfigError, match="regularizer.lambda"):
            cli.validate_config({"regularizer": {"lambda": True}})

    def test_precedence_flag_beats_file_beats_default(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"seed": 5}))
        merged = cli.load_config(str(path), {})
        assert merged["seed"] == 5
        merged = cli.load_config(str(path), {"seed": 9})
        assert merged["seed"] == 9
        assert cli.load_config(None, {})["seed"] == cli.DEFAULT_CONFIG["seed"]

    def test_nested_override(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"regularizer": {"lambda": 0.7}}))
        merged = cli.load_config(str(path), {"regularizer.lambda": 0.0})
        assert merged["regularizer"]["lambda"] == 0.0
        # other regularizer keys keep their defaults
        assert merged["regularizer"]["variant"] == "raw"


class TestGenData:
    def test_writes_six_files_and_vocab(self, tmp_path, capsys):
        cfg = small_config(tmp_path)
        assert run(["--config", cfg, "gen-data"]) == 0
        files = sorted(os.listdir(tmp_path / "data"))
        assert files == ["task1_test.jsonl", "task1_train.jsonl",
                         "task1_valid.jsonl", "task2_test.jsonl",
                         "task2_train.jsonl", "task2_valid.jsonl",
                         "vocab.json"]
        out = capsys.readouterr().out
        assert "task1 train: 48" in out

    def test_deterministic_bytes(self, tmp_path):
        cfg = small_config(tmp_path)
        run(["--config", cfg, "gen-data"])
        first = {f: (tmp_path / "data" / f).read_bytes()
                 for f in os.listdir(tmp_path / "data")}
        run(["--config", cfg, "gen-data"])
        second = {f: (tmp_path / "data" / f).read_bytes()
                  for f in os.listdir(tmp_path / "data")}
        assert first == second

    def test_invalid_rho_exits_2(self, tmp_path, caplog):
        cfg = small_config(tmp_path, synthetic={"rho": 1.5})
        assert run(["--config", cfg, "gen-data"]) == 2
        assert any("synthetic.rho" in r.message for r in caplog.records)


class TestTrain:
    def test_outputs_and_row_count(self, tmp_path):
        cfg = small_config(tmp_path)
        run(["--config", cfg, "gen-data"])
        assert run(["--config", cfg, "train"]) == 0
        curves = (tmp_path / "out" / "curves.csv").read_text().strip().split("\n")
        assert len(curves) == 1 + 2 * 2 * 2  # header + epochs*splits*tasks
        assert (tmp_path / "out" / "model.ckpt").exists()

    def test_missing_data_exits_2(self, tmp_path):
        cfg = small_config(tmp_path)
        assert run(["--config", cfg, "train"]) == 2

    def test_lambda_override_beats_config(self, tmp_path):
        cfg = small_config(tmp_path, regularizer={"lambda": 0.5})
        run(["--config", cfg, "gen-data"])
        run(["--config", cfg, "train"])
        with_lambda = (tmp_path / "out" / "curves.csv").read_bytes()
        run(["--config", cfg, "--out-dir", str(tmp_path / "out0"),
             "train", "--lambda", "0"])
        without = (tmp_path / "out0" / "curves.csv").read_bytes()
        assert with_lambda != without

    def test_rerun_byte_identical(self, tmp_path):
        cfg = small_config(tmp_path)
        run(["--config", cfg, "gen-data"])
        run(["--config", cfg, "train"])
        curves1 = (tmp_path / "out" / "curves.csv").read_bytes()
        ckpt1 = (tmp_path / "out" / "model.ckpt").read_bytes()
        run(["--config", cfg, "train"])
        assert (tmp_path / "out" / "curves.csv").read_bytes() == curves1
        assert (tmp_path / "out" / "model.ckpt").read_bytes() == ckpt1

    def test_numeric_failure_exits_3(self, tmp_path):
        cfg = small_config(tmp_path, train={"base_lr": 1e150, "epochs": 2})
        run(["--config", cfg, "gen-data"])
        assert run(["--config", cfg, "train"]) == 3


class TestEval:
    def test_matches_final_epoch_record(self, tmp_path):
        cfg = small_config(tmp_path)
        run(["--config", cfg, "gen-data"])
        run(["--config", cfg, "train"])
        assert run(["--config", cfg, "eval"]) == 0
        curves = (tmp_path / "out" / "curves.csv").read_text().strip().split("\n")
        final_test = [l.split(",") for l in curves[1:]
                      if l.split(",")[0] == "2" and l.split(",")[1] == "test"]
        eval_rows = (tmp_path / "out" / "eval.csv").read_text().strip().split("\n")
        assert eval_rows[0] == "task,loss,metric_name,metric_value"
        for (ctask, closs, cname, cval), erow in zip(
                [(r[2], r[3], r[4], r[5]) for r in final_test], eval_rows[1:]):
            etask, eloss, ename, evalue = erow.split(",")
            assert (ctask, closs, cname, cval) == (etask, eloss, ename, evalue)

    def test_task_filter(self, tmp_path, capsys):
        cfg = small_config(tmp_path)
        run(["--config", cfg, "gen-data"])
        run(["--config", cfg, "train"])
        capsys.readouterr()
        assert run(["--config", cfg, "eval", "--task", "2"]) == 0
        out = capsys.readouterr().out
        rows = [l for l in out.strip().split("\n")[1:] if l and "->" not in l]
        assert len(rows) == 1 and rows[0].strip().startswith("2")

    def test_missing_checkpoint_exits_2(self, tmp_path):
        cfg = small_config(tmp_path)
        run(["--config", cfg, "gen-data"])
        assert run(["--config", cfg, "eval"]) == 2

    def test_dim_mismatch_exits_2(self, tmp_path, caplog):
        cfg = small_config(tmp_path)
        run(["--config", cfg, "gen-data"])
        run(["--config", cfg, "train"])
        bad = small_config(tmp_path, dims={"feature": 16, "hidden": 12})
        assert run(["--config", bad, "eval"]) == 2
        assert any("dims" in r.message for r in caplog.records)


class TestCompare:
    def test_rows_present_and_deterministic(self, tmp_path):
        cfg = small_config(tmp_path, train={"epochs": 1})
        run(["--config", cfg, "gen-data"])
        assert run(["--config", cfg, "compare"]) == 0
        text = (tmp_path / "out" / "comparison.csv").read_text()
        lines = text.strip().split("\n")
        assert lines[0] == "run,task,acc,rouge1_f"
        runs = [l.split(",")[0] for l in lines[1:]]
        assert runs == ["mtl_lambda", "mtl_plain", "single_cls", "single_gen"]
        run(["--config", cfg, "compare"])
        assert (tmp_path / "out" / "comparison.csv").read_text() == text


class TestCurves:
    def _train(self, tmp_path, epochs=3):
        cfg = small_config(tmp_path, train={"epochs": epochs})
        run(["--config", cfg, "gen-data"])
        run(["--config", cfg, "train"])
        return cfg

    def test_svg_polylines(self, tmp_path):
        self._train(tmp_path)
        csv = str(tmp_path / "out" / "curves.csv")
        out = str(tmp_path / "out" / "curves.svg")
        assert run(["curves", csv, out]) == 0
        svg = (tmp_path / "out" / "curves.svg").read_text()
        assert svg.count("<polyline") == 4  # 2 splits x 2 tasks
        assert "epoch" in svg and "loss" in svg

    def test_byte_deterministic(self, tmp_path):
        self._train(tmp_path)
        csv = str(tmp_path / "out" / "curves.csv")
        run(["curves", csv, str(tmp_path / "a.svg")])
        run(["curves", csv, str(tmp_path / "b.svg")])
        assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()

    def test_single_row_csv_valid(self, tmp_path):
        path = tmp_path / "one.csv"
        path.write_text("epoch,split,task,loss,metric_name,metric_value,wall_s\n"
                        "1,train,1,0.5,acc,0.5,0\n")
        assert run(["curves", str(path), str(tmp_path / "one.svg")]) == 0
        svg = (tmp_path / "one.svg").read_text()
        assert "<svg" in svg and "<circle" in svg

    def test_malformed_csv_exits_2_with_line(self, tmp_path, caplog):
        path = tmp_path / "bad.csv"
        path.write_text("epoch,split,task,loss,metric_name,metric_value,wall_s\n"
                        "1,train,1,not_a_number,acc,0.5,0\n")
        assert run(["curves", str(path), str(tmp_path / "x.svg")]) == 2
        assert any(":2" in r.message for r in caplog.records)

    def test_wrong_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("epoch,loss\n1,0.5\n")
        assert run(["curves", str(path), str(tmp_path / "x.svg")]) == 2

    def test_no_partial_output_on_failure(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("epoch,split,task,loss,metric_name,metric_value,wall_s\n"
                        "oops\n")
        target = tmp_path / "x.svg"
        assert run(["curves", str(path), str(target)]) == 2
        assert not target.exists()


class TestSvgRenderer:
    def test_render_smoke(self):
        rows = [{"epoch": e, "split": s, "task": t, "loss": 1.0 / e}
                for e in (1, 2, 3) for s in ("train", "test") for t in (1, 2)]
        svg = cli.render_curves_svg(rows)
        assert svg.startswith("<svg")
        assert svg.count("<polyline") == 4
