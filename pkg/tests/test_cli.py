import json

import pytest

from smoothgeo.cli import main
from smoothgeo.config import ConfigError, load_config, parse_config
from smoothgeo.nn import load_checkpoint, save_checkpoint


class TestConfig:
    def test_routing(self):
        cfg = parse_config({"seed": 3, "epochs": 2, "k": 6, "eps_grid": [1, 2], "dataset": "moons",
                            "train": {"hidden": [8]}, "experiment": {"n_images": 5}})
        assert cfg.train.seed == 3 and cfg.train.epochs == 2 and cfg.train.hidden == (8,)
        spec = cfg.experiment_spec()
        assert spec.seed == 3 and spec.k == 6 and spec.eps_grid == (1, 2) and spec.n_images == 5
        assert spec.dataset == "moons" and cfg.run["dataset"] == "moons"

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            parse_config({"bogus": 1})
        with pytest.raises(ConfigError):
            parse_config({"train": {"k": 1}})

    def test_invalid_value(self):
        with pytest.raises(ConfigError):
            parse_config({"eps_grid": [4, 2]})

    def test_toml_file(self, tmp_path):
        p = tmp_path / "run.toml"
        p.write_text('mode = "ssr"\nlearning_rate = 0.01\n[experiment]\nmethods = ["SM", "IG"]\n')
        cfg = load_config(p)
        assert cfg.train.mode == "ssr" and cfg.train.learning_rate == 0.01
        assert cfg.experiment_spec().methods == ("SM", "IG")

    def test_bad_toml(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("mode = \n")
        with pytest.raises(ConfigError):
            load_config(p)


class TestCli:
    def test_train_and_plot_moons(self, tmp_path, capsys):
        cfg = tmp_path / "c.toml"
        cfg.write_text('dataset = "moons"\nepochs = 3\nhidden = [8]\n')
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path), "--seed", "1"]) == 0
        net = load_checkpoint(tmp_path / "natural.ckpt")
        assert net.input_dim == 2 and net.metadata["seed"] == 1
        assert (tmp_path / "natural_history.csv").read_text().count("\n") == 4
        assert main(["plot", "--checkpoint", str(tmp_path / "natural.ckpt"), "--out", str(tmp_path)]) == 0
        assert (tmp_path / "field.svg").exists()

    def test_attack_heatmap_and_csv(self, tmp_path, digits_net, digits_root, capsys):
        ckpt = tmp_path / "nat.ckpt"
        save_checkpoint(digits_net, ckpt)
        cfg = tmp_path / "c.toml"
        cfg.write_text(f'data_root = "{digits_root}"\nn_images = 2\nsteps = 2\nmethods = ["SM"]\n'
                       'eps_grid = [4.0, 8.0]\n')
        out = tmp_path / "out"
        assert main(["attack", "--config", str(cfg), "--checkpoint", str(ckpt), "--out", str(out)]) == 0
        assert (out / "robustness.csv").read_text().startswith("attack,method,eps,")
        line = capsys.readouterr().out.strip().splitlines()[0]
        assert json.loads(line)["label"] == {"attack": "topk", "method": "SM"}
        assert main(["attack", "--config", str(cfg), "--checkpoint", str(ckpt), "--out", str(out),
                     "--format", "json"]) == 0
        assert json.loads((out / "robustness.json").read_text())[0]["k"] == 4
        assert main(["plot", "--config", str(cfg), "--checkpoint", str(ckpt), "--out", str(out),
                     "--index", "1"]) == 0
        assert (out / "SM_1.pgm").read_bytes().startswith(b"P5\n8 8\n255\n")

    def test_error_exit_code(self, tmp_path, capsys):
        assert main(["attack", "--checkpoint", str(tmp_path / "missing.ckpt")]) == 1
        assert "error" in capsys.readouterr().err

    def test_usage_error_exit_code(self):
        with pytest.raises(SystemExit) as info:
            main(["attack", "--format", "xml"])
        assert info.value.code == 1

    def test_theory_check_failure_code(self, monkeypatch, tmp_path):
        from smoothgeo import cli
        from smoothgeo.geometry import CheckReport

        monkeypatch.setattr(cli, "run_theory_checks", lambda spec: [CheckReport("prop3", False, [{}], {})])
        assert main(["theory-check", "--out", str(tmp_path)]) == 2
        monkeypatch.setattr(cli, "run_theory_checks", lambda spec: [CheckReport("prop3", True, [], {})])
        assert main(["theory-check"]) == 0
