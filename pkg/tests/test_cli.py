import csv
import json
import math

import pytest

from fedsub.cli import main
from fedsub.config import ConfigError, ExperimentConfig, load_config, parse_config
from fedsub.data import load_csv

SMALL = """
rounds = {rounds}
hidden = [8, 8]
output_dir = "out"
{extra}
[synthetic]
n_clients = 4
samples_per_client = 40
"""


def config(tmp_path, rounds=1, extra="", name="c.toml"):
    p = tmp_path / name
    p.write_text(SMALL.format(rounds=rounds, extra=extra))
    return p


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.rounds == 300 and cfg.epochs == 1 and cfg.scenario == "static"
    srv = cfg.server()
    assert srv.depth.layers == 2 and srv.k_max == 10 and srv.neighbors == 3


class TestParse:
    def test_unknown_key(self):
        with pytest.raises(ConfigError) as exc:
            parse_config({"roundz": 3})
        assert exc.value.field == "roundz"

    def test_unknown_synthetic_key(self):
        with pytest.raises(ConfigError) as exc:
            parse_config({"synthetic": {"jiter": 1.0}})
        assert exc.value.field == "synthetic.jiter"

    @pytest.mark.parametrize("doc", [
        {"rounds": "ten"}, {"rounds": 1.5}, {"rounds": True}, {"fusion": "median"},
        {"learning_rate": "fast"}, {"algorithm": "fedprox"}, {"period": 0},
        {"synthetic": {"n_clients": 2.5}}, {"synthetic": {"noise": -1.0}},
        {"dataset": "x.csv", "synthetic": {}}, {"hidden": []}, {"partial_layers": 3},
        {"clients_per_round": 0}, {"output_dir": 3},
    ])
    def test_invalid(self, doc):
        with pytest.raises(ConfigError):
            parse_config(doc)

    def test_synthetic_follows_seed(self):
        cfg = parse_config({"seed": 9, "synthetic": {"concentration": "inf"}})
        assert cfg.synthetic.seed == 9 and math.isinf(cfg.synthetic.concentration)
        assert cfg.to_dict()["synthetic"]["concentration"] == "inf"
        pinned = parse_config({"seed": 9, "synthetic": {"seed": 1}})
        assert pinned.synthetic.seed == 1

    def test_relative_paths(self, tmp_path):
        cfg = load_config(config(tmp_path))
        assert cfg.output_dir == str(tmp_path / "out")

    def test_invalid_toml(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("rounds = = 3")
        with pytest.raises(ConfigError):
            load_config(p)


class TestRun:
    def test_minimal(self, tmp_path):
        assert main(["run", str(config(tmp_path))]) == 0
        rows = list(csv.reader(open(tmp_path / "out" / "rounds.csv")))
        assert rows[0] == ["round", "client_id", "f1", "loss"]
        assert len(rows) == 1 + 4
        summary = json.load(open(tmp_path / "out" / "summary.json"))
        assert summary["rounds"] == 1
        assert set(summary["final"]) == {"f1", "f1_ci95", "loss", "loss_ci95"}
        assert summary["config"]["rounds"] == 1
        assert "clusters_per_class" in summary["per_round"][0]

    def test_repeat_is_byte_identical(self, tmp_path):
        p = config(tmp_path, rounds=3, extra='scenario = "dynamic"\nperiod = 1\nclients_per_round = 3')
        assert main(["run", str(p)]) == 0
        first = (tmp_path / "out" / "rounds.csv").read_bytes()
        assert main(["run", str(p)]) == 0
        assert (tmp_path / "out" / "rounds.csv").read_bytes() == first

    def test_fedavg(self, tmp_path):
        assert main(["run", str(config(tmp_path, rounds=2, extra='algorithm = "fedavg"'))]) == 0
        rows = list(csv.DictReader(open(tmp_path / "out" / "rounds.csv")))
        assert len(rows) == 8 and all(math.isfinite(float(r["loss"])) for r in rows)

    def test_unknown_key_exit_2(self, tmp_path, capsys):
        p = tmp_path / "c.toml"
        p.write_text("rounds = 1\ncolour = 'red'\n")
        assert main(["run", str(p)]) == 2
        assert "colour" in capsys.readouterr().err

    def test_missing_config_exit_2(self, tmp_path):
        assert main(["run", str(tmp_path / "nope.toml")]) == 2

    def test_runtime_error_exit_1(self, tmp_path):
        (tmp_path / "d.csv").write_text("client_id,label,f0\na,0,oops\n")
        p = tmp_path / "c.toml"
        p.write_text('rounds = 1\ndataset = "d.csv"\n')
        assert main(["run", str(p)]) == 1

    def test_csv_source(self, tmp_path):
        assert main(["gen-data", str(config(tmp_path)), "--out", str(tmp_path / "d.csv")]) == 0
        p = tmp_path / "c2.toml"
        p.write_text('rounds = 1\nhidden = [8, 8]\ndataset = "d.csv"\noutput_dir = "o2"\n')
        assert main(["run", str(p)]) == 0
        assert len((tmp_path / "o2" / "rounds.csv").read_text().splitlines()) == 5


class TestOtherCommands:
    def test_gen_data(self, tmp_path):
        out = tmp_path / "d.csv"
        assert main(["gen-data", str(config(tmp_path)), "--out", str(out)]) == 0
        ds = load_csv(out, standardize_features=False)
        assert len(ds.client_ids) == 4 and all(len(c.y) == 40 for c in ds.clients.values())

    def test_gen_data_needs_synthetic(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('dataset = "d.csv"\n')
        assert main(["gen-data", str(p), "--out", str(tmp_path / "x.csv")]) == 2

    def test_analyze(self, tmp_path, capsys):
        assert main(["analyze", str(config(tmp_path))]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["n_clients"] == 4
        for c in doc["classes"].values():
            assert set(c) == {"hopkins", "clients", "samples"}
            assert c["hopkins"] is None or 0 <= c["hopkins"] <= 1
        assert sum(c["samples"] for c in doc["classes"].values()) == 160

    def test_self_merge_unchanged(self, tmp_path, capsys):
        assert main(["merge-test", str(config(tmp_path, rounds=3)), "--a", "c0", "--b", "c0"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 7
        for line in lines[1:]:
            cells = line.split()[1:]
            assert cells[0] == cells[1] == cells[2] == cells[3]

    def test_merge_unknown_client(self, tmp_path):
        assert main(["merge-test", str(config(tmp_path)), "--a", "c0", "--b", "zz"]) == 2
