import csv
import logging

import numpy as np
import pytest

from interseries import backtest as bt
from interseries.cli import main
from interseries.config import KEYS, RunConfig, load_config, parse_config
from interseries.data import load_panel, parse_month
from interseries.errors import ConfigError
from interseries.network import load_state
from interseries.training import TrainConfig

SMALL = """\
# tiny run
synth.m = 4
synth.T = 30
synth.seed = 5
net.context_length = 4
net.horizon = 3
net.d_model = 8
net.num_heads = 2
net.encoder_blocks = 1
net.decoder_blocks = 1
train.epochs = 2
train.batch_size = 16
"""


@pytest.fixture
def workdir(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(SMALL + "backtest.origins = 2016-07, 2016-10, 2017-01\n")
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "p.csv")]) == 0
    return tmp_path, cfg


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestConfig:
    def test_defaults_and_overrides(self):
        cfg = parse_config("net.d_model = 16\ntrain.lr = 1e-3  # comment\ndata.clip_nonnegative = false\n")
        assert cfg.network().d_model == 16 and cfg.network().num_heads == 4
        assert cfg.training().lr == 1e-3 and cfg.training().epochs == TrainConfig().epochs
        assert cfg.clip_nonnegative is False

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="net.width"):
            parse_config("net.width = 3\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="net.d_model"):
            parse_config("net.d_model = big\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match=":2:"):
            parse_config("net.d_model = 8\nnet.horizon\n")

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match="twice"):
            parse_config("net.d_model = 8\nnet.d_model = 9\n")

    def test_gamma_and_lists(self):
        cfg = parse_config("synth.m = 3\nsynth.gamma = 1:0:0.8, 2:1:-0.5\nsynth.levels = 1,2,3\n")
        s = cfg.synth()
        assert s.gamma[1, 0] == 0.8 and s.gamma[2, 1] == -0.5 and s.levels == [1, 2, 3]

    def test_gamma_out_of_range(self):
        with pytest.raises(ConfigError):
            parse_config("synth.m = 2\nsynth.gamma = 2:0:1\n").synth()

    def test_data_keys(self):
        cfg = parse_config("data.scaler = none\ndata.stride = 3\ndata.train_end = 2016-05\n"
                           "backtest.origins = 2016-01,2016-04\nbacktest.buckets = 1-2,3-3\n")
        tc = cfg.training()
        assert (tc.scaler, tc.stride) == ("none", 3)
        assert cfg.train_end == parse_month("2016-05")
        assert cfg.origins == [parse_month("2016-01"), parse_month("2016-04")]
        assert cfg.buckets(3) == [(1, 2), (3, 3)]

    def test_every_key_documented_and_echoed(self):
        eff = RunConfig().effective()
        assert set(eff) == set(KEYS)
        assert all(KEYS[k].doc for k in KEYS)

    def test_echo_parses_back(self, tmp_path):
        cfg = parse_config(SMALL + "backtest.origins = 2016-07\nsynth.gamma = 1:0:0.5\n")
        text = "\n".join(line for line in cfg.dump().splitlines() if not line.endswith("= "))
        again = parse_config(text)
        assert again.effective() == cfg.effective()

    def test_unreadable(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.cfg")


class TestGenerate:
    def test_byte_identical(self, workdir):
        tmp, cfg = workdir
        assert main(["generate", "--config", str(cfg), "--out", str(tmp / "q.csv")]) == 0
        assert (tmp / "p.csv").read_bytes() == (tmp / "q.csv").read_bytes()

    def test_shape(self, workdir, capsys):
        tmp, cfg = workdir
        main(["generate", "--config", str(cfg), "--out", str(tmp / "q.csv")])
        assert "seed=5" in capsys.readouterr().out
        panel = load_panel(tmp / "q.csv")
        assert len(set(panel.series_ids)) == 4
        assert len(read_csv(tmp / "q.csv")) - 1 <= 4 * 30

    def test_seed_flag(self, workdir):
        tmp, cfg = workdir
        main(["generate", "--config", str(cfg), "--seed", "6", "--out", str(tmp / "q.csv")])
        assert (tmp / "p.csv").read_bytes() != (tmp / "q.csv").read_bytes()

    def test_missing_m(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("synth.T = 10\n")
        assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "x.csv")]) != 0
        err = capsys.readouterr().err
        assert err.startswith("error:config:") and "synth.m" in err

    def test_unwritable(self, workdir, capsys):
        tmp, cfg = workdir
        assert main(["generate", "--config", str(cfg), "--out", str(tmp / "nodir" / "x.csv")]) != 0
        assert capsys.readouterr().err.startswith("error:io:")


class TestTrainForecast:
    def test_train_outputs(self, workdir, capsys):
        tmp, cfg = workdir
        ck = tmp / "m.ckpt"
        assert main(["train", "--config", str(cfg), "--data", str(tmp / "p.csv"), "--out", str(ck)]) == 0
        out = capsys.readouterr().out
        assert "net.d_model = 8" in out
        state = load_state(ck)
        assert state.config.d_model == 8
        loss = read_csv(f"{ck}.loss.csv")
        assert loss[0] == ["epoch", "loss", "lr", "val_loss"] and len(loss) == 3
        assert "train.epochs = 2" in (tmp / "m.ckpt.config").read_text()

    def test_seed_flag_overrides(self, workdir):
        tmp, cfg = workdir
        for name, seed in (("a", "1"), ("b", "1"), ("c", "2")):
            main(["train", "--config", str(cfg), "--data", str(tmp / "p.csv"), "--seed", seed,
                  "--out", str(tmp / f"{name}.ckpt")])
        loss = {n: (tmp / f"{n}.ckpt.loss.csv").read_text() for n in "abc"}
        assert loss["a"] == loss["b"] != loss["c"]
        assert "train.seed = 1" in (tmp / "a.ckpt.config").read_text()

    def test_invalid_key(self, workdir, capsys):
        tmp, _ = workdir
        bad = tmp / "bad.cfg"
        bad.write_text("train.epochz = 3\n")
        assert main(["train", "--config", str(bad), "--data", str(tmp / "p.csv"), "--out", str(tmp / "x")]) != 0
        err = capsys.readouterr().err
        assert err.startswith("error:config:") and "train.epochz" in err

    def test_nan_abort_exits_nonzero(self, workdir, capsys):
        tmp, cfg = workdir
        hot = tmp / "hot.cfg"
        hot.write_text(SMALL.replace("train.epochs = 2", "train.epochs = 3") + "train.lr = 1e300\n")
        code = main(["train", "--config", str(hot), "--data", str(tmp / "p.csv"), "--out", str(tmp / "x")])
        assert code != 0
        assert capsys.readouterr().err.startswith("error:training:")

    def test_forecast(self, workdir, capsys):
        tmp, cfg = workdir
        ck, fc = tmp / "m.ckpt", tmp / "f.csv"
        main(["train", "--config", str(cfg), "--data", str(tmp / "p.csv"), "--out", str(ck)])
        assert main(["forecast", "--checkpoint", str(ck), "--data", str(tmp / "p.csv"), "--out", str(fc)]) == 0
        rows = read_csv(fc)
        assert rows[0] == ["series_id", "origin", "step", "target_date", "forecast"]
        assert len(rows) - 1 == 4 * 3
        assert all(float(r[4]) >= 0 for r in rows[1:])
        assert {r[1] for r in rows[1:]} == {"2017-07"}

    def test_forecast_clamp(self, workdir):
        tmp, cfg = workdir
        ck = tmp / "m.ckpt"
        main(["train", "--config", str(cfg), "--data", str(tmp / "p.csv"), "--out", str(ck)])
        state = load_state(ck)
        state.params["head.b"].data[:] = -30.0
        from interseries.network import save_state
        save_state(state, ck)
        noclip = tmp / "n.cfg"
        noclip.write_text("data.clip_nonnegative = false\ndata.scaler = none\n")
        main(["forecast", "--checkpoint", str(ck), "--data", str(tmp / "p.csv"), "--out", str(tmp / "a.csv")])
        assert min(float(r[4]) for r in read_csv(tmp / "a.csv")[1:]) >= 0
        main(["forecast", "--config", str(noclip), "--checkpoint", str(ck), "--data", str(tmp / "p.csv"),
              "--out", str(tmp / "b.csv")])
        assert min(float(r[4]) for r in read_csv(tmp / "b.csv")[1:]) < 0

    def test_forecast_with_unseen_product(self, workdir, caplog):
        tmp, cfg = workdir
        ck = tmp / "m.ckpt"
        main(["train", "--config", str(cfg), "--data", str(tmp / "p.csv"), "--out", str(ck)])
        text = (tmp / "p.csv").read_text().replace("S003,P003", "S003,PNEW")
        (tmp / "new.csv").write_text(text)
        with caplog.at_level(logging.WARNING):
            assert main(["forecast", "--checkpoint", str(ck), "--data", str(tmp / "new.csv"),
                         "--out", str(tmp / "f.csv")]) == 0
        assert "PNEW" in caplog.text
        assert len(read_csv(tmp / "f.csv")) - 1 == 12

    def test_forecast_schema_mismatch(self, workdir, capsys):
        tmp, cfg = workdir
        ck = tmp / "m.ckpt"
        main(["train", "--config", str(cfg), "--data", str(tmp / "p.csv"), "--out", str(ck)])
        rows = read_csv(tmp / "p.csv")
        with open(tmp / "cov.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(rows[0] + ["price"])
            for r in rows[1:]:
                w.writerow(r + ["1.0"])
        capsys.readouterr()
        assert main(["forecast", "--checkpoint", str(ck), "--data", str(tmp / "cov.csv"),
                     "--out", str(tmp / "f.csv")]) != 0
        assert capsys.readouterr().err.startswith("error:compat:")

    def test_corrupt_checkpoint(self, workdir, capsys):
        tmp, _ = workdir
        (tmp / "bad.ckpt").write_bytes(b"nonsense")
        assert main(["forecast", "--checkpoint", str(tmp / "bad.ckpt"), "--data", str(tmp / "p.csv"),
                     "--out", str(tmp / "f.csv")]) != 0
        assert capsys.readouterr().err.startswith("error:checkpoint:")


class TestBacktestAttention:
    def test_backtest_files_match_library(self, workdir):
        tmp, cfg = workdir
        out = tmp / "bt"
        assert main(["backtest", "--config", str(cfg), "--data", str(tmp / "p.csv"), "--out", str(out)]) == 0
        reports = sorted(p.name for p in out.glob("report_*.csv"))
        assert reports == ["report_2016-07.csv", "report_2016-10.csv", "report_2017-01.csv", "report_average.csv"]
        rc = load_config(cfg)
        panel = load_panel(tmp / "p.csv")
        lib = bt.backtest(panel, rc.network(), rc.training(), rc.origins, rc.buckets(3))
        rows = read_csv(out / "report_average.csv")[1:]
        for origin, bucket, name, value in rows:
            assert float(value) == lib.average.scores[bucket][name]
        assert (out / "forecast_2016-07.csv").exists()

    def test_backtest_needs_origins(self, tmp_path, workdir, capsys):
        tmp, _ = workdir
        cfg = tmp / "no.cfg"
        cfg.write_text(SMALL)
        assert main(["backtest", "--config", str(cfg), "--data", str(tmp / "p.csv"), "--out", str(tmp / "o")]) != 0
        assert "backtest.origins" in capsys.readouterr().err

    def test_attention(self, workdir):
        tmp, cfg = workdir
        ck = tmp / "m.ckpt"
        main(["train", "--config", str(cfg), "--data", str(tmp / "p.csv"), "--out", str(ck)])
        out = tmp / "a.csv"
        assert main(["attention", "--checkpoint", str(ck), "--data", str(tmp / "p.csv"),
                     "--origin", "2017-01", "--out", str(out)]) == 0
        rows = read_csv(out)
        assert rows[0] == ["target", "S000", "S001", "S002", "S003"]
        for r in rows[1:]:
            assert abs(sum(float(x) for x in r[1:]) - 1.0) < 1e-9


def test_global_flags_before_command(workdir):
    tmp, cfg = workdir
    assert main(["--config", str(cfg), "--out", str(tmp / "g.csv"), "generate"]) == 0
    assert (tmp / "g.csv").read_bytes() == (tmp / "p.csv").read_bytes()


def test_bad_log_level(workdir, monkeypatch, capsys):
    tmp, cfg = workdir
    monkeypatch.setenv("ISF_LOG", "loud")
    assert main(["generate", "--config", str(cfg), "--out", str(tmp / "x.csv")]) != 0
    assert capsys.readouterr().err.startswith("error:config:")


def test_bad_origin(workdir, capsys):
    tmp, cfg = workdir
    main(["train", "--config", str(cfg), "--data", str(tmp / "p.csv"), "--out", str(tmp / "m.ckpt")])
    assert main(["forecast", "--checkpoint", str(tmp / "m.ckpt"), "--data", str(tmp / "p.csv"),
                 "--origin", "2017-13", "--out", str(tmp / "f.csv")]) != 0
    assert capsys.readouterr().err.startswith("error:config:")


def test_missing_data_file(workdir, capsys):
    tmp, cfg = workdir
    assert main(["train", "--config", str(cfg), "--data", str(tmp / "none.csv"), "--out", str(tmp / "m")]) != 0
    assert capsys.readouterr().err.startswith("error:panel:")


def test_values_reproducible(workdir):
    tmp, cfg = workdir
    for name in ("a", "b"):
        main(["train", "--config", str(cfg), "--data", str(tmp / "p.csv"), "--out", str(tmp / f"{name}.ckpt")])
        main(["forecast", "--checkpoint", str(tmp / f"{name}.ckpt"), "--data", str(tmp / "p.csv"),
              "--out", str(tmp / f"{name}.csv")])
    assert (tmp / "a.csv").read_bytes() == (tmp / "b.csv").read_bytes()
    assert (tmp / "a.ckpt").read_bytes() == (tmp / "b.ckpt").read_bytes()
    np.testing.assert_array_equal(load_state(tmp / "a.ckpt").params["head.w"].data,
                                  load_state(tmp / "b.ckpt").params["head.w"].data)
