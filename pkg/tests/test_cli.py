import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from crrn import cli, pipeline, spt, synth
from crrn.model import CrrnModel

SMALL = {
    "generate": {"n": 4, "T": 5},
    "model": {"hidden": 4, "kernel": 3},
    "train": {"epochs": 2, "batch_size": 2},
    "eval": {"n_thresholds": 25},
}


def run(*argv):
    return cli.main([str(a) for a in argv])


def tree(d: Path):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.json").write_text(json.dumps(SMALL))
    anom = dict(SMALL, generate={"n": 4, "T": 5, "kind": "random", "p_a": 0.2})
    (d / "anom.json").write_text(json.dumps(anom))
    assert run("generate", "--config", d / "cfg.json", "--seed", 3, "--out", d / "normal") == 0
    assert run("generate", "--config", d / "anom.json", "--seed", 3, "--out", d / "anom") == 0
    assert run("train", "--config", d / "cfg.json", "--data", d / "normal", "--out", d / "model") == 0
    return d


def test_generate_deterministic(work, tmp_path):
    assert run("generate", "--config", work / "cfg.json", "--seed", 3, "--out", tmp_path / "again") == 0
    assert tree(tmp_path / "again") == tree(work / "normal")


def test_generate_seed_matters(work, tmp_path):
    assert run("generate", "--config", work / "cfg.json", "--seed", 4, "--out", tmp_path / "other") == 0
    assert tree(tmp_path / "other") != tree(work / "normal")


def test_resolved_config_echoed(work):
    gen = json.loads((work / "normal" / "config.json").read_text())["generate"]
    assert gen == pipeline.GeneratorConfig(n=4, T=5, seed=3).to_dict()
    tr = json.loads((work / "model" / "config.json").read_text())
    assert tr["model"]["T"] == 5 and tr["model"]["hidden"] == 4 and tr["model"]["attention"] is True
    assert set(tr["train"]) == {"epochs", "lr", "eps_start", "eps_end", "decay_frac", "sigma_dn",
                                "p_zero", "batch_size", "seed"}


def test_train_deterministic(work, tmp_path):
    assert run("train", "--config", work / "cfg.json", "--data", work / "normal", "--out", tmp_path / "m") == 0
    assert tree(tmp_path / "m") == tree(work / "model")
    assert (tmp_path / "m" / "loss.csv").read_text().startswith("epoch,epsilon,loss\n")


@pytest.mark.parametrize("cmd", ["evaluate", "detect", "baseline"])
def test_scoring_commands_deterministic(work, tmp_path, cmd):
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        argv = [cmd, "--config", work / "cfg.json", "--data", work / "anom", "--out", out]
        if cmd != "baseline":
            argv += ["--model", work / "model" / "model.json"]
        assert run(*argv) == 0
        outs.append(tree(out))
    assert outs[0] == outs[1]
    assert "config.json" in outs[0]


def test_gradcheck_passes(tmp_path, capsys):
    assert run("gradcheck", "--seed", 0, "--out", tmp_path / "g") == 0
    text = capsys.readouterr().out
    worst = float(text.strip().splitlines()[-1].split()[3])
    assert worst < 1e-4
    rep = json.loads((tmp_path / "g" / "gradcheck.json").read_text())
    assert rep["passed"] and rep["max"] < 1e-4


def test_gradcheck_deterministic(tmp_path, capsys):
    run("gradcheck", "--seed", 2, "--cell", "convlstm")
    a = capsys.readouterr().out
    run("gradcheck", "--seed", 2, "--cell", "convlstm")
    assert capsys.readouterr().out == a


def test_report_schema(work, tmp_path):
    assert run("baseline", "--data", work / "anom", "--out", tmp_path / "b") == 0
    assert run("evaluate", "--data", work / "anom", "--model", work / "model" / "model.json",
               "--out", tmp_path / "e", "--thresholds", tmp_path / "b" / "report.json") == 0
    rep = json.loads((tmp_path / "e" / "report.json").read_text())
    assert set(rep) >= {"curves", "best", "recall_profile", "config", "thresholds_applied"}
    for pol, b in rep["best"].items():
        assert 0.0 <= b["f1"] <= 1.0
        assert set(rep["curves"][pol]) == {"polarity", "threshold", "precision", "recall", "tp", "fp", "fn"}
        assert len(rep["recall_profile"][pol]) == 5
    header = (tmp_path / "e" / "curves.csv").read_text().splitlines()[0]
    assert header == "method,polarity,threshold,precision,recall,tp,fp,fn"


def test_perfect_reconstruction_scores_f1_one(work, tmp_path, monkeypatch):
    clean = pipeline.stack(synth.load_dataset(work / "normal"))
    # the anomalous set shares its clean boards with the normal set (same seed)
    monkeypatch.setattr(CrrnModel, "reconstruct", lambda self, X: clean[:len(X)].copy())
    cfg = dict(SMALL, eval={"n_thresholds": 25, "batch_size": 16})
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert run("evaluate", "--config", tmp_path / "c.json", "--data", work / "anom",
               "--model", work / "model" / "model.json", "--out", tmp_path / "e") == 0
    rep = json.loads((tmp_path / "e" / "report.json").read_text())
    assert rep["best"] and all(b["f1"] == 1.0 for b in rep["best"].values())


def test_detect_maps(work, tmp_path):
    assert run("detect", "--data", work / "anom", "--model", work / "model" / "model.json",
               "--out", tmp_path / "d") == 0
    eps = spt.load(tmp_path / "d" / "maps" / "seq_00000.spt1")
    assert eps.shape == (5, 32, 32)
    raw = (tmp_path / "d" / "maps" / "seq_00000_t02.pgm").read_bytes()
    header = b"P5\n32 32\n255\n"
    assert raw.startswith(header)
    img = np.frombuffer(raw[len(header):], np.uint8).reshape(32, 32)
    expect = np.clip(np.rint(128 + eps[2].astype(np.float64) * 127 / 5.0), 0, 255)
    assert np.array_equal(img, expect)


def test_pgm_zero_is_128(tmp_path):
    cli.write_pgm(tmp_path / "z.pgm", np.zeros((2, 3)), 5.0)
    assert (tmp_path / "z.pgm").read_bytes() == b"P5\n3 2\n255\n" + bytes([128] * 6)


def test_no_attention_flag(work, tmp_path):
    assert run("train", "--config", work / "cfg.json", "--data", work / "normal", "--out", tmp_path / "m",
               "--no-attention", "--cell", "convlstm") == 0
    m = CrrnModel.load(tmp_path / "m" / "model.json")
    assert m.config.attention is False and m.config.cell == "convlstm"
    assert not any(n.startswith("att") for n in m.named_parameters())


def test_evaluate_no_attention_equals_zero_kernels(work, tmp_path):
    m = CrrnModel.load(work / "model" / "model.json")
    for w in m.attention:
        w.data[...] = 0.0
    m.save(tmp_path / "zero" / "model.json")
    run("detect", "--data", work / "anom", "--model", tmp_path / "zero" / "model.json", "--out", tmp_path / "a")
    run("detect", "--data", work / "anom", "--model", work / "model" / "model.json", "--out", tmp_path / "b",
        "--no-attention")
    assert tree(tmp_path / "a" / "maps") == tree(tmp_path / "b" / "maps")


class TestExitCodes:
    def expect(self, capsys, code, *argv):
        assert run(*argv) == code
        err = capsys.readouterr().err.strip().splitlines()
        msg = json.loads(err[-1])
        assert msg["exit_code"] == code and msg["error"] and msg["detail"]

    def test_missing_data(self, capsys, tmp_path):
        self.expect(capsys, 2, "train", "--data", tmp_path / "nope", "--out", tmp_path / "o")

    def test_missing_config(self, capsys, tmp_path):
        self.expect(capsys, 2, "generate", "--config", tmp_path / "nope.json", "--out", tmp_path / "o")

    def test_missing_model(self, capsys, work, tmp_path):
        self.expect(capsys, 2, "evaluate", "--data", work / "anom", "--model", tmp_path / "m.json",
                    "--out", tmp_path / "o")

    @pytest.mark.parametrize("cfg", [
        {"train": {"epochz": 1}},
        {"generate": {"kind": "weird"}},
        {"model": {"kernel": 4}},
        {"eval": {"window": "day"}},
        {"extra": {}},
        {"generate": {"n": "many"}},
    ])
    def test_schema(self, capsys, work, tmp_path, cfg):
        (tmp_path / "bad.json").write_text(json.dumps(cfg))
        cmd = "generate" if "generate" in cfg else ("baseline" if "eval" in cfg else "train")
        self.expect(capsys, 3, cmd, "--config", tmp_path / "bad.json", "--data", work / "normal",
                    "--out", tmp_path / "o")

    def test_malformed_json(self, capsys, tmp_path):
        (tmp_path / "bad.json").write_text("{not json")
        self.expect(capsys, 3, "generate", "--config", tmp_path / "bad.json", "--out", tmp_path / "o")

    def test_cell_mismatch(self, capsys, work, tmp_path):
        self.expect(capsys, 3, "evaluate", "--data", work / "anom", "--model", work / "model" / "model.json",
                    "--out", tmp_path / "o", "--cell", "convlstm")

    def test_nan_loss(self, capsys, work, tmp_path):
        cfg = dict(SMALL, train={"epochs": 3, "lr": 1e30})
        (tmp_path / "nan.json").write_text(json.dumps(cfg))
        with np.errstate(all="ignore"):
            self.expect(capsys, 4, "train", "--config", tmp_path / "nan.json", "--data", work / "normal",
                        "--out", tmp_path / "o")


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "crrn.cli", "baseline", "--data", str(tmp_path / "x"),
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr.strip())["error"] == "missing_file"
