"""End-to-end command-line tests: exit codes, artifacts, reproducibility."""

import csv
import json
import os
import shutil
import subprocess
import sys

import pytest

from uscale.cli import _model_config, default_config, load_config, main
from uscale.model import load_checkpoint
from uscale.train import TrainConfig

TINY = [
    "--set", "model.width=32",
    "--set", "model.d_head=16",
    "--set", "model.n_blocks=1",
    "--set", "model.seq_len=16",
    "--set", "model.vocab=64",
    "--set", "train.steps=4",
    "--set", "train.batch=4",
    "--set", "train.warmup_steps=2",
    "--set", "train.eval_every=2",
    "--set", "data.synthetic_tokens=1500",
]


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------------------
# Parser and config plumbing
# ---------------------------------------------------------------------------


def test_help_and_unknown_verb():
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    assert e.value.code == 0
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2


def test_default_config_is_buildable():
    cfg = default_config()
    mcfg = _model_config(cfg["model"])
    assert (mcfg.d_model, mcfg.n_heads, mcfg.d_head) == (256, 4, 64)
    TrainConfig(**cfg["train"])


def test_set_overrides_win_over_config_file(tmp_path):
    cfgfile = tmp_path / "c.json"
    cfgfile.write_text(json.dumps({"train": {"steps": 9}, "model": {"width": 128}}))
    cfg = load_config(str(cfgfile), ["train.steps=3", "model.width=64"])
    assert cfg["train"]["steps"] == 3
    assert cfg["model"]["width"] == 64


def test_open_subtrees_accept_new_keys(tmp_path):
    cfg = load_config(None, [
        "model.scheme.hps.alpha_ffn_act=0.5",
        "model.scheme.hps.eta_w.weight_hidden=2.0",
        'sweep.grids.alpha_res=[0.5,1.0]',
    ])
    assert cfg["model"]["scheme"]["hps"]["alpha_ffn_act"] == 0.5
    assert cfg["model"]["scheme"]["hps"]["eta_w"] == {"weight_hidden": 2.0}
    assert cfg["sweep"]["grids"]["alpha_res"] == [0.5, 1.0]


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def test_train_writes_artifacts(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", *TINY, "--out", str(out)]) == 0
    metrics = _read_csv(out / "metrics.csv")
    assert metrics[0] == ["step", "split", "loss", "lr", "grad_norm"]
    train_steps = [int(r[0]) for r in metrics[1:] if r[1] == "train"]
    assert train_steps == [0, 1, 2, 3]
    assert (out / "rms.csv").exists()
    model = load_checkpoint(str(out / "checkpoint"))
    assert model.cfg.d_model == 32
    assert "diverged=False" in capsys.readouterr().out


def test_train_reproducible_and_seed_sensitive(tmp_path):
    outs = [tmp_path / n for n in ("a", "b", "c")]
    for out, seed in zip(outs, ("3", "3", "4")):
        assert main(["train", *TINY, "--seed", seed, "--out", str(out)]) == 0
    a, b, c = [(o / "metrics.csv").read_bytes() for o in outs]
    assert a == b  # same seed -> byte-identical
    assert a != c  # different seed -> different run


def test_train_divergence_exits_2(tmp_path, capsys):
    rc = main(["train", *TINY, "--set", "train.peak_lr=1e6",
               "--out", str(tmp_path / "d")])
    assert rc == 2
    assert "diverged" in capsys.readouterr().err


def test_unknown_keys_exit_1(tmp_path, capsys):
    assert main(["train", *TINY, "--set", "train.stepz=3",
                 "--out", str(tmp_path / "x")]) == 1
    assert "train.stepz" in capsys.readouterr().err
    assert main(["train", *TINY, "--set", "model.scheme.hps.alpha_nope=1",
                 "--out", str(tmp_path / "x")]) == 1
    assert "alpha_nope" in capsys.readouterr().err


def test_invalid_values_exit_1(tmp_path, capsys):
    rc = main(["train", *TINY, "--set", "model.width=100",
               "--out", str(tmp_path / "x")])
    assert rc == 1
    assert "model.width" in capsys.readouterr().err
    rc = main(["train", "--set", "model.scheme.kind=mup",
               "--out", str(tmp_path / "x")])
    assert rc == 1
    assert "base_width" in capsys.readouterr().err


def test_missing_data_exits_1(tmp_path, capsys):
    rc = main(["train", "--set", "model.width=64", "--out", str(tmp_path / "x")])
    assert rc == 1
    assert "data.path" in capsys.readouterr().err


def test_config_file_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad)]) == 1
    assert main(["train", "--config", str(tmp_path / "absent.json")]) == 2
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"modle": {}}))
    assert main(["train", "--config", str(unknown)]) == 1
    assert "modle" in capsys.readouterr().err


def test_uscale_out_env_is_default(tmp_path, monkeypatch):
    envdir = tmp_path / "envout"
    monkeypatch.setenv("USCALE_OUT", str(envdir))
    assert main(["train", *TINY]) == 0
    assert (envdir / "metrics.csv").exists()


def test_text_corpus_round_trip(tmp_path):
    corpus = tmp_path / "corpus.txt"
    corpus.write_text("the quick brown fox jumps over the lazy dog. " * 60)
    rc = main(["train", "--set", "model.width=32", "--set", "model.d_head=16",
               "--set", "model.n_blocks=1", "--set", "model.seq_len=16",
               "--set", "train.steps=3", "--set", "train.batch=4",
               "--set", "train.warmup_steps=1", "--set", "train.eval_every=3",
               "--set", f'data.path={corpus}',
               "--out", str(tmp_path / "run")])
    assert rc == 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

SWEEP_ARGS = [
    *TINY,
    "--set", "train.steps=2",
    "--set", 'sweep.grids.eta=[0.0625,0.125]',
    "--set", 'sweep.grids.alpha_ffn_act=[1.0,2.0]',
]


def test_sweep_artifacts_and_worker_invariance(tmp_path):
    a, b = tmp_path / "w1", tmp_path / "w2"
    assert main(["sweep", *SWEEP_ARGS, "--out", str(a)]) == 0
    assert main(["sweep", *SWEEP_ARGS, "--out", str(b), "--workers", "2"]) == 0
    rows = _read_csv(a / "results.csv")
    assert rows[0] == ["strategy", "phase", "hp_json", "seed", "final_loss", "diverged"]
    assert len(rows) == 1 + (2 + 2 + 1)  # eta grid + other grid + combined run
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()
    best = json.loads((a / "best.json").read_text())
    assert set(best["assignment"]) == {"eta", "alpha_ffn_act"}


def test_sweep_random_strategy(tmp_path):
    rc = main(["sweep", *SWEEP_ARGS, "--set", "sweep.strategy=random",
               "--set", "sweep.random_n=3", "--out", str(tmp_path / "r")])
    assert rc == 0
    assert len(_read_csv(tmp_path / "r" / "results.csv")) == 4


def test_sweep_bad_hp_name_exits_1(tmp_path, capsys):
    rc = main(["sweep", *TINY, "--set", 'sweep.grids.nonsense=[1.0]',
               "--out", str(tmp_path / "x")])
    assert rc == 1
    assert "nonsense" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# transfer-error / lr-transfer
# ---------------------------------------------------------------------------


def test_transfer_error_cli(tmp_path, capsys):
    grid = tmp_path / "g.csv"
    grid.write_text("1.0,2.0\n2.0,1.0\n")
    out = tmp_path / "te"
    assert main(["transfer-error", "--grid", f"demo={grid}", "--out", str(out)]) == 0
    assert "transfer_error=1.0" in capsys.readouterr().out
    rows = _read_csv(out / "transfer_error.csv")
    assert rows[1] == ["demo", "2", "2", "1.0"]
    assert (out / "transfer_error.png").exists()


def test_transfer_error_cli_errors(tmp_path, capsys):
    assert main(["transfer-error", "--out", str(tmp_path / "x")]) == 1
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    assert main(["transfer-error", "--grid", str(bad),
                 "--out", str(tmp_path / "x")]) == 1
    assert main(["transfer-error", "--grid", str(tmp_path / "absent.csv"),
                 "--out", str(tmp_path / "x")]) == 2  # I/O failure


def test_lr_transfer_cli(tmp_path):
    out = tmp_path / "lt"
    rc = main(["lr-transfer", *TINY, "--set", "train.steps=2",
               "--set", 'lr_transfer.widths=[32,64]',
               "--set", 'lr_transfer.lr_grid=[0.0625,0.125]',
               "--set", "lr_transfer.replicas=1", "--out", str(out)])
    assert rc == 0
    cells = _read_csv(out / "lr_transfer_cells.csv")
    assert cells[0] == ["width", "lr", "mean_loss", "sem2", "replicas", "diverged"]
    assert len(cells) == 1 + 2 * 2
    summary = _read_csv(out / "lr_transfer_summary.csv")
    assert summary[0] == ["width", "best_lr", "best_loss", "drift_steps"]
    assert (out / "lr_transfer.png").exists()


def test_lr_transfer_bad_width_exits_1(tmp_path, capsys):
    rc = main(["lr-transfer", *TINY, "--set", 'lr_transfer.widths=[40]',
               "--out", str(tmp_path / "x")])
    assert rc == 1
    assert "lr_transfer.widths" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# report verbs
# ---------------------------------------------------------------------------


def test_rms_report_cli(tmp_path):
    out = tmp_path / "rr"
    rc = main(["rms-report", "--set", "model.width=32", "--set", "model.d_head=16",
               "--set", "model.n_blocks=1", "--set", "model.seq_len=16",
               "--set", "train.batch=4", "--out", str(out)])
    assert rc == 0
    rows = _read_csv(out / "rms.csv")
    assert rows[0] == ["step", "tensor", "role", "rms", "abs_max"]
    # 7 matmul sites per block + the readout, 3 roles each
    assert len(rows) == 1 + 3 * (7 * 1 + 1)
    assert (out / "rms.png").exists()


def test_quantize_report_cli(tmp_path, capsys):
    out = tmp_path / "qr"
    assert main(["quantize-report", "--out", str(out)]) == 0
    consts = {r[0]: r for r in _read_csv(out / "quantize_formats.csv")[1:]}
    assert float(consts["e4m3"][4]) == 448.0
    assert float(consts["e5m2"][4]) == 57344.0
    sweep_rows = _read_csv(out / "quantize.csv")
    assert len(sweep_rows) == 1 + 2 * 17  # two formats, stds 2^-8..2^8
    assert (out / "quantize.png").exists()


def test_param_report_cli(tmp_path):
    out = tmp_path / "pr"
    rc = main(["param-report", "--set", "model.width=64", "--set", "model.n_blocks=1",
               "--out", str(out)])
    assert rc == 0
    rows = _read_csv(out / "param_report.csv")
    by_name = {r[0]: r for r in rows[1:]}
    header = rows[0]
    lr_col = header.index("lr_multiplier")
    assert float(by_name["readout"][lr_col]) == 1.0
    assert float(by_name["embedding"][header.index("B")]) == 1.0
    assert (out / "param_report.png").exists()


# ---------------------------------------------------------------------------
# check verbs
# ---------------------------------------------------------------------------


def test_lemma_check_cli(capsys):
    assert main(["lemma-check", "--depth", "4", "--trials", "3"]) == 0
    out = capsys.readouterr().out
    assert "max deviation" in out and "OK" in out
    assert main(["lemma-check", "--depth", "0"]) == 1


def test_abc_check_cli(capsys):
    assert main(["abc-check", "--theta", "2", "--steps", "5"]) == 0
    out = capsys.readouterr().out
    assert "max loss deviation" in out and "OK" in out
    assert main(["abc-check", "--theta", "-1"]) == 1


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "uscale.cli", "lemma-check", "--depth", "2",
         "--trials", "2"],
        capture_output=True, text=True)
    assert proc.returncode == 0
    assert "max deviation" in proc.stdout


@pytest.mark.skipif(shutil.which("uscale") is None,
                    reason="console script not on PATH")
def test_console_script(tmp_path):
    proc = subprocess.run(
        ["uscale", "quantize-report", "--out", str(tmp_path / "q")],
        capture_output=True, text=True)
    assert proc.returncode == 0
    assert (tmp_path / "q" / "quantize.csv").exists()
