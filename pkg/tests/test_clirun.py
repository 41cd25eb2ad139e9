import json

import numpy as np
import pytest

from supmae import checkpoint as ck, clirun, config as C, runlog

TINY_CFG = """\
img_height = 16
img_width = 16
in_chans = 1
embed_dim = 16
depth = 2
num_heads = 2
decoder_dim = 16
decoder_heads = 2
head_hidden = 16
toy_train = 64
toy_test = 32
epochs = 2
warmup_epochs = 1
batch_size = 16
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY_CFG)
    return p


def run(*argv):
    return clirun.main([str(a) for a in argv])


@pytest.fixture
def pretrained(tmp_path, cfg_file):
    out = tmp_path / "pt"
    assert run("pretrain", "--config", cfg_file, "--out", out, "--save-every", 1) == 0
    return out


def test_unknown_subcommand(capsys):
    assert run("train") == 2
    err = capsys.readouterr().err
    assert "usage:" in err and "error: usage:" in err


def test_missing_out_is_usage_error(cfg_file):
    assert run("pretrain", "--config", cfg_file) == 2


def test_pretrain_contract(pretrained):
    assert (pretrained / "ckpt-final.smae").exists() and (pretrained / "run.log").exists()
    assert (pretrained / "ckpt-epoch-1.smae").exists()
    rows = runlog.read(pretrained / "run.log")
    assert rows[0]["kind"] == "config"
    fp = rows[0]["fingerprint"]
    assert all(r["fingerprint"] == fp for r in rows)
    metrics = [r for r in rows if r["kind"] == "metrics"]
    assert [r["epoch"] for r in metrics] == [0, 1]
    final = ck.load(pretrained / "ckpt-final.smae")
    assert C.from_text(final.config_text).fingerprint() == fp and final.epoch == 2


def test_fixed_seed_runs_log_identically(tmp_path, cfg_file, pretrained):
    again = tmp_path / "again"
    assert run("pretrain", "--config", cfg_file, "--out", again) == 0
    assert (again / "run.log").read_bytes() == (pretrained / "run.log").read_bytes()
    assert (again / "ckpt-final.smae").read_bytes() == (pretrained / "ckpt-final.smae").read_bytes()


def test_resume_is_bitwise(tmp_path, pretrained):
    res = tmp_path / "resumed"
    assert run("pretrain", "--ckpt", pretrained / "ckpt-epoch-1.smae", "--out", res) == 0
    assert (res / "ckpt-final.smae").read_bytes() == (pretrained / "ckpt-final.smae").read_bytes()
    full = [r for r in runlog.metric_rows(pretrained / "run.log") if r["epoch"] >= 1]
    assert runlog.metric_rows(res / "run.log") == full


def test_seed_flag_changes_run(tmp_path, cfg_file, pretrained):
    other = tmp_path / "s1"
    assert run("pretrain", "--config", cfg_file, "--out", other, "--seed", 1) == 0
    assert (other / "ckpt-final.smae").read_bytes() != (pretrained / "ckpt-final.smae").read_bytes()


def test_inspect(pretrained, capsys):
    assert run("inspect", pretrained / "ckpt-final.smae") == 0
    out = capsys.readouterr().out
    assert "version 1" in out and "epoch 2" in out and "patch_embed.w" in out and "# mode = pretrain" in out


def test_eval_reports_fingerprint(pretrained, capsys):
    assert run("eval", "--ckpt", pretrained / "ckpt-final.smae") == 0
    rec = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    fp = runlog.read(pretrained / "run.log")[0]["fingerprint"]
    assert rec["fingerprint"] == fp and rec["head"] == "pretrain" and rec["n_samples"] == 32


def test_partial_eval(pretrained, capsys):
    assert run("partial-eval", "--ckpt", pretrained / "ckpt-final.smae", "--keep", 0.25, "--mask-seeds", 2) == 0
    last = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert last["kind"] == "partial-eval" and 0 <= last["mean"] <= 1


@pytest.mark.parametrize("mode", ["finetune", "linprobe"])
def test_transfer_from_checkpoint(tmp_path, pretrained, mode, capsys):
    out = tmp_path / mode
    assert run(mode, "--ckpt", pretrained / "ckpt-final.smae", "--out", out, "epochs=1", "warmup_epochs=0",
               "batch_size=16", "toy_train=64", "toy_test=32") == 0
    rec = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert rec["kind"] == "eval" and (out / "eval.jsonl").exists()
    final = ck.load(out / "ckpt-final.smae")
    head = "ft_head.w" if mode == "finetune" else "lin_head.w"
    assert head in final.params and "dec.pred.w" not in final.params
    enc = ck.load(pretrained / "ckpt-final.smae").params["enc.0.attn.q.w"]
    if mode == "linprobe":
        np.testing.assert_array_equal(final.params["enc.0.attn.q.w"], enc)


def test_eval_finetuned_uses_its_head(tmp_path, pretrained, capsys):
    out = tmp_path / "ft"
    run("finetune", "--ckpt", pretrained / "ckpt-final.smae", "--out", out, "epochs=1", "warmup_epochs=0",
        "batch_size=16", "toy_train=64", "toy_test=32")
    capsys.readouterr()
    assert run("eval", "--ckpt", out / "ckpt-final.smae") == 0
    assert json.loads(capsys.readouterr().out)["head"] == "finetune"


def test_truncated_checkpoint_is_clean_error(tmp_path, pretrained, capsys):
    bad = tmp_path / "bad.smae"
    bad.write_bytes((pretrained / "ckpt-final.smae").read_bytes()[:100])
    assert run("inspect", bad) == clirun.EXIT["checkpoint"]
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: checkpoint:")


def test_config_errors(tmp_path, cfg_file, capsys):
    assert run("pretrain", "--config", cfg_file, "--out", tmp_path / "x", "mask_ratio=1.0") == 3
    assert "mask_ratio" in capsys.readouterr().err
    assert run("pretrain", "--config", cfg_file, "--out", tmp_path / "x", "bogus=1") == 3


def test_f64_precision(tmp_path, cfg_file):
    out = tmp_path / "f64"
    assert run("pretrain", "--config", cfg_file, "--out", out, "--precision", "f64", "epochs=1", "warmup_epochs=0") == 0
    assert ck.load(out / "ckpt-final.smae").params["patch_embed.w"].dtype == np.float64


def test_disk_full_saves_final_checkpoint(tmp_path, cfg_file, monkeypatch, capsys):
    real = runlog.RunLog.record

    def full(self, *a, **kw):
        raise runlog.DiskFull(28, "run.log: disk full after 5 retries")

    monkeypatch.setattr(runlog.RunLog, "record", full)
    out = tmp_path / "full"
    assert run("pretrain", "--config", cfg_file, "--out", out) == clirun.EXIT["io"]
    assert (out / "ckpt-final.smae").exists()
    assert capsys.readouterr().err.startswith("error: io:")
    monkeypatch.setattr(runlog.RunLog, "record", real)


def test_plot(pretrained):
    assert run("plot", pretrained / "run.log", "--out", pretrained / "curve.svg") == 0
    svg = (pretrained / "curve.svg").read_text()
    assert svg.startswith("<svg") and "polyline" in svg


def test_gradcheck_requires_f64(capsys):
    assert run("gradcheck", "--precision", "f32") == 2


def test_gradcheck_small_sample(capsys):
    assert run("gradcheck", "--max-entries", 2) == 0
    assert "PASS" in capsys.readouterr().out


def test_ablate_writes_table(tmp_path, cfg_file, capsys):
    out = tmp_path / "abl"
    assert run("ablate", "--config", cfg_file, "--out", out, "--axis", "decoder_depth", "--values", "1;2",
               "--ft-epochs", 1, "--lin-epochs", 1, "epochs=1", "warmup_epochs=0") == 0
    lines = (out / "decoder_depth.tsv").read_text().splitlines()
    assert lines[0].startswith("decoder_depth\tft\tlin") and len(lines) == 3
    assert run("ablate", "--config", cfg_file, "--out", out, "--axis", "width") == 2


def test_fewshot(pretrained, capsys):
    assert run("fewshot", "--ckpt", pretrained / "ckpt-final.smae", "--shots", 2, "--fewshot-seeds", 1,
               "--search-epochs", 1, "--final-epochs", 1) == 0
    rec = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert rec["kind"] == "fewshot" and len(rec["scores"]) == 1
