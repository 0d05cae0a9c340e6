"""Command-line interface: smoke runs, config strictness, error paths."""

import csv
import json

import numpy as np
import pytest

import anchorbert.data as D
from anchorbert.cli import OUTPUT_ROOT_ENV, load_run_config, main
from anchorbert.errors import ConfigError


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "corpus.txt"
    return str(D.generate_corpus(path, min_bytes=30_000, seed=2))


def smoke_config(tmp_path, corpus, **plan):
    cfg = {
        "seed": 1,
        "corpus": corpus,
        "output_dir": str(tmp_path / "run"),
        "model": {"L": 1, "d": 16, "h": 2, "d_r": 2, "m": 2, "n_max": 16,
                  "vocab_cap": 300},
        "plan": {"total_steps": 50, "phase1_steps": 25, "warmup_steps": 5,
                 "peak_lr": 1e-3, **plan},
        "data": {"batch_size": 4, "mask_rate": 0.15, "holdout_fraction": 0.05},
    }
    p = tmp_path / "run.json"
    p.write_text(json.dumps(cfg))
    return p, cfg


def read_metrics(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_train_smoke_fifty_rows(tmp_path, corpus, capsys):
    cfg_path, cfg = smoke_config(tmp_path, corpus)
    assert main(["train", str(cfg_path)]) == 0
    out_dir = tmp_path / "run"
    rows = read_metrics(out_dir / "metrics.csv")
    assert len(rows) == 51  # header + 50 steps
    assert (out_dir / "final.ckpt").exists()
    assert (out_dir / "switch.ckpt").exists()
    assert (out_dir / "vocab.tsv").exists()
    summary = json.loads((out_dir / "summary.json").read_text())
    assert summary["switch_step"] == 25
    printed = json.loads(capsys.readouterr().out)
    assert np.isfinite(printed["final_train_loss"])


def test_recover_and_eval_and_inspect(tmp_path, corpus, capsys):
    cfg_path, _ = smoke_config(tmp_path, corpus, total_steps=12, phase1_steps=6)
    assert main(["train", str(cfg_path)]) == 0
    out_dir = tmp_path / "run"
    capsys.readouterr()

    # switch.ckpt holds the just-recovered full model -> recover must refuse it
    assert main(["recover", str(out_dir / "switch.ckpt"),
                 str(tmp_path / "again.ckpt")]) == 1
    assert "mode mismatch" in capsys.readouterr().err

    assert main(["eval", str(out_dir / "final.ckpt"), corpus, "--batches", "2",
                 "--batch-size", "4"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert np.isfinite(report["mlm_loss"])
    assert report["perplexity"] == pytest.approx(np.exp(report["mlm_loss"]))

    assert main(["inspect", str(out_dir / "final.ckpt")]) == 0
    text = capsys.readouterr().out
    assert "token_emb" in text
    assert text.count("-> ok") == 3 and "FAIL" not in text


def test_recover_on_relaxed_checkpoint(tmp_path, corpus, capsys):
    # build a relaxed checkpoint by saving one directly
    import anchorbert.model as M
    from anchorbert.checkpoint import save_checkpoint
    from anchorbert.rng import make_rng
    cfg = M.ModelConfig(L=1, d=16, h=2, d_r=2, m=2, n_max=16, vocab=50)
    state = M.init_model(cfg, make_rng(0))
    ckpt = tmp_path / "relaxed.ckpt"
    save_checkpoint(ckpt, state, cfg, 10, "coarse")
    out = tmp_path / "full.ckpt"
    assert main(["recover", str(ckpt), str(out)]) == 0
    printed = capsys.readouterr().out
    before = int(printed.split("before:")[1].split()[0])
    after = int(printed.split("after:")[1].split()[0])
    assert after > before
    assert out.exists()


def test_bench_command(tmp_path, capsys):
    spec = {"output": str(tmp_path / "bench.csv"),
            "sweeps": [{"mechanism": "ffn_standard", "n_list": [8, 16, 32, 64],
                        "d": 32, "reps": 5}]}
    spec_path = tmp_path / "bench.json"
    spec_path.write_text(json.dumps(spec))
    assert main(["bench", str(spec_path)]) == 0
    rows = read_metrics(tmp_path / "bench.csv")
    assert len(rows) == 5


def test_unknown_config_key_rejected(tmp_path, corpus, capsys):
    cfg_path, cfg = smoke_config(tmp_path, corpus)
    raw = json.loads(cfg_path.read_text())
    raw["model"]["dropout"] = 0.1
    cfg_path.write_text(json.dumps(raw))
    assert main(["train", str(cfg_path)]) == 1
    assert "dropout" in capsys.readouterr().err


def test_missing_required_keys_rejected(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"seed": 1, "output_dir": "x"}))
    with pytest.raises(ConfigError) as exc:
        load_run_config(p)
    assert "corpus" in str(exc.value)


def test_malformed_json_rejected(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert main(["train", str(p)]) == 1
    assert "error:" in capsys.readouterr().err


def test_set_overrides(tmp_path, corpus):
    cfg_path, _ = smoke_config(tmp_path, corpus)
    cfg = load_run_config(cfg_path, ["plan.total_steps=8", "plan.phase1_steps=4",
                                     "seed=9"])
    assert cfg["plan"]["total_steps"] == 8
    assert cfg["plan"]["phase1_steps"] == 4
    assert cfg["seed"] == 9
    with pytest.raises(ConfigError):
        load_run_config(cfg_path, ["model.bogus=1"])
    with pytest.raises(ConfigError):
        load_run_config(cfg_path, ["no-equals-sign"])


def test_output_root_env_var(tmp_path, corpus, monkeypatch):
    cfg_path, raw = smoke_config(tmp_path, corpus, total_steps=6, phase1_steps=3)
    rewritten = json.loads(cfg_path.read_text())
    rewritten["output_dir"] = "nested/run"   # relative -> re-rooted by env var
    cfg_path.write_text(json.dumps(rewritten))
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert main(["train", str(cfg_path)]) == 0
    assert (tmp_path / "root" / "nested" / "run" / "metrics.csv").exists()


def test_missing_checkpoint_file_is_clean_error(tmp_path, capsys):
    assert main(["inspect", str(tmp_path / "nope.ckpt")]) == 1
    assert "error:" in capsys.readouterr().err
