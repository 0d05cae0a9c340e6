"""Command-line entry point: train / recover / bench / eval / inspect.

Runs are driven by a strict JSON config (unknown keys rejected); any scalar
field can be overridden on the command line with --set key=value. All outputs
land under the configured output directory, which can be re-rooted with the
ANCHORBERT_OUTPUT_ROOT environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import attention as att
from . import bench as B
from . import data as D
from . import model as M
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import AnchorBertError, ConfigError, InputError
from .model import ModelConfig
from .rng import derive_rng
from .tensor import Tensor
from .trainer import AdamHyper, AutoSwitch, PhasePlan, run_two_phase

OUTPUT_ROOT_ENV = "ANCHORBERT_OUTPUT_ROOT"

_MODEL_KEYS = {"L", "d", "h", "d_f", "d_r", "m", "n_max", "vocab_cap"}
_PLAN_KEYS = {"total_steps", "phase1_steps", "auto_switch", "warmup_steps",
              "peak_lr", "phase2_rewarmup_frac"}
_DATA_KEYS = {"batch_size", "mask_rate", "holdout_fraction"}
_TOP_KEYS = {"seed", "corpus", "output_dir", "model", "plan", "data"}

_DEFAULTS = {
    "seed": 0,
    "model": {"L": 4, "d": 128, "h": 4, "d_f": None, "d_r": 16, "m": 8,
              "n_max": 128, "vocab_cap": 8000},
    "plan": {"total_steps": 1000, "phase1_steps": 500, "auto_switch": None,
             "warmup_steps": 100, "peak_lr": 2e-4, "phase2_rewarmup_frac": 0.1},
    "data": {"batch_size": 32, "mask_rate": 0.15, "holdout_fraction": 0.05},
}


def _check_keys(section: dict, allowed: set, where: str):
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {where}")


def load_run_config(path, overrides: list[str] | None = None) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    _check_keys(raw, _TOP_KEYS, "config")
    cfg = {
        "seed": raw.get("seed", _DEFAULTS["seed"]),
        "corpus": raw.get("corpus"),
        "output_dir": raw.get("output_dir"),
        "model": {**_DEFAULTS["model"], **raw.get("model", {})},
        "plan": {**_DEFAULTS["plan"], **raw.get("plan", {})},
        "data": {**_DEFAULTS["data"], **raw.get("data", {})},
    }
    _check_keys(raw.get("model", {}), _MODEL_KEYS, "model")
    _check_keys(raw.get("plan", {}), _PLAN_KEYS, "plan")
    _check_keys(raw.get("data", {}), _DATA_KEYS, "data")
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set wants key=value, got {item!r}")
        key, value = item.split("=", 1)
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            pass  # keep the raw string
        parts = key.split(".")
        node = cfg
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"unknown key {key!r} in --set")
            node = node[p]
        leaf = parts[-1]
        if not isinstance(node, dict) or (leaf not in node and parts[0] in ("model", "plan", "data")):
            raise ConfigError(f"unknown key {key!r} in --set")
        node[leaf] = value
    if not cfg["corpus"]:
        raise ConfigError("missing key 'corpus' in config")
    if not cfg["output_dir"]:
        raise ConfigError("missing key 'output_dir' in config")
    return cfg


def _resolve_out(output_dir) -> Path:
    out = Path(output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def _build_plan(plan_cfg: dict) -> PhasePlan:
    auto = plan_cfg["auto_switch"]
    if auto is not None:
        _check_keys(auto, {"window", "min_rel_improvement"}, "plan.auto_switch")
        auto = AutoSwitch(window=int(auto["window"]),
                          min_rel_improvement=float(auto["min_rel_improvement"]))
    phase1 = plan_cfg["phase1_steps"]
    return PhasePlan(
        total_steps=int(plan_cfg["total_steps"]),
        phase1_steps=None if phase1 is None else int(phase1),
        auto_switch=auto,
        warmup_steps=int(plan_cfg["warmup_steps"]),
        peak_lr=float(plan_cfg["peak_lr"]),
        phase2_rewarmup_frac=float(plan_cfg["phase2_rewarmup_frac"]),
    )


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set)
    out = _resolve_out(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    seed = int(cfg["seed"])
    mc = cfg["model"]
    dc = cfg["data"]

    vocab = D.build_vocab(cfg["corpus"], int(mc["vocab_cap"]))
    vocab.save(out / "vocab.tsv")
    text = Path(cfg["corpus"]).read_text(encoding="utf-8")
    ids = vocab.encode(D.tokenize(text))
    split = max(1, int(len(ids) * (1.0 - float(dc["holdout_fraction"]))))
    n = int(mc["n_max"])
    train_stream = D.BatchStream(ids[:split], vocab.size, n, int(dc["batch_size"]),
                                 float(dc["mask_rate"]), derive_rng(seed, 10))
    held_stream = D.BatchStream(ids[split:], vocab.size, n, int(dc["batch_size"]),
                                float(dc["mask_rate"]), derive_rng(seed, 11))
    held_out = held_stream.next_batch()

    model_cfg = ModelConfig(L=int(mc["L"]), d=int(mc["d"]), h=int(mc["h"]),
                            d_f=None if mc["d_f"] is None else int(mc["d_f"]),
                            d_r=int(mc["d_r"]), m=int(mc["m"]), n_max=n,
                            vocab=vocab.size, mode=M.MODE_RELAXED, seed=seed)
    plan = _build_plan(cfg["plan"])
    result = run_two_phase(model_cfg, plan, train_stream, out, held_out=held_out,
                           hyper=AdamHyper(lr=plan.peak_lr), log_every=args.log_every)
    summary = dict(result.summary)
    summary["output_dir"] = str(out)
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps({"final_train_loss": summary["final_train_loss"],
                      "final_eval_loss": summary["final_eval_loss"],
                      "switch_step": summary["switch_step"],
                      "total_wall_s": summary["total_wall_s"]}, indent=2))
    return 0


def cmd_recover(args) -> int:
    state, cfg, step, _phase = load_checkpoint(args.checkpoint_in)
    if cfg.mode != M.MODE_RELAXED:
        raise ConfigError(f"mode mismatch: checkpoint is {cfg.mode!r}, expected 'relaxed'")
    before = state.parameter_count()
    full, full_cfg = M.recover_full(state, cfg)
    after = full.parameter_count()
    save_checkpoint(args.checkpoint_out, full, full_cfg, step, "recovered")
    print(f"parameters before: {before}")
    print(f"parameters after:  {after}")
    return 0


def cmd_bench(args) -> int:
    try:
        spec = json.loads(Path(args.spec).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.spec}: not valid JSON ({exc})") from exc
    _check_keys(spec, {"output", "sweeps"}, "bench spec")
    if "sweeps" not in spec or "output" not in spec:
        raise ConfigError("bench spec needs 'output' and 'sweeps'")
    results = []
    for sw in spec["sweeps"]:
        _check_keys(sw, {"mechanism", "n_list", "d", "h", "m", "d_r", "reps"}, "sweep")
        results += B.sweep_seq_len(
            sw["mechanism"], sw["n_list"], d=int(sw.get("d", 128)),
            h=int(sw.get("h", 4)), m=int(sw.get("m", 8)),
            d_r=int(sw.get("d_r", 16)), reps=int(sw.get("reps", 5)))
    out = _resolve_out(spec["output"])
    B.write_csv(results, out)
    print(f"wrote {out}")
    return 0


def cmd_eval(args) -> int:
    state, cfg, _step, phase = load_checkpoint(args.checkpoint)
    vocab_path = args.vocab or str(Path(args.checkpoint).parent / "vocab.tsv")
    vocab = D.Vocab.load(vocab_path)
    if vocab.size != cfg.vocab:
        raise InputError(f"vocab size {vocab.size} != checkpoint vocab {cfg.vocab}")
    stream = D.make_batches(args.corpus, vocab, cfg.n_max, args.batch_size,
                            args.mask_rate, derive_rng(cfg.seed, 12))
    losses = []
    for _ in range(args.batches):
        batch = stream.next_batch()
        rng = derive_rng(cfg.seed, 13) if cfg.mode == M.MODE_RELAXED else None
        with T.no_grad():
            hidden = M.forward_hidden(state, cfg, batch.token_ids, batch.pad_mask, rng)
            losses.append(M.mlm_loss_from_hidden(state, hidden, batch.labels).item())
    loss = float(np.mean(losses))
    print(json.dumps({"phase": phase, "mlm_loss": loss,
                      "perplexity": float(np.exp(loss)), "batches": args.batches}))
    return 0


def cmd_inspect(args) -> int:
    state, cfg, step, phase = load_checkpoint(args.checkpoint)
    print(f"config: {cfg}")
    print(f"step: {step}  phase: {phase}")
    for name, t in state.named_parameters():
        print(f"  {name}: {t.shape}")
    # stochasticity probe: similarity rows on a random batch must sum to 1
    rng = derive_rng(cfg.seed, 14)
    x = Tensor(rng.normal(0, 1, (8, cfg.d)).astype(np.float32))
    p = state.layers[0].attn
    with T.no_grad():
        q = T.matmul(x, p.wq[0])
        k = T.matmul(x, p.wk[0])
        s = att.query_key_similarity(q, k)
        qn = T.row_l2_normalize(q)
        a = att.select_anchors(q, min(cfg.m, 4), rng)
        s1 = att.query_anchor_similarity(qn, a.vectors)
        s2 = att.anchor_key_similarity(a.vectors, k)
    for name, mat in (("S", s), ("S1", s1), ("S2", s2)):
        sums = mat.data.sum(axis=-1)
        ok = bool(np.all(np.abs(sums - 1) < 1e-5) and mat.data.min() >= 0)
        print(f"stochastic[{name}]: row sums in [{sums.min():.6f}, {sums.max():.6f}] -> {'ok' if ok else 'FAIL'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="anchorbert",
                                 description="Two-phase encoder training: coarse (relaxed) then refined (full).")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the two-phase training loop end to end")
    p.add_argument("config", help="JSON run config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any scalar config field (dotted path)")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("recover", help="transform a relaxed checkpoint into a full one")
    p.add_argument("checkpoint_in")
    p.add_argument("checkpoint_out")
    p.set_defaults(fn=cmd_recover)

    p = sub.add_parser("bench", help="run timing sweeps and write a CSV")
    p.add_argument("spec", help="JSON bench spec")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("eval", help="held-out MLM loss and perplexity of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("corpus")
    p.add_argument("--vocab", default=None)
    p.add_argument("--batches", type=int, default=8)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--mask-rate", type=float, default=0.15)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("inspect", help="print checkpoint config, shapes, and a stochasticity probe")
    p.add_argument("checkpoint")
    p.set_defaults(fn=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except AnchorBertError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
