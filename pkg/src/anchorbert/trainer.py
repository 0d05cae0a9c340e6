"""Adam optimization, learning-rate schedule, and the two-phase controller.

Phase 1 trains the relaxed model (anchored attention, factorized FFN). At the
switch step (fixed, or fired by a loss-plateau detector) the model is
transformed into a full one, the optimizer is reset, and training continues
with exact attention for the remaining steps. With phase1_steps=0 the loop is
exactly standard single-phase training and never touches the relaxed
machinery.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model as M
from . import tensor as T
from .checkpoint import save_checkpoint
from .data import BatchStream, MlmBatch
from .errors import ConfigError, TrainingError
from .model import ModelConfig, ModelState
from .rng import derive_rng

# rng key namespaces, so each purpose gets an independent stream per seed
_KEY_INIT = 1
_KEY_STEP = 2
_KEY_EVAL = 3

METRICS_HEADER = ["step", "phase", "loss", "lr", "wall_ms", "anchors_resampled"]


@dataclass
class AdamHyper:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class OptimState:
    hyper: AdamHyper
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_optimizer(state: ModelState, hyper: AdamHyper | None = None) -> OptimState:
    hyper = hyper or AdamHyper()
    opt = OptimState(hyper=hyper)
    for name, t in state.named_parameters():
        opt.m[name] = np.zeros_like(t.data)
        opt.v[name] = np.zeros_like(t.data)
    return opt


def clip_global_norm(params: list[tuple[str, object]], max_norm: float = 1.0) -> float:
    total = 0.0
    for _, t in params:
        if t.grad is not None:
            total += float((t.grad.astype(np.float64) ** 2).sum())
    norm = total ** 0.5
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for _, t in params:
            if t.grad is not None:
                t.grad = t.grad * scale
    return norm


def adam_step(state: ModelState, opt: OptimState, lr: float):
    """One Adam update with bias correction and decoupled weight decay.

    Weight decay applies to weight matrices only (rank >= 2), never to
    biases or layer-norm gains/offsets.
    """
    opt.step += 1
    hp = opt.hyper
    b1, b2 = hp.beta1, hp.beta2
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for name, t in state.named_parameters():
        g = t.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
        m = opt.m[name]
        v = opt.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + hp.eps)
        if t.data.ndim >= 2:
            update = update + hp.weight_decay * t.data
        t.data = t.data - np.float32(lr) * update.astype(t.data.dtype)


@dataclass
class AutoSwitch:
    window: int
    min_rel_improvement: float

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError(f"plateau window must be >= 1, got {self.window}")


@dataclass
class PhasePlan:
    total_steps: int
    phase1_steps: int | None = None     # fixed switch point; None with auto_switch
    auto_switch: AutoSwitch | None = None
    warmup_steps: int = 100
    peak_lr: float = 2e-4
    phase2_rewarmup_frac: float = 0.1   # short re-warmup after the optimizer reset

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.phase1_steps is None and self.auto_switch is None:
            raise ConfigError("set either phase1_steps or auto_switch")
        if self.phase1_steps is not None:
            if not (0 <= self.phase1_steps < self.total_steps):
                raise ConfigError(
                    f"phase1_steps={self.phase1_steps} must lie in [0, total_steps={self.total_steps})")


def lr_at(step: int, plan: PhasePlan, switch_step: int | None = None) -> float:
    """Linear warmup to peak, then linear decay to 0 at the phase's budget.

    Phase 2 re-warms over phase2_rewarmup_frac of its budget (the optimizer
    was reset at the switch); a plan with phase1_steps=0 is single-phase and
    uses the plain warmup.
    """
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    s = switch_step if switch_step is not None else (plan.phase1_steps or 0)
    if step < s:
        local, budget, warm = step, s, min(plan.warmup_steps, s)
    else:
        local, budget = step - s, plan.total_steps - s
        if s == 0:
            warm = min(plan.warmup_steps, budget)
        else:
            warm = max(1, round(plan.phase2_rewarmup_frac * budget))
    if budget <= 0:
        return 0.0
    if local < warm:
        return plan.peak_lr * local / warm
    if budget == warm:
        return plan.peak_lr
    return plan.peak_lr * max(0.0, (budget - local) / (budget - warm))


def detect_plateau(loss_history, window: int, min_rel_improvement: float) -> bool:
    """True once the windowed mean loss stops improving by the given fraction.

    Compares the latest `window` losses against the previous `window`; returns
    False until 2*window samples exist.
    """
    if window < 1:
        raise ConfigError(f"plateau window must be >= 1, got {window}")
    if len(loss_history) < 2 * window:
        return False
    hist = np.asarray(loss_history, dtype=np.float64)
    prev = hist[-2 * window:-window].mean()
    latest = hist[-window:].mean()
    if prev == 0:
        return True
    return (prev - latest) / prev < min_rel_improvement


def evaluate(state: ModelState, cfg: ModelConfig, batch: MlmBatch, seed_key: int = _KEY_EVAL) -> float:
    """Held-out MLM loss; anchor sampling (relaxed mode) uses a fixed stream
    so repeated evaluations are comparable."""
    rng = derive_rng(cfg.seed, seed_key) if cfg.mode == M.MODE_RELAXED else None
    with T.no_grad():
        hidden = M.forward_hidden(state, cfg, batch.token_ids, batch.pad_mask, rng)
        loss = M.mlm_loss_from_hidden(state, hidden, batch.labels)
    return loss.item()


@dataclass
class RunResult:
    state: ModelState
    cfg: ModelConfig
    summary: dict


def run_two_phase(
    cfg: ModelConfig,
    plan: PhasePlan,
    stream: BatchStream,
    out_dir,
    held_out: MlmBatch | None = None,
    eval_every: int = 25,
    hyper: AdamHyper | None = None,
    log_every: int = 0,
) -> RunResult:
    """Train coarse -> transform -> refine; returns the final model plus a
    summary of losses, the switch point, and wall time per phase.

    Writes metrics.csv (step,phase,loss,lr,wall_ms,anchors_resampled) and
    checkpoints at the switch and at the end under out_dir.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hyper = hyper or AdamHyper(lr=plan.peak_lr)

    baseline = plan.phase1_steps == 0
    cfg = replace(cfg, mode=M.MODE_FULL if baseline else M.MODE_RELAXED)
    state = M.init_model(cfg, derive_rng(cfg.seed, _KEY_INIT))
    opt = init_optimizer(state, hyper)
    if held_out is None:
        held_out = stream.next_batch()

    switch_step: int | None = 0 if baseline else plan.phase1_steps
    switched = baseline
    loss_history: list[float] = []
    phase_wall = {"coarse": 0.0, "refined": 0.0}
    summary: dict = {"switch_step": 0 if baseline else None,
                     "pre_switch_eval_loss": None, "post_switch_eval_loss": None,
                     "refine_evals": []}
    metrics_path = out_dir / "metrics.csv"
    fh = open(metrics_path, "w", newline="")
    writer = csv.writer(fh)
    writer.writerow(METRICS_HEADER)

    def do_switch(step: int):
        nonlocal state, cfg, opt, switched, switch_step
        summary["pre_switch_eval_loss"] = evaluate(state, cfg, held_out)
        state, cfg = M.recover_full(state, cfg)
        summary["post_switch_eval_loss"] = evaluate(state, cfg, held_out)
        opt = init_optimizer(state, hyper)
        switched = True
        switch_step = step
        summary["switch_step"] = step
        save_checkpoint(out_dir / "switch.ckpt", state, cfg, step, "refined")

    try:
        for step in range(plan.total_steps):
            if not switched:
                if plan.auto_switch is not None:
                    a = plan.auto_switch
                    if step > 0 and detect_plateau(loss_history, a.window, a.min_rel_improvement):
                        do_switch(step)
                    elif step == plan.total_steps - 1:
                        do_switch(step)  # plateau never fired; leave one refine step
                elif step == plan.phase1_steps:
                    do_switch(step)
            phase = "refined" if switched else "coarse"
            t0 = time.perf_counter()
            try:
                batch = stream.next_batch()
            except StopIteration:
                raise TrainingError(f"data stream exhausted at step {step}; stream must cycle")
            step_rng = derive_rng(cfg.seed, _KEY_STEP, step) if cfg.mode == M.MODE_RELAXED else None
            state.zero_grads()
            hidden = M.forward_hidden(state, cfg, batch.token_ids, batch.pad_mask, step_rng)
            loss = M.mlm_loss_from_hidden(state, hidden, batch.labels)
            loss.backward()
            clip_global_norm(state.named_parameters())
            if switched:
                boundary = switch_step
            else:
                # auto mode has no fixed phase-1 budget; decay toward the total
                boundary = plan.phase1_steps if plan.phase1_steps is not None else plan.total_steps
            lr = lr_at(step, plan, boundary)
            adam_step(state, opt, lr)
            wall_ms = (time.perf_counter() - t0) * 1e3
            phase_wall["refined" if switched else "coarse"] += wall_ms / 1e3
            loss_val = loss.item()
            loss_history.append(loss_val)
            anchors = 0 if cfg.mode == M.MODE_FULL else cfg.L * cfg.h * batch.token_ids.shape[0]
            writer.writerow([step, phase, f"{loss_val:.6f}", f"{lr:.8g}",
                             f"{wall_ms:.3f}", anchors])
            if log_every and step % log_every == 0:
                print(f"step {step:6d} [{phase}] loss {loss_val:.4f} lr {lr:.2e}")
            if switched and (step - (switch_step or 0)) % eval_every == 0:
                summary["refine_evals"].append([step, evaluate(state, cfg, held_out)])
    finally:
        fh.close()

    save_checkpoint(out_dir / "final.ckpt", state, cfg, plan.total_steps, "refined" if switched else "coarse")
    tail = loss_history[-50:]
    summary.update({
        "final_train_loss": float(np.mean(tail)),
        "final_eval_loss": evaluate(state, cfg, held_out),
        "phase_wall_s": phase_wall,
        "total_wall_s": phase_wall["coarse"] + phase_wall["refined"],
        "total_steps": plan.total_steps,
    })
    return RunResult(state=state, cfg=cfg, summary=summary)
