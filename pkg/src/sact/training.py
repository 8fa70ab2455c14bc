"""Adam optimization, global-norm gradient clipping, and the training driver.

The driver is deterministic end to end: the batch schedule is a pure
function of (seed, epoch), dropout draws from a generator derived from
(seed, step), and optimizer moments ride along in checkpoints, so resuming
from a checkpoint with the same seed continues the exact loss sequence.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .data import make_batches
from .errors import NumericError
from .rng import derive_rng, derive_seed
from .tensor import Tape, backward
from .tensor import Tensor


@dataclass
class OptimizerState:
    """Adam first/second moments per parameter, plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    alpha: float = 0.0003
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, named_params, alpha: float = 0.0003) -> "OptimizerState":
        return cls(m={n: np.zeros_like(t.data) for n, t in named_params},
                   v={n: np.zeros_like(t.data) for n, t in named_params},
                   alpha=alpha)


@dataclass
class TrainConfig:
    batch_size: int = 64
    clip_norm: float = 10.0
    max_steps: int = 1000
    eval_interval: int = 200
    seed: int = 42
    precision: int = 64
    learning_rate: float = 0.0003
    bucket_batches: int = 64

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")


def gradient_norm(named_params) -> float:
    """Global L2 norm over every parameter gradient."""
    total = 0.0
    for _, t in named_params:
        g = t.grad
        total += float((g * g).sum())
    return float(np.sqrt(total))


def clip_gradients(named_params, max_norm: float) -> float:
    """Scale all gradients so the global norm is at most ``max_norm``.

    Returns the scale applied (1.0 when no clipping was needed). Direction is
    preserved: every gradient is multiplied by the same positive factor.
    """
    for name, t in named_params:
        if not np.isfinite(t.grad).all():
            raise NumericError(f"non-finite gradient in {name}")
    norm = gradient_norm(named_params)
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for _, t in named_params:
        t.grad *= scale
    return scale


def adam_step(named_params, state: OptimizerState) -> None:
    """One Adam update from the gradients currently held by the parameters."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in named_params:
        g = p.grad
        if g.shape != state.m[name].shape:
            raise ValueError(f"optimizer state shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.alpha * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class TrainResult:
    records: list[dict]
    best_valid_loss: float
    steps_run: int
    stopped_early: bool = False


def corpus_loss(pairs_ids, params, config, batch_size: int, seed: int) -> float:
    """Token-weighted mean cross-entropy over a corpus, without dropout."""
    total, tokens = 0.0, 0.0
    for batch in make_batches(pairs_ids, batch_size, derive_seed(seed, "eval-order")):
        loss, _ = M.forward_loss(batch, params, config, training=False)
        n = float(batch.tgt_mask[:, 1:].sum())
        total += loss.item() * n
        tokens += n
    return total / tokens


def _optimizer_arrays(state: OptimizerState) -> dict[str, np.ndarray]:
    out = {}
    for name, arr in state.m.items():
        out[f"adam.m.{name}"] = arr
    for name, arr in state.v.items():
        out[f"adam.v.{name}"] = arr
    return out


def train(params: M.ModelParams, model_config: M.ModelConfig,
          train_ids, valid_ids, cfg: TrainConfig,
          log_path=None, checkpoint_dir=None, resume_from=None,
          eval_hook=None) -> TrainResult:
    """Run the optimization loop.

    Per step: forward loss -> backward -> global-norm clip -> Adam. Every
    ``eval_interval`` steps the validation loss is measured; the best model
    goes to ``checkpoint_dir/best.ckpt`` and the current one (with optimizer
    moments, for resumption) to ``checkpoint_dir/last.ckpt``. ``eval_hook``
    may return True to stop early. A numeric failure aborts with the
    offending step in the message.
    """
    named = params.named()
    opt = OptimizerState.for_params(named, alpha=cfg.learning_rate)
    start_step = 0
    best_valid = float("inf")
    if resume_from is not None:
        loaded, _, extra, arrays = M.load_checkpoint(resume_from)
        for (name, dst), (_, src) in zip(named, loaded.named()):
            dst.data[...] = src.data
        ts = extra.get("train_state", {})
        start_step = int(ts.get("step", 0))
        best_valid = float(ts.get("best_valid", float("inf")))
        opt.t = int(ts.get("adam_t", 0))
        for name, _ in named:
            if f"adam.m.{name}" in arrays:
                opt.m[name] = arrays[f"adam.m.{name}"]
                opt.v[name] = arrays[f"adam.v.{name}"]

    def save(path, step):
        extra = {"train_state": {"step": step, "best_valid": best_valid,
                                 "adam_t": opt.t}}
        M.save_checkpoint(path, params, model_config, extra=extra,
                          extra_arrays=_optimizer_arrays(opt))

    def epoch_schedule(epoch: int) -> list:
        return make_batches(train_ids, cfg.batch_size,
                            derive_seed(cfg.seed, "shuffle", epoch),
                            cfg.bucket_batches)

    # The batch count per epoch does not depend on the shuffle seed.
    schedule = epoch_schedule(0)
    steps_per_epoch = len(schedule)
    current_epoch = 0
    records: list[dict] = []
    stopped = False
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        step = start_step
        while step < cfg.max_steps and not stopped:
            step += 1
            epoch = (step - 1) // steps_per_epoch
            if epoch != current_epoch:
                schedule = epoch_schedule(epoch)
                current_epoch = epoch
            batch = schedule[(step - 1) % steps_per_epoch]
            started = time.perf_counter()
            params.zero_grads()
            try:
                with Tape():
                    loss, temps = M.forward_loss(
                        batch, params, model_config, training=True,
                        rng=derive_rng(cfg.seed, "dropout", step))
                loss_value = loss.item()
                if not np.isfinite(loss_value):
                    raise NumericError(f"loss is not finite: {loss_value}")
                backward(loss)
                norm = gradient_norm(named)
                clip_gradients(named, cfg.clip_norm)
            except NumericError as err:
                raise NumericError(f"step {step}: {err}") from err
            adam_step(named, opt)
            record = {"step": step, "loss": loss_value,
                      "grad_norm": norm,
                      "mean_tau": float(temps.mean()),
                      "lr": opt.alpha,
                      "wall_ms": round((time.perf_counter() - started) * 1e3, 3)}
            records.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
            if step % cfg.eval_interval == 0 or step == cfg.max_steps:
                if valid_ids:
                    vloss = corpus_loss(valid_ids, params, model_config,
                                        cfg.batch_size, cfg.seed)
                    if vloss < best_valid:
                        best_valid = vloss
                        if checkpoint_dir is not None:
                            save(f"{checkpoint_dir}/best.ckpt", step)
                if checkpoint_dir is not None:
                    save(f"{checkpoint_dir}/last.ckpt", step)
                if eval_hook is not None and eval_hook(step, params):
                    stopped = True
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(records=records, best_valid_loss=best_valid,
                       steps_run=step, stopped_early=stopped)
