"""Two-stage training: CTC-only acoustic pretraining, then joint multi-task training."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, average_checkpoints, load_checkpoint, save_checkpoint
from .data import Batch, make_batches
from .model import ModelConfig, STASTModel, decoder_targets
from .objectives import (AdaptationMode, LossBreakdown, LossWeights, adaptation_loss,
                         ctc_loss_batch, total_loss, translation_loss)

log = logging.getLogger(__name__)

METRICS_COLUMNS = ["step", "l_ctc", "l_st", "l_mt", "l_ad", "l_total", "lr", "wordlevel_fallbacks"]


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class TrainPlan:
    pretrain_epochs: int = 10
    joint_epochs: int = 30
    weights: LossWeights = field(default_factory=LossWeights)
    adaptation: str = "sequence"
    warmup_steps: int = 400
    peak_lr: float = 2e-3
    checkpoint_interval_steps: int = 1000
    average_last: int = 5
    seed: int = 17
    frame_budget: int = 1000
    clip_norm: float = 5.0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.adaptation = AdaptationMode.parse(self.adaptation).value
        if min(self.pretrain_epochs, self.joint_epochs, self.warmup_steps, self.average_last) < 0:
            raise ValueError("plan counts must be >= 0")
        if self.checkpoint_interval_steps < 1:
            raise ValueError("checkpoint_interval_steps must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def lr_at(step: int, warmup: int, peak: float) -> float:
    """Linear warmup then inverse-square-root decay: ``peak * min(step/warmup, sqrt(warmup/step))``."""
    if step < 1:
        raise ValueError("step must be >= 1")
    if warmup <= 0:
        return peak
    return peak * min(step / warmup, math.sqrt(warmup / step))


class Adam:
    """Bias-corrected Adam keyed by parameter name."""

    def __init__(self, params: dict[str, ad.Tensor], beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step_count = 0

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {name} at step {t}")
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], step: int) -> None:
        for k in self.m:
            self.m[k][...] = arrays[f"m.{k}"].reshape(self.m[k].shape)
            self.v[k][...] = arrays[f"v.{k}"].reshape(self.v[k].shape)
        self.step_count = step


def adam_step(params: dict[str, ad.Tensor], state: Adam, lr: float) -> None:
    state.params = params
    state.step(lr)


def clip_grad_norm(params: dict[str, ad.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                          for p in params.values() if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total


# ---------------------------------------------------------------------- losses

def batch_losses(model: STASTModel, batch: Batch, weights: LossWeights, mode) -> LossBreakdown:
    """Forward the batch through every path whose weight is nonzero and combine the terms.

    Terms with zero weight are not computed at all, so they neither touch the
    gradient nor consume dropout randomness.
    """
    mode = AdaptationMode.parse(mode)
    use_ad = weights.eta > 0 and mode is not AdaptationMode.OFF
    eos = 2
    terms: dict = {}
    counts = {"utterances": len(batch), "degenerate": 0, "fallbacks": 0}
    need_speech_path = weights.beta > 0 or use_ad

    if need_speech_path:
        st = model.forward_st(batch, with_decoder=weights.beta > 0 and batch.tgt is not None)
        ctc_logits, active = st.ctc_logits, st.active
        counts["degenerate"] = len(batch) - int(active.size)
    else:
        _, ctc_logits = model.acoustic_forward(batch.speech, batch.speech_mask)
        st, active = None, np.arange(len(batch))

    if weights.alpha > 0:
        lp = ad.log_softmax(ctc_logits, axis=-1)
        per_utt = ctc_loss_batch(lp, [list(batch.src[i, :batch.src_lengths[i]]) for i in range(len(batch))],
                                 batch.speech_lengths, model.blank)
        terms["ctc"] = ad.mean(per_utt)

    if st is not None and st.st_logits is not None:
        tgt_out, tgt_mask = decoder_targets(batch.tgt[active], batch.tgt_mask[active], eos)
        terms["st"] = translation_loss(st.st_logits, tgt_out, tgt_mask)

    mt = None
    if weights.gamma > 0 and batch.tgt is not None:
        mt = model.forward_mt(batch.src, batch.src_mask, batch.tgt)
        tgt_out, tgt_mask = decoder_targets(batch.tgt, batch.tgt_mask, eos)
        terms["mt"] = translation_loss(mt.mt_logits, tgt_out, tgt_mask)

    if use_ad and active.size:
        if mt is None:
            with ad.no_grad():
                mt = model.forward_mt(batch.src, batch.src_mask, None)
        h_x = ad.tensor(mt.h_x.data[active])
        terms["ad"] = adaptation_loss(st.h_s, h_x, mode, st.h_s_mask, batch.src_mask[active], counts)
    return total_loss(terms, weights, counts)


# --------------------------------------------------------------------- trainer

class Trainer:
    """One training stage over a fixed corpus; resumable from its own checkpoints."""

    def __init__(self, model: STASTModel, corpus: Sequence, plan: TrainPlan, stage: str = "joint",
                 epochs: int | None = None, out_dir=None):
        if stage not in ("pretrain", "joint"):
            raise ValueError(f"unknown stage {stage!r}")
        self.model, self.corpus, self.plan, self.stage = model, list(corpus), plan, stage
        w = plan.weights
        self.weights = LossWeights(w.alpha, 0.0, 0.0, 0.0) if stage == "pretrain" else w
        self.mode = plan.adaptation
        self.epochs = epochs if epochs is not None else (
            plan.pretrain_epochs if stage == "pretrain" else plan.joint_epochs)
        self.params = model.parameters()
        self.optimizer = Adam(self.params)
        self.step = 0
        self.epoch = 0
        self.batch_pos = 0
        self.metrics: list[dict] = []
        self.snapshots: deque[Checkpoint] = deque(maxlen=max(plan.average_last, 1))
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self._batches: tuple[int, list[Batch]] | None = None

    def _epoch_seed(self, epoch: int) -> int:
        # stage-independent, so a CTC-only joint stage replays pretraining exactly
        return (self.plan.seed * 1_000_003 + epoch * 7919) % 2 ** 63

    def batches_for(self, epoch: int) -> list[Batch]:
        if self._batches is None or self._batches[0] != epoch:
            self._batches = (epoch, make_batches(self.corpus, self.plan.frame_budget, self._epoch_seed(epoch)))
        return self._batches[1]

    @property
    def active(self) -> bool:
        return self.epochs > 0 and (self.stage == "joint" or self.plan.weights.alpha > 0)

    def train_step(self, batch: Batch) -> LossBreakdown:
        self.model.train()
        self.model.zero_grad()
        ad.reset_tape()
        bd = batch_losses(self.model, batch, self.weights, self.mode)
        if not math.isfinite(bd.l_total):
            raise NonFiniteError(f"non-finite loss at step {self.step + 1}: {bd.row()}")
        lr = lr_at(self.step + 1, self.plan.warmup_steps, self.plan.peak_lr)
        if bd.total is not None and bd.total.requires_grad:
            ad.backward(bd.total)
            clip_grad_norm(self.params, self.plan.clip_norm)
        self.optimizer.step(lr)
        self.step += 1
        row = {"step": self.step, **bd.row(), "lr": lr, "wordlevel_fallbacks": bd.counts.get("fallbacks", 0)}
        self.metrics.append(row)
        if self.step % self.plan.checkpoint_interval_steps == 0:
            self._checkpoint()
        return bd

    def run(self, max_steps: int | None = None) -> list[dict]:
        """Train until the stage's epochs are exhausted (or ``max_steps`` more steps ran)."""
        if not self.active:
            return self.metrics
        done = 0
        while self.epoch < self.epochs:
            batches = self.batches_for(self.epoch)
            while self.batch_pos < len(batches):
                if max_steps is not None and done >= max_steps:
                    return self.metrics
                self.train_step(batches[self.batch_pos])
                self.batch_pos += 1
                done += 1
            log.info("%s epoch %d done at step %d: %s", self.stage, self.epoch + 1, self.step,
                     {k: round(v, 4) for k, v in self.metrics[-1].items() if k.startswith("l_")})
            self.epoch += 1
            self.batch_pos = 0
        return self.metrics

    # ---------------------------------------------------------- checkpoints
    def snapshot(self, with_optimizer: bool = True) -> Checkpoint:
        params = {k: p.data.copy() for k, p in self.params.items()}
        state = {"step": self.step, "epoch": self.epoch, "batch_pos": self.batch_pos, "stage": self.stage,
                 "optimizer_step": self.optimizer.step_count, "rng": self.model.rng.get_state(),
                 "plan_hash": self.plan.digest(), "precision": ad.precision_name()}
        opt = {}
        if with_optimizer:
            # the averaging window travels with the optimizer so a resumed run averages the same snapshots
            opt = {k: v.copy() for k, v in self.optimizer.state_arrays().items()}
            state["snapshot_steps"] = [s.trainer_state["step"] for s in self.snapshots]
            for i, snap in enumerate(self.snapshots):
                opt.update({f"snap{i}.{k}": v for k, v in snap.params.items()})
        return Checkpoint(self.model.cfg.to_dict(), params, state, opt)

    def _checkpoint(self) -> None:
        ckpt = self.snapshot(with_optimizer=False)
        self.snapshots.append(ckpt)
        if self.out_dir is not None:
            self.save(self.out_dir / f"{self.stage}_step{self.step:06d}.stck")

    def save(self, path) -> None:
        width = 8 if ad.get_dtype() is np.float64 else 4
        save_checkpoint(path, self.snapshot(), width=width)

    def restore(self, ckpt: Checkpoint) -> None:
        state = ckpt.trainer_state or {}
        if state.get("plan_hash") not in (None, self.plan.digest()):
            log.warning("restoring a checkpoint written under a different plan")
        load_parameters(self.model, ckpt.params)
        self.step = int(state.get("step", 0))
        self.epoch = int(state.get("epoch", 0))
        self.batch_pos = int(state.get("batch_pos", 0))
        if ckpt.optimizer:
            self.optimizer.load_arrays(ckpt.optimizer, int(state.get("optimizer_step", self.step)))
        self.snapshots.clear()
        for i, step in enumerate(state.get("snapshot_steps", [])):
            params = {k: ckpt.optimizer[f"snap{i}.{k}"].reshape(p.shape) for k, p in self.params.items()}
            self.snapshots.append(Checkpoint(ckpt.config, params, {"step": step}))
        if "rng" in state:
            self.model.rng.set_state(state["rng"])

    def load(self, path) -> None:
        self.restore(load_checkpoint(path))

    def averaged_parameters(self) -> dict[str, np.ndarray] | None:
        if not self.snapshots:
            return None
        return average_checkpoints(list(self.snapshots))


def load_parameters(model: STASTModel, arrays: dict[str, np.ndarray]) -> None:
    params = model.parameters()
    missing = set(params) - set(arrays)
    if missing:
        raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for name, p in params.items():
        p.data[...] = np.asarray(arrays[name]).reshape(p.shape)


def model_from_checkpoint(ckpt: Checkpoint) -> STASTModel:
    model = STASTModel(ModelConfig(**ckpt.config))
    load_parameters(model, ckpt.params)
    return model


def write_metrics(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in METRICS_COLUMNS})


# ------------------------------------------------------------------- stages

def pretrain_acoustic(model: STASTModel, corpus: Sequence, plan: TrainPlan, out_dir=None) -> Trainer:
    """Stage 1: optimise alpha * CTC on (speech, transcription) pairs only."""
    trainer = Trainer(model, corpus, plan, stage="pretrain", out_dir=out_dir)
    trainer.run()
    return trainer


def train_joint(model: STASTModel, corpus: Sequence, plan: TrainPlan, out_dir=None,
                average: bool = True) -> Trainer:
    """Stage 2: multi-task training on triplets; optionally load the mean of the last checkpoints."""
    trainer = Trainer(model, corpus, plan, stage="joint", out_dir=out_dir)
    trainer.run()
    if average:
        avg = trainer.averaged_parameters()
        if avg is not None:
            load_parameters(model, avg)
    return trainer
