"""Self-distillation training loop."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import autodiff as ad
from ..autodiff import Adam
from ..errors import ConfigError, NumericError
from ..io import save_checkpoint
from ..tokenizer import TokenizerConfig
from ..transformer import Network, TransformerConfig
from . import distill
from .views import make_bundle

log = logging.getLogger(__name__)


@dataclass
class DistillConfig:
    batch_size: int = 32
    out_dim: int = 1024
    projector_hidden: list = field(default_factory=lambda: [1024, 128])
    student_temp: float = distill.STUDENT_TEMP
    teacher_temp: float = distill.TEACHER_TEMP
    center_momentum: float = distill.CENTER_MOMENTUM
    center_on: str = "logits"
    ema_base: float = distill.EMA_BASE
    global_points: int = 1024
    local_points: int = 512
    global_crop: list = field(default_factory=lambda: [0.6, 1.0])
    local_crop: list = field(default_factory=lambda: [0.4, 0.6])
    scale_range: list = field(default_factory=lambda: [0.67, 1.5])
    use_local: bool = True
    use_mixed: bool = True
    epochs: int = 200
    warmup: float = 20.0
    lr_start: float = 1e-4
    lr_peak: float = 5e-4
    lr_end: float = 1e-4

    def validate(self, token_count=None):
        def positive_int(name, v):
            if int(v) != v or v < 1:
                raise ConfigError(f"sdmm.{name}", f"must be a positive integer, got {v}")

        for name in ("batch_size", "out_dim", "global_points", "local_points", "epochs"):
            positive_int(name, getattr(self, name))
        if self.batch_size < 2 and self.use_mixed:
            raise ConfigError("sdmm.batch_size", "cut-mix needs at least two samples per minibatch")
        if len(self.projector_hidden) != 2:
            raise ConfigError("sdmm.projector_hidden", "exactly two hidden widths are required")
        for v in self.projector_hidden:
            positive_int("projector_hidden", v)
        for name in ("student_temp", "teacher_temp"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"sdmm.{name}", "temperatures must be positive")
        if not 0 <= self.center_momentum < 1:
            raise ConfigError("sdmm.center_momentum", "must lie in [0, 1)")
        if self.center_on not in ("logits", "probs"):
            raise ConfigError("sdmm.center_on", "must be 'logits' or 'probs'")
        if not 0 <= self.ema_base <= 1:
            raise ConfigError("sdmm.ema_base", "must lie in [0, 1]")
        for name in ("global_crop", "local_crop", "scale_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"sdmm.{name}", f"need 0 < low <= high, got {lo}, {hi}")
        if self.global_crop[1] > 1 or self.local_crop[1] > 1:
            raise ConfigError("sdmm.global_crop", "crop ratios cannot exceed 1")
        if not 0 <= self.warmup <= self.epochs:
            raise ConfigError("sdmm.warmup", f"must lie in [0, epochs], got {self.warmup}")
        for name in ("lr_start", "lr_peak", "lr_end"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"sdmm.{name}", "learning rates must be positive")
        if token_count is not None:
            smallest = self.local_points if self.use_local else self.global_points
            if smallest < token_count:
                raise ConfigError("sdmm.local_points", f"views of {smallest} points cannot yield {token_count} tokens")
        return self

    def lr(self, epoch):
        return distill.lr_schedule(epoch, self.warmup, self.epochs, self.lr_start, self.lr_peak, self.lr_end)


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    teacher_entropy: float
    lr: float
    lam: float
    step_losses: list = field(default_factory=list)
    step_entropies: list = field(default_factory=list)
    step_marginal_entropies: list = field(default_factory=list)

    def row(self):
        return {
            "epoch": self.epoch,
            "loss": self.loss,
            "teacher_entropy": self.teacher_entropy,
            "lr": self.lr,
            "lambda": self.lam,
        }


class DistillState:
    """Student, teacher (no gradients), center and optimizer state."""

    def __init__(self, tok_cfg: TokenizerConfig, tr_cfg: TransformerConfig, cfg: DistillConfig, rng, dtype=np.float64):
        cfg.validate(tok_cfg.token_count)
        self.tok_cfg, self.tr_cfg, self.cfg = tok_cfg, tr_cfg, cfg
        self.student = Network(tok_cfg, tr_cfg, cfg.projector_hidden, cfg.out_dim, rng, dtype)
        self.teacher = Network(tok_cfg, tr_cfg, cfg.projector_hidden, cfg.out_dim, rng, dtype)
        # the teacher only ever runs under no_grad, so its tensors never collect gradients
        self.teacher.load_state_dict(self.student.state_dict())
        self.center = np.zeros(cfg.out_dim)
        self.optimizer = Adam(self.student.named_parameters())
        self.step = 0
        self.epoch = 0

    def arrays(self):
        out = {}
        out.update({f"student.{k}": v for k, v in self.student.state_dict().items()})
        out.update({f"teacher.{k}": v for k, v in self.teacher.state_dict().items()})
        out["center"] = self.center
        out.update({f"adam.{k}": v for k, v in self.optimizer.state_arrays().items()})
        return out

    def load_arrays(self, arrays):
        self.student.load_state_dict({k[8:]: v for k, v in arrays.items() if k.startswith("student.")})
        self.teacher.load_state_dict({k[8:]: v for k, v in arrays.items() if k.startswith("teacher.")})
        self.center = np.asarray(arrays["center"], dtype=np.float64).copy()
        self.optimizer.load_state_arrays({k[5:]: v for k, v in arrays.items() if k.startswith("adam.")})

    def meta(self):
        return {
            "kind": "distill_state",
            "step": self.step,
            "epoch": self.epoch,
            "tokenizer": asdict(self.tok_cfg),
            "transformer": asdict(self.tr_cfg),
            "sdmm": asdict(self.cfg),
        }


def teacher_encoder_arrays(state):
    """Teacher encoder tensors under encoder-relative names (for extraction)."""
    return {k[len("encoder."):]: v for k, v in state.teacher.state_dict().items() if k.startswith("encoder.")}


def _pick_partners(E, rng):
    """Uniform partner index per sample, never the sample itself."""
    r = rng.integers(0, E - 1, size=E)
    return np.where(r >= np.arange(E), r + 1, r)


def _view_batch(bundles, cfg):
    names = ["G1", "G2"]
    if cfg.use_local:
        names += ["L1", "L2"]
    if cfg.use_mixed:
        names.append("M")
    attr = {"G1": "G1", "G2": "G2", "L1": "L1", "L2": "L2", "M": "mixed"}
    views = [getattr(b, attr[n]) for n in names for b in bundles]
    return names, views


def train_step(batch, state: DistillState, lr, lam, rng, executor=None):
    """One optimisation step on a list of E pose-normalized samples.

    Returns ``(loss, mean per-sample teacher entropy, entropy of the mean
    teacher distribution)``.
    """
    cfg = state.cfg
    E = len(batch)
    partners = _pick_partners(E, rng)
    bundles = [
        make_bundle(
            batch[a], batch[partners[a]], int(partners[a]), rng,
            cfg.global_points, cfg.local_points, cfg.global_crop, cfg.local_crop,
            cfg.scale_range, cfg.use_local, cfg.use_mixed,
        )
        for a in range(E)
    ]
    names, views = _view_batch(bundles, cfg)
    starts = [int(rng.integers(len(v))) for v in views]
    describe = state.student.encoder.describe
    if executor is not None:
        descs = list(executor.map(describe, views, starts))
    else:
        descs = [describe(v, s) for v, s in zip(views, starts)]

    with ad.no_grad():
        t_logits = state.teacher(descs[: 2 * E], training=False).data.astype(np.float64)
    dt = distill.teacher_dist(t_logits, state.center, cfg.teacher_temp)
    teacher = {"G1": dt[:E], "G2": dt[E : 2 * E]}

    s_logits = state.student(descs, training=True)
    ds = distill.student_dist(s_logits, cfg.student_temp)
    student = {n: ad.gather(ds, np.arange(i * E, (i + 1) * E)) for i, n in enumerate(names)}
    target = None
    if cfg.use_mixed:
        m = np.array([b.m for b in bundles])
        target = distill.mix_labels(teacher["G1"], teacher["G1"][partners], m)
    terms = distill.loss_terms(teacher, student, target)
    per_sample = terms[0][1]
    for _, t in terms[1:]:
        per_sample = per_sample + t
    loss = ad.mean(per_sample)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss at step {state.step}")

    state.optimizer.zero_grad()
    ad.backward(loss)
    state.optimizer.step(lr)
    distill.ema_update(dict(state.teacher.named_parameters()), dict(state.student.named_parameters()), lam)
    # normalization statistics follow the same average as the weights they belong to
    teacher_buffers = dict(state.teacher.named_buffers())
    for name, buf in state.student.named_buffers():
        teacher_buffers[name][...] = lam * teacher_buffers[name] + (1 - lam) * buf
    centered_on = t_logits if cfg.center_on == "logits" else dt
    state.center = distill.update_center(state.center, centered_on, cfg.center_momentum)
    state.step += 1
    return value, float(distill.entropy(dt).mean()), float(distill.entropy(dt.mean(axis=0)))


def train_epoch(dataset, state: DistillState, rng, workers=1, snapshot_path=None) -> EpochMetrics:
    """One pass over ``dataset`` (pose-normalized point sets) in minibatches of E."""
    cfg = state.cfg
    E = cfg.batch_size
    if len(dataset) < E:
        raise ValueError(f"dataset has {len(dataset)} samples, fewer than the minibatch size {E}")
    steps = len(dataset) // E
    total_steps = cfg.epochs * steps
    order = rng.permutation(len(dataset))
    epoch = state.epoch
    losses, entropies, marginals = [], [], []
    lr0 = lam = None
    executor = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for s in range(steps):
            lr = cfg.lr(min(epoch + s / steps, cfg.epochs))
            lam = distill.ema_lambda(state.step, total_steps, cfg.ema_base)
            if lr0 is None:
                lr0 = lr
            batch = [dataset[i] for i in order[s * E : (s + 1) * E]]
            try:
                loss, ent, marg = train_step(batch, state, lr, lam, rng, executor)
            except NumericError as exc:
                if snapshot_path is not None:
                    save_checkpoint(snapshot_path, state.arrays(), state.meta())
                    raise NumericError(str(exc), snapshot=str(snapshot_path)) from None
                raise
            losses.append(loss)
            entropies.append(ent)
            marginals.append(marg)
            log.debug("epoch %d step %d loss %.6f entropy %.4f", epoch, s, loss, ent)
    finally:
        if executor is not None:
            executor.shutdown()
    state.epoch += 1
    return EpochMetrics(epoch, float(np.mean(losses)), float(np.mean(entropies)), lr0, lam, losses, entropies, marginals)
