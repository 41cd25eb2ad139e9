"""Training loops: AdamW, warmup+cosine schedule, layer-wise lr decay and the
pretrain / finetune / linprobe modes at desk scale."""
from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import datapipe as dp
from . import diffcore as dc
from . import model as M
from . import objectives as obj
from .diffcore import Graph

log = logging.getLogger(__name__)

MODES = ("pretrain", "finetune", "linprobe")

# full-scale recipes, kept for reference and for the scaled_lr examples
PAPER_PRETRAIN = dict(base_lr=1.5e-4, weight_decay=0.05, betas=(0.9, 0.95), batch_size=4096, epochs=400, warmup_epochs=20)
PAPER_FINETUNE = dict(base_lr=1e-3, weight_decay=0.05, betas=(0.9, 0.999), layer_decay=0.65, batch_size=1024,
                      epochs=100, warmup_epochs=5, label_smoothing=0.1)
PAPER_LINPROBE = dict(base_lr=0.1, weight_decay=0.0, batch_size=8192, epochs=90, warmup_epochs=10)

_MODE_DEFAULTS = {
    "pretrain": dict(epochs=50, warmup_epochs=5, batch_size=32, base_lr=1e-2, weight_decay=0.05, beta2=0.95,
                     layer_decay=1.0, label_smoothing=0.0, augment="randcrop"),
    "finetune": dict(epochs=20, warmup_epochs=1, batch_size=32, base_lr=1.6e-2, weight_decay=0.05, beta2=0.999,
                     layer_decay=0.65, label_smoothing=0.1, augment="randcrop"),
    "linprobe": dict(epochs=30, warmup_epochs=3, base_lr=1e-2, weight_decay=0.0, beta2=0.999,
                     layer_decay=1.0, label_smoothing=0.0, augment="none"),
}


class InvariantViolation(RuntimeError):
    pass


class LoadError(KeyError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "pretrain"
    epochs: int = 50
    warmup_epochs: int = 5
    batch_size: int = 128
    base_lr: float = 3e-3
    min_lr: float = 0.0
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    mask_ratio: float = 0.75
    lambda_rec: float = 1.0
    lambda_cls: float = 0.01
    label_smoothing: float = 0.0
    layer_decay: float = 1.0
    accum_steps: int = 1
    seed: int = 0
    augment: str = "randcrop"
    crop_scale_min: float = 0.2
    crop_scale_max: float = 1.0
    hflip: bool = True
    log_every: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs]")
        if not 0 <= self.mask_ratio < 1:
            raise ValueError("mask_ratio ∈ [0,1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch-statistics layers train)")
        if not 0 < self.layer_decay <= 1:
            raise ValueError("layer_decay must lie in (0, 1]")
        if self.accum_steps < 1 or self.batch_size % self.accum_steps:
            raise ValueError("accum_steps must divide batch_size")
        obj.LossWeights(self.lambda_rec, self.lambda_cls, 1.0)

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "TrainConfig":
        return cls(mode=mode, **{**_MODE_DEFAULTS[mode], **overrides})

    @property
    def betas(self) -> tuple[float, float]:
        return self.beta1, self.beta2

    def weights(self, tau: float) -> obj.LossWeights:
        return obj.LossWeights(self.lambda_rec, self.lambda_cls, tau)

    def aug(self) -> dp.AugmentConfig | None:
        a = dp.AugmentConfig.from_switches(self.augment, self.crop_scale_min, self.crop_scale_max, self.hflip)
        return a if (a.randcrop or a.hflip) else None

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- schedules

def scaled_lr(base_lr: float, batch_size: int) -> float:
    """Linear scaling rule: base_lr * batch_size / 256."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return base_lr * batch_size / 256


def lr_at(step: int, total_steps: int, warmup_steps: int, peak_lr: float, min_lr: float = 0.0) -> float:
    """Linear warmup from 0, then half-cosine from peak_lr to min_lr.

    Progress reaches 1 at the last step (total_steps - 1).
    """
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if warmup_steps >= total_steps:
        raise ValueError("warmup_steps must be < total_steps")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    span = total_steps - 1 - warmup_steps
    progress = (step - warmup_steps) / span if span > 0 else 1.0
    return min_lr + (peak_lr - min_lr) * 0.5 * (1 + math.cos(math.pi * progress))


def layerwise_multipliers(encoder_depth: int, decay: float) -> list[float]:
    """Multiplier per group [embed, block 1..L, head]: decay ** (L + 1 - g)."""
    if not 0 < decay <= 1:
        raise ValueError("decay must lie in (0, 1]")
    top = encoder_depth + 1
    return [decay ** (top - g) for g in range(top + 1)]


def layer_group(name: str, encoder_depth: int) -> int:
    if name.startswith("patch_embed.") or name in ("cls_token", "pos_embed"):
        return 0
    if name.startswith("enc.") and name.split(".")[1].isdigit():
        return int(name.split(".")[1]) + 1
    return encoder_depth + 1


def lr_scales(names, encoder_depth: int, decay: float) -> dict[str, float]:
    mult = layerwise_multipliers(encoder_depth, decay)
    return {n: mult[layer_group(n, encoder_depth)] for n in names}


# ---------------------------------------------------------------- optimizer

@dataclass
class OptState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def decays(name: str) -> bool:
    return not name.endswith(M.NO_DECAY_SUFFIXES)


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptState,
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    scales: dict[str, float] | None = None,
) -> None:
    """Bias-corrected AdamW update, in place, over the names present in ``grads``.

    Weight decay is decoupled (p *= 1 - lr * wd) and skipped for norm
    parameters, biases, mask token and class token.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise dc.NumericError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = betas
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        dt = p.dtype.type
        s = 1.0 if scales is None else scales.get(name, 1.0)
        step_lr = lr * s
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name] = dt(b1) * state.m[name] + dt(1 - b1) * g
        v = state.v[name] = dt(b2) * state.v[name] + dt(1 - b2) * g * g
        if weight_decay and decays(name):
            p = p * dt(1 - step_lr * weight_decay)
        params[name] = p - dt(step_lr) * ((m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(eps)))


# ---------------------------------------------------------------- state

@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    opt: OptState
    rng: np.random.Generator
    epoch: int = 0

    @classmethod
    def fresh(cls, params, buffers, seed: int) -> "TrainState":
        return cls(params, buffers, OptState(), np.random.default_rng(np.random.SeedSequence([seed, 99])))


@dataclass
class EpochMetrics:
    mode: str
    epoch: int
    losses: list[float] = field(default_factory=list)
    rec: list[float] = field(default_factory=list)
    cls: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    correct: int = 0
    seen: int = 0
    seconds: float = 0.0

    @property
    def loss(self) -> float:
        return float(np.mean(self.losses)) if self.losses else float("nan")

    @property
    def accuracy(self) -> float:
        return self.correct / self.seen if self.seen else float("nan")

    @property
    def throughput(self) -> float:
        return self.seen / self.seconds if self.seconds > 0 else 0.0


def checksum(arrays: dict[str, np.ndarray], names=None) -> str:
    h = hashlib.sha256()
    for k in sorted(arrays if names is None else names):
        h.update(k.encode())
        h.update(np.ascontiguousarray(arrays[k]).tobytes())
    return h.hexdigest()


def _steps(n: int, cfg: TrainConfig) -> int:
    return math.ceil(n / cfg.batch_size)


def _schedule(state: TrainState, n: int, cfg: TrainConfig) -> Callable[[int], float]:
    per_epoch = _steps(n, cfg)
    total = per_epoch * cfg.epochs
    warm = per_epoch * cfg.warmup_epochs
    peak = scaled_lr(cfg.base_lr, cfg.batch_size)
    if warm >= total:
        warm = total - 1
    return lambda step: lr_at(min(step, total - 1), total, warm, peak, cfg.min_lr)


def _split(batch: dp.Batch, k: int) -> list[dp.Batch]:
    if k == 1:
        return [batch]
    size = batch.size // k
    out = []
    for j in range(k):
        s = slice(j * size, (j + 1) * size)
        out.append(dp.Batch(batch.visible[s], batch.targets[s], batch.labels[s], batch.visible_idx[s],
                            batch.masked_idx[s], batch.restore[s], batch.patches[s], batch.indices[s]))
    return out


def _accumulate(total: dict | None, grads: dict, w: float) -> dict:
    if total is None:
        return {k: g * g.dtype.type(w) if w != 1 else g for k, g in grads.items()}
    for k, g in grads.items():
        total[k] = total[k] + g * g.dtype.type(w)
    return total


# ---------------------------------------------------------------- pretrain

def pretrain_loss(P, buffers, mcfg: M.ModelConfig, batch: dp.Batch, weights: obj.LossWeights, train: bool = True, step=None):
    """Masked encode, decode and classify one batch; returns (joint, parts, logits)."""
    q_v, cls_feat = M.encode_visible(P, mcfg, batch.visible, batch.visible_idx)
    rec = None
    if weights.lambda_rec:
        pred = M.decode_reconstruct(P, mcfg, q_v, batch.restore)
        rec = obj.reconstruction_loss(pred, obj.norm_pix_targets(batch.targets), batch.masked_idx)
    logits = M.classify_pooled(P, buffers, mcfg, q_v, cls_feat, train=train)
    cls = obj.classification_loss(logits, batch.labels, weights.tau)
    joint, parts = obj.joint_loss(rec, cls, weights, step)
    return joint, parts, logits


def rec_only_loss(P, buffers, mcfg: M.ModelConfig, batch: dp.Batch, weights: obj.LossWeights, train: bool = True,
                  step=None):
    """Reference path for the reconstruction-only objective; the head never runs."""
    q_v, _ = M.encode_visible(P, mcfg, batch.visible, batch.visible_idx)
    pred = M.decode_reconstruct(P, mcfg, q_v, batch.restore)
    rec = obj.reconstruction_loss(pred, obj.norm_pix_targets(batch.targets), batch.masked_idx)
    joint, parts = obj.joint_loss(rec, None, obj.LossWeights(weights.lambda_rec, 0.0, weights.tau), step)
    return joint, parts, None


def pretrain_epoch(
    data: dp.ImageDataset,
    mcfg: M.ModelConfig,
    cfg: TrainConfig,
    state: TrainState,
    loss_fn: Callable = pretrain_loss,
    on_step: Callable | None = None,
) -> EpochMetrics:
    """One epoch of the joint objective; updates ``state`` in place."""
    if cfg.mode != "pretrain":
        raise ValueError("pretrain_epoch needs mode=pretrain")
    return _run_epoch(data, mcfg, cfg, state, "pretrain", loss_fn, on_step)


def _run_epoch(data, mcfg, cfg, state, kind, loss_fn, on_step) -> EpochMetrics:
    weights = cfg.weights(mcfg.tau)
    lr_fn = _schedule(state, len(data), cfg)
    epoch_seed = int(state.rng.integers(2**62))
    metrics = EpochMetrics(cfg.mode, state.epoch)
    ratio = cfg.mask_ratio if kind == "pretrain" else 0.0
    scales = None
    if cfg.layer_decay < 1:
        scales = lr_scales(state.params, mcfg.depth, cfg.layer_decay)
    t0 = time.perf_counter()
    for b_i, batch in enumerate(dp.iterate_batches(data, cfg.batch_size, mcfg.patch_size, epoch_seed, state.epoch,
                                                   ratio, cfg.aug())):
        if batch.size < 2:
            continue
        step = state.opt.step
        lr = lr_fn(step)
        micro = _split(batch, cfg.accum_steps) if batch.size % cfg.accum_steps == 0 else [batch]
        grads, parts_sum = None, {}
        for mb in micro:
            g = Graph()
            P = M.bind(g, state.params)
            if kind == "pretrain":
                joint, parts, logits = loss_fn(P, state.buffers, mcfg, mb, weights, True, step)
            else:
                joint, parts, logits = loss_fn(P, state.buffers, mcfg, mb, cfg)
            if not np.isfinite(parts["joint"]):
                raise obj.TrainingAbort(
                    f"non-finite loss at epoch {state.epoch} batch {b_i}; rng={state.rng.bit_generator.state}", step - 1)
            grads = _accumulate(grads, dc.backward(joint), 1.0 / len(micro))
            for k, v in parts.items():
                parts_sum[k] = parts_sum.get(k, 0.0) + v / len(micro)
            if logits is not None:
                metrics.correct += int((logits.data.argmax(axis=1) == mb.labels).sum())
        optimizer_step(state.params, grads, state.opt, lr, cfg.weight_decay, cfg.betas, cfg.adam_eps, scales)
        metrics.seen += batch.size
        metrics.losses.append(parts_sum["joint"])
        metrics.rec.append(parts_sum.get("rec", float("nan")))
        metrics.cls.append(parts_sum.get("cls", float("nan")))
        metrics.lrs.append(lr)
        if on_step is not None:
            on_step(state, metrics, b_i)
    metrics.seconds = time.perf_counter() - t0
    state.epoch += 1
    return metrics


# ---------------------------------------------------------------- transfer

def prepare_transfer(pretrained: dict[str, np.ndarray], mcfg: M.ModelConfig, kind: str, num_classes: int, seed: int):
    """Keep the encoder, drop decoder and pre-training head, attach a fresh head."""
    expected = [k for k in M.param_shapes(mcfg) if k.startswith(("patch_embed.", "enc.")) or k == "cls_token"]
    expected.append("pos_embed")
    missing = [k for k in expected if k not in pretrained]
    if missing:
        raise LoadError(f"checkpoint missing encoder tensors: {missing[:5]}")
    dtype = pretrained["patch_embed.w"].dtype
    params = {k: pretrained[k].copy() for k in expected}
    head, buffers = M.init_task_head(kind, mcfg, num_classes, seed, dtype)
    params.update(head)
    return params, buffers


def finetune_loss(P, buffers, mcfg, batch: dp.Batch, cfg: TrainConfig, train: bool = True):
    _, pooled = M.encode_full(P, mcfg, batch.patches)
    logits = M.task_logits(P, buffers, "finetune", pooled, train)
    loss = obj.classification_loss(logits, batch.labels, 1.0, cfg.label_smoothing if train else 0.0)
    return loss, {"joint": float(loss.data), "cls": float(loss.data)}, logits


def finetune_epoch(data, mcfg: M.ModelConfig, cfg: TrainConfig, state: TrainState, on_step=None) -> EpochMetrics:
    """Full-image training of encoder + fresh head with layer-wise lr decay."""
    if cfg.mode != "finetune":
        raise ValueError("finetune_epoch needs mode=finetune")
    if "ft_head.w" not in state.params:
        raise LoadError("finetune state has no ft_head; use prepare_transfer")
    return _run_epoch(data, mcfg, cfg, state, "finetune", finetune_loss, on_step)


def encoder_features(params, mcfg: M.ModelConfig, patches: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Mean-pooled (or class-token) features from a frozen encoder."""
    out = []
    for s in range(0, len(patches), batch_size):
        g = Graph()
        P = M.bind(g, params, frozen=tuple(params))
        chunk = patches[s:s + batch_size]
        if mcfg.pooling_mode == "class_token":
            idx = np.broadcast_to(np.arange(chunk.shape[1]), chunk.shape[:2])
            _, feat = M.encode_visible(P, mcfg, chunk, idx)
        else:
            _, feat = M.encode_full(P, mcfg, chunk)
        out.append(feat.data)
    return np.concatenate(out)


def linprobe_epoch(data, mcfg: M.ModelConfig, cfg: TrainConfig, state: TrainState, features: np.ndarray | None = None,
                   on_step=None) -> EpochMetrics:
    """Train only the normalization + linear probe on frozen encoder features.

    ``features`` optionally caches per-sample encoder features (valid when
    augmentation is off).
    """
    if cfg.mode != "linprobe":
        raise ValueError("linprobe_epoch needs mode=linprobe")
    if features is not None and cfg.aug() is not None:
        raise ValueError("cached features are only valid without augmentation")
    enc = [k for k in state.params if not k.startswith("lin_head.")]
    before = checksum(state.params, enc)
    cache = features

    def loss_fn(P, buffers, mcfg_, batch, cfg_):
        feats = cache[batch.indices] if cache is not None else encoder_features(state.params, mcfg_, batch.patches)
        logits = M.task_logits(P, buffers, "linprobe", feats, True)
        loss = obj.classification_loss(logits, batch.labels, 1.0, 0.0)
        return loss, {"joint": float(loss.data), "cls": float(loss.data)}, logits

    metrics = _run_epoch_probe(data, mcfg, cfg, state, loss_fn, on_step)
    if checksum(state.params, enc) != before:
        raise InvariantViolation("encoder parameters changed during linear probing")
    return metrics


def _run_epoch_probe(data, mcfg, cfg, state, loss_fn, on_step):
    # only head tensors are bound as trainable; encoder stays outside the graph
    head_names = [k for k in state.params if k.startswith("lin_head.")]
    full = state.params
    sub = TrainState({k: full[k] for k in head_names}, state.buffers, state.opt, state.rng, state.epoch)
    metrics = _run_epoch(data, mcfg, cfg, sub, "probe", loss_fn, on_step)
    full.update(sub.params)
    state.epoch = sub.epoch
    return metrics


# ---------------------------------------------------------------- full runs

def run(data, mcfg: M.ModelConfig, cfg: TrainConfig, state: TrainState, on_epoch=None, **kw) -> list[EpochMetrics]:
    """Train ``state`` from its current epoch to ``cfg.epochs``.

    ``on_epoch(state, metrics)`` fires after each epoch (logging, checkpoints).
    Extra keyword arguments go to the per-epoch function.
    """
    epoch_fn = {"pretrain": pretrain_epoch, "finetune": finetune_epoch, "linprobe": linprobe_epoch}[cfg.mode]
    history = []
    while state.epoch < cfg.epochs:
        m = epoch_fn(data, mcfg, cfg, state, **kw)
        history.append(m)
        if on_epoch is not None:
            on_epoch(state, m)
    return history


def pretrain_state(mcfg: M.ModelConfig, cfg: TrainConfig, dtype=np.float32) -> TrainState:
    params, buffers = M.init_params(mcfg, cfg.seed, dtype)
    return TrainState.fresh(params, buffers, cfg.seed)


def transfer_state(pretrained: dict[str, np.ndarray], mcfg: M.ModelConfig, cfg: TrainConfig) -> TrainState:
    """Fresh optimizer and head on top of a pre-trained (or random) encoder."""
    params, buffers = prepare_transfer(pretrained, mcfg, cfg.mode, mcfg.num_classes, cfg.seed)
    return TrainState.fresh(params, buffers, cfg.seed)
