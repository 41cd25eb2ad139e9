"""Accuracy evaluation, partial-patch inference, the few-shot protocol and
the ablation-grid runner."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import datapipe as dp
from . import diffcore as dc
from . import model as M
from . import trainharness as th
from .config import RunConfig
from .diffcore import Graph

log = logging.getLogger(__name__)

HEADS = ("pretrain", "finetune", "linprobe")
FEWSHOT_LRS = (1e-4, 3e-4, 1e-3, 3e-3)
FEWSHOT_WDS = (0.0, 1e-4, 1e-2)
ABLATION_AXES = {
    "objectives": ("rec", "cls", "rec+cls"),
    "pooling_mode": ("class_token", "global_pool"),
    "augmentation": ("randcrop", "randcrop,cjit"),
    "cls_ratio": (0.02, 0.01, 0.005, 0.002),
    "decoder_depth": (1, 2, 4),
    "mlp_layers": (1, 2, 3),
}
_EVAL_MASK = 404


class UsageError(ValueError):
    pass


class CapabilityError(RuntimeError):
    pass


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    per_class: tuple[float, ...]
    loss: float
    n_samples: int
    fingerprint: str = ""
    keep_ratio: float = 1.0
    predictions: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ValueError("a report needs at least one sample")
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("predictions")
        d["per_class"] = list(self.per_class)
        return d

    def same_numbers(self, other: "EvalReport") -> bool:
        return self.to_dict() == other.to_dict() and np.array_equal(self.predictions, other.predictions)


def _report(logits_per_sample: np.ndarray, labels: np.ndarray, k: int, tau: float, fingerprint: str,
            keep_ratio: float) -> EvalReport:
    labels = np.asarray(labels)
    z = logits_per_sample.astype(np.float64) / tau
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    nll = -logp[np.arange(len(labels)), labels]
    preds = logits_per_sample.argmax(axis=1)
    hit = preds == labels
    per_class = tuple(float(hit[labels == c].mean()) if (labels == c).any() else float("nan") for c in range(k))
    return EvalReport(float(hit.mean()), per_class, float(nll.mean()), len(labels), fingerprint, keep_ratio, preds)


def _pooled(P, mcfg: M.ModelConfig, patches: np.ndarray) -> dc.Tensor:
    if mcfg.pooling_mode == "class_token":
        idx = np.broadcast_to(np.arange(patches.shape[1]), patches.shape[:2])
        return M.encode_visible(P, mcfg, patches, idx)[1]
    return M.encode_full(P, mcfg, patches)[1]


def _logits(params, buffers, mcfg: M.ModelConfig, head, patches: np.ndarray) -> np.ndarray:
    g = Graph(check_finite=False)
    P = M.bind(g, params, frozen=tuple(params))
    if head == "pretrain":
        # the all-visible plan, so keep_ratio=1 partial inference is the same computation
        idx = np.broadcast_to(np.arange(patches.shape[1]), patches.shape[:2])
        q_v, cls_feat = M.encode_visible(P, mcfg, patches, idx)
        return M.classify_pooled(P, dict(buffers), mcfg, q_v, cls_feat, train=False).data
    pooled = _pooled(P, mcfg, patches)
    if callable(head):
        return np.asarray(head(pooled.data))
    return M.task_logits(P, dict(buffers), head, pooled, train=False).data


def evaluate_accuracy(
    params: dict[str, np.ndarray],
    buffers: dict[str, np.ndarray],
    mcfg: M.ModelConfig,
    data: dp.ImageDataset,
    head: str | Callable[[np.ndarray], np.ndarray] = "finetune",
    batch_size: int = 64,
    fingerprint: str = "",
) -> EvalReport:
    """Top-1 accuracy of ``head`` on ``data`` with frozen (eval-mode) statistics.

    ``head`` names a head stored in ``params`` or is a callable mapping pooled
    features to logits. Every sample is processed independently and the loss
    is reduced once at the end, so the report does not depend on
    ``batch_size``.
    """
    if len(data) == 0:
        raise UsageError("cannot evaluate an empty dataset")
    if not callable(head) and head not in HEADS:
        raise UsageError(f"unknown head {head!r}")
    if head == "pretrain" and "head.0.w" not in params:
        raise CapabilityError("parameters carry no pre-training classification head")
    out = []
    for s in range(0, len(data), batch_size):
        grid = dp.patchify(data.images[s:s + batch_size], mcfg.patch_size)
        out.append(_logits(params, buffers, mcfg, head, grid.patches))
    tau = mcfg.tau if head == "pretrain" else 1.0
    return _report(np.concatenate(out), data.labels, data.num_classes, tau, fingerprint, 1.0)


def keep_plan(n_patches: int, keep_ratio: float, rng: np.random.Generator | None) -> dp.MaskPlan:
    """Plan that keeps ``round(keep_ratio * n)`` patches (at least one)."""
    if not 0 < keep_ratio <= 1:
        raise UsageError(f"keep_ratio {keep_ratio} outside (0, 1]")
    kept = max(1, math.floor(keep_ratio * n_patches + 0.5))
    if kept == n_patches:
        return dp.full_plan(n_patches)
    return dp.build_mask_plan(n_patches, (n_patches - kept) / n_patches, rng)


def partial_patch_inference(
    params: dict[str, np.ndarray],
    buffers: dict[str, np.ndarray],
    mcfg: M.ModelConfig,
    data: dp.ImageDataset,
    keep_ratio: float,
    seed: int = 0,
    batch_size: int = 64,
    fingerprint: str = "",
) -> EvalReport:
    """Classify from a random subset of patches through the pre-training pathway."""
    if "head.0.w" not in params:
        raise CapabilityError("parameters carry no pre-training classification head")
    if len(data) == 0:
        raise UsageError("cannot evaluate an empty dataset")
    n = mcfg.num_patches
    out = []
    for s in range(0, len(data), batch_size):
        grid = dp.patchify(data.images[s:s + batch_size], mcfg.patch_size)
        plans = [keep_plan(n, keep_ratio, dp.stream_rng(seed, _EVAL_MASK, s + i)) for i in range(len(grid.patches))]
        batch = dp.make_batch(grid.patches, data.labels[s:s + batch_size], plans)
        g = Graph(check_finite=False)
        P = M.bind(g, params, frozen=tuple(params))
        q_v, cls_feat = M.encode_visible(P, mcfg, batch.visible, batch.visible_idx)
        out.append(M.classify_pooled(P, dict(buffers), mcfg, q_v, cls_feat, train=False).data)
    return _report(np.concatenate(out), data.labels, data.num_classes, mcfg.tau, fingerprint, keep_ratio)


def partial_patch_sweep(params, buffers, mcfg, data, keep_ratio: float, seeds: Sequence[int] = range(5), **kw):
    """Mean and std of accuracy over mask seeds; returns ``(mean, std, reports)``."""
    reports = [partial_patch_inference(params, buffers, mcfg, data, keep_ratio, seed=s, **kw) for s in seeds]
    accs = np.array([r.accuracy for r in reports])
    return float(accs.mean()), float(accs.std()), reports


# ---------------------------------------------------------------- few-shot

@dataclass
class FewShotResult:
    mode: str
    shots: int
    scores: list[float]
    chosen: list[tuple[float, float]]

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))

    @property
    def std(self) -> float:
        return float(np.std(self.scores))


def sample_shots(data: dp.ImageDataset, shots: int, seed: int) -> np.ndarray:
    """``shots`` indices per class (clamped to the class size), reproducible per (seed, shots)."""
    rng = dp.stream_rng(seed, shots, 7)
    picked = []
    for c in range(data.num_classes):
        members = np.flatnonzero(data.labels == c)
        if len(members) == 0:
            raise ProtocolError(f"class {c} has no samples")
        if shots > len(members):
            log.warning("class %d has %d samples; clamping %d shots", c, len(members), shots)
        picked.append(rng.permutation(members)[:shots])
    return np.concatenate(picked)


def split_train_val(data: dp.ImageDataset, idx: np.ndarray, seed: int, val_frac: float = 0.2):
    """Per-class 80/20 split that keeps at least one training sample per class."""
    rng = dp.stream_rng(seed, 8)
    train, val = [], []
    for c in range(data.num_classes):
        members = rng.permutation(idx[data.labels[idx] == c])
        n_val = min(int(len(members) * val_frac), len(members) - 1)
        val.append(members[:n_val])
        train.append(members[n_val:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def train_transfer(pretrained, mcfg: M.ModelConfig, cfg: th.TrainConfig, data: dp.ImageDataset) -> th.TrainState:
    state = th.transfer_state(pretrained, mcfg, cfg)
    kw = {}
    if cfg.mode == "linprobe" and cfg.aug() is None:
        patches = dp.patchify(data.images, mcfg.patch_size).patches
        kw["features"] = th.encoder_features(state.params, mcfg, patches)
    th.run(data, mcfg, cfg, state, **kw)
    return state


def fewshot_protocol(
    pretrained: dict[str, np.ndarray],
    mcfg: M.ModelConfig,
    train: dp.ImageDataset,
    test: dp.ImageDataset,
    shots: int,
    mode: str,
    seeds: Sequence[int] = (0, 1, 2),
    lrs: Sequence[float] = FEWSHOT_LRS,
    wds: Sequence[float] = FEWSHOT_WDS,
    search_epochs: int = 10,
    final_epochs: int = 50,
    batch_size: int = 32,
) -> FewShotResult:
    """Sample ``shots`` per class, grid-search (lr, wd) on an 80/20 split,
    retrain the best pair on all sampled images and score the test set."""
    if mode not in ("linprobe", "finetune"):
        raise UsageError(f"few-shot mode must be linprobe or finetune, not {mode!r}")
    if shots < 1:
        raise UsageError("shots must be >= 1")
    grid = [(lr, wd) for lr in lrs for wd in wds]
    if not grid:
        raise UsageError("empty hyper-parameter grid")
    scores, chosen = [], []
    for seed in seeds:
        idx = sample_shots(train, shots, seed)
        base = dict(batch_size=batch_size, seed=seed, augment="none", warmup_epochs=0)
        best = grid[0]
        if len(grid) > 1:
            tr_idx, va_idx = split_train_val(train, idx, seed)
            if len(va_idx) == 0:
                log.warning("validation split is empty; using the first grid point")
            else:
                val_scores = []
                for lr, wd in grid:
                    cfg = th.TrainConfig.for_mode(mode, epochs=search_epochs, base_lr=lr, weight_decay=wd, **base)
                    st = train_transfer(pretrained, mcfg, cfg, train.subset(tr_idx))
                    rep = evaluate_accuracy(st.params, st.buffers, mcfg, train.subset(va_idx), mode)
                    val_scores.append(rep.accuracy)
                best = grid[int(np.argmax(val_scores))]
        cfg = th.TrainConfig.for_mode(mode, epochs=final_epochs, base_lr=best[0], weight_decay=best[1], **base)
        st = train_transfer(pretrained, mcfg, cfg, train.subset(idx))
        scores.append(evaluate_accuracy(st.params, st.buffers, mcfg, test, mode).accuracy)
        chosen.append(best)
    return FewShotResult(mode, shots, scores, chosen)


# ---------------------------------------------------------------- ablations

@dataclass
class AblationRow:
    axis: str
    value: object
    ft_acc: float
    lin_acc: float
    pretrain_loss: float
    fingerprint: str


def apply_axis(cfg: RunConfig, axis: str, value) -> RunConfig:
    """Pre-training config with one ablation axis set to ``value``."""
    t, m = cfg.train, cfg.model
    if axis == "objectives":
        lam = {"rec": (1.0, 0.0), "cls": (0.0, t.lambda_cls or 0.01), "rec+cls": (1.0, t.lambda_cls or 0.01)}
        if value not in lam:
            raise UsageError(f"objectives value must be one of {sorted(lam)}")
        t = replace(t, lambda_rec=lam[value][0], lambda_cls=lam[value][1])
    elif axis == "pooling_mode":
        m = replace(m, pooling_mode=value)
    elif axis == "augmentation":
        t = replace(t, augment=value)
    elif axis == "cls_ratio":
        t = replace(t, lambda_cls=float(value))
    elif axis == "decoder_depth":
        m = replace(m, decoder_depth=int(value))
    elif axis == "mlp_layers":
        m = replace(m, head_layers=int(value))
    else:
        raise UsageError(f"unknown ablation axis {axis!r}; expected one of {sorted(ABLATION_AXES)}")
    return RunConfig(m, t, cfg.data)


def pretrain_and_transfer(cfg: RunConfig, train: dp.ImageDataset, test: dp.ImageDataset,
                          ft_cfg: th.TrainConfig, lin_cfg: th.TrainConfig):
    """Pre-train, then fine-tune and linear-probe; returns (pretrain state, ft acc, lin acc, last pretrain loss)."""
    mcfg = cfg.model
    state = th.pretrain_state(mcfg, cfg.train)
    loss_fn = th.rec_only_loss if cfg.train.lambda_cls == 0 else th.pretrain_loss
    hist = th.run(train, mcfg, cfg.train, state, loss_fn=loss_fn)
    ft = train_transfer(state.params, mcfg, ft_cfg, train)
    lin = train_transfer(state.params, mcfg, lin_cfg, train)
    fp = cfg.fingerprint()
    ft_acc = evaluate_accuracy(ft.params, ft.buffers, mcfg, test, "finetune", fingerprint=fp).accuracy
    lin_acc = evaluate_accuracy(lin.params, lin.buffers, mcfg, test, "linprobe", fingerprint=fp).accuracy
    return state, ft_acc, lin_acc, hist[-1].loss if hist else float("nan")


def ablation_grid(
    base: RunConfig,
    axis: str,
    values: Sequence | None,
    train: dp.ImageDataset,
    test: dp.ImageDataset,
    ft_cfg: th.TrainConfig | None = None,
    lin_cfg: th.TrainConfig | None = None,
    out_dir: str | Path | None = None,
) -> list[AblationRow]:
    """One row per value: pretrain, then fine-tune and linear-probe.

    With ``out_dir`` the rows are also written as ``<axis>.jsonl`` and a
    tab-separated ``<axis>.tsv`` table.
    """
    if axis not in ABLATION_AXES:
        raise UsageError(f"unknown ablation axis {axis!r}; expected one of {sorted(ABLATION_AXES)}")
    values = ABLATION_AXES[axis] if values is None else values
    seed = base.train.seed
    ft_cfg = ft_cfg or th.TrainConfig.for_mode("finetune", seed=seed)
    lin_cfg = lin_cfg or th.TrainConfig.for_mode("linprobe", seed=seed)
    rows = []
    for v in values:
        cfg = apply_axis(base, axis, v)
        _, ft_acc, lin_acc, loss = pretrain_and_transfer(cfg, train, test, ft_cfg, lin_cfg)
        rows.append(AblationRow(axis, v, ft_acc, lin_acc, loss, cfg.fingerprint()))
        log.info("%s=%s ft %.4f lin %.4f", axis, v, ft_acc, lin_acc)
    if out_dir is not None:
        write_table(rows, Path(out_dir), axis)
    return rows


def write_table(rows: Sequence[AblationRow], out_dir: Path, axis: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{axis}.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
    with open(out_dir / f"{axis}.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow([axis, "ft", "lin", "fingerprint"])
        for r in rows:
            w.writerow([r.value, f"{100 * r.ft_acc:.1f}", f"{100 * r.lin_acc:.1f}", r.fingerprint])
