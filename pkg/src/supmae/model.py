"""ViT encoder over visible patches, mask-token decoder, pooled MLP classifier.

Parameters live in a flat ``dict[str, np.ndarray]``; batch-statistics running
estimates live in a separate buffers dict. Forward functions take the
parameters already bound to a :class:`~supmae.diffcore.Graph` (see
:func:`bind`), so the same code serves training, evaluation and gradient
checks.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Graph, Tensor

POOLING_MODES = ("global_pool", "class_token")
FROZEN = ("pos_embed", "dec.pos_embed")
# excluded from weight decay
NO_DECAY_SUFFIXES = (".b", ".g", "mask_token", "cls_token")


class ConfigError(ValueError):
    pass


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    img_height: int = 32
    img_width: int = 32
    in_chans: int = 3
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    decoder_dim: int = 32
    decoder_depth: int = 1
    decoder_heads: int = 2
    mlp_ratio: float = 4.0
    head_layers: int = 2
    head_hidden: int = 128
    pooling_mode: str = "global_pool"
    num_classes: int = 10
    tau: float = 10.0

    def __post_init__(self):
        p = self.patch_size
        if self.img_height % p or self.img_width % p:
            raise ConfigError(f"image {self.img_height}x{self.img_width} not divisible by patch_size {p}")
        if self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if self.decoder_dim % self.decoder_heads:
            raise ConfigError("decoder_dim must be divisible by decoder_heads")
        if self.embed_dim % 4 or self.decoder_dim % 4:
            raise ConfigError("embed_dim and decoder_dim must be divisible by 4 (sin-cos table)")
        if self.head_layers < 1:
            raise ConfigError("head_layers must be >= 1")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.pooling_mode not in POOLING_MODES:
            raise ConfigError(f"pooling_mode must be one of {POOLING_MODES}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")

    @property
    def grid(self) -> tuple[int, int]:
        return self.img_height // self.patch_size, self.img_width // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.in_chans

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- init

def sincos_pos_embed(grid_hw: tuple[int, int], dim: int, class_slot: bool = False) -> np.ndarray:
    """Fixed 2-D sine-cosine table, rows in row-major patch order.

    The first half of each row encodes the row coordinate, the second half the
    column; within a half, (sin, cos) pairs are interleaved per frequency.
    """
    if dim % 4:
        raise ConfigError(f"positional dim {dim} not divisible by 4")
    gh, gw = grid_hw
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)

    def encode(pos):
        ang = pos[:, None] * omega[None, :]
        out = np.empty((len(pos), 2 * quarter))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out

    rows, cols = np.meshgrid(np.arange(gh, dtype=np.float64), np.arange(gw, dtype=np.float64), indexing="ij")
    table = np.concatenate([encode(rows.ravel()), encode(cols.ravel())], axis=1)
    if class_slot:
        table = np.concatenate([np.zeros((1, dim)), table])
    return table


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2
    return x * std


def _block_shapes(prefix: str, d: int, hidden: int) -> dict[str, tuple]:
    return {
        f"{prefix}.norm1.g": (d,), f"{prefix}.norm1.b": (d,),
        f"{prefix}.attn.q.w": (d, d), f"{prefix}.attn.q.b": (d,),
        f"{prefix}.attn.k.w": (d, d),  # no key bias: softmax cancels it
        f"{prefix}.attn.v.w": (d, d), f"{prefix}.attn.v.b": (d,),
        f"{prefix}.attn.proj.w": (d, d), f"{prefix}.attn.proj.b": (d,),
        f"{prefix}.norm2.g": (d,), f"{prefix}.norm2.b": (d,),
        f"{prefix}.mlp.fc1.w": (d, hidden), f"{prefix}.mlp.fc1.b": (hidden,),
        f"{prefix}.mlp.fc2.w": (hidden, d), f"{prefix}.mlp.fc2.b": (d,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Every trainable tensor of the pre-training model, in canonical order."""
    d, dd = cfg.embed_dim, cfg.decoder_dim
    shapes = {"patch_embed.w": (cfg.patch_dim, d), "patch_embed.b": (d,)}
    if cfg.pooling_mode == "class_token":
        shapes["cls_token"] = (d,)
    for i in range(cfg.depth):
        shapes.update(_block_shapes(f"enc.{i}", d, cfg.mlp_hidden))
    shapes.update({"enc.norm.g": (d,), "enc.norm.b": (d,)})
    shapes.update({"dec.embed.w": (d, dd), "dec.embed.b": (dd,), "mask_token": (dd,)})
    for i in range(cfg.decoder_depth):
        shapes.update(_block_shapes(f"dec.{i}", dd, int(dd * cfg.mlp_ratio)))
    shapes.update({"dec.norm.g": (dd,), "dec.norm.b": (dd,), "dec.pred.w": (dd, cfg.patch_dim), "dec.pred.b": (cfg.patch_dim,)})
    shapes.update(head_shapes("head", d, cfg.head_hidden, cfg.num_classes, cfg.head_layers))
    return shapes


def head_shapes(prefix: str, d_in: int, hidden: int, k: int, layers: int) -> dict[str, tuple]:
    shapes = {}
    width = d_in
    for j in range(layers - 1):
        # no bias before a batch-statistics norm; it would be subtracted out
        shapes.update({f"{prefix}.{j}.w": (width, hidden), f"{prefix}.{j}.bn.g": (hidden,), f"{prefix}.{j}.bn.b": (hidden,)})
        width = hidden
    shapes.update({f"{prefix}.{layers - 1}.w": (width, k), f"{prefix}.{layers - 1}.b": (k,)})
    return shapes


def _fill(rng: np.random.Generator, shapes: dict[str, tuple], dtype) -> dict[str, np.ndarray]:
    out = {}
    for name, shape in shapes.items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            arr = _trunc_normal(rng, shape)
        out[name] = arr.astype(dtype)
    return out


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Fresh (params, buffers); deterministic per seed."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    params = _fill(rng, param_shapes(cfg), dtype)
    params["pos_embed"] = sincos_pos_embed(cfg.grid, cfg.embed_dim, cfg.pooling_mode == "class_token").astype(dtype)
    params["dec.pos_embed"] = sincos_pos_embed(cfg.grid, cfg.decoder_dim).astype(dtype)
    buffers = head_buffers("head", cfg.head_hidden, cfg.head_layers, dtype)
    return params, buffers


def head_buffers(prefix: str, hidden: int, layers: int, dtype) -> dict[str, np.ndarray]:
    buffers = {}
    for j in range(layers - 1):
        buffers[f"{prefix}.{j}.bn.mean"] = np.zeros(hidden, dtype=dtype)
        buffers[f"{prefix}.{j}.bn.var"] = np.ones(hidden, dtype=dtype)
    return buffers


def count_params(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for k, v in params.items() if k not in FROZEN))


def bind(graph: Graph, params: dict[str, np.ndarray], frozen=()) -> dict[str, Tensor]:
    return graph.bind(params, frozen=tuple(FROZEN) + tuple(frozen))


# ---------------------------------------------------------------- blocks

def _attn(P: dict[str, Tensor], pre: str, x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    dh = d // heads

    def split(t):
        return dc.transpose(dc.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    q = split(dc.linear(x, P[f"{pre}.q.w"], P[f"{pre}.q.b"]))
    k = split(dc.linear(x, P[f"{pre}.k.w"]))
    v = split(dc.linear(x, P[f"{pre}.v.w"], P[f"{pre}.v.b"]))
    o = dc.reshape(dc.transpose(dc.attention(q, k, v), (0, 2, 1, 3)), (b, n, d))
    return dc.linear(o, P[f"{pre}.proj.w"], P[f"{pre}.proj.b"])


def block(P: dict[str, Tensor], pre: str, x: Tensor, heads: int) -> Tensor:
    """Pre-norm transformer block."""
    h = dc.layer_norm(x, P[f"{pre}.norm1.g"], P[f"{pre}.norm1.b"])
    x = x + _attn(P, f"{pre}.attn", h, heads)
    h = dc.layer_norm(x, P[f"{pre}.norm2.g"], P[f"{pre}.norm2.b"])
    h = dc.gelu(dc.linear(h, P[f"{pre}.mlp.fc1.w"], P[f"{pre}.mlp.fc1.b"]))
    return x + dc.linear(h, P[f"{pre}.mlp.fc2.w"], P[f"{pre}.mlp.fc2.b"])


# ---------------------------------------------------------------- forward

def encode_visible(P: dict[str, Tensor], cfg: ModelConfig, visible, visible_idx: np.ndarray):
    """Encode the visible patches only.

    Returns ``(q_v, cls_feature)``; ``q_v`` is [B, V, d] in ``visible_idx``
    order and ``cls_feature`` is None unless pooling_mode is class_token.
    """
    visible_idx = np.asarray(visible_idx)
    vd = visible.data if isinstance(visible, Tensor) else np.asarray(visible)
    if vd.ndim != 3 or visible_idx.shape != vd.shape[:2]:
        raise ContractError(f"visible patches {vd.shape} do not match plan indices {visible_idx.shape}")
    b, v, _ = vd.shape
    use_cls = cfg.pooling_mode == "class_token"
    pos = P["pos_embed"].data
    x = dc.linear(visible, P["patch_embed.w"], P["patch_embed.b"])
    x = x + pos[visible_idx + (1 if use_cls else 0)]
    if use_cls:
        if "cls_token" not in P:
            raise ConfigError("class_token mode but no cls_token parameter")
        c = dc.tile_rows(P["cls_token"], b, 1) + pos[:1]
        x = dc.concat([c, x], axis=1)
    for i in range(cfg.depth):
        x = block(P, f"enc.{i}", x, cfg.num_heads)
    x = dc.layer_norm(x, P["enc.norm.g"], P["enc.norm.b"])
    if not use_cls:
        return x, None
    return dc.take(x, np.arange(1, v + 1), axis=1), dc.take(x, 0, axis=1)


def encode_full(P: dict[str, Tensor], cfg: ModelConfig, patches):
    """All-patch forward (same weights and code path as the all-visible plan).

    Returns ``(features [B, N, d], pooled [B, d])`` with mean pooling.
    """
    pd = patches.data if isinstance(patches, Tensor) else np.asarray(patches)
    b, n, _ = pd.shape
    idx = np.broadcast_to(np.arange(n), (b, n))
    feats, _ = encode_visible(P, cfg, patches, idx)
    return feats, dc.mean(feats, axis=1)


def decode_reconstruct(P: dict[str, Tensor], cfg: ModelConfig, q_v: Tensor, restore: np.ndarray | None) -> Tensor:
    """Pad with the shared mask token, unshuffle, decode; returns [B, N, P*P*C]."""
    if restore is None:
        raise ContractError("decoder needs the plan's restore permutation")
    restore = np.asarray(restore)
    b, v, _ = q_v.shape
    n = restore.shape[1]
    if restore.shape[0] != b or n != cfg.num_patches or v > n:
        raise ContractError(f"restore {restore.shape} does not fit q_v {q_v.shape}")
    x = dc.linear(q_v, P["dec.embed.w"], P["dec.embed.b"])
    if n > v:
        x = dc.concat([x, dc.tile_rows(P["mask_token"], b, n - v)], axis=1)
    x = dc.gather_rows(x, restore)
    x = x + P["dec.pos_embed"].data
    for i in range(cfg.decoder_depth):
        x = block(P, f"dec.{i}", x, cfg.decoder_heads)
    x = dc.layer_norm(x, P["dec.norm.g"], P["dec.norm.b"])
    return dc.linear(x, P["dec.pred.w"], P["dec.pred.b"])


def mlp_head(P: dict[str, Tensor], buffers: dict[str, np.ndarray], prefix: str, layers: int, x: Tensor, train: bool) -> Tensor:
    """Linear layers with batch-statistics normalization and ReLU in between."""
    for j in range(layers - 1):
        x = dc.linear(x, P[f"{prefix}.{j}.w"])
        x = _bn(P, buffers, f"{prefix}.{j}.bn", x, train, affine=True)
        x = dc.relu(x)
    return dc.linear(x, P[f"{prefix}.{layers - 1}.w"], P[f"{prefix}.{layers - 1}.b"])


def _bn(P, buffers, key: str, x: Tensor, train: bool, affine: bool) -> Tensor:
    running = {"mean": buffers[f"{key}.mean"], "var": buffers[f"{key}.var"]}
    gamma = P[f"{key}.g"] if affine else None
    beta = P[f"{key}.b"] if affine else None
    out = dc.batch_norm(x, gamma, beta, running=running, train=train)
    if train:
        buffers[f"{key}.mean"] = running["mean"]
        buffers[f"{key}.var"] = running["var"]
    return out


def classify_pooled(
    P: dict[str, Tensor],
    buffers: dict[str, np.ndarray],
    cfg: ModelConfig,
    q_v: Tensor,
    cls_feature: Tensor | None = None,
    train: bool = True,
) -> Tensor:
    """Pre-training classification branch; returns raw (untempered) logits."""
    if cfg.pooling_mode == "class_token":
        if cls_feature is None:
            raise ConfigError("class_token pooling needs the class-token feature")
        pooled = cls_feature
    else:
        pooled = dc.mean(q_v, axis=1)
    return mlp_head(P, buffers, "head", cfg.head_layers, pooled, train)


# ---------------------------------------------------------------- task heads

def init_task_head(kind: str, cfg: ModelConfig, num_classes: int, seed: int, dtype=np.float32):
    """Fresh head for transfer: ``finetune`` (linear) or ``linprobe``
    (non-affine batch-statistics normalization, then linear)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    d = cfg.embed_dim
    if kind == "finetune":
        return _fill(rng, {"ft_head.w": (d, num_classes), "ft_head.b": (num_classes,)}, dtype), {}
    if kind == "linprobe":
        params = _fill(rng, {"lin_head.w": (d, num_classes), "lin_head.b": (num_classes,)}, dtype)
        return params, {"lin_head.bn.mean": np.zeros(d, dtype=dtype), "lin_head.bn.var": np.ones(d, dtype=dtype)}
    raise ValueError(f"unknown head kind {kind!r}")


def task_logits(P, buffers, kind: str, pooled: Tensor, train: bool) -> Tensor:
    if kind == "finetune":
        return dc.linear(pooled, P["ft_head.w"], P["ft_head.b"])
    x = _bn(P, buffers, "lin_head.bn", pooled, train, affine=False)
    return dc.linear(x, P["lin_head.w"], P["lin_head.b"])


def encoder_names(params: dict[str, np.ndarray]) -> list[str]:
    return [k for k in params if k.startswith(("patch_embed.", "enc.")) or k in ("cls_token", "pos_embed")]
