"""Tiny ViT / CaiT / XCiT building blocks on top of :mod:`advit.autodiff`.

Tokens are laid out as (batch, tokens, features); images as NHWC. Linear
layers use the row-vector convention ``x @ W + b`` with ``W`` of shape
(d_in, d_out). Parameters live in a flat ``dict[str, np.ndarray]`` with
dotted names so they serialize directly into checkpoints.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np
from scipy.stats import truncnorm

from . import autodiff as ad
from .autodiff import Tensor

BLOCK_KINDS = ("vit", "cait", "xcit")
LN_EPS = 1e-6


class ConfigError(ValueError):
    pass


def default_layerscale_init(block_kind: str, depth: int) -> float | None:
    """LayerScale init per depth: 1.0 for 12-deep XCiT, else 0.1 / 1e-5 / 1e-6."""
    if block_kind == "vit":
        return None
    if block_kind == "xcit" and depth == 12:
        return 1.0
    if depth <= 18:
        return 0.1
    if depth <= 24:
        return 1e-5
    return 1e-6


@dataclass(frozen=True)
class ModelConfig:
    block_kind: str = "xcit"
    depth: int = 2
    class_attention_depth: int = 2
    d_model: int = 32
    heads: int = 4
    patch_size: int = 2
    image_size: tuple[int, int, int] = (8, 8, 3)
    patch_embed: str = "conv"
    conv_strides: tuple[int, ...] = (1, 2)
    pos_encoding: str = "sinusoidal"
    layerscale_init: float | None = 1.0
    mlp_ratio: float = 2.0
    num_classes: int = 2
    init_std: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "conv_strides", tuple(int(v) for v in self.conv_strides))
        self.validate()

    def validate(self):
        if self.block_kind not in BLOCK_KINDS:
            raise ConfigError(f"block_kind must be one of {BLOCK_KINDS}, got {self.block_kind!r}")
        if self.depth < 1:
            raise ConfigError("depth must be positive")
        if self.d_model < 1 or self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.patch_embed not in ("linear", "conv"):
            raise ConfigError(f"unknown patch_embed {self.patch_embed!r}")
        if self.pos_encoding not in ("learned", "sinusoidal"):
            raise ConfigError(f"unknown pos_encoding {self.pos_encoding!r}")
        if (self.layerscale_init is None) != (self.block_kind == "vit"):
            raise ConfigError("layerscale_init is required for cait/xcit blocks and forbidden for vit blocks")
        if self.block_kind != "vit" and self.class_attention_depth < 1:
            raise ConfigError("class_attention_depth must be positive for cait/xcit")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        H, W, _ = self.image_size
        P = self.effective_patch
        if P < 1 or H % P or W % P:
            raise ConfigError(f"image {H}x{W} not divisible by effective patch size {P}")
        if self.patch_embed == "conv" and not self.conv_strides:
            raise ConfigError("conv patch embedding needs at least one convolution")

    @property
    def effective_patch(self) -> int:
        if self.patch_embed == "conv":
            return int(np.prod(self.conv_strides)) if self.conv_strides else 0
        return self.patch_size

    @property
    def grid(self) -> tuple[int, int]:
        H, W, _ = self.image_size
        return H // self.effective_patch, W // self.effective_patch

    @property
    def num_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def hidden_dim(self) -> int:
        return int(round(self.d_model * self.mlp_ratio))

    def conv_channels(self) -> list[int]:
        """Output channels of each conv in the stem: d/2^(n-1), ..., d/2, d."""
        n = len(self.conv_strides)
        return [max(1, self.d_model // 2 ** (n - 1 - i)) for i in range(n)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))


def tiny_config(block_kind: str = "xcit", **overrides) -> ModelConfig:
    """Desk-scale config: d_model=32, depth=2, 8x8x3 inputs."""
    base = dict(block_kind=block_kind, depth=2, d_model=32, heads=4, image_size=(8, 8, 3))
    if block_kind == "vit":
        base.update(patch_embed="linear", patch_size=2, pos_encoding="learned", layerscale_init=None)
    elif block_kind == "cait":
        base.update(patch_embed="linear", patch_size=2, pos_encoding="learned", layerscale_init=0.1)
    else:
        base.update(patch_embed="conv", conv_strides=(1, 2), pos_encoding="sinusoidal", layerscale_init=1.0)
    base.update(overrides)
    return ModelConfig(**base)


# ------------------------------------------------------------------ params


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


def _linear_params(p, rng, name, d_in, d_out, std):
    p[f"{name}.weight"] = _trunc_normal(rng, (d_in, d_out), std)
    p[f"{name}.bias"] = np.zeros(d_out)


def _norm_params(p, name, d):
    p[f"{name}.weight"] = np.ones(d)
    p[f"{name}.bias"] = np.zeros(d)


def _block_params(p, rng, prefix, cfg: ModelConfig, kind: str):
    d, std = cfg.d_model, cfg.init_std
    _norm_params(p, f"{prefix}.norm1", d)
    for proj in ("q", "k", "v", "o"):
        _linear_params(p, rng, f"{prefix}.attn.{proj}", d, d, std)
    _norm_params(p, f"{prefix}.norm2", d)
    _linear_params(p, rng, f"{prefix}.mlp.fc1", d, cfg.hidden_dim, std)
    _linear_params(p, rng, f"{prefix}.mlp.fc2", cfg.hidden_dim, d, std)
    if cfg.layerscale_init is not None:
        p[f"{prefix}.gamma1"] = np.full(d, cfg.layerscale_init)
        p[f"{prefix}.gamma2"] = np.full(d, cfg.layerscale_init)
    if kind == "xca":
        # tau = exp(s), one temperature per head, tau = 1 at init
        p[f"{prefix}.attn.log_temperature"] = np.zeros(cfg.heads)
        _norm_params(p, f"{prefix}.norm3", d)
        p[f"{prefix}.lpi.conv1"] = _trunc_normal(rng, (3, 3, d), std)
        p[f"{prefix}.lpi.conv1_bias"] = np.zeros(d)
        _norm_params(p, f"{prefix}.lpi.norm", d)
        p[f"{prefix}.lpi.conv2"] = _trunc_normal(rng, (3, 3, d), std)
        p[f"{prefix}.lpi.conv2_bias"] = np.zeros(d)
        p[f"{prefix}.gamma3"] = np.full(d, cfg.layerscale_init)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Truncated-normal projections, zero biases, unit norm scales."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    H, W, C = cfg.image_size
    d, std = cfg.d_model, cfg.init_std
    if cfg.patch_embed == "linear":
        _linear_params(p, rng, "patch_embed.proj", cfg.patch_size**2 * C, d, std)
    else:
        c_in = C
        for i, c_out in enumerate(cfg.conv_channels()):
            p[f"patch_embed.conv{i}.weight"] = _trunc_normal(rng, (3, 3, c_in, c_out), std)
            p[f"patch_embed.conv{i}.bias"] = np.zeros(c_out)
            c_in = c_out
    if cfg.pos_encoding == "learned":
        p["pos_embed"] = _trunc_normal(rng, (cfg.num_tokens, d), std)
    p["cls_token"] = _trunc_normal(rng, (1, 1, d), std)
    kind = "xca" if cfg.block_kind == "xcit" else "sa"
    for i in range(cfg.depth):
        _block_params(p, rng, f"blocks.{i}", cfg, kind)
    if cfg.block_kind != "vit":
        for i in range(cfg.class_attention_depth):
            _block_params(p, rng, f"cls_blocks.{i}", cfg, "ca")
    _norm_params(p, "norm", d)
    _linear_params(p, rng, "head", d, cfg.num_classes, std)
    return p


def expected_param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {k: v.shape for k, v in init_params(cfg, 0).items()}


# ---------------------------------------------------------------- primitives


def linear(x: Tensor, params: Mapping[str, Tensor], name: str) -> Tensor:
    return ad.matmul(x, params[f"{name}.weight"]) + params[f"{name}.bias"]


def norm(x: Tensor, params: Mapping[str, Tensor], name: str, axes=-1) -> Tensor:
    return ad.layer_norm(x, axes, eps=LN_EPS) * params[f"{name}.weight"] + params[f"{name}.bias"]


def split_heads(x: Tensor, heads: int) -> Tensor:
    B, N, d = x.shape
    if d % heads:
        raise ConfigError(f"d_model={d} not divisible by heads={heads}")
    return ad.transpose(x.reshape(B, N, heads, d // heads), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    B, h, N, dk = x.shape
    return ad.transpose(x, (0, 2, 1, 3)).reshape(B, N, h * dk)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, d_k: int | None = None) -> Tensor:
    """Softmax(Q K^T / sqrt(d_k)) V with the softmax over the key axis."""
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ad.ShapeError("attention", -1, f"Q {q.shape}, K {k.shape}, V {v.shape}")
    d_k = q.shape[-1] if d_k is None else d_k
    scores = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d_k))
    return ad.matmul(ad.softmax(scores, -1), v)


def multi_head_self_attention(x: Tensor, params: Mapping[str, Tensor], heads: int, prefix: str = "attn") -> Tensor:
    q = split_heads(linear(x, params, f"{prefix}.q"), heads)
    k = split_heads(linear(x, params, f"{prefix}.k"), heads)
    v = split_heads(linear(x, params, f"{prefix}.v"), heads)
    out = scaled_dot_product_attention(q, k, v)
    return linear(merge_heads(out), params, f"{prefix}.o")


def xca_attention_matrix(q: Tensor, k: Tensor, temperature: Tensor) -> Tensor:
    """Per-head (d_h x d_h) map Softmax(K^T Q / tau), softmax over key features.

    ``q`` and ``k`` are (B, h, N, d_h); each feature column is L2-normalized
    over the token axis. ``temperature`` has shape (h,).
    """
    qn = ad.l2_normalize(q, axis=-2)
    kn = ad.l2_normalize(k, axis=-2)
    logits = ad.matmul(ad.swapaxes(kn, -1, -2), qn)
    inv_tau = ad.exp(ad.neg(ad.log(temperature))).reshape(1, -1, 1, 1)
    return ad.softmax(logits * inv_tau, axis=-2)


def xc_attention(x: Tensor, params: Mapping[str, Tensor], heads: int, prefix: str = "attn") -> Tensor:
    """Cross-covariance attention: V Softmax(K^T Q / tau), linear in token count."""
    if x.shape[1] < 1:
        raise ConfigError("xc_attention needs at least one token")
    q = split_heads(linear(x, params, f"{prefix}.q"), heads)
    k = split_heads(linear(x, params, f"{prefix}.k"), heads)
    v = split_heads(linear(x, params, f"{prefix}.v"), heads)
    tau = ad.exp(params[f"{prefix}.log_temperature"])
    attn = xca_attention_matrix(q, k, tau)
    out = ad.matmul(v, attn)
    return linear(merge_heads(out), params, f"{prefix}.o")


def class_attention(z: Tensor, params: Mapping[str, Tensor], heads: int, prefix: str = "attn") -> Tensor:
    """Only the class token (row 0) queries; the patch rows are returned untouched."""
    B, N, d = z.shape
    if N < 2:
        raise ConfigError("class attention needs a class token and at least one patch")
    cls = z[:, 0:1, :]
    q = split_heads(linear(cls, params, f"{prefix}.q"), heads)
    k = split_heads(linear(z, params, f"{prefix}.k"), heads)
    v = split_heads(linear(z, params, f"{prefix}.v"), heads)
    out = scaled_dot_product_attention(q, k, v, d // heads)
    new_cls = linear(merge_heads(out), params, f"{prefix}.o")
    return ad.concat([new_cls, z[:, 1:, :]], axis=1)


def mlp(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    return linear(ad.gelu(linear(x, params, f"{prefix}.fc1")), params, f"{prefix}.fc2")


def _scaled(branch: Tensor, params: Mapping[str, Tensor], name: str) -> Tensor:
    return branch * params[name] if name in params else branch


def lpi(x: Tensor, params: Mapping[str, Tensor], grid: tuple[int, int], prefix: str) -> Tensor:
    """Local patch interaction: dwconv3x3 -> GELU -> norm -> dwconv3x3 on the token grid."""
    B, N, d = x.shape
    gh, gw = grid
    if gh * gw != N:
        raise ConfigError(f"token count {N} does not match grid {grid}")
    g = x.reshape(B, gh, gw, d)
    g = ad.depthwise_conv2d(g, params[f"{prefix}.conv1"]) + params[f"{prefix}.conv1_bias"]
    g = ad.gelu(g)
    # per-sample, per-channel normalization over the token grid
    g = norm(g, params, f"{prefix}.norm", axes=(1, 2))
    g = ad.depthwise_conv2d(g, params[f"{prefix}.conv2"]) + params[f"{prefix}.conv2_bias"]
    return g.reshape(B, N, d)


def transformer_block(
    x: Tensor,
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
    prefix: str = "",
    kind: str | None = None,
) -> Tensor:
    """Pre-norm residual block; ``kind`` is "sa", "xca" or "ca".

    Class-attention blocks expect ``x`` = [class; patches] and only update the
    class row; the MLP is applied to the class token alone.
    """
    kind = kind or ("xca" if cfg.block_kind == "xcit" else "sa")
    pre = f"{prefix}." if prefix else ""
    if cfg.layerscale_init is not None and f"{pre}gamma1" not in params:
        raise ConfigError(f"missing LayerScale parameters for block {prefix!r}")
    sub = {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)} if pre else params
    if kind == "ca":
        z = class_attention(norm(x, sub, "norm1"), sub, cfg.heads)
        cls = x[:, 0:1, :] + _scaled(z[:, 0:1, :], sub, "gamma1")
        cls = cls + _scaled(mlp(norm(cls, sub, "norm2"), sub, "mlp"), sub, "gamma2")
        return ad.concat([cls, x[:, 1:, :]], axis=1)
    if kind == "xca":
        x = x + _scaled(xc_attention(norm(x, sub, "norm1"), sub, cfg.heads), sub, "gamma1")
        x = x + _scaled(lpi(norm(x, sub, "norm3"), sub, cfg.grid, "lpi"), sub, "gamma3")
    else:
        x = x + _scaled(multi_head_self_attention(norm(x, sub, "norm1"), sub, cfg.heads), sub, "gamma1")
    return x + _scaled(mlp(norm(x, sub, "norm2"), sub, "mlp"), sub, "gamma2")


# ------------------------------------------------------------- embeddings


def sinusoidal_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def positional_encoding(n: int, d_model: int, mode: str, params: Mapping[str, Tensor] | None = None) -> Tensor:
    if mode == "learned":
        if params is None or "pos_embed" not in params:
            raise ConfigError("learned positional encoding needs a 'pos_embed' parameter")
        return ad.as_tensor(params["pos_embed"])
    if mode == "sinusoidal":
        return Tensor(sinusoidal_table(n, d_model))
    raise ConfigError(f"unknown positional encoding mode {mode!r}")


def patch_embed(image: Tensor, cfg: ModelConfig, params: Mapping[str, Tensor]) -> Tensor:
    """(B, H, W, C) images to (B, N, d_model) tokens; grid is row-major."""
    image = ad.as_tensor(image)
    if image.ndim == 3:
        image = image.reshape(1, *image.shape)
    B, H, W, C = image.shape
    if (H, W, C) != tuple(cfg.image_size):
        raise ConfigError(f"image shape {(H, W, C)} does not match config {cfg.image_size}")
    if cfg.patch_embed == "linear":
        P = cfg.patch_size
        if H % P or W % P:
            raise ConfigError(f"{H}x{W} image not divisible by patch size {P}")
        x = image.reshape(B, H // P, P, W // P, P, C)
        x = ad.transpose(x, (0, 1, 3, 2, 4, 5)).reshape(B, (H // P) * (W // P), P * P * C)
        return linear(x, params, "patch_embed.proj")
    x = image
    n = len(cfg.conv_strides)
    for i, s in enumerate(cfg.conv_strides):
        x = ad.conv2d(x, params[f"patch_embed.conv{i}.weight"], stride=s) + params[f"patch_embed.conv{i}.bias"]
        if i < n - 1:
            x = ad.gelu(x)
    _, gh, gw, d = x.shape
    if (gh, gw) != cfg.grid:
        raise ConfigError(f"conv stem produced a {gh}x{gw} grid, expected {cfg.grid}")
    return x.reshape(B, gh * gw, d)


# ----------------------------------------------------------------- models


def _wrap(params: Mapping[str, np.ndarray | Tensor], requires_grad: bool) -> dict[str, Tensor]:
    return {
        k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=requires_grad, name=k)
        for k, v in params.items()
    }


class BlockError(RuntimeError):
    def __init__(self, block: str, cause: Exception):
        self.block = block
        self.cause = cause
        super().__init__(f"{block}: {cause}")


def _run_block(x, p, cfg, prefix, kind):
    try:
        return transformer_block(x, p, cfg, prefix, kind)
    except (ad.GraphError, ConfigError) as exc:
        raise BlockError(prefix, exc) from exc


def forward_model(cfg: ModelConfig, params: Mapping[str, np.ndarray | Tensor], image) -> Tensor:
    """Images (B, H, W, C) or (H, W, C) in [0, 1] to logits (B, num_classes)."""
    p = _wrap(params, False)
    x = patch_embed(image, cfg, p)
    B = x.shape[0]
    x = x + positional_encoding(cfg.num_tokens, cfg.d_model, cfg.pos_encoding, p)
    cls = p["cls_token"] * Tensor(np.ones((B, 1, 1)))
    if cfg.block_kind == "vit":
        x = ad.concat([cls, x], axis=1)
        for i in range(cfg.depth):
            x = _run_block(x, p, cfg, f"blocks.{i}", "sa")
    else:
        kind = "xca" if cfg.block_kind == "xcit" else "sa"
        for i in range(cfg.depth):
            x = _run_block(x, p, cfg, f"blocks.{i}", kind)
        x = ad.concat([cls, x], axis=1)
        for i in range(cfg.class_attention_depth):
            x = _run_block(x, p, cfg, f"cls_blocks.{i}", "ca")
    x = norm(x[:, 0, :], p, "norm")
    return linear(x, p, "head")


class Model:
    """Callable wrapper binding a config to a parameter dict.

    ``model(x)`` treats the parameters as constants. To differentiate with
    respect to them, create leaves once with :meth:`leaves` and pass them to
    every forward call that should share them.
    """

    def __init__(self, config: ModelConfig, params: Mapping[str, np.ndarray] | None = None, seed: int = 0):
        self.config = config
        self.params = dict(params) if params is not None else init_params(config, seed)

    def leaves(self) -> dict[str, Tensor]:
        return _wrap(self.params, True)

    def __call__(self, x, leaves: Mapping[str, Tensor] | None = None) -> Tensor:
        return forward_model(self.config, leaves if leaves is not None else self.params, x)

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [self(x[i : i + batch_size]).data for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.num_classes))

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        if len(x) == 0:
            return float("nan")
        return float((self.predict(x).argmax(1) == np.asarray(y)).mean())


def count_params(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


__all__ = [
    "ModelConfig",
    "Model",
    "init_params",
    "tiny_config",
    "default_layerscale_init",
    "scaled_dot_product_attention",
    "multi_head_self_attention",
    "xc_attention",
    "xca_attention_matrix",
    "class_attention",
    "transformer_block",
    "positional_encoding",
    "sinusoidal_table",
    "patch_embed",
    "forward_model",
]
