"""Hierarchical shifted-window transformer with per-pathology MLP heads."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .data import CLASS_NAMES  # noqa: F401  re-exported
from .attention import MhaParams, shifted_window_msa
from .tensor import (
    ParamSet, ShapeError, Tensor, add, avg_pool2d, clip, concat, gelu, layer_norm,
    linear, log, mean, mul, neg, relu, reshape, sigmoid, transpose,
)

HEAD_VARIANTS = ("headless", "mlp1", "mlp2", "mlp3")
DEFAULT_HEAD_WIDTHS = {"headless": (), "mlp1": (48,), "mlp2": (384, 48), "mlp3": (384, 48, 48)}
ACTIVATIONS = {"gelu": gelu, "relu": relu}


@dataclass
class ModelConfig:
    image_size: int = 224
    patch_size: int = 4
    in_chans: int = 3
    embed_dim: int = 192
    depths: tuple[int, ...] = (2, 2, 2, 2)
    num_heads: tuple[int, ...] = (6, 12, 24, 48)
    window_size: int = 7
    head_variant: str = "mlp3"
    head_widths: tuple[int, ...] | None = None
    num_classes: int = 14
    mlp_ratio: float = 4.0
    qkv_bias: bool = False
    relative_position_bias: bool = False
    block_activation: str = "gelu"
    head_activation: str = "relu"
    ln_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.num_heads = tuple(int(h) for h in self.num_heads)
        if self.head_widths is None:
            self.head_widths = DEFAULT_HEAD_WIDTHS.get(self.head_variant, ())
        self.head_widths = tuple(int(w) for w in self.head_widths)

    @classmethod
    def desk(cls, **overrides) -> ModelConfig:
        """Small configuration used for tests and synthetic experiments."""
        base = dict(image_size=32, patch_size=2, embed_dim=16, depths=(2, 2, 2, 2),
                    num_heads=(2, 4, 8, 16), window_size=4)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> ModelConfig:
        if "head_variant" in changes and "head_widths" not in changes:
            changes["head_widths"] = None
        return replace(self, **changes)

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    def stage_resolution(self, stage: int) -> int:
        return self.image_size // self.patch_size // 2 ** stage

    def stage_dim(self, stage: int) -> int:
        return self.embed_dim * 2 ** stage

    def stage_window(self, stage: int) -> tuple[int, int]:
        """(window, shift) for a stage; maps no larger than the window use one unshifted window."""
        res = self.stage_resolution(stage)
        if res <= self.window_size:
            return res, 0
        return self.window_size, self.window_size // 2

    @property
    def out_resolution(self) -> int:
        return self.stage_resolution(self.num_stages - 1)

    @property
    def out_dim(self) -> int:
        return self.stage_dim(self.num_stages - 1)

    def validate(self) -> None:
        if self.head_variant not in HEAD_VARIANTS:
            raise ValueError(f"head_variant must be one of {HEAD_VARIANTS}, got {self.head_variant!r}")
        if self.head_variant == "headless" and self.head_widths:
            raise ValueError("headless variant takes no head_widths")
        if self.head_variant != "headless" and len(self.head_widths) != int(self.head_variant[-1]):
            raise ValueError(f"{self.head_variant} needs {self.head_variant[-1]} head widths, got {self.head_widths}")
        if self.block_activation not in ACTIVATIONS or self.head_activation not in ACTIVATIONS:
            raise ValueError(f"activations must be among {sorted(ACTIVATIONS)}")
        if self.relative_position_bias:
            raise ValueError("relative_position_bias is reserved and not implemented")
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        if not self.depths or len(self.depths) != len(self.num_heads):
            raise ValueError("depths and num_heads must be non-empty and of equal length")
        if any(d < 2 or d % 2 for d in self.depths):
            raise ValueError(f"stage depths must be positive and even, got {self.depths}")
        for s in range(self.num_stages):
            res = self.stage_resolution(s)
            if res < 1 or (s < self.num_stages - 1 and res % 2):
                raise ValueError(f"stage {s} resolution {res} cannot be merged")
            win, _ = self.stage_window(s)
            if res % win:
                raise ValueError(f"stage {s} resolution {res} not divisible by window {win}")
            if self.stage_dim(s) % self.num_heads[s]:
                raise ValueError(f"stage {s} width {self.stage_dim(s)} not divisible by {self.num_heads[s]} heads")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class SwinModel:
    config: ModelConfig
    params: ParamSet = field(default_factory=ParamSet)

    def stage_block_params(self, stage: int, block: int) -> dict[str, Tensor]:
        return self.params.prefixed(f"stages.{stage}.blocks.{block}.")

    def head_params(self, k: int) -> dict[str, Tensor]:
        return self.params.prefixed(f"heads.{k:02d}.")


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_model(config: ModelConfig, seed: int = 0) -> SwinModel:
    """Fresh parameters: truncated normal linears, zero biases, unit/zero norms."""
    config.validate()
    rng = np.random.default_rng(seed)
    ps = ParamSet()
    std = config.init_std

    def lin(path, n_in, n_out, bias=True):
        ps[f"{path}.weight"] = Tensor(_trunc_normal(rng, (n_in, n_out), std))
        if bias:
            ps[f"{path}.bias"] = Tensor(np.zeros(n_out))

    def norm(path, n):
        ps[f"{path}.weight"] = Tensor(np.ones(n))
        ps[f"{path}.bias"] = Tensor(np.zeros(n))

    lin("patch_embed", config.in_chans * config.patch_size ** 2, config.embed_dim)
    for s, depth in enumerate(config.depths):
        c = config.stage_dim(s)
        hidden = int(round(c * config.mlp_ratio))
        for b in range(depth):
            pre = f"stages.{s}.blocks.{b}"
            norm(f"{pre}.norm1", c)
            for proj in ("q", "k", "v", "proj"):
                lin(f"{pre}.attn.{proj}", c, c, bias=config.qkv_bias)
            norm(f"{pre}.norm2", c)
            lin(f"{pre}.mlp.fc1", c, hidden)
            lin(f"{pre}.mlp.fc2", hidden, c)
        if s < config.num_stages - 1:
            lin(f"stages.{s}.merge", 4 * c, 2 * c, bias=False)
    norm("norm", config.out_dim)
    if config.head_variant == "headless":
        lin("head", config.out_dim, config.num_classes)
    else:
        for k in range(config.num_classes):
            widths = (config.out_dim, *config.head_widths, 1)
            for i in range(len(widths) - 1):
                lin(f"heads.{k:02d}.fc{i}", widths[i], widths[i + 1])
    return SwinModel(config, ps)


def head_param_count(in_dim: int, widths) -> int:
    dims = (in_dim, *widths, 1)
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


# ---------------------------------------------------------------------------
# building blocks


def patch_embed(images: Tensor, weight: Tensor, bias: Tensor | None, patch_size: int) -> Tensor:
    """Flatten non-overlapping ``P x P x chans`` patches and project them linearly.

    ``images`` is ``(..., H, W, chans)``; the result is ``(..., H/P, W/P, C)``.
    """
    *lead, hh, ww, ch = images.shape
    p = patch_size
    if hh % p or ww % p:
        raise ShapeError(f"{hh}x{ww} image is not divisible by patch size {p}")
    if weight.shape[0] != p * p * ch:
        raise ShapeError(f"patch embedding expects {weight.shape[0]} inputs, patches have {p * p * ch}")
    k = len(lead)
    t = reshape(images, (*lead, hh // p, p, ww // p, p, ch))
    t = transpose(t, (*range(k), k, k + 2, k + 1, k + 3, k + 4))
    t = reshape(t, (*lead, hh // p, ww // p, p * p * ch))
    return linear(t, weight, bias)


def patch_merge(z: Tensor, weight: Tensor) -> Tensor:
    """Concatenate each 2x2 token group (row-major within the group) and project 4C -> 2C."""
    *lead, h, w, c = z.shape
    if h % 2 or w % 2:
        raise ShapeError(f"patch merging needs an even resolution, got {h}x{w}")
    k = len(lead)
    t = reshape(z, (*lead, h // 2, 2, w // 2, 2, c))
    t = transpose(t, (*range(k), k, k + 2, k + 1, k + 3, k + 4))
    t = reshape(t, (*lead, h // 2, w // 2, 4 * c))
    return linear(t, weight)


def mlp(x: Tensor, p: dict[str, Tensor], activation: str = "gelu") -> Tensor:
    hidden = ACTIVATIONS[activation](linear(x, p["mlp.fc1.weight"], p["mlp.fc1.bias"]))
    return linear(hidden, p["mlp.fc2.weight"], p["mlp.fc2.bias"])


def swin_block(
    z: Tensor,
    p: dict[str, Tensor],
    num_heads: int,
    window: int,
    shift: int = 0,
    eps: float = 1e-5,
    activation: str = "gelu",
    capture: dict | None = None,
) -> Tensor:
    """One pre-norm block: (shifted) window attention then MLP, each with a residual."""
    x = layer_norm(z, p["norm1.weight"], p["norm1.bias"], eps)
    if capture is not None:
        capture["norm1"] = x
    attn_params = MhaParams.from_params(
        {k[len("attn."):]: v for k, v in p.items() if k.startswith("attn.")}, num_heads
    )
    z = add(z, shifted_window_msa(x, attn_params, window, shift))
    y = layer_norm(z, p["norm2.weight"], p["norm2.bias"], eps)
    return add(z, mlp(y, p, activation))


def swin_block_pair(
    z: Tensor,
    pair: tuple[dict[str, Tensor], dict[str, Tensor]],
    window: int,
    num_heads: int,
    eps: float = 1e-5,
    activation: str = "gelu",
) -> Tensor:
    """Regular-window block followed by a block shifted by ``window // 2``."""
    z = swin_block(z, pair[0], num_heads, window, 0, eps, activation)
    return swin_block(z, pair[1], num_heads, window, window // 2, eps, activation)


# ---------------------------------------------------------------------------
# full model


def backbone_forward(images: Tensor, model: SwinModel, capture: dict | None = None) -> Tensor:
    """``(B, H, W, 3) -> (B, hf, wf, Cf)``.

    If ``capture`` is given, the first-norm output of the last block is stored
    under ``capture["activation"]``.
    """
    cfg, ps = model.config, model.params
    z = patch_embed(images, ps["patch_embed.weight"], ps["patch_embed.bias"], cfg.patch_size)
    for s, depth in enumerate(cfg.depths):
        window, shift = cfg.stage_window(s)
        for b in range(depth):
            last = s == cfg.num_stages - 1 and b == depth - 1
            hook = {} if (capture is not None and last) else None
            z = swin_block(z, model.stage_block_params(s, b), cfg.num_heads[s], window,
                           shift if b % 2 else 0, cfg.ln_eps, cfg.block_activation, hook)
            if hook is not None:
                capture["activation"] = hook["norm1"]
        if s < cfg.num_stages - 1:
            z = patch_merge(z, ps[f"stages.{s}.merge.weight"])
    return z


def pool_features(features: Tensor, model: SwinModel) -> Tensor:
    """Final LayerNorm then average pooling over the whole ``hf x wf`` map -> ``(B, Cf)``."""
    ps = model.params
    x = layer_norm(features, ps["norm.weight"], ps["norm.bias"], model.config.ln_eps)
    *lead, hf, wf, cf = x.shape
    if hf != wf:
        raise ShapeError(f"pooling expects a square map, got {hf}x{wf}")
    return reshape(avg_pool2d(x, hf), (*lead, cf))


def head_logits(pooled: Tensor, model: SwinModel) -> Tensor:
    """Pre-sigmoid class scores ``(B, num_classes)``."""
    cfg, ps = model.config, model.params
    if cfg.head_variant == "headless":
        if "head.weight" not in ps:
            raise ValueError("headless variant requested but model has per-class heads")
        return linear(pooled, ps["head.weight"], ps["head.bias"])
    act = ACTIVATIONS[cfg.head_activation]
    n_layers = len(cfg.head_widths) + 1
    outs = []
    for k in range(cfg.num_classes):
        hp = model.head_params(k)
        if f"fc{n_layers - 1}.weight" not in hp or f"fc{n_layers}.weight" in hp:
            raise ValueError(f"head {k} parameters do not match variant {cfg.head_variant}")
        x = pooled
        for i in range(n_layers):
            x = linear(x, hp[f"fc{i}.weight"], hp[f"fc{i}.bias"])
            if i < n_layers - 1:
                x = act(x)
        outs.append(x)
    return concat(outs, axis=-1)


def head_forward(features: Tensor, model: SwinModel) -> Tensor:
    """Class probabilities ``(B, num_classes)`` from backbone features."""
    return sigmoid(head_logits(pool_features(features, model), model))


def forward_logits(images: Tensor, model: SwinModel, capture: dict | None = None) -> Tensor:
    return head_logits(pool_features(backbone_forward(images, model, capture), model), model)


def predict_proba(images: Tensor, model: SwinModel) -> Tensor:
    return sigmoid(forward_logits(images, model))


PROB_CLAMP = 1e-12


def bce_loss(probs: Tensor, labels: Tensor) -> Tensor:
    """Mean binary cross-entropy over batch and classes, with ``p`` clamped away from 0 and 1."""
    if probs.shape != labels.shape:
        raise ShapeError(f"bce_loss shape mismatch: probs {probs.shape} vs labels {labels.shape}")
    y = labels.data
    p = clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    one_minus = add(neg(p), 1.0)
    terms = add(mul(log(p), Tensor(y)), mul(log(one_minus), Tensor(1.0 - y)))
    return neg(mean(terms))


def resolution_cascade(config: ModelConfig) -> list[tuple[int, int]]:
    """``(resolution, channels)`` per stage."""
    return [(config.stage_resolution(s), config.stage_dim(s)) for s in range(config.num_stages)]

