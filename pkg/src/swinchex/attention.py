"""Scaled dot-product attention and its multi-head windowed form."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, add, linear, matmul, reshape, softmax, swapaxes, transpose
from .windowing import WindowGrid, build_shift_mask, cyclic_shift, window_partition, window_reverse


@dataclass
class MhaParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    num_heads: int
    bq: Tensor | None = None
    bk: Tensor | None = None
    bv: Tensor | None = None
    bo: Tensor | None = None

    def __post_init__(self):
        c = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (c, c):
                raise ShapeError(f"{name} must be {c}x{c}, got {getattr(self, name).shape}")
        if self.num_heads < 1 or c % self.num_heads:
            raise ShapeError(f"{c} channels cannot be split into {self.num_heads} heads")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    @classmethod
    def from_params(cls, params: dict[str, Tensor], num_heads: int) -> MhaParams:
        return cls(
            wq=params["q.weight"], wk=params["k.weight"], wv=params["v.weight"],
            wo=params["proj.weight"], num_heads=num_heads,
            bq=params.get("q.bias"), bk=params.get("k.bias"),
            bv=params.get("v.bias"), bo=params.get("proj.bias"),
        )


def scaled_attention(q: Tensor, k: Tensor, v: Tensor, mask=None, return_weights: bool = False):
    """softmax(q k^T / sqrt(d_k) + mask) v, batched over leading dims.

    ``mask`` is an additive array broadcastable to the ``(..., n, n)`` scores.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention dims disagree: Q {q.shape}, K {k.shape}, V {v.shape}")
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = add(scores, mask if isinstance(mask, Tensor) else Tensor(mask))
    weights = softmax(scores, axis=-1)
    out = matmul(weights, v)
    return (out, weights) if return_weights else out


def window_mha(tokens: Tensor, params: MhaParams, mask: np.ndarray | None = None) -> Tensor:
    """Multi-head self-attention inside each window.

    ``tokens`` is ``(..., nw, N, C)``; ``mask`` (optional) is ``(nw, N, N)`` and is
    shared across any leading batch dims and across heads.
    """
    *lead, nw, n, c = tokens.shape
    if c != params.dim:
        raise ShapeError(f"tokens carry {c} channels but attention expects {params.dim}")
    h, d = params.num_heads, params.head_dim
    k = len(lead)

    def heads(w, b):
        t = reshape(linear(tokens, w, b), (*lead, nw, n, h, d))
        return transpose(t, (*range(k), k, k + 2, k + 1, k + 3))  # (..., nw, h, n, d)

    q, kk, v = heads(params.wq, params.bq), heads(params.wk, params.bk), heads(params.wv, params.bv)
    if mask is not None:
        if mask.shape != (nw, n, n):
            raise ShapeError(f"mask shape {mask.shape} does not match ({nw}, {n}, {n})")
        mask = mask[:, None]
    out = scaled_attention(q, kk, v, mask)
    out = reshape(transpose(out, (*range(k), k, k + 2, k + 1, k + 3)), (*lead, nw, n, c))
    return linear(out, params.wo, params.bo)


def shifted_window_msa(x: Tensor, params: MhaParams, window: int, shift: int = 0) -> Tensor:
    """W-MSA (``shift == 0``) or masked SW-MSA over a ``(..., h, w, C)`` token map."""
    *_, h, w, _ = x.shape
    grid = WindowGrid(h, w, window, shift)
    if shift:
        x = cyclic_shift(x, shift, shift)
    out = window_mha(window_partition(x, window), params, build_shift_mask(grid) if shift else None)
    out = window_reverse(out, window, h, w)
    if shift:
        out = cyclic_shift(out, -shift, -shift)
    return out
