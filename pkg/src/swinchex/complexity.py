"""Attention cost formulas and an instrumented multiply-accumulate count.

Only the four ``C x C`` projections and the two attention products are
counted; softmax, scaling, masking and residual adds are not.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .attention import MhaParams, window_mha
from .tensor import ShapeError, Tensor, count_macs, no_grad, reshape
from .windowing import window_partition


@dataclass(frozen=True)
class ComplexityQuery:
    h: int
    w: int
    C: int
    M: int | None = None

    def __post_init__(self):
        if min(self.h, self.w, self.C) < 1 or (self.M is not None and self.M < 1):
            raise ValueError(f"complexity query needs positive sizes: {self}")


def omega_msa(q: ComplexityQuery) -> int:
    """Global attention: ``4 hw C^2 + 2 (hw)^2 C``."""
    hw = q.h * q.w
    return 4 * hw * q.C ** 2 + 2 * hw ** 2 * q.C


def omega_wmsa(q: ComplexityQuery) -> int:
    """Window attention: ``4 hw C^2 + 2 M^2 hw C``."""
    if q.M is None or q.h % q.M or q.w % q.M:
        raise ShapeError(f"{q.h}x{q.w} grid not divisible by window {q.M}")
    hw = q.h * q.w
    return 4 * hw * q.C ** 2 + 2 * q.M ** 2 * hw * q.C


def measure_attention_macs(h: int, w: int, C: int, M: int | None = None,
                           mode: str = "windowed", num_heads: int = 1, seed: int = 0) -> int:
    """Run one attention layer on random data and return its counted MACs."""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((h, w, C)))
    params = MhaParams(*(Tensor(rng.standard_normal((C, C))) for _ in range(4)), num_heads=num_heads)
    if mode == "windowed":
        if M is None or h % M or w % M:
            raise ShapeError(f"{h}x{w} grid not divisible by window {M}")
        tokens = window_partition(x, M)
    elif mode == "global":
        tokens = reshape(x, (1, h * w, C))
    else:
        raise ValueError(f"mode must be 'windowed' or 'global', got {mode!r}")
    with no_grad(), count_macs() as counter:
        window_mha(tokens, params)
    return counter[0]


CSV_COLUMNS = ("h", "w", "C", "M", "omega_msa", "omega_wmsa", "measured_global", "measured_windowed")


def complexity_rows(sizes, channels, windows, measure: bool = True) -> list[dict]:
    """One row per valid ``(size, C, M)`` combination, square grids only."""
    rows = []
    for n in sizes:
        for c in channels:
            for m in windows:
                if n % m:
                    continue
                q = ComplexityQuery(n, n, c, m)
                rows.append({
                    "h": n, "w": n, "C": c, "M": m,
                    "omega_msa": omega_msa(q),
                    "omega_wmsa": omega_wmsa(q),
                    "measured_global": measure_attention_macs(n, n, c, mode="global") if measure else "",
                    "measured_windowed": measure_attention_macs(n, n, c, m) if measure else "",
                })
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
