"""Self-checks: finite-difference gradients and brute-force oracles for the core kernels."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import MhaParams, scaled_attention, shifted_window_msa
from .complexity import ComplexityQuery, measure_attention_macs, omega_msa, omega_wmsa
from .model import ModelConfig, bce_loss, init_model, predict_proba
from .tensor import (
    Tensor, avg_pool2d, backward, clip, concat, exp, gelu, getitem, grad_check, layer_norm,
    linear, log, matmul, mean, mul, no_grad, reciprocal, record_kinks, relu, reshape, roll, sigmoid,
    softmax, swapaxes, transpose, tsum,
)
from .windowing import window_partition, window_reverse


@dataclass
class CheckResult:
    name: str
    value: float
    limit: float

    @property
    def ok(self) -> bool:
        return math.isfinite(self.value) and self.value <= self.limit

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: {self.value:.3e} (limit {self.limit:.0e})"


def _weighted(y: Tensor, seed: int) -> Tensor:
    # random projection so every output coordinate matters
    w = np.random.default_rng(seed).standard_normal(y.shape)
    return tsum(mul(y, Tensor(w)))


def op_cases(rng: np.random.Generator) -> dict:
    """name -> (function of one tensor, input array)."""
    a = rng.standard_normal((3, 4))
    b = Tensor(rng.standard_normal((4, 5)))
    c = Tensor(rng.standard_normal((3, 4)))
    gamma, beta = Tensor(rng.standard_normal(4) + 1.0), Tensor(rng.standard_normal(4))
    wlin, blin = Tensor(rng.standard_normal((4, 5))), Tensor(rng.standard_normal(5))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    # keep relu/clip inputs away from their kinks
    kinky = np.sign(a) * (np.abs(a) + 0.1)
    return {
        "add": (lambda x: x + c, a),
        "add_broadcast": (lambda x: x + beta, a),
        "mul": (lambda x: x * c, a),
        "mul_self": (lambda x: x * x, a),
        "sub": (lambda x: c - x, a),
        "div": (lambda x: c / x, pos),
        "reciprocal": (reciprocal, pos),
        "exp": (exp, a),
        "log": (log, pos),
        "relu": (relu, kinky),
        "sigmoid": (sigmoid, a),
        "gelu": (gelu, a),
        "clip": (lambda x: clip(x, -0.05, 0.05) * 10.0 + x, kinky),
        "sum_axis": (lambda x: tsum(x, axis=0), a),
        "mean_axis": (lambda x: mean(x, axis=1, keepdims=True), a),
        "reshape": (lambda x: reshape(x, (2, 6)), a),
        "transpose": (lambda x: transpose(x, (1, 0)), a),
        "swapaxes": (lambda x: swapaxes(reshape(x, (3, 2, 2)), 0, 2), a),
        "roll": (lambda x: roll(x, (1, -2), (0, 1)), a),
        "concat": (lambda x: concat([x, c, x], axis=1), a),
        "getitem": (lambda x: getitem(x, (slice(0, 2), [0, 0, 3])), a),
        "matmul": (lambda x: matmul(x, b), a),
        "matmul_batched": (lambda x: matmul(reshape(x, (3, 1, 4)), reshape(concat([b, b, b], 0), (3, 4, 5))), a),
        "softmax": (lambda x: softmax(x, axis=-1), a),
        "layer_norm": (lambda x: layer_norm(x, gamma, beta), a),
        "linear": (lambda x: linear(x, wlin, blin), a),
        "avg_pool2d": (lambda x: avg_pool2d(reshape(x, (1, 2, 2, 3)), 2), a),
        "attention": (lambda x: scaled_attention(x, c * 0.5, c), a),
    }


def op_grad_errors(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    out = {}
    for i, (name, (fn, x)) in enumerate(op_cases(rng).items()):
        out[name] = grad_check(lambda t, fn=fn, i=i: _weighted(fn(t), seed + i), x)
    return out


@dataclass
class ModelGradReport:
    max_error: float
    checked: int
    skipped: int          # sampled coordinates whose stencil crossed a relu/clip kink
    worst: str = ""


def model_grad_check(config: ModelConfig | None = None, batch: int = 2, seed: int = 0,
                     coords_per_tensor: int = 2, eps: float = 1e-5, floor: float = 1e-3) -> ModelGradReport:
    """Central differences against backprop on the BCE loss of a whole model.

    Every parameter tensor contributes ``coords_per_tensor`` sampled coordinates,
    and the input image a further handful.  A coordinate whose ``+-eps`` stencil
    flips any relu/clip pattern sits on a kink, where the loss has no derivative
    to compare against; it is replaced by a fresh sample and counted as skipped.
    Weights are drawn at ``init_std`` 0.1 unless the config asks for more: with
    near-constant tokens LayerNorm curvature swamps an ``eps`` step.
    """
    cfg = config or ModelConfig.desk()
    if cfg.init_std < 0.1:
        cfg = cfg.replace(init_std=0.1)
    rng = np.random.default_rng(seed)
    model = init_model(cfg, seed)
    params = model.params
    x = Tensor(rng.uniform(0.0, 1.0, (batch, cfg.image_size, cfg.image_size, cfg.in_chans)),
               requires_grad=True)
    y = Tensor((rng.random((batch, cfg.num_classes)) < 0.5).astype(np.float64))

    def loss_and_pattern() -> tuple[float, list[np.ndarray]]:
        with no_grad(), record_kinks() as log:
            value = bce_loss(predict_proba(x, model), y).item()
        return value, log

    params.zero_grad()
    backward(bce_loss(predict_proba(x, model), y))
    targets = [(path, t) for path, t in params.items()] + [("<input>", x)]
    worst, worst_at, checked, skipped = 0.0, "", 0, 0
    for path, t in targets:
        want = 8 if path == "<input>" else coords_per_tensor
        want = min(want, t.size)
        order = rng.permutation(t.size)
        done = 0
        for f in order:
            if done == want:
                break
            idx = np.unravel_index(int(f), t.shape)
            orig = t.data[idx]
            t.data[idx] = orig + eps
            up, pat_up = loss_and_pattern()
            t.data[idx] = orig - eps
            down, pat_down = loss_and_pattern()
            t.data[idx] = orig
            if any(not np.array_equal(a, b) for a, b in zip(pat_up, pat_down)):
                skipped += 1
                continue
            num = (up - down) / (2.0 * eps)
            a = float(t.grad[idx])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            if err > worst:
                worst, worst_at = err, f"{path}{list(map(int, idx))}"
            checked += 1
            done += 1
    return ModelGradReport(worst, checked, skipped, worst_at)


def model_grad_error(config: ModelConfig | None = None, **kwargs) -> float:
    return model_grad_check(config, **kwargs).max_error


# ---------------------------------------------------------------------------
# brute-force oracles


def sw_msa_oracle(x: np.ndarray, wq, wk, wv, wo, num_heads: int, window: int, shift: int) -> np.ndarray:
    """Token-by-token shifted-window attention on an ``(h, w, C)`` map.

    A query attends to the keys that share its window in the rolled frame and
    whose offset from it is unchanged by the roll, i.e. true spatial neighbours
    rather than tokens wrapped in from the far edge.
    """
    h, w, c = x.shape
    d = c // num_heads
    q, k, v = x @ wq, x @ wk, x @ wv
    rolled = {(i, j): ((i - shift) % h, (j - shift) % w) for i in range(h) for j in range(w)}

    def allowed(a, b):
        (ra, ca), (rb, cb) = rolled[a], rolled[b]
        same_window = ra // window == rb // window and ca // window == cb // window
        return same_window and ra - rb == a[0] - b[0] and ca - cb == a[1] - b[1]

    out = np.zeros_like(x)
    for i in range(h):
        for j in range(w):
            peers = [(a, b) for a in range(h) for b in range(w) if allowed((i, j), (a, b))]
            for hd in range(num_heads):
                sl = slice(hd * d, (hd + 1) * d)
                s = np.array([q[i, j, sl] @ k[a, b, sl] for a, b in peers]) / math.sqrt(d)
                p = np.exp(s - s.max())
                p /= p.sum()
                out[i, j, sl] = sum(pi * v[a, b, sl] for pi, (a, b) in zip(p, peers))
    return out @ wo


def sw_msa_error(h: int, w: int, c: int, num_heads: int, window: int, shift: int, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((h, w, c))
    ws = [rng.standard_normal((c, c)) * 0.5 for _ in range(4)]
    params = MhaParams(*(Tensor(m) for m in ws), num_heads=num_heads)
    with no_grad():
        fast = shifted_window_msa(Tensor(x), params, window, shift).data
    return float(np.abs(fast - sw_msa_oracle(x, *ws, num_heads, window, shift)).max())


def roundtrip_error(shape: tuple[int, ...], window: int, seed: int = 0) -> float:
    x = np.random.default_rng(seed).standard_normal(shape)
    back = window_reverse(window_partition(Tensor(x), window), window, shape[-3], shape[-2])
    return 0.0 if np.array_equal(back.data, x) else float(np.abs(back.data - x).max())


def complexity_errors() -> dict[str, float]:
    out = {
        "omega_msa(7,7,1)": abs(omega_msa(ComplexityQuery(7, 7, 1)) - 4998),
        "omega_wmsa(56,56,192,7)": abs(omega_wmsa(ComplexityQuery(56, 56, 192, 7)) - 521_428_992),
    }
    for h, c, m in [(4, 4, 2), (8, 8, 4), (8, 4, 8)]:
        q = ComplexityQuery(h, h, c, m)
        out[f"macs windowed {h}x{h} C={c} M={m}"] = abs(measure_attention_macs(h, h, c, m) - omega_wmsa(q))
        out[f"macs global {h}x{h} C={c}"] = abs(measure_attention_macs(h, h, c, mode="global") - omega_msa(q))
    return out


def run_all(config: ModelConfig | None = None, seed: int = 0) -> list[CheckResult]:
    results = [CheckResult(f"grad {k}", v, 1e-6) for k, v in op_grad_errors(seed).items()]
    results.append(CheckResult("grad model", model_grad_error(config, seed=seed), 1e-4))
    for h, m, s in [(4, 2, 1), (8, 4, 2), (6, 3, 1)]:
        results.append(CheckResult(f"sw-msa {h}x{h} M={m} s={s}", sw_msa_error(h, h, 4, 2, m, s, seed), 1e-10))
    for shape, m in [((2, 8, 8, 3), 4), ((6, 6, 2), 3), ((1, 2, 4, 4, 1), 2)]:
        results.append(CheckResult(f"partition roundtrip {shape} M={m}", roundtrip_error(shape, m, seed), 0.0))
    results.extend(CheckResult(k, float(v), 0.0) for k, v in complexity_errors().items())
    return results
