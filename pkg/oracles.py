"""
Brute-force reference implementations.

Straight loops and explicit formulas over plain numpy float64 arrays (or
Decimal where extra precision matters). Slow on purpose: they share no code
with the tape ops they check.
"""

import math
from decimal import Decimal, localcontext

import numpy as np

GELU_COEFF = math.sqrt(2.0 / math.pi)


def matmul_loops(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            total = 0.0
            for t in range(k):
                total += a[i, t] * b[t, j]
            out[i, j] = total
    return out


def batched_matmul_loops(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    a = np.broadcast_to(a, batch + a.shape[-2:])
    b = np.broadcast_to(b, batch + b.shape[-2:])
    out = np.zeros(batch + (a.shape[-2], b.shape[-1]))
    for idx in np.ndindex(*batch):
        out[idx] = matmul_loops(a[idx], b[idx])
    return out


def softmax_decimal(values, digits: int = 50) -> list[float]:
    with localcontext() as ctx:
        ctx.prec = digits
        exps = [Decimal(repr(float(v))).exp() for v in values]
        total = sum(exps)
        return [float(e / total) for e in exps]


def layer_norm_direct(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    for idx in np.ndindex(*x.shape[:-1]):
        row = x[idx]
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        out[idx] = [(v - mu) / math.sqrt(var + eps) * g + b for v, g, b in zip(row, gamma, beta)]
    return out


def cosine_direct(a, b, eps: float = 1e-8) -> float:
    dot = sum(x * y for x, y in zip(a, b))
    na = sum(x * x for x in a)
    nb = sum(y * y for y in b)
    return dot / math.sqrt(max(na * nb, eps * eps))


def gelu_direct(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(GELU_COEFF * (x + 0.044715 * x ** 3)))


def bottleneck_direct(x: np.ndarray, down_w, down_b, up_w, up_b, activation=gelu_direct) -> np.ndarray:
    hidden = x @ down_w + down_b
    if activation is not None:
        hidden = activation(hidden)
    return hidden @ up_w + up_b


def softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def attention_pairs(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float) -> np.ndarray:
    """Single-head attention with every query-key dot product enumerated."""
    m, t = q.shape[0], k.shape[0]
    out = np.zeros((m, v.shape[1]))
    for i in range(m):
        scores = [scale * sum(q[i, c] * k[j, c] for c in range(q.shape[1])) for j in range(t)]
        top = max(scores)
        weights = [math.exp(s - top) for s in scores]
        total = sum(weights)
        for j in range(t):
            out[i] += (weights[j] / total) * v[j]
    return out


def frozen_block_direct(f: np.ndarray, x: np.ndarray, w: dict[str, np.ndarray], num_heads: int):
    """f [m, d], x [T, d]; `w` maps LayerWeights field names to arrays. Returns (f_att, f_mlp, h)."""
    d = f.shape[1]
    dh = d // num_heads
    qf = layer_norm_direct(f, w['ln1_gamma'], w['ln1_beta'])
    kx = layer_norm_direct(x, w['ln1_gamma'], w['ln1_beta'])
    q = qf @ w['q_weight'] + w['q_bias']
    k = kx @ w['k_weight'] + w['k_bias']
    v = kx @ w['v_weight'] + w['v_bias']
    heads = [attention_pairs(q[:, h * dh:(h + 1) * dh], k[:, h * dh:(h + 1) * dh],
                             v[:, h * dh:(h + 1) * dh], 1.0 / math.sqrt(dh)) for h in range(num_heads)]
    att = np.concatenate(heads, axis=1) @ w['out_weight'] + w['out_bias']
    f_att = att + f
    normed = layer_norm_direct(f_att, w['ln2_gamma'], w['ln2_beta'])
    f_mlp = bottleneck_direct(normed, w['fc1_weight'], w['fc1_bias'], w['fc2_weight'], w['fc2_bias'])
    return f_att, f_mlp, f_mlp + f_att


def active_block_direct(h: np.ndarray, prompt, proj, q, k, v, ln, mlp, xi: float, zeta: float) -> np.ndarray:
    """Bottlenecks given as (down_w, down_b, up_w, up_b) tuples; `ln` as (gamma, beta)."""
    z = h + prompt if prompt is not None else h
    if proj is not None:
        z = bottleneck_direct(z, *proj)
    if q is not None:
        qa, ka, va = bottleneck_direct(z, *q), bottleneck_direct(z, *k), bottleneck_direct(z, *v)
        z = xi * attention_pairs(qa, ka, va, 1.0 / math.sqrt(h.shape[-1])) + z
    if mlp is not None:
        z = zeta * bottleneck_direct(layer_norm_direct(z, *ln), *mlp) + z
    return z


def combine_direct(features: list[np.ndarray], weights: np.ndarray, shared) -> np.ndarray:
    """sum_j w_j * shared(features[j]) accumulated feature by feature, element by element."""
    out = np.zeros_like(features[0])
    for j, feature in enumerate(features):
        projected = bottleneck_direct(feature, *shared)
        for idx in np.ndindex(*out.shape):
            out[idx] += weights[j] * projected[idx]
    return out


def prototypes_grouped(features: np.ndarray, labels: np.ndarray, ways: int) -> np.ndarray:
    out = np.zeros((ways, features.shape[1]))
    for c in range(ways):
        members = [features[i] for i in range(len(labels)) if labels[i] == c]
        for row in members:
            out[c] += row
        out[c] /= len(members)
    return out


def sq_direct(s: np.ndarray, q: np.ndarray, projected: np.ndarray, alpha: float, mode: str) -> np.ndarray:
    """`projected` is Proj(q); A[c, j] = <s_c, projected_j>."""
    n, nq = s.shape[0], q.shape[0]
    a = np.zeros((n, nq))
    for c in range(n):
        for j in range(nq):
            a[c, j] = sum(s[c, t] * projected[j, t] for t in range(s.shape[1]))
    if mode == 'softmax':
        a = softmax_rows(a / math.sqrt(s.shape[1]))
    return alpha * matmul_loops(a, q) + (1.0 - alpha) * s


def nearest_cosine(queries: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """First prototype with the highest cosine, by exhaustive comparison."""
    out = np.zeros(len(queries), dtype=np.int64)
    for j, q in enumerate(queries):
        best, best_c = -math.inf, 0
        for c, p in enumerate(prototypes):
            score = cosine_direct(q, p)
            if score > best:
                best, best_c = score, c
        out[j] = best_c
    return out


def ci95_direct(accuracies, digits: int = 50) -> tuple[float, float]:
    """(mean %, 1.96 * sample std / sqrt(E) %) in Decimal arithmetic."""
    with localcontext() as ctx:
        ctx.prec = digits
        values = [Decimal(repr(float(a))) * 100 for a in accuracies]
        count = len(values)
        mean = sum(values) / count
        if count < 2:
            return float(mean), 0.0
        var = sum((v - mean) ** 2 for v in values) / (count - 1)
        return float(mean), float(Decimal('1.96') * var.sqrt() / Decimal(count).sqrt())
