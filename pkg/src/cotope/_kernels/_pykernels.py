"""Pure-Python reference versions of the compiled kernels.

Both backends perform the same floating-point operations in the same order,
so their outputs are bit-identical.
"""
from __future__ import annotations

from bisect import bisect_right

import numpy as np


def _kahan(values) -> float:
    s = 0.0
    c = 0.0
    for x in values:
        y = x - c
        t = s + y
        c = (t - s) - y
        s = t
    return s


def kahan_sum(values) -> float:
    return _kahan(np.asarray(values, dtype=np.float64).tolist())


def kahan_mean(values) -> float:
    vals = np.asarray(values, dtype=np.float64).tolist()
    if not vals:
        raise ValueError("mean of empty array")
    return _kahan(vals) / len(vals)


def nested_means(values, step_offsets, episode_offsets) -> np.ndarray:
    """Per-episode mean over steps of the per-step mean over tokens."""
    vals = np.asarray(values, dtype=np.float64).tolist()
    so = np.asarray(step_offsets, dtype=np.int64).tolist()
    eo = np.asarray(episode_offsets, dtype=np.int64).tolist()
    out = np.empty(len(eo) - 1, dtype=np.float64)
    for i in range(len(eo) - 1):
        means = []
        for t in range(eo[i], eo[i + 1]):
            a, b = so[t], so[t + 1]
            means.append(_kahan(vals[a:b]) / (b - a))
        out[i] = _kahan(means) / len(means)
    return out


def sample_tokens(
    init_codes,
    mask,
    ep_offsets,
    uniforms,
    entity_rows,
    entity_cdf,
    context_rows,
    context_cdf,
    vocab_size: int,
    key_mod: int,
):
    """Draw one token per position by inverse-CDF lookup.

    Masked positions use the entity table, the rest the context table. The
    context code of each position is the base-``vocab_size`` encoding of the
    previous ``k`` tokens (``key_mod == vocab_size ** k``).
    """
    init = np.asarray(init_codes, dtype=np.int64).tolist()
    m = np.asarray(mask, dtype=np.uint8).tolist()
    eo = np.asarray(ep_offsets, dtype=np.int64).tolist()
    u = np.asarray(uniforms, dtype=np.float64).tolist()
    rows = (np.asarray(context_rows).tolist(), np.asarray(entity_rows).tolist())
    cdfs = (np.asarray(context_cdf).tolist(), np.asarray(entity_cdf).tolist())
    last = vocab_size - 1
    tokens = [0] * len(m)
    codes = [0] * len(m)
    for i in range(len(eo) - 1):
        code = init[i]
        for p in range(eo[i], eo[i + 1]):
            which = 1 if m[p] else 0
            row = cdfs[which][rows[which][code]]
            tok = bisect_right(row, u[p])
            if tok > last:
                tok = last
            tokens[p] = tok
            codes[p] = code
            code = (code * vocab_size + tok) % key_mod
    return np.asarray(tokens, dtype=np.int64), np.asarray(codes, dtype=np.int64)
