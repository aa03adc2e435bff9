"""Independent reference implementations used as test oracles.

These are deliberately naive: they recompute everything from scratch and
share no code with the package.
"""

from __future__ import annotations

from functools import lru_cache


def brute_force_merges(counts, alpha, end_of_word=False):
    """Recount every adjacent pair from scratch each iteration."""
    words = {}
    for w, n in counts.items():
        syms = list(w)
        if end_of_word:
            syms[-1] = syms[-1] + "</w>"
        words[w] = (syms, n)
    merges = []
    for _ in range(alpha):
        stats = {}
        for syms, n in words.values():
            for i in range(len(syms) - 1):
                key = (syms[i], syms[i + 1])
                stats[key] = stats.get(key, 0) + n
        if not stats:
            break
        top = max(stats.values())
        if top < 2:
            break
        best = min(p for p, c in stats.items() if c == top)
        merges.append(best)
        for w, (syms, n) in list(words.items()):
            out, i = [], 0
            while i < len(syms):
                if i + 1 < len(syms) and (syms[i], syms[i + 1]) == best:
                    out.append(syms[i] + syms[i + 1])
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            words[w] = (out, n)
    return merges


def replay_in_order(word, merges):
    """Apply merges one after another in learned order."""
    syms = list(word)
    for a, b in merges:
        out, i = [], 0
        while i < len(syms):
            if i + 1 < len(syms) and syms[i] == a and syms[i + 1] == b:
                out.append(a + b)
                i += 2
            else:
                out.append(syms[i])
                i += 1
        syms = out
    return syms


def alignment_counts(ref, hyp):
    """(S, I, D) of the best alignment by exhaustive top-down recursion.

    Best means fewest total edits, then most substitutions.
    """
    ref, hyp = tuple(ref), tuple(hyp)

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(ref):
            return (0, len(hyp) - j, 0)
        if j == len(hyp):
            return (0, 0, len(ref) - i)
        options = []
        s, ins, d = go(i + 1, j + 1)
        options.append((s + (ref[i] != hyp[j]), ins, d))
        s, ins, d = go(i + 1, j)
        options.append((s, ins, d + 1))
        s, ins, d = go(i, j + 1)
        options.append((s, ins + 1, d))
        return min(options, key=lambda t: (sum(t), -t[0]))

    return go(0, 0)


def dense_attention(x_q, x_k, x_v, mha, mask=None):
    """Per-head loop over numpy copies of an attention module's weights."""
    import numpy as np

    def lin(layer, x):
        return x @ layer.weight.detach().double().numpy().T + layer.bias.detach().double().numpy()

    q, k, v = lin(mha.w_q, x_q), lin(mha.w_k, x_k), lin(mha.w_v, x_v)
    heads = []
    for h in range(mha.h):
        qh = q[:, h * mha.d_k:(h + 1) * mha.d_k]
        kh = k[:, h * mha.d_k:(h + 1) * mha.d_k]
        vh = v[:, h * mha.d_v:(h + 1) * mha.d_v]
        out = np.zeros((len(qh), mha.d_v))
        for i in range(len(qh)):
            s = np.array([qh[i] @ kh[j] for j in range(len(kh))]) / np.sqrt(mha.d_k)
            allowed = np.ones(len(kh), bool) if mask is None else mask[i]
            if not allowed.any():
                continue
            w = np.where(allowed, np.exp(s - s[allowed].max()), 0.0)
            w /= w.sum()
            out[i] = w @ vh
        heads.append(out)
    return lin(mha.w_o, np.concatenate(heads, axis=1))


def finite_difference_grads(loss_fn, params, h=1e-6):
    """Central differences of ``loss_fn()`` w.r.t. every element of ``params``."""
    import torch

    grads = {}
    with torch.no_grad():
        for name, p in params.items():
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            grads[name] = g
    return grads
