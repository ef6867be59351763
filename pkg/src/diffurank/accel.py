"""Hot numeric kernels: numba-jitted with a pure-numpy fallback.

The jitted path is used when numba imports cleanly; set
``DIFFURANK_DISABLE_NUMBA=1`` to force the numpy fallback.  Both paths
implement identical arithmetic; ``benchmarks/bench_accel.py`` compares
their throughput.

Kernels here cover the per-draw forward noising, the small conditional
MLP used by the toy denoiser (batched forward), and its full training
epoch (minibatch Adam).  Parameters are packed into one flat float64
vector so Adam state stays a pair of flat arrays.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLE_FLAG = "DIFFURANK_DISABLE_NUMBA"


def _numba_requested() -> bool:
    return os.environ.get(_DISABLE_FLAG, "").strip().lower() not in {"1", "true", "yes"}


NUMBA_ENABLED = False
if _numba_requested():
    try:
        from numba import njit as _njit

        NUMBA_ENABLED = True
    except ImportError:
        NUMBA_ENABLED = False


def mlp_param_size(dim: int, vocab: int, hidden: int) -> int:
    """Flat parameter count for the two-headed conditional MLP."""
    feat = dim + vocab + 2
    return feat * hidden + hidden + 2 * (hidden * dim + dim)


def _unpack_params(params: np.ndarray, dim: int, vocab: int, hidden: int):
    feat = dim + vocab + 2
    o = 0
    w1 = params[o:o + feat * hidden].reshape(feat, hidden)
    o += feat * hidden
    b1 = params[o:o + hidden]
    o += hidden
    w2x = params[o:o + hidden * dim].reshape(hidden, dim)
    o += hidden * dim
    b2x = params[o:o + dim]
    o += dim
    w2e = params[o:o + hidden * dim].reshape(hidden, dim)
    o += hidden * dim
    b2e = params[o:o + dim]
    return w1, b1, w2x, b2x, w2e, b2e


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------


def _forward_noise_batch_numpy(x0, signal, sigma, eps):
    return signal[:, None] * x0[None, :] + sigma[:, None] * eps


def _mlp_forward_numpy(params, noised, signal, bags, hidden):
    dim = noised.shape[1]
    vocab = bags.shape[1]
    w1, b1, w2x, b2x, w2e, b2e = _unpack_params(params, dim, vocab, hidden)
    feats = np.concatenate([noised, bags, signal[:, None], 1.0 - signal[:, None]], axis=1)
    h = np.tanh(feats @ w1 + b1)
    return h @ w2x + b2x, h @ w2e + b2e


def _train_epoch_numpy(params, m1, m2, x0, bags, signal, sigma, eps, order,
                       batch_size, step0, lr, beta1, beta2, adam_eps):
    n, dim = x0.shape
    vocab = bags.shape[1]
    hidden = (params.size - 2 * dim) // (dim + vocab + 2 + 1 + 2 * dim)
    w1, b1, w2x, b2x, w2e, b2e = _unpack_params(params, dim, vocab, hidden)
    grads = np.zeros_like(params)
    gw1, gb1, gw2x, gb2x, gw2e, gb2e = _unpack_params(grads, dim, vocab, hidden)

    step = step0
    total_loss = 0.0
    n_batches = 0
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        b = idx.size
        x0b = x0[idx]
        epsb = eps[idx]
        noised = signal[idx, None] * x0b + sigma[idx, None] * epsb
        feats = np.concatenate(
            [noised, bags[idx], signal[idx, None], 1.0 - signal[idx, None]], axis=1
        )
        h = np.tanh(feats @ w1 + b1)
        rx = (h @ w2x + b2x) - x0b
        re = (h @ w2e + b2e) - epsb
        total_loss += float(np.mean(rx * rx) + np.mean(re * re))
        n_batches += 1

        dx = (2.0 / (b * dim)) * rx
        de = (2.0 / (b * dim)) * re
        gw2x[:, :] = h.T @ dx
        gb2x[:] = dx.sum(axis=0)
        gw2e[:, :] = h.T @ de
        gb2e[:] = de.sum(axis=0)
        dpre = (dx @ w2x.T + de @ w2e.T) * (1.0 - h * h)
        gw1[:, :] = feats.T @ dpre
        gb1[:] = dpre.sum(axis=0)

        step += 1
        bc1 = 1.0 - beta1 ** step
        bc2 = 1.0 - beta2 ** step
        m1[:] = beta1 * m1 + (1.0 - beta1) * grads
        m2[:] = beta2 * m2 + (1.0 - beta2) * grads * grads
        params[:] -= lr * (m1 / bc1) / (np.sqrt(m2 / bc2) + adam_eps)

    return total_loss / max(n_batches, 1), step


# ---------------------------------------------------------------------------
# numba twins (loop-fused versions of the numpy math)
# ---------------------------------------------------------------------------


def _forward_noise_batch_loops(x0, signal, sigma, eps):
    k, dim = eps.shape
    out = np.empty((k, dim))
    for i in range(k):
        for j in range(dim):
            out[i, j] = signal[i] * x0[j] + sigma[i] * eps[i, j]
    return out


def _mlp_forward_loops(params, noised, signal, bags, hidden):
    batch, dim = noised.shape
    vocab = bags.shape[1]
    feat = dim + vocab + 2
    o = 0
    w1 = params[o:o + feat * hidden].reshape(feat, hidden)
    o += feat * hidden
    b1 = params[o:o + hidden]
    o += hidden
    w2x = params[o:o + hidden * dim].reshape(hidden, dim)
    o += hidden * dim
    b2x = params[o:o + dim]
    o += dim
    w2e = params[o:o + hidden * dim].reshape(hidden, dim)
    o += hidden * dim
    b2e = params[o:o + dim]

    x0_hat = np.empty((batch, dim))
    eps_hat = np.empty((batch, dim))
    feats = np.empty(feat)
    h = np.empty(hidden)
    # Inner loops run over the contiguous axis of each weight matrix.
    for i in range(batch):
        for j in range(dim):
            feats[j] = noised[i, j]
        for j in range(vocab):
            feats[dim + j] = bags[i, j]
        feats[dim + vocab] = signal[i]
        feats[dim + vocab + 1] = 1.0 - signal[i]
        for q in range(hidden):
            h[q] = b1[q]
        for j in range(feat):
            fj = feats[j]
            for q in range(hidden):
                h[q] += fj * w1[j, q]
        for q in range(hidden):
            h[q] = np.tanh(h[q])
        for j in range(dim):
            x0_hat[i, j] = b2x[j]
            eps_hat[i, j] = b2e[j]
        for q in range(hidden):
            hq = h[q]
            for j in range(dim):
                x0_hat[i, j] += hq * w2x[q, j]
                eps_hat[i, j] += hq * w2e[q, j]
    return x0_hat, eps_hat


def _train_epoch_loops(params, m1, m2, x0, bags, signal, sigma, eps, order,
                       batch_size, step0, lr, beta1, beta2, adam_eps):
    n, dim = x0.shape
    vocab = bags.shape[1]
    feat = dim + vocab + 2
    hidden = (params.size - 2 * dim) // (feat + 1 + 2 * dim)

    o = 0
    w1 = params[o:o + feat * hidden].reshape(feat, hidden)
    o += feat * hidden
    b1 = params[o:o + hidden]
    o += hidden
    w2x = params[o:o + hidden * dim].reshape(hidden, dim)
    o += hidden * dim
    b2x = params[o:o + dim]
    o += dim
    w2e = params[o:o + hidden * dim].reshape(hidden, dim)
    o += hidden * dim
    b2e = params[o:o + dim]

    grads = np.zeros(params.size)
    o = 0
    gw1 = grads[o:o + feat * hidden].reshape(feat, hidden)
    o += feat * hidden
    gb1 = grads[o:o + hidden]
    o += hidden
    gw2x = grads[o:o + hidden * dim].reshape(hidden, dim)
    o += hidden * dim
    gb2x = grads[o:o + dim]
    o += dim
    gw2e = grads[o:o + hidden * dim].reshape(hidden, dim)
    o += hidden * dim
    gb2e = grads[o:o + dim]

    feats = np.empty(feat)
    h = np.empty(hidden)
    dh = np.empty(hidden)
    rx = np.empty(dim)
    re = np.empty(dim)

    step = step0
    total_loss = 0.0
    n_batches = 0
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        b = stop - start
        grads[:] = 0.0
        batch_loss = 0.0
        scale = 2.0 / (b * dim)
        for row in range(start, stop):
            i = order[row]
            for j in range(dim):
                feats[j] = signal[i] * x0[i, j] + sigma[i] * eps[i, j]
            for j in range(vocab):
                feats[dim + j] = bags[i, j]
            feats[dim + vocab] = signal[i]
            feats[dim + vocab + 1] = 1.0 - signal[i]
            for q in range(hidden):
                h[q] = b1[q]
            for j in range(feat):
                fj = feats[j]
                for q in range(hidden):
                    h[q] += fj * w1[j, q]
            for q in range(hidden):
                h[q] = np.tanh(h[q])
            for j in range(dim):
                rx[j] = b2x[j] - x0[i, j]
                re[j] = b2e[j] - eps[i, j]
            for q in range(hidden):
                hq = h[q]
                for j in range(dim):
                    rx[j] += hq * w2x[q, j]
                    re[j] += hq * w2e[q, j]
            for j in range(dim):
                batch_loss += rx[j] * rx[j] + re[j] * re[j]
                rx[j] *= scale
                re[j] *= scale
            for j in range(dim):
                gb2x[j] += rx[j]
                gb2e[j] += re[j]
            for q in range(hidden):
                hq = h[q]
                acc = 0.0
                for j in range(dim):
                    gw2x[q, j] += hq * rx[j]
                    gw2e[q, j] += hq * re[j]
                    acc += rx[j] * w2x[q, j] + re[j] * w2e[q, j]
                dh[q] = acc * (1.0 - hq * hq)
            for q in range(hidden):
                gb1[q] += dh[q]
            for j in range(feat):
                fj = feats[j]
                for q in range(hidden):
                    gw1[j, q] += fj * dh[q]
        total_loss += batch_loss / (b * dim)
        n_batches += 1

        step += 1
        bc1 = 1.0 - beta1 ** step
        bc2 = 1.0 - beta2 ** step
        for p in range(params.size):
            g = grads[p]
            m1[p] = beta1 * m1[p] + (1.0 - beta1) * g
            m2[p] = beta2 * m2[p] + (1.0 - beta2) * g * g
            params[p] -= lr * (m1[p] / bc1) / (np.sqrt(m2[p] / bc2) + adam_eps)

    return total_loss / max(n_batches, 1), step


NUMPY_IMPLS = {
    "forward_noise_batch": _forward_noise_batch_numpy,
    "mlp_forward": _mlp_forward_numpy,
    "train_epoch": _train_epoch_numpy,
}

if NUMBA_ENABLED:
    _JIT_IMPLS = {
        "forward_noise_batch": _njit(cache=True)(_forward_noise_batch_loops),
        "mlp_forward": _njit(cache=True)(_mlp_forward_loops),
        "train_epoch": _njit(cache=True)(_train_epoch_loops),
    }
    ACTIVE_BACKEND = "numba"
    forward_noise_batch = _JIT_IMPLS["forward_noise_batch"]
    mlp_forward = _JIT_IMPLS["mlp_forward"]
    train_epoch = _JIT_IMPLS["train_epoch"]
else:
    ACTIVE_BACKEND = "numpy"
    forward_noise_batch = _forward_noise_batch_numpy
    mlp_forward = _mlp_forward_numpy
    train_epoch = _train_epoch_numpy
