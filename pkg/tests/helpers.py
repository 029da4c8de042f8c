"""Independent oracles shared across the test suite.

Everything here is deliberately written as direct loops or closed-form
math, independent of the library's vectorized implementations.
"""

from __future__ import annotations

import numpy as np

from sweepstereo.tensor import Tensor


def loop_conv2d(x, w, b=None, stride=1, dilation=1, padding=1):
    """Nested-loop cross-correlation oracle for [C,H,W] x [O,C,k,k]."""
    c_out, c_in, k, _ = w.shape
    c, h, wd = x.shape
    ke = (k - 1) * dilation + 1
    out_h = (h + 2 * padding - ke) // stride + 1
    out_w = (wd + 2 * padding - ke) // stride + 1
    xp = np.zeros((c, h + 2 * padding, wd + 2 * padding), dtype=x.dtype)
    xp[:, padding:padding + h, padding:padding + wd] = x
    out = np.zeros((c_out, out_h, out_w), dtype=x.dtype)
    for o in range(c_out):
        for i in range(out_h):
            for j in range(out_w):
                acc = 0.0
                for ci in range(c_in):
                    for ki in range(k):
                        for kj in range(k):
                            acc += (w[o, ci, ki, kj]
                                    * xp[ci, i * stride + ki * dilation,
                                         j * stride + kj * dilation])
                out[o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out


def loop_group_norm(x, groups, gamma, beta, eps=1e-5):
    """Direct per-group mean/variance oracle."""
    c, h, w = x.shape
    cg = c // groups
    out = np.empty_like(x)
    for g in range(groups):
        sl = x[g * cg:(g + 1) * cg]
        mu = sl.mean()
        var = sl.var()
        out[g * cg:(g + 1) * cg] = (sl - mu) / np.sqrt(var + eps)
    return gamma[:, None, None] * out + beta[:, None, None]


def scalar_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def scalar_lstm_sequence(xs, wf, wi, wc, wo, bf, bi, bc, bo):
    """Scalar (single-pixel, single-channel) LSTM rollout oracle.

    Each weight is (w_input, w_hidden); returns the list of hidden values.
    """
    h = c = 0.0
    out = []
    for x in xs:
        f = scalar_sigmoid(wf[0] * x + wf[1] * h + bf)
        i = scalar_sigmoid(wi[0] * x + wi[1] * h + bi)
        cand = np.tanh(wc[0] * x + wc[1] * h + bc)
        o = scalar_sigmoid(wo[0] * x + wo[1] * h + bo)
        c = f * c + i * cand
        h = o * np.tanh(c)
        out.append(h)
    return out


def finite_diff_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


def check_gradient(build_loss, tensors: list[Tensor], eps: float = 1e-5,
                   rtol: float = 1e-4) -> float:
    """Compare analytic gradients of ``build_loss()`` against central
    differences for every tensor; returns the worst relative error.

    ``build_loss`` must rebuild the graph from the tensors' current data.
    """
    loss = build_loss()
    for t in tensors:
        t.grad = None
    loss.backward()
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else np.asarray(t.grad)
        numeric = finite_diff_grad(lambda: build_loss().item(), t.data, eps=eps)
        scale = np.maximum(np.abs(numeric), 1.0)
        err = np.max(np.abs(analytic - numeric) / scale)
        worst = max(worst, float(err))
        assert err < rtol, f"gradient mismatch {err:.3e} (rtol {rtol})"
    return worst


def brute_force_nearest(queries: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Chunked exact nearest-neighbor distances, no spatial index."""
    q = np.asarray(queries, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    out = np.empty(len(q))
    for a in range(0, len(q), 256):
        d2 = ((q[a:a + 256, None, :] - p[None, :, :]) ** 2).sum(axis=2)
        out[a:a + 256] = np.sqrt(d2.min(axis=1))
    return out


def brute_force_dynamic_accept(theta, psis, phis, valids, mu_min, mu_max,
                               eps_div=4.0, eta_div=1300.0, base=0.6,
                               scale=8.0, pivot=10.0, fixed_tau=None):
    """Enumerate every mu and count the consistency set by loop (Eq.-level
    oracle for the dynamic acceptance scan)."""
    for mu in range(mu_min, mu_max + 1):
        count = 0
        for psi, phi, valid in zip(psis, phis, valids):
            if valid and psi < mu / eps_div and phi < mu / eta_div:
                count += 1
        tau = fixed_tau if fixed_tau is not None else base * np.exp((mu - pivot) / scale)
        if count > mu and theta > tau:
            return True, mu
    return False, None
