"""Independent reference implementations used as test oracles.

Nothing here imports the autodiff tape: gradients are either finite
differences or hand-written backprop, and metrics are plain loops.
"""

from __future__ import annotations

import math

import numpy as np


def central_fd(f, x: np.ndarray, eps: float) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += eps
        xm.flat[i] -= eps
        g.flat[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def rel_err(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))


def unpack(spec_dims, params):
    """Layer list [(W, b)] from the flat layout: per layer W (out x in) row-major, then b."""
    layers, pos = [], 0
    for i in range(len(spec_dims) - 1):
        n_in, n_out = spec_dims[i], spec_dims[i + 1]
        W = np.asarray(params[pos:pos + n_in * n_out]).reshape(n_out, n_in)
        pos += n_in * n_out
        b = np.asarray(params[pos:pos + n_out])
        pos += n_out
        layers.append((W, b))
    assert pos == len(params)
    return layers


def mlp_plain(layers, x, activation="tanh"):
    """Straight-line forward pass with explicit loops over units."""
    h = [float(v) for v in x]
    for k, (W, b) in enumerate(layers):
        out = []
        for j in range(W.shape[0]):
            z = b[j]
            for i in range(W.shape[1]):
                z += W[j, i] * h[i]
            if k < len(layers) - 1:
                z = math.tanh(z) if activation == "tanh" else max(z, 0.0)
            out.append(z)
        h = out
    return np.array(h)


def mlp_backprop(layers, X, dout, activation="tanh"):
    """Hand-written backprop: gradient of sum(dout * f(X)) w.r.t. the flat parameters."""
    hs, zs = [X], []
    h = X
    for k, (W, b) in enumerate(layers):
        z = h @ W.T + b
        zs.append(z)
        if k < len(layers) - 1:
            h = np.tanh(z) if activation == "tanh" else np.maximum(z, 0.0)
        else:
            h = z
        hs.append(h)
    grads = []
    delta = dout
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        gW = delta.T @ hs[k]
        gb = delta.sum(axis=0)
        grads.append((gW, gb))
        if k > 0:
            dh = delta @ W
            if activation == "tanh":
                delta = dh * (1.0 - np.tanh(zs[k - 1]) ** 2)
            else:
                delta = dh * (zs[k - 1] > 0)
    grads.reverse()
    return np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])


def mlp_np(layers, X, activation="tanh"):
    h = X
    for k, (W, b) in enumerate(layers):
        h = h @ W.T + b
        if k < len(layers) - 1:
            h = np.tanh(h) if activation == "tanh" else np.maximum(h, 0.0)
    return h


def td_grad_manual(dims, params, target_params, X, mask, r, Xn_options, cont, gamma, activation="tanh"):
    """Gradient of mean_b 0.5 (q_b - y_b)^2 by hand.

    ``X``: online-network inputs (B, in); ``mask``: (B, out) selector so that
    q_b = sum(mask_b * f(X_b)); ``Xn_options``: list over b of target-network
    inputs whose outputs are maximised over (rows x outputs) to build y.
    """
    layers = unpack(dims, params)
    tlayers = unpack(dims, target_params)
    out = mlp_np(layers, X, activation)
    q = np.sum(out * mask, axis=1)
    y = np.array([r[b] + gamma * cont[b] * np.max(mlp_np(tlayers, Xn_options[b], activation))
                  for b in range(len(r))])
    B = len(r)
    dout = ((q - y) / B)[:, None] * mask
    loss = 0.5 * np.mean((q - y) ** 2)
    return loss, mlp_backprop(layers, X, dout, activation)


# --------------------------------------------------------------------------- metric oracles


def mse_loop(x, y) -> float:
    x, y = list(np.ravel(x)), list(np.ravel(y))
    return sum((a - b) ** 2 for a, b in zip(x, y)) / len(x)


def psnr_loop(a, b, max_val=1.0) -> float:
    m = mse_loop(a, b)
    if m < 1e-10:
        return 100.0
    return min(100.0, 10.0 * math.log10(max_val * max_val / m))


def ssim_loop(a, b, window=8, L=1.0) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    vals = []
    n = window * window
    for i in range(a.shape[0] - window + 1):
        for j in range(a.shape[1] - window + 1):
            pa = [a[i + u, j + v] for u in range(window) for v in range(window)]
            pb = [b[i + u, j + v] for u in range(window) for v in range(window)]
            ma, mb = sum(pa) / n, sum(pb) / n
            va = sum((p - ma) ** 2 for p in pa) / n
            vb = sum((p - mb) ** 2 for p in pb) / n
            cov = sum((p - ma) * (q - mb) for p, q in zip(pa, pb)) / n
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


def dist(p, q) -> float:
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(p, q)))


def ed_loop(points) -> float:
    pts = [list(np.ravel(p)) for p in points]
    total, count = 0.0, 0
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            total += dist(pts[i], pts[j])
            count += 1
    return total / count


def silhouette_loop(points, labels) -> float:
    pts = [list(np.ravel(p)) for p in points]
    labels = list(labels)
    scores = []
    for i, p in enumerate(pts):
        own = [j for j in range(len(pts)) if labels[j] == labels[i] and j != i]
        if not own:
            scores.append(0.0)
            continue
        a = sum(dist(p, pts[j]) for j in own) / len(own)
        b = math.inf
        for lab in set(labels):
            if lab == labels[i]:
                continue
            members = [j for j in range(len(pts)) if labels[j] == lab]
            b = min(b, sum(dist(p, pts[j]) for j in members) / len(members))
        m = max(a, b)
        scores.append(0.0 if m == 0 else (b - a) / m)
    return sum(scores) / len(scores)


def det_cofactor(M) -> float:
    M = [list(r) for r in M]
    n = len(M)
    if n == 1:
        return M[0][0]
    if n == 2:
        return M[0][0] * M[1][1] - M[0][1] * M[1][0]
    total = 0.0
    for j in range(n):
        minor = [row[:j] + row[j + 1:] for row in M[1:]]
        total += (-1) ** j * M[0][j] * det_cofactor(minor)
    return total


def cov_loop(points):
    pts = [list(np.ravel(p)) for p in points]
    n, d = len(pts), len(pts[0])
    mean = [sum(p[k] for p in pts) / n for k in range(d)]
    return [[sum((p[u] - mean[u]) * (p[v] - mean[v]) for p in pts) / (n - 1) for v in range(d)] for u in range(d)]


def cd_loop(points) -> float:
    return max(det_cofactor(cov_loop(points)), 0.0)


def te_loop(samples, f) -> float:
    total = 0.0
    for s, a, s_next in samples:
        pred = f(s, a)
        total += sum((p - q) ** 2 for p, q in zip(pred, s_next)) / len(s_next)
    return total / len(samples)
