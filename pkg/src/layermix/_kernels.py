"""Compiled per-voxel loops for the hot paths of the toy segmentor and its losses.

Arrays are class-major: probabilities and their gradients are (K, M, V) or
(K, T). Every reduction runs in a fixed sequential order so results are
bit-stable across runs.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def shifted_logits(w0, pos, flat, out, labels):
    """out[k, m, v] = logit - max logit; labels gets the argmax (smallest id on ties)."""
    K = w0.shape[0]
    M, V = flat.shape
    logit = np.empty(K)
    for m in range(M):
        for v in range(V):
            x = flat[m, v]
            top = -np.inf
            for k in range(K):
                z = w0[k] * x + pos[k, v]
                logit[k] = z
                top = max(top, z)
            arg = 0
            for k in range(K - 1, -1, -1):
                out[k, m, v] = logit[k] - top
                arg = k if logit[k] == top else arg
            labels[m, v] = arg


@njit(cache=True)
def normalize(expd, conf):
    """Divide exponentiated shifted logits by their class sum in place; conf gets 1 / sum."""
    K, M, V = expd.shape
    for m in range(M):
        for v in range(V):
            total = 0.0
            for k in range(K):
                total += expd[k, m, v]
            for k in range(K):
                expd[k, m, v] /= total
            # the top class has exp(0) = 1 in the numerator
            conf[m, v] = 1.0 / total


@njit(cache=True)
def dice_terms(probs, target):
    """Per-class intersection, probability mass and target count over a (K, T) array."""
    K, T = probs.shape
    inter = np.zeros(K)
    mass = np.zeros(K)
    count = np.zeros(K)
    for k in range(K):
        s = 0.0
        for i in range(T):
            s += probs[k, i]
        mass[k] = s
    for i in range(T):
        c = target[i]
        inter[c] += probs[c, i]
        count[c] += 1.0
    return inter, mass, count


@njit(cache=True)
def dice_grad(target, fill, hit, out):
    """out[k, i] = fill[k] - hit[k] * [target[i] == k]."""
    K, T = out.shape
    for k in range(K):
        f = fill[k]
        for i in range(T):
            out[k, i] = f
    for i in range(T):
        c = target[i]
        out[c, i] -= hit[c]


@njit(cache=True)
def target_probs(probs, target):
    T = target.shape[0]
    pt = np.empty(T)
    for i in range(T):
        pt[i] = probs[target[i], i]
    return pt


@njit(cache=True)
def add_ce_grad(pt, target, floor, scale, out):
    """Accumulate ``scale`` times the mean-CE gradient; zero where the floor is active."""
    T = target.shape[0]
    for i in range(T):
        if pt[i] > floor:
            out[target[i], i] -= scale / (pt[i] * T)


@njit(cache=True, fastmath={"reassoc", "contract"})
def chain_backward(flat, coords, probs, grad):
    """Parameter gradient from d(loss)/d(probs) through softmax and the linear map.

    Returns (weight (4, K), bias (K,)). Voxel sums are reassociated for SIMD but
    the compiled order is fixed, so repeated calls agree bit for bit.
    """
    K = probs.shape[0]
    M, V = flat.shape
    weight = np.zeros((4, K))
    bias = np.zeros(K)
    inner = np.empty(V)
    # logit gradients summed over the batch, per class and voxel position
    acc = np.zeros((K, V))
    for m in range(M):
        x = flat[m]
        inner[:] = 0.0
        for k in range(K):
            p = probs[k, m]
            g = grad[k, m]
            for v in range(V):
                inner[v] += g[v] * p[v]
        for k in range(K):
            p = probs[k, m]
            g = grad[k, m]
            a = acc[k]
            s = 0.0
            for v in range(V):
                d = p[v] * (g[v] - inner[v])
                s += d * x[v]
                a[v] += d
            weight[0, k] += s
    for k in range(K):
        a = acc[k]
        for f in range(3):
            c = coords[f]
            s = 0.0
            for v in range(V):
                s += a[v] * c[v]
            weight[1 + f, k] = s
        s = 0.0
        for v in range(V):
            s += a[v]
        bias[k] = s
    return weight, bias
