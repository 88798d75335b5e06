"""Exact output range of a small ReLU network over a box.

Branches neuron by neuron on the activation sign, prunes infeasible
patterns with an LP, and solves one LP per output at every feasible leaf.
Independent of the bound-propagation code under test.
"""

import numpy as np
from scipy.optimize import linprog


def _feasible(A, b, bounds):
    if not A:
        return True
    res = linprog(np.zeros(len(bounds)), A_ub=np.array(A), b_ub=np.array(b), bounds=bounds, method="highs")
    return res.status == 0


def exact_range(layers, lo, hi):
    """layers: list of (W, b, act) numpy arrays; returns (min, max) per output."""
    n = len(lo)
    bounds = list(zip(lo, hi))
    n_out = layers[-1][0].shape[0]
    best_lo = np.full(n_out, np.inf)
    best_hi = np.full(n_out, -np.inf)
    regions = [0]

    def leaf(P, q, A, b):
        regions[0] += 1
        W, c, _ = layers[-1]
        G = W @ P
        g = W @ q + c
        for k in range(n_out):
            for sign in (1.0, -1.0):
                res = linprog(sign * G[k], A_ub=np.array(A) if A else None, b_ub=np.array(b) if b else None,
                              bounds=bounds, method="highs")
                val = sign * res.fun + g[k]
                if sign > 0:
                    best_lo[k] = min(best_lo[k], val)
                else:
                    best_hi[k] = max(best_hi[k], val)

    def recurse(layer, j, P, q, Z, z, A, b):
        # P, q: affine map from input to the previous layer's output
        # Z, z: affine rows of the current layer after the neurons decided so far
        if layer == len(layers) - 1:
            leaf(P, q, A, b)
            return
        W, c, _ = layers[layer]
        pre_P = W @ P
        pre_q = W @ q + c
        if j == W.shape[0]:
            recurse(layer + 1, 0, np.array(Z), np.array(z), [], [], A, b)
            return
        a, d = pre_P[j], pre_q[j]
        # active: a x + d >= 0
        A1, b1 = A + [-a], b + [d]
        if _feasible(A1, b1, bounds):
            recurse(layer, j + 1, P, q, Z + [a], z + [d], A1, b1)
        A0, b0 = A + [a], b + [-d]
        if _feasible(A0, b0, bounds):
            recurse(layer, j + 1, P, q, Z + [np.zeros(n)], z + [0.0], A0, b0)

    recurse(0, 0, np.eye(n), np.zeros(n), [], [], [], [])
    return best_lo, best_hi, regions[0]
