"""Shared numeric oracles for the test suite (finite differences etc.)."""

import numpy as np


def numeric_jacobians(fn, X, h=1e-5):
    """Central-difference Jacobians of a batched map R^N -> R^N.

    ``fn`` maps an (P, N) array to an (P, N) array row-wise; all
    perturbed evaluations are batched into a single call.  Returns an
    (P, N, N) array with J[p, i, j] = d out_i / d in_j at row p.
    """
    P, N = X.shape
    blocks = []
    for j in range(N):
        step = np.zeros((1, N))
        step[0, j] = h
        blocks.append(X + step)
        blocks.append(X - step)
    Y = fn(np.concatenate(blocks, axis=0))
    J = np.empty((P, N, N))
    for j in range(N):
        up = Y[2 * j * P:(2 * j + 1) * P]
        down = Y[(2 * j + 1) * P:(2 * j + 2) * P]
        J[:, :, j] = (up - down) / (2.0 * h)
    return J


def logabsdets(J):
    """log |det| of each matrix in a (P, N, N) stack."""
    out = np.empty(J.shape[0])
    for p in range(J.shape[0]):
        _, out[p] = np.linalg.slogdet(J[p])
    return out
