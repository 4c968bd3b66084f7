"""Pure numpy implementations of the gradient-combination kernels."""
import numpy as np


def gram(grads):
    return grads @ grads.T


def pcgrad_project(grads, order):
    out = np.array(grads, copy=True)
    sq = np.einsum("ij,ij->i", grads, grads)
    for i in range(grads.shape[0]):
        gi = out[i]
        for j in order[i]:
            d = gi @ grads[j]
            if d < 0.0 and sq[j] > 0.0:
                gi -= (d / sq[j]) * grads[j]
    return out


def graddrop(grads, u):
    pos = np.where(grads > 0, grads, 0.0).sum(axis=0)
    neg = np.where(grads > 0, 0.0, grads).sum(axis=0)
    absum = np.abs(grads).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        keep = np.where(absum > 0, 0.5 * (1.0 + (pos + neg) / absum), 0.5)
    return np.where(u < keep, pos, neg)
