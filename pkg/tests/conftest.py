"""Shared fixtures and numeric oracles for the test suite."""

import os

# Pin BLAS to one thread before numpy loads anywhere: keeps timing-sensitive
# tests stable and matches the single-thread benchmark protocol.
for _var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest


def conv2d_reference(x, filters, stride=1, padding=0):
    """Nested-loop convolution oracle, deliberately independent of im2col."""
    n, c, k, _ = filters.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    h, w = x.shape[1], x.shape[2]
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    out = np.zeros((n, oh, ow), dtype=x.dtype)
    for f in range(n):
        for oy in range(oh):
            for ox in range(ow):
                acc = 0.0
                for ch in range(c):
                    for ky in range(k):
                        for kx in range(k):
                            acc += (
                                x[ch, oy * stride + ky, ox * stride + kx]
                                * filters[f, ch, ky, kx]
                            )
                out[f, oy, ox] = acc
    return out


def central_diff(fn, x, step=1e-5):
    """Central finite-difference gradient of scalar fn at array x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def rel_err(analytic, numeric):
    """Max relative error with an absolute floor for near-zero entries."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


@pytest.fixture
def rng():
    return np.random.default_rng(42)
