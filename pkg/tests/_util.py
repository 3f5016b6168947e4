"""Shared helpers for the test-suite."""

import numpy as np

from card import tensor as T


def numeric_grad(fn, arrays, h=1e-5):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = fn(*arrays)
            a[i] = old - h
            fm = fn(*arrays)
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_close(a, b, rtol=1e-4, atol=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return np.all(np.abs(a - b) <= rtol * np.maximum(np.abs(a), np.abs(b)) + atol)


def check_primitive(build, shapes, rng, positive=False, rtol=1e-4):
    """Compare autodiff and finite differences for ``sum(w * build(*inputs))``."""
    arrays = [rng.uniform(0.2, 1.5, s) if positive else rng.normal(size=s) for s in shapes]
    out_shape = build(*[T.Tensor(a) for a in arrays]).shape
    w = rng.normal(size=out_shape)

    def scalar(*arrs):
        with T.no_grad():
            return float((build(*[T.Tensor(a) for a in arrs]).data * w).sum())

    leaves = [T.parameter(a.copy()) for a in arrays]
    (build(*leaves) * w).sum().backward()
    num = numeric_grad(scalar, [a.copy() for a in arrays])
    return all(rel_close(l.grad, n, rtol) for l, n in zip(leaves, num))


def unit_quadrature(n, k=3):
    """Gauss-Legendre on [0, 1] after v = u^k / (u^k + (1-u)^k).

    The substitution flattens the algebraic endpoint behaviour of Beta
    densities so modest node counts integrate them accurately.
    """
    t, w = np.polynomial.legendre.leggauss(n)
    u, wu = 0.5 * (t + 1), 0.5 * w
    den = u ** k + (1 - u) ** k
    v = u ** k / den
    dv = k * u ** (k - 1) * (1 - u) ** (k - 1) / den ** 2
    return v, wu * dv


def cube_quadrature(n, cell, k=3):
    """Tensor-product nodes ``(n^3, 3)`` and weights over ``[0, cell)^3``."""
    v, w = unit_quadrature(n, k)
    g, wg = v * cell, w * cell
    Y = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    W = np.einsum("i,j,k->ijk", wg, wg, wg).ravel()
    return Y, W
