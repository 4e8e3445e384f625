"""Symmetric 3x3 matrix functions as differentiable ops.

Every matrix function goes through one eigendecomposition (compiled Jacobi
kernel when available) and pulls gradients back with the Daleckii-Krein
divided-difference formula, so there is no series truncation anywhere.
"""
import numpy as np

from . import kernels
from .autodiff import ContractError, Tensor, as_tensor, make

SYM_TOL = 1e-12


def _batched(A):
    d = A.data
    if d.shape[-2:] != (3, 3):
        raise ContractError(f"expected (...,3,3) matrices, got {d.shape}")
    return d.reshape(-1, 3, 3)


def check_symmetric(d, tol=SYM_TOL):
    asym = np.abs(d - np.swapaxes(d, -1, -2))
    scale = np.maximum(1.0, np.abs(d).max(axis=(-1, -2), keepdims=True))
    if np.any(asym > tol * scale):
        raise ContractError("matrix is not symmetric")


def sym_funm(A, f, df, op="sym_funm"):
    """Apply scalar ``f`` to the eigenvalues of symmetric ``A``."""
    A = as_tensor(A)
    flat = _batched(A)
    check_symmetric(flat)
    w, V = kernels.sym3_eigh(flat)
    fw = f(w)
    out = kernels.sym3_funm(V, fw).reshape(A.shape)

    def pull(g):
        return (kernels.sym3_funm_vjp(w, V, fw, df(w), g.reshape(-1, 3, 3)).reshape(A.shape),)

    return make(out, (A,), pull, op)


def expm_sym(A):
    """Matrix exponential of a symmetric matrix (SPD result)."""
    return sym_funm(A, np.exp, np.exp, "expm_sym")


def inv_expm_sym(A, eps=0.0):
    """``(expm(A) + eps*I)^-1`` from the same eigendecomposition."""

    def f(w):
        return 1.0 / (np.exp(w) + eps)

    def df(w):
        e = np.exp(w)
        return -e / (e + eps) ** 2

    return sym_funm(A, f, df, "inv_expm_sym")


def logdet_expm_sym(A, eps=0.0):
    """``log det(expm(A) + eps*I)`` per matrix; equals trace(A) when eps = 0."""
    A = as_tensor(A)
    flat = _batched(A)
    batch = A.shape[:-2]
    if eps == 0.0:
        out = np.trace(flat, axis1=1, axis2=2).reshape(batch)

        def pull(g):
            return ((g.reshape(-1, 1, 1) * np.eye(3)).reshape(A.shape),)

        return make(out, (A,), pull, "logdet_expm_sym")
    check_symmetric(flat)
    w, V = kernels.sym3_eigh(flat)
    e = np.exp(w)
    out = np.log(e + eps).sum(axis=1).reshape(batch)
    weight = e / (e + eps)

    def pull(g):
        return ((kernels.sym3_funm(V, weight) * g.reshape(-1, 1, 1)).reshape(A.shape),)

    return make(out, (A,), pull, "logdet_expm_sym")


def softclip(A, L=5.0):
    """Shrink each matrix so its Frobenius norm stays below ``L``.

    ``A * L*tanh(|A|/L)/|A|``; the factor tends to 1 as |A| -> 0, so small
    inputs pass through unchanged and the map is smooth everywhere.
    """
    if L <= 0:
        raise ContractError("softclip bound L must be positive")
    A = as_tensor(A)
    d = A.data
    n = np.sqrt((d * d).sum(axis=(-1, -2), keepdims=True))
    x = n / L
    small = x < 1e-3
    xs = np.where(small, 1.0, x)
    th = np.tanh(xs)
    factor = np.where(small, 1.0 - x**2 / 3.0 + 2.0 * x**4 / 15.0, th / xs)
    # d factor / dn divided by n
    dfac_n = np.where(
        small,
        (-2.0 / 3.0 + 8.0 * x**2 / 15.0) / L**2,
        ((1.0 - th * th) / xs - th / xs**2) / (L * np.where(small, 1.0, n)),
    )

    def pull(g):
        inner = (g * d).sum(axis=(-1, -2), keepdims=True)
        return (factor * g + inner * dfac_n * d,)

    return make(factor * d, (A,), pull, "softclip")


def symmetrize_sum(S):
    """``S + S^T`` on the last two axes."""
    S = as_tensor(S)
    return make(S.data + np.swapaxes(S.data, -1, -2), (S,), lambda g: (g + np.swapaxes(g, -1, -2),), "sym_sum")


# plain numpy helpers (no graph)


def expm_sym_np(A):
    A = np.asarray(A, dtype=np.float64)
    w, V = kernels.sym3_eigh(A.reshape(-1, 3, 3))
    return kernels.sym3_funm(V, np.exp(w)).reshape(A.shape)


def logm_spd_np(M):
    M = np.asarray(M, dtype=np.float64)
    w, V = kernels.sym3_eigh(M.reshape(-1, 3, 3))
    if np.any(w <= 0):
        raise ContractError("matrix is not positive definite")
    return kernels.sym3_funm(V, np.log(w)).reshape(M.shape)


def softclip_np(A, L=5.0):
    return softclip(Tensor(A), L).data
