"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Same signatures and conventions: batched float64 arrays, leading axis N.
The Jacobi sweep is vectorised across the batch instead of looped.
"""
import numpy as np

MAX_SWEEPS = 50
_PAIRS = ((0, 1), (0, 2), (1, 2))


def sym3_eigh(A):
    m = np.array(A, dtype=np.float64, copy=True).reshape(-1, 3, 3)
    n = m.shape[0]
    V = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    for _ in range(MAX_SWEEPS):
        off = m[:, 0, 1] ** 2 + m[:, 0, 2] ** 2 + m[:, 1, 2] ** 2
        scale = m[:, 0, 0] ** 2 + m[:, 1, 1] ** 2 + m[:, 2, 2] ** 2
        if not np.any((off != 0.0) & (off > 1e-36 * scale)):
            break
        for p, q in _PAIRS:
            r = 3 - p - q
            apq = m[:, p, q].copy()
            app = m[:, p, p].copy()
            aqq = m[:, q, q].copy()
            tiny = np.abs(apq) < 1e-18 * (np.abs(app) + np.abs(aqq))
            active = (apq != 0.0) & ~tiny
            safe = np.where(active, apq, 1.0)
            theta = (aqq - app) / (2.0 * safe)
            t = 1.0 / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t = np.where(theta < 0.0, -t, t)
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            apq = np.where(active, apq, 0.0)
            m[:, p, p] = app - t * apq
            m[:, q, q] = aqq + t * apq
            m[:, p, q] = np.where(active | tiny, 0.0, m[:, p, q])
            m[:, q, p] = m[:, p, q]
            arp = m[:, r, p].copy()
            arq = m[:, r, q].copy()
            m[:, r, p] = c * arp - s * arq
            m[:, p, r] = m[:, r, p]
            m[:, r, q] = s * arp + c * arq
            m[:, q, r] = m[:, r, q]
            vkp = V[:, :, p].copy()
            vkq = V[:, :, q].copy()
            V[:, :, p] = c[:, None] * vkp - s[:, None] * vkq
            V[:, :, q] = s[:, None] * vkp + c[:, None] * vkq
    w = np.stack([m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]], axis=1)
    return w, V


def sym3_funm(V, fw):
    V = np.asarray(V, dtype=np.float64)
    return np.einsum("nik,nk,njk->nij", V, np.asarray(fw, dtype=np.float64), V)


def loewner(w, fw, dfw, tol=1e-7):
    w = np.asarray(w, dtype=np.float64)
    fw = np.asarray(fw, dtype=np.float64)
    dfw = np.asarray(dfw, dtype=np.float64)
    gap = w[:, :, None] - w[:, None, :]
    mag = np.maximum(np.maximum(np.abs(w[:, :, None]), np.abs(w[:, None, :])), 1.0)
    far = np.abs(gap) > tol * mag
    diff = (fw[:, :, None] - fw[:, None, :]) / np.where(far, gap, 1.0)
    near = 0.5 * (dfw[:, :, None] + dfw[:, None, :])
    D = np.where(far, diff, near)
    idx = np.arange(3)
    D[:, idx, idx] = dfw
    return D


def sym3_funm_vjp(w, V, fw, dfw, G):
    V = np.asarray(V, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    gs = 0.5 * (G + np.swapaxes(G, 1, 2))
    m = np.swapaxes(V, 1, 2) @ gs @ V
    m *= loewner(w, fw, dfw)
    return V @ m @ np.swapaxes(V, 1, 2)
