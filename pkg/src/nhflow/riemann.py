"""Coordinate-frame Riemannian geometry from metric jets.

All functions are vectorized over leading axes.  A metric jet is the triple
(G, dG, d2G) with ``dG[..., m, n, k] = d_k G_mn`` and
``d2G[..., m, n, k, l] = d_k d_l G_mn``.

Conventions: ``Gam[..., r, m, n]`` is Gamma^r_{mn}; the Riemann array
``R[..., r, s, m, n]`` holds [R(d_m, d_n) d_s]^r and Ricci is
``Ric_sn = R^r_{s r n}``.
"""

from __future__ import annotations

import numpy as np


def _lowered(dG: np.ndarray) -> np.ndarray:
    # Gam_{s m n} = 1/2 (d_n G_sm + d_m G_sn - d_s G_mn)
    return 0.5 * (dG + np.swapaxes(dG, -1, -2) - np.einsum("...mns->...smn", dG))


def christoffel(G: np.ndarray, dG: np.ndarray, Ginv: np.ndarray | None = None) -> np.ndarray:
    if Ginv is None:
        Ginv = np.linalg.inv(G)
    low = _lowered(dG)
    return np.einsum("...rs,...smn->...rmn", Ginv, low)


def christoffel_derivative(G, dG, d2G, Ginv=None) -> np.ndarray:
    """``dGam[..., r, m, n, k] = d_k Gamma^r_{mn}``."""
    if Ginv is None:
        Ginv = np.linalg.inv(G)
    low = _lowered(dG)
    dlow = 0.5 * (d2G + np.einsum("...snmk->...smnk", d2G)
                  - np.einsum("...mnsk->...smnk", d2G))
    dGinv = -np.einsum("...ra,...abk,...bs->...rsk", Ginv, dG, Ginv)
    return (np.einsum("...rsk,...smn->...rmnk", dGinv, low)
            + np.einsum("...rs,...smnk->...rmnk", Ginv, dlow))


def riemann(G, dG, d2G, Ginv=None) -> np.ndarray:
    if Ginv is None:
        Ginv = np.linalg.inv(G)
    Gam = christoffel(G, dG, Ginv)
    dGam = christoffel_derivative(G, dG, d2G, Ginv)
    # R^r_{s m n} = d_m Gam^r_{n s} - d_n Gam^r_{m s}
    #              + Gam^r_{m l} Gam^l_{n s} - Gam^r_{n l} Gam^l_{m s}
    R = np.einsum("...rnsm->...rsmn", dGam) - np.einsum("...rmsn->...rsmn", dGam)
    R = R + np.einsum("...rml,...lns->...rsmn", Gam, Gam)
    R = R - np.einsum("...rnl,...lms->...rsmn", Gam, Gam)
    return R


def ricci(G, dG, d2G, Ginv=None) -> np.ndarray:
    """Ricci tensor without forming the full Riemann tensor.

    R_sn = d_r Gam^r_{ns} - d_n Gam^r_{rs} + Gam^r_{rl} Gam^l_{ns}
           - Gam^r_{nl} Gam^l_{rs}, written with batched matrix products.
    """
    if Ginv is None:
        Ginv = np.linalg.inv(G)
    batch = G.shape[:-2]
    D = G.shape[-1]
    P = int(np.prod(batch)) if batch else 1
    G = G.reshape(P, D, D)
    dG = dG.reshape(P, D, D, D)
    d2G = d2G.reshape(P, D, D, D, D)
    Gi = Ginv.reshape(P, D, D)
    diag = np.arange(D)
    low = _lowered(dG)                                             # [s, m, n]
    Gam = (Gi @ low.reshape(P, D, D * D)).reshape(P, D, D, D)
    dlow = 0.5 * (d2G + d2G.transpose(0, 1, 3, 2, 4) - d2G.transpose(0, 3, 1, 2, 4))
    # dGi[k] = d_k G^-1 = -G^-1 (d_k G) G^-1
    dGi = -(Gi[:, None] @ dG.transpose(0, 3, 1, 2) @ Gi[:, None])  # [k, r, q]
    c = dGi[:, diag, diag, :].sum(axis=1)                           # sum_r dGi[r][r, q]
    t1 = (c[:, None, :] @ low.reshape(P, D, D * D)).reshape(P, D, D)
    t1 += (Gi.reshape(P, 1, D * D)
           @ dlow.transpose(0, 4, 1, 2, 3).reshape(P, D * D, D * D)).reshape(P, D, D)
    t2 = dGi.reshape(P, D, D * D) @ low.transpose(0, 2, 1, 3).reshape(P, D * D, D)
    t2 += (Gi.reshape(P, 1, D * D)
           @ dlow.transpose(0, 2, 1, 3, 4).reshape(P, D * D, D * D)).reshape(P, D, D)
    tr = Gam[:, diag, diag, :].sum(axis=1)                          # Gam^r_{rl}
    t3 = (tr[:, None, :] @ Gam.reshape(P, D, D * D)).reshape(P, D, D)
    GT = Gam.transpose(0, 2, 1, 3)
    t4 = GT.reshape(P, D, D * D) @ GT.reshape(P, D * D, D)
    return (t1 - t2 + t3 - t4).reshape(batch + (D, D))


def scalar(G, dG, d2G, Ginv=None) -> np.ndarray:
    if Ginv is None:
        Ginv = np.linalg.inv(G)
    return np.einsum("...sn,...sn->...", Ginv, ricci(G, dG, d2G, Ginv))


def laplacian_scalar(G, dG, df, d2f, Ginv=None) -> np.ndarray:
    """Laplace-Beltrami of a scalar from its coordinate jet."""
    if Ginv is None:
        Ginv = np.linalg.inv(G)
    Gam = christoffel(G, dG, Ginv)
    hess = d2f - np.einsum("...rmn,...r->...mn", Gam, df)
    return np.einsum("...mn,...mn->...", Ginv, hess)
