"""Reference recovery methods: oracle least squares and simultaneous OMP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["UnderdeterminedError", "SompResult", "oracle_ls", "somp"]


class UnderdeterminedError(np.linalg.LinAlgError):
    pass


def _ls_rows(Yp: np.ndarray, Sp: np.ndarray) -> np.ndarray:
    coef, _, rank, _ = np.linalg.lstsq(Sp, Yp, rcond=None)
    if rank < Sp.shape[1]:
        raise UnderdeterminedError(f"pilot submatrix has rank {rank} < {Sp.shape[1]} columns")
    return coef


def oracle_ls(Y: np.ndarray, S: np.ndarray, true_aus) -> np.ndarray:
    """Least squares on the known active set, per subcarrier; other rows are zero."""
    Y = np.asarray(Y)
    S = np.asarray(S)
    support = np.asarray(sorted(int(k) for k in true_aus), dtype=int)
    Pt, G, K = S.shape
    Xhat = np.zeros((Pt, K, Y.shape[2]), dtype=complex)
    if support.size == 0:
        return Xhat
    if G < support.size:
        raise UnderdeterminedError(f"G={G} slots cannot resolve {support.size} active users")
    for p in range(Pt):
        Xhat[p, support] = _ls_rows(Y[p], S[p][:, support])
    return Xhat


@dataclass
class SompResult:
    support: np.ndarray
    xhat: np.ndarray
    residual_norms: list[float]
    reached_stop: bool


def somp(Y: np.ndarray, S: np.ndarray, n_support: int | None = None,
         residual_tol: float | None = None) -> SompResult:
    """Simultaneous OMP over all antennas and subcarriers.

    Each step picks the column maximising ``sum_{p,m} |s_{p,k}^H r_{p,m}|^2 / ||s_{p,k}||^2``, refits
    the selected rows by least squares and updates the residual.  Stops once
    ``n_support`` columns are chosen or the residual power per measurement falls
    to ``residual_tol``; if neither happens within ``G`` steps the best-so-far
    estimate is returned with ``reached_stop=False``.
    """
    if n_support is None and residual_tol is None:
        raise ValueError("give n_support and/or residual_tol")
    Y = np.asarray(Y, dtype=complex)
    S = np.asarray(S, dtype=complex)
    Pt, G, K = S.shape
    Sh = np.conj(np.swapaxes(S, 1, 2))
    # normalised correlation, so columns with larger norm are not favoured
    col_energy = np.sum(np.abs(S) ** 2, axis=1)[:, :, None]
    Sh = Sh / np.sqrt(np.where(col_energy > 0, col_energy, 1.0))
    resid = Y.copy()
    chosen: list[int] = []
    norms = [float(np.linalg.norm(resid))]
    coef = np.zeros((Pt, 0, Y.shape[2]), dtype=complex)
    limit = min(G, K) if n_support is None else min(n_support, G, K)

    def done() -> bool:
        if n_support is not None and len(chosen) >= n_support:
            return True
        if residual_tol is not None and norms[-1] ** 2 / resid.size <= residual_tol:
            return True
        return False

    while not done() and len(chosen) < limit:
        score = np.sum(np.abs(Sh @ resid) ** 2, axis=(0, 2))
        score[chosen] = -np.inf
        chosen.append(int(np.argmax(score)))
        coef = np.stack([np.linalg.lstsq(S[p][:, chosen], Y[p], rcond=None)[0] for p in range(Pt)])
        resid = Y - S[:, :, chosen] @ coef
        norms.append(float(np.linalg.norm(resid)))

    xhat = np.zeros((Pt, K, Y.shape[2]), dtype=complex)
    if chosen:
        xhat[:, chosen] = coef
    return SompResult(support=np.array(sorted(chosen), dtype=int), xhat=xhat,
                      residual_norms=norms, reached_stop=done())
