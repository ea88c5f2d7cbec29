"""GMMV-AMP: AMP over several measurement matrices with a spike-and-slab prior,
EM learning of the prior/noise hyper-parameters and structured refinement of
the sparsity ratios.

All tensors carry a leading subcarrier axis: ``Y (Pt, G, M)``, ``S (Pt, G, K)``,
estimates ``(Pt, K, M)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from . import _kernels

__all__ = [
    "AmpConfig",
    "AmpDivergenceError",
    "AmpResult",
    "AmpState",
    "Hyperparams",
    "amp_iteration",
    "denoise",
    "em_init",
    "em_update",
    "initial_sparsity_ratio",
    "init_state",
    "refine_sparsity_ratio",
    "run_gmmv_amp",
]

GAMMA_MIN = 1e-12
GAMMA_MAX = 1.0 - 1e-12
L_CLAMP = 700.0
SNR0 = 100.0
_TINY = 1e-300


class AmpDivergenceError(RuntimeError):
    """Non-finite values appeared; ``last_xhat``/``last_pi`` hold the last finite iterate."""

    def __init__(self, message, last_xhat=None, last_pi=None, iteration=None):
        super().__init__(message)
        self.last_xhat = last_xhat
        self.last_pi = last_pi
        self.iteration = iteration


@dataclass
class Hyperparams:
    mu: np.ndarray  # (Pt, 1, M) complex, shared over users
    tau: np.ndarray  # (Pt, 1, M)
    sigma: np.ndarray  # (Pt, 1, 1), shared over slots and antennas
    gamma: np.ndarray  # (Pt, K, M)

    def copy(self) -> "Hyperparams":
        return Hyperparams(self.mu.copy(), self.tau.copy(), self.sigma.copy(), self.gamma.copy())


@dataclass
class AmpConfig:
    rho: float = 0.3
    T_amp: int = 200
    eta: float = 1e-5
    refine_mode: str = "spatial"
    # "halved" keeps the iteration stable when one user dominates the received power
    l_form: str = "halved"
    fixed_hyperparams: Hyperparams | None = None

    def __post_init__(self):
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("damping rho must lie in [0, 1)")
        if self.T_amp < 1:
            raise ValueError("T_amp must be >= 1")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.refine_mode not in ("spatial", "angular", "none"):
            raise ValueError(f"unknown refine_mode {self.refine_mode!r}")
        if self.l_form not in ("halved", "complex"):
            raise ValueError(f"unknown l_form {self.l_form!r}")

    def replace(self, **changes) -> "AmpConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class AmpState:
    V: np.ndarray  # (Pt, G, M) real
    Z: np.ndarray  # (Pt, G, M) complex
    xhat: np.ndarray  # (Pt, K, M) complex
    v: np.ndarray  # (Pt, K, M) real
    C: np.ndarray | None = None
    D: np.ndarray | None = None
    pi: np.ndarray | None = None
    A: np.ndarray | None = None
    B: np.ndarray | None = None
    q: int = 1


@dataclass
class AmpResult:
    xhat: np.ndarray
    pi: np.ndarray  # refined sparsity ratios returned as belief indicators
    pi_raw: np.ndarray  # per-element posterior support probabilities
    v: np.ndarray
    hyper: Hyperparams
    n_iter: int
    converged: bool
    trace: list[float] = field(default_factory=list)


def denoise(C, D, mu, tau, gamma, l_form: str = "complex"):
    """Spike-and-slab MMSE denoiser for ``C = x + CN(0, D)``.

    Prior: ``(1-gamma) delta(x) + gamma CN(x; mu, tau)``.

    Returns ``(g_a, g_c, pi, A, B)``: posterior mean, posterior variance, support
    probability, and the slab posterior mean/variance.  ``"complex"`` (the default here)
    is the exact log-likelihood ratio for circularly-symmetric Gaussians;
    ``l_form="halved"`` scales it by 1/2 (the real-Gaussian form), which softens the
    beliefs and is what :class:`AmpConfig` uses by default.
    """
    arrays = (np.asarray(C, dtype=complex), np.asarray(D, dtype=float), np.asarray(mu, dtype=complex),
              np.asarray(tau, dtype=float), np.asarray(gamma, dtype=float))
    shape = np.broadcast_shapes(*(a.shape for a in arrays))
    if len(shape) == 3:
        C, D, mu, tau, gamma = (np.broadcast_to(a, shape) for a in arrays)
    else:
        C, D, mu, tau, gamma = (np.broadcast_to(a, shape).reshape(1, 1, -1) for a in arrays)
    out = _alloc_outputs(C.shape)
    half = 0.5 if l_form == "halved" else 1.0
    if not _kernels.denoise_kernel(C, D, mu, tau, gamma, half, L_CLAMP, *out):
        raise ValueError("denoise received non-finite input")
    g_a, g_c, pi, A, B = (o.reshape(shape) for o in out)
    return g_a, g_c, pi, A, B


def _alloc_outputs(shape):
    return (np.empty(shape, dtype=complex), np.empty(shape), np.empty(shape),
            np.empty(shape, dtype=complex), np.empty(shape))


def initial_sparsity_ratio(G: int, K: int) -> float:
    """Initial sparsity ratio from the noiseless phase-transition curve at G/K."""
    delta = G / K

    def neg(c):
        psi = (1 + c * c) * stats.norm.cdf(-c) - c * stats.norm.pdf(c)
        return -(1 - 2 * psi / delta) / (1 + c * c - 2 * psi)

    grid = np.linspace(1e-3, 10.0, 101)
    vals = np.array([neg(c) for c in grid])
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    res = optimize.minimize_scalar(neg, bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-10})
    best = max(-res.fun, -vals[i])
    return float(np.clip(delta * best, GAMMA_MIN, GAMMA_MAX))


def em_init(Y: np.ndarray, S: np.ndarray) -> Hyperparams:
    """Initial hyper-parameters from the observations (SNR0 = 100)."""
    Y = np.asarray(Y)
    S = np.asarray(S)
    if Y.size == 0 or S.size == 0:
        raise ValueError("empty observations or pilots")
    Pt, G, M = Y.shape
    K = S.shape[2]
    col_energy = np.sum(np.abs(Y) ** 2, axis=1, keepdims=True)  # (Pt, 1, M)
    if not np.any(col_energy > 0):
        from .sysmodel import InvalidStateError
        raise InvalidStateError("all-zero observations")
    sigma = np.sum(col_energy, axis=2, keepdims=True) / ((SNR0 + 1.0) * G * M)
    pilot_energy = np.sum(np.abs(S) ** 2, axis=(1, 2))[:, None, None]
    tau = (col_energy - M * sigma) / pilot_energy
    fallback = col_energy / pilot_energy
    tau = np.where(tau > 0, tau, fallback)
    tau = np.maximum(tau, _TINY)
    sigma = np.maximum(sigma, _TINY)
    gamma = np.full((Pt, K, M), initial_sparsity_ratio(G, K))
    mu = np.zeros((Pt, 1, M), dtype=complex)
    return Hyperparams(mu=mu, tau=tau, sigma=sigma, gamma=gamma)


def init_state(Y: np.ndarray, S: np.ndarray, hp: Hyperparams) -> AmpState:
    Pt, G, M = Y.shape
    K = S.shape[2]
    xhat = np.broadcast_to(hp.mu, (Pt, K, M)).astype(complex)
    v = np.broadcast_to(hp.tau, (Pt, K, M)).astype(float)
    return AmpState(V=np.ones((Pt, G, M)), Z=np.array(Y, dtype=complex), xhat=xhat, v=v)


def amp_iteration(state: AmpState, Y, S, hp: Hyperparams, rho: float,
                  S2=None, l_form: str = "halved", Sh=None, S2T=None) -> AmpState:
    """One sweep of factor-node and variable-node updates plus the denoiser.

    ``S2 = |S|^2``, ``Sh = S^H`` and ``S2T = |S|^2^T`` may be passed precomputed.
    """
    if S2 is None:
        S2 = np.abs(S) ** 2
    if Sh is None:
        Sh = np.conj(np.swapaxes(S, 1, 2))
    if S2T is None:
        S2T = np.swapaxes(S2, 1, 2)
    sigma = hp.sigma
    V_new = S2 @ state.v
    Z_new = S @ state.xhat - V_new / (sigma + state.V) * (Y - state.Z)
    V = rho * state.V + (1.0 - rho) * V_new
    Z = rho * state.Z + (1.0 - rho) * Z_new

    inv = 1.0 / (sigma + V)
    D = 1.0 / (S2T @ inv)
    C = state.xhat + D * (Sh @ ((Y - Z) * inv))
    shape = C.shape
    out = _alloc_outputs(shape)
    half = 0.5 if l_form == "halved" else 1.0
    ok = _kernels.denoise_kernel(C, D, np.broadcast_to(hp.mu, shape), np.broadcast_to(hp.tau, shape),
                                 np.broadcast_to(hp.gamma, shape), half, L_CLAMP, *out)
    if not ok:
        raise AmpDivergenceError(f"non-finite AMP message at iteration {state.q}",
                                 last_xhat=state.xhat, last_pi=hp.gamma, iteration=state.q)
    xhat, v, pi, A, B = out
    return AmpState(V=V, Z=Z, xhat=xhat, v=v, C=C, D=D, pi=pi, A=A, B=B, q=state.q + 1)


def em_update(state: AmpState, hp: Hyperparams, Y) -> Hyperparams:
    """Incremental EM step: mu first, then tau with the new mu, then sigma; gamma <- pi."""
    Pt, _, M = state.pi.shape
    mu = np.empty((Pt, 1, M), dtype=complex)
    tau = np.empty((Pt, 1, M))
    _kernels.em_prior_kernel(state.pi, state.A, state.B, np.broadcast_to(hp.mu, (Pt, 1, M)),
                             np.broadcast_to(hp.tau, (Pt, 1, M)), mu, tau)
    tau = np.maximum(tau, _TINY)

    s = hp.sigma
    V = state.V
    R = Y - state.Z
    resid = R.real ** 2 + R.imag ** 2
    terms = resid / (1.0 + V / s) ** 2 + s * V / (s + V)
    sigma = np.maximum(terms.mean(axis=(1, 2), keepdims=True), _TINY)
    gamma = np.clip(state.pi, GAMMA_MIN, GAMMA_MAX)
    return Hyperparams(mu=mu, tau=tau, sigma=sigma, gamma=gamma)


def refine_sparsity_ratio(pi: np.ndarray, mode: str) -> np.ndarray:
    """Average support probabilities over structured neighbourhoods.

    ``spatial``: all (subcarrier, antenna) entries of the same user.
    ``angular``: the up-to-four neighbours in subcarrier and angle (the cell itself
    excluded, no wrap-around); a cell without neighbours is left unchanged.
    """
    pi = np.asarray(pi, dtype=float)
    if mode == "none":
        return pi.copy()
    if mode == "spatial":
        return np.broadcast_to(pi.mean(axis=(0, 2), keepdims=True), pi.shape).copy()
    if mode != "angular":
        raise ValueError(f"unknown refine mode {mode!r}")
    total = np.zeros_like(pi)
    count = np.zeros_like(pi)
    total[1:] += pi[:-1]
    count[1:] += 1
    total[:-1] += pi[1:]
    count[:-1] += 1
    total[:, :, 1:] += pi[:, :, :-1]
    count[:, :, 1:] += 1
    total[:, :, :-1] += pi[:, :, 1:]
    count[:, :, :-1] += 1
    return np.where(count > 0, total / np.maximum(count, 1), pi)


def run_gmmv_amp(Y, S, cfg: AmpConfig | None = None) -> AmpResult:
    """GMMV-AMP with EM hyper-parameter learning and sparsity-ratio refinement.

    ``Y`` may be spatial observations or their angular transform; the refinement mode
    in ``cfg`` should match.  Iterates until ``cfg.T_amp`` sweeps have run or the
    relative Frobenius change of the estimate drops below ``cfg.eta``.
    """
    cfg = cfg or AmpConfig()
    Y = np.asarray(Y, dtype=complex)
    S = np.asarray(S, dtype=complex)
    if Y.ndim != 3 or S.ndim != 3 or Y.shape[:2] != S.shape[:2]:
        raise ValueError(f"shape mismatch: Y {Y.shape} vs S {S.shape}")
    S2 = S.real ** 2 + S.imag ** 2
    Sh = np.ascontiguousarray(np.conj(np.swapaxes(S, 1, 2)))
    S2T = np.ascontiguousarray(np.swapaxes(S2, 1, 2))
    learn = cfg.fixed_hyperparams is None
    hp = em_init(Y, S) if learn else cfg.fixed_hyperparams.copy()
    state = init_state(Y, S, hp)
    pi_raw = np.array(hp.gamma, copy=True)
    trace: list[float] = []
    converged = False

    while state.q <= cfg.T_amp:
        prev = state
        state = amp_iteration(state, Y, S, hp, cfg.rho, S2=S2, l_form=cfg.l_form, Sh=Sh, S2T=S2T)
        if not (np.all(np.isfinite(state.xhat)) and np.all(np.isfinite(state.v))):
            raise AmpDivergenceError(f"non-finite AMP state at iteration {prev.q}",
                                     last_xhat=prev.xhat, last_pi=hp.gamma, iteration=prev.q)
        pi_raw = state.pi
        if learn:
            hp = em_update(state, hp, Y)
            hp.gamma = np.clip(refine_sparsity_ratio(hp.gamma, cfg.refine_mode),
                               GAMMA_MIN, GAMMA_MAX)

        change = _kernels.relative_change(state.xhat, prev.xhat)
        trace.append(float(change))
        if change < cfg.eta:
            converged = True
            break

    pi = hp.gamma if learn else np.clip(refine_sparsity_ratio(pi_raw, cfg.refine_mode), 0.0, 1.0)
    return AmpResult(xhat=state.xhat, pi=pi, pi_raw=pi_raw, v=state.v, hyper=hp,
                     n_iter=state.q - 1, converged=converged, trace=trace)
