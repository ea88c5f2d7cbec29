"""Monte Carlo state evolution for GMMV-AMP.

The matrix recovery problem is replaced by ``K_tilde * M * Ptilde`` scalar channels
``C = x + sqrt((sigma + K_tilde e) / G_tilde) z`` whose effective noise is driven by the
current MSE ``e`` and mean posterior variance ``vartheta``.  The same denoiser, EM
updates for the prior and sparsity refinement as in :mod:`gmmv_access.amp` are used.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .amp import GAMMA_MAX, GAMMA_MIN, L_CLAMP, Hyperparams, refine_sparsity_ratio
from .sysmodel import SystemConfig, _crandn, generate_channels

__all__ = ["SeConfig", "SeTrace", "run_state_evolution", "se_noise_variance", "write_trace_csv"]

_TINY = 1e-300


def se_noise_variance(gamma: float, K: int, M: int, snr_db: float) -> float:
    """Per-measurement noise variance giving ``snr_db`` when ``gamma * K`` users with unit
    row energy transmit unit-power pilots."""
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    return gamma * K / (M * 10.0 ** (snr_db / 10.0))


@dataclass
class SeConfig:
    gamma: float = 0.1
    kappa: float = 0.12
    M: int = 32
    Ptilde: int = 4
    K_tilde: int = 2000
    rho: float = 0.3
    T_amp: int = 200
    eta: float = 1e-5
    sigma0: float | None = None  # defaults to the value implied by snr_db
    snr_db: float = 30.0
    refine_mode: str = "spatial"
    l_form: str = "halved"
    Sa_range: tuple[int, int] = (8, 14)
    pathloss: bool = True
    seed: int = 0
    # start values of (e, vartheta, sigma); the algorithm starts from (1, 1, 1)
    e_init: float = 1.0
    vartheta_init: float = 1.0
    sigma_init: float = 1.0
    # hold the prior and noise fixed instead of tracking them
    fixed_hyperparams: Hyperparams | None = None

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 < self.kappa <= 1.0:
            raise ValueError("kappa must lie in (0, 1]")
        if self.K_tilde < 100:
            raise ValueError("K_tilde must be >= 100")
        if round(self.gamma * self.K_tilde) < 1:
            raise ValueError("K_tilde too small: gamma * K_tilde < 1")
        if round(self.kappa * self.K_tilde) < 1:
            raise ValueError("K_tilde too small: kappa * K_tilde < 1")
        if self.M < 1 or self.Ptilde < 1:
            raise ValueError("M and Ptilde must be >= 1")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")
        if min(self.e_init, self.vartheta_init, self.sigma_init) < 0:
            raise ValueError("initial e, vartheta and sigma must be >= 0")
        if self.sigma0 is not None and self.sigma0 < 0:
            raise ValueError("sigma0 must be >= 0")

    @property
    def Ka_tilde(self) -> int:
        return int(round(self.gamma * self.K_tilde))

    @property
    def G_tilde(self) -> int:
        return int(round(self.kappa * self.K_tilde))

    @property
    def noise_var(self) -> float:
        if self.sigma0 is not None:
            return self.sigma0
        return se_noise_variance(self.gamma, self.K_tilde, self.M, self.snr_db)

    def system_config(self) -> SystemConfig:
        return SystemConfig(K=self.K_tilde, Ka=self.Ka_tilde, M=self.M, Ptilde=self.Ptilde,
                            G=self.G_tilde, snr_db=self.snr_db, Sa_range=self.Sa_range,
                            channel_mode="ongrid", pathloss=self.pathloss, seed=self.seed)


@dataclass
class SeTrace:
    e: list[float]
    vartheta: list[float]
    converged: bool = False
    C_history: list[np.ndarray] = field(default_factory=list, repr=False)
    D_history: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def final_mse(self) -> float:
        return self.e[-1]

    @property
    def final_mse_db(self) -> float:
        return 10.0 * math.log10(self.e[-1]) if self.e[-1] > 0 else -math.inf


def run_state_evolution(cfg: SeConfig, samples: np.ndarray | None = None,
                        keep_history: bool = False) -> SeTrace:
    """Track ``(e, vartheta)`` over AMP iterations on Monte Carlo scalar channels.

    ``samples`` overrides the drawn channel samples (shape ``(Ptilde, K_tilde, M)``).
    ``keep_history`` stores the damped ``C`` and ``D`` of every iteration.
    """
    rng = np.random.default_rng(cfg.seed)
    if samples is None:
        X = generate_channels(cfg.system_config(), rng).X
    else:
        X = np.asarray(samples, dtype=complex)
        if X.ndim != 3:
            raise ValueError("samples must have shape (Ptilde, K_tilde, M)")
    Pt, Kt, M = X.shape
    Gt = cfg.G_tilde
    sigma0 = cfg.noise_var
    # one noise realisation per sample, reused so that damping keeps C consistent with D
    z = _crandn(rng, X.shape)

    learn = cfg.fixed_hyperparams is None
    if learn:
        hp = Hyperparams(mu=np.zeros((Pt, 1, M), dtype=complex), tau=np.ones((Pt, 1, M)),
                         sigma=np.full((1, 1, 1), cfg.sigma_init), gamma=np.full(X.shape, cfg.gamma))
    else:
        hp = cfg.fixed_hyperparams.copy()
    sigma = max(float(np.mean(hp.sigma)), _TINY)

    e, vt = cfg.e_init, cfg.vartheta_init
    trace = SeTrace(e=[e], vartheta=[vt])
    C_prev = D_prev = None
    half = 0.5 if cfg.l_form == "halved" else 1.0
    shape = X.shape
    out = tuple(np.empty(shape, dtype=dt) for dt in (complex, float, float, complex, float))

    for _ in range(cfg.T_amp):
        C = X + math.sqrt((sigma + Kt * e) / Gt) * z
        D = np.full(shape, max((sigma + Kt * vt) / Gt, _TINY))
        if C_prev is not None:
            C = cfg.rho * C_prev + (1.0 - cfg.rho) * C
            D = cfg.rho * D_prev + (1.0 - cfg.rho) * D
        C_prev, D_prev = C, D
        if keep_history:
            trace.C_history.append(C.copy())
            trace.D_history.append(D.copy())

        if not _kernels.denoise_kernel(C, D, np.broadcast_to(hp.mu, shape),
                                       np.broadcast_to(hp.tau, shape),
                                       np.broadcast_to(hp.gamma, shape), half, L_CLAMP, *out):
            raise ValueError("non-finite state-evolution iterate")
        g_a, g_c, pi, A, B = out
        diff = g_a - X
        e_new = float(np.mean(diff.real ** 2 + diff.imag ** 2))
        vt_new = float(np.mean(g_c))

        if learn:
            mu = np.empty((Pt, 1, M), dtype=complex)
            tau = np.empty((Pt, 1, M))
            _kernels.em_prior_kernel(pi, A, B, hp.mu, hp.tau, mu, tau)
            sigma = (sigma0 + e) / (1.0 + vt / sigma) + sigma * vt / (sigma + vt)
            sigma = max(sigma, _TINY)
            gamma = np.clip(refine_sparsity_ratio(np.clip(pi, GAMMA_MIN, GAMMA_MAX),
                                                  cfg.refine_mode), GAMMA_MIN, GAMMA_MAX)
            hp = Hyperparams(mu=mu, tau=np.maximum(tau, _TINY), sigma=np.full((1, 1, 1), sigma),
                             gamma=gamma)

        # relative change, so the stopping point does not depend on the channel power scale
        delta = abs(e_new - e) / e if e > 0 else (0.0 if e_new == 0 else np.inf)
        e, vt = e_new, vt_new
        trace.e.append(e)
        trace.vartheta.append(vt)
        if delta < cfg.eta:
            trace.converged = True
            break
    return trace


def write_trace_csv(trace: SeTrace, path: str | Path) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "e", "vartheta"])
            for i, (e, v) in enumerate(zip(trace.e, trace.vartheta), start=1):
                w.writerow([i, repr(e), repr(v)])
    except OSError as exc:
        raise OSError(f"cannot write state-evolution trace to {path}: {exc}") from exc
