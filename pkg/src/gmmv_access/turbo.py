"""Turbo-GMMV-AMP (alternating detection in the spatial domain and channel estimation
in the angular domain) and the adaptive-overhead access loop built on it."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .amp import AmpConfig, run_gmmv_amp
from .detect import DetectorConfig, extract_rough_reliable
from .sysmodel import to_angular, to_spatial

__all__ = [
    "TurboConfig",
    "AdaptiveConfig",
    "AccessResult",
    "run_turbo",
    "initial_overhead",
    "run_adaptive",
    "residual_power",
]


@dataclass
class TurboConfig:
    T_tur: int = 10
    lambda_aus: float = 0.8
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    amp_a: AmpConfig = field(default_factory=lambda: AmpConfig(refine_mode="spatial"))
    amp_b: AmpConfig = field(default_factory=lambda: AmpConfig(refine_mode="angular"))

    def __post_init__(self):
        if not 0.0 < self.lambda_aus <= 1.0:
            raise ValueError("lambda_aus must lie in (0, 1]")
        if self.T_tur < 1:
            raise ValueError("T_tur must be >= 1")


@dataclass
class AdaptiveConfig:
    G0: int = 1
    eps_stop: float = 0.8
    G_max: int = 64
    turbo: TurboConfig = field(default_factory=TurboConfig)

    def __post_init__(self):
        if self.G0 < 1:
            raise ValueError("G0 must be >= 1")
        if self.G_max < self.G0:
            raise ValueError("G_max must be >= G0")


@dataclass
class AccessResult:
    aus_hat: np.ndarray  # sorted user indices
    channels: np.ndarray  # (Pt, |aus_hat|, M) spatial channel rows of the detected users
    K: int
    consumed_G: int = 0
    residual_power: float = float("nan")
    converged: bool = True
    diagnostics: list[dict] = field(default_factory=list)

    @property
    def alpha_hat(self) -> np.ndarray:
        alpha = np.zeros(self.K, dtype=np.int8)
        alpha[self.aus_hat] = 1
        return alpha

    def dense(self) -> np.ndarray:
        """Channel estimate with zero rows for undetected users, shape (Pt, K, M)."""
        Pt, _, M = self.channels.shape
        X = np.zeros((Pt, self.K, M), dtype=complex)
        X[:, self.aus_hat] = self.channels
        return X


def residual_power(Y: np.ndarray, S: np.ndarray, Xhat: np.ndarray) -> float:
    """``sum_p ||Y_p - S_p Xhat_p||_F^2 / (Pt * G)``."""
    Pt, G, _ = Y.shape
    return float(np.sum(np.abs(Y - S @ Xhat) ** 2) / (Pt * G))


def run_turbo(Y: np.ndarray, S: np.ndarray, A_R: np.ndarray, cfg: TurboConfig | None = None,
              rng: np.random.Generator | None = None) -> AccessResult:
    """Alternate module A (spatial-domain detection on the residual) and module B
    (angular-domain estimation restricted to the rough active set)."""
    cfg = cfg or TurboConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    Y = np.asarray(Y, dtype=complex)
    S = np.asarray(S, dtype=complex)
    Pt, G, M = Y.shape
    K = S.shape[2]
    R = to_angular(Y, A_R)

    xi: set[int] = set()
    Y_res = Y
    omega: set[int] = set()
    W_hat = np.zeros((Pt, K, M), dtype=complex)
    diagnostics: list[dict] = []

    for j in range(1, cfg.T_tur + 1):
        # module A: activity beliefs from the residual observations
        res_a = run_gmmv_amp(Y_res, S, cfg.amp_a)
        omega, xi = extract_rough_reliable(res_a.pi, xi, cfg.detector, domain="spatial")

        # module B: angular channels of the rough active set
        W_hat = np.zeros((Pt, K, M), dtype=complex)
        cols = np.array(sorted(omega), dtype=int)
        amp_b_iters = 0
        if cols.size:
            res_b = run_gmmv_amp(R, S[:, :, cols], cfg.amp_b)
            W_hat[:, cols] = res_b.xhat
            amp_b_iters = res_b.n_iter

        xi_sorted = np.array(sorted(xi), dtype=int)
        n_gamma = int(math.floor(cfg.lambda_aus * xi_sorted.size))
        gamma_set = np.sort(rng.choice(xi_sorted, size=n_gamma, replace=False)) if n_gamma else \
            np.zeros(0, dtype=int)
        X_hat = to_spatial(W_hat, A_R)
        Y_res = Y - S[:, :, gamma_set] @ X_hat[:, gamma_set]

        assert set(gamma_set.tolist()) <= xi <= omega
        diagnostics.append({
            "iteration": j,
            "omega": len(omega),
            "xi": len(xi),
            "gamma": int(n_gamma),
            "residual_power": residual_power(Y_res, S, np.zeros_like(X_hat)),
            "amp_a_iters": res_a.n_iter,
            "amp_b_iters": amp_b_iters,
        })
        if not omega:
            break

    aus = np.array(sorted(omega), dtype=int)
    X_hat = to_spatial(W_hat, A_R)
    channels = X_hat[:, aus]
    return AccessResult(aus_hat=aus, channels=channels, K=K, consumed_G=G,
                        residual_power=residual_power(Y, S, X_hat if aus.size else np.zeros_like(X_hat)),
                        diagnostics=diagnostics)


def initial_overhead(Ka: int, K: int, M: int, mean_Sa: float) -> int:
    """``ceil(1.5 * gamma * K * E[Sa] / M)``, at least 1."""
    if M < 1:
        raise ValueError("M must be >= 1")
    if K < 1:
        raise ValueError("K must be >= 1")
    gamma = Ka / K
    # round away float noise before the ceiling (e.g. 1.5*0.1*500*11/64 = 12.890625 exactly)
    value = round(1.5 * gamma * K * mean_Sa / M, 9)
    return max(1, math.ceil(value))


def run_adaptive(source, A_R: np.ndarray, cfg: AdaptiveConfig | None = None,
                 rng: np.random.Generator | None = None) -> AccessResult:
    """Grow the pilot overhead one slot at a time until the residual power per
    measurement drops below ``eps_stop`` or ``G_max`` is reached.

    ``source`` must provide ``observe(G) -> (Y, S)`` returning the first ``G`` slots;
    earlier slots must not change as ``G`` grows.
    """
    cfg = cfg or AdaptiveConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    G = cfg.G0
    history = []
    while True:
        Y, S = source.observe(G)
        result = run_turbo(Y, S, A_R, cfg.turbo, rng)
        power = residual_power(Y, S, result.dense())
        history.append({"G": G, "residual_power": power, "n_detected": int(result.aus_hat.size)})
        if power < cfg.eps_stop or G >= cfg.G_max:
            result.consumed_G = G
            result.residual_power = power
            result.converged = power < cfg.eps_stop
            result.diagnostics = history + result.diagnostics
            return result
        G += 1
