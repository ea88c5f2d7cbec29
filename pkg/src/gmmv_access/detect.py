"""Activity detectors: channel-gain based (CG-AD), belief-indicator based (BI-AD),
and the rough/reliable active-set split used by the turbo receiver."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DetectorConfig",
    "ActivityEstimate",
    "cg_ad",
    "bi_ad",
    "bi_fraction",
    "extract_rough_reliable",
    "detection_error_probability",
]


@dataclass(frozen=True)
class DetectorConfig:
    eps_cg_ratio: float = 0.01
    p_cg: float = 0.9
    eps_bi_spa: float = 0.5
    p_bi_spa: float = 0.9
    s_min_a: int = 8
    eps_det: float = 0.4
    eps_rel: float = 0.9

    def __post_init__(self):
        for name in ("eps_cg_ratio", "p_cg", "eps_bi_spa", "p_bi_spa", "eps_det", "eps_rel"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")
        if self.s_min_a < 1:
            raise ValueError("s_min_a must be >= 1")

    def p_bi(self, domain: str, M: int) -> float:
        if domain == "spatial":
            return self.p_bi_spa
        if domain == "angular":
            return self.p_bi_spa * self.s_min_a / M
        raise ValueError(f"unknown domain {domain!r}")


@dataclass
class ActivityEstimate:
    alpha_hat: np.ndarray  # (K,) in {0, 1}
    scores: np.ndarray  # (K,) fraction of entries above threshold

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.alpha_hat)


def _fraction_above(values: np.ndarray, eps: float) -> np.ndarray:
    # r(x; eps) = 1 iff |x| > eps, averaged over subcarriers and antennas per user
    return np.mean(np.abs(values) > eps, axis=(0, 2))


def cg_ad(xhat: np.ndarray, cfg: DetectorConfig = DetectorConfig()) -> ActivityEstimate:
    xhat = np.asarray(xhat)
    if xhat.size == 0:
        raise ValueError("empty channel estimate")
    eps = cfg.eps_cg_ratio * np.max(np.abs(xhat))
    scores = _fraction_above(xhat, eps)
    return ActivityEstimate((scores >= cfg.p_cg).astype(np.int8), scores)


def bi_fraction(pi: np.ndarray, eps: float) -> np.ndarray:
    return _fraction_above(np.asarray(pi, dtype=float), eps)


def bi_ad(pi: np.ndarray, domain: str = "spatial",
          cfg: DetectorConfig = DetectorConfig()) -> ActivityEstimate:
    pi = np.asarray(pi, dtype=float)
    p_bi = cfg.p_bi(domain, pi.shape[2])
    scores = bi_fraction(pi, cfg.eps_bi_spa)
    return ActivityEstimate((scores >= p_bi).astype(np.int8), scores)


def extract_rough_reliable(pi: np.ndarray, prev_reliable, cfg: DetectorConfig = DetectorConfig(),
                           domain: str = "spatial") -> tuple[set[int], set[int]]:
    """Rough set (threshold ``eps_det``) and reliable set (``eps_rel``), both unioned
    with the previously reliable users."""
    pi = np.asarray(pi, dtype=float)
    p_bi = cfg.p_bi(domain, pi.shape[2])
    prev = {int(k) for k in prev_reliable}
    omega = prev | {int(k) for k in np.flatnonzero(bi_fraction(pi, cfg.eps_det) >= p_bi)}
    xi = prev | {int(k) for k in np.flatnonzero(bi_fraction(pi, cfg.eps_rel) >= p_bi)}
    # a stricter threshold can only shrink the per-user fraction
    assert xi <= omega
    return omega, xi


def detection_error_probability(alpha_hat, alpha) -> float:
    alpha_hat = np.asarray(alpha_hat, dtype=int)
    alpha = np.asarray(alpha, dtype=int)
    return float(np.sum(np.abs(alpha_hat - alpha)) / alpha.size)
