"""System model: scenario configuration, user activity, massive-MIMO channels,
random-access pilots and noisy pilot observations.

Array layout used throughout the package (``Pt`` = processed pilot subcarriers):

* channels ``X``, ``W``: ``(Pt, K, M)``
* pilots ``S``: ``(Pt, G, K)``
* observations ``Y``, ``R``: ``(Pt, G, M)``
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

__all__ = [
    "InvalidStateError",
    "SystemConfig",
    "ChannelRealization",
    "PilotBook",
    "PilotStream",
    "Observations",
    "ObservationSource",
    "make_angular_transform",
    "array_response",
    "pilot_frequencies",
    "generate_activity",
    "generate_channels",
    "generate_pilots",
    "noise_variance_from_snr",
    "synthesize_observations",
    "to_angular",
    "to_spatial",
    "angular_sparsity_level",
    "load_config",
    "parse_config_text",
]


class InvalidStateError(RuntimeError):
    """Raised when inputs are well-formed but describe an unusable state."""


def _crandn(rng: np.random.Generator, shape, var: float = 1.0) -> np.ndarray:
    # CN(0, var): real and imaginary parts each N(0, var/2)
    z = rng.standard_normal((*np.atleast_1d(shape), 2))
    return (z[..., 0] + 1j * z[..., 1]) * math.sqrt(var / 2.0)


@dataclass(frozen=True)
class SystemConfig:
    K: int = 500
    Ka: int = 50
    M: int = 16
    N: int = 2048
    Ncp: int = 64
    P: int = 64
    Ptilde: int = 1
    G: int = 58
    snr_db: float = 30.0
    carrier_hz: float = 2e9
    bandwidth_hz: float = 10e6
    cell_radius_km: float = 1.0
    min_distance_km: float = 0.25
    L_range: tuple[int, int] = (8, 40)
    delta_range_deg: tuple[float, float] = (20.0, 40.0)
    aoa_range_deg: tuple[float, float] = (-60.0, 60.0)
    Sa_range: tuple[int, int] = (8, 14)
    channel_mode: str = "ongrid"
    pathloss: bool = True
    identical_pilots: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.K < 1 or self.M < 1 or self.G < 1:
            raise ValueError("K, M and G must be >= 1")
        if not 0 <= self.Ka <= self.K:
            raise ValueError(f"need 0 <= Ka <= K, got Ka={self.Ka}, K={self.K}")
        if not 1 <= self.Ptilde <= self.P:
            raise ValueError(f"need 1 <= Ptilde <= P, got Ptilde={self.Ptilde}, P={self.P}")
        if self.N % self.P != 0:
            raise ValueError("N/P must be an integer")
        if self.channel_mode not in ("physical", "ongrid"):
            raise ValueError(f"unknown channel_mode {self.channel_mode!r}")
        for name in ("L_range", "delta_range_deg", "Sa_range", "aoa_range_deg"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: {lo} > {hi}")
        if self.L_range[0] < 1:
            raise ValueError("L_range must be positive")
        if self.Sa_range[0] < 1:
            raise ValueError("Sa_range must be positive")
        if not 0 < self.min_distance_km <= self.cell_radius_km:
            raise ValueError("need 0 < min_distance_km <= cell_radius_km")

    @property
    def gamma(self) -> float:
        return self.Ka / self.K

    @property
    def mean_Sa(self) -> float:
        return 0.5 * (self.Sa_range[0] + self.Sa_range[1])

    def replace(self, **changes) -> "SystemConfig":
        return dataclasses.replace(self, **changes)

    def scaled(self, factor: float) -> "SystemConfig":
        """Shrink K, Ka and G together, keeping Ka/K and G/K (approximately) fixed."""
        if factor <= 0:
            raise ValueError("scale factor must be positive")
        K = max(1, round(self.K * factor))
        Ka = min(K, max(1, round(self.Ka * factor))) if self.Ka else 0
        G = max(1, round(self.G * factor))
        return self.replace(K=K, Ka=Ka, G=G)


@dataclass
class ChannelRealization:
    activity: np.ndarray  # (K,) int8
    X: np.ndarray  # (Pt, K, M) spatial
    W: np.ndarray  # (Pt, K, M) angular, W = X A*
    rho: np.ndarray  # (K,) linear large-scale amplitude after normalisation
    Sa: np.ndarray  # (K,) nominal angular support size (0 for inactive users)

    @property
    def spatial_support(self) -> np.ndarray:
        return np.flatnonzero(self.activity)

    @property
    def angular_support(self) -> list[list[np.ndarray]]:
        """Per-user, per-subcarrier column index sets of the nonzero angular entries."""
        return [[np.flatnonzero(self.W[p, k]) for p in range(self.W.shape[0])]
                for k in range(self.W.shape[1])]

    @property
    def K(self) -> int:
        return self.X.shape[1]


@dataclass
class PilotBook:
    S: np.ndarray  # (Pt, G, K)

    @property
    def G(self) -> int:
        return self.S.shape[1]


@dataclass
class Observations:
    Y: np.ndarray  # (Pt, G, M)
    R: np.ndarray  # (Pt, G, M)
    noise_var: float


def make_angular_transform(M: int) -> np.ndarray:
    """Unitary DFT matrix ``A[m, n] = exp(-2j*pi*m*n/M) / sqrt(M)``."""
    if M < 1:
        raise ValueError("M must be >= 1")
    idx = np.arange(M)
    return np.exp(-2j * np.pi * np.outer(idx, idx) / M) / math.sqrt(M)


def array_response(phi, M: int) -> np.ndarray:
    """ULA response ``[1, e^{-j2pi phi}, ..., e^{-j2pi (M-1) phi}]``; vectorised over phi."""
    phi = np.asarray(phi, dtype=float)
    return np.exp(-2j * np.pi * np.multiply.outer(phi, np.arange(M)))


def to_angular(X: np.ndarray, A: np.ndarray) -> np.ndarray:
    return X @ A.conj()


def to_spatial(W: np.ndarray, A: np.ndarray) -> np.ndarray:
    return W @ A.T


def pilot_frequencies(config: SystemConfig) -> np.ndarray:
    """Baseband frequency of the first ``Ptilde`` pilot subcarriers (p = 1..Ptilde)."""
    p = np.arange(1, config.Ptilde + 1)
    Bs, N = config.bandwidth_hz, config.N
    return -Bs / 2 + Bs * (p * N / config.P - 1) / N


def generate_activity(K: int, Ka: int, rng: np.random.Generator) -> np.ndarray:
    if not 0 <= Ka <= K:
        raise ValueError(f"need 0 <= Ka <= K, got Ka={Ka}, K={K}")
    alpha = np.zeros(K, dtype=np.int8)
    alpha[rng.choice(K, size=Ka, replace=False)] = 1
    return alpha


def _user_distances(config: SystemConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    # uniform over the annulus [min_distance, radius]
    r0, r1 = config.min_distance_km, config.cell_radius_km
    u = rng.random(n)
    return np.sqrt(r0**2 + u * (r1**2 - r0**2))


def _pathloss_amplitude(d_km: np.ndarray) -> np.ndarray:
    pl_db = 128.1 + 37.6 * np.log10(d_km)
    return 10.0 ** (-pl_db / 20.0)


def _physical_rows(config: SystemConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    """Small-scale fading rows (Pt, n, M), each with unit expected energy."""
    M = config.M
    freqs = pilot_frequencies(config)
    out = np.zeros((config.Ptilde, n, M), dtype=complex)
    tau_max = config.Ncp / config.bandwidth_hz
    for i in range(n):
        L = int(rng.integers(config.L_range[0], config.L_range[1] + 1))
        delta = rng.uniform(*config.delta_range_deg)
        centre = rng.uniform(*config.aoa_range_deg)
        aoa = np.deg2rad(centre + rng.uniform(-delta / 2, delta / 2, size=L))
        phi = 0.5 * np.sin(aoa)  # d = lambda/2
        beta = _crandn(rng, L)
        delays = rng.uniform(0.0, tau_max, size=L)
        a = array_response(phi, M)  # (L, M)
        phase = np.exp(-2j * np.pi * np.outer(freqs, delays))  # (Pt, L)
        out[:, i, :] = (phase * beta) @ a
    return out / math.sqrt(M)


def _ongrid_rows(config: SystemConfig, n: int, rng: np.random.Generator):
    """Angular rows (Pt, n, M) with a contiguous (wrapping) cluster shared across p."""
    M, Pt = config.M, config.Ptilde
    W = np.zeros((Pt, n, M), dtype=complex)
    # clusters wider than the array are truncated to the full row
    Sa = np.minimum(rng.integers(config.Sa_range[0], config.Sa_range[1] + 1, size=n), M)
    start = rng.integers(0, M, size=n)
    for i in range(n):
        cols = (start[i] + np.arange(Sa[i])) % M
        W[:, i, cols] = _crandn(rng, (Pt, Sa[i]), 1.0 / Sa[i])
    return W, Sa


def generate_channels(config: SystemConfig, rng: np.random.Generator,
                      activity: np.ndarray | None = None) -> ChannelRealization:
    """Draw user activity (unless given), large-scale fading and small-scale channels.

    Active rows are scaled so the mean per-active-user row energy ``||X_p[k,:]||^2``
    (averaged over active users and subcarriers) is exactly 1.
    """
    K, M, Pt = config.K, config.M, config.Ptilde
    A = make_angular_transform(M)
    if activity is None:
        activity = generate_activity(K, config.Ka, rng)
    active = np.flatnonzero(activity)
    n = active.size

    X = np.zeros((Pt, K, M), dtype=complex)
    W = np.zeros((Pt, K, M), dtype=complex)
    rho = np.zeros(K)
    Sa = np.zeros(K, dtype=int)
    if n == 0:
        return ChannelRealization(activity, X, W, rho, Sa)

    if config.pathloss:
        amp = _pathloss_amplitude(_user_distances(config, n, rng))
    else:
        amp = np.ones(n)

    if config.channel_mode == "ongrid":
        Wa, sa = _ongrid_rows(config, n, rng)
        Xa = to_spatial(Wa, A)
    else:
        Xa = _physical_rows(config, n, rng)
        sa = np.zeros(n, dtype=int)

    Xa = Xa * amp[None, :, None]
    energy = np.mean(np.sum(np.abs(Xa) ** 2, axis=2))
    scale = 1.0 / math.sqrt(energy)
    X[:, active, :] = Xa * scale
    rho[active] = amp * scale
    if config.channel_mode == "ongrid":
        W[:, active, :] = Wa * (amp * scale)[None, :, None]
        Sa[active] = sa
    else:
        W = to_angular(X, A)
        Sa[active] = [_dominant_support_size(W[:, k, :]) for k in active]
    return ChannelRealization(activity, X, W, rho, Sa)


def _dominant_support_size(rows: np.ndarray, fraction: float = 0.9) -> int:
    """Smallest number of angular bins holding ``fraction`` of the (subcarrier-summed) energy."""
    e = np.sort(np.sum(np.abs(rows) ** 2, axis=0))[::-1]
    c = np.cumsum(e)
    return int(np.searchsorted(c, fraction * c[-1]) + 1)


def angular_sparsity_level(W: np.ndarray, rel_threshold: float = 0.0) -> int:
    """Max over (p, m) of the number of nonzero entries in column ``W_p[:, m]``.

    With ``rel_threshold > 0`` an entry counts only if its power exceeds that fraction
    of its row's peak power (useful for leaky physical channels).
    """
    power = np.abs(W) ** 2
    if rel_threshold > 0:
        peak = power.max(axis=2, keepdims=True)
        nz = power > rel_threshold * np.where(peak > 0, peak, np.inf)
    else:
        nz = power > 0
    return int(nz.sum(axis=1).max()) if nz.size else 0


class PilotStream:
    """Extendable per-subcarrier pilot generator.

    Row ``g`` of ``S_p`` depends only on the seed, ``p`` and ``g``, so asking for more
    slots later never changes the rows already handed out.
    """

    def __init__(self, seed_seq: np.random.SeedSequence, Ptilde: int, K: int,
                 identical: bool = False):
        self.K = K
        self.Ptilde = Ptilde
        self.identical = identical
        n_streams = 1 if identical else Ptilde
        self._rngs = [np.random.Generator(np.random.PCG64(s)) for s in seed_seq.spawn(n_streams)]
        self._rows = np.zeros((Ptilde, 0, K), dtype=complex)

    @classmethod
    def from_rng(cls, rng: np.random.Generator, Ptilde: int, K: int, identical: bool = False):
        seed = np.random.SeedSequence(rng.integers(0, 2**63, size=4).tolist())
        return cls(seed, Ptilde, K, identical)

    @property
    def G(self) -> int:
        return self._rows.shape[1]

    def extend(self, n: int = 1) -> None:
        new = np.stack([_crandn(r, (n, self.K)) for r in self._rngs])
        if self.identical:
            new = np.repeat(new, self.Ptilde, axis=0)
        self._rows = np.concatenate([self._rows, new], axis=1)

    def take(self, G: int) -> np.ndarray:
        if G > self.G:
            self.extend(G - self.G)
        return self._rows[:, :G, :].copy()


def generate_pilots(config: SystemConfig, rng: np.random.Generator) -> PilotBook:
    """i.i.d. CN(0, 1) pilot matrices, distinct across subcarriers (unless ``identical_pilots``)."""
    stream = PilotStream.from_rng(rng, config.Ptilde, config.K, config.identical_pilots)
    return PilotBook(stream.take(config.G))


def noise_variance_from_snr(config: SystemConfig, pilots: PilotBook,
                            channel: ChannelRealization) -> float:
    if math.isinf(config.snr_db) and config.snr_db > 0:
        return 0.0
    signal = pilots.S @ channel.X
    power = float(np.mean(np.abs(signal) ** 2))
    if power == 0.0:
        raise InvalidStateError("noiseless signal is identically zero; SNR is undefined")
    return power / 10.0 ** (config.snr_db / 10.0)


def synthesize_observations(channel: ChannelRealization, pilots: PilotBook, noise_var: float,
                            rng: np.random.Generator) -> Observations:
    S, X = pilots.S, channel.X
    if S.ndim != 3 or X.ndim != 3 or S.shape[0] != X.shape[0] or S.shape[2] != X.shape[1]:
        raise ValueError(f"shape mismatch: S {S.shape} vs X {X.shape}")
    if noise_var < 0:
        raise ValueError("noise variance must be non-negative")
    Y = S @ X
    if noise_var > 0:
        Y = Y + _crandn(rng, Y.shape, noise_var)
    A = make_angular_transform(X.shape[2])
    return Observations(Y=Y, R=to_angular(Y, A), noise_var=float(noise_var))


class ObservationSource:
    """Incremental pilot-slot source for the adaptive access loop.

    Holds the ground-truth channel and yields ``(Y, S)`` for the first ``G`` slots;
    noise rows come from per-subcarrier streams so they are stable under extension.
    The noise variance is fixed from the first ``G_ref`` slots.
    """

    def __init__(self, channel: ChannelRealization, config: SystemConfig,
                 seed_seq: np.random.SeedSequence, G_ref: int | None = None):
        pilot_seed, noise_seed = seed_seq.spawn(2)
        self.channel = channel
        self.config = config
        self.pilots = PilotStream(pilot_seed, config.Ptilde, config.K, config.identical_pilots)
        Pt, M = config.Ptilde, config.M
        self._noise_rngs = [np.random.Generator(np.random.PCG64(s)) for s in noise_seed.spawn(Pt)]
        self._noise = np.zeros((Pt, 0, M), dtype=complex)
        G_ref = G_ref or config.G
        self.noise_var = noise_variance_from_snr(config, PilotBook(self.pilots.take(G_ref)), channel)
        self.G = G_ref

    def append(self, n: int = 1) -> None:
        self.G += n

    def observe(self, G: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        G = self.G if G is None else G
        S = self.pilots.take(G)
        if self._noise.shape[1] < G:
            extra = G - self._noise.shape[1]
            new = np.stack([_crandn(r, (extra, self.config.M), 1.0) for r in self._noise_rngs])
            self._noise = np.concatenate([self._noise, new], axis=1)
        Y = S @ self.channel.X + math.sqrt(self.noise_var) * self._noise[:, :G, :]
        return Y, S


# ---------------------------------------------------------------------------
# flat key = value configuration files

def _convert(value: str, target: Any, key: str):
    v = value.strip()
    if isinstance(target, bool):
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected boolean, got {value!r}")
    if isinstance(target, tuple):
        parts = [p for p in v.replace("(", "").replace(")", "").replace(",", " ").split()]
        if len(parts) != 2:
            raise ValueError(f"{key}: expected two values 'lo, hi', got {value!r}")
        kind = type(target[0])
        return tuple(kind(float(p)) if kind is int else kind(p) for p in parts)
    if isinstance(target, int):
        return int(float(v)) if "e" in v.lower() else int(v)
    if isinstance(target, float):
        return float(v)
    return v


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def config_from_mapping(values: dict[str, str], base: SystemConfig | None = None) -> SystemConfig:
    base = base or SystemConfig()
    known = {f.name for f in dataclasses.fields(SystemConfig)}
    changes = {}
    for key, value in values.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        changes[key] = _convert(value, getattr(base, key), key)
    return base.replace(**changes)


def load_config(path: str | Path, seed: int | None = None) -> SystemConfig:
    values = parse_config_text(Path(path).read_text())
    known = {f.name for f in dataclasses.fields(SystemConfig)}
    cfg = config_from_mapping({k: v for k, v in values.items() if k in known})
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    return cfg
