"""Grant-free massive access: joint activity detection and channel estimation with
GMMV-AMP, its turbo and adaptive-overhead extensions, state evolution and baselines."""

from .amp import AmpConfig, AmpDivergenceError, AmpResult, Hyperparams, denoise, run_gmmv_amp
from .baselines import UnderdeterminedError, oracle_ls, somp
from .detect import DetectorConfig, bi_ad, cg_ad, detection_error_probability, extract_rough_reliable
from .sysmodel import (
    ChannelRealization,
    InvalidStateError,
    ObservationSource,
    SystemConfig,
    generate_channels,
    generate_pilots,
    load_config,
    make_angular_transform,
    synthesize_observations,
)
from .turbo import AccessResult, AdaptiveConfig, TurboConfig, initial_overhead, run_adaptive, run_turbo

__version__ = "0.1.0"
