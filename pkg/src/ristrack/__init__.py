"""Cross-domain UE tracking from multi-band CSI in RIS-aided systems.

Simulator (geometry, channel, uplink protocol), a small reverse-mode
autodiff engine, the hierarchical transformer tracking network, the
adversarial cross-domain training loop and its baselines, evaluation and
bound calculators, and a command-line interface.
"""

__version__ = "0.1.0"

from .config import BandConfig, ConfigError, Roi, ScenarioConfig  # noqa: E402
from .scenarios import apply_delta, default_source, desk_scale, get_scenario, preset_names  # noqa: E402
from .protocol import Dataset, generate_dataset  # noqa: E402
from .container import read_dataset, write_dataset  # noqa: E402
from .network import NetConfig, TrackingNetwork  # noqa: E402
from .training import TrainConfig, axial_mae, ce_loss  # noqa: E402
from .evaluation import BoundInputs, divergence_proxy, evaluate_tracking, lemma1_bound  # noqa: E402
from .estimator import DomainAdaptiveTracker, SequenceTracker  # noqa: E402

__all__ = [
    "BandConfig", "ConfigError", "Roi", "ScenarioConfig", "apply_delta", "default_source", "desk_scale",
    "get_scenario", "preset_names", "Dataset", "generate_dataset", "read_dataset", "write_dataset",
    "NetConfig", "TrackingNetwork", "TrainConfig", "axial_mae", "ce_loss", "BoundInputs",
    "divergence_proxy", "evaluate_tracking", "lemma1_bound", "DomainAdaptiveTracker", "SequenceTracker",
]
