from .config import ExperimentConfig, ExperimentSettings, read_config, write_config
from .runner import (
    ConfigError,
    RunResult,
    SweepRow,
    falsify,
    read_csv,
    run,
    sweep_q,
    theoretical_bound,
    write_counterexamples_csv,
    write_csv,
    write_sweep_csv,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ExperimentSettings",
    "RunResult",
    "SweepRow",
    "falsify",
    "read_config",
    "read_csv",
    "run",
    "sweep_q",
    "theoretical_bound",
    "write_config",
    "write_counterexamples_csv",
    "write_csv",
    "write_sweep_csv",
]
