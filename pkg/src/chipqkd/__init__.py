"""Simulator of a chip-based decoy-state BB84 link with on-chip polarization encoding."""
from .calibration import CalibrationResult, calibrate, calibrate_x, calibrate_z, grid_oracle
from .chip import ChipParams, DriveSettings, transmitter_output
from .config import ExperimentConfig, load_config
from .errors import CalibrationError, ConfigError, ContractError, UndefinedQBERError
from .finitekey import SecurityParams, optimize_params, secret_length, skr_vs_distance
from .link import ChannelState, DetectorParams, LinkParams, timing_crosstalk
from .polarization import PolarizationState, PolTransform, error_rate, fidelity
from .protocol import ObservedCounts, ProtocolParams, expected_statistics, simulate_block
from .spgd import SpgdController, run_compensation, spgd_step

__version__ = "0.1.0"
