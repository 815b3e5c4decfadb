"""Federated semantic communication with mentor distillation and SNR-driven pruning."""
from .channel import ChannelRealization, SNRSchedule, awgn_transmit, sample_schedule
from .config import ExperimentConfig, parse_config
from .data import LabeledDataset, dirichlet_partition, load_idx, synth_dataset
from .energy import EnergyRecord, LinkBudget, comm_energy, model_payload_bits, transmission_delay, uplink_rate
from .errors import ConfigError, ContractError, ProtocolError, PSFLError
from .federation import (ClientState, FLSettings, RoundRecord, adjust_mask, broadcast_update,
                         compute_prune_ratio, fedavg_aggregate, magnitude_prune, run_psfl)
from .kernels import BACKEND
from .metrics import LinearProbe, accuracy, psnr, ssim
from .models import ModelProfile, SCModel, build_model, desk_profile, sc_forward
from .params import ParameterSet
from .pld import LossBundle, pld_local_train
from .runner import compare_runs, run_experiment

__version__ = "0.1.0"
