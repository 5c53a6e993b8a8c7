"""RIS-aided full-duplex ISAC simulation library.

Joint angle/delay localization and reflection-modulated information recovery
at a MIMO-OFDM base station: grid dictionary, row-coupled message-passing
solver, EM grid refinement, Bayesian Cramer-Rao bounds, baselines, and a
Monte-Carlo CLI harness.
"""

from .config import SystemConfig, table_ii_config, C_LIGHT
from .model import (steering_bs, steering_ris, channel_bs, retro_gradients,
                    ris_phase_profile, effective_gain, dpsk_encode, dpsk_decode,
                    fading_coefficient, beta_prior, generate_scene,
                    synthesize_frame, clean_frame, snr_db, sigma2_for_snr,
                    Scene, DeviceGroundTruth)
from .dictionary import Grid, Dictionary, build_uniform_grid
from .messages import RowPrior, GaussianMixture
from .gamp import SolverOptions, PosteriorEstimate, run_mp, HAVE_KERNEL

__all__ = [
    "SystemConfig", "table_ii_config", "C_LIGHT",
    "steering_bs", "steering_ris", "channel_bs", "retro_gradients",
    "ris_phase_profile", "effective_gain", "dpsk_encode", "dpsk_decode",
    "fading_coefficient", "beta_prior", "generate_scene", "synthesize_frame",
    "clean_frame", "snr_db", "sigma2_for_snr", "Scene", "DeviceGroundTruth",
    "Grid", "Dictionary", "build_uniform_grid",
    "RowPrior", "GaussianMixture",
    "SolverOptions", "PosteriorEstimate", "run_mp", "HAVE_KERNEL",
]
