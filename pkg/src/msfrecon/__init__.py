"""Sparse-view CT reconstruction with plug-and-play consensus of plane-wise denoisers."""

__version__ = "0.1.0"

from .analytic import FilterSpec, fbp
from .denoise import (BlockMatchConfig, DenoiserSpec, apply_denoiser, apply_plane_denoiser,
                      bm3d_denoise_2d, bm4d_denoise_3d, search_cost)
from .geometry import (GeometryError, ProjectionOperator, ScanGeometry, Sinogram, Volume,
                       WeightMap, backproject, project)
from .mbir import CGParams, ConvergenceError, MrfSpec, conjugate_gradient, mrf_prox, reconstruct_mbir
from .metrics import nrmse, psnr, ssim
from .phantom import generate_phantom
from .pipeline import ExperimentConfig, MetricsReport, compare_methods, synthesize, tune_sigmas
from .solver import (AgentSpec, ConsensusState, PnPConfig, ResidualTrace, build_bm4d_agents,
                     build_msf_agents, consensus_step, data_fidelity_prox, residuals, run_pnp)

__all__ = [
    "AgentSpec", "BlockMatchConfig", "CGParams", "ConsensusState", "ConvergenceError",
    "DenoiserSpec", "ExperimentConfig", "FilterSpec", "GeometryError", "MetricsReport",
    "MrfSpec", "PnPConfig", "ProjectionOperator", "ResidualTrace", "ScanGeometry", "Sinogram",
    "Volume", "WeightMap", "apply_denoiser", "apply_plane_denoiser", "backproject",
    "bm3d_denoise_2d", "bm4d_denoise_3d", "build_bm4d_agents", "build_msf_agents",
    "compare_methods", "conjugate_gradient", "consensus_step", "data_fidelity_prox", "fbp",
    "generate_phantom", "mrf_prox", "nrmse", "project", "psnr", "reconstruct_mbir",
    "residuals", "run_pnp", "search_cost", "ssim", "synthesize", "tune_sigmas",
]
