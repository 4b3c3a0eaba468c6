"""Uncertainty-aware cross-modal retrieval from frozen vision-language
embeddings: texts become directional distributions (vMF / power spherical)
on the unit hypersphere via a small trainable adapter, images stay
deterministic, and training, inference and evaluation run entirely from
precomputed embedding files."""

from .adapter import (
    AdapterConfig,
    AdapterParams,
    Model,
    apply_adapter,
    decompose,
    forward,
    init_adapter,
    init_model,
)
from .dataio import (
    FileFormatError,
    PairedEmbeddingDataset,
    SynthConfig,
    gen_synthetic,
    load_checkpoint,
    read_embeddings,
    read_pairs,
    save_checkpoint,
    write_embeddings,
)
from .directional import (
    GaussParams,
    PsParams,
    VmfParams,
    bessel_i_series,
    gauss_log_pdf,
    log_gamma,
    ps_log_normalizer,
    ps_log_pdf,
    sample_vmf,
    sphere_log_surface_area,
    vmf_log_normalizer_approx,
    vmf_log_pdf,
)
from .evaluation import EvalReport, bin_by_uncertainty, build_report, r_squared, recall_at_k, spearman
from .inference import ClassifyDecision, Ranking, classify, retrieve_i2t, retrieve_t2i
from .objective import LikelihoodMatrix, LossValue, infonce, likelihood_matrix, siglip_loss, symmetrize_kernel
from .trainer import TrainConfig, TrainHistory, cosine_lr, sgd_momentum_step, train

__all__ = [
    "AdapterConfig",
    "AdapterParams",
    "ClassifyDecision",
    "EvalReport",
    "FileFormatError",
    "GaussParams",
    "LikelihoodMatrix",
    "LossValue",
    "Model",
    "PairedEmbeddingDataset",
    "PsParams",
    "Ranking",
    "SynthConfig",
    "TrainConfig",
    "TrainHistory",
    "VmfParams",
    "apply_adapter",
    "bessel_i_series",
    "bin_by_uncertainty",
    "build_report",
    "classify",
    "cosine_lr",
    "decompose",
    "forward",
    "gauss_log_pdf",
    "gen_synthetic",
    "infonce",
    "init_adapter",
    "init_model",
    "likelihood_matrix",
    "load_checkpoint",
    "log_gamma",
    "ps_log_normalizer",
    "ps_log_pdf",
    "r_squared",
    "read_embeddings",
    "read_pairs",
    "recall_at_k",
    "retrieve_i2t",
    "retrieve_t2i",
    "sample_vmf",
    "save_checkpoint",
    "sgd_momentum_step",
    "siglip_loss",
    "spearman",
    "sphere_log_surface_area",
    "symmetrize_kernel",
    "train",
    "vmf_log_normalizer_approx",
    "vmf_log_pdf",
    "write_embeddings",
]
