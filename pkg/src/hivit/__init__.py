"""HiViT encoder and sparse masked-image-modeling pipeline on a small numpy autodiff core."""

from .config import ConfigError, HiViTConfig, load_config, make_config, parse_config
from .data import Corpus, FormatError, IntegrityError, load_checkpoint, save_checkpoint, synth_corpus
from .mim import DenseMaskedModel, MaskedAutoencoder, MaskPlan, oracle_check, sample_mask
from .model import HiViT
from .optim import LARS, AdamW, Schedule, layerwise_multipliers, lr_at
from .profile import ProfileReport, count_params_flops
from .tensor import Tensor, backward, no_grad
from .train import Recipe, TrainState, load_recipe, run_finetune, run_linprobe, run_pretrain

__version__ = "0.1.0"

__all__ = [
    "AdamW", "ConfigError", "Corpus", "DenseMaskedModel", "FormatError", "HiViT", "HiViTConfig",
    "IntegrityError", "LARS", "MaskPlan", "MaskedAutoencoder", "ProfileReport", "Recipe", "Schedule",
    "Tensor", "TrainState", "backward", "count_params_flops", "layerwise_multipliers", "load_checkpoint",
    "load_config", "load_recipe", "lr_at", "make_config", "no_grad", "oracle_check", "parse_config",
    "run_finetune", "run_linprobe", "run_pretrain", "sample_mask", "save_checkpoint", "synth_corpus",
]
