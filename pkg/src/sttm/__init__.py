"""Cross-subject fMRI-to-embedding decoding on a numpy autodiff core.

Per-subject adapters feed a shared backbone that emits token embeddings
aligned to visual/text targets by contrastive losses, a masked diffusion
prior refines them, and a guided low-level head reconstructs image latents.
Hot kernels run through numba when available; set STTM_BACKEND=numpy to force
the portable path.
"""

from .autodiff import Tensor, no_grad
from .config import ConfigError, RunConfig, load_config, validate_config
from .datamodel import SynthSpec, generate_synthetic, write_synth
from .kernels import active_backend, set_backend
from .rng import Rng
from .tensorio import DataError, load_checkpoint, load_manifest, read_tensor, save_checkpoint, write_tensor
from .trainer import run_eval, run_pretrain, run_train_high, run_train_low, run_transfer

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "no_grad",
    "ConfigError",
    "RunConfig",
    "load_config",
    "validate_config",
    "SynthSpec",
    "generate_synthetic",
    "write_synth",
    "active_backend",
    "set_backend",
    "Rng",
    "DataError",
    "load_checkpoint",
    "load_manifest",
    "read_tensor",
    "save_checkpoint",
    "write_tensor",
    "run_eval",
    "run_pretrain",
    "run_train_high",
    "run_train_low",
    "run_transfer",
    "__version__",
]
