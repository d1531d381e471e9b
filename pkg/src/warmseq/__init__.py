"""Warm-starting encoder-decoder Transformers from pre-trained stacks, on numpy."""

from .autodiff import Tensor, no_grad
from .checkpoint import TensorArchive, load_archive, save_archive, warm_start
from .config import ModelConfig
from .model import Seq2SeqModel, count_params
from .schemes import SCHEMES, build_model, get_scheme

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "TensorArchive", "load_archive", "save_archive", "warm_start",
           "ModelConfig", "Seq2SeqModel", "count_params", "SCHEMES", "build_model", "get_scheme"]
