"""Low-dimensional knowledge-graph embeddings from a single attention block."""

from .autodiff import Tape, Tensor
from .data import (
    Dataset,
    FilterIndex,
    TripleStore,
    Vocabulary,
    add_reciprocals,
    build_filter_index,
    load_dataset,
    load_triples,
)
from .encoder import (
    EncoderConfig,
    EncoderParams,
    count_embedding_params,
    count_nonembedding_params,
    encode,
)
from .evaluation import EvalReport, evaluate, rank_query
from .model import Model
from .optim import Adam
from .training import ModelConfig, bce_loss, default_config, fit, lr_at_epoch

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "Dataset",
    "EncoderConfig",
    "EncoderParams",
    "EvalReport",
    "FilterIndex",
    "Model",
    "ModelConfig",
    "Tape",
    "Tensor",
    "TripleStore",
    "Vocabulary",
    "add_reciprocals",
    "bce_loss",
    "build_filter_index",
    "count_embedding_params",
    "count_nonembedding_params",
    "default_config",
    "encode",
    "evaluate",
    "fit",
    "load_dataset",
    "load_triples",
    "lr_at_epoch",
    "rank_query",
]
