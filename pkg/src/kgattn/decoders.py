"""Scoring of all candidate targets for encoded (source, relation) pairs.

Two interchangeable decoders:

* inner-product ("twomult"): score[t] = <rel_repr, E[t]>, O(d) per
  candidate, no parameters of its own;
* core-tensor ("tucker"): a trainable d x d x d core contracted with the
  encoded source (mode 1), encoded relation (mode 2) and each candidate's
  raw embedding (mode 3), O(d^3) dominant cost.

Either way the target side always uses raw embedding rows, never encoder
outputs.
"""

from __future__ import annotations

import numpy as np

from .autodiff import DEFAULT_DTYPE, Tensor, matmul, reshape, sigmoid, transpose
from .layers import BatchNorm


def score_twomult(rel_repr: Tensor, entities: Tensor) -> Tensor:
    """Inner product of each encoded row against every entity row.

    rel_repr: [B, d]; entities: [|V|, d]; returns [B, |V|].
    """
    return matmul(rel_repr, transpose(entities))


def score_tucker(src_repr: Tensor, rel_repr: Tensor, core: Tensor,
                 entities: Tensor) -> Tensor:
    """Contract the core with both encoded rows, then with all entities.

    score[b, t] = sum_ijk core[i,j,k] * src_repr[b,i] * rel_repr[b,j] * E[t,k],
    realized as two mode products followed by one matmul against E^T.
    """
    d = core.shape[0]
    if core.shape != (d, d, d):
        raise ValueError(f"core must be cubic, got {core.shape}")
    mode1 = matmul(src_repr, reshape(core, (d, d * d)))        # [B, d*d]
    b = src_repr.shape[0]
    mode2 = matmul(reshape(rel_repr, (b, 1, d)), reshape(mode1, (b, d, d)))
    return matmul(reshape(mode2, (b, d)), transpose(entities))  # [B, |V|]


def scores_to_probabilities(scores: Tensor) -> Tensor:
    """Logistic sigmoid; monotone, so ranking raw scores is equivalent."""
    return sigmoid(scores)


class TwoMultDecoder:
    """Parameter-free inner-product decoder.

    ``decode_from`` selects which encoded row carries the query: the
    relation row (default) or the source row (diagnostic variant).
    """

    kind = "twomult"

    def __init__(self, decode_from: str = "relation"):
        if decode_from not in ("relation", "source"):
            raise ValueError(f"decode_from must be relation|source, got {decode_from}")
        self.decode_from = decode_from

    def score(self, src_repr, rel_repr, entities, training=False):
        query = rel_repr if self.decode_from == "relation" else src_repr
        return score_twomult(query, entities)

    def named_parameters(self):
        return {}

    def state(self):
        return {}

    def load_state(self, state):
        pass


class TuckerDecoder:
    """Trainable-core decoder with an optional batch norm on the source row."""

    kind = "tucker"

    def __init__(self, d: int, rng, dtype=DEFAULT_DTYPE, input_norm: bool = True):
        self.core = Tensor(
            rng.uniform(-1.0, 1.0, size=(d, d, d)).astype(dtype), requires_grad=True
        )
        self.input_norm = BatchNorm(d, dtype=dtype) if input_norm else None

    def score(self, src_repr, rel_repr, entities, training=False):
        if self.input_norm is not None:
            src_repr = self.input_norm(src_repr, training)
        return score_tucker(src_repr, rel_repr, self.core, entities)

    def named_parameters(self):
        out = {"decoder.core": self.core}
        if self.input_norm is not None:
            for key, tensor in self.input_norm.parameters().items():
                out[f"decoder.input_norm.{key}"] = tensor
        return out

    def state(self):
        if self.input_norm is None:
            return {}
        return {
            f"decoder.input_norm.{k}": v for k, v in self.input_norm.state().items()
        }

    def load_state(self, state):
        if self.input_norm is not None and state:
            self.input_norm.load_state(
                {k.split(".")[-1]: v for k, v in state.items()}
            )


def make_decoder(kind: str, d: int, rng, dtype=DEFAULT_DTYPE,
                 decode_from: str = "relation", tucker_input_norm: bool = True):
    if kind == "twomult":
        return TwoMultDecoder(decode_from)
    if kind == "tucker":
        return TuckerDecoder(d, rng, dtype, input_norm=tucker_input_norm)
    raise ValueError(f"unknown decoder {kind!r} (expected twomult or tucker)")
