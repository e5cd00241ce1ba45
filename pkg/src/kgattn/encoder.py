"""Single-block multi-head self-attention encoder over (source, relation) pairs.

The sequence always has length 2: one source-entity token and one relation
token. Each token type gets its own input batch norm; there is no input
projection and no positional encoding (the two slots have fixed roles).
Per pair the cost is O(d^2): the head projections dominate, attention
itself only mixes two tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    DEFAULT_DTYPE,
    Tensor,
    concat,
    dropout,
    matmul,
    relu,
    softmax_rows,
)
from .layers import BatchNorm, LayerNorm, xavier_uniform


@dataclass
class EncoderConfig:
    """Dimensions and dropout rates of the attention block.

    ``do_enc`` drops block inputs, ``do_sdp`` the attention probabilities,
    ``do_mha`` the projected attention output, and ``do_pff`` the
    feed-forward hidden activations.
    """

    d: int
    heads: int
    d_k: int
    d_v: int
    d_h: int
    do_enc: float = 0.0
    do_mha: float = 0.0
    do_sdp: float = 0.0
    do_pff: float = 0.0
    final_layer_norm: bool = True

    def __post_init__(self):
        for name in ("d", "heads", "d_k", "d_v", "d_h"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("do_enc", "do_mha", "do_sdp", "do_pff"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {rate}")


class EncoderParams:
    """All trainable weights of the block.

    Head projections are stored stacked: ``w_query[i]`` is the i-th head's
    d x d_k matrix. Projections carry no biases; the feed-forward does.
    """

    def __init__(self, config: EncoderConfig, rng, dtype=DEFAULT_DTYPE):
        self.config = config
        d, h, dk, dv, dh = (
            config.d, config.heads, config.d_k, config.d_v, config.d_h,
        )
        def param(*shape):
            return Tensor(xavier_uniform(shape, rng, dtype), requires_grad=True)

        self.w_query = param(h, d, dk)
        self.w_key = param(h, d, dk)
        self.w_value = param(h, d, dv)
        self.w_out = param(h * dv, d)
        self.ffn_w1 = param(d, dh)
        self.ffn_b1 = Tensor(np.zeros(dh, dtype=dtype), requires_grad=True)
        self.ffn_w2 = param(dh, d)
        self.ffn_b2 = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.entity_norm = BatchNorm(d, dtype=dtype)
        self.relation_norm = BatchNorm(d, dtype=dtype)
        self.out_norm = LayerNorm(d, dtype=dtype) if config.final_layer_norm else None

    def named_parameters(self) -> dict[str, Tensor]:
        out = {
            "encoder.w_query": self.w_query,
            "encoder.w_key": self.w_key,
            "encoder.w_value": self.w_value,
            "encoder.w_out": self.w_out,
            "encoder.ffn_w1": self.ffn_w1,
            "encoder.ffn_b1": self.ffn_b1,
            "encoder.ffn_w2": self.ffn_w2,
            "encoder.ffn_b2": self.ffn_b2,
        }
        for prefix, norm in (
            ("encoder.entity_norm", self.entity_norm),
            ("encoder.relation_norm", self.relation_norm),
            ("encoder.out_norm", self.out_norm),
        ):
            if norm is not None:
                for key, tensor in norm.parameters().items():
                    out[f"{prefix}.{key}"] = tensor
        return out

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, norm in (
            ("encoder.entity_norm", self.entity_norm),
            ("encoder.relation_norm", self.relation_norm),
        ):
            for key, arr in norm.state().items():
                out[f"{prefix}.{key}"] = arr
        return out

    def load_state(self, state):
        self.entity_norm.load_state(
            {k.split(".")[-1]: v for k, v in state.items() if "entity_norm" in k}
        )
        self.relation_norm.load_state(
            {k.split(".")[-1]: v for k, v in state.items() if "relation_norm" in k}
        )


def multi_head_attention(src: Tensor, rel: Tensor, params: EncoderParams,
                         training: bool = False, rng=None):
    """Two-token self-attention; returns one mixed row per token.

    ``src`` and ``rel`` are [B, d] row blocks of the same pairs. Per head,
    each token's query attends over both tokens' keys (a row-stochastic
    2-way split), mixes the value rows accordingly, and the concatenated
    head outputs are projected back to d dims.
    """
    cfg = params.config
    att_scale = 1.0 / math.sqrt(cfg.d_k)

    q_s = matmul(src, params.w_query)   # [h, B, d_k]
    q_r = matmul(rel, params.w_query)
    k_s = matmul(src, params.w_key)
    k_r = matmul(rel, params.w_key)
    v_s = matmul(src, params.w_value)   # [h, B, d_v]
    v_r = matmul(rel, params.w_value)

    def probs(q):
        logits = concat(
            [(q * k_s).sum(axis=-1, keepdims=True),
             (q * k_r).sum(axis=-1, keepdims=True)],
            axis=-1,
        )                                # [h, B, 2]
        p = softmax_rows(logits, scale=att_scale)
        return dropout(p, cfg.do_sdp, training, rng)

    def mix(p):
        return p[..., 0:1] * v_s + p[..., 1:2] * v_r   # [h, B, d_v]

    def merge_heads(mixed):
        b = mixed.shape[1]
        flat = mixed.transpose((1, 0, 2)).reshape(b, cfg.heads * cfg.d_v)
        return matmul(flat, params.w_out)              # [B, d]

    out_s = merge_heads(mix(probs(q_s)))
    out_r = merge_heads(mix(probs(q_r)))
    return out_s, out_r


def _feed_forward(x: Tensor, params: EncoderParams, training: bool, rng):
    hidden = relu(matmul(x, params.ffn_w1) + params.ffn_b1)
    hidden = dropout(hidden, params.config.do_pff, training, rng)
    return matmul(hidden, params.ffn_w2) + params.ffn_b2


def encode(e_src: Tensor, e_rel: Tensor, params: EncoderParams,
           training: bool = False, rng=None):
    """Full block: norms, attention, residuals, token-wise feed-forward.

    ``e_src``/``e_rel`` are [B, d] embedding rows of B pairs. Returns the
    contextualized rows (src_repr, rel_repr), both [B, d]. Pipeline order:
    per-token batch norm, input dropout, multi-head attention (probability
    and output dropout inside), residual, feed-forward with hidden dropout,
    residual, then the optional shared layer norm.
    """
    cfg = params.config
    src = dropout(params.entity_norm(e_src, training), cfg.do_enc, training, rng)
    rel = dropout(params.relation_norm(e_rel, training), cfg.do_enc, training, rng)

    att_s, att_r = multi_head_attention(src, rel, params, training, rng)
    src = src + dropout(att_s, cfg.do_mha, training, rng)
    rel = rel + dropout(att_r, cfg.do_mha, training, rng)

    src = src + _feed_forward(src, params, training, rng)
    rel = rel + _feed_forward(rel, params, training, rng)

    if params.out_norm is not None:
        src = params.out_norm(src)
        rel = params.out_norm(rel)
    return src, rel


# -- parameter accounting -------------------------------------------------


def parameter_shapes(config: EncoderConfig, decoder: str,
                     tucker_input_norm: bool = True) -> dict[str, tuple]:
    """Enumerate every trainable non-embedding tensor with its shape."""
    d, h = config.d, config.heads
    shapes = {
        "encoder.w_query": (h, d, config.d_k),
        "encoder.w_key": (h, d, config.d_k),
        "encoder.w_value": (h, d, config.d_v),
        "encoder.w_out": (h * config.d_v, d),
        "encoder.ffn_w1": (d, config.d_h),
        "encoder.ffn_b1": (config.d_h,),
        "encoder.ffn_w2": (config.d_h, d),
        "encoder.ffn_b2": (d,),
        "encoder.entity_norm.gamma": (d,),
        "encoder.entity_norm.beta": (d,),
        "encoder.relation_norm.gamma": (d,),
        "encoder.relation_norm.beta": (d,),
    }
    if config.final_layer_norm:
        shapes["encoder.out_norm.gamma"] = (d,)
        shapes["encoder.out_norm.beta"] = (d,)
    if decoder == "tucker":
        shapes["decoder.core"] = (d, d, d)
        if tucker_input_norm:
            shapes["decoder.input_norm.gamma"] = (d,)
            shapes["decoder.input_norm.beta"] = (d,)
    elif decoder != "twomult":
        raise ValueError(f"unknown decoder {decoder!r}")
    return shapes


def count_nonembedding_params(config: EncoderConfig, decoder: str,
                              tucker_input_norm: bool = True) -> int:
    """Exact count of trainable non-embedding scalars (encoder + decoder)."""
    return sum(
        math.prod(shape)
        for shape in parameter_shapes(config, decoder, tucker_input_norm).values()
    )


def count_embedding_params(vocab, d: int) -> int:
    """(|V| + 2|R|) * d: entity rows plus reciprocal-augmented relation rows."""
    return (vocab.n_entities + 2 * vocab.n_relations) * d
