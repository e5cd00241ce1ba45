"""Embedding tables + encoder + decoder assembled into one trainable model."""

from __future__ import annotations

import numpy as np

from .autodiff import DEFAULT_DTYPE, Tensor, take_rows
from .decoders import make_decoder
from .encoder import EncoderParams, encode
from .layers import xavier_uniform


class Model:
    """Scores (source, relation) queries against every entity.

    Relation rows cover the reciprocal-augmented id range [0, 2|R|).
    Parameters and the decoder are drawn from one seeded rng stream, so a
    (config, vocab sizes, seed) triple pins the initialization exactly.
    """

    def __init__(self, config, n_entities: int, n_relations: int,
                 rng=None, dtype=DEFAULT_DTYPE):
        if rng is None:
            rng = np.random.default_rng((config.seed, 11))
        self.config = config
        self.n_entities = n_entities
        self.n_relations = n_relations
        self.dtype = dtype
        d = config.d
        self.entities = Tensor(
            xavier_uniform((n_entities, d), rng, dtype), requires_grad=True
        )
        self.relations = Tensor(
            xavier_uniform((2 * n_relations, d), rng, dtype), requires_grad=True
        )
        self.encoder = EncoderParams(config.encoder_config(), rng, dtype)
        self.decoder = make_decoder(
            config.decoder, d, rng, dtype,
            decode_from=config.decode_from,
            tucker_input_norm=config.tucker_input_norm,
        )

    def encode_queries(self, sources, relations, training=False, rng=None):
        e_src = take_rows(self.entities, sources)
        e_rel = take_rows(self.relations, relations)
        return encode(e_src, e_rel, self.encoder, training, rng)

    def score_queries(self, sources, relations, training=False, rng=None) -> Tensor:
        """[B, |V|] raw scores for B queries against all entities."""
        src_repr, rel_repr = self.encode_queries(sources, relations, training, rng)
        return self.decoder.score(src_repr, rel_repr, self.entities, training)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"entities": self.entities, "relations": self.relations}
        out.update(self.encoder.named_parameters())
        out.update(self.decoder.named_parameters())
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        """All arrays needed to restore the model: params + running stats."""
        out = {f"param/{k}": p.data for k, p in self.named_parameters().items()}
        for key, arr in {**self.encoder.state(), **self.decoder.state()}.items():
            out[f"state/{key}"] = arr
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.named_parameters()
        for key, arr in state.items():
            if key.startswith("param/"):
                name = key[len("param/"):]
                if name not in params:
                    raise KeyError(f"unexpected parameter {name!r} in checkpoint")
                if params[name].data.shape != arr.shape:
                    raise ValueError(
                        f"shape mismatch for {name}: model "
                        f"{params[name].data.shape} vs checkpoint {arr.shape}"
                    )
                params[name].data = arr.astype(params[name].data.dtype).copy()
        enc_state = {
            k[len("state/"):]: v for k, v in state.items()
            if k.startswith("state/encoder.")
        }
        dec_state = {
            k[len("state/"):]: v for k, v in state.items()
            if k.startswith("state/decoder.")
        }
        if enc_state:
            self.encoder.load_state(enc_state)
        self.decoder.load_state(dec_state)
