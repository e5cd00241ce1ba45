"""1-N training with reciprocal learning, BCE loss, and stepped LR decay.

Every (source, relation) pair in a batch is scored against all entities;
the loss is binary cross-entropy with a one-hot label at the true target
(optionally smoothed, optionally multi-hot over all known targets).
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor, softplus
from .data import Dataset, add_reciprocals, batch_queries, build_filter_index, target_groups
from .encoder import EncoderConfig
from .evaluation import evaluate
from .model import Model
from .optim import Adam

METRICS_FIELDS = ("epoch", "split", "mrr", "hits1", "hits3", "hits10", "loss", "lr")


class TrainingError(RuntimeError):
    """Raised when training hits a non-finite loss."""


@dataclass
class ModelConfig:
    """Full hyper-parameter record for one run.

    The defaults are the FB15k-237 / twomult / d=100 setting; the other
    shipped rows live in ``kgattn/configs`` and are resolved by
    :func:`default_config`.
    """

    dataset: str = "FB15k-237"
    decoder: str = "twomult"
    d: int = 100
    heads: int = 64
    d_k: int = 32
    d_v: int = 50
    d_h: int = 2048
    do_enc: float = 0.4
    do_mha: float = 0.3
    do_pff: float = 0.2
    do_sdp: float = 0.1
    batch_size: int = 2048
    lr: float = 0.001
    decay_rate: float = 0.995
    decay_step: int = 2
    label_smoothing: float = 0.1
    epochs: int = 1000
    seed: int = 0
    eval_every: int = 5
    multi_label: bool = False
    decode_from: str = "relation"
    tucker_input_norm: bool = True
    early_stop_patience: int | None = None

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            d=self.d, heads=self.heads, d_k=self.d_k, d_v=self.d_v, d_h=self.d_h,
            do_enc=self.do_enc, do_mha=self.do_mha, do_sdp=self.do_sdp,
            do_pff=self.do_pff,
            # the closing layer norm is dropped when decoding with the core tensor
            final_layer_norm=self.decoder == "twomult",
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "ModelConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


def _normalize_dataset(name: str) -> str:
    return name.lower().replace("-", "").replace("_", "")


def available_default_configs() -> list[str]:
    root = resources.files("kgattn") / "configs"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".json"))


def default_config(dataset: str, decoder: str, d: int) -> ModelConfig:
    """Load the shipped config row for (dataset, decoder, d).

    Raises KeyError when no such row was published.
    """
    fname = f"{_normalize_dataset(dataset)}-{decoder}-d{d}.json"
    path = resources.files("kgattn") / "configs" / fname
    if not path.is_file():
        raise KeyError(f"no default config row {fname}; see kgattn/configs/")
    return ModelConfig.from_dict(json.loads(path.read_text()))


def lr_at_epoch(config: ModelConfig, epoch: int) -> float:
    """Stepped decay: base lr times decay_rate^(epoch // decay_step)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return config.lr * config.decay_rate ** (epoch // config.decay_step)


def bce_loss(scores: Tensor, targets, label_smoothing: float = 0.0,
             positive_sets=None) -> Tensor:
    """Mean binary cross-entropy of sigmoid(scores) against (smoothed) labels.

    ``scores`` is [B, |V|] (a single [|V|] row is accepted); ``targets``
    holds one true id per row. ``positive_sets``, when given, marks every
    listed id per row as positive (multi-label variant). Uses the stable
    logit form softplus(x) - y*x, averaged over entities then rows.
    """
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError(f"label smoothing must be in [0, 1), got {label_smoothing}")
    if scores.ndim == 1:
        scores = scores.reshape(1, scores.shape[0])
        targets = np.atleast_1d(targets)
    n_rows, n_entities = scores.shape
    if n_entities < 2:
        raise ValueError("scoring needs at least 2 candidate entities")
    labels = np.zeros((n_rows, n_entities), dtype=scores.dtype)
    if positive_sets is not None:
        for i, ids in enumerate(positive_sets):
            labels[i, ids] = 1.0
    labels[np.arange(n_rows), np.asarray(targets)] = 1.0
    if label_smoothing:
        labels = labels * (1.0 - label_smoothing) + label_smoothing / n_entities
    return (softplus(scores) - scores * labels).mean()


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    lr: float
    seconds: float
    triples_per_sec: float


def train_epoch(model: Model, store, config: ModelConfig, epoch: int,
                optimizer: Adam, positive_groups=None) -> EpochStats:
    """One pass over the (reciprocal-augmented) store: one Adam step per batch."""
    lr = lr_at_epoch(config, epoch)
    dropout_rng = np.random.default_rng((config.seed, 23, epoch))
    started = time.monotonic()
    total_loss = 0.0
    total_rows = 0
    for batch_index, batch in enumerate(
        batch_queries(store, config.batch_size, config.seed, epoch)
    ):
        sets = None
        if positive_groups is not None:
            sets = [
                positive_groups[(s, r)]
                for s, r in zip(batch.sources.tolist(), batch.relations.tolist())
            ]
        with Tape() as tape:
            scores = model.score_queries(
                batch.sources, batch.relations, training=True, rng=dropout_rng
            )
            loss = bce_loss(scores, batch.targets, config.label_smoothing, sets)
        loss_value = float(loss.item())
        if not np.isfinite(loss_value):
            raise TrainingError(
                f"non-finite loss {loss_value} (epoch {epoch}, "
                f"batch {batch_index}, lr {lr:g})"
            )
        optimizer.zero_grad()
        tape.backward(loss)
        optimizer.step(lr)
        total_loss += loss_value * len(batch)
        total_rows += len(batch)
    seconds = time.monotonic() - started
    return EpochStats(
        epoch=epoch,
        mean_loss=total_loss / max(total_rows, 1),
        lr=lr,
        seconds=seconds,
        triples_per_sec=total_rows / seconds if seconds > 0 else float("inf"),
    )


@dataclass
class FitResult:
    model: Model
    optimizer: Adam
    history: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_mrr: float = float("-inf")
    best_checkpoint: Path | None = None
    final_checkpoint: Path | None = None


def _append_metrics(path: Path, row: dict):
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
        if new:
            writer.writeheader()
        writer.writerow({k: row.get(k, "") for k in METRICS_FIELDS})


def fit(config: ModelConfig, dataset: Dataset, out_dir=None,
        log=None, checkpoint_extra: dict | None = None) -> FitResult:
    """Train for the configured epoch budget with periodic validation.

    Persists the best-validation and final checkpoints plus an append-only
    metrics CSV when ``out_dir`` is given; ``checkpoint_extra`` is stored
    verbatim in every checkpoint manifest.
    """
    from .checkpoint import save_checkpoint  # local import to avoid a cycle

    say = log or (lambda msg: None)
    vocab = dataset.vocab
    train_store = add_reciprocals(dataset.train, vocab)
    filter_index = build_filter_index(
        train_store,
        add_reciprocals(dataset.valid, vocab),
        add_reciprocals(dataset.test, vocab),
    )
    positive_groups = target_groups(train_store) if config.multi_label else None

    model = Model(config, vocab.n_entities, vocab.n_relations)
    optimizer = Adam(model.named_parameters(), lr=config.lr)
    result = FitResult(model=model, optimizer=optimizer)

    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_path = out_dir / "metrics.csv" if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    def run_validation(epoch: int):
        report = evaluate(model, dataset.valid, filter_index, seed=config.seed)
        row = {
            "epoch": epoch, "split": "valid", "mrr": f"{report.mrr:.6f}",
            "hits1": f"{report.hits1:.6f}", "hits3": f"{report.hits3:.6f}",
            "hits10": f"{report.hits10:.6f}", "lr": f"{lr_at_epoch(config, epoch):.8g}",
        }
        result.history.append(row)
        if metrics_path:
            _append_metrics(metrics_path, row)
        say(f"epoch {epoch}: valid mrr={report.mrr:.4f} hits@10={report.hits10:.4f}")
        return report

    stale_rounds = 0
    for epoch in range(config.epochs):
        stats = train_epoch(
            model, train_store, config, epoch, optimizer, positive_groups
        )
        row = {
            "epoch": epoch, "split": "train",
            "loss": f"{stats.mean_loss:.6f}", "lr": f"{stats.lr:.8g}",
        }
        result.history.append(row)
        if metrics_path:
            _append_metrics(metrics_path, row)
        say(
            f"epoch {epoch}: loss={stats.mean_loss:.4f} lr={stats.lr:.6g} "
            f"({stats.triples_per_sec:.0f} triples/s)"
        )
        is_last = epoch == config.epochs - 1
        if config.eval_every and ((epoch + 1) % config.eval_every == 0 or is_last):
            report = run_validation(epoch)
            if report.mrr > result.best_mrr:
                result.best_mrr = report.mrr
                result.best_epoch = epoch
                stale_rounds = 0
                if out_dir:
                    result.best_checkpoint = out_dir / "best.npz"
                    save_checkpoint(
                        result.best_checkpoint, model, optimizer, epoch, config,
                        extra=checkpoint_extra,
                    )
            else:
                stale_rounds += 1
                if (
                    config.early_stop_patience is not None
                    and stale_rounds >= config.early_stop_patience
                ):
                    say(f"early stop at epoch {epoch} (validation MRR plateau)")
                    break

    if out_dir:
        result.final_checkpoint = out_dir / "final.npz"
        save_checkpoint(
            result.final_checkpoint, model, optimizer,
            max(config.epochs - 1, 0), config, extra=checkpoint_extra,
        )
    return result
