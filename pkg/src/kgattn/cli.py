"""Command-line pipeline: prepare, train, eval, params, ablate-heads."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import sys
import time
from importlib import metadata
from pathlib import Path

import click
import numpy as np

from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .data import SPLIT_FILES, add_reciprocals, build_filter_index, load_dataset
from .encoder import count_embedding_params, count_nonembedding_params
from .evaluation import evaluate
from .training import ModelConfig, default_config, fit

# Published totals for the settings reported with this architecture,
# keyed by (dataset, decoder, d); printed next to exact counts.
REFERENCE_PARAM_COUNTS = {
    ("fb15k237", "twomult", 100): {"nfp": 1.50e6, "efp": 1.50e6},
    ("wn18rr", "twomult", 100): {"nfp": 1.14e6, "efp": 4.10e6},
}

_thread_limiter = None


def _apply_thread_cap():
    """KGE_THREADS caps BLAS/evaluation parallelism; unset keeps defaults."""
    global _thread_limiter
    cap = os.environ.get("KGE_THREADS")
    if cap:
        from threadpoolctl import threadpool_limits

        _thread_limiter = threadpool_limits(limits=int(cap))


def dataset_fingerprint(directory) -> str:
    digest = hashlib.sha256()
    for name in SPLIT_FILES:
        digest.update((Path(directory) / name).read_bytes())
    return digest.hexdigest()[:16]


def _build_config(config_path, dataset_dir, overrides: dict) -> ModelConfig:
    if config_path:
        config = ModelConfig.from_file(config_path)
    else:
        dataset = overrides.get("dataset") or Path(dataset_dir).name
        decoder = overrides.get("decoder") or "twomult"
        d = overrides.get("d") or 100
        try:
            config = default_config(dataset, decoder, d)
        except KeyError:
            click.echo(
                f"note: no shipped config row for ({dataset}, {decoder}, d={d}); "
                "starting from base defaults", err=True,
            )
            config = ModelConfig(dataset=dataset, decoder=decoder, d=d)
    data = config.to_dict()
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ModelConfig.from_dict(data)


@click.group()
def main():
    """Knowledge-graph link prediction with an attention encoder."""
    _apply_thread_cap()


@main.command()
@click.option("--dataset-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
def prepare(dataset_dir, out_dir):
    """Index a dataset: vocabulary, reciprocal stores, filter index, stats."""
    started = time.monotonic()
    dataset = load_dataset(dataset_dir)
    vocab = dataset.vocab
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab.write(out / "entities.tsv", out / "relations.tsv")

    augmented = {}
    for name in ("train", "valid", "test"):
        store = add_reciprocals(dataset.split(name), vocab)
        augmented[name] = store
        np.savez(
            out / f"{name}.npz",
            sources=store.sources, relations=store.relations, targets=store.targets,
        )
    index = build_filter_index(*augmented.values())
    entries = sorted(index.items())
    offsets = np.zeros(len(entries) + 1, dtype=np.int64)
    keys = [key for key, _ in entries]
    values = []
    for i, (_, targets) in enumerate(entries):
        offsets[i + 1] = offsets[i] + len(targets)
        values.append(targets)
    np.savez(
        out / "filter.npz",
        key_sources=np.array([k[0] for k in keys], dtype=np.int64),
        key_relations=np.array([k[1] for k in keys], dtype=np.int64),
        offsets=offsets,
        targets=np.concatenate(values) if values else np.zeros(0, dtype=np.int64),
    )

    stats = {
        "dataset": dataset.name,
        "entities": vocab.n_entities,
        "relations": vocab.n_relations,
        "train": len(dataset.train),
        "valid": len(dataset.valid),
        "test": len(dataset.test),
    }
    (out / "stats.json").write_text(json.dumps(stats, indent=2) + "\n")
    width = max(len(k) for k in stats)
    for key, value in stats.items():
        click.echo(f"{key:<{width}}  {value}")
    click.echo(f"prepared in {time.monotonic() - started:.1f}s -> {out}")


_train_options = [
    click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False)),
    click.option("--dataset-dir", required=True, type=click.Path(exists=True, file_okay=False)),
    click.option("--decoder", type=click.Choice(["twomult", "tucker"])),
    click.option("--d", type=int),
    click.option("--heads", type=int),
    click.option("--epochs", type=int),
    click.option("--seed", type=int),
    click.option("--batch-size", type=int),
    click.option("--lr", type=float),
    click.option("--eval-every", type=int),
    click.option("--label-smoothing", type=float),
    click.option("--multi-label", is_flag=True, default=None,
                 help="Mark every known target of a query as positive."),
    click.option("--decode-from", type=click.Choice(["relation", "source"])),
]


def _with_train_options(fn):
    for option in reversed(_train_options):
        fn = option(fn)
    return fn


@main.command()
@_with_train_options
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
def train(config_path, dataset_dir, out_dir, **overrides):
    """Train a model and persist checkpoints plus a metrics CSV."""
    config = _build_config(config_path, dataset_dir, overrides)
    dataset = load_dataset(dataset_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    manifest = {
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "dataset_dir": str(Path(dataset_dir).resolve()),
        "dataset_fingerprint": dataset_fingerprint(dataset_dir),
        "build": f"kgattn {metadata.version('kgattn')}",
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "outputs": {
            "metrics": str(out / "metrics.csv"),
            "best_checkpoint": str(out / "best.npz"),
            "final_checkpoint": str(out / "final.npz"),
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    started = time.monotonic()
    extra = {"dataset_fingerprint": manifest["dataset_fingerprint"]}
    result = fit(config, dataset, out_dir=out, log=click.echo, checkpoint_extra=extra)
    if result.final_checkpoint is None:
        save_checkpoint(
            out / "final.npz", result.model, result.optimizer, 0, config, extra=extra
        )
    summary = {
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "wall_seconds": round(time.monotonic() - started, 3),
        "best_epoch": result.best_epoch,
        "best_mrr": None if result.best_mrr == float("-inf") else result.best_mrr,
    }
    (out / "run_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    click.echo(f"done; outputs in {out}")


@main.command("eval")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("--dataset-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--split", default="test", type=click.Choice(["train", "valid", "test"]))
@click.option("--seed", default=0, type=int)
@click.option("--out", type=click.Path(dir_okay=False))
def eval_cmd(checkpoint, dataset_dir, split, seed, out):
    """Filtered evaluation of a checkpoint on one dataset split."""
    ckpt = load_checkpoint(checkpoint)
    recomputed = ckpt.config().config_hash()
    if recomputed != ckpt.config_hash:
        raise click.ClickException(
            f"corrupt checkpoint: manifest hash {ckpt.config_hash}, "
            f"recomputed config hash {recomputed}"
        )
    dataset = load_dataset(dataset_dir)
    expected = ckpt.manifest.get("extra", {}).get("dataset_fingerprint")
    actual = dataset_fingerprint(dataset_dir)
    if expected is not None and expected != actual:
        raise click.ClickException(
            f"checkpoint was trained on a different dataset: "
            f"checkpoint fingerprint {expected}, {dataset_dir} fingerprint {actual}"
        )
    vocab = dataset.vocab
    if ckpt.manifest["n_entities"] != vocab.n_entities:
        raise click.ClickException(
            f"vocabulary mismatch: checkpoint has {ckpt.manifest['n_entities']} "
            f"entities, dataset has {vocab.n_entities}"
        )
    model, _ = restore_model(ckpt)
    filter_index = build_filter_index(
        add_reciprocals(dataset.train, vocab),
        add_reciprocals(dataset.valid, vocab),
        add_reciprocals(dataset.test, vocab),
    )
    report = evaluate(model, dataset.split(split), filter_index, seed=seed)

    rows = [("all", report)]
    if report.target_side:
        rows.append(("target-side", report.target_side))
    if report.source_side:
        rows.append(("source-side", report.source_side))
    click.echo(f"{'direction':<12} {'mrr':>8} {'hits@1':>8} {'hits@3':>8} "
               f"{'hits@10':>8} {'count':>8}")
    for name, part in rows:
        click.echo(
            f"{name:<12} {part.mrr:>8.4f} {part.hits1:>8.4f} {part.hits3:>8.4f} "
            f"{part.hits10:>8.4f} {part.count:>8d}"
        )
    if out:
        with open(out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["split", "mrr", "hits1", "hits3", "hits10", "count"])
            writer.writerow([
                split, report.mrr, report.hits1, report.hits3, report.hits10,
                report.count,
            ])
    if not report.is_finite():
        click.echo("error: non-finite metric", err=True)
        sys.exit(3)


@main.command()
@click.option("--dataset-dir", type=click.Path(exists=True, file_okay=False))
@click.option("--n-entities", type=int, help="Vocabulary size when no dataset dir.")
@click.option("--n-relations", type=int)
@click.option("--decoder", default="twomult", type=click.Choice(["twomult", "tucker"]))
@click.option("--d", default=100, type=int)
@click.option("--heads", type=int)
def params(dataset_dir, n_entities, n_relations, decoder, d, heads):
    """Print exact non-embedding/embedding parameter counts."""
    if dataset_dir:
        dataset = load_dataset(dataset_dir)
        vocab = dataset.vocab
        dataset_name = dataset.name
    elif n_entities is not None and n_relations is not None:
        class _Vocab:
            pass

        vocab = _Vocab()
        vocab.n_entities = n_entities
        vocab.n_relations = n_relations
        known_sizes = {(14541, 237): "FB15k-237", (40943, 11): "WN18RR"}
        dataset_name = known_sizes.get((n_entities, n_relations), "custom")
    else:
        raise click.ClickException(
            "need --dataset-dir or both --n-entities and --n-relations"
        )
    overrides = {"decoder": decoder, "d": d, "dataset": dataset_name}
    if heads is not None:
        overrides["heads"] = heads
    config = _build_config(None, dataset_name, overrides)
    nfp = count_nonembedding_params(
        config.encoder_config(), decoder, config.tucker_input_norm
    )
    efp = count_embedding_params(vocab, d)
    key = (
        dataset_name.lower().replace("-", "").replace("_", ""), decoder, d,
    )
    reference = REFERENCE_PARAM_COUNTS.get(key)

    def fmt_ref(kind):
        return f"{reference[kind] / 1e6:.2f}M" if reference else "-"

    click.echo(f"dataset {dataset_name}: |V|={vocab.n_entities} "
               f"|R|={vocab.n_relations} decoder={decoder} d={d} "
               f"heads={config.heads}")
    click.echo(f"{'':<24}{'exact':>14} {'reference':>12}")
    click.echo(f"{'non-embedding (NFP)':<24}{nfp:>14,} {fmt_ref('nfp'):>12}")
    click.echo(f"{'embedding (EFP)':<24}{efp:>14,} {fmt_ref('efp'):>12}")


@main.command("ablate-heads")
@_with_train_options
@click.option("--head-list", "head_list", required=True,
              help="Comma-separated head counts, e.g. 4,8,16.")
@click.option("--budget-epochs", type=int, default=None,
              help="Shortened per-run epoch budget for desk-scale sweeps.")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
def ablate_heads(config_path, dataset_dir, head_list, budget_epochs, out_dir,
                 **overrides):
    """Train one model per head count; CSV of (heads, NFP, validation MRR)."""
    heads = [int(h) for h in head_list.split(",") if h.strip()]
    if not heads:
        raise click.ClickException("--head-list must name at least one head count")
    overrides.pop("heads", None)
    base = _build_config(config_path, dataset_dir, overrides)
    dataset = load_dataset(dataset_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    budget = budget_epochs if budget_epochs is not None else base.epochs

    results_path = out / "ablation.csv"
    with open(results_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["heads", "nfp", "mrr", "budget_epochs"])
        for h in heads:
            data = base.to_dict()
            data.update({"heads": h, "epochs": budget})
            config = ModelConfig.from_dict(data)
            nfp = count_nonembedding_params(
                config.encoder_config(), config.decoder, config.tucker_input_norm
            )
            run_dir = out / f"heads{h}"
            result = fit(config, dataset, out_dir=run_dir, log=click.echo)
            mrr = result.best_mrr if result.best_mrr != float("-inf") else ""
            writer.writerow([h, nfp, mrr, budget])
            click.echo(f"heads={h}: nfp={nfp:,} mrr={mrr}")
    click.echo(f"wrote {results_path}")


if __name__ == "__main__":
    main()
