import os
from pathlib import Path

import numpy as np
import pytest

from kgattn.data import TripleStore, Vocabulary
from kgattn.training import ModelConfig


def dataset_root() -> Path:
    return Path(os.environ.get("KGE_DATA_DIR", Path(__file__).parent.parent / "data"))


def require_dataset(name: str) -> Path:
    """Path to a benchmark split directory, or skip when it is not present."""
    path = dataset_root() / name
    if not all((path / f).is_file() for f in ("train.txt", "valid.txt", "test.txt")):
        pytest.skip(
            f"{name} split files not found under {dataset_root()} "
            "(set KGE_DATA_DIR; see README)"
        )
    return path


def build_toy_vocab(n_entities: int = 20, n_relations: int = 3) -> Vocabulary:
    vocab = Vocabulary()
    for i in range(n_entities):
        vocab.entity_id(f"e{i}")
    for i in range(n_relations):
        vocab.relation_id(f"r{i}")
    vocab.frozen = True
    return vocab


def build_toy_store(seed: int = 7, n_entities: int = 20, n_relations: int = 3,
                    n_triples: int = 50) -> TripleStore:
    rng = np.random.default_rng(seed)
    seen = set()
    while len(seen) < n_triples:
        seen.add((
            int(rng.integers(n_entities)),
            int(rng.integers(n_relations)),
            int(rng.integers(n_entities)),
        ))
    s, r, t = map(np.array, zip(*sorted(seen)))
    return TripleStore(s, r, t)


def toy_config(**overrides) -> ModelConfig:
    """Small deterministic setting used across training-level tests."""
    base = dict(
        dataset="toy", decoder="twomult", d=16, heads=4, d_k=8, d_v=8, d_h=32,
        do_enc=0.0, do_mha=0.0, do_pff=0.0, do_sdp=0.0, batch_size=25,
        lr=5e-3, decay_rate=1.0, label_smoothing=0.0, epochs=10, seed=3,
        eval_every=0,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def toy_vocab():
    return build_toy_vocab()


@pytest.fixture
def toy_store():
    return build_toy_store()


def write_dataset_dir(tmp_path: Path, train, valid, test) -> Path:
    """Materialize string triples into train/valid/test files."""
    for name, rows in (("train", train), ("valid", valid), ("test", test)):
        with open(tmp_path / f"{name}.txt", "w", encoding="utf-8") as fh:
            for s, r, t in rows:
                fh.write(f"{s}\t{r}\t{t}\n")
    return tmp_path


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = {}
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, ()):
            if "test_acceptance" not in rep.nodeid:
                continue
            name = rep.nodeid.split("::")[-1]
            current = rows.get(name)
            if current is None or outcome != "passed":
                rows[name] = outcome.upper()
    if rows:
        terminalreporter.write_sep("-", "acceptance criteria")
        for name in sorted(rows):
            terminalreporter.write_line(f"{rows[name]:<8} {name}")
