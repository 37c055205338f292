"""
Deterministic synthetic domains and sampling utilities.

Every generator is a pure function of its spec. Train and test splits draw
from two disjoint child streams of the spec's seed and carry disjoint
sample ids, so their disjointness can be checked from provenance alone.
"""

import math
from pathlib import Path
from typing import Iterator, List, Literal, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from src.state import GaussShiftSpec, MoonsSpec
from src.tools.errors import ContractViolation

Split = Literal["train", "test"]

_SPLIT_OFFSET = 1 << 32


class DomainDataset(BaseModel):
    """Samples of one domain. `y is None` marks an unlabeled view."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    x: np.ndarray
    y: Optional[np.ndarray]
    domain_tag: str
    split: Split = "train"
    sample_ids: np.ndarray

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def labeled(self) -> bool:
        return self.y is not None

    def unlabeled(self) -> "DomainDataset":
        return DomainDataset(x=self.x, y=None, domain_tag=self.domain_tag, split=self.split, sample_ids=self.sample_ids)

    def take(self, indices) -> "DomainDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return DomainDataset(
            x=self.x[indices],
            y=None if self.y is None else self.y[indices],
            domain_tag=self.domain_tag,
            split=self.split,
            sample_ids=self.sample_ids[indices],
        )


def make_dataset(x, y, domain_tag: str, split: Split = "train", sample_ids=None) -> DomainDataset:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ContractViolation(f"x must be n x d, got shape {x.shape}")
    if y is not None:
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        if y.shape[0] != x.shape[0]:
            raise ContractViolation(f"{x.shape[0]} samples but {y.shape[0]} labels")
        if y.size and y.min() < 0:
            raise ContractViolation("labels must be non-negative class indices")
    if sample_ids is None:
        base = 0 if split == "train" else _SPLIT_OFFSET
        sample_ids = base + np.arange(x.shape[0], dtype=np.int64)
    return DomainDataset(x=x, y=y, domain_tag=domain_tag, split=split, sample_ids=np.asarray(sample_ids, dtype=np.int64))


def concat(datasets: Sequence[DomainDataset], domain_tag: Optional[str] = None) -> DomainDataset:
    """Pool several domains into one dataset (labels kept only if every part has them)."""
    if not datasets:
        raise ContractViolation("nothing to concatenate")
    labeled = all(d.labeled for d in datasets)
    # Ids are only unique within a domain, so pooled ids are re-based per part
    ids = np.concatenate([d.sample_ids + i * (_SPLIT_OFFSET << 1) for i, d in enumerate(datasets)])
    return DomainDataset(
        x=np.concatenate([d.x for d in datasets]),
        y=np.concatenate([d.y for d in datasets]) if labeled else None,
        domain_tag=domain_tag or "+".join(d.domain_tag for d in datasets),
        split=datasets[0].split,
        sample_ids=ids,
    )


def _split_rng(seed: int, split: Split) -> np.random.Generator:
    train_seq, test_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(train_seq if split == "train" else test_seq)


def rotation_matrix(degrees: float) -> np.ndarray:
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def gen_rotated_moons(spec: MoonsSpec, split: Split = "train") -> DomainDataset:
    """
    Two interleaved half-circles: class 0 on the unit upper arc, class 1 on the
    lower arc centred at (1, 0.5). Gaussian noise is added, then every point is
    rotated about the origin by spec.rotation_deg.
    """
    rng = _split_rng(spec.seed, split)
    n = spec.n_per_class
    t_outer = rng.uniform(0.0, math.pi, size=n)
    t_inner = rng.uniform(0.0, math.pi, size=n)
    outer = np.stack([np.cos(t_outer), np.sin(t_outer)], axis=1)
    inner = np.stack([1.0 - np.cos(t_inner), 0.5 - np.sin(t_inner)], axis=1)
    x = np.concatenate([outer, inner])
    if spec.noise_sigma > 0:
        x = x + rng.normal(0.0, spec.noise_sigma, size=x.shape)
    x = x @ rotation_matrix(spec.rotation_deg).T
    y = np.concatenate([np.zeros(n, dtype=np.int64), np.ones(n, dtype=np.int64)])
    return make_dataset(x, y, spec.tag, split)


def gen_gaussian_shift(spec: GaussShiftSpec, split: Split = "train") -> DomainDataset:
    """Class-conditional isotropic Gaussians around class_means + domain_offset."""
    rng = _split_rng(spec.seed, split)
    means = np.asarray(spec.class_means, dtype=np.float64) + np.asarray(spec.domain_offset, dtype=np.float64)
    std = math.sqrt(spec.cov_scale)
    xs, ys = [], []
    for k, mean in enumerate(means):
        xs.append(mean + std * rng.normal(size=(spec.n_per_class, spec.dim)))
        ys.append(np.full(spec.n_per_class, k, dtype=np.int64))
    return make_dataset(np.concatenate(xs), np.concatenate(ys), spec.tag, split)


def generate(spec, split: Split = "train") -> DomainDataset:
    if isinstance(spec, MoonsSpec):
        return gen_rotated_moons(spec, split)
    if isinstance(spec, GaussShiftSpec):
        return gen_gaussian_shift(spec, split)
    raise ContractViolation(f"Unknown domain spec {type(spec).__name__}")


# --- Sampling ---

class MetaSplit(NamedTuple):
    mtr: List[DomainDataset]
    mte: DomainDataset
    mte_unlabeled: DomainDataset
    mte_index: int


def sample_meta_split(domains: Sequence[DomainDataset], rng: np.random.Generator) -> MetaSplit:
    """Hold out one source uniformly at random as meta-test; the rest are meta-train."""
    if len(domains) < 2:
        raise ContractViolation(f"A meta split needs at least 2 source domains, got {len(domains)}")
    idx = int(rng.integers(len(domains)))
    mte = domains[idx]
    mtr = [d for i, d in enumerate(domains) if i != idx]
    return MetaSplit(mtr=mtr, mte=mte, mte_unlabeled=mte.unlabeled(), mte_index=idx)


def select_kshot(dataset: DomainDataset, k: int, rng: np.random.Generator) -> Tuple[DomainDataset, DomainDataset]:
    """Exactly k labeled samples per class; the remainder is returned as an unlabeled view."""
    if dataset.y is None:
        raise ContractViolation("select_kshot needs a labeled dataset")
    if k < 1:
        raise ContractViolation(f"k must be >= 1, got {k}")
    chosen = []
    for cls in np.unique(dataset.y):
        members = np.flatnonzero(dataset.y == cls)
        if members.shape[0] < k:
            raise ContractViolation(f"class {cls} has {members.shape[0]} samples, fewer than k={k}")
        chosen.append(members[rng.permutation(members.shape[0])[:k]])
    labeled_idx = np.sort(np.concatenate(chosen))
    rest_idx = np.setdiff1d(np.arange(dataset.n), labeled_idx)
    return dataset.take(labeled_idx), dataset.take(rest_idx).unlabeled()


def batch_iter(dataset: DomainDataset, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless stream of index batches: a fresh permutation per epoch, trailing short chunk dropped."""
    if batch_size < 1:
        raise ContractViolation(f"batch_size must be >= 1, got {batch_size}")
    n = dataset.n
    if batch_size > n:
        raise ContractViolation(f"batch_size {batch_size} exceeds dataset size {n} ({dataset.domain_tag})")
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield order[start:start + batch_size]


class BatchStream:
    """A dataset bound to its own batch iterator; `next()` returns the sampled sub-dataset."""

    def __init__(self, dataset: DomainDataset, batch_size: int, rng: np.random.Generator):
        self.dataset = dataset
        self._indices = batch_iter(dataset, batch_size, rng)

    def next(self) -> DomainDataset:
        return self.dataset.take(next(self._indices))


# --- CSV interchange ---

def write_datasets_csv(datasets: Sequence[DomainDataset], path) -> Path:
    """Columns x1..xd, y, domain_tag, split. Unlabeled rows leave y empty."""
    frames = []
    for d in datasets:
        frame = pd.DataFrame(d.x, columns=[f"x{j + 1}" for j in range(d.dim)])
        frame["y"] = pd.array(d.y if d.y is not None else [None] * d.n, dtype="Int64")
        frame["domain_tag"] = d.domain_tag
        frame["split"] = d.split
        frames.append(frame)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.concat(frames, ignore_index=True).to_csv(path, index=False, float_format="%.17g")
    return path


def read_datasets_csv(path) -> List[DomainDataset]:
    frame = pd.read_csv(path, dtype={"domain_tag": str, "split": str}, float_precision="round_trip")
    x_cols = [c for c in frame.columns if c.startswith("x")]
    out = []
    for (tag, split), part in frame.groupby(["domain_tag", "split"], sort=False):
        y = None if part["y"].isna().all() else part["y"].astype(np.int64).to_numpy()
        out.append(make_dataset(part[x_cols].to_numpy(dtype=np.float64), y, tag, split))
    return out
