"""Multimodal datasets: on-disk format, validation, splits and a synthetic generator.

On-disk layout (all UTF-8):

* ``manifest.json`` with keys ``schema``, ``class_names``, ``feature_dims``
  (``eye``, ``ppg``, ``semantic``), ``semantic_table`` (video id -> CSV path)
  and ``samples`` (``id``, ``label``, ``eye_path``, ``ppg_path``,
  ``semantic_ref``). Paths are relative to the manifest's directory.
* one CSV per modality block: a header row, one row per timestep, comma
  separated, ``.`` decimal point.

Semantic blocks are referenced through ``semantic_table`` so that every
window cut from the same video shares one embedding sequence.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MANIFEST_SCHEMA = "vsfusion.manifest/1"
DEFAULT_CLASS_NAMES = ("Interest", "Boredom", "Happiness", "Confusion")
MODALITIES = ("eye", "ppg", "semantic")


class DatasetError(ValueError):
    """A manifest or modality file failed validation."""


@dataclass(frozen=True)
class Sample:
    id: str
    label: int
    eye: np.ndarray
    ppg: np.ndarray
    semantic: np.ndarray
    video_id: str

    def block(self, modality: str) -> np.ndarray:
        return getattr(self, modality)


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]
    class_names: tuple[str, ...]
    feature_dims: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def stack(self, modality: str) -> np.ndarray:
        """(N, T, D) array of one modality; requires a common sequence length."""
        blocks = [s.block(modality) for s in self.samples]
        shapes = {b.shape for b in blocks}
        if len(shapes) != 1:
            raise DatasetError(f"{modality} blocks have differing shapes: {sorted(shapes)}")
        return np.stack(blocks)

    def subset(self, ids: Sequence[str]) -> "Dataset":
        index = {s.id: s for s in self.samples}
        missing = [i for i in ids if i not in index]
        if missing:
            raise KeyError(f"unknown sample ids: {missing[:5]}")
        return Dataset(tuple(index[i] for i in ids), self.class_names, dict(self.feature_dims))

    def class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.n_classes).tolist()


# --- CSV blocks ----------------------------------------------------------------

def read_block(path: Path, sample_id: str = "?") -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"sample {sample_id}: missing file {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise DatasetError(f"sample {sample_id}: {path} has no data rows")
    width = len(rows[0])
    values = np.empty((len(rows) - 1, width))
    for r, row in enumerate(rows[1:]):
        if len(row) != width:
            raise DatasetError(
                f"sample {sample_id}: {path} row {r + 2} has {len(row)} fields, expected {width}")
        for c, text in enumerate(row):
            try:
                v = float(text)
            except ValueError:
                raise DatasetError(
                    f"sample {sample_id}: {path} row {r + 2} col {c + 1}: not a number {text!r}") from None
            if not math.isfinite(v):
                raise DatasetError(
                    f"sample {sample_id}: {path} row {r + 2} col {c + 1}: non-finite value {text!r}")
            values[r, c] = v
    return values


def write_block(path: Path, values: np.ndarray, prefix: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"{prefix}{j}" for j in range(values.shape[1])])
        for row in values:
            # repr gives the shortest string that parses back to the same double
            w.writerow([repr(float(v)) for v in row])


# --- manifest -------------------------------------------------------------------

def load_dataset(manifest_path, semantic_table: dict | None = None) -> Dataset:
    """Load and validate every sample listed in a manifest.

    ``semantic_table`` replaces the manifest's own table (used to swap
    embedding variants without copying physiological files).
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DatasetError(f"missing manifest {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{manifest_path}: invalid JSON ({exc})") from None
    for key in ("class_names", "feature_dims", "semantic_table", "samples"):
        if key not in doc:
            raise DatasetError(f"{manifest_path}: missing key {key!r}")
    root = manifest_path.parent
    class_names = tuple(doc["class_names"])
    if len(class_names) < 2:
        raise DatasetError(f"{manifest_path}: need at least 2 classes, got {len(class_names)}")
    dims = {m: int(doc["feature_dims"][m]) for m in MODALITIES}
    table = dict(doc["semantic_table"] if semantic_table is None else semantic_table)

    semantic_cache: dict[str, np.ndarray] = {}
    samples = []
    seen = set()
    for entry in doc["samples"]:
        sid = str(entry["id"])
        if sid in seen:
            raise DatasetError(f"duplicate sample id {sid}")
        seen.add(sid)
        label = entry["label"]
        if not isinstance(label, int) or not 0 <= label < len(class_names):
            raise DatasetError(f"sample {sid}: unknown label {label!r}")
        eye = read_block(root / entry["eye_path"], sid)
        ppg = read_block(root / entry["ppg_path"], sid)
        ref = str(entry["semantic_ref"])
        if ref not in table:
            raise DatasetError(f"sample {sid}: semantic_ref {ref!r} not in semantic_table")
        if ref not in semantic_cache:
            block = read_block(root / table[ref], sid)
            block.flags.writeable = False
            semantic_cache[ref] = block
        sem = semantic_cache[ref]
        for name, block, path in (("eye", eye, entry["eye_path"]), ("ppg", ppg, entry["ppg_path"]),
                                  ("semantic", sem, table[ref])):
            if block.shape[1] != dims[name]:
                raise DatasetError(
                    f"sample {sid}: {root / path} has {block.shape[1]} {name} columns, "
                    f"manifest declares {dims[name]}")
        eye.flags.writeable = False
        ppg.flags.writeable = False
        samples.append(Sample(sid, label, eye, ppg, sem, ref))

    samples.sort(key=lambda s: s.id)
    for m in MODALITIES:
        lengths = {s.block(m).shape[0] for s in samples}
        if len(lengths) > 1:
            raise DatasetError(f"{manifest_path}: {m} sequence lengths differ across samples: {sorted(lengths)}")
    return Dataset(tuple(samples), class_names, dims)


def write_dataset(dataset: Dataset, out_dir, readme: str | None = None) -> Path:
    """Write ``dataset`` in the standard layout; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = {}
    entries = []
    for s in dataset.samples:
        if s.video_id not in table:
            rel = f"semantic/{s.video_id}.csv"
            write_block(out / rel, s.semantic, "s")
            table[s.video_id] = rel
        write_block(out / f"eye/{s.id}.csv", s.eye, "e")
        write_block(out / f"ppg/{s.id}.csv", s.ppg, "p")
        entries.append({"id": s.id, "label": s.label, "eye_path": f"eye/{s.id}.csv",
                        "ppg_path": f"ppg/{s.id}.csv", "semantic_ref": s.video_id})
    doc = {"schema": MANIFEST_SCHEMA, "class_names": list(dataset.class_names),
           "feature_dims": dict(dataset.feature_dims), "semantic_table": table,
           "samples": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    if readme is not None:
        (out / "README.md").write_text(readme, encoding="utf-8")
    return path


# --- splits ------------------------------------------------------------------------

@dataclass
class SplitPlan:
    train: list[str]
    test: list[str]
    folds: list[tuple[list[str], list[str]]]
    seed: int


def _by_class(ids: Sequence[str], labels: Sequence[int]) -> dict[int, list[str]]:
    groups: dict[int, list[str]] = {}
    for i, y in sorted(zip(ids, labels)):
        groups.setdefault(int(y), []).append(i)
    return groups


def split_train_test(ids: Sequence[str], labels: Sequence[int], ratio: float = 0.8,
                     seed: int = 7, n_classes: int | None = None) -> SplitPlan:
    """Stratified train/test split; each class contributes round(ratio * count) to train."""
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    groups = _by_class(ids, labels)
    if n_classes is not None:
        empty = [c for c in range(n_classes) if c not in groups]
        if empty:
            raise DatasetError(f"classes without samples: {empty}")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in sorted(groups):
        members = groups[c]
        order = rng.permutation(len(members))
        n_train = int(math.floor(ratio * len(members) + 0.5))
        train += [members[j] for j in order[:n_train]]
        test += [members[j] for j in order[n_train:]]
    return SplitPlan(sorted(train), sorted(test), [], seed)


def kfold(ids: Sequence[str], labels: Sequence[int], k: int = 5,
          seed: int = 7) -> list[tuple[list[str], list[str]]]:
    """Stratified k-fold over ``ids``: returns (train ids, validation ids) per fold.

    Members of each class are shuffled and dealt round-robin; the dealing
    position carries over between classes so fold sizes also stay within one.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    groups = _by_class(ids, labels)
    small = {c: len(m) for c, m in groups.items() if len(m) < k}
    if small:
        raise DatasetError(f"fewer than k={k} samples in classes {small}")
    rng = np.random.default_rng(seed)
    blocks: list[list[str]] = [[] for _ in range(k)]
    pos = 0
    for c in sorted(groups):
        members = groups[c]
        for j in rng.permutation(len(members)):
            blocks[pos % k].append(members[j])
            pos += 1
    every = sorted(ids)
    folds = []
    for b in blocks:
        val = set(b)
        folds.append(([i for i in every if i not in val], sorted(b)))
    return folds


def make_split_plan(dataset: Dataset, ratio: float = 0.8, k: int = 5, seed: int = 7) -> SplitPlan:
    plan = split_train_test(dataset.ids, dataset.labels, ratio, seed, dataset.n_classes)
    label_of = dict(zip(dataset.ids, dataset.labels.tolist()))
    plan.folds = kfold(plan.train, [label_of[i] for i in plan.train], k, seed)
    return plan


# --- synthetic data -------------------------------------------------------------------

@dataclass
class SynthSpec:
    """Generator settings for a synthetic stand-in dataset.

    Each modality block is Gaussian noise (unit variance) around
    ``separation * direction[class]``. With ``context_coupling`` the
    physiological directions come in antipodal class pairs and their sign is
    flipped by a per-video context bit; an informative semantic block then
    encodes that bit, so polarity is only recoverable by combining modalities.
    """

    n_classes: int = 4
    samples_per_class: int = 100
    class_counts: list[int] | None = None
    eye_dim: int = 8
    ppg_dim: int = 6
    semantic_dim: int = 32
    eye_len: int = 4
    ppg_len: int = 4
    semantic_len: int = 4
    separation: float = 3.0
    semantic_informative: bool = True
    n_videos: int = 0
    context_coupling: bool = False
    seed: int = 7
    class_names: list[str] | None = None

    def counts(self) -> list[int]:
        if self.class_counts is not None:
            return list(self.class_counts)
        return [self.samples_per_class] * self.n_classes

    def validate(self) -> None:
        counts = self.counts()
        if len(counts) != self.n_classes or self.n_classes < 2:
            raise ValueError("class_counts must list one count per class and n_classes >= 2")
        if any(c < 1 for c in counts):
            raise ValueError("every class needs at least one sample")
        for name in ("eye_dim", "ppg_dim", "semantic_dim", "eye_len", "ppg_len", "semantic_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.separation < 0 or not math.isfinite(self.separation):
            raise ValueError("separation must be finite and non-negative")
        if self.n_videos < 0:
            raise ValueError("n_videos must be >= 0")
        if self.context_coupling and self.n_classes % 2:
            raise ValueError("context_coupling needs an even number of classes")
        if self.class_names is not None and len(self.class_names) != self.n_classes:
            raise ValueError("class_names length must equal n_classes")

    def names(self) -> tuple[str, ...]:
        if self.class_names is not None:
            return tuple(self.class_names)
        if self.n_classes == len(DEFAULT_CLASS_NAMES):
            return DEFAULT_CLASS_NAMES
        return tuple(f"class{c}" for c in range(self.n_classes))


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def generate_dataset(spec: SynthSpec) -> Dataset:
    """Draw a dataset in memory (see :func:`synthesize_dataset` for the on-disk form)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    K, s = spec.n_classes, spec.separation
    dirs = {"eye": _unit_rows(rng, K, spec.eye_dim),
            "ppg": _unit_rows(rng, K, spec.ppg_dim),
            "semantic": _unit_rows(rng, K, spec.semantic_dim)}
    if spec.context_coupling:
        for m in ("eye", "ppg"):
            dirs[m][1::2] = -dirs[m][0::2]
        context_dir = _unit_rows(rng, 1, spec.semantic_dim)[0]
    lens = {"eye": spec.eye_len, "ppg": spec.ppg_len, "semantic": spec.semantic_len}
    dims = {"eye": spec.eye_dim, "ppg": spec.ppg_dim, "semantic": spec.semantic_dim}

    labels = np.concatenate([np.full(n, c) for c, n in enumerate(spec.counts())])
    n_total = labels.size

    # videos: either one semantic block per sample or a shared pool
    if spec.n_videos:
        if spec.semantic_informative and not spec.context_coupling:
            video_class = np.arange(spec.n_videos) % K
            videos = np.array([rng.choice(np.flatnonzero(video_class == y)) if np.any(video_class == y)
                               else rng.integers(spec.n_videos) for y in labels])
        else:
            video_class = None
            videos = rng.integers(spec.n_videos, size=n_total)
        n_blocks = spec.n_videos
    else:
        video_class = None
        videos = np.arange(n_total)
        n_blocks = n_total
    context = rng.choice([-1.0, 1.0], size=n_blocks)

    sem_blocks = []
    for v in range(n_blocks):
        noise = rng.standard_normal((lens["semantic"], dims["semantic"]))
        if not spec.semantic_informative:
            centre = np.zeros(dims["semantic"])
        elif spec.context_coupling:
            centre = s * context[v] * context_dir
        elif spec.n_videos:
            centre = s * dirs["semantic"][video_class[v]]
        else:
            centre = s * dirs["semantic"][labels[v]]
        sem_blocks.append(centre + noise)

    width = max(3, len(str(n_total - 1)))
    samples = []
    for n in range(n_total):
        y = int(labels[n])
        v = int(videos[n])
        blocks = {}
        for m in ("eye", "ppg"):
            sign = context[v] if spec.context_coupling else 1.0
            blocks[m] = sign * s * dirs[m][y] + rng.standard_normal((lens[m], dims[m]))
            blocks[m].flags.writeable = False
        sem = sem_blocks[v]
        sem.flags.writeable = False
        vid = f"v{v:0{width}d}"
        samples.append(Sample(f"s{n:0{width}d}", y, blocks["eye"], blocks["ppg"], sem, vid))
    return Dataset(tuple(samples), spec.names(), dims)


def synthesize_dataset(spec: SynthSpec, out_dir) -> tuple[Dataset, Path]:
    """Draw a synthetic dataset and write it (manifest, CSVs, README) to ``out_dir``."""
    ds = generate_dataset(spec)
    readme = (
        "# Synthetic multimodal dataset\n\n"
        "Generated by `vsfusion synth`. Every block is unit-variance Gaussian noise around\n"
        "`separation * class direction`; see `generator` below for the exact settings.\n\n"
        f"class counts: {ds.class_counts()}\n\n"
        "```json\n" + json.dumps({"generator": spec_to_dict(spec)}, indent=1, sort_keys=True) + "\n```\n"
    )
    path = write_dataset(ds, out_dir, readme)
    return ds, path


def spec_to_dict(spec: SynthSpec) -> dict:
    return asdict(spec)


def nearest_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    """Accuracy of a nearest-class-mean classifier on time-averaged, concatenated blocks."""
    def feats(ds):
        return np.concatenate([ds.stack(m).mean(axis=1) for m in MODALITIES], axis=1)

    xtr, ytr = feats(train), train.labels
    centroids = np.stack([xtr[ytr == c].mean(axis=0) for c in range(train.n_classes)])
    xte = feats(test)
    d = ((xte[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    return float(np.mean(d.argmin(axis=1) == test.labels))
