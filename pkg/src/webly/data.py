"""Datasets, web bags, file ingestion, grouped splitting, and synthetic generators.

The clean corpus is a plain labeled dataset of dense feature vectors.  The web
corpus is a collection of per-query bags: every bag member inherits the query's
label, which is the only label visible to training.  For synthetic bags the
generator also records each member's true class (or the cross-domain sentinel)
in a parallel field that evaluation code may inspect but training never sees.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

# Reserved hidden-truth marker for bag members that belong to no target class.
CROSS_DOMAIN = -1


@dataclass
class Example:
    """One labeled feature vector with a group id for grouped splitting."""

    id: str
    group_id: str
    features: np.ndarray
    label: int


@dataclass
class Dataset:
    """Ordered collection of examples sharing a feature dimension and label range."""

    examples: list[Example]
    num_classes: int
    feature_dim: int
    name: str = "dataset"
    _X: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValidationError("num_classes must be >= 1")
        seen: set[str] = set()
        for ex in self.examples:
            if ex.features.shape != (self.feature_dim,):
                raise ValidationError(
                    f"example {ex.id}: feature dim {ex.features.shape} != ({self.feature_dim},)"
                )
            if not np.all(np.isfinite(ex.features)):
                raise ValidationError(f"example {ex.id}: non-finite feature")
            if not 0 <= ex.label < self.num_classes:
                raise ValidationError(
                    f"example {ex.id}: label {ex.label} outside [0, {self.num_classes})"
                )
            if ex.id in seen:
                raise ValidationError(f"duplicate example id {ex.id!r}")
            seen.add(ex.id)

    def __len__(self) -> int:
        return len(self.examples)

    def feature_matrix(self) -> np.ndarray:
        """(N, D) float64 matrix of all features, in example order."""
        if self._X is None:
            self._X = np.array([ex.features for ex in self.examples], dtype=np.float64)
        return self._X

    def labels(self) -> np.ndarray:
        return np.array([ex.label for ex in self.examples], dtype=np.int64)

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.labels(), minlength=self.num_classes)

    def group_ids(self) -> list[str]:
        """Distinct group ids in order of first appearance."""
        seen: dict[str, None] = {}
        for ex in self.examples:
            seen.setdefault(ex.group_id, None)
        return list(seen)


@dataclass
class WebBag:
    """Bag of items retrieved for one query; members carry the query's label.

    ``true_labels_hidden`` exists only for synthetic bags and is evaluation-only:
    it holds each member's true class index, or CROSS_DOMAIN for background
    outliers.  Training code must never read it.
    """

    query_id: str
    transferred_label: int
    members: list[Example]
    true_labels_hidden: list[int] | None = None

    def __post_init__(self):
        for m in self.members:
            if m.label != self.transferred_label:
                raise ValidationError(
                    f"bag {self.query_id}: member {m.id} label {m.label} "
                    f"!= transferred label {self.transferred_label}"
                )
        if self.true_labels_hidden is not None:
            if len(self.true_labels_hidden) != len(self.members):
                raise ValidationError(
                    f"bag {self.query_id}: hidden labels length "
                    f"{len(self.true_labels_hidden)} != members {len(self.members)}"
                )


@dataclass
class WebCorpus:
    """All web bags for one crawl, plus an access counter for isolation audits.

    ``access_count`` ticks every time toolkit code reads the bags for training
    or estimation (flatten_web, representative mining); it lets experiments
    assert that clean-only stages never touch web data.
    """

    bags: list[WebBag]
    num_classes: int
    feature_dim: int
    access_count: int = field(default=0, compare=False)

    def __post_init__(self):
        for bag in self.bags:
            if not 0 <= bag.transferred_label < self.num_classes:
                raise ValidationError(
                    f"bag {bag.query_id}: transferred label {bag.transferred_label} "
                    f"outside [0, {self.num_classes})"
                )
            for m in bag.members:
                if m.features.shape != (self.feature_dim,):
                    raise ValidationError(
                        f"bag {bag.query_id}: member {m.id} feature dim mismatch"
                    )
            if bag.true_labels_hidden is not None:
                for t in bag.true_labels_hidden:
                    if t != CROSS_DOMAIN and not 0 <= t < self.num_classes:
                        raise ValidationError(
                            f"bag {bag.query_id}: hidden label {t} is neither a class "
                            f"index nor the cross-domain sentinel"
                        )

    def note_access(self) -> None:
        self.access_count += 1

    def member_count(self) -> int:
        return sum(len(b.members) for b in self.bags)


@dataclass
class NoiseSpec:
    """Ground-truth noise model for the synthetic web crawl.

    ``cross_category_kernel`` row i gives the distribution of a member's true
    class when the query's class is i; ``cross_domain_rate`` is the probability
    a member is a background outlier instead.  This is simulator ground truth,
    distinct from any transition matrix estimated later.
    """

    cross_category_kernel: np.ndarray
    cross_domain_rate: float
    bag_size: int
    seed: int

    def __post_init__(self):
        self.cross_category_kernel = np.asarray(self.cross_category_kernel, dtype=np.float64)
        k = self.cross_category_kernel.shape
        if len(k) != 2 or k[0] != k[1]:
            raise ValidationError("cross_category_kernel must be square")
        if np.any(self.cross_category_kernel < 0) or np.any(self.cross_category_kernel > 1):
            raise ValidationError("cross_category_kernel entries must lie in [0, 1]")
        if np.any(np.abs(self.cross_category_kernel.sum(axis=1) - 1.0) > 1e-9):
            raise ValidationError("cross_category_kernel rows must sum to 1 within 1e-9")
        if not 0.0 <= self.cross_domain_rate <= 1.0:
            raise ValidationError("cross_domain_rate must lie in [0, 1]")
        if self.bag_size < 1:
            raise ValidationError("bag_size must be >= 1")


@dataclass
class BackgroundSpec:
    """Outlier distribution for cross-domain members: an isotropic Gaussian
    centered at the clean corpus mean shifted by ``mean_offset``."""

    mean_offset: float | np.ndarray = 10.0
    scale: float = 1.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValidationError("background scale must be positive")


@dataclass
class CleanSpec:
    """Class-mixture spec for the synthetic clean corpus.

    Each example of class c is drawn from an isotropic Gaussian centered at
    ``class_means[c]`` with per-coordinate standard deviation ``sigma``.
    Group ids cycle through a shared pool within each class, so every group
    contains examples of every class and whole-group splits keep all classes
    on both sides.
    """

    num_classes: int
    feature_dim: int
    class_means: np.ndarray
    sigma: float
    class_counts: list[int]
    groups_per_class: int
    seed: int
    name: str = "synth"

    def __post_init__(self):
        self.class_means = np.asarray(self.class_means, dtype=np.float64)
        if self.num_classes < 2:
            raise ValidationError("need at least 2 classes")
        if self.class_means.shape != (self.num_classes, self.feature_dim):
            raise ValidationError(
                f"class_means shape {self.class_means.shape} != "
                f"({self.num_classes}, {self.feature_dim})"
            )
        if self.sigma <= 0:
            raise ValidationError("sigma must be positive")
        if len(self.class_counts) != self.num_classes:
            raise ValidationError("class_counts length must equal num_classes")
        if any(c < 1 for c in self.class_counts):
            raise ValidationError("every class count must be >= 1")
        if self.groups_per_class < 1:
            raise ValidationError("groups_per_class must be >= 1")


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def _expected_header(feature_dim: int) -> list[str]:
    return ["id", "group_id", "label"] + [f"f{i}" for i in range(feature_dim)]


def load_dataset(path: str | Path, num_classes: int | None = None,
                 name: str | None = None, format: str = "csv") -> Dataset:
    """Load a dataset from CSV with header ``id,group_id,label,f0,...,f{D-1}``.

    The number of classes is inferred as max label + 1 unless ``num_classes``
    overrides it.  Row order is preserved.  Malformed rows raise ParseError
    naming the offending line; duplicate ids raise ValidationError.
    """
    if format != "csv":
        raise ValidationError(f"unsupported dataset format {format!r}")
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, header required") from None
        d = len(header) - 3
        if d < 1 or header != _expected_header(d):
            raise ParseError(f"{path}: line 1: bad header {header!r}")

        examples: list[Example] = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 3:
                raise ParseError(
                    f"{path}: line {lineno}: expected {d + 3} columns, got {len(row)}"
                )
            ex_id, group_id, label_str = row[0], row[1], row[2]
            try:
                label = int(label_str)
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: label {label_str!r} "
                                 "is not a base-10 integer") from None
            if label < 0:
                raise ParseError(f"{path}: line {lineno}: negative label {label}")
            try:
                features = np.array([float(v) for v in row[3:]], dtype=np.float64)
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: non-numeric feature") from None
            if not np.all(np.isfinite(features)):
                raise ParseError(f"{path}: line {lineno}: non-finite feature")
            examples.append(Example(id=ex_id, group_id=group_id,
                                    features=features, label=label))

    if not examples:
        raise ValidationError(f"{path}: no examples")
    inferred_k = max(ex.label for ex in examples) + 1
    k = num_classes if num_classes is not None else inferred_k
    if inferred_k > k:
        raise ValidationError(
            f"{path}: label {inferred_k - 1} exceeds num_classes={k}"
        )
    return Dataset(examples=examples, num_classes=k, feature_dim=d,
                   name=name if name is not None else path.stem)


def write_dataset_csv(ds: Dataset, path: str | Path) -> None:
    """Write a dataset in the CSV schema; floats use shortest exact repr."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_expected_header(ds.feature_dim))
        for ex in ds.examples:
            writer.writerow([ex.id, ex.group_id, str(ex.label)]
                            + [repr(float(v)) for v in ex.features])


# ---------------------------------------------------------------------------
# Grouped splitting
# ---------------------------------------------------------------------------

def grouped_split(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Partition whole groups into train/test by a seeded greedy fill.

    Groups are randomly permuted (seeded) and assigned to the train side in
    order until it first reaches at least ``train_fraction`` of the examples;
    the remaining groups form the test side.  No group appears on both sides.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError("train_fraction must lie strictly between 0 and 1")
    if len(ds) == 0:
        raise ValidationError("cannot split an empty dataset")
    groups = ds.group_ids()
    if len(groups) < 2:
        raise ValidationError("cannot split one group")

    sizes = {g: 0 for g in groups}
    for ex in ds.examples:
        sizes[ex.group_id] += 1

    rng = np.random.default_rng(seed)
    order = [groups[i] for i in rng.permutation(len(groups))]
    target = train_fraction * len(ds)
    train_groups: set[str] = set()
    filled = 0
    for g in order:
        train_groups.add(g)
        filled += sizes[g]
        if filled >= target:
            break
    if len(train_groups) == len(groups):
        raise ValidationError("train_fraction leaves no test groups")

    train_ex = [ex for ex in ds.examples if ex.group_id in train_groups]
    test_ex = [ex for ex in ds.examples if ex.group_id not in train_groups]
    mk = lambda ex, suffix: Dataset(examples=ex, num_classes=ds.num_classes,
                                    feature_dim=ds.feature_dim,
                                    name=f"{ds.name}-{suffix}")
    return mk(train_ex, "train"), mk(test_ex, "test")


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------

def synth_clean(spec: CleanSpec) -> Dataset:
    """Draw a clean corpus from the class mixture; deterministic given seed."""
    rng = np.random.default_rng(spec.seed)
    examples: list[Example] = []
    for c in range(spec.num_classes):
        n = spec.class_counts[c]
        draws = rng.normal(loc=spec.class_means[c], scale=spec.sigma,
                           size=(n, spec.feature_dim))
        for i in range(n):
            examples.append(Example(
                id=f"{spec.name}-c{c}-{i}",
                group_id=f"g{i % spec.groups_per_class}",
                features=draws[i],
                label=c,
            ))
    return Dataset(examples=examples, num_classes=spec.num_classes,
                   feature_dim=spec.feature_dim, name=spec.name)


def _class_models(clean: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Empirical per-class mean and pooled isotropic std from a clean corpus."""
    X = clean.feature_matrix()
    y = clean.labels()
    means = np.zeros((clean.num_classes, clean.feature_dim))
    stds = np.zeros(clean.num_classes)
    for c in range(clean.num_classes):
        Xc = X[y == c]
        if len(Xc) == 0:
            raise ValidationError(f"class {c} absent from clean corpus")
        means[c] = Xc.mean(axis=0)
        stds[c] = float(np.sqrt(Xc.var(axis=0).mean())) if len(Xc) > 1 else 0.0
    return means, stds


def synth_web_corpus(clean_train: Dataset, noise: NoiseSpec,
                     background: BackgroundSpec) -> WebCorpus:
    """Simulate a web crawl: one bag of ``bag_size`` members per clean query.

    Each member is independently a cross-domain outlier with probability
    ``cross_domain_rate`` (features from the background Gaussian), otherwise
    its true class is drawn from the kernel row of the query's label and its
    features from that class's empirical Gaussian model.  Members store only
    the transferred label; true classes go to ``true_labels_hidden``.
    """
    if len(clean_train) == 0:
        raise ValidationError("clean_train is empty")
    k = clean_train.num_classes
    if noise.cross_category_kernel.shape != (k, k):
        raise ValidationError(
            f"kernel is {noise.cross_category_kernel.shape}, expected ({k}, {k})"
        )
    means, stds = _class_models(clean_train)
    center = clean_train.feature_matrix().mean(axis=0) + np.asarray(background.mean_offset)
    if center.shape != (clean_train.feature_dim,):
        raise ValidationError("background mean_offset must be scalar or length-D")

    rng = np.random.default_rng(noise.seed)
    m = noise.bag_size
    d = clean_train.feature_dim
    kernel_cum = np.cumsum(noise.cross_category_kernel, axis=1)
    bags: list[WebBag] = []
    for ex in clean_train.examples:
        y = ex.label
        outlier = rng.random(m) < noise.cross_domain_rate
        classes = np.searchsorted(kernel_cum[y], rng.random(m)).clip(max=k - 1)
        unit = rng.standard_normal((m, d))

        loc = np.where(outlier[:, None], center, means[classes])
        scale = np.where(outlier, background.scale, stds[classes])
        feats = loc + unit * scale[:, None]

        members = [
            Example(id=f"{ex.id}-w{i}", group_id=ex.id,
                    features=feats[i], label=y)
            for i in range(m)
        ]
        hidden = [CROSS_DOMAIN if outlier[i] else int(classes[i]) for i in range(m)]
        bags.append(WebBag(query_id=ex.id, transferred_label=y,
                           members=members, true_labels_hidden=hidden))
    return WebCorpus(bags=bags, num_classes=k, feature_dim=d)


def flatten_web(corpus: WebCorpus) -> Dataset:
    """Concatenate all bag members into one dataset labeled by transferred labels."""
    if not corpus.bags:
        raise ValidationError("empty corpus")
    corpus.note_access()
    examples = [m for bag in corpus.bags for m in bag.members]
    return Dataset(examples=examples, num_classes=corpus.num_classes,
                   feature_dim=corpus.feature_dim, name="web-flat")


# ---------------------------------------------------------------------------
# Web-corpus JSON interchange
# ---------------------------------------------------------------------------

def save_web_corpus(corpus: WebCorpus, path: str | Path) -> None:
    doc = {
        "num_classes": corpus.num_classes,
        "feature_dim": corpus.feature_dim,
        "bags": [
            {
                "query_id": bag.query_id,
                "transferred_label": bag.transferred_label,
                "members": [
                    {"id": m.id, "features": [float(v) for v in m.features]}
                    for m in bag.members
                ],
                "true_labels_hidden": bag.true_labels_hidden,
            }
            for bag in corpus.bags
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))


def load_web_corpus(path: str | Path) -> WebCorpus:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        k = int(doc["num_classes"])
        d = int(doc["feature_dim"])
        bags = []
        for b in doc["bags"]:
            label = int(b["transferred_label"])
            members = [
                Example(id=m["id"], group_id=b["query_id"],
                        features=np.array(m["features"], dtype=np.float64),
                        label=label)
                for m in b["members"]
            ]
            hidden = b.get("true_labels_hidden")
            bags.append(WebBag(query_id=b["query_id"], transferred_label=label,
                               members=members,
                               true_labels_hidden=None if hidden is None
                               else [int(t) for t in hidden]))
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: malformed web corpus document: {exc}") from None
    return WebCorpus(bags=bags, num_classes=k, feature_dim=d)
