"""Two-domain semi-supervised data model, synthetic shift benchmark, manifests, batching."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

SOURCE = "source"
TARGET = "target"
MANIFEST_VERSION = 1

# Pool sizes of the reference chest X-ray split: source train, target train, target test.
REFERENCE_COUNTS = (7919, 2799, 945)
# Positive-class fractions per split in the same reference split.
REFERENCE_POSITIVE_FRACTIONS = (2306 / 7919, 258 / 2799, 60 / 945)


class DatasetError(ValueError):
    pass


class ConfigError(DatasetError):
    pass


class ManifestError(DatasetError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True, eq=False)
class Example:
    id: str
    features: np.ndarray
    label: Optional[int]
    domain: str

    def __post_init__(self):
        arr = np.array(self.features, dtype=np.float64).reshape(-1)
        if not np.isfinite(arr).all():
            raise DatasetError(f"example {self.id}: non-finite features")
        if self.domain not in (SOURCE, TARGET):
            raise DatasetError(f"example {self.id}: unknown domain {self.domain!r}")
        if self.label not in (None, 0, 1):
            raise DatasetError(f"example {self.id}: label must be 0, 1 or None")
        arr.setflags(write=False)
        object.__setattr__(self, "features", arr)

    def __eq__(self, other):
        if not isinstance(other, Example):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and self.domain == other.domain
            and self.features.shape == other.features.shape
            and bool(np.array_equal(self.features, other.features))
        )

    __hash__ = None


@dataclass(frozen=True)
class DomainDataset:
    source_train: tuple[Example, ...]
    target_train_labeled: tuple[Example, ...]
    target_train_unlabeled: tuple[Example, ...]
    target_test: tuple[Example, ...]
    # held-out source examples, used only for domain-confusion diagnostics
    source_test: tuple[Example, ...] = ()
    feature_shape: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        for f in fields(self):
            if f.name != "feature_shape":
                object.__setattr__(self, f.name, tuple(getattr(self, f.name)))
        self.validate()

    @property
    def pools(self) -> dict[str, tuple[Example, ...]]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "feature_shape"}

    @property
    def dim(self) -> int:
        for pool in self.pools.values():
            if pool:
                return int(pool[0].features.shape[0])
        raise DatasetError("dataset has no examples")

    def validate(self) -> None:
        problems = []
        for ex in self.source_train + self.source_test:
            if ex.domain != SOURCE:
                problems.append(f"{ex.id}: source pool holds a {ex.domain} example")
            if ex.label is None:
                problems.append(f"{ex.id}: source example without label")
        for name in ("target_train_labeled", "target_train_unlabeled", "target_test"):
            for ex in getattr(self, name):
                if ex.domain != TARGET:
                    problems.append(f"{ex.id}: {name} holds a {ex.domain} example")
        for ex in self.target_train_labeled + self.target_test:
            if ex.label is None:
                problems.append(f"{ex.id}: labeled pool example without label")
        for ex in self.target_train_unlabeled:
            if ex.label is not None:
                problems.append(f"{ex.id}: unlabeled pool example carries a label")
        dims = {ex.features.shape[0] for pool in self.pools.values() for ex in pool}
        if len(dims) > 1:
            problems.append(f"inconsistent feature dimensions {sorted(dims)}")
        train_ids = {ex.id for name, pool in self.pools.items() if "train" in name for ex in pool}
        test_ids = {ex.id for ex in self.target_test + self.source_test}
        if train_ids & test_ids:
            problems.append(f"ids shared between train and test: {sorted(train_ids & test_ids)[:5]}")
        if problems:
            raise DatasetError("; ".join(problems))

    @property
    def n_source(self) -> int:
        return len(self.source_train)

    @property
    def n_target_labeled(self) -> int:
        return len(self.target_train_labeled)

    @property
    def n_target_unlabeled(self) -> int:
        return len(self.target_train_unlabeled)


def stack_features(examples: Sequence[Example], dim: Optional[int] = None) -> np.ndarray:
    if not examples:
        return np.zeros((0, dim or 0))
    return np.stack([ex.features for ex in examples])


def stack_labels(examples: Sequence[Example]) -> np.ndarray:
    if any(ex.label is None for ex in examples):
        raise DatasetError("unlabeled example where labels are required")
    return np.array([ex.label for ex in examples], dtype=np.int64)


# ---------------------------------------------------------------------------
# synthetic benchmark


def scale_count(n: int, scale: float) -> int:
    # round-half-even; 7919/10 -> 792, 2799/10 -> 280, 945/10 -> 94
    return int(round(n * scale))


def class_count(fraction: float, n: int) -> int:
    return int(math.floor(fraction * n + 1e-9))


@dataclass(frozen=True)
class SyntheticConfig:
    """Gaussian two-class benchmark with an affine domain shift.

    Target features come from the source class-conditional Gaussians mapped by
    ``x -> R(angle) x + translation`` (rotation in the plane of the first two
    axes), with class 1 additionally moved by ``target_class1_offset`` so the
    best decision rule differs between domains.
    """

    dim: int = 2
    class0_mean: tuple[float, ...] = (-1.0, 0.0)
    class1_mean: tuple[float, ...] = (1.0, 0.0)
    class0_cov: tuple[tuple[float, ...], ...] = ((0.5, 0.0), (0.0, 0.5))
    class1_cov: tuple[tuple[float, ...], ...] = ((0.5, 0.0), (0.0, 0.5))
    shift_angle: float = math.pi / 4
    shift_translation: tuple[float, ...] = (1.0, 1.0)
    target_class1_offset: tuple[float, ...] = (0.0, 1.0)
    source_positive_fraction: float = REFERENCE_POSITIVE_FRACTIONS[0]
    target_positive_fraction: float = REFERENCE_POSITIVE_FRACTIONS[1]
    test_positive_fraction: float = REFERENCE_POSITIVE_FRACTIONS[2]
    n_source: int = scale_count(REFERENCE_COUNTS[0], 0.1)
    n_target: int = scale_count(REFERENCE_COUNTS[1], 0.1)
    n_test: int = scale_count(REFERENCE_COUNTS[2], 0.1)
    n_source_test: int = scale_count(REFERENCE_COUNTS[2], 0.1)
    labeled_fraction: float = 0.3
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown synthetic config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            if isinstance(value, list):
                value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
            kwargs[key] = value
        return cls(**kwargs)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = [list(x) if isinstance(x, tuple) else x for x in v]
            out[f.name] = v
        return out

    def scaled(self, scale: float) -> "SyntheticConfig":
        """Copy with pool sizes set to the reference counts times ``scale``."""
        from dataclasses import replace

        ns, nt, ntest = (scale_count(n, scale) for n in REFERENCE_COUNTS)
        return replace(self, n_source=ns, n_target=nt, n_test=ntest, n_source_test=ntest)

    def validate(self) -> None:
        d = self.dim
        if d < 1:
            raise ConfigError("dim must be positive")
        for name in ("class0_mean", "class1_mean", "shift_translation", "target_class1_offset"):
            if len(getattr(self, name)) != d:
                raise ConfigError(f"{name} must have length dim={d}")
        for name in ("class0_cov", "class1_cov"):
            cov = np.asarray(getattr(self, name), dtype=np.float64)
            if cov.shape != (d, d):
                raise ConfigError(f"{name} must be {d}x{d}")
            if not np.allclose(cov, cov.T):
                raise ConfigError(f"{name} is not symmetric")
            if np.linalg.eigvalsh(cov).min() <= 0:
                raise ConfigError(f"{name} is not positive-definite")
        if not 0 < self.labeled_fraction <= 1:
            raise ConfigError("labeled_fraction must lie in (0, 1]")
        for name in ("source_positive_fraction", "target_positive_fraction", "test_positive_fraction"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        for name in ("n_source", "n_target", "n_test"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.n_source_test < 0:
            raise ConfigError("n_source_test must be nonnegative")
        if class_count(self.labeled_fraction, self.n_target) == 0:
            raise ConfigError("labeled target pool would be empty")

    def rotation(self) -> np.ndarray:
        rot = np.eye(self.dim)
        if self.dim >= 2:
            c, s = math.cos(self.shift_angle), math.sin(self.shift_angle)
            rot[:2, :2] = [[c, -s], [s, c]]
        return rot


def _draw(cfg: SyntheticConfig, rng: np.random.Generator, labels: np.ndarray, target: bool) -> np.ndarray:
    means = np.asarray([cfg.class0_mean, cfg.class1_mean], dtype=np.float64)
    chol = [np.linalg.cholesky(np.asarray(c, dtype=np.float64)) for c in (cfg.class0_cov, cfg.class1_cov)]
    z = rng.standard_normal((labels.size, cfg.dim))
    x = np.empty_like(z)
    for k in (0, 1):
        m = labels == k
        x[m] = means[k] + z[m] @ chol[k].T
    if target:
        x = x @ cfg.rotation().T + np.asarray(cfg.shift_translation)
        x[labels == 1] += np.asarray(cfg.target_class1_offset)
    return x


def _labels(rng: np.random.Generator, n: int, fraction: float) -> np.ndarray:
    y = np.zeros(n, dtype=np.int64)
    y[: class_count(fraction, n)] = 1
    return rng.permutation(y)


def generate_synthetic(cfg: SyntheticConfig) -> DomainDataset:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)

    def make(prefix, domain, n, fraction, target):
        y = _labels(rng, n, fraction)
        x = _draw(cfg, rng, y, target)
        return [Example(f"{prefix}-{i:06d}", x[i], int(y[i]), domain) for i in range(n)]

    source = make("s-train", SOURCE, cfg.n_source, cfg.source_positive_fraction, False)
    target = make("t-train", TARGET, cfg.n_target, cfg.target_positive_fraction, True)
    test = make("t-test", TARGET, cfg.n_test, cfg.test_positive_fraction, True)
    source_test = make("s-test", SOURCE, cfg.n_source_test, cfg.source_positive_fraction, False)

    # stratified labeling: same fraction of each class, remainder taken from class 0
    n_lab = class_count(cfg.labeled_fraction, cfg.n_target)
    pos = [i for i, ex in enumerate(target) if ex.label == 1]
    neg = [i for i, ex in enumerate(target) if ex.label == 0]
    n_pos_lab = min(class_count(cfg.labeled_fraction, len(pos)), n_lab)
    chosen = set(rng.permutation(pos)[:n_pos_lab].tolist())
    chosen |= set(rng.permutation(neg)[: n_lab - n_pos_lab].tolist())
    labeled = [ex for i, ex in enumerate(target) if i in chosen]
    unlabeled = [Example(ex.id, ex.features, None, TARGET) for i, ex in enumerate(target) if i not in chosen]
    return DomainDataset(
        source_train=tuple(source),
        target_train_labeled=tuple(labeled),
        target_train_unlabeled=tuple(unlabeled),
        target_test=tuple(test),
        source_test=tuple(source_test),
    )


# ---------------------------------------------------------------------------
# manifests: one JSON object per line, header first


def save_manifest(ds: DomainDataset, path) -> None:
    ds.validate()
    path = Path(path)
    header = {"format_version": MANIFEST_VERSION, "dim": ds.dim}
    if ds.feature_shape is not None:
        header["feature_shape"] = list(ds.feature_shape)
    pools = (
        (ds.source_train, "train"),
        (ds.target_train_labeled, "train"),
        (ds.target_train_unlabeled, "train"),
        (ds.target_test, "test"),
        (ds.source_test, "test"),
    )
    try:
        with path.open("w", encoding="utf-8") as fh:
            fh.write(json.dumps(header) + "\n")
            for pool, split in pools:
                for ex in pool:
                    rec = {
                        "id": ex.id,
                        "domain": ex.domain,
                        "split": split,
                        "label": ex.label,
                        # repr of a Python float round-trips 64-bit values exactly
                        "features": [float(v) for v in ex.features],
                    }
                    fh.write(json.dumps(rec) + "\n")
    except OSError as exc:
        raise DatasetError(f"cannot write manifest {path}: {exc}") from exc


def load_manifest(path) -> DomainDataset:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    problems: list[str] = []
    pools: dict[str, list[Example]] = {
        "source_train": [], "target_train_labeled": [], "target_train_unlabeled": [],
        "target_test": [], "source_test": [],
    }
    header = None
    dim = None
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                problems.append(f"line {lineno}: malformed record ({exc.msg})")
                continue
            if header is None:
                if not isinstance(rec, dict) or "format_version" not in rec:
                    problems.append(f"line {lineno}: missing header record")
                    break
                if rec["format_version"] != MANIFEST_VERSION:
                    problems.append(f"line {lineno}: unsupported format_version {rec['format_version']}")
                    break
                header = rec
                dim = rec.get("dim")
                continue
            missing = {"id", "domain", "split", "label", "features"} - set(rec)
            if missing:
                problems.append(f"line {lineno}: missing fields {sorted(missing)}")
                continue
            domain, split, label = rec["domain"], rec["split"], rec["label"]
            if domain not in (SOURCE, TARGET) or split not in ("train", "test"):
                problems.append(f"line {lineno}: bad domain/split {domain!r}/{split!r}")
                continue
            if label not in (None, 0, 1) or isinstance(label, bool):
                problems.append(f"line {lineno}: label must be 0, 1 or null")
                continue
            feats = rec["features"]
            if not isinstance(feats, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in feats
            ):
                problems.append(f"line {lineno}: features must be an array of numbers")
                continue
            if dim is not None and len(feats) != dim:
                problems.append(f"line {lineno}: feature dimension {len(feats)} != header dim {dim}")
                continue
            if domain == SOURCE and label is None:
                problems.append(f"line {lineno}: source record {rec['id']!r} has no label")
                continue
            if split == "test" and label is None:
                problems.append(f"line {lineno}: test record {rec['id']!r} has no label")
                continue
            try:
                ex = Example(str(rec["id"]), np.asarray(feats, dtype=np.float64), label, domain)
            except DatasetError as exc:
                problems.append(f"line {lineno}: {exc}")
                continue
            if domain == SOURCE:
                pools["source_train" if split == "train" else "source_test"].append(ex)
            elif split == "test":
                pools["target_test"].append(ex)
            elif label is None:
                pools["target_train_unlabeled"].append(ex)
            else:
                pools["target_train_labeled"].append(ex)
    if header is None and not problems:
        problems.append("line 1: empty manifest")
    if problems:
        raise ManifestError(problems)
    shape = tuple(header["feature_shape"]) if "feature_shape" in header else None
    return DomainDataset(**{k: tuple(v) for k, v in pools.items()}, feature_shape=shape)


# ---------------------------------------------------------------------------
# batching


@dataclass(frozen=True)
class TriStreamBatch:
    """One step's worth of examples from the three training pools.

    Unlabeled target examples carry features only.
    """

    source_x: np.ndarray
    source_y: np.ndarray
    target_labeled_x: np.ndarray
    target_labeled_y: np.ndarray
    target_unlabeled_x: np.ndarray
    source_ids: tuple[str, ...] = field(default=())
    target_labeled_ids: tuple[str, ...] = field(default=())
    target_unlabeled_ids: tuple[str, ...] = field(default=())

    @property
    def target_x(self) -> np.ndarray:
        return np.concatenate([self.target_labeled_x, self.target_unlabeled_x], axis=0)

    @property
    def n_labeled(self) -> int:
        return len(self.source_y) + len(self.target_labeled_y)


class _Cycler:
    """Endless reshuffled pass over ``n`` indices."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self._order = np.zeros(0, dtype=np.int64)
        self._pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self._pos >= self._order.size:
                self._order = self.rng.permutation(self.n)
                self._pos = 0
            chunk = self._order[self._pos : self._pos + k]
            self._pos += chunk.size
            k -= chunk.size
            out.append(chunk)
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def labeled_slots(batch_size: int, n_labeled: int, n_unlabeled: int) -> int:
    """Labeled-target share of a target batch, proportional to pool sizes."""
    if n_labeled == 0:
        return 0
    if n_unlabeled == 0:
        return batch_size
    k = int(round(batch_size * n_labeled / (n_labeled + n_unlabeled)))
    return min(max(k, 1), batch_size - 1) if batch_size > 1 else 1


def batches_per_epoch(ds: DomainDataset, batch_size: int) -> int:
    n_t = ds.n_target_labeled + ds.n_target_unlabeled
    return math.ceil(max(ds.n_source, n_t) / batch_size)


def make_batches(ds: DomainDataset, batch_size_per_domain: int, seed: int,
                 epochs: Optional[int] = 1) -> Iterator[TriStreamBatch]:
    """Yield aligned source/target batches; ``epochs=None`` streams forever.

    An epoch ends when the larger domain has been exhausted once; the smaller
    pools are cycled with a fresh shuffle each time they run out.
    """
    if batch_size_per_domain < 1:
        raise DatasetError("batch_size_per_domain must be >= 1")
    if ds.n_source == 0:
        raise DatasetError("empty source pool")
    n_l, n_u = ds.n_target_labeled, ds.n_target_unlabeled
    if n_l + n_u == 0:
        raise DatasetError("empty target pool")
    b = batch_size_per_domain
    k_l = labeled_slots(b, n_l, n_u)
    k_u = b - k_l
    seq = np.random.SeedSequence(seed)
    rs, rl, ru = (np.random.default_rng(s) for s in seq.spawn(3))
    src, lab, unl = _Cycler(ds.n_source, rs), _Cycler(n_l, rl), _Cycler(n_u, ru)
    xs, ys = stack_features(ds.source_train), stack_labels(ds.source_train)
    xl = stack_features(ds.target_train_labeled, ds.dim)
    yl = stack_labels(ds.target_train_labeled) if n_l else np.zeros(0, dtype=np.int64)
    xu = stack_features(ds.target_train_unlabeled, ds.dim)
    steps = batches_per_epoch(ds, b)
    epoch = 0
    while epochs is None or epoch < epochs:
        for _ in range(steps):
            i_s = src.take(b)
            i_l = lab.take(k_l) if k_l else np.zeros(0, dtype=np.int64)
            i_u = unl.take(k_u) if k_u else np.zeros(0, dtype=np.int64)
            yield TriStreamBatch(
                source_x=xs[i_s], source_y=ys[i_s],
                target_labeled_x=xl[i_l], target_labeled_y=yl[i_l],
                target_unlabeled_x=xu[i_u],
                source_ids=tuple(ds.source_train[i].id for i in i_s),
                target_labeled_ids=tuple(ds.target_train_labeled[i].id for i in i_l),
                target_unlabeled_ids=tuple(ds.target_train_unlabeled[i].id for i in i_u),
            )
        epoch += 1


def make_single_batches(examples: Sequence[Example], batch_size: int, seed: int,
                        epochs: Optional[int] = 1) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Labeled (x, y) batches over one pool, for single-domain baselines."""
    if not examples:
        raise DatasetError("empty training pool")
    if batch_size < 1:
        raise DatasetError("batch_size must be >= 1")
    x, y = stack_features(examples), stack_labels(examples)
    cyc = _Cycler(len(examples), np.random.default_rng(seed))
    steps = math.ceil(len(examples) / batch_size)
    epoch = 0
    while epochs is None or epoch < epochs:
        for _ in range(steps):
            idx = cyc.take(batch_size)
            yield x[idx], y[idx]
        epoch += 1
