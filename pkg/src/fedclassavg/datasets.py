"""Datasets, non-IID client partitions and two-view augmentation."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class PartitionError(ValueError):
    pass


@dataclass
class LabeledDataset:
    features: np.ndarray  # (N, input_dim) vectors or (N, H, W) images, float32
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) == 0:
            raise ValueError("dataset is empty")
        if len(self.features) != len(self.labels):
            raise ValueError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels outside [0, {self.num_classes})")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")

    def __len__(self):
        return len(self.labels)

    @property
    def is_image(self) -> bool:
        return self.features.ndim == 3

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.features.shape[1:]))

    def class_counts(self, indices=None) -> np.ndarray:
        labels = self.labels if indices is None else self.labels[np.asarray(indices, dtype=np.int64)]
        return np.bincount(labels, minlength=self.num_classes)


@dataclass
class PartitionPlan:
    client_indices: list[np.ndarray]
    total: int = field(default=0)

    def __post_init__(self):
        self.client_indices = [np.asarray(ix, dtype=np.int64) for ix in self.client_indices]
        if not self.total:
            self.total = int(sum(len(ix) for ix in self.client_indices))

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)

    @property
    def sizes(self) -> list[int]:
        return [len(ix) for ix in self.client_indices]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["client_id", "sample_index"])
            for cid, ix in enumerate(self.client_indices):
                for i in ix:
                    w.writerow([cid, int(i)])

    @classmethod
    def from_csv(cls, path) -> "PartitionPlan":
        rows: dict[int, list[int]] = {}
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.setdefault(int(rec["client_id"]), []).append(int(rec["sample_index"]))
        k = max(rows) + 1 if rows else 0
        return cls([rows.get(c, []) for c in range(k)])


@dataclass(frozen=True)
class AugmentationConfig:
    noise_sigma: float = 0.0
    flip_prob: float = 0.0
    crop_pad: int = 0
    scale_jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("noise_sigma", "flip_prob", "scale_jitter"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.flip_prob > 1:
            raise ValueError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if int(self.crop_pad) != self.crop_pad or self.crop_pad < 0:
            raise ValueError(f"crop_pad must be a non-negative integer, got {self.crop_pad}")


# ---------------------------------------------------------------------------
# sources
# ---------------------------------------------------------------------------


def generate_synthetic(
    num_classes: int,
    input_dim: int,
    samples_per_class: int,
    class_separation: float,
    seed: int,
) -> tuple[LabeledDataset, LabeledDataset]:
    """Gaussian clusters with unit covariance, class means ``class_separation`` apart.

    Returns stratified ``(train, test)`` splits, 80/20 per class.
    """
    if num_classes < 2 or input_dim < 2 or samples_per_class < 2:
        raise ValueError(
            "generate_synthetic needs num_classes >= 2, input_dim >= 2, samples_per_class >= 2; "
            f"got {num_classes}, {input_dim}, {samples_per_class}"
        )
    if not np.isfinite(class_separation) or class_separation < 0:
        raise ValueError(f"class_separation must be finite and >= 0, got {class_separation}")
    rng = np.random.default_rng(seed)
    if num_classes <= input_dim:
        directions = np.eye(input_dim)[:num_classes]
    else:
        # more classes than axes: random directions, only approximately equidistant
        directions = rng.standard_normal((num_classes, input_dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = directions * (class_separation / np.sqrt(2.0))

    n_train = max(1, int(round(0.8 * samples_per_class)))
    n_train = min(n_train, samples_per_class - 1)
    parts = {"train": ([], []), "test": ([], [])}
    for c in range(num_classes):
        x = means[c] + rng.standard_normal((samples_per_class, input_dim))
        parts["train"][0].append(x[:n_train])
        parts["test"][0].append(x[n_train:])
        parts["train"][1].append(np.full(n_train, c))
        parts["test"][1].append(np.full(samples_per_class - n_train, c))
    out = []
    for split in ("train", "test"):
        xs = np.concatenate(parts[split][0])
        ys = np.concatenate(parts[split][1])
        order = rng.permutation(len(ys))
        out.append(LabeledDataset(xs[order], ys[order], num_classes, split))
    return out[0], out[1]


def _read_exact(data: bytes, pos: int, n: int, path) -> bytes:
    if pos + n > len(data):
        raise TruncatedFileError(f"{path}: truncated, needed {n} bytes at offset {pos}")
    return data[pos : pos + n]


def _read_idx(path, magic: int, rank: int) -> np.ndarray:
    data = Path(path).read_bytes()
    (found,) = struct.unpack(">I", _read_exact(data, 0, 4, path))
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{rank}I", _read_exact(data, 4, 4 * rank, path))
    n = int(np.prod(dims, dtype=np.int64))
    start = 4 + 4 * rank
    payload = _read_exact(data, start, n, path)
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None, split: str = "train") -> LabeledDataset:
    """Read an IDX image/label file pair (MNIST family); pixels scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise CountMismatchError(
            f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels"
        )
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 1
    return LabeledDataset(images.astype(np.float32) / 255.0, labels, num_classes, split)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write u8 images (N, H, W) and labels (N,) in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(
        struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes()
    )
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# ---------------------------------------------------------------------------
# partitions
# ---------------------------------------------------------------------------


def _quotas(n: int, k: int) -> np.ndarray:
    q = np.full(k, n // k, dtype=np.int64)
    q[: n % k] += 1
    return q


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    raw = weights / weights.sum() * total
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    if short:
        # ties broken by index so the allocation is deterministic
        order = np.lexsort((np.arange(len(raw)), -(raw - base)))
        base[order[:short]] += 1
    return base


def partition_iid(ds: LabeledDataset, K: int, seed: int) -> PartitionPlan:
    if K < 1 or K > len(ds):
        raise PartitionError(f"need 1 <= K <= {len(ds)}, got K={K}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    bounds = np.concatenate([[0], np.cumsum(_quotas(len(ds), K))])
    return PartitionPlan([np.sort(perm[bounds[i] : bounds[i + 1]]) for i in range(K)], len(ds))


def partition_dirichlet(ds: LabeledDataset, K: int, alpha: float, seed: int) -> PartitionPlan:
    """Per-client label proportions drawn from Dirichlet(alpha), equal client sizes.

    Each client draws a class-proportion vector and requests its quota in
    those proportions.  Requests are served from shuffled per-class pools in
    a random client order; when a pool runs dry the shortfall is filled from
    the remaining pools, preferring the classes the client weighted most.
    """
    if K < 1:
        raise PartitionError(f"K must be >= 1, got {K}")
    if not alpha > 0:
        raise PartitionError(f"alpha must be > 0, got {alpha}")
    n = len(ds)
    if K > n:
        raise PartitionError(f"K={K} clients exceeds {n} samples")
    rng = np.random.default_rng(seed)
    C = ds.num_classes
    quotas = _quotas(n, K)
    props = rng.dirichlet(np.full(C, float(alpha)), size=K)
    pools = [list(rng.permutation(np.flatnonzero(ds.labels == c))) for c in range(C)]

    assigned: list[list[int]] = [[] for _ in range(K)]
    for k in rng.permutation(K):
        want = _largest_remainder(int(quotas[k]), props[k])
        for c in range(C):
            take = min(int(want[c]), len(pools[c]))
            assigned[k].extend(pools[c][:take])
            del pools[c][:take]
    # fill shortfalls; total free samples equals total shortfall
    for k in range(K):
        short = int(quotas[k]) - len(assigned[k])
        for c in np.argsort(-props[k], kind="stable"):
            if short == 0:
                break
            take = min(short, len(pools[c]))
            assigned[k].extend(pools[c][:take])
            del pools[c][:take]
            short -= take
    return PartitionPlan([np.sort(np.asarray(a, dtype=np.int64)) for a in assigned], n)


def partition_skewed(ds: LabeledDataset, K: int, classes_per_client: int = 2, seed: int = 0) -> PartitionPlan:
    """Each client holds exactly ``classes_per_client`` labels, sizes equal within 1.

    Classes are dealt round-robin over a shuffled class order so every class
    is used when ``K * classes_per_client >= num_classes``.  A client's quota
    is split evenly over its classes.
    """
    C = ds.num_classes
    cpc = int(classes_per_client)
    if K < 1:
        raise PartitionError(f"K must be >= 1, got {K}")
    if not 1 <= cpc <= C:
        raise PartitionError(f"classes_per_client must be in [1, {C}], got {cpc}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(C)
    client_classes = [[int(order[(k * cpc + j) % C]) for j in range(cpc)] for k in range(K)]
    counts = ds.class_counts()
    holders = np.zeros(C, dtype=np.int64)
    for cls in client_classes:
        holders[cls] += 1
    if any(counts[c] == 0 for c in range(C) if holders[c]):
        raise PartitionError("a sampled class has no samples")

    def demand(q_total: int) -> np.ndarray:
        need = np.zeros((K, C), dtype=np.int64)
        for k, q in enumerate(_quotas(q_total, K)):
            for j, c in enumerate(client_classes[k]):
                need[k, c] = q // cpc + (1 if j < q % cpc else 0)
        return need

    q_total = min(len(ds), int(min(counts[c] * cpc // holders[c] for c in range(C) if holders[c])) * K + K)
    need = demand(q_total)
    while q_total > 0 and np.any(need.sum(axis=0) > counts):
        q_total -= 1
        need = demand(q_total)
    if q_total // K < cpc:
        raise PartitionError(
            f"infeasible: {K} clients x {cpc} classes needs at least {cpc} samples per client"
        )

    pools = [rng.permutation(np.flatnonzero(ds.labels == c)) for c in range(C)]
    used = np.zeros(C, dtype=np.int64)
    assigned = []
    for k in range(K):
        parts = []
        for c in client_classes[k]:
            m = int(need[k, c])
            parts.append(pools[c][used[c] : used[c] + m])
            used[c] += m
        assigned.append(np.sort(np.concatenate(parts)))
    return PartitionPlan(assigned, len(ds))


def matching_test_shards(
    plan: PartitionPlan,
    train: LabeledDataset,
    test: LabeledDataset,
    seed: int,
    shard_size: int | None = None,
) -> list[np.ndarray]:
    """Per-client test index sets that follow each client's train label mix.

    Shards are drawn without replacement within a client; different
    clients may share test samples.  By default each shard is the largest
    one the test pool can supply in the client's proportions.
    """
    pools = [np.flatnonzero(test.labels == c) for c in range(test.num_classes)]
    avail = np.array([len(p) for p in pools], dtype=np.float64)
    shards = []
    for k, ix in enumerate(plan.client_indices):
        rng = np.random.default_rng([seed, k])
        counts = train.class_counts(ix).astype(np.float64)
        counts[avail == 0] = 0
        if counts.sum() == 0:
            raise PartitionError(f"client {k} has no test classes available")
        share = counts / counts.sum()
        size = shard_size or int(np.floor(np.min(avail[share > 0] / share[share > 0]) + 1e-9))
        want = np.minimum(_largest_remainder(max(size, 1), counts), avail.astype(np.int64))
        picks = [rng.choice(pools[c], int(want[c]), replace=False) for c in range(len(pools)) if want[c]]
        shards.append(np.sort(np.concatenate(picks)))
    return shards


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def _augment_vectors(x, cfg, rng):
    out = x.astype(np.float64)
    if cfg.scale_jitter:
        out = out * (1.0 + cfg.scale_jitter * rng.standard_normal((len(x), 1)))
    if cfg.noise_sigma:
        out = out + cfg.noise_sigma * rng.standard_normal(x.shape)
    return out.astype(np.float32)


def _augment_images(x, cfg, rng):
    n, h, w = x.shape
    out = x.copy()
    p = int(cfg.crop_pad)
    if p:
        padded = np.pad(x, ((0, 0), (p, p), (p, p)))
        offsets = rng.integers(0, 2 * p + 1, size=(n, 2))
        for i, (dy, dx) in enumerate(offsets):
            out[i] = padded[i, dy : dy + h, dx : dx + w]
    if cfg.flip_prob:
        flip = rng.random(n) < cfg.flip_prob
        out[flip] = out[flip, :, ::-1]
    if cfg.noise_sigma:
        out = out + (cfg.noise_sigma * rng.standard_normal(out.shape)).astype(np.float32)
    return out.astype(np.float32)


def augment_two_views(x: np.ndarray, cfg: AugmentationConfig, round_nonce: int) -> tuple[np.ndarray, np.ndarray]:
    """Two independent random perturbations of a batch.

    Vectors (rank 2): per-sample multiplicative jitter then additive noise.
    Images (rank 3): pad-and-crop, horizontal flip, additive noise.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim not in (2, 3) or len(x) == 0:
        raise ValueError(f"augment_two_views expects a non-empty rank-2 or rank-3 batch, got {x.shape}")
    rng = np.random.default_rng([int(cfg.seed), int(round_nonce)])
    fn = _augment_vectors if x.ndim == 2 else _augment_images
    return fn(x, cfg, rng), fn(x, cfg, rng)
