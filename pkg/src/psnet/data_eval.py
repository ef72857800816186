"""Dataset ingestion, pixel normalization, synthetic easy/hard data,
and the evaluation protocols (classification accuracy, pair
verification, centroid-contraction report).

IDX files are the big-endian self-describing containers used by the
classic digit corpora (magic 0x00000803 for images, 0x00000801 for
labels).  Pair lists are plain text: ``index_a index_b {0|1}`` per line,
``#`` starts a comment.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .models import PsnetModel, forward_embedding, forward_features, forward_logits
from .psn import PsnParams, psn_value
from .tensor import Tensor

__all__ = [
    "IdxError",
    "BadMagicError",
    "TruncatedFileError",
    "CountMismatchError",
    "Dataset",
    "ArraySet",
    "load_idx",
    "normalize",
    "make_synthetic",
    "load_pairs",
    "evaluate_classification",
    "evaluate_verification",
    "compute_embeddings",
    "hardness_from_model",
    "ClusterRow",
    "ClusterReport",
    "cluster_centroid_report",
]

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # uint8 [N, C, H, W]
    labels: np.ndarray  # int64 [N]
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatchError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")

    def to_arrayset(self) -> "ArraySet":
        return ArraySet(normalize(self.images), self.labels, self.num_classes)


@dataclass
class ArraySet:
    """Model-ready inputs: float64 arrays with integer labels."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int


def _read_exact(f, n: int, path: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"{path}: expected {n} more bytes, got {len(buf)}")
    return buf


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Parse an IDX image/label file pair into a Dataset."""
    with open(images_path, "rb") as f:
        magic, n, h, w = struct.unpack(">IIII", _read_exact(f, 16, images_path))
        if magic != IMAGES_MAGIC:
            raise BadMagicError(f"{images_path}: magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}")
        raw = _read_exact(f, n * h * w, images_path)
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, h, w)
    with open(labels_path, "rb") as f:
        magic, nl = struct.unpack(">II", _read_exact(f, 8, labels_path))
        if magic != LABELS_MAGIC:
            raise BadMagicError(f"{labels_path}: magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}")
        labels = np.frombuffer(_read_exact(f, nl, labels_path), dtype=np.uint8).astype(np.int64)
    if n != nl:
        raise CountMismatchError(f"{n} images but {nl} labels")
    num_classes = int(labels.max()) + 1 if labels.size else 0
    return Dataset(images, labels, num_classes)


def normalize(pixels) -> np.ndarray:
    """(p - 127.5) / 128 per pixel; affine, strictly increasing."""
    return (np.asarray(pixels, dtype=np.float64) - 127.5) / 128.0


def make_synthetic(
    num_classes: int,
    per_class: int,
    hard_fraction: float,
    d: int,
    separation: float,
    hard_offset: float,
    seed: int,
    noise_seed: int | None = None,
) -> tuple[ArraySet, np.ndarray]:
    """Gaussian class clusters with a displaced hard sub-cluster.

    Each class gets an easy cluster (unit noise around a center at
    distance `separation` from the origin) plus a smaller hard cluster
    whose center is shifted `hard_offset` toward the nearest rival
    class center, the most confusable neighbour.  Returns the data and
    the per-sample hardness flags.

    The center layout depends only on `seed`; `noise_seed` redraws just
    the per-sample noise, giving held-out splits of the same task.
    """
    if not 0.0 < hard_fraction < 0.5:
        raise ValueError("hard_fraction must be in (0, 0.5)")
    if num_classes < 2 or per_class < 2 or d < 1:
        raise ValueError("need num_classes >= 2, per_class >= 2, d >= 1")
    if separation <= 0 or hard_offset < 0:
        raise ValueError("separation must be positive and hard_offset non-negative")
    n_hard = int(round(per_class * hard_fraction))
    if n_hard < 1 or n_hard >= per_class:
        raise ValueError("hard_fraction leaves a class without both partitions")

    center_rng = np.random.default_rng([seed, 0])
    noise_rng = np.random.default_rng([seed, 1, 0 if noise_seed is None else 1 + noise_seed])
    dirs = center_rng.normal(size=(num_classes, d))
    centers = separation * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)

    xs, ys, hard = [], [], []
    for c in range(num_classes):
        dists = np.linalg.norm(centers - centers[c], axis=1)
        rival = centers[int(np.argmax(dists))]
        gap = rival - centers[c]
        gap_norm = np.linalg.norm(gap)
        shift = hard_offset * gap / gap_norm if gap_norm > 0 else 0.0
        n_easy = per_class - n_hard
        xs.append(centers[c] + noise_rng.normal(size=(n_easy, d)))
        xs.append(centers[c] + shift + noise_rng.normal(size=(n_hard, d)))
        ys.append(np.full(per_class, c, dtype=np.int64))
        hard.append(np.concatenate([np.zeros(n_easy, dtype=bool), np.ones(n_hard, dtype=bool)]))
    data = ArraySet(np.concatenate(xs), np.concatenate(ys), num_classes)
    return data, np.concatenate(hard)


def load_pairs(path: str, n_items: int | None = None) -> list[tuple[int, int, bool]]:
    """Read a verification pair list; validates indices when n_items given."""
    pairs: list[tuple[int, int, bool]] = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3 or parts[2] not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: expected 'index_a index_b 0|1'")
            a, b = int(parts[0]), int(parts[1])
            if n_items is not None and not (0 <= a < n_items and 0 <= b < n_items):
                raise ValueError(f"{path}:{lineno}: pair index out of range [0, {n_items})")
            pairs.append((a, b, parts[2] == "1"))
    return pairs


def _batched_forward(model: PsnetModel, inputs: np.ndarray, fn, chunk: int = 512) -> np.ndarray:
    was_training = model.training
    model.set_training(False)
    try:
        outs = [fn(model, Tensor(inputs[i : i + chunk])).data for i in range(0, len(inputs), chunk)]
    finally:
        model.set_training(was_training)
    return np.concatenate(outs)


def evaluate_classification(model: PsnetModel, data: ArraySet) -> float:
    """Fraction of argmax class scores matching the labels (eval mode)."""
    if len(data.labels) == 0:
        raise ValueError("empty dataset")
    scores = _batched_forward(model, np.asarray(data.inputs, dtype=np.float64), forward_logits)
    return float((scores.argmax(axis=1) == np.asarray(data.labels)).mean())


def compute_embeddings(model: PsnetModel, inputs: np.ndarray, pre_psn: bool = False) -> np.ndarray:
    """Eval-mode embeddings; post-squash by default, pre-squash on request."""
    fn = forward_features if pre_psn else forward_embedding
    return _batched_forward(model, np.asarray(inputs, dtype=np.float64), fn)


def evaluate_verification(
    model: PsnetModel,
    data: ArraySet,
    pairs: list[tuple[int, int, bool]],
    folds: int = 10,
    pre_psn: bool = False,
) -> float:
    """k-fold best-threshold pair verification on cosine similarity.

    Pair i belongs to fold i % folds.  For each fold the threshold
    maximizing accuracy on the other folds (ties -> smaller threshold)
    is applied to the held-out fold; the result is the fold mean.
    """
    if len(pairs) < folds:
        raise ValueError(f"need at least {folds} pairs, got {len(pairs)}")
    n = len(data.labels)
    idx_a = np.array([p[0] for p in pairs])
    idx_b = np.array([p[1] for p in pairs])
    same = np.array([p[2] for p in pairs], dtype=bool)
    if idx_a.min() < 0 or idx_b.min() < 0 or idx_a.max() >= n or idx_b.max() >= n:
        raise ValueError("pair index out of range")

    fold_of = np.arange(len(pairs)) % folds
    for f in range(folds):
        members = same[fold_of == f]
        if members.size == 0 or members.all() or not members.any():
            raise ValueError(f"fold {f} lacks both pair polarities")

    used = np.unique(np.concatenate([idx_a, idx_b]))
    emb = compute_embeddings(model, np.asarray(data.inputs)[used], pre_psn=pre_psn)
    norms = np.linalg.norm(emb, axis=1)
    bad = np.nonzero(norms == 0.0)[0]
    if bad.size:
        raise ValueError(f"zero-norm embedding for sample index {int(used[bad[0]])}")
    pos = {int(i): j for j, i in enumerate(used)}
    ea = emb[[pos[int(i)] for i in idx_a]]
    eb = emb[[pos[int(i)] for i in idx_b]]
    sims = (ea * eb).sum(axis=1) / (np.linalg.norm(ea, axis=1) * np.linalg.norm(eb, axis=1))

    accs = []
    for f in range(folds):
        train = fold_of != f
        uniq = np.unique(sims[train])
        # candidates: below everything, midpoints between neighbours,
        # above everything -- no threshold rides exactly on a sim value
        cands = np.concatenate([[uniq[0] - 1.0], (uniq[:-1] + uniq[1:]) / 2.0, [uniq[-1] + 1.0]])
        preds = sims[train][None, :] >= cands[:, None]
        train_acc = (preds == same[train][None, :]).mean(axis=1)
        t = cands[int(np.argmax(train_acc))]  # first max = smallest threshold
        accs.append(((sims[~train] >= t) == same[~train]).mean())
    return float(np.mean(accs))


def hardness_from_model(model: PsnetModel, data: ArraySet, tau: float = 0.5) -> np.ndarray:
    """A sample is hard when its true-class softmax score is below tau."""
    scores = _batched_forward(model, np.asarray(data.inputs, dtype=np.float64), forward_logits)
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs[np.arange(len(data.labels)), np.asarray(data.labels)] < tau


@dataclass
class ClusterRow:
    label: int
    pre_dist: float
    post_dist: float
    ratio: float


@dataclass
class ClusterReport:
    rows: list[ClusterRow]
    aggregate_pre: float
    aggregate_post: float
    aggregate_ratio: float
    tau: float | None = None

    def write_csv(self, path: str) -> None:
        with open(path, "w") as f:
            f.write("class,pre_dist,post_dist,ratio\n")
            for r in self.rows:
                f.write(f"{r.label},{r.pre_dist!r},{r.post_dist!r},{r.ratio!r}\n")
            f.write(
                f"aggregate,{self.aggregate_pre!r},{self.aggregate_post!r},{self.aggregate_ratio!r}\n"
            )


def _ratio(post: float, pre: float) -> float:
    return post / pre if pre > 0 else 1.0


def cluster_centroid_report(
    features_pre: np.ndarray,
    psn: PsnParams,
    hardness: np.ndarray,
    labels: np.ndarray,
    tau: float | None = None,
) -> ClusterReport:
    """Distance between easy and hard centroids per class, before and
    after squashing.  Since the squashed image lies in (0, alpha)^d, the
    post distance can never exceed alpha * sqrt(d)."""
    feats = features_pre.data if isinstance(features_pre, Tensor) else np.asarray(features_pre)
    hardness = np.asarray(hardness, dtype=bool)
    labels = np.asarray(labels)
    post_feats = psn_value(feats, psn.alpha, psn.beta, psn.gamma)

    rows = []
    for c in np.unique(labels):
        in_c = labels == c
        easy = in_c & ~hardness
        hard = in_c & hardness
        if not easy.any() or not hard.any():
            raise ValueError(f"class {int(c)} is missing an easy or hard partition")
        pre = float(np.linalg.norm(feats[easy].mean(axis=0) - feats[hard].mean(axis=0)))
        post = float(np.linalg.norm(post_feats[easy].mean(axis=0) - post_feats[hard].mean(axis=0)))
        rows.append(ClusterRow(int(c), pre, post, _ratio(post, pre)))

    agg_pre = float(np.mean([r.pre_dist for r in rows]))
    agg_post = float(np.mean([r.post_dist for r in rows]))
    return ClusterReport(rows, agg_pre, agg_post, _ratio(agg_post, agg_pre), tau)
