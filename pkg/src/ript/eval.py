"""Retrieval, linear-probe and clustering measures over latent features."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import geometry

log = logging.getLogger(__name__)

SETTINGS = ("NrNr", "NrRr", "RrRr")


@dataclass
class FeatureTable:
    features: np.ndarray
    labels: list
    split: str = "test"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if len(self.labels) != len(self.features):
            raise ValueError(f"{len(self.labels)} labels for {len(self.features)} feature rows")
        self.labels = [str(lab) for lab in self.labels]

    def __len__(self):
        return len(self.labels)

    @property
    def categories(self):
        return sorted(set(self.labels))


def _labels(x):
    return x.labels if isinstance(x, FeatureTable) else [str(v) for v in x]


def _feats(x):
    return x.features if isinstance(x, FeatureTable) else np.asarray(x, dtype=np.float64)


def euclidean_distances(a, b, chunk=256):
    """Exact pairwise distances computed from coordinate differences."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty((len(a), len(b)))
    for s in range(0, len(a), chunk):
        diff = a[s : s + chunk, None, :] - b[None, :, :]
        out[s : s + chunk] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return out


def average_precision(relevant):
    """AP of a ranked boolean relevance list; None when nothing is relevant."""
    rel = np.asarray(relevant, dtype=bool)
    hits = rel.sum()
    if hits == 0:
        return None
    precision = np.cumsum(rel) / np.arange(1, len(rel) + 1)
    return float(precision[rel].sum() / hits)


def retrieval_aps(features, labels):
    """Per-query AP; every item queries all others, distance ties broken by index."""
    labels = np.asarray(labels)
    D = euclidean_distances(features, features)
    n = len(labels)
    aps = np.full(n, np.nan)
    for i in range(n):
        order = np.argsort(D[i], kind="stable")
        order = order[order != i]
        ap = average_precision(labels[order] == labels[i])
        if ap is not None:
            aps[i] = ap
    return aps


def macro_map(table, labels=None):
    """Mean AP averaged within each category and then across categories, in percent."""
    feats = _feats(table)
    labels = _labels(table) if labels is None else [str(v) for v in labels]
    labels = np.asarray(labels)
    cats, counts = np.unique(labels, return_counts=True)
    single = cats[counts < 2]
    if len(single):
        log.warning("macro_map: excluding single-sample categories %s", ", ".join(single))
    if len(cats) - len(single) < 1:
        raise ValueError("macro_map: no category has two or more samples")
    aps = retrieval_aps(feats, labels)
    per_cat = [np.nanmean(aps[labels == c]) for c in cats if c not in set(single)]
    return 100.0 * float(np.mean(per_cat))


def label_prior_baseline(labels):
    """macroMAP of an uninformative embedding (all features identical)."""
    return macro_map(np.zeros((len(labels), 1)), labels)


# ---------------------------------------------------------------------------
# linear probe


@dataclass
class LinearProbe:
    classes: list
    weight: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def scores(self, features):
        x = (np.asarray(features, dtype=np.float64) - self.mean) / self.scale
        return x @ self.weight + self.bias

    def predict(self, features):
        return [self.classes[i] for i in np.argmax(self.scores(features), axis=1)]


def fit_linear_probe(train, labels=None, epochs=200, reg=1e-4, lr=0.1, batch_size=32, seed=0):
    """One-vs-rest linear classifiers trained by minibatch subgradient descent on
    the L2-regularized hinge loss. Features are standardized with train statistics."""
    x = _feats(train)
    labels = np.asarray(_labels(train) if labels is None else [str(v) for v in labels])
    classes = sorted(set(labels.tolist()))
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    x = (x - mean) / scale
    n, d = x.shape
    y = np.where(labels[:, None] == np.asarray(classes)[None, :], 1.0, -1.0)
    W = np.zeros((d, len(classes)))
    b = np.zeros(len(classes))
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        step = lr / np.sqrt(1.0 + epoch)
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            xb, yb = x[idx], y[idx]
            active = (yb * (xb @ W + b)) < 1.0
            g = -(active * yb)
            W -= step * (xb.T @ g / len(idx) + reg * W)
            b -= step * g.mean(axis=0)
    return LinearProbe(classes, W, b, mean, scale)


def linear_probe(train, test, train_labels=None, test_labels=None, seed=0, epochs=200):
    """Macro (per-category mean) test accuracy of a linear probe, in percent."""
    tr_labels = _labels(train) if train_labels is None else [str(v) for v in train_labels]
    te_labels = _labels(test) if test_labels is None else [str(v) for v in test_labels]
    missing = sorted(set(te_labels) - set(tr_labels))
    if missing:
        raise ValueError(f"linear_probe: categories missing from the training set: {missing}")
    probe = fit_linear_probe(_feats(train), tr_labels, epochs=epochs, seed=seed)
    pred = np.asarray(probe.predict(_feats(test)))
    truth = np.asarray(te_labels)
    accs = [np.mean(pred[truth == c] == c) for c in sorted(set(te_labels))]
    return 100.0 * float(np.mean(accs))


# ---------------------------------------------------------------------------
# clustering


def _kmeans_pp(x, k, rng):
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        i = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(x[i])
        d2 = np.minimum(d2, ((x - x[i]) ** 2).sum(axis=1))
    return np.array(centers)


def _assign(x, centers):
    d2 = euclidean_distances(x, centers) ** 2
    return np.argmin(d2, axis=1), d2


def kmeans(features, k, restarts=10, seed=0, max_iter=300):
    """Lloyd's algorithm from k-means++ seeds; returns ``(assignment, inertia)`` of the best restart.

    An emptied cluster is reseeded at the point farthest from its current centre.
    """
    x = np.asarray(features, dtype=np.float64)
    if not 1 <= k <= len(x):
        raise ValueError(f"kmeans: need 1 <= k <= {len(x)}, got {k}")
    rng = np.random.default_rng(seed)
    best = (None, np.inf)
    for _ in range(restarts):
        centers = _kmeans_pp(x, k, rng)
        assign = None
        for _ in range(max_iter):
            new, d2 = _assign(x, centers)
            for c in range(k):
                if not np.any(new == c):
                    far = int(np.argmax(d2[np.arange(len(x)), new]))
                    new[far] = c
                    d2[far] = ((x[far] - centers) ** 2).sum(axis=1)
            if assign is not None and np.array_equal(new, assign):
                break
            assign = new
            centers = np.stack([x[assign == c].mean(axis=0) for c in range(k)])
        inertia = float(((x - centers[assign]) ** 2).sum())
        if inertia < best[1]:
            best = (assign.copy(), inertia)
    return best


def _entropy_of_counts(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(labels_true, labels_pred):
    """Normalized mutual information with arithmetic-mean normalization."""
    _, t = np.unique(np.asarray(labels_true), return_inverse=True)
    _, p = np.unique(np.asarray(labels_pred), return_inverse=True)
    n = len(t)
    if len(p) != n:
        raise ValueError("nmi: label arrays differ in length")
    joint = np.zeros((t.max() + 1, p.max() + 1))
    np.add.at(joint, (t, p), 1.0)
    ht = _entropy_of_counts(joint.sum(axis=1))
    hp = _entropy_of_counts(joint.sum(axis=0))
    if ht == 0 and hp == 0:
        return 1.0
    pij = joint / n
    outer = np.outer(pij.sum(axis=1), pij.sum(axis=0))
    nz = pij > 0
    mi = float((pij[nz] * np.log(pij[nz] / outer[nz])).sum())
    denom = (ht + hp) / 2.0
    return float(min(max(mi / denom, 0.0), 1.0))


def kmeans_nmi(table, k=None, labels=None, restarts=10, seed=0):
    feats = _feats(table)
    labels = _labels(table) if labels is None else [str(v) for v in labels]
    k = len(set(labels)) if k is None else k
    assign, _ = kmeans(feats, k, restarts, seed)
    return nmi(labels, assign)


# ---------------------------------------------------------------------------
# rotation settings


def rotate_sets(sets, rng):
    """Apply an independent random rotation to every set."""
    return [geometry.apply_rotation(ps, geometry.random_rotation(rng)) for ps in sets]


def rotation_harness(dataset, encode, setting, seed=0, trained_with=None):
    """Feature tables for a train/test pair under a rotation setting.

    dataset: ``(train_sets, test_sets)`` of pose-normalized OrientedPointSets.
    encode: callable mapping a list of sets to an (n, latent) array.
    setting: NrNr, NrRr or RrRr. The first half names the training-time regime,
    the second the test-time one; ``trained_with`` ("Nr"/"Rr") is the regime the
    encoder was trained under and must agree with the setting when given.
    """
    if setting not in SETTINGS:
        raise ValueError(f"unknown rotation setting {setting!r} (choose from {SETTINGS})")
    train_rot, test_rot = setting[:2], setting[2:]
    if trained_with is not None and trained_with != train_rot:
        raise ValueError(f"setting {setting} needs an encoder trained under {train_rot}, got {trained_with}")
    train_sets, test_sets = dataset
    rng = np.random.default_rng(seed)
    tables = []
    for split, sets, regime in (("train", train_sets, train_rot), ("test", test_sets, test_rot)):
        sets = list(sets)
        if regime == "Rr":
            sets = rotate_sets(sets, rng)
        feats = np.asarray(encode(sets)) if sets else np.zeros((0, 0))
        tables.append(
            FeatureTable(feats, [ps.label for ps in sets], split, {"setting": setting, "rotation": regime})
        )
    return tuple(tables)


def evaluate(train: FeatureTable | None, test: FeatureTable, tasks=("retrieval", "probe", "cluster"), seed=0):
    out = {}
    if "retrieval" in tasks:
        out["macro_map"] = macro_map(test)
        out["label_prior_map"] = label_prior_baseline(test.labels)
    if "probe" in tasks:
        if train is None:
            raise ValueError("the probe task needs training features")
        out["probe_accuracy"] = linear_probe(train, test, seed=seed)
    if "cluster" in tasks:
        out["nmi"] = kmeans_nmi(test, seed=seed)
    return out


def check_unit_rows(features, tol=1e-6):
    norms = np.linalg.norm(np.asarray(features), axis=1)
    return bool(np.all(np.abs(norms - 1.0) <= tol))

