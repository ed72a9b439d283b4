"""Objective probes of the style space: projection, silhouette, speaker
leakage and single-dimension control sweeps."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from slf.errors import ConfigurationError, ContractViolation

logger = logging.getLogger(__name__)


@dataclass
class EmbeddingSet:
    embeddings: np.ndarray
    speaker_ids: np.ndarray
    style_factors: np.ndarray
    utt_ids: List[str] = field(default_factory=list)
    codes: Optional[np.ndarray] = None

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.speaker_ids = np.asarray(self.speaker_ids, dtype=int)
        self.style_factors = np.asarray(self.style_factors, dtype=int)
        n = self.embeddings.shape[0]
        if self.speaker_ids.shape[0] != n or self.style_factors.shape[0] != n:
            raise ContractViolation("embeddings, speaker ids and style factors must have equal length")
        if not self.utt_ids:
            self.utt_ids = [str(i) for i in range(n)]

    def __len__(self):
        return self.embeddings.shape[0]

    def subset(self, idx) -> "EmbeddingSet":
        idx = np.asarray(idx, dtype=int)
        return EmbeddingSet(self.embeddings[idx], self.speaker_ids[idx], self.style_factors[idx],
                            [self.utt_ids[i] for i in idx], None if self.codes is None else self.codes[idx])

    def labels(self, label: str) -> np.ndarray:
        if label == "style":
            return self.style_factors
        if label == "speaker":
            return self.speaker_ids
        raise ContractViolation(f"label must be 'style' or 'speaker', got {label!r}")

    def write_tsv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            dims = self.embeddings.shape[1]
            w.writerow(["utt_id", "speaker_id", "style_factor", "code"] + [f"e{i}" for i in range(dims)])
            for i in range(len(self)):
                code = "" if self.codes is None else int(self.codes[i])
                w.writerow([self.utt_ids[i], int(self.speaker_ids[i]), int(self.style_factors[i]), code]
                           + [repr(float(x)) for x in self.embeddings[i]])

    @classmethod
    def read_tsv(cls, path) -> "EmbeddingSet":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh, delimiter="\t"))
        body = rows[1:]
        codes = [r[3] for r in body]
        return cls(
            embeddings=np.array([[float(x) for x in r[4:]] for r in body]),
            speaker_ids=np.array([int(r[1]) for r in body]),
            style_factors=np.array([int(r[2]) for r in body]),
            utt_ids=[r[0] for r in body],
            codes=None if any(c == "" for c in codes) else np.array([int(c) for c in codes]),
        )


def balanced_indices(style_factors: Sequence[int], n_total: int, seed: int) -> np.ndarray:
    """``n_total // n_styles`` utterances per style, drawn without replacement."""
    style_factors = np.asarray(style_factors)
    styles = np.unique(style_factors)
    per = n_total // len(styles)
    rng = np.random.default_rng(seed)
    picked = []
    for s in styles:
        pool = np.flatnonzero(style_factors == s)
        if pool.size < per:
            raise ConfigurationError(f"style {s} has only {pool.size} utterances, {per} requested")
        picked.append(np.sort(rng.choice(pool, size=per, replace=False)))
    return np.concatenate(picked)


def project_2d(emb: EmbeddingSet, method: str = "linear", seed: int = 0) -> np.ndarray:
    """2-D projection: principal directions (default) or seeded t-SNE."""
    x = emb.embeddings
    if x.shape[0] < 3:
        raise ContractViolation("projection needs at least 3 points")
    if method in ("linear", "deterministic-linear", "pca"):
        centered = x - x.mean(axis=0)
        _, s, vt = np.linalg.svd(centered, full_matrices=False)
        tol = max(x.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
        if s.size < 2 or s[1] <= tol:
            warnings.warn("degenerate covariance; falling back to the first two coordinates")
            return x[:, :2].copy()
        comps = vt[:2]
        # Deterministic sign: largest-magnitude loading of each axis positive.
        signs = np.sign(comps[np.arange(2), np.argmax(np.abs(comps), axis=1)])
        return centered @ (comps * signs[:, None]).T
    if method in ("stochastic", "stochastic-neighbor", "tsne"):
        from sklearn.manifold import TSNE

        perplexity = min(30.0, (x.shape[0] - 1) / 3.0)
        return TSNE(n_components=2, random_state=seed, init="pca", perplexity=perplexity).fit_transform(x)
    raise ContractViolation(f"unknown projection method {method!r}")


def silhouette_values(x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample silhouette coefficients under Euclidean distance.

    Singletons score 0; a sample with ``a == b == 0`` scores 0.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    # Row blocks keep the pairwise-difference buffer small for large N.
    d = np.empty((x.shape[0], x.shape[0]))
    for start in range(0, x.shape[0], 128):
        diff = x[start:start + 128, None, :] - x[None, :, :]
        d[start:start + 128] = np.sqrt(np.sum(diff * diff, axis=-1))
    uniq = np.unique(labels)
    onehot = (labels[:, None] == uniq[None, :]).astype(np.float64)
    sizes = onehot.sum(axis=0)
    sums = d @ onehot
    own = np.searchsorted(uniq, labels)
    n = x.shape[0]
    own_size = sizes[own]
    a = np.where(own_size > 1, sums[np.arange(n), own] / np.maximum(own_size - 1, 1), 0.0)
    mean_other = sums / sizes[None, :]
    mean_other[np.arange(n), own] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return np.where(own_size > 1, s, 0.0)


def silhouette(emb: EmbeddingSet, label: str = "style") -> float:
    """Mean silhouette coefficient of ``emb`` grouped by style or speaker."""
    labels = emb.labels(label)
    uniq, counts = np.unique(labels, return_counts=True)
    if uniq.size < 2:
        raise ContractViolation("silhouette needs at least two distinct labels")
    if np.any(counts < 2):
        raise ContractViolation("every label needs at least two members")
    return float(np.mean(silhouette_values(emb.embeddings, labels)))


def leakage_probe(emb: EmbeddingSet, test_fraction: float = 0.3, seed: int = 0) -> float:
    """Held-out speaker accuracy of a fresh softmax classifier on the embeddings.

    Higher accuracy means more speaker information leaks into the style space.
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import train_test_split

    y = emb.speaker_ids
    _, counts = np.unique(y, return_counts=True)
    if counts.size < 2 or np.any(counts * test_fraction < 1) or np.any(counts * (1 - test_fraction) < 1):
        raise ConfigurationError("stratified split infeasible for these speaker counts")
    x_tr, x_te, y_tr, y_te = train_test_split(emb.embeddings, y, test_size=test_fraction,
                                              stratify=y, random_state=seed)
    clf = LogisticRegression(C=1e4, max_iter=5000, tol=1e-6)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        clf.fit(x_tr, y_tr)
    return float(np.mean(clf.predict(x_te) == y_te))


def output_statistics(features: np.ndarray) -> Dict[str, float]:
    """Frame count, mean log-energy and spectral-centroid mean/std."""
    power = np.exp(np.clip(features, -30, 30))
    bins = np.arange(features.shape[1])
    centroid = (power * bins).sum(axis=1) / power.sum(axis=1)
    return {
        "frames": int(features.shape[0]),
        "mean_log_energy": float(features.mean()),
        "centroid_mean": float(centroid.mean()),
        "centroid_std": float(centroid.std()),
    }


def control_sweep(model, dim: int, values: Sequence[float], token_ids: Sequence[int], speaker_id: int,
                  base_embedding, seed: int = 0, max_frames: Optional[int] = None):
    """Synthesize with ``base_embedding[dim]`` replaced by each of ``values``.

    Returns:
        (list of feature matrices, list of per-output statistics dicts)
    """
    from slf.synthesis import synthesize

    base = np.asarray(base_embedding, dtype=np.float64).copy()
    if not 0 <= dim < base.shape[0]:
        raise ContractViolation(f"dimension {dim} out of range [0, {base.shape[0]})")
    if model is None:
        raise ConfigurationError("control sweep needs a trained model")
    outputs, stats = [], []
    for v in values:
        emb = base.copy()
        emb[dim] = v
        feats = synthesize(model, token_ids, speaker_id, emb, kind="embedding", seed=seed, max_frames=max_frames)
        outputs.append(feats)
        stats.append({"dim": dim, "value": float(v), **output_statistics(feats)})
    return outputs, stats


def is_monotone(seq: Sequence[float]) -> bool:
    """Non-decreasing or non-increasing, and not constant."""
    arr = np.asarray(seq, dtype=float)
    d = np.diff(arr)
    if np.all(d == 0):
        return False
    return bool(np.all(d >= 0) or np.all(d <= 0))


def sweep_values(embeddings: np.ndarray, base: np.ndarray, dim: int, n_values: int = 5,
                 span: float = 2.0) -> np.ndarray:
    """``n_values`` evenly spaced values centred on ``base[dim]``.

    The half-width is ``span`` standard deviations of that dimension over
    ``embeddings``, floored at a tenth of the mean deviation so that a
    dimension the encoder never moves still gets a visible sweep.
    """
    std = np.asarray(embeddings, dtype=float).std(axis=0)
    if not 0 <= dim < std.shape[0]:
        raise ContractViolation(f"dimension {dim} out of range [0, {std.shape[0]})")
    width = span * max(float(std[dim]), 0.1 * float(std.mean()), 1e-3)
    return float(base[dim]) + np.linspace(-width, width, n_values)


def scan_dimensions(model, embeddings, base, token_ids, speaker_id, dims, n_values: int = 5,
                    span: float = 2.0, seed: int = 0, max_frames: Optional[int] = None) -> List[Dict]:
    """Run :func:`control_sweep` over ``dims`` and flag monotone statistics."""
    results = []
    for d in dims:
        values = sweep_values(embeddings, base, d, n_values, span)
        outputs, stats = control_sweep(model, d, values, token_ids, speaker_id, base, seed=seed,
                                       max_frames=max_frames)
        results.append({
            "dim": int(d),
            "values": values,
            "outputs": outputs,
            "stats": stats,
            "frames_monotone": is_monotone([s["frames"] for s in stats]),
            "energy_monotone": is_monotone([s["mean_log_energy"] for s in stats]),
            "centroid_monotone": is_monotone([s["centroid_mean"] for s in stats]),
        })
    return results


def write_sweep(results: Sequence[Dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["dim", "value", "frames", "mean_log_energy", "centroid_mean", "centroid_std"])
        for r in results:
            for s in r["stats"]:
                w.writerow([s["dim"], repr(s["value"]), s["frames"], repr(s["mean_log_energy"]),
                            repr(s["centroid_mean"]), repr(s["centroid_std"])])
