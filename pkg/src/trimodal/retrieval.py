"""k-NN over pooled, L2-normalized feature-stage representations:
temperature-weighted classification and cross-modal retrieval."""

from dataclasses import dataclass

import numpy as np

from .serialize import load_container, save_container


class RetrievalError(ValueError):
    """Empty index/database or mismatched feature dimensions."""


@dataclass
class FeatureRecord:
    vector: np.ndarray  # unit L2 norm
    label: int
    modality: str
    sample_ref: int


@dataclass(frozen=True)
class KnnConfig:
    k: int = 20
    tau: float = 0.07

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


def pool_grid(grid_data, pooling="mean"):
    """Pool a [B, T, H, W, d] feature grid to [B, d]."""
    if pooling == "mean":
        return grid_data.mean(axis=(1, 2, 3))
    if pooling == "max":
        return grid_data.max(axis=(1, 2, 3))
    raise ValueError(f"unknown pooling {pooling!r}")


def extract_features(model, samples, pooling="mean"):
    """Eval-mode feature-stage grid, pooled and L2-normalized, per sample."""
    records = []
    groups = {}
    for pos, s in enumerate(samples):
        groups.setdefault((s.modality, s.tensor.shape), []).append(pos)
    vectors = [None] * len(samples)
    for key in sorted(groups, key=str):
        positions = groups[key]
        _, stage_grids = model.forward_group([samples[p] for p in positions])
        pooled = pool_grid(model.trunk.feature_grid(stage_grids).data, pooling)
        pooled = pooled.astype(np.float64)
        norms = np.linalg.norm(pooled, axis=1, keepdims=True)
        pooled = pooled / np.where(norms == 0, 1.0, norms)
        for p, vec in zip(positions, pooled):
            vectors[p] = vec
    for pos, s in enumerate(samples):
        records.append(FeatureRecord(vector=vectors[pos], label=int(s.label),
                                     modality=s.modality, sample_ref=pos))
    return records


def knn_classify(query, index, cfg=KnnConfig()):
    """Temperature-weighted k-NN vote.

    Takes the top-k index records by dot product s with the query, scores
    each class by the sum of e^{s/tau} over its neighbors, and predicts
    the argmax (ties break to the lowest class index). Returns
    (predicted_class, scores[n_classes]).
    """
    if not index:
        raise RetrievalError("empty k-NN index")
    vectors = np.stack([r.vector for r in index])
    if vectors.shape[1] != query.vector.shape[0]:
        raise RetrievalError(f"feature dims differ: query {query.vector.shape[0]} "
                             f"vs index {vectors.shape[1]}")
    sims = vectors @ query.vector
    k = min(cfg.k, len(index))
    top = np.argsort(-sims, kind="stable")[:k]
    n_classes = max(r.label for r in index) + 1
    scores = np.zeros(n_classes)
    for i in top:
        scores[index[i].label] += np.exp(sims[i] / cfg.tau)
    return int(scores.argmax()), scores


def knn_accuracy(queries, index, cfg=KnnConfig()):
    correct = sum(knn_classify(q, index, cfg)[0] == q.label for q in queries)
    return correct / len(queries)


def cross_modal_retrieve(query_records, database_records, top_n):
    """For each query, the top_n database records by dot product, descending.

    Returns, per query, a list of (database_position, similarity, label).
    """
    if not database_records:
        raise RetrievalError("empty retrieval database")
    db = np.stack([r.vector for r in database_records])
    results = []
    for q in query_records:
        sims = db @ q.vector
        order = np.argsort(-sims, kind="stable")[:top_n]
        results.append([(int(i), float(sims[i]), database_records[i].label)
                        for i in order])
    return results


def save_feature_index(stem, records, meta=None):
    arrays = {"vectors": np.stack([r.vector for r in records]),
              "labels": np.array([r.label for r in records], dtype=np.float64),
              "refs": np.array([r.sample_ref for r in records], dtype=np.float64)}
    full_meta = {"modalities": [r.modality for r in records]}
    if meta:
        full_meta.update(meta)
    return save_container(stem, arrays, meta=full_meta, kind="feature_index")


def load_feature_index(stem):
    arrays, meta, kind = load_container(stem)
    if kind != "feature_index":
        raise ValueError(f"container {stem} is a {kind!r}, not a feature index")
    vectors = arrays["vectors"]
    labels = arrays["labels"].astype(int)
    refs = arrays["refs"].astype(int)
    modalities = meta["modalities"]
    return [FeatureRecord(vector=vectors[i], label=int(labels[i]),
                          modality=modalities[i], sample_ref=int(refs[i]))
            for i in range(len(labels))]
