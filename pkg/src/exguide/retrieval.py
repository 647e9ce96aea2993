"""Top-K example retrieval over context-window motion features."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .disentangle import MotionFeatureSeq, extract_features


@dataclass
class FeatureIndex:
    ids: np.ndarray        # (n,)
    full: np.ndarray       # (n, C_f, M + H)
    M: int
    use_diff: bool = True

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("index ids must be unique")
        self.keys = np.stack([retrieval_key(f, self.M, self.use_diff) for f in self.full]) \
            if len(self.full) else np.zeros((0, 0))
        self._row = {int(i): r for r, i in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    @property
    def context(self) -> np.ndarray:
        return self.full[:, :, : self.M]

    def features_of(self, seq_id: int) -> np.ndarray:
        return self.full[self._row[int(seq_id)]]


@dataclass
class ExampleSet:
    omega: list
    features: np.ndarray   # (K, C_f, M + H)
    distances: np.ndarray  # (K,) ascending

    @property
    def K(self) -> int:
        return len(self.omega)


def temporal_difference(F: np.ndarray) -> np.ndarray:
    """Column t of the result is ``F[:, t+1] - F[:, t]``."""
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[1] < 1:
        raise ValueError(f"temporal_difference needs a C x T matrix with T >= 1, got {F.shape}")
    if F.shape[1] == 1:
        raise ValueError("temporal_difference needs T >= 2; single frames are matched raw")
    return F[:, 1:] - F[:, :-1]


def retrieval_key(F: np.ndarray, M: int, use_diff: bool) -> np.ndarray:
    ctx = np.asarray(F, dtype=np.float64)[:, :M]
    if ctx.shape[1] < M:
        raise ValueError(f"feature sequence shorter than context length {M}")
    if use_diff and M >= 2:
        ctx = temporal_difference(ctx)
    return ctx.reshape(-1)


def build_index(sequences, model, M: int, use_diff: bool = True) -> FeatureIndex:
    if not sequences:
        raise ValueError("cannot build an index over an empty dataset")
    feats = [extract_features(model, s) for s in sequences]
    return FeatureIndex(np.array([f.source_id for f in feats]),
                        np.stack([f.features for f in feats]), M, use_diff)


def index_from_features(feats: list[MotionFeatureSeq], M: int, use_diff: bool = True) -> FeatureIndex:
    if not feats:
        raise ValueError("cannot build an index over an empty dataset")
    return FeatureIndex(np.array([f.source_id for f in feats]),
                        np.stack([f.features for f in feats]), M, use_diff)


def _query_key(query, index: FeatureIndex) -> np.ndarray:
    F = query.features if isinstance(query, MotionFeatureSeq) else np.asarray(query)
    return retrieval_key(F, index.M, index.use_diff)


def distances(query, index: FeatureIndex) -> np.ndarray:
    q = _query_key(query, index)
    if q.shape[0] != index.keys.shape[1]:
        raise ValueError(f"query key size {q.shape[0]} != index key size {index.keys.shape[1]}")
    d = index.keys - q
    return np.einsum("ij,ij->i", d, d)


def _pool_size(index: FeatureIndex, exclude_id) -> int:
    n = len(index)
    if exclude_id is not None and int(exclude_id) in index._row:
        n -= 1
    return n


def retrieve(query, index: FeatureIndex, K: int, exclude_id=None) -> ExampleSet:
    """K nearest entries by squared distance on (differenced) context features.

    Ties break on ascending sequence id.  Selection is an O(n) partition
    followed by sorting only the candidates.
    """
    if K < 1 or K >= len(index):
        raise ValueError(f"K={K} must satisfy 1 <= K < index size {len(index)}")
    d = distances(query, index)
    ids = index.ids
    if exclude_id is not None:
        d = np.where(ids == int(exclude_id), np.inf, d)
    if K > _pool_size(index, exclude_id):
        raise ValueError(f"K={K} exceeds the retrievable pool")
    kth = np.partition(d, K - 1)[K - 1]
    cand = np.flatnonzero(d <= kth)
    order = cand[np.lexsort((ids[cand], d[cand]))][:K]
    return ExampleSet([int(i) for i in ids[order]], index.full[order], d[order])


def retrieve_random(index: FeatureIndex, K: int, seed: int, exclude_id=None, query=None) -> ExampleSet:
    """Uniform K-subset of the pool without replacement (ablation of retrieval)."""
    if K < 1 or K >= len(index):
        raise ValueError(f"K={K} must satisfy 1 <= K < index size {len(index)}")
    if K > _pool_size(index, exclude_id):
        raise ValueError(f"K={K} exceeds the retrievable pool")
    rows = np.arange(len(index))
    if exclude_id is not None:
        rows = rows[index.ids != int(exclude_id)]
    key = -1 if exclude_id is None else int(exclude_id)
    rng = np.random.default_rng([int(seed), key + 1, 21])
    pick = rng.choice(rows, size=K, replace=False)
    if query is not None:
        d = distances(query, index)[pick]
        order = np.lexsort((index.ids[pick], d))
        pick, d = pick[order], d[order]
    else:
        pick = np.sort(pick)
        d = np.full(K, np.nan)
    return ExampleSet([int(i) for i in index.ids[pick]], index.full[pick], d)


def retrieve_all(queries: np.ndarray, query_ids, index: FeatureIndex, K: int,
                 exclude_self: bool = True, random_seed: int | None = None) -> np.ndarray:
    """Example features (n, K, C_f, T) for each query row; random subsets if ``random_seed`` is set."""
    out = []
    for F, qid in zip(queries, query_ids):
        ex = qid if exclude_self else None
        if random_seed is None:
            es = retrieve(F, index, K, exclude_id=ex)
        else:
            es = retrieve_random(index, K, random_seed, exclude_id=ex if ex is not None else qid)
        out.append(es.features)
    return np.stack(out)


def example_set_json(query_id: int, es: ExampleSet) -> dict:
    return {"query_id": int(query_id), "omega": list(es.omega),
            "distances": [float(x) for x in es.distances]}


# ---------------------------------------------------------------- file format

def save_index(index: FeatureIndex, path, meta: dict | None = None) -> None:
    doc = dict(meta or {})
    doc.update(M=index.M, use_diff=index.use_diff, ids=index.ids.tolist(),
               dims=list(index.full.shape[1:]), full=index.full.reshape(len(index), -1).tolist())
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_index(path) -> tuple[FeatureIndex, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing artifact: {path}")
    doc = json.loads(path.read_text())
    full = np.asarray(doc.pop("full"), dtype=np.float64).reshape([len(doc["ids"])] + doc["dims"])
    index = FeatureIndex(np.asarray(doc["ids"]), full, doc["M"], doc["use_diff"])
    return index, doc
