"""Full-ranking top-K evaluation: Recall@K and MAP@K."""

import math
from dataclasses import dataclass, field

import numpy as np

from .container import dumps_json
from .errors import DataError

DEFAULT_KS = (20, 40, 60, 80, 100)


@dataclass
class EvalReport:
    ks: list
    recall_at: dict
    map_at: dict
    n_users_evaluated: int
    per_user: list = field(default_factory=list, repr=False)

    def to_dict(self):
        return {
            "ks": list(self.ks),
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "map_at": {str(k): v for k, v in self.map_at.items()},
            "n_users_evaluated": self.n_users_evaluated,
        }

    def to_json(self):
        return dumps_json(self.to_dict())

    def to_table(self):
        lines = [f"{'K':>6}  {'Recall@K':>10}  {'MAP@K':>10}"]
        for k in self.ks:
            lines.append(f"{k:>6}  {self.recall_at[k]:>10.6f}  {self.map_at[k]:>10.6f}")
        lines.append(f"users evaluated: {self.n_users_evaluated}")
        return "\n".join(lines)


def rank_items(scores, train_items=()):
    """Eligible item indices by descending score, ties by ascending index."""
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.ones(len(scores), dtype=bool)
    mask[list(train_items)] = False
    eligible = np.flatnonzero(mask)
    order = np.lexsort((eligible, -scores[eligible]))
    return eligible[order]


def rank_items_for_user(v_user_row, v_item, train_items=()):
    return rank_items(np.asarray(v_item) @ np.asarray(v_user_row), train_items)


def _hits(ranked, relevant, k):
    top = np.asarray(ranked[:k])
    return np.isin(top, np.fromiter(relevant, dtype=np.int64, count=len(relevant)))


def recall_at_k(ranked, relevant, k):
    if not relevant:
        raise ValueError("relevant set is empty")
    return int(_hits(ranked, relevant, k).sum()) / len(relevant)


def map_at_k(ranked, relevant, k):
    """Average precision at K normalized by ``min(K, |relevant|)``."""
    if not relevant:
        raise ValueError("relevant set is empty")
    hits = _hits(ranked, relevant, k)
    pos = np.flatnonzero(hits)
    precisions = [(n + 1) / (p + 1) for n, p in enumerate(pos.tolist())]
    return math.fsum(precisions) / min(k, len(relevant))


def evaluate_embeddings(v_user, v_item, train_edges, test_edges, ks=DEFAULT_KS, keep_per_user=False):
    """Macro-averaged metrics over users with at least one test edge."""
    ks = sorted(int(k) for k in ks)
    if not ks or ks[0] < 1:
        raise ValueError("ks must be positive integers")
    n_users = v_user.shape[0]
    train_by_user = [[] for _ in range(n_users)]
    test_by_user = [set() for _ in range(n_users)]
    for u, i in np.asarray(train_edges).reshape(-1, 2).tolist():
        train_by_user[u].append(i)
    for u, i in np.asarray(test_edges).reshape(-1, 2).tolist():
        test_by_user[u].add(i)
    scores = v_user @ v_item.T
    recalls = {k: [] for k in ks}
    maps = {k: [] for k in ks}
    per_user = []
    for u in range(n_users):
        rel = test_by_user[u]
        if not rel:
            continue
        ranked = rank_items(scores[u], train_by_user[u])
        row = {"user": u}
        for k in ks:
            r, a = recall_at_k(ranked, rel, k), map_at_k(ranked, rel, k)
            recalls[k].append(r)
            maps[k].append(a)
            row[f"recall@{k}"] = r
            row[f"map@{k}"] = a
        if keep_per_user:
            per_user.append(row)
    n_eval = len(recalls[ks[0]])
    if n_eval == 0:
        raise DataError("no users with test edges to evaluate")
    return EvalReport(
        ks=ks,
        recall_at={k: math.fsum(recalls[k]) / n_eval for k in ks},
        map_at={k: math.fsum(maps[k]) / n_eval for k in ks},
        n_users_evaluated=n_eval,
        per_user=per_user,
    )


def evaluate(embeddings, bundle, ks=DEFAULT_KS, keep_per_user=False):
    """Evaluate target-domain embeddings against a bundle's held-out edges."""
    return evaluate_embeddings(
        embeddings.v_user, embeddings.v_item, bundle.target_train, bundle.target_test, ks, keep_per_user
    )
