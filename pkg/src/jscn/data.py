"""Rating ingestion, implicit conversion, filtering, splitting, alignment,
synthetic multi-domain generation, and bundle persistence."""

import csv
import json
import math
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .container import dumps_json
from .errors import DataError
from .graph import BipartiteDomain
from .training import SharedUserIndex


class Rating(NamedTuple):
    user_id: str
    item_id: str
    rating: float
    timestamp: int


def load_ratings(path):
    """Read a headerless ``user,item,rating,timestamp`` CSV."""
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 4:
                raise DataError(f"{path}: line {lineno}: expected 4 fields, got {len(row)}")
            user, item, rating, ts = (x.strip() for x in row)
            if not user or not item:
                raise DataError(f"{path}: line {lineno}: empty user or item id")
            try:
                value = float(rating)
                stamp = int(float(ts))
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            if not 1.0 <= value <= 5.0:
                raise DataError(f"{path}: line {lineno}: rating {value} outside [1, 5]")
            records.append(Rating(user, item, value, stamp))
    return records


def write_edges_csv(path, pairs):
    """Write ``(user, item)`` pairs in the 4-column rating format."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for u, i in pairs:
            w.writerow([u, i, "1.0", "0"])


def to_implicit(records):
    """Every rated (user, item) pair becomes one edge, whatever the value."""
    return sorted({(r.user_id, r.item_id) for r in records})


def filter_min_interactions(edges, min_degree=5):
    """Drop users with fewer than ``min_degree`` edges until stable.

    Items are only dropped once they have no edges left.
    """
    if min_degree < 1:
        raise ValueError("min_degree must be >= 1")
    current = sorted(set(edges))
    while True:
        deg = defaultdict(int)
        for u, _ in current:
            deg[u] += 1
        kept = [(u, i) for u, i in current if deg[u] >= min_degree]
        if len(kept) == len(current):
            break
        current = kept
    if not current:
        raise DataError("dataset eliminated by filtering")
    return current


def edge_stats(pairs):
    users = {u for u, _ in pairs}
    items = {i for _, i in pairs}
    n_u, n_i, n_e = len(users), len(items), len(set(pairs))
    return {
        "n_users": n_u,
        "n_items": n_i,
        "n_edges": n_e,
        "sparsity": 1.0 - n_e / (n_u * n_i) if n_u and n_i else 1.0,
    }


def _n_test(degree, fraction):
    return min(degree - 1, max(1, int(math.floor(fraction * degree + 0.5))))


def split_train_test(edges, test_fraction=0.2, seed=0, keep_items_in_train=True):
    """Per-user random split of ``(user, item)`` pairs.

    Each user with ``d`` edges sends ``round(fraction * d)`` of them (at
    least 1, at most ``d - 1``) to test. With ``keep_items_in_train`` the
    split is then repaired by swapping a user's test edge with one of the
    same user's train edges so that every item keeps a training edge; the
    per-user counts do not change.
    """
    if not test_fraction > 0:
        raise DataError("test set would be empty for user: test_fraction must be > 0")
    if test_fraction >= 1:
        raise DataError("test_fraction must be < 1")
    rng = np.random.default_rng(seed)
    by_user = defaultdict(list)
    for u, i in sorted(set(edges)):
        by_user[u].append(i)
    train, test = {}, {}
    for u in sorted(by_user):
        items = by_user[u]
        if len(items) < 2:
            raise DataError(f"user {u!r} has a single edge and cannot be split")
        k = _n_test(len(items), test_fraction)
        perm = rng.permutation(len(items))
        test[u] = sorted(items[j] for j in perm[:k])
        train[u] = sorted(items[j] for j in perm[k:])
    if keep_items_in_train:
        _repair_item_coverage(train, test)
    train_pairs = sorted((u, i) for u in train for i in train[u])
    test_pairs = sorted((u, i) for u in test for i in test[u])
    return train_pairs, test_pairs


def _repair_item_coverage(train, test):
    item_train = defaultdict(int)
    for u in train:
        for i in train[u]:
            item_train[i] += 1
    orphans = sorted({i for u in test for i in test[u] if item_train[i] == 0})
    for item in orphans:
        if item_train[item] > 0:
            continue
        done = False
        for u in sorted(test):
            if item not in test[u]:
                continue
            for j in train[u]:
                if item_train[j] >= 2:
                    train[u].remove(j)
                    test[u].remove(item)
                    train[u].append(item)
                    test[u].append(j)
                    train[u].sort()
                    test[u].sort()
                    item_train[j] -= 1
                    item_train[item] += 1
                    done = True
                    break
            if done:
                break
        if not done:
            raise DataError(f"item {item!r} only has test edges and no swap can fix it")


def align_shared_users(domains):
    """Match users by identifier across every ordered domain pair."""
    index = [{u: k for k, u in enumerate(d.users)} for d in domains]
    pairs = {}
    for m, dm in enumerate(domains):
        for n in range(len(domains)):
            if n == m:
                continue
            rows = [(k, index[n][u]) for k, u in enumerate(dm.users) if u in index[n]]
            pairs[(m, n)] = np.array(rows, dtype=np.int64).reshape(-1, 2)
    return SharedUserIndex(pairs)


# ------------------------------------------------------------------ bundle


@dataclass
class DatasetBundle:
    """Target domain with a train/test split plus source domains.

    ``target`` holds all target edges; ``target_train`` / ``target_test``
    partition them as ``(user_index, item_index)`` arrays against
    ``target``'s index. ``shared`` is indexed over ``[target, *sources]``
    with training graphs' user order (identical to the full target's).
    """

    target: BipartiteDomain
    target_train: np.ndarray
    target_test: np.ndarray
    sources: list
    shared: SharedUserIndex
    provenance: str = ""

    def train_domain(self):
        return BipartiteDomain(self.target.users, self.target.items, self.target_train, self.target.category)

    def domains(self):
        """Training graphs, target first."""
        return [self.train_domain(), *self.sources]

    def check(self):
        tr = {tuple(e) for e in self.target_train.tolist()}
        te = {tuple(e) for e in self.target_test.tolist()}
        if tr & te:
            raise DataError("train and test overlap")
        if tr | te != {tuple(e) for e in self.target.edges.tolist()}:
            raise DataError("train and test do not cover the target edges")
        nu = self.target.n_users
        if set(range(nu)) - {u for u, _ in tr}:
            raise DataError("a target user has no train edge")
        if set(range(nu)) - {u for u, _ in te}:
            raise DataError("a target user has no test edge")
        doms = self.domains()
        for (m, n), rows in self.shared.pairs.items():
            for a, b in rows.tolist():
                if doms[m].users[a] != doms[n].users[b]:
                    raise DataError(f"shared index mismatch between domains {m} and {n}")


def make_bundle(target_pairs, source_pairs, test_fraction=0.2, seed=0, min_degree=5, provenance="",
                categories=None):
    """Filter, split, and align raw edge lists into a bundle."""
    categories = categories or ["target"] + [f"source_{k}" for k in range(len(source_pairs))]
    tgt = filter_min_interactions(target_pairs, min_degree)
    train, test = split_train_test(tgt, test_fraction, seed)
    target = BipartiteDomain.from_pairs(tgt, categories[0])
    uidx = {u: k for k, u in enumerate(target.users)}
    iidx = {i: k for k, i in enumerate(target.items)}
    to_idx = lambda ps: np.array([(uidx[u], iidx[i]) for u, i in ps], dtype=np.int64).reshape(-1, 2)
    sources = [
        BipartiteDomain.from_pairs(filter_min_interactions(ps, min_degree), categories[k + 1])
        for k, ps in enumerate(source_pairs)
    ]
    bundle = DatasetBundle(target, to_idx(train), to_idx(test), sources, None, provenance)
    bundle.shared = align_shared_users(bundle.domains())
    bundle.check()
    return bundle


def _shared_json(bundle):
    doms = bundle.domains()
    names = ["target"] + [f"source_{k}" for k in range(len(bundle.sources))]
    out = {}
    for (m, n), rows in sorted(bundle.shared.pairs.items()):
        if m < n:
            out[f"{names[m]}|{names[n]}"] = [doms[m].users[a] for a, _ in rows.tolist()]
    return out


def save_bundle(bundle, directory):
    os.makedirs(directory, exist_ok=True)
    t = bundle.target
    write_edges_csv(os.path.join(directory, "target_train.csv"),
                    [(t.users[u], t.items[i]) for u, i in bundle.target_train.tolist()])
    write_edges_csv(os.path.join(directory, "target_test.csv"),
                    [(t.users[u], t.items[i]) for u, i in bundle.target_test.tolist()])
    for k, src in enumerate(bundle.sources):
        write_edges_csv(os.path.join(directory, f"source_{k}.csv"), src.pairs())
    with open(os.path.join(directory, "shared.json"), "w", encoding="utf-8") as fh:
        fh.write(dumps_json(_shared_json(bundle)) + "\n")
    categories = [t.category] + [s.category for s in bundle.sources]
    with open(os.path.join(directory, "provenance.json"), "w", encoding="utf-8") as fh:
        fh.write(dumps_json({"categories": categories, "provenance": bundle.provenance}) + "\n")


def load_bundle(directory):
    def pairs(name):
        return to_implicit(load_ratings(os.path.join(directory, name)))

    with open(os.path.join(directory, "provenance.json"), encoding="utf-8") as fh:
        prov = json.load(fh)
    train, test = pairs("target_train.csv"), pairs("target_test.csv")
    categories = prov.get("categories") or []
    target = BipartiteDomain.from_pairs(train + test, categories[0] if categories else "target")
    uidx = {u: k for k, u in enumerate(target.users)}
    iidx = {i: k for k, i in enumerate(target.items)}
    to_idx = lambda ps: np.array([(uidx[u], iidx[i]) for u, i in ps], dtype=np.int64).reshape(-1, 2)
    sources = []
    k = 0
    while os.path.exists(os.path.join(directory, f"source_{k}.csv")):
        cat = categories[k + 1] if len(categories) > k + 1 else f"source_{k}"
        sources.append(BipartiteDomain.from_pairs(pairs(f"source_{k}.csv"), cat))
        k += 1
    bundle = DatasetBundle(target, to_idx(train), to_idx(test), sources, None, prov.get("provenance", ""))
    bundle.shared = align_shared_users(bundle.domains())
    bundle.check()
    return bundle


def bundle_stats(bundle):
    names = ["target"] + [f"source_{k}" for k in range(len(bundle.sources))]
    full = [bundle.target] + list(bundle.sources)
    out = {name: edge_stats(d.pairs()) for name, d in zip(names, full)}
    out["shared_counts"] = {
        f"{names[m]}|{names[n]}": len(rows) for m, n, rows in bundle.shared.unordered()
    }
    return out


# --------------------------------------------------------------- synthetic


@dataclass
class SyntheticSpec:
    """Knobs for the planted multi-domain generator.

    Domain 0 is the target. Each source draws a ``shared_fraction`` of its
    users from the target's users (independently per source), and a shared
    user carries the same latent vector in every domain it appears in.
    Each domain sees users through its own random linear view
    (``domain_shift`` blends identity with a random orthogonal matrix), so
    domains are related but not interchangeable. ``target_density`` scales
    the target's edge rate relative to the sources.
    """

    n_domains: int = 2
    users_per_domain: int = 300
    items_per_domain: int = 200
    shared_fraction: float = 0.3
    latent_rank: int = 8
    edge_probability_scale: float = 3.0
    edge_bias: float = -4.0
    target_density: float = 0.4
    domain_shift: float = 0.0
    test_fraction: float = 0.2
    min_degree: int = 5
    categories: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise DataError(f"unknown synthetic spec fields: {sorted(extra)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def _domain_view(rng, rank, shift):
    q, r = np.linalg.qr(rng.normal(size=(rank, rank)))
    q = q * np.sign(np.diag(r))
    view = (1.0 - shift) * np.eye(rank) + shift * q
    # keep the view's scale comparable to identity
    return view / np.linalg.norm(view, 2) if shift else view


def generate_synthetic(spec, seed):
    if spec.n_domains < 1:
        raise DataError("n_domains must be >= 1")
    rng = np.random.default_rng(seed)
    n_u, n_i, r = spec.users_per_domain, spec.items_per_domain, spec.latent_rank
    n_shared = int(round(spec.shared_fraction * n_u))
    target_ids = [f"t{k:05d}" for k in range(n_u)]
    target_lat = rng.normal(size=(n_u, r)) / math.sqrt(r)
    all_pairs = []
    for d in range(spec.n_domains):
        if d == 0:
            ids, lat = target_ids, target_lat
        else:
            # each source overlaps the target in its own random user subset
            common = np.sort(rng.choice(n_u, size=n_shared, replace=False))
            ids = [target_ids[k] for k in common] + [f"d{d}u{k:05d}" for k in range(n_u - n_shared)]
            lat = np.vstack([target_lat[common], rng.normal(size=(n_u - n_shared, r)) / math.sqrt(r)])
        view = _domain_view(rng, r, spec.domain_shift)
        items = rng.normal(size=(n_i, r))
        logits = spec.edge_probability_scale * (lat @ view) @ items.T + spec.edge_bias
        if d == 0 and spec.target_density != 1.0:
            logits += math.log(spec.target_density)
        prob = 1.0 / (1.0 + np.exp(-logits))
        hit = rng.random(prob.shape) < prob
        all_pairs.append([(ids[u], f"d{d}i{j:05d}") for u, j in np.argwhere(hit)])
    cats = spec.categories or ["target"] + [f"source_{k}" for k in range(spec.n_domains - 1)]
    try:
        return make_bundle(
            all_pairs[0], all_pairs[1:], spec.test_fraction, seed, spec.min_degree,
            provenance=dumps_json({"generator": "synthetic", "seed": seed, "spec": spec.to_dict()}),
            categories=cats,
        )
    except DataError as exc:
        raise DataError(f"{exc}; try a larger edge_probability_scale or edge_bias") from exc
