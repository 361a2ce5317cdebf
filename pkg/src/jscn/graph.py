"""Bipartite user-item graphs, their laplacians, and spectra."""

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import linalg
from .container import SPECTRUM_MAGIC, read_container, write_container
from .errors import GraphError

DEFAULT_MAX_NODES = 20_000
PROPAGATOR_RTOL = 1e-12


@dataclass(frozen=True)
class BipartiteDomain:
    """One interaction graph: users, items, and the edges between them.

    ``edges`` is an ``(E, 2)`` int array of ``(user_index, item_index)``
    rows, sorted and unique. Every user and item must touch an edge.
    """

    users: tuple
    items: tuple
    edges: np.ndarray
    category: str = ""

    def __post_init__(self):
        users = tuple(str(u) for u in self.users)
        items = tuple(str(i) for i in self.items)
        if not users or not items:
            raise GraphError("a domain needs at least one user and one item")
        if len(set(users)) != len(users) or len(set(items)) != len(items):
            raise GraphError("user and item identifiers must be unique")
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges[:, 0].max() >= len(users) or edges[:, 1].max() >= len(items)):
            raise GraphError("edge index out of range")
        uniq = np.unique(edges, axis=0)
        if len(uniq) != len(edges):
            raise GraphError("duplicate edges")
        user_deg = np.bincount(uniq[:, 0], minlength=len(users))
        item_deg = np.bincount(uniq[:, 1], minlength=len(items))
        if (user_deg == 0).any():
            raise GraphError(f"isolated vertex: user {users[int(np.argmin(user_deg))]!r} has no edges")
        if (item_deg == 0).any():
            raise GraphError(f"isolated vertex: item {items[int(np.argmin(item_deg))]!r} has no edges")
        uniq.setflags(write=False)
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "edges", uniq)

    @classmethod
    def from_pairs(cls, pairs, category=""):
        """Build from ``(user_id, item_id)`` string pairs; ids are sorted."""
        pairs = list(pairs)
        users = sorted({u for u, _ in pairs})
        items = sorted({i for _, i in pairs})
        uidx = {u: k for k, u in enumerate(users)}
        iidx = {i: k for k, i in enumerate(items)}
        edges = sorted({(uidx[u], iidx[i]) for u, i in pairs})
        return cls(users, items, np.array(edges, dtype=np.int64).reshape(-1, 2), category)

    @property
    def n_users(self):
        return len(self.users)

    @property
    def n_items(self):
        return len(self.items)

    @property
    def n_nodes(self):
        return len(self.users) + len(self.items)

    def pairs(self):
        return [(self.users[u], self.items[i]) for u, i in self.edges]


@dataclass(frozen=True)
class Laplacian:
    a: np.ndarray
    degree: np.ndarray
    l_sym: np.ndarray


@dataclass(frozen=True)
class DomainSpectrum:
    eigenvectors: np.ndarray
    eigenvalues: np.ndarray
    filter: np.ndarray
    _ops: list = field(default_factory=list, init=False, repr=False, compare=False)

    @property
    def n_nodes(self):
        return self.filter.shape[0]

    def propagator(self):
        """``(P, P^T)`` as sparse matrices, cached.

        The filter equals ``I + l_sym`` and so has the graph's sparsity
        pattern; entries below ``PROPAGATOR_RTOL`` times the largest
        magnitude are eigensolver round-off and are dropped.
        """
        if not self._ops:
            f = np.asarray(self.filter)
            kept = np.where(np.abs(f) > PROPAGATOR_RTOL * np.abs(f).max(), f, 0.0)
            op = sparse.csr_matrix(kept)
            self._ops.extend([op, op.T.tocsr()])
        return self._ops[0], self._ops[1]


def build_feedback_matrix(domain):
    r = np.zeros((domain.n_users, domain.n_items))
    r[domain.edges[:, 0], domain.edges[:, 1]] = 1.0
    return r


def build_laplacian(fm):
    """Adjacency ``[[0, R], [R^T, 0]]`` and ``I - D^-1/2 A D^-1/2``."""
    r = np.asarray(fm, dtype=np.float64)
    n_users, n_items = r.shape
    n = n_users + n_items
    a = np.zeros((n, n))
    a[:n_users, n_users:] = r
    a[n_users:, :n_users] = r.T
    degree = a.sum(axis=1)
    zero = np.flatnonzero(degree == 0)
    if zero.size:
        k = int(zero[0])
        name = f"user {k}" if k < n_users else f"item {k - n_users}"
        raise GraphError(f"isolated vertex: {name} has degree 0")
    inv_sqrt = 1.0 / np.sqrt(degree)
    l_sym = np.eye(n) - inv_sqrt[:, None] * a * inv_sqrt[None, :]
    # exact symmetry; the products above already agree bit-for-bit but be safe
    l_sym = 0.5 * (l_sym + l_sym.T)
    return Laplacian(a=a, degree=degree, l_sym=l_sym)


def spectral_filter(eigenvectors, eigenvalues):
    """``U U^T + U diag(lam) U^T``."""
    u = eigenvectors
    return u @ u.T + (u * eigenvalues) @ u.T


def eigendecompose(lap, max_nodes=DEFAULT_MAX_NODES):
    n = lap.l_sym.shape[0]
    if n > max_nodes:
        raise GraphError(f"graph too large for dense spectrum: {n} nodes > cap {max_nodes}")
    vals, vecs = linalg.eigh(lap.l_sym)
    filt = spectral_filter(vecs, vals)
    return DomainSpectrum(eigenvectors=vecs, eigenvalues=vals, filter=filt)


def domain_spectrum(domain, max_nodes=DEFAULT_MAX_NODES):
    """Convenience: domain -> feedback -> laplacian -> spectrum."""
    return eigendecompose(build_laplacian(build_feedback_matrix(domain)), max_nodes=max_nodes)


def save_spectrum(path, spectrum, meta=None):
    write_container(
        path,
        SPECTRUM_MAGIC,
        {
            "eigenvalues": spectrum.eigenvalues,
            "eigenvectors": spectrum.eigenvectors,
            "filter": spectrum.filter,
        },
        meta,
    )


def load_spectrum(path):
    tensors, meta = read_container(path, SPECTRUM_MAGIC)
    spec = DomainSpectrum(
        eigenvectors=tensors["eigenvectors"],
        eigenvalues=tensors["eigenvalues"],
        filter=tensors["filter"],
    )
    return spec, meta
