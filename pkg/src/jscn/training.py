"""Losses, exact gradients, RMSprop, and the joint training loop.

Domain 0 is always the target; domains 1..M are sources. Gradients are
hand-derived reverse-mode passes through the spectral layers, the user
mapping, the BPR term, the cross-domain term, and the regularizer.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import NumericalError
from .model import forward, init_parameters

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    reg_epsilon: float = 0.001
    cross_weight: float = 1.0
    epochs: int = 200
    batch_size: int = 1024
    rmsprop_decay: float = 0.9
    rmsprop_eps: float = 1e-8
    seed: int = 0
    squared_cross: bool = True
    reg_items: bool = False
    frozen: tuple = ()

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.rmsprop_decay < 1:
            raise ValueError("rmsprop_decay must be in [0, 1)")
        if self.cross_weight < 0:
            raise ValueError("cross_weight must be non-negative")
        if self.reg_epsilon < 0:
            raise ValueError("reg_epsilon must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        self.frozen = tuple(self.frozen)


@dataclass
class TripleBatch:
    triples: np.ndarray  # (B, 3) rows of (user, positive item, negative item)
    domain_id: int = 0

    def __len__(self):
        return len(self.triples)


@dataclass
class SharedUserIndex:
    """Row correspondences of users present in two domains.

    ``pairs[(m, n)]`` is an ``(P, 2)`` array of ``(row_in_m, row_in_n)``;
    both orientations are stored.
    """

    pairs: dict = field(default_factory=dict)

    def unordered(self):
        for (m, n), rows in sorted(self.pairs.items()):
            if m < n:
                yield m, n, rows

    def count(self, m, n):
        rows = self.pairs.get((m, n))
        return 0 if rows is None else len(rows)

    def subset(self, keep):
        """Restrict to the domains in ``keep`` and renumber them 0..len-1."""
        pos = {d: k for k, d in enumerate(keep)}
        return SharedUserIndex(
            {(pos[m], pos[n]): rows for (m, n), rows in self.pairs.items() if m in pos and n in pos}
        )


@dataclass
class LossBreakdown:
    in_domain: list
    cross: float
    reg: float
    total: float


# ---------------------------------------------------------------- sampling


def user_item_sets(train_edges, n_users):
    items = [set() for _ in range(n_users)]
    for u, i in np.asarray(train_edges).reshape(-1, 2):
        items[int(u)].add(int(i))
    return items


def sample_triples(train_edges, n_items, batch_size, rng, domain_id=0):
    """Uniform observed edge, then a uniformly drawn unobserved item.

    Negatives are rejection-sampled against the training edges only.
    """
    edges = np.asarray(train_edges, dtype=np.int64).reshape(-1, 2)
    n_users = int(edges[:, 0].max()) + 1
    observed = np.zeros((n_users, n_items), dtype=bool)
    observed[edges[:, 0], edges[:, 1]] = True
    full = np.flatnonzero(observed.sum(axis=1) >= n_items)
    if full.size:
        raise ValueError(f"no negative items for user {int(full[0])}")
    pick = rng.integers(len(edges), size=batch_size)
    users = edges[pick, 0]
    pos = edges[pick, 1]
    neg = rng.integers(n_items, size=batch_size)
    bad = np.flatnonzero(observed[users, neg])
    while bad.size:
        neg[bad] = rng.integers(n_items, size=bad.size)
        bad = bad[observed[users[bad], neg[bad]]]
    return TripleBatch(np.stack([users, pos, neg], axis=1), domain_id)


# ------------------------------------------------------------------ losses


def _log1p_exp(x):
    """ln(1 + e^x), stable."""
    return np.logaddexp(0.0, x)


def _score_gaps(emb, batch):
    t = batch.triples
    vu = emb.v_user[t[:, 0]]
    return np.einsum("bd,bd->b", vu, emb.v_item[t[:, 1]] - emb.v_item[t[:, 2]])


def in_domain_loss(emb, batch):
    """Summed BPR loss ``-ln sigmoid(gap)`` over the batch."""
    if len(batch) == 0:
        return 0.0
    return _bpr_from_gaps(_score_gaps(emb, batch))


def _bpr_from_gaps(gaps):
    return float(np.sum(_log1p_exp(-gaps)))


def scatter_add(out, index, values):
    """``out[index] += values`` with repeated indices accumulated.

    Same result as ``np.add.at``, done as a sparse one-hot product, which
    is several times faster for wide rows.
    """
    if len(index) == 0:
        return
    n = len(index)
    onehot = sparse.csr_matrix((np.ones(n), (index, np.arange(n))), shape=(out.shape[0], n))
    out += onehot @ values


def cross_domain_loss(embs, shared, squared=True):
    total = 0.0
    for m, n, rows in shared.unordered():
        if len(rows) == 0:
            continue
        diff = embs[m].u_invariant[rows[:, 0]] - embs[n].u_invariant[rows[:, 1]]
        sq = np.sum(diff * diff, axis=1)
        total += float(np.sum(sq if squared else np.sqrt(sq)))
    return total


def regularization(embs, epsilon, include_items=False):
    total = 0.0
    for emb in embs:
        total += float(np.sum(emb.v_user * emb.v_user))
        if include_items:
            total += float(np.sum(emb.v_item * emb.v_item))
    return epsilon * total


def combine_losses(in_domain, cross, reg, cross_weight=1.0):
    return float(sum(in_domain)) + cross_weight * cross + reg


def total_loss(embs, batches, shared, cfg):
    return loss_breakdown(embs, batches, shared, cfg).total


def loss_breakdown(embs, batches, shared, cfg, gaps=None):
    if gaps is None:
        ind = [in_domain_loss(e, b) for e, b in zip(embs, batches)]
    else:
        ind = [_bpr_from_gaps(g) if g is not None else 0.0 for g in gaps]
    cross = cross_domain_loss(embs, shared, cfg.squared_cross) if cfg.cross_weight else 0.0
    reg = regularization(embs, cfg.reg_epsilon, cfg.reg_items)
    return LossBreakdown(ind, cross, reg, combine_losses(ind, cross, reg, cfg.cross_weight))


# --------------------------------------------------------------- gradients


def _backward_domain(params, spectrum, hp, emb, trace, d_user, d_item, d_inv):
    """Backpropagate embedding gradients into one domain's parameters."""
    grads = {}
    m = params.mapping
    v_user = emb.v_user
    d_user = d_user.copy()
    if hp.mapping_kind == "linear":
        grads["w_b"] = v_user.T @ d_inv
        d_user += d_inv @ m["w_b"].T
    else:
        h = trace.mlp_hidden
        grads["w2"] = h.T @ d_inv
        grads["b2"] = d_inv.sum(axis=0)
        d_pre = (d_inv @ m["w2"].T) * (1.0 - h * h)
        grads["w1"] = v_user.T @ d_pre
        grads["b1"] = d_pre.sum(axis=0)
        d_user += d_pre @ m["w1"].T

    d_v = np.vstack([d_user, d_item])
    layers = trace.layers
    k_layers = len(params.theta)
    if hp.concat_mode == "all":
        widths = np.cumsum([0] + [lay.shape[1] for lay in layers])
        d_layers = [d_v[:, widths[k]:widths[k + 1]] for k in range(k_layers + 1)]
    else:
        d_layers = [np.zeros_like(lay) for lay in layers[:-1]] + [d_v]
    filt_t = spectrum.propagator()[1]
    d_h = d_layers[k_layers]
    for k in range(k_layers, 0, -1):
        out = layers[k]
        d_z = d_h * out * (1.0 - out)
        theta = params.theta[k - 1]
        grads[f"theta{k - 1}"] = trace.propagated[k - 1].T @ d_z
        d_h = d_layers[k - 1] + filt_t @ (d_z @ theta.T)
    grads["x0"] = d_h
    return grads


def loss_and_gradients(params_list, spectra, batches, shared, hp, cfg):
    """Total loss breakdown plus per-domain gradient dicts.

    Gradient dicts are keyed like ``DomainParameters.tensors()``.
    """
    results = [forward(p, s, hp, trace=True) for p, s in zip(params_list, spectra)]
    embs = [r[0] for r in results]
    gaps = [_score_gaps(e, b) if len(b) else None for e, b in zip(embs, batches)]
    breakdown = loss_breakdown(embs, batches, shared, cfg, gaps)

    d_users = [2.0 * cfg.reg_epsilon * e.v_user for e in embs]
    d_items = [2.0 * cfg.reg_epsilon * e.v_item if cfg.reg_items else np.zeros_like(e.v_item) for e in embs]
    d_invs = [np.zeros_like(e.u_invariant) for e in embs]

    for k, (emb, batch) in enumerate(zip(embs, batches)):
        if len(batch) == 0:
            continue
        t = batch.triples
        # d/dgap of -ln sigmoid(gap) = -sigmoid(-gap)
        coef = -np.exp(-_log1p_exp(gaps[k]))[:, None]
        vu = emb.v_user[t[:, 0]]
        scatter_add(d_users[k], t[:, 0], coef * (emb.v_item[t[:, 1]] - emb.v_item[t[:, 2]]))
        cu = coef * vu
        scatter_add(d_items[k], np.concatenate([t[:, 1], t[:, 2]]), np.vstack([cu, -cu]))

    if cfg.cross_weight:
        for m, n, rows in shared.unordered():
            if len(rows) == 0:
                continue
            diff = embs[m].u_invariant[rows[:, 0]] - embs[n].u_invariant[rows[:, 1]]
            if cfg.squared_cross:
                g = 2.0 * diff
            else:
                norm = np.sqrt(np.sum(diff * diff, axis=1, keepdims=True))
                g = np.divide(diff, norm, out=np.zeros_like(diff), where=norm > 0)
            g *= cfg.cross_weight
            scatter_add(d_invs[m], rows[:, 0], g)
            scatter_add(d_invs[n], rows[:, 1], -g)

    grads = []
    for k, (p, s) in enumerate(zip(params_list, spectra)):
        g = _backward_domain(p, s, hp, embs[k], results[k][1], d_users[k], d_items[k], d_invs[k])
        for name, arr in g.items():
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite gradient in domain {k} tensor {name!r}")
        grads.append(g)
    return breakdown, grads


def compute_gradients(params_list, spectra, batches, shared, hp, cfg):
    return loss_and_gradients(params_list, spectra, batches, shared, hp, cfg)[1]


# --------------------------------------------------------------- optimizer


class RMSprop:
    """``s <- rho s + (1 - rho) g^2;  w <- w - lr g / (sqrt(s) + eps)``."""

    def __init__(self, lr=0.001, decay=0.9, eps=1e-8):
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.state = {}

    def step(self, params, grads):
        """Update the arrays in ``params`` in place; keys index the state."""
        for name, g in grads.items():
            w = params[name]
            s = self.state.get(name)
            if s is None:
                s = self.state[name] = np.zeros_like(w)
            s *= self.decay
            s += (1.0 - self.decay) * g * g
            w -= self.lr * g / (np.sqrt(s) + self.eps)


def rmsprop_step(params, grads, state, cfg):
    """Functional form: returns new ``(params, state)`` dicts."""
    opt = RMSprop(cfg.learning_rate, cfg.rmsprop_decay, cfg.rmsprop_eps)
    opt.state = {k: v.copy() for k, v in state.items()}
    new = {k: v.copy() for k, v in params.items()}
    opt.step(new, grads)
    return new, opt.state


# ------------------------------------------------------------------- train


@dataclass
class TrainResult:
    params: list
    history: list
    embeddings: list


def domain_seeds(seed, n_domains):
    """Independent per-domain integer seeds derived from one run seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_domains)]


def train(domains, spectra, shared, hp, cfg, seeds=None, init=None, on_epoch=None):
    """Jointly train every domain; ``domains[0]`` is the target.

    ``domains`` are the training graphs (``BipartiteDomain``). ``seeds``
    gives one integer per domain for parameter init and triple sampling;
    by default they are derived from ``cfg.seed``. ``init`` optionally
    overrides the initial parameters (it is copied). ``on_epoch`` receives
    each history record.
    """
    n = len(domains)
    if n < 1:
        raise ValueError("need at least the target domain")
    if len(spectra) != n:
        raise ValueError("one spectrum per domain is required")
    seeds = domain_seeds(cfg.seed, n) if seeds is None else list(seeds)
    if init is not None:
        params = [p.copy() for p in init]
    else:
        params = [init_parameters(hp, d.n_users, d.n_items, [s, 0]) for d, s in zip(domains, seeds)]
    rngs = [np.random.default_rng([s, 1]) for s in seeds]
    opts = [RMSprop(cfg.learning_rate, cfg.rmsprop_decay, cfg.rmsprop_eps) for _ in range(n)]
    frozen = set(cfg.frozen)
    history = []
    for epoch in range(cfg.epochs):
        batches = [sample_triples(d.edges, d.n_items, cfg.batch_size, r, k) for k, (d, r) in enumerate(zip(domains, rngs))]
        try:
            # non-finite values are detected explicitly below
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = loss_and_gradients(params, spectra, batches, shared, hp, cfg)
        except NumericalError as exc:
            raise NumericalError(f"epoch {epoch}: {exc}") from None
        record = {
            "epoch": epoch,
            "loss_total": loss.total,
            "loss_in_domain": list(loss.in_domain),
            "loss_cross": loss.cross,
            "reg": loss.reg,
        }
        if not np.isfinite(loss.total):
            raise NumericalError(f"loss became non-finite at epoch {epoch}: {record}")
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        for p, g, opt in zip(params, grads, opts):
            opt.step(p.tensors(), {k: v for k, v in g.items() if k not in frozen})
        if epoch % 50 == 0:
            log.debug("epoch %d total %.4f", epoch, loss.total)
    embeddings = [forward(p, s, hp) for p, s in zip(params, spectra)]
    for k, p in enumerate(params):
        for name, arr in p.tensors().items():
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite parameter {name!r} in domain {k} after training")
    return TrainResult(params=params, history=history, embeddings=embeddings)
