"""Per-domain spectral convolution network and adaptive user mapping."""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

MAPPING_KINDS = ("linear", "mlp")
CONCAT_MODES = ("all", "last")


@dataclass(frozen=True)
class ModelHyperparams:
    input_dim: int = 32
    filter_dim: int = 32
    num_layers: int = 5
    mapping_kind: str = "linear"
    mlp_hidden: int = 64
    concat_mode: str = "all"

    def __post_init__(self):
        if min(self.input_dim, self.filter_dim, self.num_layers, self.mlp_hidden) < 1:
            raise ValueError("dimensions must be positive")
        if self.filter_dim != self.input_dim:
            raise ValueError(f"filter_dim ({self.filter_dim}) must equal input_dim ({self.input_dim})")
        if self.mapping_kind not in MAPPING_KINDS:
            raise ValueError(f"mapping_kind must be one of {MAPPING_KINDS}")
        if self.concat_mode not in CONCAT_MODES:
            raise ValueError(f"concat_mode must be one of {CONCAT_MODES}")

    @property
    def latent_dim(self):
        if self.concat_mode == "last":
            return self.filter_dim
        return (self.num_layers + 1) * self.input_dim

    @property
    def invariant_dim(self):
        return self.latent_dim


@dataclass
class DomainParameters:
    """Trainable tensors of one domain.

    ``x0`` stacks user rows above item rows. ``mapping`` holds ``w_b`` for
    the linear map or ``w1, b1, w2, b2`` for the MLP.
    """

    x0: np.ndarray
    theta: list
    mapping: dict
    n_users: int
    n_items: int

    def tensors(self):
        """Flat name -> array view of every trainable tensor (no copies)."""
        out = {"x0": self.x0}
        for k, t in enumerate(self.theta):
            out[f"theta{k}"] = t
        for name, t in self.mapping.items():
            out[name] = t
        return out

    def copy(self):
        return DomainParameters(
            x0=self.x0.copy(),
            theta=[t.copy() for t in self.theta],
            mapping={k: v.copy() for k, v in self.mapping.items()},
            n_users=self.n_users,
            n_items=self.n_items,
        )


@dataclass
class EmbeddingSet:
    v_user: np.ndarray
    v_item: np.ndarray
    u_invariant: np.ndarray


def glorot_uniform(rng, shape):
    bound = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, size=shape)


def init_parameters(hp, n_users, n_items, seed):
    if n_users < 1 or n_items < 1:
        raise ValueError("a domain needs at least one user and one item")
    rng = np.random.default_rng(seed)
    n = n_users + n_items
    x0 = glorot_uniform(rng, (n, hp.input_dim))
    theta = [glorot_uniform(rng, (hp.input_dim, hp.filter_dim))]
    theta += [glorot_uniform(rng, (hp.filter_dim, hp.filter_dim)) for _ in range(hp.num_layers - 1)]
    d, d_inv = hp.latent_dim, hp.invariant_dim
    if hp.mapping_kind == "linear":
        mapping = {"w_b": glorot_uniform(rng, (d, d_inv))}
    else:
        mapping = {
            "w1": glorot_uniform(rng, (d, hp.mlp_hidden)),
            "b1": np.zeros(hp.mlp_hidden),
            "w2": glorot_uniform(rng, (hp.mlp_hidden, d_inv)),
            "b2": np.zeros(d_inv),
        }
    return DomainParameters(x0=x0, theta=theta, mapping=mapping, n_users=n_users, n_items=n_items)


def sigmoid(z):
    z = np.clip(z, -500.0, 500.0)
    e = np.exp(-np.abs(z))
    inv = 1.0 / (1.0 + e)
    return np.where(z >= 0, inv, e * inv)


def spectral_conv_layer(x, filt, theta):
    """``sigmoid(filter @ x @ theta)``."""
    x = np.asarray(x, dtype=np.float64)
    filt = np.asarray(filt, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if filt.ndim != 2 or filt.shape[0] != filt.shape[1]:
        raise ShapeError(f"filter must be square, got {filt.shape}")
    if x.shape[0] != filt.shape[0]:
        raise ShapeError(f"x has {x.shape[0]} rows but filter is {filt.shape[0]}x{filt.shape[1]}")
    if x.shape[1] != theta.shape[0]:
        raise ShapeError(f"x has {x.shape[1]} columns but theta has {theta.shape[0]} rows")
    return sigmoid(filt @ x @ theta)


@dataclass
class ForwardTrace:
    """Intermediates kept for backpropagation.

    ``propagated[k]`` is ``filter @ layers[k]``; ``layers[0]`` is ``x0``.
    """

    layers: list
    propagated: list
    mlp_hidden: np.ndarray = None


def _check_spectrum(params, spectrum):
    n = params.x0.shape[0]
    if spectrum.filter.shape != (n, n):
        raise ShapeError(f"spectrum has {spectrum.filter.shape[0]} nodes but parameters have {n}")


def forward(params, spectrum, hp, trace=False):
    """Run the K-layer stack and the user mapping.

    Returns an ``EmbeddingSet``; with ``trace=True`` returns
    ``(EmbeddingSet, ForwardTrace)``.
    """
    _check_spectrum(params, spectrum)
    filt = spectrum.propagator()[0]
    layers = [params.x0]
    propagated = []
    h = params.x0
    for theta in params.theta:
        if h.shape[1] != theta.shape[0]:
            raise ShapeError(f"layer input width {h.shape[1]} does not match theta rows {theta.shape[0]}")
        ph = filt @ h
        propagated.append(ph)
        h = sigmoid(ph @ theta)
        layers.append(h)
    v = np.hstack(layers) if hp.concat_mode == "all" else layers[-1]
    nu = params.n_users
    v_user, v_item = v[:nu], v[nu:]
    u_inv, hidden = _map(v_user, params, hp)
    emb = EmbeddingSet(v_user=v_user, v_item=v_item, u_invariant=u_inv)
    if trace:
        return emb, ForwardTrace(layers=layers, propagated=propagated, mlp_hidden=hidden)
    return emb


def _map(v_user, params, hp):
    m = params.mapping
    if hp.mapping_kind == "linear":
        w = m["w_b"]
        if v_user.shape[1] != w.shape[0]:
            raise ShapeError(f"v_user width {v_user.shape[1]} does not match w_b rows {w.shape[0]}")
        return v_user @ w, None
    if v_user.shape[1] != m["w1"].shape[0]:
        raise ShapeError(f"v_user width {v_user.shape[1]} does not match w1 rows {m['w1'].shape[0]}")
    hidden = np.tanh(v_user @ m["w1"] + m["b1"])
    return hidden @ m["w2"] + m["b2"], hidden


def map_to_invariant(v_user, params, hp):
    return _map(np.asarray(v_user, dtype=np.float64), params, hp)[0]


def predict_scores(v_user_row, v_item):
    v_item = np.asarray(v_item, dtype=np.float64)
    return v_item @ np.asarray(v_user_row, dtype=np.float64)
