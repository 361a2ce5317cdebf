"""Central finite-difference check of the analytic gradients."""

from dataclasses import dataclass

import numpy as np

from .data import align_shared_users
from .graph import BipartiteDomain, domain_spectrum
from .model import ModelHyperparams, forward, init_parameters
from .training import TrainConfig, loss_and_gradients, loss_breakdown, sample_triples

REL_TOL = 1e-4
ABS_TOL = 1e-8


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error_small: float
    worst: dict
    n_coordinates: int

    @property
    def passed(self):
        return self.max_rel_error < REL_TOL and self.max_abs_error_small <= ABS_TOL

    def to_dict(self):
        return {
            "max_rel_error": self.max_rel_error,
            "max_abs_error_small": self.max_abs_error_small,
            "n_coordinates": self.n_coordinates,
            "passed": self.passed,
            "worst": self.worst,
        }


def random_domain(rng, n_users, n_items, user_prefix, density=0.45):
    """Random graph with no isolated vertex and a negative item for every user."""
    while True:
        r = rng.random((n_users, n_items)) < density
        if r.any(axis=1).all() and r.any(axis=0).all() and (~r).any(axis=1).all():
            break
    pairs = [(f"{user_prefix[u]}", f"i{j}") for u, j in np.argwhere(r)]
    return BipartiteDomain.from_pairs(pairs)


def random_instance(seed, n_users=6, n_items=5, shared_fraction=0.3, n_domains=2):
    """Small multi-domain problem: domains plus their shared-user index."""
    rng = np.random.default_rng(seed)
    n_shared = int(round(shared_fraction * n_users))
    domains = []
    for d in range(n_domains):
        names = [f"s{k}" for k in range(n_shared)] + [f"d{d}u{k}" for k in range(n_users - n_shared)]
        domains.append(random_domain(rng, n_users, n_items, names))
    return domains, align_shared_users(domains)


def check_gradients(seed=0, mapping_kind="linear", h=1e-5, perturb=0.0, input_dim=4, num_layers=2,
                    batch_size=8, cfg=None):
    """Compare every analytic gradient coordinate with central differences.

    ``perturb`` is added to one analytic coordinate as a fault-injection
    hook (the check must then fail).
    """
    domains, shared = random_instance(seed)
    hp = ModelHyperparams(input_dim=input_dim, filter_dim=input_dim, num_layers=num_layers,
                          mapping_kind=mapping_kind, mlp_hidden=5)
    cfg = cfg or TrainConfig(reg_epsilon=0.05, cross_weight=1.0, seed=seed)
    spectra = [domain_spectrum(d) for d in domains]
    rng = np.random.default_rng([seed, 7])
    params = [init_parameters(hp, d.n_users, d.n_items, [seed, k]) for k, d in enumerate(domains)]
    for p in params:
        # nonzero biases so their gradients are exercised too
        for name in ("b1", "b2"):
            if name in p.mapping:
                p.mapping[name][:] = rng.normal(scale=0.3, size=p.mapping[name].shape)
    batches = [sample_triples(d.edges, d.n_items, batch_size, rng, k) for k, d in enumerate(domains)]
    _, grads = loss_and_gradients(params, spectra, batches, shared, hp, cfg)
    if perturb:
        grads[0]["x0"][0, 0] += perturb

    def objective():
        embs = [forward(p, s, hp) for p, s in zip(params, spectra)]
        return loss_breakdown(embs, batches, shared, cfg).total

    max_rel, max_abs, count = 0.0, 0.0, 0
    worst = {}
    for k, p in enumerate(params):
        for name, arr in p.tensors().items():
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                plus = objective()
                arr[idx] = old - h
                minus = objective()
                arr[idx] = old
                fd = (plus - minus) / (2 * h)
                an = float(grads[k][name][idx])
                count += 1
                if abs(fd) > ABS_TOL:
                    rel = abs(an - fd) / abs(fd)
                    if rel > max_rel:
                        max_rel = rel
                        worst = {"domain": k, "tensor": name, "index": list(idx), "analytic": an,
                                 "finite_difference": fd, "rel_error": rel}
                else:
                    max_abs = max(max_abs, abs(an - fd))
    return GradCheckReport(max_rel, max_abs, worst, count)
