"""Run configuration, model variants, checkpoints, and train+evaluate runs."""

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .container import CHECKPOINT_MAGIC, read_container, write_container
from .errors import DataError
from .evaluation import DEFAULT_KS, evaluate
from .graph import domain_spectrum
from .model import EmbeddingSet, ModelHyperparams, init_parameters
from .training import TrainConfig, domain_seeds, train

VARIANTS = ("alpha", "beta", "beta_mlp", "single_domain")


@dataclass
class RunConfig:
    seed: int
    jscn_variant: str = "beta"
    input_dim: int = 32
    filter_dim: int = 32
    num_layers: int = 5
    mlp_hidden: int = 64
    concat_mode: str = "all"
    learning_rate: float = 0.001
    reg_epsilon: float = 0.001
    mu: float = 1.0
    epochs: int = 200
    batch_size: int = 1024
    rmsprop_decay: float = 0.9
    rmsprop_eps: float = 1e-8
    squared_cross: bool = True
    reg_items: bool = False
    freeze_x0: bool = False
    mapping_init: str = "glorot"
    ks: list = field(default_factory=lambda: list(DEFAULT_KS))
    max_nodes: int = 20_000

    def __post_init__(self):
        if self.jscn_variant not in VARIANTS:
            raise ValueError(f"jscn_variant must be one of {VARIANTS}")
        if self.seed is None:
            raise ValueError("seed is mandatory")
        if self.mapping_init not in ("glorot", "identity"):
            raise ValueError("mapping_init must be 'glorot' or 'identity'")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        extra = set(d) - names
        if extra:
            raise ValueError(f"unknown config fields: {sorted(extra)}")
        if "seed" not in d:
            raise ValueError("config must set 'seed'")
        return cls(**d)

    @classmethod
    def from_json_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)

    @property
    def mapping_kind(self):
        return "mlp" if self.jscn_variant == "beta_mlp" else "linear"

    @property
    def uses_sources(self):
        return self.jscn_variant != "single_domain"

    def hyperparams(self):
        return ModelHyperparams(
            input_dim=self.input_dim,
            filter_dim=self.filter_dim,
            num_layers=self.num_layers,
            mapping_kind=self.mapping_kind,
            mlp_hidden=self.mlp_hidden,
            concat_mode=self.concat_mode,
        )

    def train_config(self):
        frozen = []
        if self.jscn_variant == "alpha":
            frozen.append("w_b")
        if self.freeze_x0:
            frozen.append("x0")
        return TrainConfig(
            learning_rate=self.learning_rate,
            reg_epsilon=self.reg_epsilon,
            cross_weight=self.mu if self.uses_sources else 0.0,
            epochs=self.epochs,
            batch_size=self.batch_size,
            rmsprop_decay=self.rmsprop_decay,
            rmsprop_eps=self.rmsprop_eps,
            seed=self.seed,
            squared_cross=self.squared_cross,
            reg_items=self.reg_items,
            frozen=tuple(frozen),
        )


def initial_parameters(cfg, domains, seeds):
    hp = cfg.hyperparams()
    params = [init_parameters(hp, d.n_users, d.n_items, [s, 0]) for d, s in zip(domains, seeds)]
    if cfg.jscn_variant == "alpha" or (cfg.mapping_kind == "linear" and cfg.mapping_init == "identity"):
        for p in params:
            p.mapping["w_b"] = np.eye(hp.latent_dim, hp.invariant_dim)
    return params


def run_training(cfg, domains, shared, spectra=None, on_epoch=None):
    """Train ``domains`` (target first) under ``cfg``'s variant.

    Sources are dropped for ``single_domain``. ``spectra`` may be passed
    to reuse precomputed spectra (one per entry of ``domains``).
    """
    if not cfg.uses_sources:
        domains = domains[:1]
        shared = shared.subset([0])
        spectra = spectra[:1] if spectra is not None else None
    if spectra is None:
        spectra = [domain_spectrum(d, cfg.max_nodes) for d in domains]
    seeds = domain_seeds(cfg.seed, len(domains))
    init = initial_parameters(cfg, domains, seeds)
    return train(domains, spectra, shared, cfg.hyperparams(), cfg.train_config(),
                 seeds=seeds, init=init, on_epoch=on_epoch)


def run_bundle(cfg, bundle, spectra=None, source_ids=None, on_epoch=None):
    """Train on a bundle and evaluate on its target test edges.

    ``source_ids`` selects a subset of the bundle's sources (0-based).
    Returns ``(TrainResult, EvalReport)``.
    """
    domains = bundle.domains()
    keep = [0] + [1 + k for k in (range(len(bundle.sources)) if source_ids is None else source_ids)]
    doms = [domains[k] for k in keep]
    specs = [spectra[k] for k in keep] if spectra is not None else None
    result = run_training(cfg, doms, bundle.shared.subset(keep), specs, on_epoch)
    report = evaluate(result.embeddings[0], bundle, cfg.ks)
    return result, report


# ------------------------------------------------------------- checkpoints


def save_checkpoint(path, cfg, domains, result):
    """Parameters of every domain plus the target's final embeddings."""
    tensors = {}
    names = ["target"] + [f"source_{k}" for k in range(len(domains) - 1)]
    for name, p in zip(names, result.params):
        for tname, arr in p.tensors().items():
            tensors[f"{name}/{tname}"] = arr
    emb = result.embeddings[0]
    tensors["target/v_user"] = emb.v_user
    tensors["target/v_item"] = emb.v_item
    tensors["target/u_invariant"] = emb.u_invariant
    meta = {
        "config": cfg.to_dict(),
        "hyperparams": asdict(cfg.hyperparams()),
        "domains": [{"name": n, "category": d.category, "n_users": d.n_users, "n_items": d.n_items}
                    for n, d in zip(names, domains)],
        "target_users": list(domains[0].users),
        "target_items": list(domains[0].items),
        "seed": cfg.seed,
    }
    write_container(path, CHECKPOINT_MAGIC, tensors, meta)


def load_checkpoint(path):
    """Return ``(tensors, meta, target EmbeddingSet)``."""
    tensors, meta = read_container(path, CHECKPOINT_MAGIC)
    try:
        emb = EmbeddingSet(tensors["target/v_user"], tensors["target/v_item"], tensors["target/u_invariant"])
    except KeyError as exc:
        raise DataError(f"{path}: checkpoint lacks tensor {exc}") from None
    return tensors, meta, emb


def align_embeddings(emb, meta, bundle):
    """Reorder checkpoint embeddings to the bundle's target user/item order."""
    users = {u: k for k, u in enumerate(meta["target_users"])}
    items = {i: k for k, i in enumerate(meta["target_items"])}
    try:
        urows = [users[u] for u in bundle.target.users]
        irows = [items[i] for i in bundle.target.items]
    except KeyError as exc:
        raise DataError(f"bundle id {exc} is unknown to the checkpoint") from None
    return EmbeddingSet(emb.v_user[urows], emb.v_item[irows], emb.u_invariant[urows])
