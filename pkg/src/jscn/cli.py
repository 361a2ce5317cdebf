"""Command-line entry point: ``jscn {stats,synth,spectrum,train,eval,gradcheck}``.

Exit codes: 0 success, 1 failed check, 2 input error, 3 numerical abort.
"""

import argparse
import csv
import json
import logging
import os
import sys

from threadpoolctl import threadpool_limits

from . import data
from .container import dumps_json
from .errors import DataError, GraphError, JSCNError, NumericalError
from .evaluation import DEFAULT_KS, evaluate
from .graph import BipartiteDomain, domain_spectrum, save_spectrum
from .gradcheck import check_gradients
from .pipeline import RunConfig, align_embeddings, load_checkpoint, run_training, save_checkpoint

log = logging.getLogger("jscn")

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3


class InputError(Exception):
    pass


def _setup_logging():
    level = os.environ.get("JSCN_LOG_LEVEL", "error").upper()
    if level not in ("ERROR", "INFO", "DEBUG"):
        level = "ERROR"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _emit(obj):
    sys.stdout.write(dumps_json(obj) + "\n")


def _read_pairs(path):
    if not os.path.isfile(path):
        raise InputError(f"no such file: {path}")
    return data.to_implicit(data.load_ratings(path))


def _parse_ks(values):
    ks = []
    for v in values:
        for part in str(v).split(","):
            part = part.strip()
            if part:
                ks.append(int(part))
    if not ks or min(ks) < 1:
        raise InputError("--k values must be positive integers")
    return sorted(set(ks))


# ---------------------------------------------------------------- commands


def cmd_stats(args):
    if args.bundle:
        if not os.path.isdir(args.bundle):
            raise InputError(f"no such bundle directory: {args.bundle}")
        _emit(data.bundle_stats(data.load_bundle(args.bundle)))
        return EXIT_OK
    if not args.input:
        raise InputError("give --input (repeatable) or --bundle")
    domains = []
    for path in args.input:
        pairs = data.filter_min_interactions(_read_pairs(path), args.min_degree)
        domains.append(BipartiteDomain.from_pairs(pairs, os.path.basename(path)))
    per = [data.edge_stats(d.pairs()) for d in domains]
    shared = data.align_shared_users(domains)
    out = dict(per[0])
    out["domains"] = {d.category: s for d, s in zip(domains, per)}
    out["shared_counts"] = {f"{domains[m].category}|{domains[n].category}": len(rows)
                            for m, n, rows in shared.unordered()}
    _emit(out)
    return EXIT_OK


def cmd_synth(args):
    spec_dict = {}
    if args.spec:
        if os.path.isfile(args.spec):
            with open(args.spec, encoding="utf-8") as fh:
                spec_dict = json.load(fh)
        else:
            try:
                spec_dict = json.loads(args.spec)
            except json.JSONDecodeError:
                raise InputError(f"--spec is neither a file nor JSON: {args.spec}") from None
    spec = data.SyntheticSpec.from_dict(spec_dict)
    bundle = data.generate_synthetic(spec, args.seed)
    data.save_bundle(bundle, args.out)
    _emit(data.bundle_stats(bundle))
    return EXIT_OK


def cmd_spectrum(args):
    domain = BipartiteDomain.from_pairs(_read_pairs(args.input), os.path.basename(args.input))
    spec = domain_spectrum(domain, args.max_nodes)
    save_spectrum(args.out, spec, {"users": list(domain.users), "items": list(domain.items)})
    _emit({"n_nodes": spec.n_nodes, "min_eigenvalue": float(spec.eigenvalues[0]),
           "max_eigenvalue": float(spec.eigenvalues[-1])})
    return EXIT_OK


_OVERRIDES = {
    "seed": "seed",
    "variant": "jscn_variant",
    "epochs": "epochs",
    "mu": "mu",
    "learning_rate": "learning_rate",
    "batch_size": "batch_size",
    "num_layers": "num_layers",
    "input_dim": "input_dim",
}


def _run_config(args):
    cfg = {}
    if args.config:
        if not os.path.isfile(args.config):
            raise InputError(f"no such config file: {args.config}")
        with open(args.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
    for flag, key in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[key] = value
    if "input_dim" in cfg and "filter_dim" not in cfg:
        cfg["filter_dim"] = cfg["input_dim"]
    try:
        return RunConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid config: {exc}") from None


def cmd_train(args):
    cfg = _run_config(args)
    target = BipartiteDomain.from_pairs(_read_pairs(args.target), "target")
    sources = [BipartiteDomain.from_pairs(_read_pairs(p), f"source_{k}") for k, p in enumerate(args.source or [])]
    if sources and not cfg.uses_sources:
        log.info("single_domain variant: ignoring %d source file(s)", len(sources))
    domains = [target, *sources]
    shared = data.align_shared_users(domains)
    log_fh = open(args.log, "w", encoding="utf-8") if args.log else None
    try:
        def on_epoch(rec):
            if log_fh:
                log_fh.write(dumps_json(rec) + "\n")

        result = run_training(cfg, domains, shared, on_epoch=on_epoch)
    finally:
        if log_fh:
            log_fh.close()
    used = domains if cfg.uses_sources else domains[:1]
    save_checkpoint(args.out, cfg, used, result)
    last = result.history[-1] if result.history else {}
    _emit({"checkpoint": args.out, "epochs": len(result.history), "final": last})
    return EXIT_OK


def cmd_eval(args):
    if not os.path.isfile(args.model):
        raise InputError(f"no such checkpoint: {args.model}")
    if not os.path.isdir(args.bundle):
        raise InputError(f"no such bundle directory: {args.bundle}")
    ks = _parse_ks(args.k) if args.k else list(DEFAULT_KS)
    _, meta, emb = load_checkpoint(args.model)
    bundle = data.load_bundle(args.bundle)
    emb = align_embeddings(emb, meta, bundle)
    report = evaluate(emb, bundle, ks, keep_per_user=bool(args.per_user))
    if args.per_user:
        with open(args.per_user, "w", newline="", encoding="utf-8") as fh:
            cols = ["user"] + [f"{m}@{k}" for k in ks for m in ("recall", "map")]
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for row in report.per_user:
                row = dict(row, user=bundle.target.users[row["user"]])
                w.writerow(row)
    if args.table:
        sys.stdout.write(report.to_table() + "\n")
    else:
        _emit(report.to_dict())
    return EXIT_OK


def cmd_gradcheck(args):
    reports = {}
    for kind in ("linear", "mlp"):
        reports[kind] = check_gradients(seed=args.seed, mapping_kind=kind, perturb=args.perturb)
    worst_kind = max(reports, key=lambda k: reports[k].max_rel_error)
    passed = all(r.passed for r in reports.values())
    _emit({
        "passed": passed,
        "max_rel_error": reports[worst_kind].max_rel_error,
        "worst": dict(reports[worst_kind].worst, mapping=worst_kind),
        "reports": {k: r.to_dict() for k, r in reports.items()},
    })
    return EXIT_OK if passed else EXIT_FAIL


# ------------------------------------------------------------------ parser


def build_parser():
    p = argparse.ArgumentParser(prog="jscn", description="Joint spectral convolution for cross-domain recommendation")
    p.add_argument("--threads", type=int, default=1, help="cap on BLAS/OpenMP threads (default 1)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("stats", help="dataset statistics as JSON")
    s.add_argument("--input", action="append", help="ratings CSV (repeatable; first is the target)")
    s.add_argument("--bundle", help="bundle directory instead of CSV inputs")
    s.add_argument("--min-degree", type=int, default=5, help="user degree threshold (default 5)")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("synth", help="generate a synthetic bundle")
    s.add_argument("--spec", help="JSON file or inline JSON with generator fields")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("spectrum", help="compute and cache a graph spectrum")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--max-nodes", type=int, default=20_000)
    s.set_defaults(func=cmd_spectrum)

    s = sub.add_parser("train", help="train a model and write a checkpoint")
    s.add_argument("--target", required=True)
    s.add_argument("--source", action="append", help="source-domain CSV (repeatable)")
    s.add_argument("--config", help="RunConfig JSON; flags below override it")
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="per-epoch JSON lines")
    s.add_argument("--seed", type=int)
    s.add_argument("--variant", choices=["alpha", "beta", "beta_mlp", "single_domain"])
    s.add_argument("--epochs", type=int)
    s.add_argument("--mu", type=float)
    s.add_argument("--learning-rate", type=float, dest="learning_rate")
    s.add_argument("--batch-size", type=int, dest="batch_size")
    s.add_argument("--num-layers", type=int, dest="num_layers")
    s.add_argument("--input-dim", type=int, dest="input_dim")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a bundle")
    s.add_argument("--model", required=True)
    s.add_argument("--bundle", required=True)
    s.add_argument("--k", nargs="+", help="cutoffs, e.g. --k 20 40 or --k 20,40")
    s.add_argument("--per-user", help="write per-user metrics CSV here")
    s.add_argument("--table", action="store_true", help="print an aligned table instead of JSON")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient check")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--perturb", type=float, default=0.0, help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_INPUT
    try:
        with threadpool_limits(limits=max(1, args.threads)):
            return args.func(args)
    except NumericalError as exc:
        print(f"jscn: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, DataError, GraphError, OSError, ValueError) as exc:
        print(f"jscn: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except JSCNError as exc:
        print(f"jscn: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
