"""``pdmtl`` command line: run, gen-data, inspect-topology, compare."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from . import topology as topo
from .datagen import COVARIANCES, make_dataset
from .nn import ConfigurationError
from .trainer import RunConfig, run_experiment

log = logging.getLogger("pdmtl")

MODES = {"dynamic": "dynamic", "fully-connected": "fully_connected"}


def _load_config(args):
    if args.config:
        config, out_dir = io.parse_config(args.config)
    else:
        config, out_dir = RunConfig().validate(), None
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "mode", None) is not None:
        config.topology_mode = MODES[args.mode]
    if getattr(args, "freeze_epoch", None) is not None:
        config.topology_freeze_epoch = args.freeze_epoch
    if getattr(args, "epochs", None) is not None:
        config.epochs = args.epochs
    return config.validate(), out_dir


def cmd_run(args) -> int:
    config, out_dir = _load_config(args)
    out = Path(args.out or out_dir or "runs/latest")
    dataset = None
    if args.dataset:
        dataset = io.load_dataset(args.dataset)
    elif args.cache_dir:
        dataset = io.cached_dataset(config, args.cache_dir)
    metrics = run_experiment(config, dataset)
    io.write_bundle(metrics, out)
    print(f"wrote {out}")
    return 0


def cmd_gen_data(args) -> int:
    config, _ = _load_config(args)
    if args.out:
        make_spec, coords = COVARIANCES[config.data.covariance]
        d = config.data
        ds = make_dataset(make_spec(), coords, d.n_train, d.n_test, d.n_shared, seed=config.data_seed)
        path = io.save_dataset(ds, args.out)
    else:
        ds = io.cached_dataset(config, args.cache_dir or ".pdmtl-cache")
        path = Path(args.cache_dir or ".pdmtl-cache") / f"dataset-{ds.cache_key()}.npz"
    print(f"{path}  digest={ds.cache_key()}  splits={len(ds.train)}/{len(ds.test)}/{len(ds.shared)}")
    return 0


def cmd_inspect(args) -> int:
    z = io.load_transference(args.snapshot, args.epoch)
    est = topo.SpectralTopology(threshold=args.threshold, transference_scale=args.scale).fit(z)
    np.set_printoptions(precision=4, suppress=True, linewidth=120)
    print("eigenvalues:", " ".join(f"{v:.4f}" for v in est.eigenvalues_))
    print("chosen k:", est.n_clusters_)
    print("clusters:", "{" + ",".join("{" + ",".join(map(str, c)) + "}" for c in est.clusters_) + "}")
    print("mixing matrix:")
    print(est.mixing_matrix_)
    return 0


def cmd_compare(args) -> int:
    rows = io.compare_losses(args.a, args.b)
    print(io.format_comparison(rows, args.label_a, args.label_b))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pdmtl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="per-epoch progress on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and write an output bundle")
    run.add_argument("--config")
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    run.add_argument("--mode", choices=sorted(MODES))
    run.add_argument("--freeze-epoch", type=int, dest="freeze_epoch")
    run.add_argument("--epochs", type=int)
    run.add_argument("--dataset", help="dataset .npz from gen-data")
    run.add_argument("--cache-dir", dest="cache_dir")
    run.set_defaults(func=cmd_run)

    gen = sub.add_parser("gen-data", help="materialize the configured dataset")
    gen.add_argument("--config")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--out", help="explicit .npz path (default: digest-named file in the cache dir)")
    gen.add_argument("--cache-dir", dest="cache_dir")
    gen.set_defaults(func=cmd_gen_data)

    ins = sub.add_parser("inspect-topology", help="re-run spectral clustering on a saved transference matrix")
    ins.add_argument("snapshot", help="topology.json, JSON matrix, or CSV grid")
    ins.add_argument("--epoch", type=int)
    ins.add_argument("--threshold", type=float, default=1.0)
    ins.add_argument("--scale", type=float, default=1.0)
    ins.set_defaults(func=cmd_inspect)

    cmp_ = sub.add_parser("compare", help="per-task convergence epochs of two losses.csv files")
    cmp_.add_argument("a")
    cmp_.add_argument("b")
    cmp_.add_argument("--label-a", default="a")
    cmp_.add_argument("--label-b", default="b")
    cmp_.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose or args.command == "run":
        logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"pdmtl: configuration error: {exc}", file=sys.stderr)
        return 2
    except topo.StochasticityError as exc:
        print(f"pdmtl: invariant violated: {exc}", file=sys.stderr)
        return 3
    except topo.NumericalError as exc:
        print(f"pdmtl: numerical failure: {exc}", file=sys.stderr)
        return 4
    except (OSError, ValueError) as exc:
        print(f"pdmtl: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
