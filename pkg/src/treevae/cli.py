"""Command-line entry point: ``treevae <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .autodiff import NonFiniteError
from .generator import GenerationError, sample_trees
from .io import atomic_write_text, corpus_files, file_sha256, read_graph, read_tree, write_corpus, write_tree
from .meshing import export_mesh, tree_to_mesh, write_grid
from .metrics import evaluate_sets
from .preprocessing import NormParams, binarize, normalize, rebalance, resample_rdp, trim
from .synthetic import SynthParams, generate_synthetic_corpus
from .trainer import (
    CheckpointError,
    TrainConfig,
    TrainingError,
    init_state,
    load_checkpoint,
    save_checkpoint,
    train,
    write_loss_curve,
)
from .tree import TreeError

log = logging.getLogger("treevae")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
NORM_FILE = "norm.json"
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericalError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _manifest(command: str, args: argparse.Namespace, inputs=(), **extra) -> dict:
    """Run record; deliberately free of timestamps so reruns are byte-identical."""
    arg_dict = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"}
    doc = {
        "command": command,
        "version": __version__,
        "arguments": arg_dict,
        "seed": arg_dict.get("seed"),
        "inputs": {str(p): file_sha256(p) for p in inputs},
    }
    doc.update(extra)
    return doc


def _write_json(path: Path, doc: dict) -> None:
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_norm(path: Path) -> NormParams:
    try:
        return NormParams.from_dict(json.loads(path.read_text()))
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise DataError(f"{path}: cannot read normalization parameters: {e}") from None


def _load_corpus(directory: Path):
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    files = corpus_files(directory)
    if not files:
        raise DataError(f"{directory}: no tree files found")
    trees = []
    for p in files:
        try:
            trees.append(read_tree(p))
        except TreeError as e:
            raise DataError(f"{p.name}: {e}") from None
    return files, trees


# -- subcommands ------------------------------------------------------------


def cmd_synth_data(args) -> int:
    if args.num <= 0:
        raise UsageError("--num must be positive")
    params = SynthParams(max_height=args.max_height)
    trees = generate_synthetic_corpus(args.num, seed=args.seed, params=params)
    write_corpus(trees, args.out, prefix="synth", units="arbitrary")
    _write_json(args.out / MANIFEST, _manifest("synth-data", args, synth_params=params.to_dict()))
    print(f"wrote {len(trees)} trees to {args.out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    if args.input is None or not args.input.is_dir():
        raise DataError(f"{args.input}: not a directory")
    files = corpus_files(args.input)
    if not files:
        raise DataError(f"{args.input}: no tree files found")
    processed = []
    for p in files:
        try:
            t = binarize(read_graph(p))
            t = rebalance(t)
            t = trim(t, args.max_height)
            t = resample_rdp(t, args.epsilon)
        except (TreeError, ValueError) as e:
            raise DataError(f"{p.name}: {e}") from None
        processed.append((p, t.compact()))
    _, norm = normalize([t for _, t in processed])
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for p, t in processed:
        write_tree(t, args.out / (p.stem + ".tree"), comment=f"preprocessed from {p.name}")
        s = t.stats()
        rows.append([p.stem, s.node_count, s.bifurcation_count, s.height])
    _write_json(args.out / NORM_FILE, norm.to_dict())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tree", "nodes", "bifurcations", "height"])
    w.writerows(rows)
    atomic_write_text(args.out / "stats.csv", buf.getvalue())
    _write_json(args.out / MANIFEST, _manifest("preprocess", args, inputs=files))
    for name, n, b, h in rows:
        print(f"{name}: nodes={n} bifurcations={b} height={h}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        if args.config is not None:
            cfg = TrainConfig.read(args.config, profile=args.profile)
        else:
            cfg = TrainConfig.profile(args.profile)
        overrides = {k: v for k, v in (("epochs", args.epochs), ("seed", args.seed)) if v is not None}
        cfg = TrainConfig.from_dict({**cfg.to_dict(), **overrides})
    except OSError as e:
        raise DataError(f"cannot read config: {e}") from None
    except ValueError as e:
        raise UsageError(str(e)) from None
    files, trees = _load_corpus(args.corpus)
    norm_path = args.corpus / NORM_FILE
    norm = _read_norm(norm_path) if norm_path.exists() else None
    try:
        if norm is None:
            trees, norm = normalize(trees)
        else:
            trees = [t.with_attrs(norm.apply(t.attrs)) for t in trees]
    except ValueError as e:
        raise DataError(str(e)) from None
    state = init_state(cfg, norm)
    ckpt_dir = args.out.parent / (args.out.stem + "_checkpoints") if cfg.checkpoint_interval else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    try:
        train(trees, state=state, names=[p.name for p in files], checkpoint_dir=ckpt_dir)
    except (TrainingError, NonFiniteError) as e:
        raise NumericalError(str(e)) from None
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, args.out)
    curve = args.out.with_name(args.out.stem + "_loss.csv")
    write_loss_curve(state.history, curve)
    inputs = files + ([norm_path] if norm_path.exists() else []) + ([args.config] if args.config else [])
    _write_json(
        args.out.with_name(args.out.stem + "_manifest.json"),
        _manifest("train", args, inputs=inputs, train_config=cfg.to_dict(), checkpoint_sha256=file_sha256(args.out)),
    )
    last = state.history[-1] if state.history else None
    print(f"trained {state.epoch} epochs; final total loss {last['total']:.6g}" if last else "no epochs run")
    return EXIT_OK


def cmd_generate(args) -> int:
    if args.num <= 0:
        raise UsageError("--num must be positive")
    try:
        state = load_checkpoint(args.ckpt)
    except CheckpointError as e:
        raise DataError(str(e)) from None
    depth = args.max_depth if args.max_depth is not None else state.config.max_height
    try:
        res = sample_trees(state.model, state.norm, args.num, seed=args.seed, max_depth=depth)
    except GenerationError as e:
        raise NumericalError(str(e)) from None
    write_corpus(res.trees, args.out, prefix="gen")
    _write_json(
        args.out / MANIFEST,
        _manifest(
            "generate",
            args,
            inputs=[args.ckpt],
            checkpoint_sha256=file_sha256(args.ckpt),
            rejected=res.n_rejected,
            rejection_reasons=res.reasons,
        ),
    )
    print(f"wrote {len(res.trees)} trees to {args.out} ({res.n_rejected} rejected draws)")
    return EXIT_OK


def cmd_mesh(args) -> int:
    if args.resolution < 2:
        raise UsageError("--resolution must be >= 2")
    try:
        tree = read_tree(args.tree)
        mesh, grid = tree_to_mesh(tree, resolution=args.resolution)
    except TreeError as e:
        raise DataError(f"{args.tree.name}: {e}") from None
    args.out.parent.mkdir(parents=True, exist_ok=True)
    export_mesh(mesh, args.out)
    if args.grid_dump:
        write_grid(grid, args.grid_dump)
    _write_json(
        args.out.with_name(args.out.name + ".manifest.json"),
        _manifest("mesh", args, inputs=[args.tree], vertices=mesh.n_vertices, faces=mesh.n_faces, voxel_size=grid.voxel_size),
    )
    print(f"mesh: {mesh.n_vertices} vertices, {mesh.n_faces} faces, watertight={mesh.is_watertight()}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    real_files, real = _load_corpus(args.real)
    gen_files, gen = _load_corpus(args.gen)
    try:
        rep = evaluate_sets(real, gen)
    except TreeError as e:
        raise DataError(str(e)) from None
    rep.write(args.out)
    _write_json(args.out / MANIFEST, _manifest("evaluate", args, inputs=real_files + gen_files))
    for k, v in rep.scalars().items():
        print(f"{k}: {v:.6g}")
    if rep.has_nan:
        raise NumericalError("one or more metrics are NaN")
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="treevae", description="Recursive VAE for binary vessel trees.")
    p.add_argument("--version", action="version", version=f"treevae {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    s = sub.add_parser("synth-data", help="write a procedural tree corpus")
    s.add_argument("--num", type=int, required=True, help="number of trees")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-height", type=int, default=5, help="tree height cap")
    s.add_argument("--out", type=Path, required=True, help="output directory")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("preprocess", help="binarize, rebalance, trim and resample a corpus")
    s.add_argument("--input", type=Path, required=True, help="directory of .tree or .swc files")
    s.add_argument("--epsilon", type=float, default=0.2, help="RDP tolerance in input units")
    s.add_argument("--max-height", type=int, default=10, help="trim trees to this height")
    s.add_argument("--out", type=Path, required=True, help="output directory")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train a model on a preprocessed corpus")
    s.add_argument("--config", type=Path, help="INI file with a [train] section")
    s.add_argument("--corpus", type=Path, required=True, help="preprocessed corpus directory")
    s.add_argument("--out", type=Path, required=True, help="checkpoint file to write")
    s.add_argument("--profile", choices=("default", "desk"), default="default", help="base hyperparameter preset")
    s.add_argument("--epochs", type=int, help="override the number of epochs")
    s.add_argument("--seed", type=int, help="override the run seed")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", help="sample trees from a trained model")
    s.add_argument("--ckpt", type=Path, required=True, help="checkpoint file")
    s.add_argument("--num", type=int, required=True, help="number of trees")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-depth", type=int, help="depth cap (default: training max height)")
    s.add_argument("--out", type=Path, required=True, help="output directory")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("mesh", help="convert one tree into an OBJ surface mesh")
    s.add_argument("--tree", type=Path, required=True, help="tree file")
    s.add_argument("--resolution", type=int, default=128, help="voxels along the longest bounding-box edge")
    s.add_argument("--out", type=Path, required=True, help="OBJ file to write")
    s.add_argument("--grid-dump", type=Path, help="also dump the sampled field here")
    s.set_defaults(func=cmd_mesh)

    s = sub.add_parser("evaluate", help="compare a generated corpus with a reference corpus")
    s.add_argument("--real", type=Path, required=True, help="reference corpus directory")
    s.add_argument("--gen", type=Path, required=True, help="generated corpus directory")
    s.add_argument("--out", type=Path, required=True, help="report directory")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"treevae {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, TreeError, CheckpointError, OSError) as e:
        print(f"treevae {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, NonFiniteError, FloatingPointError) as e:
        print(f"treevae {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
