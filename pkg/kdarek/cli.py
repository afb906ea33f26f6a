"""Command line: cosine, bench, bound, safectrl and train."""

import argparse
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from kdarek import __version__
from kdarek.config import COMMAND_CONFIGS, config_hash, config_hash_of, get_runtime_config, load_config
from kdarek.errors import EXIT_CODES, ConfigError, DimensionMismatch, KdarekError, ModelFileError
from kdarek.serialization import SCHEMA, load_model, save_model, write_json

logger = logging.getLogger("kdarek.cli")


@dataclass
class RunManifest:
    command: str
    config_hash: str
    build_id: str
    seed: int = None
    timings: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)

    @contextmanager
    def phase(self, name):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = max(time.perf_counter() - start, 0.0)

    def write(self, output_dir):
        return write_json(os.path.join(output_dir, "manifest.json"), {"manifest": asdict(self)})


# ------------------------------ COMMANDS --------------------------------- #

def _overrides(args):
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key.path=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    return overrides


def cmd_cosine(cfg, output_dir, jobs, manifest):
    from evaluator.cosine_evaluator import evaluate_cosine

    with manifest.phase("run"):
        _, files = evaluate_cosine(cfg, output_dir, jobs)
    return files


def cmd_bench(cfg, output_dir, jobs, manifest):
    from evaluator.timing_evaluator import evaluate_timing

    with manifest.phase("run"):
        _, files = evaluate_timing(cfg, output_dir)
    return files


def cmd_safectrl(cfg, output_dir, jobs, manifest):
    from evaluator.safety_evaluator import evaluate_safety

    with manifest.phase("run"):
        _, files = evaluate_safety(cfg, output_dir, jobs)
    return files


def _load_dataset(cfg):
    if cfg.dataset == "cosine":
        from evaluator.cosine_evaluator import cosine_dataset

        X, Y, _, _ = cosine_dataset(cfg.data, cfg.seed)
        return X, Y
    if not cfg.csv_path:
        raise ConfigError("dataset 'csv' needs csv_path")
    try:
        table = np.loadtxt(cfg.csv_path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as e:
        raise ConfigError(f"Cannot read dataset {cfg.csv_path}: {e}") from e
    return table[:, :cfg.input_columns], table[:, cfg.input_columns:]


def cmd_train(cfg, output_dir, jobs, manifest):
    from kdarek.bounds import fit_kdarek

    X, Y = _load_dataset(cfg)
    with manifest.phase("train"):
        estimator, result = fit_kdarek(X, Y, cfg.kdarek, cfg.train.model_copy(update={"seed": cfg.seed}))
    print(f"[K-DAREK] Loss={result.loss_history[-1]:.4f} | Knots={estimator.triple.n_knots}")
    return [save_model(os.path.join(output_dir, cfg.model_file), estimator)]


def _parse_point(text):
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError as e:
        raise ConfigError(f"--x expects comma-separated numbers, got {text!r}") from e


def cmd_bound(args, output_dir, manifest):
    """Print the bound decomposition at each --x point as JSON and keep a copy in bound.json."""
    if not args.model:
        raise ConfigError("bound needs --model PATH")
    if not args.x:
        raise ConfigError("bound needs at least one --x value")
    with manifest.phase("load_model"):
        estimator = load_model(args.model)
    if not hasattr(estimator, "bound"):
        raise ModelFileError(f"{args.model} holds a model without a worst-case bound")
    bounds = []
    for text in args.x:
        point = _parse_point(text)
        try:
            bound = estimator.bound(point)
        except DimensionMismatch as e:
            raise ConfigError(f"--x {text!r}: {e}") from e
        bounds.append({"x": point.tolist(), **bound.as_dict()})
    document = {"schema": SCHEMA, "model": args.model, "bounds": bounds}
    print(json.dumps(document, indent=4))
    return [write_json(os.path.join(output_dir, "bound.json"), {"model": args.model, "bounds": bounds})]


COMMANDS = {
    "cosine": cmd_cosine,
    "bench": cmd_bench,
    "safectrl": cmd_safectrl,
    "train": cmd_train,
}


# ------------------------------- PARSER ---------------------------------- #

def build_parser():
    parser = argparse.ArgumentParser(prog="kdarek", description="Distance-aware error bounds experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("cosine", "bench", "safectrl", "train", "bound"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, required=(name == "safectrl"), help="Experiment seed")
        p.add_argument("--out", help="Output directory (default: $KDAREK_OUTPUT_DIR or outputs)")
        p.add_argument("--jobs", type=int, help="Worker processes (default: $KDAREK_JOBS or 1)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override a config field")
        if name == "bound":
            p.add_argument("--model", help="Serialized model file")
            p.add_argument("--x", action="append", help="Query point; comma-separated for d > 1")
    return parser


def run(args, runtime):
    output_dir = args.out or runtime["output_dir"]
    jobs = args.jobs if args.jobs is not None else runtime["jobs"]
    if jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {jobs}")

    if args.command == "bound":
        manifest = RunManifest(command="bound", config_hash=config_hash_of({"model": args.model, "x": args.x}),
                               build_id=runtime["build_id"] or f"kdarek-{__version__}")
        manifest.outputs = cmd_bound(args, output_dir, manifest)
        manifest.outputs.append(os.path.join(output_dir, "manifest.json"))
        manifest.write(output_dir)
        return manifest

    started = time.perf_counter()
    cfg = load_config(args.config, COMMAND_CONFIGS[args.command], _overrides(args))
    manifest = RunManifest(command=args.command, config_hash=config_hash(cfg),
                           build_id=runtime["build_id"] or f"kdarek-{__version__}", seed=cfg.seed)
    manifest.timings["load_config"] = time.perf_counter() - started

    manifest.outputs = COMMANDS[args.command](cfg, output_dir, jobs, manifest)
    manifest.outputs.append(os.path.join(output_dir, "manifest.json"))
    manifest.write(output_dir)
    return manifest


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        runtime = get_runtime_config()
    except ValueError as e:
        logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
        logger.error(f"Invalid runtime configuration: {str(e)}")
        return EXIT_CODES["config"]

    logging.basicConfig(
        level=getattr(logging, runtime["log_level"]),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    try:
        run(args, runtime)
    except KdarekError as e:
        logger.error(f"{args.command} failed ({e.category}): {str(e)}")
        return EXIT_CODES[e.category]
    except Exception as e:
        logger.exception(f"Unexpected error in {args.command}: {str(e)}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
