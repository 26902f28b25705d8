"""
Command-line runner: train, eval, dump-plots, gen-data and inspect.

Exit codes: 0 ok, 1 runtime failure, 2 config or usage error.
"""
import argparse
import json
import os
import sys
import time
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from pydantic import ValidationError

from ren import autodiff as ad
from ren import metrics
from ren.checkpoint import MAGIC, load_checkpoint, model_echo, restore_model, save_checkpoint
from ren.config import OUTPUT_DIR
from ren.datasets import (NOISE_LEVELS, convert_npz_images, gen_toy, load_dataset, load_idx, load_points_csv,
                          save_points_csv)
from ren.logger import get_logger
from ren.models import IMAGE_SHAPES, TOY_FAMILIES, ExperimentConfig, MetricRecord, RunManifest, ToySpec
from ren.networks import RenModel, build_model
from ren.trainer import build_optimizers, default_config, train
from ren.utils import (CheckpointError, ConfigError, RenError, ShapeError, content_hash, file_hash, ren_error,
                       rng_stream)

logger = get_logger()

CHECKPOINT_NAME = "model.ckpt"
TRAIN_LOG_NAME = "train_log.jsonl"
MANIFEST_NAME = "manifest.json"
RESULTS_NAME = "results.jsonl"
PANEL_IMAGES = 16


# config files

def _literal(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip("\"'")


def parse_key_values(text: str, source: str = "<config>") -> Dict[str, Any]:
    """Dotted `section.key = value` lines into a nested dict; values are JSON literals or bare strings."""
    nested: Dict[str, Any] = {}
    violations: List[str] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            violations.append(f"{source}:{lineno}: expected 'key = value', got {line!r}")
            continue
        key, raw = (part.strip() for part in line.split("=", 1))
        if not key:
            violations.append(f"{source}:{lineno}: empty key")
            continue
        node = nested
        *sections, leaf = key.split(".")
        for section in sections:
            node = node.setdefault(section, {})
            if not isinstance(node, dict):
                violations.append(f"{source}:{lineno}: {section} is both a value and a section")
                break
        else:
            node[leaf] = _literal(raw)
    if violations:
        raise ren_error(ConfigError, f"{len(violations)} problem(s) in {source}", violations=violations)
    return nested


def load_config_file(path: str) -> Dict[str, Any]:
    if not os.path.exists(path):
        raise ren_error(ConfigError, f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    if path.endswith(".json"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ren_error(ConfigError, f"{path}: invalid JSON: {exc}") from None
    return parse_key_values(text, path)


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def validate_experiment(raw: Dict[str, Any], source: str = "<config>") -> ExperimentConfig:
    """Fill family defaults under the user's values, then validate everything in one pass."""
    family = (raw.get("dataset") or {}).get("name")
    user_train = raw.get("train") or {}
    defaults: Dict[str, Any] = {}
    if family in TOY_FAMILIES or family in IMAGE_SHAPES:
        train_defaults = default_config(family).model_dump(exclude_none=True)
        if "epochs" in user_train and "burnin" not in user_train and isinstance(user_train["epochs"], int):
            train_defaults["burnin"] = max(1, user_train["epochs"] // 10)
        defaults = {"train": train_defaults, "output_dir": os.path.join(OUTPUT_DIR, family)}
    try:
        return ExperimentConfig(**_merge(defaults, raw))
    except ValidationError as exc:
        violations = [f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in exc.errors()]
        raise ren_error(ConfigError, f"{len(violations)} violation(s) in {source}", violations=violations) from None


def load_experiment(path: str, seed: Optional[int] = None) -> ExperimentConfig:
    raw = load_config_file(path)
    if seed is not None:
        raw.setdefault("train", {})["seed"] = seed
    return validate_experiment(raw, path)


def _config_hash(config: Dict[str, Any]) -> str:
    return content_hash(json.dumps(config, sort_keys=True, default=str).encode("utf-8"))


# data helpers

def _load_test_set(exp: ExperimentConfig, dataset: Optional[str], seed: int) -> np.ndarray:
    if dataset is None:
        return load_dataset(exp.dataset, seed)[1]
    if exp.dataset.is_toy:
        return load_points_csv(dataset)
    return load_idx(dataset, split="test").images


def _checked_model(checkpoint_path: str, dataset: Optional[str], seed: Optional[int]):
    checkpoint = load_checkpoint(checkpoint_path)
    model = restore_model(checkpoint)
    if "experiment" not in checkpoint.config:
        raise ren_error(CheckpointError, f"{checkpoint_path}: config echo has no experiment section")
    exp = validate_experiment(checkpoint.config["experiment"], checkpoint_path)
    seed = exp.seed if seed is None else seed
    X = _load_test_set(exp, dataset, seed)
    if X.ndim != 2 or X.shape[1] != model.data_dim:
        raise ren_error(ShapeError, f"checkpoint expects D={model.data_dim}, dataset has shape {X.shape}",
                        shapes=((model.data_dim,), X.shape))
    return checkpoint, model, exp, X, seed


# commands

def cmd_train(config_path: str, seed: Optional[int] = None, out: Optional[str] = None) -> int:
    exp = load_experiment(config_path, seed)
    out_dir = out or exp.output_dir
    os.makedirs(out_dir, exist_ok=True)
    started = time.perf_counter()

    X_train, _ = load_dataset(exp.dataset, exp.seed)
    model = build_model(exp.dataset.name, exp.model, exp.seed)
    optimizers = build_optimizers(model, exp.train)
    log = train(model, X_train, exp.train, optimizers, log_path=os.path.join(out_dir, TRAIN_LOG_NAME))

    experiment = exp.model_dump(mode="json")
    checkpoint_path = save_checkpoint(os.path.join(out_dir, CHECKPOINT_NAME), model,
                                      model_echo(model, exp.seed, {"experiment": experiment}), optimizers)
    manifest = RunManifest(
        config=experiment,
        config_hash=_config_hash(experiment),
        seed=exp.seed,
        wall_seconds=time.perf_counter() - started,
        checkpoint=checkpoint_path,
        checkpoint_hash=file_hash(checkpoint_path),
        epochs_completed=len(log),
    )
    with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="utf-8") as f:
        f.write(manifest.model_dump_json(indent=2))
    logger.info(f"Run complete: {out_dir} (checkpoint {manifest.checkpoint_hash[:12]}, "
                f"{manifest.wall_seconds:.1f}s)")
    return 0


def cmd_eval(checkpoint_path: str, dataset: Optional[str] = None, out: Optional[str] = None,
             seed: Optional[int] = None, n_generate: Optional[int] = None, empirical_variance: bool = False,
             unbiased: Optional[bool] = None) -> int:
    checkpoint, model, exp, X, seed = _checked_model(checkpoint_path, dataset, seed)
    out_dir = out or os.path.dirname(os.path.abspath(checkpoint_path))
    os.makedirs(out_dir, exist_ok=True)
    config_hash = _config_hash(checkpoint.config["experiment"])
    n_generate = exp.eval.n_generate if n_generate is None else n_generate
    empirical_variance = empirical_variance or exp.eval.empirical_variance
    unbiased = exp.eval.unbiased_energy if unbiased is None else unbiased

    records: List[MetricRecord] = []

    def emit(metric: str, value):
        records.append(MetricRecord(metric=metric, value=value, config_hash=config_hash, seed=seed))
        logger.info(f"{metric}: {value}")

    if "mse" in exp.eval.metrics:
        emit("mse", metrics.recon_mse(model, X))
    if "relevance" in exp.eval.metrics:
        variances = metrics.empirical_latent_variances(model, X) if empirical_variance else None
        report = metrics.relevance_report(model.current_alpha, variances)
        emit("l_star", report.l_star)
        emit("relevance_report", report.model_dump())
    if "energy_distance" in exp.eval.metrics:
        if n_generate < 2:
            logger.warning(f"Skipping energy_distance: n_generate={n_generate} is below 2")
        else:
            generated = metrics.generate(model, n_generate, rng_stream(seed, "generate"))
            emit("energy_distance", metrics.energy_distance(X, generated, unbiased=unbiased))

    results_path = os.path.join(out_dir, RESULTS_NAME)
    with open(results_path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(record.model_dump_json() + "\n")
    print(f"Wrote {len(records)} records to {results_path}")
    return 0


def _pixel_panel(path: str, images: np.ndarray, height: int, width: int) -> str:
    rows = []
    for i, image in enumerate(images[:PANEL_IMAGES]):
        for r, line in enumerate(image.reshape(height, width)):
            rows.append([i, r, *line])
    pd.DataFrame(rows, columns=["image", "row", *[f"c{c}" for c in range(width)]]).to_csv(path, index=False)
    return path


def _column_names(model: RenModel, prefix: str = "x") -> List[str]:
    if model.data_dim == 2:
        return ["x", "y"]
    return [f"{prefix}_{i}" for i in range(model.data_dim)]


def cmd_dump_plots(checkpoint_path: str, dataset: Optional[str] = None, out: Optional[str] = None,
                   seed: Optional[int] = None, n_generate: Optional[int] = None) -> int:
    _, model, exp, X, seed = _checked_model(checkpoint_path, dataset, seed)
    out_dir = out or os.path.join(os.path.dirname(os.path.abspath(checkpoint_path)), "plots")
    os.makedirs(out_dir, exist_ok=True)
    n_generate = exp.eval.n_generate if n_generate is None else n_generate

    with ad.no_grad():
        mu_z = model.encode(X).mu.data
        recon = model.decode(mu_z)[0].data
    generated = metrics.generate(model, n_generate, rng_stream(seed, "generate"))
    report = metrics.relevance_report(model.current_alpha)
    columns = _column_names(model)

    written = []
    frame = pd.concat([pd.DataFrame(X, columns=columns),
                       pd.DataFrame(recon, columns=[f"recon_{c}" for c in columns])], axis=1)
    written.append(os.path.join(out_dir, "reconstructions.csv"))
    frame.to_csv(written[-1], index=False)

    written.append(os.path.join(out_dir, "latents.csv"))
    with open(written[-1], "w", encoding="utf-8", newline="") as f:
        f.write("# alpha: " + " ".join(f"{a:.17g}" for a in model.current_alpha) + "\n")
        pd.DataFrame(mu_z, columns=[f"z_{i}" for i in range(model.latent_dim)]).to_csv(f, index=False)

    written.append(os.path.join(out_dir, "generated.csv"))
    pd.DataFrame(generated, columns=columns).to_csv(written[-1], index=False)

    written.append(os.path.join(out_dir, "relevance.csv"))
    pd.DataFrame({
        "dim": report.order,
        "alpha": [report.alpha[i] for i in report.order],
        "variance": report.variances,
        "explained_ratio": report.explained_ratio,
    }).to_csv(written[-1], index=False)

    if model.family in IMAGE_SHAPES:
        height, width = IMAGE_SHAPES[model.family]
        for name, images in (("original", X), ("reconstructed", recon), ("generated", generated)):
            written.append(_pixel_panel(os.path.join(out_dir, f"{name}_pixels.csv"), images, height, width))

    for path in written:
        logger.info(f"Wrote {path}")
    print(f"Wrote {len(written)} files to {out_dir}")
    return 0


def cmd_gen_data(family: str, out: str, n: int = 4096, noise: float = 0.10, seed: int = 42,
                 allow_any_noise: bool = False, npz: Optional[str] = None, key: str = "imgs") -> int:
    if npz:
        convert_npz_images(npz, out, key)
        print(f"Wrote {out}")
        return 0
    if family not in TOY_FAMILIES:
        raise ren_error(ConfigError, f"gen-data makes toy sets ({', '.join(TOY_FAMILIES)}) or converts an --npz archive; "
                                     f"got {family}")
    if not allow_any_noise and noise not in NOISE_LEVELS:
        raise ren_error(ConfigError, f"--noise must be one of {NOISE_LEVELS} (pass --allow-any-noise to override)")
    try:
        spec = ToySpec(family=family, n=n, noise_frac=noise, seed=seed)
    except ValidationError as exc:
        raise ren_error(ConfigError, "invalid toy dataset request",
                        violations=[f"{err['loc'][0]}: {err['msg']}" for err in exc.errors()]) from None
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    save_points_csv(out, gen_toy(spec))
    print(f"Wrote {n} {family} points to {out}")
    return 0


def cmd_inspect(checkpoint_path: str) -> int:
    checkpoint = load_checkpoint(checkpoint_path)
    table = pd.DataFrame(
        [{"record": name, "shape": "x".join(str(e) for e in value.shape) or "scalar", "values": value.size}
         for name, value in checkpoint.arrays.items()]
    )
    print(f"{checkpoint_path}: {MAGIC.decode('ascii')}, {len(checkpoint.arrays)} records, "
          f"hash {file_hash(checkpoint_path)}")
    print(json.dumps(checkpoint.config, indent=2, sort_keys=True))
    print(table.to_string(index=False))
    print("alpha: " + " ".join(f"{a:.6g}" for a in checkpoint.alpha))
    return 0


# entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ren", description="Relevance encoding network experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one or more experiment configs")
    p.add_argument("--config", nargs="+", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)

    for name in ("eval", "dump-plots"):
        p = sub.add_parser(name)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--dataset", help="points CSV or IDX images replacing the configured test set")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--n-generate", type=int)
        if name == "eval":
            p.add_argument("--empirical-variance", action="store_true")
            p.add_argument("--unbiased-energy", action="store_true", default=None)

    p = sub.add_parser("gen-data", help="write a toy point set or convert an image archive to IDX")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=4096)
    p.add_argument("--noise", type=float, default=0.10)
    p.add_argument("--allow-any-noise", action="store_true")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--npz")
    p.add_argument("--npz-key", default="imgs")

    p = sub.add_parser("inspect", help="print a checkpoint's config echo, records and alpha")
    p.add_argument("--checkpoint", required=True)
    return parser


def _run_train(args) -> int:
    codes = []
    for config_path in args.config:
        out = args.out
        if out and len(args.config) > 1:
            out = os.path.join(out, os.path.splitext(os.path.basename(config_path))[0])
        codes.append(_guarded(lambda: cmd_train(config_path, args.seed, out)))
    return max(codes)


def _dispatch(args) -> int:
    if args.command == "eval":
        return cmd_eval(args.checkpoint, args.dataset, args.out, args.seed, args.n_generate,
                        args.empirical_variance, args.unbiased_energy)
    if args.command == "dump-plots":
        return cmd_dump_plots(args.checkpoint, args.dataset, args.out, args.seed, args.n_generate)
    if args.command == "gen-data":
        return cmd_gen_data(args.dataset, args.out, args.n, args.noise, args.seed, args.allow_any_noise,
                            args.npz, args.npz_key)
    return cmd_inspect(args.checkpoint)


def _guarded(command) -> int:
    try:
        return command()
    except ConfigError as exc:
        print(f"error: {exc.detail}", file=sys.stderr)
        for violation in exc.violations:
            print(f"  - {violation}", file=sys.stderr)
        return 2
    except RenError as exc:
        print(f"error: {exc.detail}", file=sys.stderr)
        return 1
    except Exception as exc:
        logger.error(f"Unexpected failure: {exc}", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "train":
        return _run_train(args)
    return _guarded(lambda: _dispatch(args))
