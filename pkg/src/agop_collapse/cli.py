"""``agop-collapse`` command-line interface.

Subcommands::

    agop-collapse deeprfm --config run.json --out DIR
    agop-collapse theory {contraction,kernel-opt,fixed-point} [options] --out DIR
    agop-collapse nn --config run.json --out DIR
    agop-collapse heatmap --in gram.csv --out gram.pgm

Exit codes: 0 on success, 1 for configuration or input errors, 2 for
numerical or runtime failures. Every command writes ``run.json``, which can
be passed back as ``--config`` (deeprfm, nn) to reproduce the run.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .data import DataError, gen_gaussian_classes, load_idx, encode_labels
from .deeprfm import STAGES, DeepRfmConfig, final_stage_gram, layer_seed, run, save_pipeline
from .features import FEATURE_KINDS, FeatureMapSpec
from .kernels import KERNEL_KINDS, KernelSpec
from .mlp import layer_reports, mlp_init, sgd_train
from .parallel import resolve_threads, set_threads
from .theory import (
    KAPPA_RULES,
    TheoryConfig,
    TheoryError,
    contraction_run,
    fixed_point_inverse,
    geometric_until_plateau,
    search_kernel_opt,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


class ConfigError(ValueError):
    pass


# -- schemas and defaults ---------------------------------------------------

_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG = {"type": "number", "minimum": 0}
_POS = {"type": "number", "exclusiveMinimum": 0}
_SEED = {"type": "integer", "minimum": 0}
_RUN_INFO = {"type": "object"}  # informational block written to run.json

_DATA_SCHEMA = {
    "oneOf": [
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["source"],
            "properties": {
                "source": {"const": "synthetic"},
                "K": {"type": "integer", "minimum": 2},
                "n": _POS_INT,
                "d": _POS_INT,
                "separation": _POS,
                "noise": _NONNEG,
                "seed": _SEED,
            },
        },
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["source", "images", "labels"],
            "properties": {
                "source": {"const": "idx"},
                "images": {"type": "string"},
                "labels": {"type": "string"},
                "limit": {"type": ["integer", "null"], "minimum": 1},
            },
        },
    ]
}

DEEPRFM_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "data": _DATA_SCHEMA,
        "depth": _POS_INT,
        "kernel": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"kind": {"enum": list(KERNEL_KINDS)}, "bandwidth": _POS},
        },
        "feature_map": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"kind": {"enum": list(FEATURE_KINDS)}, "width": _POS_INT, "bandwidth": _POS},
        },
        "ridge": _NONNEG,
        "label_encoding": {"enum": ["pm-one", "zero-one"]},
        "mean_mode": {"enum": ["class", "sample"]},
        "master_seed": _SEED,
        "gram_layers": {"type": "array", "items": _POS_INT, "uniqueItems": True},
        "out": {"type": "string"},
        "run": _RUN_INFO,
    },
}

NN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "data": _DATA_SCHEMA,
        "hidden_widths": {"type": "array", "items": _POS_INT, "minItems": 1},
        "init_scale": _NONNEG,
        "lr": _NONNEG,
        "epochs": {"type": "integer", "minimum": 0},
        "batch_size": _POS_INT,
        "measure_every": _POS_INT,
        "label_encoding": {"enum": ["pm-one", "zero-one"]},
        "master_seed": _SEED,
        "out": {"type": "string"},
        "run": _RUN_INFO,
    },
}

_SYNTHETIC_DEFAULTS = {"source": "synthetic", "separation": 1.0, "noise": 0.05, "seed": 0}

DEEPRFM_DEFAULTS = {
    "data": {**_SYNTHETIC_DEFAULTS, "K": 10, "n": 50, "d": 784},
    "depth": 20,
    "kernel": {"kind": "laplace", "bandwidth": 2.0},
    "feature_map": {"kind": "relu", "width": 1024, "bandwidth": 0.05},
    "ridge": 0.0,
    "label_encoding": "pm-one",
    "mean_mode": "class",
    "master_seed": 0,
    "gram_layers": [1, 3, 7, 13, 19],
}

NN_DEFAULTS = {
    "data": {**_SYNTHETIC_DEFAULTS, "K": 4, "n": 32, "d": 64},
    "hidden_widths": [64, 64, 64, 64],
    "init_scale": 0.3,
    "lr": 0.5,
    "epochs": 500,
    "batch_size": 32,
    "measure_every": 50,
    "label_encoding": "pm-one",
    "master_seed": 0,
}


def _merge(defaults: dict, cfg: dict) -> dict:
    out = copy.deepcopy(defaults)
    for key, val in cfg.items():
        if key == "data" and val.get("source", "synthetic") != out["data"]["source"]:
            out[key] = copy.deepcopy(val)
        elif isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = {**out[key], **val}
        else:
            out[key] = copy.deepcopy(val)
    return out


def _error_path(err: jsonschema.ValidationError) -> str:
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        where = ".".join(str(p) for p in err.absolute_path)
        keys = ", ".join(repr(k) for k in extra)
        return f"unknown key {keys}" + (f" in {where!r}" if where else "")
    where = ".".join(str(p) for p in err.absolute_path) or "<root>"
    return f"{where!r}: {err.message}"


def _best_error(schema: dict, cfg: dict) -> jsonschema.ValidationError | None:
    validator = jsonschema.Draft202012Validator(schema)
    errors = list(validator.iter_errors(cfg))
    if not errors:
        return None
    err = jsonschema.exceptions.best_match(errors)
    # oneOf hides the useful message one level down
    if err.context:
        err = jsonschema.exceptions.best_match(err.context)
    return err


def load_config(path, schema: dict, defaults: dict) -> dict:
    """Read a JSON config, validate it and fill in defaults."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    err = _best_error(schema, raw)
    if err is not None:
        raise ConfigError(f"{path}: {_error_path(err)}")
    cfg = _merge(defaults, raw)
    cfg.pop("run", None)
    return cfg


# -- output helpers ---------------------------------------------------------


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path: Path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    lines += [",".join(v if isinstance(v, str) else fmt(v) for v in row) for row in rows]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_csv_matrix(path: Path, G: np.ndarray) -> None:
    with open(path, "w", newline="\n") as fh:
        for row in G:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def write_json(path: Path, obj) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def gram_to_pixels(G: np.ndarray) -> np.ndarray:
    return np.rint(255.0 * (np.clip(G, -1.0, 1.0) + 1.0) / 2.0).astype(np.uint8)


def write_pgm(path: Path, G: np.ndarray) -> None:
    """Binary P5 greyscale image, -1 black and +1 white."""
    G = np.asarray(G, dtype=float)
    if G.ndim != 2:
        raise ValueError("heatmap input must be a matrix")
    h, w = G.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gram_to_pixels(G).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit P5 image")
    w, h = int(parts[1]), int(parts[2])
    pix = np.frombuffer(parts[4], dtype=np.uint8)
    if pix.size != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, found {pix.size}")
    return pix.reshape(h, w)


def read_gram_csv(path) -> np.ndarray:
    try:
        G = np.loadtxt(path, delimiter=",", ndmin=2, dtype=float)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read Gram matrix from {path}: {exc}") from None
    if G.shape[0] != G.shape[1]:
        raise ConfigError(f"Gram matrix must be square, got {G.shape[0]}x{G.shape[1]}")
    if not np.all(np.isfinite(G)):
        raise ConfigError("Gram matrix has non-finite entries")
    if np.abs(G).max() > 1.0 + 1e-6:
        raise ConfigError(f"Gram entries must lie in [-1, 1]; found {np.abs(G).max():.6g}")
    return G


def _out_dir(args, cfg: dict | None = None) -> Path:
    out = args.out or (cfg or {}).get("out")
    if not out:
        raise ConfigError("no output directory (use --out)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dataset(spec: dict):
    if spec["source"] == "synthetic":
        return gen_gaussian_classes(
            spec["K"], spec["n"], spec["d"], spec["separation"], spec["noise"], spec["seed"]
        )
    return load_idx(spec["images"], spec["labels"], spec.get("limit"))


def _derived_seed(master: int, stream: int) -> int:
    return int(np.random.SeedSequence([master, stream]).generate_state(1, dtype=np.uint32)[0])


# -- commands ---------------------------------------------------------------


def cmd_deeprfm(args) -> int:
    cfg = load_config(args.config, DEEPRFM_SCHEMA, DEEPRFM_DEFAULTS)
    out = _out_dir(args, cfg)
    bad = [l for l in cfg["gram_layers"] if l > cfg["depth"]]
    if bad:
        raise ConfigError(f"'gram_layers': layer {bad[0]} exceeds depth {cfg['depth']}")
    conf = DeepRfmConfig(
        depth=cfg["depth"],
        kernel=KernelSpec(**cfg["kernel"]),
        feature_map=FeatureMapSpec(**cfg["feature_map"]),
        ridge=cfg["ridge"],
        label_encoding=cfg["label_encoding"],
        master_seed=cfg["master_seed"],
        mean_mode=cfg["mean_mode"],
    )
    ds = _dataset(cfg["data"])
    grams = set(cfg["gram_layers"])
    rows = []

    def on_layer(art):
        for stage in STAGES:
            m = art.metrics[stage]
            rows.append((art.layer_index, stage, m.nc1, m.nc2_etf, m.nc2_orth, m.gram_residual))
        if art.layer_index in grams:
            G = final_stage_gram(art, ds.labels, ds.K, conf.mean_mode)
            write_pgm(out / f"gram_layer{art.layer_index}.pgm", G)
            write_csv_matrix(out / f"gram_layer{art.layer_index}.csv", G)
        print(f"layer {art.layer_index}: nc1(agop) = {art.metrics['agop'].nc1:.4g}", file=sys.stderr)

    pipe = run(ds, conf, retain=grams, threads=None, on_layer=on_layer)
    write_csv(out / "metrics.csv", ["layer", "stage", "nc1", "nc2_etf", "nc2_orth", "gram_residual"], rows)
    save_pipeline(pipe, out / "pipeline")
    cfg["run"] = {
        "command": "deeprfm",
        "version": __version__,
        "layer_seeds": [layer_seed(conf.master_seed, l) for l in range(1, conf.depth + 1)],
    }
    write_json(out / "run.json", cfg)
    return EXIT_OK


def _theory_config(args) -> TheoryConfig:
    try:
        return TheoryConfig(
            lhat=args.lhat,
            lmap=args.lmap,
            n=args.n,
            K=args.k,
            depth=args.depth,
            eps=args.eps,
            lambda_phi=args.lambda_phi,
            seed=args.seed,
            kappa_rule=args.kappa,
        )
    except TheoryError as exc:
        raise ConfigError(str(exc)) from None


def cmd_theory(args) -> int:
    out = _out_dir(args)
    if args.n < 1 or args.k < 2:
        raise ConfigError("need n >= 1 and K >= 2")
    info = {k: v for k, v in vars(args).items() if k not in ("func", "out", "threads")}
    if args.mode == "contraction":
        cfg = _theory_config(args)
        tr = contraction_run(cfg)
        geometric = geometric_until_plateau(tr.residuals)
        rows = [
            (l + 1, r, rf, tr.ratios[l - 1] if l else "")
            for l, (r, rf) in enumerate(zip(tr.residuals, tr.residuals_fro))
        ]
        write_csv(out / "residuals.csv", ["layer", "residual_spectral", "residual_frobenius", "ratio"], rows)
        ok = tr.passed and geometric
        line = (
            f"{'PASS' if ok else 'FAIL'} plateau={fmt(tr.plateau)} c_fit={fmt(tr.c_fit)} "
            f"kappa={fmt(tr.kappa)} condition={'met' if tr.condition else 'violated'}"
        )
        info["result"] = {
            "passed": ok,
            "contraction_bound": tr.passed,
            "geometric": geometric,
            "plateau": tr.plateau,
            "c_fit": tr.c_fit,
            "kappa": tr.kappa,
            "condition": tr.condition,
        }
    elif args.mode == "kernel-opt":
        if not args.mu > 0 or args.trials < 1:
            raise ConfigError("need mu > 0 and trials >= 1")
        res = search_kernel_opt(args.k, args.n, args.mu, args.trials, args.seed, not args.exclude_optimum)
        line = f"best_gain={fmt(res.best_gain)} closed_form={fmt(res.closed_form)} gap={fmt(res.gap)}"
        write_csv_matrix(out / "best_kernel.csv", res.best_k)
        info["result"] = {
            "best_gain": res.best_gain,
            "closed_form": res.closed_form,
            "gap": res.gap,
            "candidates": res.n_candidates,
        }
    else:
        if not args.lmap > 0:
            raise ConfigError("lmap must be positive")
        A, inv = fixed_point_inverse(args.n, args.k, args.lmap)
        err = float(np.linalg.norm(A @ inv - np.eye(A.shape[0])))
        line = f"max_inverse_error={fmt(err)}"
        info["result"] = {"inverse_error": err}
    with open(out / "result.txt", "w", newline="\n") as fh:
        fh.write(line + "\n")
    print(line)
    info["command"] = "theory"
    write_json(out / "run.json", info)
    return EXIT_OK


NN_COLUMNS = ["epoch", "layer", "nc1_input", "nc1_svt", "nc1_full", "nc1_phi", "nfa_rho", "train_loss"]


def cmd_nn(args) -> int:
    cfg = load_config(args.config, NN_SCHEMA, NN_DEFAULTS)
    out = _out_dir(args, cfg)
    ds = _dataset(cfg["data"])
    Y = encode_labels(ds, cfg["label_encoding"]).Y
    widths = [ds.d] + list(cfg["hidden_widths"]) + [ds.K]
    init_seed = _derived_seed(cfg["master_seed"], 0)
    sgd_seed = _derived_seed(cfg["master_seed"], 1)
    model = mlp_init(widths, cfg["init_scale"], init_seed)
    every, last = cfg["measure_every"], cfg["epochs"]
    rows = []

    def measure(epoch, model, loss):
        if epoch % every and epoch != last:
            return
        for r in layer_reports(model, ds.X, ds.labels, ds.K):
            rows.append((epoch, r.layer_index, r.nc1_input, r.nc1_svt, r.nc1_full, r.nc1_phi, r.nfa_rho, loss))

    sgd_train(model, ds.X, Y, cfg["lr"], cfg["epochs"], cfg["batch_size"], sgd_seed, callback=measure)
    write_csv(out / "nn_metrics.csv", NN_COLUMNS, rows)
    cfg["run"] = {"command": "nn", "version": __version__, "init_seed": init_seed, "sgd_seed": sgd_seed}
    write_json(out / "run.json", cfg)
    return EXIT_OK


def cmd_heatmap(args) -> int:
    G = read_gram_csv(args.input)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True)
    write_pgm(out, G)
    return EXIT_OK


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="agop-collapse", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--out", required=out_required, help="output path")
        sp.add_argument(
            "--threads", type=int, default=None, help="worker threads (env AGOP_COLLAPSE_THREADS wins)"
        )

    sp = sub.add_parser("deeprfm", help="train a Deep RFM and record collapse per layer")
    sp.add_argument("--config", required=True)
    common(sp, out_required=False)
    sp.set_defaults(func=cmd_deeprfm)

    sp = sub.add_parser("theory", help="numerical checks of the collapse theory")
    sp.add_argument("mode", choices=["contraction", "kernel-opt", "fixed-point"])
    sp.add_argument("--lhat", type=float, default=1e-3)
    sp.add_argument("--lmap", type=float, default=1.0)
    sp.add_argument("--n", type=int, default=20)
    sp.add_argument("--k", type=int, default=4)
    sp.add_argument("--depth", type=int, default=15)
    sp.add_argument("--eps", type=float, default=0.1)
    sp.add_argument("--lambda-phi", type=float, default=0.05)
    sp.add_argument("--kappa", choices=KAPPA_RULES, default="fixed-point")
    sp.add_argument("--mu", type=float, default=1.0)
    sp.add_argument("--trials", type=int, default=1000)
    sp.add_argument("--exclude-optimum", action="store_true", help="kernel-opt: leave k* out of the search")
    sp.add_argument("--seed", type=int, default=0)
    common(sp)
    sp.set_defaults(func=cmd_theory)

    sp = sub.add_parser("nn", help="train the MLP and record SVD-stage NC1 and NFA")
    sp.add_argument("--config", required=True)
    common(sp, out_required=False)
    sp.set_defaults(func=cmd_nn)

    sp = sub.add_parser("heatmap", help="render a Gram matrix CSV as a PGM image")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_heatmap)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; usage errors are configuration errors here
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        set_threads(resolve_threads(getattr(args, "threads", None)))
    except ValueError as exc:
        print(f"error: bad thread count: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        # TheoryError, LinalgError, CollapseError and TrainingDiverged land here
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC

if __name__ == "__main__":
    sys.exit(main())
