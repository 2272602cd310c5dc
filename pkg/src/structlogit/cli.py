"""Command line front end: dataset generation, training, error matrices,
and prediction images.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines
(``#`` comments); explicit flags override file values.  Exit codes:
0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import json
import os
import sys

from numpy.random import SeedSequence

from .data import GenConfig, gen_denoising, load_dataset, save_dataset, \
    write_label_image
from .oracle import KINDS
from .trainer import TrainConfig, load_model, predict, save_model, train, \
    univariate_error

# Display labels in canonical kind order (zero, const, linear, boost, mlp).
KIND_LABELS = {"zero": "Zero", "const": "Const.", "linear": "Linear",
               "boost": "Boost.", "mlp": "MLP"}

_REQUIRED = object()


class UsageError(Exception):
    """Bad invocation (missing/invalid options); exits with code 2."""


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


# name -> (converter, default, help); _REQUIRED marks mandatory options.
_GEN_OPTS = {
    "out": (str, _REQUIRED, "output directory"),
    "train": (int, 16, "number of training images"),
    "test": (int, 16, "number of test images"),
    "size": (int, 100, "image width and height"),
    "blur": (float, 10.0, "Gaussian blur width used by the generator"),
    "seed": (int, 0, "base RNG seed"),
}

_TRAIN_OPTS = {
    "train_data": (str, _REQUIRED, "training dataset file"),
    "test_data": (str, None, "test dataset file (optional)"),
    "out": (str, _REQUIRED, "output directory"),
    "unary": (str, "linear", "unary score kind: " + ", ".join(KINDS)),
    "pairwise": (str, "linear", "pairwise score kind: " + ", ".join(KINDS)),
    "iters": (int, 20, "outer training iterations"),
    "mp_iters": (int, 25, "message-passing sweeps per half-iteration"),
    "eps": (float, 0.1, "smoothing strength"),
    "seed": (int, 0, "base RNG seed"),
}

_MATRIX_OPTS = {
    "train_data": (str, _REQUIRED, "training dataset file"),
    "test_data": (str, _REQUIRED, "test dataset file"),
    "out": (str, _REQUIRED, "output directory"),
    "iters": (int, 20, "outer training iterations per cell"),
    "mp_iters": (int, 25, "message-passing sweeps per half-iteration"),
    "eps": (float, 0.1, "smoothing strength"),
    "seed": (int, 0, "base RNG seed (cells derive their own)"),
    "parallel": (_bool, False, "train matrix cells in parallel threads"),
}

_PREDICT_OPTS = {
    "model": (str, _REQUIRED, "trained model file"),
    "data": (str, _REQUIRED, "dataset file to label"),
    "out": (str, _REQUIRED, "output directory for label images"),
    "mp_iters": (int, 200, "message-passing sweep budget"),
}

_SPECS = {"gen": _GEN_OPTS, "train": _TRAIN_OPTS, "matrix": _MATRIX_OPTS,
          "predict": _PREDICT_OPTS}


def _read_config_file(path: str) -> dict:
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    values = {}
    with open(path) as fh:
        for n, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}: line {n}: expected `key = value`")
            key, val = line.split("=", 1)
            key = key.strip().replace("-", "_")
            val = val.strip()
            if not key or not val:
                raise UsageError(f"{path}: line {n}: expected `key = value`")
            if key in values:
                raise UsageError(f"{path}: line {n}: duplicate key {key!r}")
            values[key] = val
    return values


def _merge_config(args: argparse.Namespace, specs: dict) -> None:
    """Fill unset flags from the config file, then hard defaults."""
    file_vals = _read_config_file(args.config) if args.config else {}
    unknown = sorted(set(file_vals) - set(specs))
    if unknown:
        raise UsageError(
            f"unknown config keys: {', '.join(unknown)} "
            f"(valid: {', '.join(sorted(specs))})")
    for name, (conv, default, _) in specs.items():
        if getattr(args, name) is not None:
            continue
        if name in file_vals:
            try:
                setattr(args, name, conv(file_vals[name]))
            except ValueError:
                raise UsageError(
                    f"bad value for {name}: {file_vals[name]!r}") from None
        else:
            setattr(args, name, default)
    missing = [n for n in specs if getattr(args, n) is _REQUIRED]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"missing required option(s): {flags}")


def _effective(args: argparse.Namespace, specs: dict) -> dict:
    return {name: getattr(args, name) for name in specs}


def _check_kind(kind: str) -> None:
    if kind not in KINDS:
        raise UsageError(
            f"unknown oracle kind {kind!r} (valid kinds: {', '.join(KINDS)})")


def _write_manifest(out_dir: str, name: str, payload: dict) -> None:
    with open(os.path.join(out_dir, name), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cell_seed(base: int, ui: int, pi: int) -> int:
    return int(SeedSequence((base, ui, pi)).generate_state(1)[0])


def cmd_gen(args) -> int:
    if args.size <= 0:
        raise UsageError("--size must be positive")
    if args.train <= 0:
        raise UsageError("--train must be positive")
    if args.test < 0:
        raise UsageError("--test must be non-negative")
    if args.blur <= 0:
        raise UsageError("--blur must be positive")
    cfg = GenConfig(num_train=args.train, num_test=args.test,
                    width=args.size, height=args.size,
                    blur_sigma=args.blur, seed=args.seed)
    tr, te = gen_denoising(cfg)
    os.makedirs(args.out, exist_ok=True)
    train_path = os.path.join(args.out, "train.txt")
    test_path = os.path.join(args.out, "test.txt")
    save_dataset(tr, train_path)
    save_dataset(te, test_path)
    manifest = {"command": "gen", **_effective(args, _GEN_OPTS),
                "train_file": "train.txt", "test_file": "test.txt",
                "num_labels": tr.num_labels}
    _write_manifest(args.out, "manifest.json", manifest)
    print(f"wrote {train_path} ({len(tr)} examples) and "
          f"{test_path} ({len(te)} examples)")
    return 0


def _train_one(tr, te, args, unary: str, pairwise: str, seed: int):
    tc = TrainConfig(eps=args.eps, outer_iters=args.iters,
                     mp_iters=args.mp_iters, unary_kind=unary,
                     pairwise_kind=pairwise, seed=seed)
    return train(tr, te, tc)


def _summary_line(unary, pairwise, train_err, test_err) -> str:
    test_s = "n/a" if test_err is None else f"{test_err:.4f}"
    return (f"unary={unary} pairwise={pairwise} "
            f"train={train_err:.4f} test={test_s}")


def cmd_train(args) -> int:
    _check_kind(args.unary)
    _check_kind(args.pairwise)
    if args.iters <= 0:
        raise UsageError("--iters must be positive")
    if args.eps <= 0:
        raise UsageError("--eps must be positive")
    tr = load_dataset(args.train_data)
    te = load_dataset(args.test_data) if args.test_data else None
    model, curves = _train_one(tr, te, args, args.unary, args.pairwise,
                               args.seed)
    os.makedirs(args.out, exist_ok=True)
    save_model(model, os.path.join(args.out, "model.bin"))
    with open(os.path.join(args.out, "curve.csv"), "w") as fh:
        fh.write("iteration,train_error,test_error\n")
        for row in curves:
            it, tre, tee = row[:3]
            tee_s = "" if tee is None else f"{tee:.17g}"
            fh.write(f"{it},{tre:.17g},{tee_s}\n")
    final = curves[-1]
    manifest = {"command": "train", **_effective(args, _TRAIN_OPTS),
                "model_file": "model.bin", "curve_file": "curve.csv",
                "final_train_error": final[1], "final_test_error": final[2]}
    _write_manifest(args.out, "train_manifest.json", manifest)
    print(_summary_line(args.unary, args.pairwise, final[1], final[2]))
    return 0


def cmd_matrix(args) -> int:
    if args.iters <= 0:
        raise UsageError("--iters must be positive")
    if args.eps <= 0:
        raise UsageError("--eps must be positive")
    tr = load_dataset(args.train_data)
    te = load_dataset(args.test_data)
    os.makedirs(args.out, exist_ok=True)
    cells = [(ui, pi) for ui in range(len(KINDS)) for pi in range(len(KINDS))]

    def run_cell(cell):
        ui, pi = cell
        _, curves = _train_one(tr, te, args, KINDS[ui], KINDS[pi],
                               _cell_seed(args.seed, ui, pi))
        return curves[-1][1], curves[-1][2]

    if args.parallel:
        from concurrent.futures import ThreadPoolExecutor
        pool = ThreadPoolExecutor(max_workers=min(len(cells),
                                                  os.cpu_count() or 1))
        results = pool.map(run_cell, cells)
    else:
        results = map(run_cell, cells)

    path = os.path.join(args.out, "matrix.csv")
    errors = {}
    with open(path, "w") as fh:
        fh.write("," + ",".join(KIND_LABELS[k] for k in KINDS) + "\n")
        fh.flush()
        for (ui, pi), (train_err, test_err) in zip(cells, results):
            if pi == 0:
                fh.write(KIND_LABELS[KINDS[ui]])
            fh.write(f",{test_err:.4f}")
            if pi == len(KINDS) - 1:
                fh.write("\n")
            fh.flush()
            errors[f"{KINDS[ui]}/{KINDS[pi]}"] = [train_err, test_err]
            print(_summary_line(KINDS[ui], KINDS[pi], train_err, test_err))
    if args.parallel:
        pool.shutdown()
    manifest = {"command": "matrix", **_effective(args, _MATRIX_OPTS),
                "matrix_file": "matrix.csv", "errors": errors}
    _write_manifest(args.out, "matrix_manifest.json", manifest)
    print(f"wrote {path}")
    return 0


def cmd_predict(args) -> int:
    if not os.path.exists(args.model):
        raise UsageError(f"model file not found: {args.model}")
    model = load_model(args.model)
    ds = load_dataset(args.data)
    if (ds.num_labels, ds.d_unary, ds.d_pairwise) != \
            (model.num_labels, model.d_unary, model.d_pairwise):
        raise RuntimeError(
            f"model/dataset dimension mismatch: model expects "
            f"L={model.num_labels} d_unary={model.d_unary} "
            f"d_pairwise={model.d_pairwise}, dataset has "
            f"L={ds.num_labels} d_unary={ds.d_unary} "
            f"d_pairwise={ds.d_pairwise}")
    os.makedirs(args.out, exist_ok=True)
    preds = []
    image_files = []
    for k, ex in enumerate(ds):
        if ex.dims is None:
            raise RuntimeError(f"example {k} has no image shape")
        y = predict(model, ex, mp_iters=args.mp_iters)
        preds.append(y)
        name = f"pred_{k:03d}.pgm"
        write_label_image(y, ex.dims, ds.num_labels,
                          os.path.join(args.out, name))
        image_files.append(name)
        if ex.gold is not None:
            err = univariate_error(y, ex.gold)
            print(f"example {k}: error={err:.4f} -> {name}")
        else:
            print(f"example {k}: -> {name}")
    golds = [ex.gold for ex in ds]
    mean_err = None
    if all(g is not None for g in golds):
        mean_err = univariate_error(preds, golds)
        print(f"mean error={mean_err:.4f}")
    manifest = {"command": "predict", **_effective(args, _PREDICT_OPTS),
                "images": image_files, "mean_error": mean_err}
    _write_manifest(args.out, "predict_manifest.json", manifest)
    return 0


_COMMANDS = {"gen": cmd_gen, "train": cmd_train, "matrix": cmd_matrix,
             "predict": cmd_predict}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="structlogit",
        description="Smoothed structured prediction: generate denoising "
                    "data, train factor score models, emit error tables "
                    "and label images.")
    subs = parser.add_subparsers(dest="cmd", required=True)
    descs = {"gen": "generate a synthetic denoising dataset",
             "train": "train one unary/pairwise model",
             "matrix": "train every oracle-kind combination",
             "predict": "label a dataset with a trained model"}
    for cmd, specs in _SPECS.items():
        sub = subs.add_parser(cmd, help=descs[cmd])
        sub.add_argument("--config", type=str, default=None,
                         help="key = value option file (flags win)")
        for name, (conv, _, help_text) in specs.items():
            flag = "--" + name.replace("_", "-")
            if conv is _bool:
                sub.add_argument(flag, dest=name, action="store_true",
                                 default=None, help=help_text)
            else:
                sub.add_argument(flag, dest=name, type=conv, default=None,
                                 help=help_text)
        sub.set_defaults(func=_COMMANDS[cmd])
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else int(e.code)
    try:
        _merge_config(args, _SPECS[args.cmd])
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (RuntimeError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
