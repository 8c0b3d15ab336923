"""Command-line entry point.

Subcommands: synth, split, train, eval, predict, inspect, complexity.
Every command accepts ``--config FILE`` with flat ``key = value`` lines
('#' starts a comment); explicit flags win over config values, unknown
keys are rejected with their line number. All failures exit nonzero and
print a single line starting with ``error:``.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data, metrics, pixmap
from .model import (
    SSGRN,
    ModelConfig,
    count_attention_ops,
    count_params,
    predict_map,
    save_checkpoint,
)
from .tensor import no_grad
from .training import TrainConfig, prepare_inputs, save_history, train


class CliError(Exception):
    """User-facing failure with a one-line message."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"error: {message}\n")


def _read_run_config(path: str) -> tuple[dict[str, str], dict[str, int]]:
    values: dict[str, tuple[int, str]] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip().replace("-", "_")
        values[key] = (lineno, value.strip())
    return {k: v for k, (_, v) in values.items()}, {k: ln for k, (ln, _) in values.items()}


def _merge_config(args: argparse.Namespace, spec: dict[str, tuple]) -> argparse.Namespace:
    """Fill unset options from the config file, then from hard defaults."""
    if getattr(args, "config", None):
        values, linenos = _read_run_config(args.config)
        for key, text in values.items():
            if key not in spec:
                raise CliError(f"{args.config}:{linenos[key]}: unknown key '{key}'")
            if getattr(args, key) is None:
                caster = spec[key][0]
                try:
                    setattr(args, key, caster(text))
                except ValueError as exc:
                    raise CliError(f"{args.config}:{linenos[key]}: bad value for '{key}': {exc}")
    for key, (_, default) in spec.items():
        if getattr(args, key) is None:
            setattr(args, key, default)
    return args


def _widths(text: str) -> tuple[int, int, int]:
    parts = tuple(int(p) for p in text.split(","))
    if len(parts) != 3:
        raise ValueError("expected three comma-separated widths")
    return parts


_TRAIN_SPEC = {
    "model": (str, "ssgrn"),
    "iters": (int, 1000),
    "lr": (float, 1e-3),
    "descriptors": (int, 256),
    "spectral_descriptors": (int, None),
    "seed": (int, 0),
    "widths": (_widths, (64, 128, 256)),
    "momentum": (float, 0.9),
    "weight_decay": (float, 1e-4),
    "power": (float, 0.9),
    "eval_every": (int, 100),
    "slic_iters": (int, 5),
    "slic_compactness": (float, 0.5),
    "slic_temperature": (float, 0.1),
    "spectral_stride": (int, 4),
    "head_hidden": (int, 128),
}

_SYNTH_SPEC = {
    "h": (int, 48),
    "w": (int, 48),
    "bands": (int, 12),
    "classes": (int, 4),
    "noise": (float, 0.1),
    "seed": (int, 0),
}

_SPLIT_SPEC = {"seed": (int, 0)}

_COMPLEXITY_SPEC = {
    "model": (str, "ssgrn"),
    "h": (int, 145),
    "w": (int, 145),
    "bands": (int, 200),
    "classes": (int, 16),
    "descriptors": (int, 256),
    "widths": (_widths, (64, 128, 256)),
}


def _add_spec_options(parser: argparse.ArgumentParser, spec: dict) -> None:
    for key, (caster, _) in spec.items():
        parser.add_argument(f"--{key.replace('_', '-')}", dest=key, type=caster, default=None)
    parser.add_argument("--config", default=None, help="key = value defaults file")


def build_parser() -> _Parser:
    parser = _Parser(prog="ssgrn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parser_class=_Parser, help="generate a synthetic labeled scene")
    p.add_argument("--out", required=True, help="output stem; writes <out>.cube and <out>.lab")
    _add_spec_options(p, _SYNTH_SPEC)

    p = sub.add_parser("split", parser_class=_Parser, help="draw a per-class train/val/test split")
    p.add_argument("--labels", required=True)
    p.add_argument("--counts", default=None, help="file of '<class> <train> <val>' lines")
    p.add_argument("--out", required=True)
    _add_spec_options(p, _SPLIT_SPEC)

    p = sub.add_parser("train", parser_class=_Parser, help="train a variant on one scene")
    p.add_argument("--cube", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True, help="checkpoint path; history CSV lands beside it")
    _add_spec_options(p, _TRAIN_SPEC)

    p = sub.add_parser("eval", parser_class=_Parser, help="evaluate a checkpoint on the test subset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--config", default=None)

    p = sub.add_parser("predict", parser_class=_Parser, help="write a P6 classification map")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)

    p = sub.add_parser("inspect", parser_class=_Parser, help="dump internal maps and affinities")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--what", required=True, choices=["superpixels", "spatial-affinity", "spectral-affinity"])
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)

    p = sub.add_parser("complexity", parser_class=_Parser, help="report parameter and attention-op counts")
    _add_spec_options(p, _COMPLEXITY_SPEC)

    return parser


# -- commands --------------------------------------------------------------------


def cmd_synth(args) -> int:
    cube, labels = data.synth_scene(args.h, args.w, args.bands, args.classes, args.noise, args.seed)
    data.save_cube(cube, f"{args.out}.cube")
    data.save_labels(labels, f"{args.out}.lab")
    print(f"wrote {args.out}.cube and {args.out}.lab ({args.classes} classes, {args.bands} bands)")
    return 0


def cmd_split(args) -> int:
    labels = data.load_labels(args.labels)
    if args.counts:
        counts = data.load_class_counts(args.counts)
    else:
        counts = data.default_counts(labels)
    split = data.make_split(labels, counts, seed=args.seed)
    data.save_split(split, labels, args.out)
    sizes = {s: int(split.mask(s).sum()) for s in data.SUBSETS}
    print(f"wrote {args.out} (train {sizes['train']}, val {sizes['val']}, test {sizes['test']})")
    return 0


def _load_scene(cube_path, labels_path):
    cube = data.load_cube(cube_path)
    labels = data.load_labels(labels_path)
    if (cube.height, cube.width) != (labels.height, labels.width):
        raise CliError(
            f"cube is {cube.height}x{cube.width} but labels are {labels.height}x{labels.width}"
        )
    return cube, labels


def cmd_train(args) -> int:
    cube, labels = _load_scene(args.cube, args.labels)
    split = data.load_split(args.split, (labels.height, labels.width))
    if not split.mask("train").any():
        raise CliError("split contains no training pixels")
    classes = labels.classes
    if classes == 0:
        raise CliError("label map has no labeled pixels")
    config = ModelConfig(
        in_bands=cube.bands,
        classes=classes,
        height=cube.height,
        width=cube.width,
        widths=args.widths,
        descriptors=args.descriptors,
        spectral_descriptors=args.spectral_descriptors,
        variant=args.model,
        slic_iters=args.slic_iters,
        slic_compactness=args.slic_compactness,
        slic_temperature=args.slic_temperature,
        spectral_stride=args.spectral_stride,
        head_hidden=args.head_hidden,
    )
    model = SSGRN(config, seed=args.seed)
    tcfg = TrainConfig(
        base_lr=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        max_iter=args.iters,
        power=args.power,
        seed=args.seed,
        eval_every=args.eval_every,
    )
    history = train(model, cube, labels, split, tcfg)
    save_checkpoint(model, args.out)
    history_path = Path(args.out).with_suffix(".history.csv")
    save_history(history_path, history)
    last = history[-1].loss if history else float("nan")
    print(f"wrote {args.out} and {history_path} (final loss {last:.4f})")
    return 0


def _load_model_scene(ckpt_path, cube_path):
    model = SSGRN.from_checkpoint(ckpt_path)
    cube = data.load_cube(cube_path)
    cfg = model.config
    if cube.bands != cfg.in_bands or (cube.height, cube.width) != (cfg.height, cfg.width):
        raise CliError(
            f"cube {cube.bands}x{cube.height}x{cube.width} does not match checkpoint "
            f"{cfg.in_bands}x{cfg.height}x{cfg.width}"
        )
    return model, cube


def cmd_eval(args) -> int:
    model, cube = _load_model_scene(args.ckpt, args.cube)
    labels = data.load_labels(args.labels)
    if (labels.height, labels.width) != (cube.height, cube.width):
        raise CliError("label extent does not match the cube")
    if labels.classes > model.config.classes:
        raise CliError(
            f"labels contain class {labels.classes} but the model has {model.config.classes}"
        )
    split = data.load_split(args.split, (labels.height, labels.width))
    test_mask = split.mask("test") & (labels.labels > 0)
    if not test_mask.any():
        raise CliError("test subset is empty")
    image, _, out_hw = prepare_inputs(cube, labels)
    pred = predict_map(model, image, out_hw=out_hw)
    cm, o, a, k = metrics.evaluate(pred, labels.labels, split.mask("test"), model.config.classes)
    stats = metrics.aggregate_runs([(o, a, k)])
    metrics.write_report(args.report, cm, stats)
    print(f"OA {o:.4f}  AA {a:.4f}  Kappa {k:.4f}  ({cm.total} test pixels) -> {args.report}")
    return 0


def cmd_predict(args) -> int:
    model, cube = _load_model_scene(args.ckpt, args.cube)
    image, _, out_hw = prepare_inputs(cube)
    pred = predict_map(model, image, out_hw=out_hw)
    pixmap.write_ppm(args.out, pixmap.class_colors(pred))
    print(f"wrote {args.out} ({out_hw[1]}x{out_hw[0]} P6 map)")
    return 0


def cmd_inspect(args) -> int:
    model, cube = _load_model_scene(args.ckpt, args.cube)
    image, _, _ = prepare_inputs(cube)
    with no_grad():
        out = model.forward(image)
    if args.what == "superpixels":
        if out.spatial is None:
            raise CliError(f"variant {model.config.variant} has no superpixels")
        fh, fw = model.config.feature_hw
        hard = out.spatial.assignment.hard.reshape(fh, fw)
        k = model.config.descriptors
        gray = (hard * 255) // max(k - 1, 1)
        pixmap.write_pgm(args.out, gray.astype(np.uint8))
    elif args.what == "spatial-affinity":
        if out.spatial is None:
            raise CliError(f"variant {model.config.variant} has no spatial affinity")
        np.savetxt(args.out, out.spatial.affinity.data, delimiter=",", fmt="%.8g")
    else:
        if out.spectral is None:
            raise CliError(f"variant {model.config.variant} has no spectral affinity")
        np.savetxt(args.out, out.spectral.affinity.data, delimiter=",", fmt="%.8g")
    print(f"wrote {args.out}")
    return 0


def cmd_complexity(args) -> int:
    config = ModelConfig(
        in_bands=args.bands,
        classes=args.classes,
        height=args.h,
        width=args.w,
        widths=args.widths,
        descriptors=args.descriptors,
        variant=args.model,
    )
    model = SSGRN(config)
    n_params = count_params(model)
    ops = count_attention_ops(config.descriptors, config.feature_pixels)
    print(f"params {n_params}")
    print(f"attention_ops {ops}")
    return 0


_COMMANDS = {
    "synth": (cmd_synth, _SYNTH_SPEC),
    "split": (cmd_split, _SPLIT_SPEC),
    "train": (cmd_train, _TRAIN_SPEC),
    "eval": (cmd_eval, {}),
    "predict": (cmd_predict, {}),
    "inspect": (cmd_inspect, {}),
    "complexity": (cmd_complexity, _COMPLEXITY_SPEC),
}


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler, spec = _COMMANDS[args.command]
    args = _merge_config(args, spec)
    return handler(args)


def main(argv=None) -> int:
    try:
        return run(argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        message = str(exc).replace("\n", " ")
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
