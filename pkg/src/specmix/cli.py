"""Command-line entry point.

Subcommands: generate, train, eval, unmix, endmembers, baseline.  Every
command writes a JSON run manifest next to its primary output.  Exit
codes: 0 success, 2 usage or format problems, 3 numeric failure.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from . import metrics
from .baselines import vca_fcls_pipeline
from .data import SceneSpec, generate_scene, load_scene, save_scene
from .errors import ContractError, FormatError, NumericError, ShapeError
from .model import extract_endmembers, load_checkpoint, save_checkpoint, unmix_scene
from .training import (SceneDataset, TrainConfig, build_model, predict_abundances,
                       train, write_trace_csv)

EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _atomic_write_bytes(path, payload):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _write_manifest(out_path, command, args, seed, inputs, started):
    manifest = {
        "command": command,
        "config": {k: v for k, v in vars(args).items() if k != "func"},
        "seed": seed,
        "inputs": inputs,
        "outputs": [str(out_path)],
        "toolkit_version": __version__,
        "duration_seconds": round(time.time() - started, 3),
    }
    _atomic_write_bytes(f"{out_path}.manifest.json",
                        json.dumps(manifest, indent=2, default=str).encode())


def _load_json_file(path, kind):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ContractError(f"cannot read {kind} file {path}: {exc}") from exc
    try:
        json.loads(text)
    except json.JSONDecodeError as exc:
        raise ContractError(f"malformed JSON in {kind} file {path}: {exc}") from exc
    return text


def cmd_generate(args):
    started = time.time()
    spec = SceneSpec.from_json(_load_json_file(args.spec, "scene spec"))
    cube, abund, endm = generate_scene(spec)
    tmp = f"{args.out}.tmp.{os.getpid()}"
    save_scene(tmp, cube, abund, endm, spec)
    os.replace(tmp, args.out)
    _write_manifest(args.out, "generate", args, spec.seed, [args.spec], started)
    return 0


def cmd_train(args):
    started = time.time()
    config = TrainConfig.from_json(_load_json_file(args.config, "train config"))
    cube, abund, endm, spec = load_scene(args.scene)
    model = build_model(config, bands=spec.bands, endmembers=spec.endmembers)
    dataset = SceneDataset(cube, abund, config.patch_size,
                           config.split_fraction, config.seed)
    model, trace = train(model, dataset, config)
    save_checkpoint(args.out, model)
    trace_path = args.trace or f"{args.out}.trace.csv"
    write_trace_csv(trace_path, trace)
    _write_manifest(args.out, "train", args, config.seed,
                    [args.scene, args.config], started)
    return 0


def cmd_eval(args):
    started = time.time()
    cube, abund, endm, spec = load_scene(args.scene)
    model = load_checkpoint(args.checkpoint)
    if model.config.bands != spec.bands:
        raise ShapeError(f"checkpoint expects {model.config.bands} bands, scene has "
                         f"{spec.bands}")
    dataset = SceneDataset(cube, abund, model.config.patch_size, seed=spec.seed)
    indices = np.arange(dataset.n_pixels)
    z_hat = predict_abundances(model, dataset, indices)
    z_true = abund.reshape(-1, spec.endmembers)
    endm_est = extract_endmembers(model)
    report = metrics.evaluate(z_true, z_hat, endm_est, endm,
                              metadata={"scene": args.scene, "checkpoint": args.checkpoint})
    metrics.write_report_csv(args.out, report)
    _write_manifest(args.out, "eval", args, spec.seed,
                    [args.scene, args.checkpoint], started)
    return 0


def cmd_unmix(args):
    started = time.time()
    cube, abund, endm, spec = load_scene(args.scene)
    model = load_checkpoint(args.checkpoint)
    if model.config.bands != spec.bands:
        raise ShapeError(f"checkpoint expects {model.config.bands} bands, scene has "
                         f"{spec.bands}")
    amap = unmix_scene(model, cube)
    raw_path = f"{args.out_prefix}.abund.f64"
    _atomic_write_bytes(raw_path, amap.astype("<f8").tobytes())
    for k in range(amap.shape[2]):
        metrics.write_pgm(f"{args.out_prefix}.endmember{k}.pgm", amap[:, :, k])
    _write_manifest(raw_path, "unmix", args, spec.seed,
                    [args.scene, args.checkpoint], started)
    return 0


def cmd_endmembers(args):
    started = time.time()
    model = load_checkpoint(args.checkpoint)
    endm = extract_endmembers(model)
    lines = [",".join(repr(float(v)) for v in row) for row in endm]
    _atomic_write_bytes(args.out, ("\n".join(lines) + "\n").encode())
    _write_manifest(args.out, "endmembers", args, 0, [args.checkpoint], started)
    return 0


def cmd_baseline(args):
    started = time.time()
    if args.method != "vca-fcls":
        raise ContractError(f"unknown baseline method {args.method!r}")
    cube, abund, endm, spec = load_scene(args.scene)
    endm_est, amap = vca_fcls_pipeline(cube, spec.endmembers, seed=args.seed,
                                       threads=args.threads)
    report = metrics.evaluate(abund.reshape(-1, spec.endmembers),
                              amap.reshape(-1, spec.endmembers), endm_est, endm,
                              metadata={"scene": args.scene, "method": args.method})
    metrics.write_report_csv(args.out, report)
    _write_manifest(args.out, "baseline", args, args.seed, [args.scene], started)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="specmix",
        description="Hyperspectral unmixing: scene generation, VAE training, "
                    "evaluation, and classical baselines.")
    parser.add_argument("--threads", type=int,
                        default=int(os.environ.get("SPECMIX_THREADS", "1")),
                        help="worker threads for per-pixel baseline solves "
                             "(default 1; env fallback SPECMIX_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic scene container")
    p.add_argument("--spec", required=True, help="SceneSpec JSON file")
    p.add_argument("--out", required=True, help="output scene file")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the unmixing model on a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--config", required=True, help="TrainConfig JSON file")
    p.add_argument("--out", required=True, help="output checkpoint file")
    p.add_argument("--trace", default=None, help="loss trace CSV (default <out>.trace.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint against a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="report CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("unmix", help="whole-scene abundance maps from a checkpoint")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_unmix)

    p = sub.add_parser("endmembers", help="extract decoder endmembers to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_endmembers)

    p = sub.add_parser("baseline", help="run a classical baseline on a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--method", default="vca-fcls", choices=["vca-fcls"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="report CSV path")
    p.set_defaults(func=cmd_baseline)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ContractError, FormatError, ShapeError, FileNotFoundError) as exc:
        print(f"specmix: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"specmix: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
