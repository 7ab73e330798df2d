"""Command-line entry point: ``stereo-unsup {synth,refine,train-cbem,eval,check-grad}``.

Exit status: 0 success, 1 usage error, 2 data or validation error, 3 numerical failure.
"""
import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .cbem import (DEFAULT_MASK_THRESHOLD, CBEMClassifier, calibration_report, make_labels, predict_uscore,
                   result_features, self_supervised_finetune)
from .exceptions import InvalidInputError, StereoError
from .gradcheck import DEFAULT_STEP, LOSS_NAMES, finite_diff_check, random_problem
from .imaging import load_image, read_pfm, save_png, write_pfm
from .metrics import D1_THRESHOLD, ERROR_MAP_CAP, error_map, evaluate
from .parallel import ordered_map
from .refine import RefineConfig, cascade_refine
from .synth import TEXTURE_FAMILIES, SceneSpec, generate_scene, read_manifest, scene_manifest

RUN_MANIFEST = "run_manifest.json"
USAGE_EXIT = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_EXIT, f"{self.prog}: error: {message}\n")


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


class _Run:
    """Collects outputs of one command and writes its manifest."""

    def __init__(self, command, args):
        self.command = command
        self.out = args.out
        self.seed = args.seed if args.seed is not None else 0
        self.seed_defaulted = args.seed is None
        self.started = time.perf_counter()
        self.outputs = []
        self.inputs = {}
        self.config = {}
        os.makedirs(self.out, exist_ok=True)

    def path(self, name):
        self.outputs.append(name)
        return os.path.join(self.out, name)

    def add_input(self, role, path):
        self.inputs[role] = {"path": path, "sha256": _sha256(path)}

    def finish(self):
        manifest = {
            "command": self.command,
            "version": __version__,
            "seed": self.seed,
            "seed_defaulted": self.seed_defaulted,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": {name: _sha256(os.path.join(self.out, name)) for name in sorted(self.outputs)},
            "duration_s": round(time.perf_counter() - self.started, 3),
        }
        _write_json(manifest, os.path.join(self.out, RUN_MANIFEST))
        return manifest


def _refine_config(args, extra_keys=()):
    """Merge ``--config`` JSON with command-line overrides. Returns ``(config, extras)``."""
    data = {}
    if args.config:
        try:
            with open(args.config) as fh:
                data = json.load(fh)
        except (OSError, ValueError) as exc:
            raise InvalidInputError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise InvalidInputError(f"config {args.config} must hold a JSON object")
    extras = {k: data.pop(k) for k in extra_keys if k in data}
    for flag in ("steps_per_level", "lambda_ap", "lambda_census", "lambda_sm"):
        value = getattr(args, flag, None)
        if value is not None:
            data[flag] = value
    if args.seed is not None:
        data["seed"] = args.seed
    return RefineConfig.from_dict(data), extras


def _scene_seeds(seed, count):
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(child.generate_state(1, dtype=np.uint32)[0]) for child in children]


# ------------------------------------------------------------------ commands

def cmd_synth(args):
    run = _Run("synth", args)
    if args.count < 0:
        raise InvalidInputError("--count must be >= 0")
    template = SceneSpec(height=args.size, width=args.size, max_disp=args.max_disp, texture=args.texture,
                         n_occluders=args.occluders, gain_range=tuple(args.gain), bias_range=tuple(args.bias))
    specs = [replace(template, seed=s) for s in _scene_seeds(run.seed, args.count)]
    scenes = ordered_map(generate_scene, specs)
    manifest_path = run.path("manifest.json")
    scene_manifest(scenes, manifest_path)
    for entry in read_manifest(manifest_path, load=False):
        for key in ("left", "right", "gt", "gt_right", "occlusion"):
            run.outputs.append(entry[key])
    run.config = {"count": args.count, "size": args.size, "max_disp": args.max_disp, "texture": args.texture,
                  "occluders": args.occluders, "gain": list(args.gain), "bias": list(args.bias),
                  "scene_seeds": [s.seed for s in specs]}
    run.finish()
    print(f"synth: wrote {len(scenes)} scenes to {args.out}")
    return 0


def cmd_refine(args):
    run = _Run("refine", args)
    config, _ = _refine_config(args)
    left, right = load_image(args.left), load_image(args.right)
    run.add_input("left", args.left)
    run.add_input("right", args.right)
    result = cascade_refine(left, right, config)
    run.config = {"refine": config.to_dict()}
    if args.cbem_params:
        run.add_input("cbem_params", args.cbem_params)
        model = CBEMClassifier.load(args.cbem_params)
        uscore = predict_uscore(result_features(left, right, result), model)
        result = self_supervised_finetune(left, right, result, uscore, args.mask_threshold)
        write_pfm(uscore, run.path("uscore.pfm"))
        save_png(uscore[:, :, None], run.path("uscore.png"), bits=8)
        run.config["mask_threshold"] = args.mask_threshold

    write_pfm(result.disparity, run.path("disparity.pfm"))
    write_pfm(result.back_disparity, run.path("disparity_back.pfm"))
    for level, sigma in enumerate(result.sigmas):
        write_pfm(sigma, run.path(f"sigma_l{level}.pfm"))
        peak = sigma.max()
        save_png((sigma / peak if peak > 0 else sigma)[:, :, None], run.path(f"sigma_l{level}.png"), bits=8)
    with open(run.path("history.jsonl"), "w") as fh:
        for record in result.history_records():
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    run.finish()
    print(f"refine: {result.iterations} iterations, disparity in [{result.disparity.min():.3f}, "
          f"{result.disparity.max():.3f}] -> {args.out}")
    return 0


def _scene_features(config):
    def work(scene):
        if "gt" not in scene:
            raise InvalidInputError("training scenes need ground-truth disparity")
        result = cascade_refine(scene["left"], scene["right"], config)
        features = result_features(scene["left"], scene["right"], result)
        labels = make_labels(scene["gt"], result.disparity)
        return features, labels, np.abs(result.disparity - scene["gt"])

    return work


def _stack(batch):
    x = np.concatenate([f.reshape(-1, f.shape[-1]) for f, _, _ in batch])
    y = np.concatenate([lab.labels[lab.valid] for _, lab, _ in batch])
    valid = np.concatenate([lab.valid.ravel() for _, lab, _ in batch])
    err = np.concatenate([e.ravel() for _, _, e in batch])
    return x[valid], y, err[valid]


def cmd_train_cbem(args):
    run = _Run("train-cbem", args)
    config, extras = _refine_config(args, extra_keys=("cbem",))
    hyper = dict(extras.get("cbem", {}))
    hyper["epochs"] = args.epochs
    hyper["seed"] = run.seed
    model = CBEMClassifier(**hyper)
    scenes = read_manifest(args.manifest)
    run.add_input("manifest", args.manifest)
    if not scenes:
        raise InvalidInputError(f"manifest {args.manifest} lists no scenes")
    x, y, err = _stack(ordered_map(_scene_features(config), scenes))
    model.fit(x, y)
    model.save(run.path("cbem_params.json"))
    report = {"train": calibration_report(model.predict_proba(x)[:, 1], err, t=args.mask_threshold),
              "train_bce": {"initial": model.initial_loss_, "final": model.final_loss_}}
    if args.eval_manifest:
        run.add_input("eval_manifest", args.eval_manifest)
        ex, _, eerr = _stack(ordered_map(_scene_features(config), read_manifest(args.eval_manifest)))
        report["eval"] = calibration_report(model.predict_proba(ex)[:, 1], eerr, t=args.mask_threshold)
    _write_json(report, run.path("calibration.json"))
    run.config = {"refine": config.to_dict(), "cbem": model.get_params(), "epochs": args.epochs,
                  "mask_threshold": args.mask_threshold}
    run.finish()
    line = f"train-cbem: {len(scenes)} scenes, train AUROC {report['train']['auroc']:.3f}"
    if "eval" in report:
        line += f", eval AUROC {report['eval']['auroc']:.3f}"
    print(line)
    return 0


def _mask_png(path):
    return load_image(path).mean(axis=2) > 0.5


def cmd_eval(args):
    run = _Run("eval", args)
    disp, gt = read_pfm(args.disp), read_pfm(args.gt)
    run.add_input("disp", args.disp)
    run.add_input("gt", args.gt)
    valid = occlusion = None
    if args.valid:
        valid = _mask_png(args.valid)
        run.add_input("valid", args.valid)
    if args.occlusion:
        occlusion = _mask_png(args.occlusion)
        run.add_input("occlusion", args.occlusion)
    report = evaluate(disp, gt, valid, occlusion, args.threshold)
    report.save(run.path("metrics.json"))
    save_png(error_map(disp, gt, valid, args.cap), run.path("error_map.png"), bits=8)
    run.config = {"cap": args.cap, "d1_threshold": args.threshold}
    run.finish()
    print(f"eval: EPE {report.epe:.4f} px, D1 {report.d1:.4f} over {report.pixels} pixels")
    return 0


def cmd_check_grad(args):
    run = _Run("check-grad", args)
    left, right, d, back = random_problem(run.seed, args.size)
    result = finite_diff_check(args.loss, left, right, d, args.samples, args.step, run.seed, back)
    _write_json(result.to_dict(), run.path("gradcheck.json"))
    run.config = {"loss": args.loss, "samples": args.samples, "step": args.step, "size": args.size}
    run.finish()
    status = "pass" if result.passed else "FAIL"
    print(f"check-grad {args.loss}: {status}, max rel error {result.max_rel_error:.3e} "
          f"(tolerance {result.tolerance:g}, {result.n_checked} pixels)")
    return 0 if result.passed else 3


# -------------------------------------------------------------------- parser

def _common(p, out_default):
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--config", help="JSON config; flags override its values")
    p.add_argument("--out", default=out_default, help=f"output directory (default {out_default})")


def _loss_flags(p):
    p.add_argument("--steps-per-level", dest="steps_per_level", type=int)
    p.add_argument("--lambda-ap", dest="lambda_ap", type=float)
    p.add_argument("--lambda-census", dest="lambda_census", type=float)
    p.add_argument("--lambda-sm", dest="lambda_sm", type=float)


def build_parser():
    parser = _Parser(prog="stereo-unsup", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate synthetic stereo scenes")
    _common(p, "synth_out")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--max-disp", dest="max_disp", type=float, default=8.0)
    p.add_argument("--texture", choices=TEXTURE_FAMILIES, default="perlin")
    p.add_argument("--occluders", type=int, default=3)
    p.add_argument("--gain", type=float, nargs=2, default=(1.0, 1.0), metavar=("LO", "HI"))
    p.add_argument("--bias", type=float, nargs=2, default=(0.0, 0.0), metavar=("LO", "HI"))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("refine", help="estimate disparity for a stereo pair")
    _common(p, "refine_out")
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    p.add_argument("--cbem-params", dest="cbem_params", help="trained predictor; enables the self-supervised pass")
    p.add_argument("--mask-threshold", dest="mask_threshold", type=float, default=DEFAULT_MASK_THRESHOLD)
    _loss_flags(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("train-cbem", help="train the error predictor on labelled scenes")
    _common(p, "cbem_out")
    p.add_argument("--manifest", required=True)
    p.add_argument("--eval-manifest", dest="eval_manifest")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--mask-threshold", dest="mask_threshold", type=float, default=DEFAULT_MASK_THRESHOLD)
    _loss_flags(p)
    p.set_defaults(func=cmd_train_cbem)

    p = sub.add_parser("eval", help="EPE / D1 report and error map")
    _common(p, "eval_out")
    p.add_argument("--disp", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--valid", help="PNG mask, nonzero = valid")
    p.add_argument("--occlusion", help="PNG mask, nonzero = occluded")
    p.add_argument("--cap", type=float, default=ERROR_MAP_CAP)
    p.add_argument("--threshold", type=float, default=D1_THRESHOLD)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check-grad", help="finite-difference check of one loss gradient")
    _common(p, "gradcheck_out")
    p.add_argument("loss", choices=LOSS_NAMES)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--step", type=float, default=DEFAULT_STEP)
    p.add_argument("--size", type=int, default=32)
    p.set_defaults(func=cmd_check_grad)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StereoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
