"""Command-line entry point: synth, fit, eval, export.

Exit codes: 0 success, 2 usage/validation error, 3 runtime failure.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import fileio, metrics, synth
from .body import load_body_model, synthetic_body
from .energy import EnergyWeights, OptimState, TERM_NAMES
from .observations import load_sequence
from .solver import SolverConfig, SolverError, predicted_joints, run

EXIT_USAGE = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    pass


def _apply_threads(args):
    threads = args.threads if getattr(args, "threads", None) else \
        os.environ.get("SCENEMOCAP_THREADS")
    if threads:
        torch.set_num_threads(int(threads))


def _load_config(path, overrides):
    config_dict, weights_dict = {}, {}
    if path:
        d = fileio.load_json(path)
        config_dict = d.get("solver", d)
        weights_dict = d.get("weights", {})
    for key, value in overrides.items():
        if value is not None:
            config_dict[key] = value
    known_w = {k: v for k, v in weights_dict.items()
               if k in EnergyWeights.__dataclass_fields__}
    return SolverConfig.from_dict(config_dict), EnergyWeights(**known_w)


def cmd_synth(args):
    if args.preset:
        spec = synth.preset(args.preset, seed=args.seed or 0)
    elif args.spec:
        d = fileio.load_json(args.spec)
        if args.seed is not None:
            d["seed"] = args.seed
        spec = synth.spec_from_dict(d)
    else:
        raise UsageError("synth needs --preset or --spec")
    outdir = Path(args.output or spec.name)
    try:
        truth = synth.generate(spec, outdir)
    except synth.ScenarioError as exc:
        raise UsageError(str(exc))
    print("scenario %r: %d frames, %d persons -> %s" %
          (spec.name, spec.frame_count, len(spec.persons), outdir))
    print("manifest: %s" % truth.manifest_path)
    print("ground truth: %s" % truth.poses_path)
    return 0


def _load_body(path):
    if path:
        return load_body_model(path)
    return synthetic_body()


def cmd_fit(args):
    manifest_path = Path(args.input)
    if not manifest_path.exists():
        raise UsageError("input manifest not found: %s" % manifest_path)
    spec = fileio.load_json(manifest_path)
    if "frames" not in spec:  # run manifest wrapping a sequence
        run_manifest = spec
        manifest_path = (manifest_path.parent / run_manifest["input"]).resolve()
        args.body = args.body or run_manifest.get("body_model")
        args.config = args.config or run_manifest.get("config")
        args.output = args.output or run_manifest.get("output")
        if args.seed is None:
            args.seed = run_manifest.get("seed")
        args.disable = list(args.disable or []) + list(run_manifest.get("disable", []))

    overrides = {"seed": args.seed, "batch_frames": args.batch_frames}
    config, weights = _load_config(args.config, overrides)
    disable = set(args.disable or [])
    unknown = disable - set(TERM_NAMES)
    if unknown:
        raise UsageError("unknown energy terms to disable: %s" % sorted(unknown))

    outdir = Path(args.output or "fit_output")
    outdir.mkdir(parents=True, exist_ok=True)
    body = _load_body(args.body)
    sequence = load_sequence(manifest_path)

    try:
        state, trace, aux = run(sequence, body, weights, config, disable=disable,
                                trace_path=outdir / "trace.jsonl")
    except SolverError as exc:
        print("fit failed: %s" % exc, file=sys.stderr)
        return EXIT_RUNTIME

    state_dict = state.to_dict()
    state_dict["disabled_terms"] = sorted(disable)
    fileio.dump_json(state_dict, outdir / "state.json")

    joints = predicted_joints(state, body)
    frames = []
    for t in range(state.num_frames):
        persons = []
        for n in range(state.num_persons):
            if state.presence[t, n]:
                persons.append({"track_id": n, "joints": joints[(t, n)].tolist()})
        frames.append(persons)
    fileio.dump_json({"fps": sequence.fps, "root_index": 0, "frames": frames},
                     outdir / "poses.json")

    if aux.get("cloud") is not None:
        aux["cloud"].save_ply(outdir / "scene.ply")

    final = trace[-1]
    print("fit complete: %d iterations, final energy %.6g -> %s" %
          (len(trace), final.get("full_total", final["total"]), outdir))
    return 0


def cmd_eval(args):
    try:
        report = metrics.evaluate_files(args.pred, args.gt)
    except metrics.MetricError as exc:
        print("eval failed: %s" % exc, file=sys.stderr)
        return EXIT_RUNTIME
    outdir = Path(args.output or ".")
    outdir.mkdir(parents=True, exist_ok=True)
    metrics.write_report(report, outdir / "report.json", outdir / "report.csv")
    width = max(len(k) for k in report)
    for key in sorted(report):
        value = report[key]
        shown = "absent" if value is None else (
            "%.3f" % value if isinstance(value, float) else str(value))
        print("%-*s  %s" % (width, key, shown))
    return 0


def cmd_export(args):
    results = Path(args.results)
    state_path = results / "state.json"
    if not state_path.exists():
        raise UsageError("no state.json under %s" % results)
    if args.format not in ("ply", "obj"):
        raise UsageError("unknown export format %r" % args.format)
    body = _load_body(args.body)
    state = OptimState.from_dict(fileio.load_json(state_path))
    outdir = Path(args.output or (results / "export"))
    outdir.mkdir(parents=True, exist_ok=True)

    from .energy import world_meshes
    pairs = [(t, n) for t in range(state.num_frames) for n in range(state.num_persons)
             if state.presence[t, n]]
    with torch.no_grad():
        meshes = world_meshes(state.detached_copy(requires_grad=False), body, pairs)

    skeleton = {"joint_names": body.joint_names, "frames": []}
    joints = predicted_joints(state, body)
    for t in range(state.num_frames):
        persons = []
        for n in range(state.num_persons):
            if not state.presence[t, n]:
                continue
            mesh = meshes[(t, n)].cpu().numpy()
            stem = "person%d_frame%04d.%s" % (n, t, args.format)
            if args.format == "ply":
                fileio.write_ply_mesh(outdir / stem, mesh, body.faces)
            else:
                fileio.write_obj_mesh(outdir / stem, mesh, body.faces)
            persons.append({"track_id": n, "joints": joints[(t, n)].tolist()})
        skeleton["frames"].append(persons)
    fileio.dump_json(skeleton, outdir / "skeleton.json")

    scene_ply = results / "scene.ply"
    if scene_ply.exists():
        (outdir / "scene.ply").write_bytes(scene_ply.read_bytes())
    print("exported %d meshes -> %s" % (len(pairs), outdir))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="scenemocap",
        description="Multi-person absolute 3D pose, shape and scene-scale "
                    "recovery from per-frame monocular observations.")
    parser.add_argument("--threads", type=int, help="worker thread cap "
                        "(default: SCENEMOCAP_THREADS or torch default)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scenario")
    p.add_argument("--preset", help="named scenario (three-person-plane, multi-scale, "
                                    "children, walking-noisy)")
    p.add_argument("--spec", help="scenario spec JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--output", help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="run the two-stage optimization")
    p.add_argument("input", help="sequence.json or a run manifest")
    p.add_argument("--body", help="body model directory (default: built-in synthetic)")
    p.add_argument("--config", help="solver/weights config JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--batch-frames", type=int, default=None)
    p.add_argument("--disable", action="append", default=None, metavar="TERM",
                   help="drop an energy term (repeatable): %s" % ", ".join(TERM_NAMES))
    p.add_argument("--output", help="results directory")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("pred", help="predicted poses.json")
    p.add_argument("gt", help="ground-truth poses.json")
    p.add_argument("--output", help="report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="write per-frame meshes and skeletons")
    p.add_argument("results", help="fit results directory")
    p.add_argument("--format", default="ply", help="ply or obj")
    p.add_argument("--body", help="body model directory")
    p.add_argument("--output", help="export directory")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        _apply_threads(args)
        return args.func(args)
    except UsageError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure surface
        print("runtime failure: %s" % exc, file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
