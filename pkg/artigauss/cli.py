import os
os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "3")

import csv
import sys
import argparse
import dataclasses
import logging

import gin
import tensorflow as tf

from artigauss import __version__
from artigauss.errors import ArtigaussError, InvalidInputError, InvalidParameterError, NumericalFailure
from artigauss.evaluate import SUMMARY_METRICS, ablation_deltas, evaluate
from artigauss.fusion import fuse_states
from artigauss.gaussians import OrthographicView
from artigauss.io_utils import (FORMAT_VERSIONS, RunManifest, load_ground_truth, load_json, load_model, read_ply,
                                save_ground_truth, save_json, save_model, write_ply,
                                write_repel_ply)
from artigauss.metrics_utils import create_eval_summaries
from artigauss.synthetic_objects import ObjectSpec, load_object_spec, make_object
from artigauss.training import TrainConfig, Trainer, get_train_config
from artigauss.visualization_utils import render_image, save_png, tile_images, visualize_parts

logger = logging.getLogger("artigauss")

DEFAULT_GIN = os.path.join(os.path.dirname(__file__), "configs", "default.gin")
SEED_ENV = "ARTIGAUSS_SEED"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_NUMERICAL = 3


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with 1; 2 is reserved for invalid input files."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, "[artigauss] {}: error: {}\n".format(self.prog, message))


def version_string():
    formats = ", ".join("{} {}".format(k, v) for k, v in sorted(FORMAT_VERSIONS.items()))
    return "artigauss {} (formats: {})".format(__version__, formats)


def build_parser():
    parser = ArgumentParser(prog="artigauss", description="Articulated object reconstruction from two Gaussian "
                                                          "states")
    parser.add_argument("--version", action="version", version=version_string())
    parser.add_argument("--threads", type=int, default=1, help="TensorFlow intra/inter-op threads (1 = "
                                                                 "reproducible)")
    parser.add_argument("--gin_config", action="append", default=[], help="additional .gin file(s)")
    parser.add_argument("--gin_bindings", action="append", default=[], help="gin binding(s), e.g. "
                                                                             "'training.steps = 1000'")
    parser.add_argument("--verbose", action="store_true")
    parser.add_argument("--no_progress", action="store_true", help="disable progress bars")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic object as two PLY states and ground truth")
    p.add_argument("--spec", required=True, help="object JSON or preset name")
    p.add_argument("--out_dir", required=True)
    _object_args(p)

    p = sub.add_parser("fuse", help="fuse two states into a canonical field")
    p.add_argument("state0")
    p.add_argument("state1")
    p.add_argument("--out_dir", required=True)
    p.add_argument("--uniform_beta", action="store_true", help="use beta = 0.5 instead of the motion-aware weight")

    p = sub.add_parser("train", help="fit parts and transforms to two states")
    p.add_argument("state0")
    p.add_argument("state1")
    p.add_argument("--out_dir", required=True)
    _train_args(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint against ground truth")
    p.add_argument("--model", required=True)
    p.add_argument("--state0", required=True)
    p.add_argument("--state1", required=True)
    p.add_argument("--gt", required=True, help="ground truth JSON written by synth")
    p.add_argument("--out_dir", required=True)
    p.add_argument("--render", action="store_true", help="add photometric metrics")
    p.add_argument("--summaries", action="store_true", help="write TensorBoard scalars")

    p = sub.add_parser("render", help="render a PLY (optionally part-colored by a checkpoint) to PNG")
    p.add_argument("ply")
    p.add_argument("--out_dir", required=True)
    p.add_argument("--model", help="checkpoint whose part labels color the field")
    p.add_argument("--view_axis", default="z", choices=["x", "y", "z"])
    p.add_argument("--view_sign", type=int, default=1, choices=[1, -1])
    p.add_argument("--resolution", type=int, nargs=2, default=[128, 128], metavar=("W", "H"))

    p = sub.add_parser("pipeline", help="synth, train and eval in one invocation")
    p.add_argument("--spec", required=True, help="object JSON or preset name")
    p.add_argument("--out_dir", required=True)
    p.add_argument("--render", action="store_true", help="add photometric metrics and a part PNG")
    _object_args(p)
    _train_args(p, seed=False)

    p = sub.add_parser("ablate", help="pipeline with each component toggled off")
    p.add_argument("--object", "--spec", dest="spec", required=True, help="object JSON or preset name")
    p.add_argument("--out_dir", required=True)
    _object_args(p)
    _train_args(p, seed=False)

    p = sub.add_parser("replay", help="re-run a manifest and compare output hashes")
    p.add_argument("manifest")
    return parser


def _object_args(p):
    p.add_argument("--seed", type=int, help="object and training seed")
    p.add_argument("--samples", type=int, help="Gaussians per part")
    p.add_argument("--noise", type=float, help="center noise sigma")


def _train_args(p, seed=True):
    p.add_argument("--config", help="TrainConfig JSON applied over the gin configuration")
    p.add_argument("--k_parts", type=int)
    p.add_argument("--summaries", action="store_true", help="write TensorBoard scalars")
    if seed:
        p.add_argument("--seed", type=int, help="training seed")


def setup_logging(verbose):
    level = logging.DEBUG if verbose else logging.INFO
    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(message)s"))
        logger.addHandler(handler)
    logger.setLevel(level)
    tf.get_logger().setLevel(logging.ERROR)


def setup_threads(threads):
    if threads < 1:
        raise InvalidParameterError("[artigauss] --threads must be >= 1.")
    try:
        tf.config.threading.set_intra_op_parallelism_threads(threads)
        tf.config.threading.set_inter_op_parallelism_threads(threads)
    except RuntimeError:
        # runtime already initialized in this process
        logger.debug("[artigauss] Thread counts already fixed for this process.")
    tf.config.experimental.enable_op_determinism()


def _seed_override(args):
    if getattr(args, "seed", None) is not None:
        return args.seed
    value = os.environ.get(SEED_ENV)
    if value is None:
        return None
    try:
        return int(value)
    except ValueError:
        raise InvalidParameterError(f"[artigauss] {SEED_ENV} must be an integer, got '{value}'.")


def _merge(base, overrides):
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            value = _merge(merged[key], value)
        merged[key] = value
    return merged


def resolve_train_config(args, manifest):
    config = get_train_config(seed_override=_seed_override(args))
    if getattr(args, "config", None):
        manifest.add_input(args.config)
        overrides = load_json(args.config)
        if not isinstance(overrides, dict):
            raise InvalidInputError(f"[artigauss] {args.config} must hold a JSON object.")
        try:
            config = TrainConfig.from_dict(_merge(config.to_dict(), overrides))
        except TypeError as exc:
            raise InvalidInputError(f"[artigauss] Unknown training option in {args.config}: {exc}") from exc
    if getattr(args, "k_parts", None) is not None:
        config = config.replace(k_parts=args.k_parts)
    manifest.config = config.to_dict()
    manifest.seeds["training"] = config.seed
    return config


def _object(args, manifest):
    spec = load_object_spec(args.spec)
    if os.path.isfile(args.spec):
        manifest.add_input(args.spec)
    seed = _seed_override(args)
    if seed is not None:
        spec = spec.with_seed(seed)
    if getattr(args, "samples", None) is not None:
        spec = spec.with_samples(args.samples)
    if getattr(args, "noise", None) is not None:
        spec = ObjectSpec(spec.parts, spec.gaussian_scale, args.noise, spec.seed, spec.name)
    manifest.seeds["object"] = spec.seed
    return make_object(spec)


def _write_synth(obj, out_dir, manifest):
    paths = {name: os.path.join(out_dir, name) for name in ("state0.ply", "state1.ply", "ground_truth.json")}
    write_ply(paths["state0.ply"], obj.state0)
    write_ply(paths["state1.ply"], obj.state1)
    save_ground_truth(paths["ground_truth.json"], obj)
    for path in paths.values():
        manifest.add_output(path)
    return paths


def _train(state0, state1, config, out_dir, manifest, progress, summaries=False):
    summary_writer = tf.summary.create_file_writer(os.path.join(out_dir, "summaries")) if summaries else None
    log_path = os.path.join(out_dir, "train_log.jsonl")
    model = Trainer(config, summary_writer, log_path, progress).fit(state0, state1)
    logger.info("[artigauss] Final loss %.6g, static slot %d.", model.final_loss, model.static_part)

    model_path = os.path.join(out_dir, "model.h5")
    save_model(model_path, model)
    if len(model.repel_field) > 0:
        repel_path = os.path.join(out_dir, "repel_points.ply")
        write_repel_ply(repel_path, model.repel_field)
        manifest.add_output(repel_path)
    gin_path = os.path.join(out_dir, "config.gin")
    with open(gin_path, "w") as f:
        f.write(gin.config_str())
    manifest.gin_config = gin.config_str()
    for path in (model_path, log_path, gin_path):
        manifest.add_output(path)
    return model


def _write_report(report, out_dir, manifest, name="eval_report"):
    json_path = os.path.join(out_dir, name + ".json")
    csv_path = os.path.join(out_dir, name + ".csv")
    save_json(json_path, report.to_json())
    write_csv(csv_path, [report.to_csv_row(name)])
    manifest.add_output(json_path)
    manifest.add_output(csv_path)


def write_csv(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if v is None else repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _log_summary(report):
    for name, value in report.summary().items():
        if value is not None:
            logger.info("[artigauss]   %-22s %.6g", name, value)


def cmd_synth(args, manifest):
    obj = _object(args, manifest)
    _write_synth(obj, args.out_dir, manifest)
    logger.info("[artigauss] Wrote %d Gaussians per state to %s.", len(obj.state0), args.out_dir)


def cmd_fuse(args, manifest):
    state0, state1 = read_ply(args.state0, 0), read_ply(args.state1, 1)
    manifest.add_input(args.state0)
    manifest.add_input(args.state1)
    config = get_train_config(seed_override=_seed_override(args))
    report = fuse_states(state0, state1, not args.uniform_beta, config.hungarian_cutoff)
    canonical_path = os.path.join(args.out_dir, "canonical.ply")
    report_path = os.path.join(args.out_dir, "fusion.json")
    write_ply(canonical_path, report.canonical)
    save_json(report_path, report.to_json())
    manifest.add_output(canonical_path)
    manifest.add_output(report_path)
    logger.info("[artigauss] beta = %.6f (D01 %.6g, D10 %.6g).", report.beta, report.d01, report.d10)


def cmd_train(args, manifest):
    state0, state1 = read_ply(args.state0, 0), read_ply(args.state1, 1)
    manifest.add_input(args.state0)
    manifest.add_input(args.state1)
    config = resolve_train_config(args, manifest)
    _train(state0, state1, config, args.out_dir, manifest, not args.no_progress, args.summaries)


def cmd_eval(args, manifest):
    model = load_model(args.model)
    state0, state1 = read_ply(args.state0, 0), read_ply(args.state1, 1)
    gt = load_ground_truth(args.gt, state0, state1)
    for path in (args.model, args.state0, args.state1, args.gt):
        manifest.add_input(path)
    report = evaluate(model, gt, render=args.render)
    _write_report(report, args.out_dir, manifest)
    if args.summaries:
        with tf.summary.create_file_writer(os.path.join(args.out_dir, "summaries")).as_default():
            create_eval_summaries(report)
    _log_summary(report)


def cmd_render(args, manifest):
    state = read_ply(args.ply)
    manifest.add_input(args.ply)
    if args.model:
        manifest.add_input(args.model)
        img = visualize_parts(load_model(args.model), state, args.view_axis, tuple(args.resolution))
    else:
        view = OrthographicView.fit(state.centers, args.view_axis, args.view_sign)
        caption = "state {}".format("canonical" if state.state_tag is None else state.state_tag)
        img = tile_images([render_image(state, view, tuple(args.resolution))], [caption])
    path = os.path.join(args.out_dir, "render.png")
    save_png(img, path)
    manifest.add_output(path)


def _run_pipeline(obj, config, out_dir, manifest, progress, render=False, summaries=False):
    os.makedirs(out_dir, exist_ok=True)
    _write_synth(obj, out_dir, manifest)
    model = _train(obj.state0, obj.state1, config, out_dir, manifest, progress, summaries)
    report = evaluate(model, obj.ground_truth(), render=render)
    _write_report(report, out_dir, manifest)
    if render:
        path = os.path.join(out_dir, "parts.png")
        save_png(visualize_parts(model, obj.state1), path)
        manifest.add_output(path)
    return report


def cmd_pipeline(args, manifest):
    obj = _object(args, manifest)
    config = resolve_train_config(args, manifest)
    report = _run_pipeline(obj, config, args.out_dir, manifest, not args.no_progress, args.render, args.summaries)
    _log_summary(report)


def ablation_configs(config: TrainConfig):
    return {
        "full": config,
        "no_part": config.replace(k_parts=1),
        "no_repel": config.replace(repel=dataclasses.replace(config.repel, enabled=False)),
        "no_physics": config.replace(physics_terms=()),
        "no_motion_aware_beta": config.replace(motion_aware_beta=False),
    }


def cmd_ablate(args, manifest):
    obj = _object(args, manifest)
    config = resolve_train_config(args, manifest)
    reports = {}
    for name, variant in ablation_configs(config).items():
        logger.info("[artigauss] Ablation run '%s'.", name)
        reports[name] = _run_pipeline(obj, variant, os.path.join(args.out_dir, name), manifest,
                                      not args.no_progress, summaries=args.summaries)

    rows = ablation_deltas(reports)
    if reports["full"].metadata.get("fusion_beta") == 0.5:
        logger.warning("[artigauss] Both states are equally rich (beta = 0.5), the no_motion_aware_beta run "
                       "repeats the full one.")
    path = os.path.join(args.out_dir, "ablation.csv")
    write_csv(path, rows)
    manifest.add_output(path)
    for row in rows:
        changes = ", ".join("{} {:+.4g}".format(m, row["delta_" + m]) for m in SUMMARY_METRICS
                            if row["delta_" + m] is not None)
        logger.info("[artigauss] %-22s %s", row["variant"], changes)


def cmd_replay(args):
    manifest = RunManifest.load(args.manifest)
    logger.info("[artigauss] Replaying: artigauss %s", " ".join(manifest.command))
    code = main(manifest.command)
    if code != EXIT_OK:
        return code
    mismatched = manifest.compare_outputs()
    for path in mismatched:
        logger.error("[artigauss] Output differs from the manifest: %s", path)
    if mismatched:
        return EXIT_USAGE
    logger.info("[artigauss] All %d outputs reproduced.", len(manifest.outputs))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "fuse": cmd_fuse,
    "train": cmd_train,
    "eval": cmd_eval,
    "render": cmd_render,
    "pipeline": cmd_pipeline,
    "ablate": cmd_ablate,
}


def run(args, argv):
    if args.command == "replay":
        return cmd_replay(args)

    setup_threads(args.threads)
    gin.clear_config()
    gin.parse_config_files_and_bindings([DEFAULT_GIN] + args.gin_config, args.gin_bindings, finalize_config=False)
    os.makedirs(args.out_dir, exist_ok=True)

    manifest = RunManifest(command=list(argv), threads=args.threads)
    COMMANDS[args.command](args, manifest)
    if not manifest.gin_config:
        manifest.gin_config = gin.config_str()
    manifest.save(os.path.join(args.out_dir, "manifest.json"))
    return EXIT_OK


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    setup_logging(args.verbose)

    try:
        return run(args, argv)
    except InvalidInputError as exc:
        logger.error("%s", exc)
        return EXIT_INPUT
    except NumericalFailure as exc:
        logger.error("%s (component: %s, step: %s)", exc, exc.component, exc.step)
        return EXIT_NUMERICAL
    except OSError as exc:
        logger.error("[artigauss] %s", exc)
        return EXIT_INPUT
    except ArtigaussError as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except ValueError as exc:
        logger.error("[artigauss] %s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
