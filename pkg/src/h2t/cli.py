"""Command line entry point: synth, cluster, project, pam, probe, oracle,
anomaly, pipeline, describe.

Progress and log lines go to stderr, machine-readable output to stdout or
files. Exit codes: 0 ok, 2 config, 3 data, 4 numeric, 5 internal. Every
stochastic stage takes an explicit --seed; there is no hidden entropy.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import anomaly as _anomaly
from . import attention as _attention
from . import pam as _pam
from .errors import ConfigError, DataError, EXIT_INTERNAL, H2TError
from .evaluation import TaskConfig, run_experiment
from .feature_store import (ClassSpec, SyntheticSpec, file_sha256,
                            generate_synthetic_cohort, load_manifest,
                            paired_unit_archetypes, random_unit_archetypes,
                            read_slide_arrays)
from .pipeline import (load_pipeline_config, parse_kv_file, run_pipeline,
                       parse_variant_spec)
from .projection import (load_representation, load_representation_dir,
                         project_batch)
from .prototypes import fit_prototypes, load_prototypes, save_prototypes
from .tensor_file import read_tensors

log = logging.getLogger("h2t")


def _threads_default(value):
    if value and value > 0:
        return value
    env = os.environ.get("H2T_THREADS", "")
    if env.isdigit() and int(env) > 0:
        return int(env)
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------

def _cmd_synth(args):
    grid = args.grid.lower().split("x")
    if len(grid) != 2:
        raise ConfigError("--grid expects WIDTHxHEIGHT")
    width, height = int(grid[0]), int(grid[1])
    if args.style == "paired":
        if args.archetypes % 2:
            raise ConfigError("paired style needs an even archetype count")
        arch = paired_unit_archetypes(args.archetypes // 2, args.dim,
                                      args.pair_angle, args.seed)
    else:
        arch = random_unit_archetypes(args.archetypes, args.dim, args.seed)

    g = args.archetypes
    classes = []
    if args.style == "paired" and args.classes == 2:
        hi, lo = args.tilt, 1.0
        mix_a = np.array([hi if i % 2 == 0 else lo for i in range(g)])
        mix_b = np.array([lo if i % 2 == 0 else hi for i in range(g)])
        classes.append(ClassSpec("classA", tuple(mix_a / mix_a.sum())))
        classes.append(ClassSpec("classB", tuple(mix_b / mix_b.sum())))
    else:
        rng = np.random.default_rng(args.seed + 1)
        for c in range(args.classes):
            mix = rng.dirichlet(np.full(g, args.tilt))
            classes.append(ClassSpec(f"class{chr(ord('A') + c)}", tuple(mix)))

    slides = {}
    for part in args.slides.split(","):
        cohort, _, count = part.partition("=")
        if not count:
            raise ConfigError("--slides expects cohort=count[,cohort=count...]")
        slides[cohort.strip()] = int(count)

    spec = SyntheticSpec(
        archetypes=arch, classes=classes, slides_per_class=slides,
        patches_per_slide=args.patches, noise_sigma=args.noise,
        grid_width=width, grid_height=height, layout=args.layout,
    )
    manifest = generate_synthetic_cohort(spec, args.seed, args.out_dir)
    log.info("wrote %d slides under %s", len(manifest.slides), args.out_dir)
    print(os.path.join(args.out_dir, "manifest.json"))
    return 0


def _cmd_cluster(args):
    manifest = load_manifest(args.manifest)
    prototypes = fit_prototypes(
        manifest, args.k, epochs=args.epochs, batch_size=args.batch_size,
        seed=args.seed,
    )
    save_prototypes(prototypes, args.out)
    log.info("fit k=%d on %d slides, final objective %.6f",
             args.k, len(manifest.slides), prototypes.objective_log[-1])
    print(args.out)
    return 0


def _cmd_project(args):
    manifest = load_manifest(args.manifest)
    prototypes = load_prototypes(args.prototypes)
    variant, param = parse_variant_spec(
        args.variant if args.param is None else f"{args.variant}:{args.param}"
    )
    report = project_batch(
        manifest, prototypes, variant, param, args.out_dir,
        resume=args.resume, threads=_threads_default(args.threads),
        t_mode=args.t_mode,
    )
    log.info("projected %d, skipped %d, failed %d",
             len(report.written), len(report.skipped), len(report.failures))
    if report.failures:
        log.warning("failure report: %s",
                    os.path.join(args.out_dir, "project_failures.json"))
        return DataError.exit_code
    return 0


def _cmd_pam(args):
    if args.pam_cmd == "build":
        manifest = load_manifest(args.manifest)
        prototypes = load_prototypes(args.prototypes)
        os.makedirs(args.out_dir, exist_ok=True)
        for entry in manifest.slides:
            arrays = read_slide_arrays(manifest.slide_path(entry))
            pam = _pam.build_pam(arrays, prototypes)
            _pam.save_pam(pam, os.path.join(args.out_dir, entry.slide_id + ".h2tm"))
        log.info("built %d pattern maps", len(manifest.slides))
        return 0
    pam = _pam.load_pam(args.pam)
    if args.pam_cmd == "render":
        _pam.render_pam(pam, args.out)
        print(args.out)
        return 0
    if args.pam_cmd == "hist":
        values = _pam.histogram(pam)
        print(json.dumps([float(v) for v in values]))
        return 0
    if args.pam_cmd == "pcm":
        gammas = [int(g) for g in args.gamma.split(",")]
        stacked = _pam.stacked_colocalization(pam, gammas, args.pcm_mode)
        print(json.dumps({"gammas": gammas, "values": stacked.tolist()}))
        return 0
    if args.pam_cmd == "onehot":
        _pam.export_one_hot(pam, args.out)
        print(args.out)
        return 0
    raise ConfigError(f"unknown pam subcommand {args.pam_cmd!r}")


def _cmd_probe(args):
    manifest = load_manifest(args.manifest)
    kv = parse_kv_file(args.task)
    for key in ("task_name", "task_labels", "discovery_cohorts", "evaluation_cohorts"):
        if key not in kv:
            raise ConfigError(f"task config missing {key!r}")
    task = TaskConfig(
        name=kv["task_name"],
        labels=tuple(x.strip() for x in kv["task_labels"].split(",")),
        discovery_cohorts=tuple(x.strip() for x in kv["discovery_cohorts"].split(",")),
        evaluation_cohorts=tuple(x.strip() for x in kv["evaluation_cohorts"].split(",")),
        n_folds=args.folds,
        seed=args.seed,
        probe_epochs=int(kv.get("probe_epochs", 50)),
        probe_lr=float(kv.get("probe_lr", 1e-3)),
        probe_batch=int(kv.get("probe_batch", 32)),
        standardize=kv.get("standardize", "false").lower() in ("1", "true", "yes"),
    )
    sources = {}
    if args.repr_dir:
        sources[os.path.basename(os.path.normpath(args.repr_dir))] = args.repr_dir
    for item in args.repr or []:
        name, _, directory = item.partition("=")
        if not directory:
            raise ConfigError("--repr expects NAME=DIR")
        sources[name] = directory
    if not sources:
        raise ConfigError("no representations: pass --repr-dir or --repr")
    representations = {
        name: {sid: rep.flat() for sid, rep in load_representation_dir(d).items()}
        for name, d in sources.items()
    }
    report = run_experiment(manifest, representations, task)
    os.makedirs(args.out_dir, exist_ok=True)
    json_path = os.path.join(args.out_dir, "report.json")
    text_path = os.path.join(args.out_dir, "report.txt")
    with open(json_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    with open(text_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    sys.stdout.write(report.to_text())
    return 0


def _cmd_oracle(args):
    weights = _attention.load_transformer_weights(args.weights)
    if args.beta is not None:
        weights.agg.beta = args.beta
        if weights.self_attn is not None:
            weights.self_attn.beta = args.beta
    variant = args.arch or weights.variant
    positions, feats = read_slide_arrays(args.input)
    x = feats.astype(np.float64)
    if args.pe_mode != "none":
        encoding = _attention.positional_encoding_batch(positions, x.shape[1])
        x = x + encoding if args.pe_mode == "add" else np.concatenate([x, encoding], axis=1)
    logits = _attention.transformer_forward(x, variant, weights)
    print(json.dumps({"variant": variant, "logits": [float(v) for v in logits]}))
    return 0


def _cmd_anomaly(args):
    train_manifest = load_manifest(args.train_manifest)
    score_manifest = load_manifest(args.score_manifest)
    reps = load_representation_dir(args.repr_dir)

    def flat_for(entry):
        if entry.slide_id not in reps:
            raise DataError(f"no representation for slide {entry.slide_id!r} in {args.repr_dir}")
        return reps[entry.slide_id].flat()

    train = np.stack([flat_for(e) for e in train_manifest.slides])
    forest = _anomaly.fit_forest(train, n_trees=args.trees,
                                 subsample=args.subsample, seed=args.seed)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slide_id", "normality_score"])
        for entry in score_manifest.slides:
            score = _anomaly.normality_score(forest, flat_for(entry))
            writer.writerow([entry.slide_id, f"{score:.6f}"])
    log.info("scored %d slides -> %s", len(score_manifest.slides), args.out)
    print(args.out)
    return 0


def _cmd_pipeline(args):
    config = load_pipeline_config(args.config)
    result = run_pipeline(config)
    for name, state in result.stages:
        log.info("stage %-28s %s", name, state)
    print(result.report_text)
    return 0


def _cmd_describe(args):
    path = args.artifact
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
    except OSError as exc:
        raise DataError(f"unreadable artifact {path}: {exc}") from exc
    digest = file_sha256(path)[:12]
    try:
        if magic == b"H2T1":
            positions, feats = read_slide_arrays(path)
            print(f"H2T1 patches={len(feats)} d={feats.shape[1]} sha256={digest}")
        elif magic == b"H2TP":
            p = load_prototypes(path)
            print(f"H2TP k={p.k} d={p.feature_dim} seed={p.seed} epochs={p.epochs_run} "
                  f"manifest={p.source_manifest_hash[:12] or '-'} sha256={digest}")
        elif magic == b"H2TR":
            rep = load_representation(path)
            param = "" if rep.param is None else f"({rep.param:g})"
            print(f"H2TR variant={rep.variant}{param} K={rep.matrix.shape[0]} "
                  f"d={rep.matrix.shape[1]} slide={rep.slide_id} sha256={digest}")
        elif magic == b"H2TM":
            pam = _pam.load_pam(path)
            print(f"H2TM k={pam.k} width={pam.width} height={pam.height} sha256={digest}")
        elif magic == b"H2TT":
            tensors = read_tensors(path)
            shapes = ", ".join(f"{k}{list(v.shape)}" for k, v in tensors.items())
            print(f"H2TT tensors={len(tensors)} [{shapes}] sha256={digest}")
        else:
            raise DataError("unknown magic")
    except DataError:
        print("unknown or damaged artifact", file=sys.stderr)
        return DataError.exit_code
    return 0


# ---------------------------------------------------------------------------
# argument parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="h2t",
        description="Prototype-mined whole-slide representations and evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic cohort")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--archetypes", type=int, default=8)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--slides", default="discovery=30,evaluation=20",
                   help="cohort=count[,cohort=count...] slides per class")
    p.add_argument("--patches", type=int, default=128)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--grid", default="16x16")
    p.add_argument("--layout", choices=("random", "banded"), default="random")
    p.add_argument("--style", choices=("random", "paired"), default="random")
    p.add_argument("--pair-angle", type=float, default=0.45)
    p.add_argument("--tilt", type=float, default=2.5)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("cluster", help="mine prototypical patterns")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--batch-size", type=int, default=4096)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_cluster)

    p = sub.add_parser("project", help="project slides against prototypes")
    p.add_argument("--manifest", required=True)
    p.add_argument("--prototypes", required=True)
    p.add_argument("--variant", required=True,
                   help="h, h-w, h-t, h-k, or h-fk (param via --param)")
    p.add_argument("--param", default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--t-mode", choices=("above", "below"), default="above")
    p.add_argument("--threads", type=int, default=0)
    p.set_defaults(func=_cmd_project)

    p = sub.add_parser("pam", help="pattern assignment maps and features")
    pam_sub = p.add_subparsers(dest="pam_cmd", required=True)
    b = pam_sub.add_parser("build")
    b.add_argument("--manifest", required=True)
    b.add_argument("--prototypes", required=True)
    b.add_argument("--out-dir", required=True)
    r = pam_sub.add_parser("render")
    r.add_argument("--pam", required=True)
    r.add_argument("--out", required=True)
    h = pam_sub.add_parser("hist")
    h.add_argument("--pam", required=True)
    c = pam_sub.add_parser("pcm")
    c.add_argument("--pam", required=True)
    c.add_argument("--gamma", default="1")
    c.add_argument("--pcm-mode", choices=("surrounded", "all-centers"),
                   default="surrounded")
    o = pam_sub.add_parser("onehot")
    o.add_argument("--pam", required=True)
    o.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_pam)

    p = sub.add_parser("probe", help="linear probing with stratified folds")
    p.add_argument("--manifest", required=True)
    p.add_argument("--repr-dir", default=None)
    p.add_argument("--repr", action="append",
                   help="NAME=DIR, repeatable for method comparison")
    p.add_argument("--task", required=True, help="key=value task config")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", default="probe-report")
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("oracle", help="attention forward pass on one slide")
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--arch", choices=("t1", "t2"), default=None)
    p.add_argument("--pe-mode", choices=("add", "concat", "none"), default="add")
    p.add_argument("--beta", type=float, default=None)
    p.set_defaults(func=_cmd_oracle)

    p = sub.add_parser("anomaly", help="isolation-forest normality scoring")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--score-manifest", required=True)
    p.add_argument("--repr-dir", required=True)
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--subsample", type=int, default=256)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_anomaly)

    p = sub.add_parser("pipeline", help="cluster, project, probe, report")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_pipeline)

    p = sub.add_parser("describe", help="summarize any toolkit artifact")
    p.add_argument("artifact")
    p.set_defaults(func=_cmd_describe)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="h2t: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except H2TError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except Exception as exc:  # pragma: no cover - defensive
        log.error("internal error: %s", exc)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
