"""End-to-end driver: cluster, project, pattern-map features, probe, report.

Every stage's outputs are content-addressed by a digest of its input file
digests plus its parameters, so reruns with unchanged inputs skip cleanly
and changed inputs land in fresh directories. Config files use a flat
``key = value`` syntax with '#' comments and comma-separated lists.
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, H2TError
from .evaluation import TaskConfig, run_experiment
from .feature_store import file_sha256, load_manifest, read_slide_arrays
from .pam import build_pam, histogram, stacked_colocalization
from .projection import (SlideRepresentation, load_representation_dir,
                         project_batch, save_representation,
                         representation_path, validate_variant)
from .prototypes import fit_prototypes, load_prototypes, save_prototypes

log = logging.getLogger("h2t")


def parse_kv_file(path):
    """Flat key=value config: one pair per line, '#' comments, later keys win."""
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, value = line.split("=", 1)
                values[key.strip()] = value.strip()
    except OSError as exc:
        raise ConfigError(f"unreadable config {path}: {exc}") from exc
    return values


def _parse_list(text):
    return [item.strip() for item in text.split(",") if item.strip()]


def parse_variant_spec(text):
    """Parse 'h-k:128' or 'h-w' into a validated (variant, param) pair."""
    if ":" in text:
        name, param = text.split(":", 1)
        return validate_variant(name.strip(), float(param))
    return validate_variant(text.strip(), None)


def _parse_bool(text, key):
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


@dataclass
class PipelineConfig:
    discovery_manifest: str
    evaluation_manifest: str
    out_root: str
    seed: int
    task_name: str
    task_labels: tuple
    k: int = 16
    epochs: int = 25
    batch_size: int = 4096
    variants: tuple = (("h-w", None), ("h-k", 128.0))
    gammas: tuple = (1,)
    include_hist: bool = True
    include_pcm: bool = True
    pcm_mode: str = "surrounded"
    t_mode: str = "above"
    probe_epochs: int = 50
    probe_lr: float = 1e-3
    probe_batch: int = 32
    folds: int = 5
    threads: int = 0                # 0 -> H2T_THREADS env or logical cores

    def resolved_threads(self):
        if self.threads > 0:
            return self.threads
        env = os.environ.get("H2T_THREADS", "")
        if env.isdigit() and int(env) > 0:
            return int(env)
        return os.cpu_count() or 1


def load_pipeline_config(path) -> PipelineConfig:
    kv = parse_kv_file(path)
    required = ("discovery_manifest", "evaluation_manifest", "out_root", "seed",
                "task_name", "task_labels")
    for key in required:
        if key not in kv:
            raise ConfigError(f"pipeline config missing required key {key!r}")
    base = os.path.dirname(os.path.abspath(path))

    def respath(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    cfg = PipelineConfig(
        discovery_manifest=respath(kv["discovery_manifest"]),
        evaluation_manifest=respath(kv["evaluation_manifest"]),
        out_root=respath(kv["out_root"]),
        seed=int(kv["seed"]),
        task_name=kv["task_name"],
        task_labels=tuple(_parse_list(kv["task_labels"])),
    )
    if "k" in kv:
        cfg.k = int(kv["k"])
    if "epochs" in kv:
        cfg.epochs = int(kv["epochs"])
    if "batch_size" in kv:
        cfg.batch_size = int(kv["batch_size"])
    if "variants" in kv:
        cfg.variants = tuple(parse_variant_spec(v) for v in _parse_list(kv["variants"]))
    if "gammas" in kv:
        cfg.gammas = tuple(int(g) for g in _parse_list(kv["gammas"]))
    if "include_hist" in kv:
        cfg.include_hist = _parse_bool(kv["include_hist"], "include_hist")
    if "include_pcm" in kv:
        cfg.include_pcm = _parse_bool(kv["include_pcm"], "include_pcm")
    if "pcm_mode" in kv:
        cfg.pcm_mode = kv["pcm_mode"]
    if "t_mode" in kv:
        cfg.t_mode = kv["t_mode"]
    if "probe_epochs" in kv:
        cfg.probe_epochs = int(kv["probe_epochs"])
    if "probe_lr" in kv:
        cfg.probe_lr = float(kv["probe_lr"])
    if "probe_batch" in kv:
        cfg.probe_batch = int(kv["probe_batch"])
    if "folds" in kv:
        cfg.folds = int(kv["folds"])
    if "threads" in kv:
        cfg.threads = int(kv["threads"])
    return cfg


def validate_pipeline_config(config: PipelineConfig):
    for path in (config.discovery_manifest, config.evaluation_manifest):
        if not os.path.exists(path):
            raise ConfigError(f"manifest does not exist: {path}")
    if config.seed < 0:
        raise ConfigError("seed must be non-negative")
    if len(config.task_labels) < 2:
        raise ConfigError("task_labels needs at least two labels")
    for variant, param in config.variants:
        validate_variant(variant, param)
    if any(g < 1 for g in config.gammas):
        raise ConfigError("gammas must be >= 1")


def variant_slug(variant, param):
    if param is None:
        return variant
    text = f"{param:g}".replace(".", "p")
    return f"{variant}{text}"


@dataclass
class PipelineResult:
    stages: list = field(default_factory=list)     # (name, "built" | "cached")
    report_json: str = ""
    report_text: str = ""
    report: object = None


def _digest(*parts):
    h = hashlib.sha256()
    for part in parts:
        h.update(part.encode() if isinstance(part, str) else part)
        h.update(b"\x1f")
    return h.hexdigest()[:16]


def _manifest_digest(manifest):
    parts = [manifest.content_hash()]
    for entry in manifest.slides:
        parts.append(entry.slide_id)
        parts.append(file_sha256(manifest.slide_path(entry)))
    return _digest(*parts)


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    """Run cluster -> project -> pattern-map features -> probe -> report.

    Raises H2TError subclasses with a ``[stage:...]`` prefix; completed
    stages are noted in out_root/PARTIAL.txt when a later stage fails.
    """
    validate_pipeline_config(config)
    result = PipelineResult()
    stage = "config"
    try:
        discovery = load_manifest(config.discovery_manifest)
        evaluation = load_manifest(config.evaluation_manifest)
        disc_cohorts = {e.cohort for e in discovery.slides}
        eval_cohorts = {e.cohort for e in evaluation.slides}
        if disc_cohorts & eval_cohorts:
            raise ConfigError(
                f"cohort names overlap between manifests: {sorted(disc_cohorts & eval_cohorts)}"
            )
        combined = _merge_manifests(discovery, evaluation)
        os.makedirs(config.out_root, exist_ok=True)

        disc_digest = _manifest_digest(discovery)
        eval_digest = _manifest_digest(evaluation)

        # stage: cluster ---------------------------------------------------
        stage = "cluster"
        proto_key = _digest(disc_digest, f"k={config.k}", f"epochs={config.epochs}",
                            f"batch={config.batch_size}", f"seed={config.seed}")
        proto_dir = os.path.join(config.out_root, "prototypes")
        os.makedirs(proto_dir, exist_ok=True)
        proto_path = os.path.join(proto_dir, f"{proto_key}.h2tp")
        if os.path.exists(proto_path):
            prototypes = load_prototypes(proto_path)
            result.stages.append((stage, "cached"))
        else:
            prototypes = fit_prototypes(
                discovery, config.k, epochs=config.epochs,
                batch_size=config.batch_size, seed=config.seed,
            )
            save_prototypes(prototypes, proto_path)
            result.stages.append((stage, "built"))
        log.info("cluster: %s (%s)", proto_path, result.stages[-1][1])

        # stage: project ----------------------------------------------------
        threads = config.resolved_threads()
        methods = {}
        method_keys = []
        for variant, param in config.variants:
            stage = f"project:{variant_slug(variant, param)}"
            key = _digest(proto_key, disc_digest, eval_digest, variant,
                          f"{param}", config.t_mode)
            method_keys.append(f"{variant_slug(variant, param)}:{key}")
            out_dir = os.path.join(config.out_root, "repr", variant_slug(variant, param), key)
            stamp = os.path.join(out_dir, "STAMP")
            if os.path.exists(stamp):
                result.stages.append((stage, "cached"))
            else:
                os.makedirs(out_dir, exist_ok=True)
                report = project_batch(combined, prototypes, variant, param,
                                       out_dir, threads=threads, t_mode=config.t_mode)
                if report.failures:
                    raise DataError(
                        f"{len(report.failures)} slides failed projection, "
                        f"see {os.path.join(out_dir, 'project_failures.json')}"
                    )
                with open(stamp, "w", encoding="utf-8") as fh:
                    fh.write(key + "\n")
                result.stages.append((stage, "built"))
            log.info("%s (%s)", stage, result.stages[-1][1])
            reps = load_representation_dir(out_dir)
            methods[variant_slug(variant, param)] = {
                sid: rep.flat() for sid, rep in reps.items()
            }

        # stage: pattern-map features ---------------------------------------
        if config.include_hist or config.include_pcm:
            stage = "pam"
            key = _digest(proto_key, disc_digest, eval_digest,
                          ",".join(map(str, config.gammas)), config.pcm_mode)
            method_keys.append(f"pam:{key}")
            pam_dir = os.path.join(config.out_root, "repr", "pam-features", key)
            stamp = os.path.join(pam_dir, "STAMP")
            if os.path.exists(stamp):
                result.stages.append((stage, "cached"))
            else:
                os.makedirs(pam_dir, exist_ok=True)
                _build_pam_features(combined, prototypes, config, pam_dir)
                with open(stamp, "w", encoding="utf-8") as fh:
                    fh.write(key + "\n")
                result.stages.append((stage, "built"))
            log.info("pam features (%s)", result.stages[-1][1])
            hist_reps = {}
            pcm_reps = {}
            for sid, rep in load_representation_dir(pam_dir).items():
                base = sid.rsplit("::", 1)[0]
                if rep.variant == "hist":
                    hist_reps[base] = rep.flat()
                elif rep.variant == "pcm":
                    pcm_reps[base] = rep.flat()
            if config.include_hist:
                methods["hist"] = hist_reps
            if config.include_pcm:
                methods["pcm"] = pcm_reps
            if config.include_hist and config.include_pcm:
                methods["hist+pcm"] = {
                    sid: np.concatenate([hist_reps[sid], pcm_reps[sid]])
                    for sid in hist_reps
                }

        # stage: probe -------------------------------------------------------
        stage = "probe"
        task = TaskConfig(
            name=config.task_name,
            labels=config.task_labels,
            discovery_cohorts=tuple(sorted(disc_cohorts)),
            evaluation_cohorts=tuple(sorted(eval_cohorts)),
            n_folds=config.folds,
            seed=config.seed,
            probe_epochs=config.probe_epochs,
            probe_lr=config.probe_lr,
            probe_batch=config.probe_batch,
        )
        # upstream stage keys carry the feature provenance (prototypes,
        # variant params, gammas, modes), so the report key shifts whenever
        # any input to any probed method changes
        probe_key = _digest(
            disc_digest, eval_digest,
            ",".join(sorted(method_keys)), ",".join(sorted(methods)),
            config.task_name, ",".join(config.task_labels),
            f"folds={config.folds}", f"seed={config.seed}",
            f"pe={config.probe_epochs}", f"lr={config.probe_lr}",
            f"pb={config.probe_batch}",
        )
        report_dir = os.path.join(config.out_root, "report", probe_key)
        json_path = os.path.join(report_dir, "report.json")
        text_path = os.path.join(report_dir, "report.txt")
        if os.path.exists(json_path) and os.path.exists(text_path):
            result.stages.append((stage, "cached"))
        else:
            os.makedirs(report_dir, exist_ok=True)
            report = run_experiment(combined, methods, task)
            with open(json_path, "w", encoding="utf-8") as fh:
                fh.write(report.to_json())
            with open(text_path, "w", encoding="utf-8") as fh:
                fh.write(report.to_text())
            result.report = report
            result.stages.append((stage, "built"))
        log.info("probe report: %s (%s)", text_path, result.stages[-1][1])
        result.report_json = json_path
        result.report_text = text_path
        return result
    except H2TError as exc:
        _note_partial(config.out_root, result.stages, stage, exc)
        raise type(exc)(f"[stage:{stage}] {exc}") from exc


def _merge_manifests(discovery, evaluation):
    from .feature_store import CohortManifest, SlideEntry

    entries = []
    for manifest in (discovery, evaluation):
        for entry in manifest.slides:
            entries.append(SlideEntry(
                entry.slide_id, manifest.slide_path(entry), entry.label,
                entry.cohort, entry.patient_id,
            ))
    labels = list(dict.fromkeys(discovery.label_set + evaluation.label_set))
    return CohortManifest(entries, labels, base_dir="/")


def _build_pam_features(manifest, prototypes, config, out_dir):
    n_gamma = float(len(config.gammas))
    for entry in manifest.slides:
        positions, feats = read_slide_arrays(manifest.slide_path(entry))
        pam = build_pam((positions, feats), prototypes)
        if config.include_hist:
            hist = histogram(pam).astype(np.float32).reshape(prototypes.k, 1)
            rep = SlideRepresentation(entry.slide_id + "::hist", "hist", None, hist)
            save_representation(rep, representation_path(out_dir, rep.slide_id))
        if config.include_pcm:
            pcm = stacked_colocalization(pam, config.gammas, config.pcm_mode).astype(np.float32)
            rep = SlideRepresentation(entry.slide_id + "::pcm", "pcm", n_gamma, pcm)
            save_representation(rep, representation_path(out_dir, rep.slide_id))


def _note_partial(out_root, stages, failed_stage, exc):
    try:
        os.makedirs(out_root, exist_ok=True)
        with open(os.path.join(out_root, "PARTIAL.txt"), "w", encoding="utf-8") as fh:
            fh.write("pipeline aborted\n")
            for name, state in stages:
                fh.write(f"completed: {name} ({state})\n")
            fh.write(f"failed: {failed_stage}: {exc}\n")
    except OSError:
        pass
