"""Command-line front end.

Every subcommand reads a flat ``key = value`` config file (``--config``),
overridden by ``--key value`` flags, over built-in defaults.  Unknown keys are
errors.  Each run writes ``manifest.json`` into its output directory, on
failure as well as on success.  Exit codes: 0 success, 2 invalid input or
configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import platform
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__
from .errors import AlignetError, ConfigError, FormatError, NumericError, StageError, ValidationError
from .evaluation import (
    ooo_accuracy,
    loo_noise_ceiling,
    pca_explained_variance,
    representation_shift,
    rsa_score,
    rsm_pearson,
    save_summary,
    save_table,
    load_summary,
    uncertainty_rt_correlation,
)
from .labeler import label_triplets, load_alignet, save_alignet
from .sampling import (
    KMeansResult,
    SamplerConfig,
    elbow_select,
    kmeans,
    sample_class_boundary,
    sample_cluster_boundary,
    sample_random,
)
from .store import (
    EmbeddingMatrix,
    HierarchyLabels,
    TripletDataset,
    file_sha256,
    load_embeddings,
    load_labels,
    load_rts,
    load_triplets,
    save_embeddings,
    save_labels,
    save_rts,
    save_triplets,
    atomic_write_text,
)
from .student import (
    Architecture,
    DistillConfig,
    StudentParams,
    load_student,
    save_student,
    student_forward,
    teacher_agreement,
    train_student,
)
from .synth import (
    HierarchySpec,
    corrupt_teacher,
    generate_hierarchy,
    nuisance_view,
    simulate_responses,
    simulate_rts,
)
from .ud import AffineTransform, UdConfig, apply_affine, fit_ud, load_transform, save_transform

REQUIRED = object()
EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


@dataclass(frozen=True)
class Key:
    name: str
    kind: str
    default: object = REQUIRED
    help: str = ""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{text!r} is not a boolean")


def _convert(key: Key, raw: str, base: Path | None):
    try:
        if key.kind == "int":
            return int(raw)
        if key.kind == "float":
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError("not finite")
            return v
        if key.kind == "bool":
            return _parse_bool(raw)
        if key.kind == "floats":
            return tuple(float(t) for t in raw.replace(",", " ").split())
        if key.kind == "path":
            if raw == "":
                return ""
            p = Path(raw).expanduser()
            return p if p.is_absolute() or base is None else base / p
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for key '{key.name}': {exc}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        key, sep, value = s.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key = key.strip()
        if key in out:
            raise ConfigError(f"{source}:{lineno}: key '{key}' given twice")
        out[key] = value.strip()
    return out


def resolve(keys: tuple[Key, ...], config: dict[str, str], flags: dict[str, str],
            config_dir: Path | None = None) -> dict:
    """Defaults, then config file values, then flags."""
    by_name = {k.name: k for k in keys}
    for name in config:
        if name not in by_name:
            raise ConfigError(f"unknown config key '{name}'")
    values = {}
    for k in keys:
        if k.name in flags:
            values[k.name] = _convert(k, flags[k.name], None)
        elif k.name in config:
            values[k.name] = _convert(k, config[k.name], config_dir)
        elif k.default is REQUIRED:
            raise ConfigError(f"missing required key '{k.name}'")
        else:
            values[k.name] = k.default
    return values


# ---------------------------------------------------------------------------
# run bookkeeping
# ---------------------------------------------------------------------------


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, tuple):
        return list(v)
    return v


class Run:
    """Tracks inputs and outputs of one command and writes its manifest."""

    def __init__(self, command: str, out: Path, values: dict):
        self.command = command
        self.out = Path(out)
        self.values = values
        self.inputs: dict[str, dict] = {}
        self.outputs: dict[str, str] = {}
        self.extra: dict = {}
        self.started = time.perf_counter()

    def input(self, key: str, path=None) -> Path:
        path = Path(self.values[key] if path is None else path)
        self.inputs[key] = {"path": str(path), "sha256": file_sha256(path)}
        return path

    def path(self, name: str) -> Path:
        self.outputs[name] = ""
        return self.out / name

    def manifest(self, status: str, error: str | None, code: int) -> dict:
        outputs = {}
        for name in self.outputs:
            p = self.out / name
            outputs[name] = file_sha256(p) if p.exists() else None
        seed = self.values.get("seed")
        return {
            "command": self.command,
            "status": status,
            "exit_code": code,
            "error": error,
            "seed": seed,
            "config": {k: _jsonable(v) for k, v in sorted(self.values.items())},
            "inputs": self.inputs,
            "outputs": outputs,
            "wall_time_s": round(time.perf_counter() - self.started, 6),
            "versions": {"alignet": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()},
            **self.extra,
        }

    def write_manifest(self, status: str, error: str | None = None, code: int = 0) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        text = json.dumps(self.manifest(status, error, code), indent=2, sort_keys=True) + "\n"
        atomic_write_text(self.out / "manifest.json", text)


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return exit_code_for(exc.cause)
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    return EXIT_INVALID


# ---------------------------------------------------------------------------
# shared keys
# ---------------------------------------------------------------------------

OUT = Key("out", "path", REQUIRED, "output directory")
SEED = Key("seed", "int", REQUIRED, "random seed, never taken from the clock")
RUNTIME = (
    Key("threads", "int", 1, "BLAS/OpenMP threads for numerical kernels"),
    Key("strict", "bool", True, "strict deterministic mode: forces single-threaded kernels"),
)

UD_KEYS = (
    Key("lambda", "float", 0.1, "weight of the scaled-identity regulariser (>= 0)"),
    Key("learning_rate", "float", 3e-4, "optimizer step size"),
    Key("steps", "int", 5000, "maximum number of optimizer steps"),
    Key("batch_size", "int", 1024, "triplets per minibatch"),
    Key("optimizer", "str", "adam", "adam or sgd"),
    Key("beta1", "float", 0.9, "Adam first-moment decay"),
    Key("beta2", "float", 0.999, "Adam second-moment decay"),
    Key("tau", "float", 1.0, "softmax temperature"),
    Key("val_fraction", "float", 0.1, "held-out share for early stopping"),
    Key("patience", "int", 5, "epochs without validation improvement before stopping"),
    Key("normalize", "bool", False, "L2-normalise embedding rows before fitting"),
)

DISTILL_KEYS = (
    Key("architecture", "str", "affine", "affine or mlp"),
    Key("hidden", "str", "", "comma separated hidden widths for the mlp student"),
    Key("tau_teacher", "float", 1.0, "teacher softmax temperature"),
    Key("tau_student", "float", 100.0, "student softmax temperature"),
    Key("lambda", "float", 0.1, "weight decay towards the initial parameters (>= 0)"),
    Key("learning_rate", "float", 3e-4, "peak optimizer step size"),
    Key("beta1", "float", 0.9, "Adam first-moment decay"),
    Key("beta2", "float", 0.999, "Adam second-moment decay"),
    Key("optimizer", "str", "adam", "adam or sgd"),
    Key("batch_size", "int", 1024, "triplets per minibatch"),
    Key("steps", "int", 2000, "optimizer steps"),
    Key("cosine", "bool", False, "cosine learning-rate decay"),
    Key("warmup", "int", 0, "linear warmup steps for the cosine schedule"),
    Key("val_fraction", "float", 0.1, "share of triplets held out for agreement monitoring"),
)


def _ud_config(c: dict, prefix: str = "") -> UdConfig:
    g = lambda k: c[prefix + k]
    return UdConfig(lam=g("lambda"), learning_rate=g("learning_rate"), steps=g("steps"),
                    batch_size=g("batch_size"), optimizer=g("optimizer"), beta1=g("beta1"),
                    beta2=g("beta2"), seed=c["seed"], tau=g("tau"), val_fraction=g("val_fraction"),
                    patience=g("patience"), normalize=g("normalize"))


def _distill_config(c: dict, prefix: str = "") -> DistillConfig:
    g = lambda k: c[prefix + k]
    return DistillConfig(tau_teacher=c["tau_teacher"], tau_student=c["tau_student"], lam=g("lambda"),
                         learning_rate=g("learning_rate"), beta1=g("beta1"), beta2=g("beta2"),
                         optimizer=g("optimizer"), batch_size=g("batch_size"), steps=g("steps"),
                         cosine=g("cosine"), warmup=g("warmup"), val_fraction=g("val_fraction"),
                         seed=c["seed"])


def _with_ids(mat: EmbeddingMatrix) -> tuple[str, ...]:
    return mat.item_ids or tuple(str(i) for i in range(mat.rows))


# ---------------------------------------------------------------------------
# command bodies: (resolved values, run) -> summary dict
# ---------------------------------------------------------------------------


def do_fit_ud(c: dict, run: Run) -> dict:
    mat = load_embeddings(run.input("embeddings"))
    ds = load_triplets(run.input("triplets"), "soft", m=mat.rows)
    t, log = fit_ud(mat, ds, _ud_config(c))
    save_transform(t, run.path("transform.aff"))
    log.save(run.path("ud_log.tsv"))
    aligned = apply_affine(t, mat)
    if c["normalize"]:
        x = mat.data / np.linalg.norm(mat.data, axis=1, keepdims=True)
        aligned = apply_affine(t, EmbeddingMatrix(x, mat.item_ids))
    save_embeddings(aligned, run.path("aligned.emb"))
    return {"transform": t.digest(), "objective": float(log.rows[-1][2]), "epochs": len(log.rows) - 1}


def do_cluster(c: dict, run: Run) -> dict:
    mat = load_embeddings(run.input("embeddings"))
    summary = {}
    k = c["k"]
    if k <= 0:
        er = elbow_select(mat, range(c["k_min"], c["k_max"] + 1), seed=c["seed"], n_init=c["n_init"])
        save_table(run.path("elbow.tsv"), ("k", "inertia"), list(zip(er.candidates, er.inertias)))
        k = er.k
        summary["no_knee"] = int(er.no_knee)
    km = kmeans(mat, k, seed=c["seed"], n_init=c["n_init"], max_iter=c["max_iter"])
    save_labels(_cluster_labels(km.assignment, mat), run.path("clusters.tsv"), with_cluster=True)
    summary.update(k=km.k, inertia=km.inertia, iterations=km.iterations)
    return summary


def _cluster_labels(assignment, mat: EmbeddingMatrix) -> HierarchyLabels:
    unknown = np.full(len(assignment), -1)
    return HierarchyLabels(unknown, unknown, unknown, assignment, _with_ids(mat))


def do_sample(c: dict, run: Run) -> dict:
    cfg = SamplerConfig(c["strategy"], c["count"], c["seed"])
    if cfg.strategy == "cluster_boundary":
        if not c["clusters"]:
            raise ConfigError("strategy cluster_boundary needs key 'clusters'")
        assign = load_labels(run.input("clusters")).cluster
        k = int(assign.max()) + 1
        ds = sample_cluster_boundary(KMeansResult(np.zeros((k, 0)), assign, float("nan"), 0), cfg)
        m = len(assign)
    elif cfg.strategy == "class_boundary":
        if not c["labels"]:
            raise ConfigError("strategy class_boundary needs key 'labels'")
        labels = load_labels(run.input("labels"))
        ds = sample_class_boundary(labels, cfg, level=c["level"])
        m = len(labels)
    else:
        m = c["m"]
        if m <= 0:
            if not c["embeddings"]:
                raise ConfigError("strategy random needs key 'm' or 'embeddings'")
            m = load_embeddings(run.input("embeddings")).rows
        ds = sample_random(m, cfg)
    save_triplets(ds, run.path("triplets.tsv"), "unlabeled", [f"source={ds.source_tag.replace(' ', '_')}"])
    return {"triplets": len(ds), "items": m, "strategy": cfg.strategy}


def do_label(c: dict, run: Run) -> dict:
    teacher = load_embeddings(run.input("teacher"))
    digest = "none"
    if c["transform"]:
        t = load_transform(run.input("transform"))
        teacher = apply_affine(t, teacher)
        digest = t.digest()
    ds = load_triplets(run.input("triplets"), "unlabeled", m=teacher.rows)
    labeled = label_triplets(teacher, ds, c["tau_teacher"], digest)
    n_held = c["heldout"]
    if not 0 <= n_held < len(labeled):
        raise ConfigError(f"heldout={n_held} must lie in [0, {len(labeled) - 1}]")
    n_train = len(labeled) - n_held
    save_alignet(labeled.subset(np.arange(n_train)), run.path("alignet.tsv"))
    if n_held:
        save_alignet(labeled.subset(np.arange(n_train, len(labeled))), run.path("alignet_heldout.tsv"))
    return {"labeled": n_train, "heldout": n_held, "ties": int(labeled.ties.sum()), "transform": digest}


def _student_init(c: dict, run: Run, p: int) -> StudentParams:
    if c["init"]:
        return load_student(run.input("init"))
    if c["architecture"] == "affine":
        return StudentParams.affine_identity(p)
    if c["architecture"] == "mlp":
        try:
            hidden = [int(h) for h in c["hidden"].replace(",", " ").split()]
        except ValueError:
            raise ConfigError(f"bad value {c['hidden']!r} for key 'hidden'") from None
        return StudentParams.random_mlp((p, *hidden, p), seed=c["seed"])
    raise ConfigError(f"bad value {c['architecture']!r} for key 'architecture'")


def do_distill(c: dict, run: Run) -> dict:
    inputs = load_embeddings(run.input("inputs"))
    ds = load_alignet(run.input("alignet"), m=inputs.rows)
    sp = _student_init(c, run, inputs.dims)
    out, log = train_student(sp, ds, inputs, _distill_config(c))
    save_student(out, run.path("student.stu"))
    log.save(run.path("student_log.tsv"))
    save_embeddings(student_forward(out, inputs), run.path("student.emb"))
    summary = {"objective": float(log.rows[-1][2]), "train_agreement": float(log.rows[-1][5])}
    if c["heldout"]:
        held = load_alignet(run.input("heldout"), m=inputs.rows)
        summary["heldout_agreement"] = teacher_agreement(out, held, inputs)
    return summary


def _model(c: dict, run: Run, key: str = "embeddings") -> EmbeddingMatrix:
    mat = load_embeddings(run.input(key))
    if c.get("transform"):
        mat = apply_affine(load_transform(run.input("transform")), mat)
    return mat


def do_eval_ooo(c: dict, run: Run) -> dict:
    mat = _model(c, run)
    ds = load_triplets(run.input("triplets"), "hard", m=mat.rows)
    return {"ooo_accuracy": ooo_accuracy(mat, ds), "triplets": len(ds)}


def do_eval_rsa(c: dict, run: Run) -> dict:
    mat = _model(c, run)
    human = load_embeddings(run.input("human"))
    return {"rsa": rsa_score(rsm_pearson(mat), rsm_pearson(human)), "items": mat.rows}


def do_eval_uncertainty(c: dict, run: Run) -> dict:
    mat = _model(c, run)
    ds = load_triplets(run.input("triplets"), c["triplets_kind"], m=mat.rows)
    rts = load_rts(run.input("rts"))
    rho = uncertainty_rt_correlation(mat, ds, rts, c["tau"], c["rt_cutoff"], c["rt_aggregate"])
    return {"entropy_rt_spearman": rho, "triplets": len(ds)}


def group_responses(ds: TripletDataset) -> list[list[tuple[int, int]]]:
    """Chosen pairs grouped by triple, in order of first appearance."""
    groups: dict[tuple, list] = {}
    pairs = ds.chosen_pairs()
    for s, t in enumerate(ds.triplets.tolist()):
        groups.setdefault(tuple(sorted(t)), []).append(tuple(sorted(pairs[s].tolist())))
    return list(groups.values())


def do_noise_ceiling(c: dict, run: Run) -> dict:
    ds = load_triplets(run.input("responses"), "hard")
    groups = group_responses(ds)
    return {"noise_ceiling": loo_noise_ceiling(groups), "triplets": len(groups), "responses": len(ds)}


def _shift_summary(rep, run: Run) -> dict:
    save_table(run.path("shift.tsv"), ("level", "mean_dz", "ci_low", "ci_high", "pairs"), rep.rows())
    out = {}
    for lv in rep.levels.values():
        out[f"shift_{lv.level}"] = lv.mean
        out[f"shift_{lv.level}_ci_low"] = lv.ci_low
        out[f"shift_{lv.level}_ci_high"] = lv.ci_high
    return out


def do_shift(c: dict, run: Run) -> dict:
    before = load_embeddings(run.input("before"))
    after = load_embeddings(run.input("after"))
    labels = load_labels(run.input("labels"))
    rep = representation_shift(before, after, labels, c["pair_sample"], c["seed"], c["bootstrap"])
    return _shift_summary(rep, run)


def do_pca(c: dict, run: Run) -> dict:
    mat = load_embeddings(run.input("embeddings"))
    frac = pca_explained_variance(mat, c["components"] or None)
    save_table(run.path("pca.tsv"), ("component", "explained_variance"),
               [(i + 1, float(v)) for i, v in enumerate(frac)])
    return {"components": len(frac), "first_component": float(frac[0])}


def do_synth(c: dict, run: Run) -> dict:
    spec = HierarchySpec(c["superordinates"], c["basics"], c["subordinates"], c["items"],
                         tuple(c["dispersions"]), c["p"], c["seed"])
    seed = c["seed"]
    truth, labels = generate_hierarchy(spec)
    teacher = corrupt_teacher(truth, c["severity"], c["corruption_noise"], seed=seed + 1)
    scale = c["feature_scale"]
    scale = math.sqrt(c["tau_student"] / c["tau_h"]) if scale == "auto" else _convert(Key("feature_scale", "float"), scale, None)
    features = nuisance_view(truth, c["nuisance_dims"], c["nuisance_sd"], scale, seed=seed + 2)
    save_embeddings(truth, run.path("truth.emb"))
    save_embeddings(teacher, run.path("teacher.emb"))
    save_embeddings(features, run.path("student_inputs.emb"))
    save_labels(labels, run.path("labels.tsv"))

    human = sample_random(spec.m, SamplerConfig("random", c["human_triplets"], seed + 3))
    _, p_star = simulate_responses(truth, human.triplets, c["tau_h"], 1, seed + 4)
    save_triplets(TripletDataset(human.triplets, soft=p_star), run.path("human_soft.tsv"), "soft")

    ev = sample_random(spec.m, SamplerConfig("random", c["eval_triplets"], seed + 5))
    choices, p_eval = simulate_responses(truth, ev.triplets, c["tau_h"], c["subjects"], seed + 6)
    save_triplets(TripletDataset(ev.triplets, choice=choices[0]), run.path("eval.tsv"), "hard")
    rep_t = np.tile(ev.triplets, (c["subjects"], 1))
    save_triplets(TripletDataset(rep_t, choice=choices.reshape(-1)), run.path("responses.tsv"), "hard")
    save_rts(simulate_rts(p_eval, c["rt_noise"], seed + 7, n_obs=c["rt_observations"]), run.path("rts.tsv"))

    cfg_lines = [
        "# quickstart pipeline over the synthetic data in this directory",
        "teacher = teacher.emb",
        "human = human_soft.tsv",
        "student_inputs = student_inputs.emb",
        "labels = labels.tsv",
        "eval = eval.tsv",
        "responses = responses.tsv",
        "rts = rts.tsv",
        f"seed = {seed}",
        "ud_learning_rate = 0.01",
        "ud_steps = 20000",
        "ud_patience = 20",
        "k = 16",
        "count = 20000",
        "heldout = 2000",
        f"tau_student = {c['tau_student']!r}",
        "distill_lambda = 0.001",
        "distill_learning_rate = 0.01",
        "distill_steps = 1500",
        "distill_val_fraction = 0.0",
    ]
    atomic_write_text(run.path("pipeline.cfg"), "\n".join(cfg_lines) + "\n")
    return {"items": spec.m, "p": spec.p, "feature_scale": float(scale)}


def do_report(c: dict, run: Run) -> dict:
    root = Path(c["run"])
    found = sorted(root.glob("*/summary.txt")) + ([root / "summary.txt"] if (root / "summary.txt").exists() else [])
    if not found:
        raise ValidationError(f"no summary.txt files under {root}")
    merged = {}
    for path in found:
        stage = path.parent.name if path.parent != root else "run"
        run.input(f"{stage}/summary.txt", path)
        for k, v in load_summary(path).items():
            merged[f"{stage}.{k}"] = v
    save_summary(run.path("report.txt"), merged)
    for k, v in merged.items():
        print(f"{k} = {v}")
    return {}


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

PIPELINE_KEYS = (
    OUT, SEED,
    Key("teacher", "path", REQUIRED, "teacher embeddings (EMB1)"),
    Key("human", "path", REQUIRED, "soft human triplets used to fit the transform"),
    Key("student_inputs", "path", REQUIRED, "student input features (EMB1)"),
    Key("labels", "path", "", "hierarchy labels for the shift analysis"),
    Key("eval", "path", "", "hard triplets for odd-one-out evaluation"),
    Key("responses", "path", "", "repeated hard responses for the noise ceiling"),
    Key("rts", "path", "", "response times keyed by row of the eval file"),
    *(Key("ud_" + k.name, k.kind, k.default, k.help) for k in UD_KEYS),
    Key("k", "int", 0, "number of clusters; 0 selects k by the elbow rule"),
    Key("k_min", "int", 2, "smallest elbow candidate"),
    Key("k_max", "int", 16, "largest elbow candidate"),
    Key("n_init", "int", 10, "k-means restarts"),
    Key("strategy", "str", "cluster_boundary", "random, class_boundary or cluster_boundary"),
    Key("level", "str", "basic", "label level for class_boundary sampling"),
    Key("count", "int", 100_000, "surrogate triplets used for training the student"),
    Key("heldout", "int", 2000, "extra surrogate triplets held out for agreement"),
    Key("tau_teacher", "float", 1.0, "teacher softmax temperature"),
    Key("tau_student", "float", 100.0, "student softmax temperature"),
    *(Key("distill_" + k.name, k.kind, k.default, k.help) for k in DISTILL_KEYS
      if k.name not in ("tau_teacher", "tau_student", "architecture", "hidden")),
    Key("architecture", "str", "affine", "affine or mlp"),
    Key("hidden", "str", "", "comma separated hidden widths for the mlp student"),
    Key("pair_sample", "int", 200_000, "pair budget for the shift analysis above 2000 items"),
    Key("bootstrap", "int", 1000, "bootstrap resamples for shift intervals"),
    Key("force", "bool", False, "ignore cached stage outputs"),
    *RUNTIME,
)


def _cache_key(stage: str, values: dict, run: Run) -> str:
    """Hash of the stage config and input contents.

    Hashed inputs enter through their digests only, so moving or copying a
    run directory keeps its cache valid.
    """
    config = {}
    for k, v in sorted(values.items()):
        if k == "out" or k in run.inputs:
            continue
        if isinstance(v, Path):
            try:
                v = v.relative_to(run.out.parent)
            except ValueError:
                pass
        config[k] = _jsonable(v)
    payload = {"stage": stage, "config": config,
               "inputs": {k: v["sha256"] for k, v in sorted(run.inputs.items())}}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _hash_inputs(values: dict, keys: tuple[str, ...], run: Run) -> None:
    for k in keys:
        if values.get(k):
            run.input(k)


def _cached(stage: str, out: Path, key: str) -> bool:
    man = out / "manifest.json"
    if not man.exists():
        return False
    try:
        old = json.loads(man.read_text(encoding="utf-8"))
    except (OSError, ValueError):
        return False
    if old.get("status") != "ok" or old.get("cache_key") != key:
        return False
    for name, digest in old.get("outputs", {}).items():
        p = out / name
        if not p.exists() or file_sha256(p) != digest:
            raise StageError(stage, FormatError(f"cached artifact {p} is missing or corrupt; remove {out} to recompute"))
    return True


def _stage(name: str, body: Callable, values: dict, input_keys: tuple[str, ...], out: Path,
           force: bool, log: list) -> dict:
    run = Run(name, out, values)
    try:
        _hash_inputs(values, input_keys, run)
    except AlignetError as exc:
        raise StageError(name, exc) from exc
    key = _cache_key(name, values, run)
    if not force and _cached(name, out, key):
        log.append((name, "cached"))
        summary = out / "summary.txt"
        return load_summary(summary) if summary.exists() else {}
    run.extra["cache_key"] = key
    out.mkdir(parents=True, exist_ok=True)
    try:
        summary = body(values, run)
        if summary:
            save_summary(run.path("summary.txt"), summary)
    except (AlignetError, OSError) as exc:
        run.write_manifest("error", str(exc), exit_code_for(exc))
        raise StageError(name, exc) from exc
    run.write_manifest("ok")
    log.append((name, "ran"))
    return summary


def _pick(c: dict, prefix: str, names) -> dict:
    return {n: c[prefix + n] for n in names}


def do_eval_stage(c: dict, run: Run) -> dict:
    summary = {}
    teacher = load_embeddings(run.input("teacher"))
    aligned = load_embeddings(run.input("aligned"))
    inputs = load_embeddings(run.input("student_inputs"))
    student = load_embeddings(run.input("student"))
    models = {"teacher": teacher, "aligned_teacher": aligned, "student_before": inputs, "student_after": student}
    if c["eval"]:
        ds = load_triplets(run.input("eval"), "hard", m=teacher.rows)
        for name, mat in models.items():
            summary[f"ooo_{name}"] = ooo_accuracy(mat, ds)
        if c["rts"]:
            rts = load_rts(run.input("rts"))
            for name in ("aligned_teacher", "student_after"):
                summary[f"entropy_rt_{name}"] = uncertainty_rt_correlation(models[name], ds, rts)
    if c["responses"]:
        groups = group_responses(load_triplets(run.input("responses"), "hard", m=teacher.rows))
        summary["noise_ceiling"] = loo_noise_ceiling(groups)
    if c["heldout_file"]:
        held = load_alignet(run.input("heldout_file"), m=inputs.rows)
        summary["heldout_agreement"] = teacher_agreement(
            load_student(run.input("student_params")), held, inputs)
    if c["labels"]:
        labels = load_labels(run.input("labels"))
        rep = representation_shift(inputs, student, labels, c["pair_sample"], c["seed"], c["bootstrap"])
        summary.update(_shift_summary(rep, run))
    return summary


def do_pipeline(c: dict, run: Run) -> dict:
    out, seed, force = run.out, c["seed"], c["force"]
    stages: list = []
    run.extra["stages"] = stages
    for k in ("teacher", "human", "student_inputs", "labels", "eval", "responses", "rts"):
        if c[k]:
            run.input(k)
    ud_names = [k.name for k in UD_KEYS]
    ud = {"embeddings": c["teacher"], "triplets": c["human"], "seed": seed, **_pick(c, "ud_", ud_names)}
    _stage("fit-ud", do_fit_ud, ud, ("embeddings", "triplets"), out / "fit_ud", force, stages)
    aligned = out / "fit_ud" / "aligned.emb"
    transform = out / "fit_ud" / "transform.aff"

    cl = {"embeddings": aligned, "k": c["k"], "k_min": c["k_min"], "k_max": c["k_max"],
          "n_init": c["n_init"], "max_iter": 300, "seed": seed}
    _stage("cluster", do_cluster, cl, ("embeddings",), out / "cluster", force, stages)

    sa = {"strategy": c["strategy"], "count": c["count"] + c["heldout"], "seed": seed,
          "clusters": out / "cluster" / "clusters.tsv", "labels": c["labels"], "level": c["level"],
          "m": 0, "embeddings": aligned}
    used = {"cluster_boundary": ("clusters",), "class_boundary": ("labels",), "random": ("embeddings",)}
    _stage("sample", do_sample, sa, used.get(c["strategy"], ()), out / "sample", force, stages)

    la = {"teacher": c["teacher"], "transform": transform, "triplets": out / "sample" / "triplets.tsv",
          "tau_teacher": c["tau_teacher"], "heldout": c["heldout"]}
    _stage("label", do_label, la, ("teacher", "transform", "triplets"), out / "label", force, stages)
    held = out / "label" / "alignet_heldout.tsv" if c["heldout"] else ""

    dnames = [k.name for k in DISTILL_KEYS if k.name not in ("tau_teacher", "tau_student", "architecture", "hidden")]
    di = {"inputs": c["student_inputs"], "alignet": out / "label" / "alignet.tsv", "heldout": held, "init": "",
          "seed": seed, "tau_teacher": c["tau_teacher"], "tau_student": c["tau_student"],
          "architecture": c["architecture"], "hidden": c["hidden"], **_pick(c, "distill_", dnames)}
    _stage("distill", do_distill, di, ("inputs", "alignet", "heldout"), out / "distill", force, stages)

    ev = {"teacher": c["teacher"], "aligned": aligned, "student_inputs": c["student_inputs"],
          "student": out / "distill" / "student.emb", "student_params": out / "distill" / "student.stu",
          "heldout_file": held, "eval": c["eval"], "rts": c["rts"], "responses": c["responses"],
          "labels": c["labels"], "pair_sample": c["pair_sample"], "bootstrap": c["bootstrap"], "seed": seed}
    ev_keys = ("teacher", "aligned", "student_inputs", "student", "student_params", "heldout_file",
               "eval", "rts", "responses", "labels")
    summary = _stage("eval", do_eval_stage, ev, ev_keys, out / "eval", force, stages)

    report = {}
    for stage_dir in ("fit_ud", "cluster", "sample", "label", "distill", "eval"):
        p = out / stage_dir / "summary.txt"
        if p.exists():
            for k, v in load_summary(p).items():
                report[f"{stage_dir}.{k}"] = v
    save_summary(run.path("report.txt"), report)
    return {}


# ---------------------------------------------------------------------------
# registry and entry point
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Command:
    name: str
    help: str
    keys: tuple[Key, ...]
    body: Callable


COMMANDS = {c.name: c for c in (
    Command("fit-ud", "fit the uncertainty-distillation transform", (
        OUT, SEED,
        Key("embeddings", "path", REQUIRED, "frozen embeddings (EMB1)"),
        Key("triplets", "path", REQUIRED, "soft triplet file"),
        *UD_KEYS, *RUNTIME), do_fit_ud),
    Command("cluster", "k-means clustering, optionally choosing k by the elbow rule", (
        OUT, SEED,
        Key("embeddings", "path", REQUIRED, "embeddings to cluster (EMB1)"),
        Key("k", "int", 0, "number of clusters; 0 selects k by the elbow rule"),
        Key("k_min", "int", 2, "smallest elbow candidate"),
        Key("k_max", "int", 16, "largest elbow candidate"),
        Key("n_init", "int", 10, "k-means restarts"),
        Key("max_iter", "int", 300, "Lloyd iterations per restart"),
        *RUNTIME), do_cluster),
    Command("sample", "sample unlabeled triplets", (
        OUT, SEED,
        Key("strategy", "str", "cluster_boundary", "random, class_boundary or cluster_boundary"),
        Key("count", "int", 100_000, "number of triplets"),
        Key("clusters", "path", "", "cluster assignment file from the cluster command"),
        Key("labels", "path", "", "hierarchy labels for class_boundary sampling"),
        Key("level", "str", "basic", "label level for class_boundary sampling"),
        Key("m", "int", 0, "item count for random sampling"),
        Key("embeddings", "path", "", "embeddings whose row count sets m for random sampling"),
        *RUNTIME), do_sample),
    Command("label", "label triplets with the (transformed) teacher", (
        OUT,
        Key("teacher", "path", REQUIRED, "teacher embeddings (EMB1)"),
        Key("transform", "path", "", "optional AFF1 transform applied to the teacher"),
        Key("triplets", "path", REQUIRED, "unlabeled triplet file"),
        Key("tau_teacher", "float", 1.0, "teacher softmax temperature"),
        Key("heldout", "int", 0, "trailing rows written to a separate held-out file"),
        *RUNTIME), do_label),
    Command("distill", "train a student on teacher-labeled triplets", (
        OUT, SEED,
        Key("inputs", "path", REQUIRED, "student input features (EMB1)"),
        Key("alignet", "path", REQUIRED, "teacher-labeled triplet file"),
        Key("heldout", "path", "", "held-out labeled triplets for agreement"),
        Key("init", "path", "", "optional STU1 checkpoint to start from"),
        *DISTILL_KEYS, *RUNTIME), do_distill),
    Command("eval-ooo", "odd-one-out accuracy", (
        OUT,
        Key("embeddings", "path", REQUIRED, "model embeddings (EMB1)"),
        Key("triplets", "path", REQUIRED, "hard triplet file"),
        Key("transform", "path", "", "optional AFF1 transform applied first"),
        *RUNTIME), do_eval_ooo),
    Command("eval-rsa", "Spearman correlation of Pearson-kernel RSMs", (
        OUT,
        Key("embeddings", "path", REQUIRED, "model embeddings (EMB1)"),
        Key("human", "path", REQUIRED, "reference embeddings defining the human RSM"),
        Key("transform", "path", "", "optional AFF1 transform applied first"),
        *RUNTIME), do_eval_rsa),
    Command("eval-uncertainty", "correlate model triplet entropy with response times", (
        OUT,
        Key("embeddings", "path", REQUIRED, "model embeddings (EMB1)"),
        Key("triplets", "path", REQUIRED, "triplet file; RT indices refer to its data rows"),
        Key("triplets_kind", "str", "hard", "unlabeled, hard, soft or alignet"),
        Key("rts", "path", REQUIRED, "response-time table"),
        Key("transform", "path", "", "optional AFF1 transform applied first"),
        Key("tau", "float", 1.0, "softmax temperature"),
        Key("rt_cutoff", "float", 10.0, "RTs above this many seconds are dropped"),
        Key("rt_aggregate", "str", "mean", "mean or median of log RT per triplet"),
        *RUNTIME), do_eval_uncertainty),
    Command("noise-ceiling", "leave-one-out noise ceiling of repeated responses", (
        OUT,
        Key("responses", "path", REQUIRED, "hard triplet file, one row per response"),
        *RUNTIME), do_noise_ceiling),
    Command("shift", "hierarchical representation shift", (
        OUT, SEED,
        Key("before", "path", REQUIRED, "embeddings before (EMB1)"),
        Key("after", "path", REQUIRED, "embeddings after (EMB1)"),
        Key("labels", "path", REQUIRED, "hierarchy labels"),
        Key("pair_sample", "int", 200_000, "pair budget above 2000 items"),
        Key("bootstrap", "int", 1000, "bootstrap resamples"),
        *RUNTIME), do_shift),
    Command("pca", "explained variance of principal components", (
        OUT,
        Key("embeddings", "path", REQUIRED, "embeddings (EMB1)"),
        Key("components", "int", 0, "number of components; 0 keeps all"),
        *RUNTIME), do_pca),
    Command("synth", "write a synthetic hierarchy, teacher, student features and human data", (
        OUT, SEED,
        Key("superordinates", "int", 4, "superordinate categories"),
        Key("basics", "int", 4, "basic categories per superordinate"),
        Key("subordinates", "int", 2, "subordinate categories per basic"),
        Key("items", "int", 8, "items per subordinate"),
        Key("dispersions", "floats", (2.0, 1.2, 0.7, 0.4), "offset norms per level, coarse to fine"),
        Key("p", "int", 32, "embedding width"),
        Key("severity", "float", 0.8, "teacher corruption severity in [0, 1]"),
        Key("corruption_noise", "float", 0.1, "teacher noise norm"),
        Key("human_triplets", "int", 5000, "soft human triplets"),
        Key("eval_triplets", "int", 2000, "evaluation triplets"),
        Key("subjects", "int", 5, "simulated subjects per evaluation triplet"),
        Key("tau_h", "float", 0.5, "human softmax temperature"),
        Key("rt_noise", "float", 0.1, "log-RT noise standard deviation"),
        Key("rt_observations", "int", 5, "simulated RTs per evaluation triplet"),
        Key("nuisance_dims", "int", 32, "item-specific dimensions added to student features"),
        Key("nuisance_sd", "float", 3.0, "norm of the item-specific nuisance"),
        Key("feature_scale", "str", "auto", "student feature scale; auto is sqrt(tau_student / tau_h)"),
        Key("tau_student", "float", 100.0, "student temperature the features are scaled for"),
        *RUNTIME), do_synth),
    Command("pipeline", "fit-ud, cluster, sample, label, distill and evaluate", PIPELINE_KEYS, do_pipeline),
    Command("report", "merge the summaries of a pipeline run", (
        OUT,
        Key("run", "path", REQUIRED, "pipeline output directory"),
        *RUNTIME), do_report),
)}


def _describe(k: Key) -> str:
    default = "required" if k.default is REQUIRED else f"default: {_jsonable(k.default)!r}"
    return f"{k.help} ({default})"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="alignet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"alignet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS.values():
        sp = sub.add_parser(cmd.name, help=cmd.help, description=cmd.help)
        sp.add_argument("--config", help="flat key = value config file")
        for k in cmd.keys:
            sp.add_argument("--" + k.name.replace("_", "-"), dest=k.name, default=argparse.SUPPRESS,
                            metavar=k.kind.upper(), help=_describe(k))
    return parser


def _config_error_manifest(name, config, flags, config_dir, error, stream) -> None:
    # the output directory may still be known even though another key is bad
    raw = flags.get("out")
    if raw is None and "out" in config:
        raw = str(config_dir / config["out"]) if config_dir else config["out"]
    if not raw:
        return
    run = Run(name, Path(raw), {"config": dict(config), "flags": dict(flags)})
    try:
        run.write_manifest("error", error, EXIT_INVALID)
    except (AlignetError, OSError) as exc:
        print(f"alignet {name}: cannot write manifest: {exc}", file=stream)


def execute(name: str, config: dict[str, str], flags: dict[str, str], config_dir: Path | None = None,
            stream=None) -> int:
    stream = stream or sys.stderr
    cmd = COMMANDS[name]
    try:
        values = resolve(cmd.keys, config, flags, config_dir)
    except ConfigError as exc:
        print(f"alignet {name}: {exc}", file=stream)
        _config_error_manifest(name, config, flags, config_dir, str(exc), stream)
        return EXIT_INVALID
    run = Run(name, values["out"], values)
    threads = 1 if values["strict"] else values["threads"]
    if threads < 1:
        print(f"alignet {name}: threads must be >= 1", file=stream)
        run.write_manifest("error", "threads must be >= 1", EXIT_INVALID)
        return EXIT_INVALID
    run.extra["threads"] = threads
    code, error = EXIT_OK, None
    try:
        run.out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=threads):
            summary = cmd.body(values, run)
        if summary:
            save_summary(run.path("summary.txt"), summary)
    except (AlignetError, OSError, ValueError, ArithmeticError) as exc:
        code, error = exit_code_for(exc), str(exc)
        print(f"alignet {name}: {exc}", file=stream)
    try:
        run.write_manifest("ok" if code == EXIT_OK else "error", error, code)
    except (AlignetError, OSError) as exc:
        print(f"alignet {name}: cannot write manifest: {exc}", file=stream)
        code = code or EXIT_INVALID
    return code


def main(argv=None) -> int:
    args = vars(build_parser().parse_args(argv))
    name = args.pop("command")
    cfg_path = args.pop("config", None)
    config, config_dir = {}, None
    if cfg_path:
        try:
            config = parse_config_text(Path(cfg_path).read_text(encoding="utf-8"), cfg_path)
        except (OSError, UnicodeDecodeError) as exc:
            print(f"alignet {name}: cannot read config {cfg_path}: {exc}", file=sys.stderr)
            return EXIT_INVALID
        except ConfigError as exc:
            print(f"alignet {name}: {exc}", file=sys.stderr)
            return EXIT_INVALID
        config_dir = Path(cfg_path).resolve().parent
    return execute(name, config, args, config_dir)


if __name__ == "__main__":
    sys.exit(main())
