"""Command-line experiment runner.

Every subcommand reads a plain-text config (``key = value`` lines, ``#``
comments), validates all keys before doing any work and writes CSV reports
into ``--out``. Reports start with a ``#`` header block (version, config hash,
seeds, notes) and contain no timestamps, so reruns are byte-identical.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import itertools
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .ensemble import (METHODS, SubsetPolicy, WeightRange, aggregate, evaluate_k_subsets,
                       run_bagging_experiment, standardize, weight_lattice, weighted_mix)
from .evaluate import best_per_class_rank, metrics
from .models import (FAMILIES, SeedBundle, TrainConfig, TrainedModel, default_arch, predict_scores,
                     retrain_classifier, time_inference, train_many)
from .numerics import init_params, seeded_rng
from .pipeline import (ENSEMBLE_MODES, PipelineTrainConfig, evaluate_detection, generate_scenes,
                       mask_iou, segment, train_pipeline)
from .pointcloud import (SHAPE_KINDS, LabeledDataset, import_clouds, make_dataset, read_dataset, split_dataset,
                         write_dataset)
from .scores import predictions, write_scores

log = logging.getLogger("psetlab")

COMMANDS = ("gen-data", "simple-ensemble", "bagging", "weight-search", "random-factors",
            "head-ensemble", "frustum", "timing")
U64_MAX = 2 ** 64 - 1


class ConfigError(ValueError):
    pass


# -- value parsers -------------------------------------------------------------------

def _int(lo: int | None = None, hi: int | None = None) -> Callable[[str], int]:
    def parse(s: str) -> int:
        v = int(s)
        if (lo is not None and v < lo) or (hi is not None and v > hi):
            raise ValueError(f"{v} outside [{lo}, {hi}]")
        return v
    return parse


def _float(lo: float | None = None, hi: float | None = None, lo_open: bool = False) -> Callable[[str], float]:
    def parse(s: str) -> float:
        v = float(s)
        if not np.isfinite(v):
            raise ValueError("not finite")
        if lo is not None and (v < lo or (lo_open and v == lo)):
            raise ValueError(f"{v} below {'or at ' if lo_open else ''}{lo}")
        if hi is not None and v > hi:
            raise ValueError(f"{v} above {hi}")
        return v
    return parse


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _choice(options) -> Callable[[str], str]:
    def parse(s: str) -> str:
        if s not in options:
            raise ValueError(f"{s!r} not one of {', '.join(options)}")
        return s
    return parse


def _list(item: Callable[[str], Any], min_len: int = 1) -> Callable[[str], tuple]:
    def parse(s: str) -> tuple:
        vals = tuple(item(t.strip()) for t in s.split(",") if t.strip())
        if len(vals) < min_len:
            raise ValueError(f"need at least {min_len} item(s)")
        if len(set(vals)) != len(vals):
            raise ValueError("duplicate entries")
        return vals
    return parse


def _krange(s: str) -> tuple[int, int]:
    sep = ".." if ".." in s else "-"
    lo, _, hi = s.partition(sep)
    a, b = int(lo), int(hi or lo)
    if a < 1 or b < a:
        raise ValueError(f"bad K range {s!r}")
    return a, b


def _interval(s: str) -> WeightRange:
    """``[lo, hi]`` with ``(`` / ``)`` for open ends, e.g. ``(0.4, 1]``."""
    s = s.strip()
    if len(s) < 5 or s[0] not in "[(" or s[-1] not in "])":
        raise ValueError(f"expected an interval like (0.4, 1], got {s!r}")
    lo, _, hi = s[1:-1].partition(",")
    r = WeightRange(float(lo), float(hi), s[0] == "(", s[-1] == ")")
    if not 0.0 <= r.lo <= r.hi <= 1.0:
        raise ValueError("interval must lie within [0, 1]")
    return r


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: str
    help: str = ""


_DATA_KEYS = {
    "dataset": Key(str, "", "dataset file; empty = generate from the data_* keys"),
    "n_classes": Key(_int(2, len(SHAPE_KINDS)), "8"),
    "train_per_class": Key(_int(1), "100"),
    "test_per_class": Key(_int(1), "40"),
    "n_points": Key(_int(8), "256"),
    "noise_sigma": Key(_float(0.0), "0.02"),
    "stretch": Key(_float(0.0, 0.9), "0.35"),
    "data_seed": Key(_int(0, U64_MAX), "0"),
}
_TRAIN_KEYS = {
    "family": Key(_choice(FAMILIES), "pointnet_lite"),
    "epochs": Key(_int(1), "40"),
    "batch_size": Key(_int(1), "16"),
    "learning_rate": Key(_float(0.0, lo_open=True), "0.01"),
    "augment": Key(_bool, "true"),
}
_SEED = {"seed": Key(_int(0, U64_MAX), "0", "seed root; instance i uses seed + i")}

SCHEMAS: dict[str, dict[str, Key]] = {
    "gen-data": {**_DATA_KEYS, "output": Key(str, "dataset.pset"),
                 "import_dir": Key(str, "", "directory of <class>/<cloud>.txt|.xyz files to convert")},
    "simple-ensemble": {**_DATA_KEYS, **_TRAIN_KEYS, **_SEED,
                        "n_instances": Key(_int(1), "10"),
                        "k_range": Key(_krange, "1..10"),
                        "methods": Key(_list(_choice(METHODS)), ",".join(METHODS)),
                        "subset_mode": Key(_choice(("exhaustive_if_small", "random_sample")), "exhaustive_if_small"),
                        "subset_cap": Key(_int(1), "5000"),
                        "n_random": Key(_int(1), "10"),
                        "save_scores": Key(_bool, "true")},
    "bagging": {**_DATA_KEYS, **_TRAIN_KEYS, **_SEED,
                "n_instances": Key(_int(1), "10"),
                "fractions": Key(_list(_float(0.0, 1.0, lo_open=True)), "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")},
    "weight-search": {**_DATA_KEYS, **_TRAIN_KEYS, **_SEED,
                      "families": Key(_list(_choice(FAMILIES), 2), ",".join(FAMILIES)),
                      "n_instances": Key(_int(1), "5"),
                      "search": Key(_choice(("pair", "grid")), "pair"),
                      "mix": Key(_choice(("subensemble", "single")), "subensemble"),
                      "pair_step": Key(_float(0.0, 1.0, lo_open=True), "0.1"),
                      "grid_step": Key(_float(0.0, 1.0, lo_open=True), "0.05")},
    "random-factors": {**_DATA_KEYS, **_TRAIN_KEYS, **_SEED,
                       "n_instances": Key(_int(2), "5")},
    "head-ensemble": {**_DATA_KEYS, **_TRAIN_KEYS, **_SEED,
                      "n_encoders": Key(_int(1), "10"),
                      "n_heads": Key(_int(1), "5"),
                      "head_epochs": Key(_int(1), "31")},
    "frustum": {**_SEED,
                "n_instances": Key(_int(1), "3"),
                "n_train_scenes": Key(_int(1), "150"),
                "n_test_scenes": Key(_int(1), "60"),
                "n_object_points": Key(_int(1), "128"),
                "n_clutter_points": Key(_int(0), "128"),
                "scene_seed": Key(_int(0, U64_MAX), "0"),
                "epochs": Key(_int(1), "40"),
                "batch_size": Key(_int(1), "8"),
                "learning_rate": Key(_float(0.0, lo_open=True), "0.01"),
                "iou_threshold": Key(_float(0.0, 1.0, lo_open=True), "0.5")},
    "timing": {**_SEED,
               "families": Key(_list(_choice(FAMILIES)), ",".join(FAMILIES)),
               "n_classes": Key(_int(2), "40"),
               "n_points": Key(_int(8), "1024"),
               "batch_size": Key(_int(1), "4"),
               "repetitions": Key(_int(3), "10")},
}
# weight-search also accepts one ``weight.<family> = <interval>`` key per family
_PREFIX_KEYS = {"weight-search": ("weight.", _interval)}


def read_config_text(text: str) -> dict[str, tuple[str, int]]:
    """Raw ``key -> (value, line number)`` pairs."""
    out: dict[str, tuple[str, int]] = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not eq or not key:
            raise ConfigError(f"line {no}: expected 'key = value'")
        if key in out:
            raise ConfigError(f"line {no}: duplicate key {key!r}")
        out[key] = (value, no)
    return out


def resolve_config(command: str, raw: dict[str, tuple[str, int]],
                   seed: int | None = None) -> dict[str, Any]:
    """Parse and validate every key of ``raw`` against the command schema; fill defaults."""
    schema = SCHEMAS[command]
    prefix = _PREFIX_KEYS.get(command)
    cfg: dict[str, Any] = {}
    for key, (value, no) in raw.items():
        if key in schema:
            parser = schema[key].parse
        elif prefix and key.startswith(prefix[0]):
            parser = prefix[1]
        else:
            raise ConfigError(f"line {no}: unknown key {key!r} for {command}")
        try:
            cfg[key] = parser(value)
        except ValueError as e:
            raise ConfigError(f"line {no}: {key}: {e}") from None
    for key, spec in schema.items():
        if key not in cfg:
            cfg[key] = spec.parse(spec.default)
    if seed is not None:
        if not 0 <= seed <= U64_MAX:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg["seed" if "seed" in schema else "data_seed"] = seed
    _cross_check(command, cfg)
    return cfg


def _cross_check(command: str, cfg: dict[str, Any]) -> None:
    if command == "simple-ensemble" and cfg["k_range"][1] > cfg["n_instances"]:
        raise ConfigError(f"k_range upper bound {cfg['k_range'][1]} exceeds n_instances {cfg['n_instances']}")
    if command == "weight-search":
        fams = cfg["families"]
        for key in cfg:
            if key.startswith("weight.") and key[7:] not in fams:
                raise ConfigError(f"{key}: {key[7:]!r} is not among families {', '.join(fams)}")
        try:
            if cfg["search"] == "pair":
                weight_lattice(2, cfg["pair_step"], _pair_constraint(cfg["pair_step"]))
            else:
                weight_lattice(len(fams), cfg["grid_step"], _constraints(cfg))
        except ValueError as e:
            raise ConfigError(f"weight constraints: {e}") from None
    if command == "timing" and cfg["batch_size"] < 1:
        raise ConfigError("batch_size must be >= 1")


def config_hash(command: str, cfg: dict[str, Any]) -> str:
    canon = "\n".join(f"{k}={cfg[k]!r}" for k in sorted(cfg))
    return hashlib.sha256(f"{command}\n{canon}".encode()).hexdigest()[:16]


# -- report writing ----------------------------------------------------------------------

def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))   # shortest exact round-trip form
    return str(v)


def write_report(path: Path, command: str, cfg: dict[str, Any], header: list[str],
                 rows: list[list], notes: tuple[str, ...] = ()) -> None:
    buf = io.StringIO()
    buf.write(f"# psetlab {__version__} {command}\n")
    buf.write(f"# config_hash = {config_hash(command, cfg)}\n")
    seeds = {k: cfg[k] for k in sorted(cfg) if k.endswith("seed")}
    buf.write("# seeds: " + " ".join(f"{k}={v}" for k, v in seeds.items()) + "\n")
    for n in notes:
        buf.write(f"# {n}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    path.write_text(buf.getvalue(), encoding="utf-8")
    print(f"wrote {path}")


# -- shared helpers ----------------------------------------------------------------------

def _dataset(cfg) -> LabeledDataset:
    if cfg["dataset"]:
        return read_dataset(cfg["dataset"])
    return make_dataset(SHAPE_KINDS[: cfg["n_classes"]], cfg["train_per_class"], cfg["test_per_class"],
                        cfg["n_points"], cfg["noise_sigma"], cfg["stretch"], cfg["data_seed"])


def _train_cfg(cfg) -> TrainConfig:
    return TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                       learning_rate=cfg["learning_rate"], augment=cfg["augment"])


def _prepare(cfg):
    ds = _dataset(cfg)
    train_idx, test_idx = split_dataset(ds, cfg["test_per_class"])
    return ds, train_idx, test_idx


def _train_family(family, ds, train_idx, cfg, n, jobs, seed_root) -> list[TrainedModel]:
    arch = default_arch(family, ds.n_classes)
    tasks = [(arch, ds, train_idx, SeedBundle.varied(seed_root, i), _train_cfg(cfg)) for i in range(n)]
    return train_many(tasks, jobs)


def _single_stats(mats, c):
    r = [metrics(predictions(m), m.labels, c) for m in mats]
    inst = np.array([x.instance_accuracy for x in r])
    cls = np.array([x.mean_class_accuracy for x in r])
    return inst, cls


# -- commands --------------------------------------------------------------------------

def _read_xyz(path: Path) -> np.ndarray:
    # x y z first; further columns (normals, intensity) are dropped; commas allowed as separators
    rows = [l.replace(",", " ").split() for l in path.read_text(encoding="utf-8").splitlines()]
    rows = [r for r in rows if r and not r[0].startswith("#")]
    try:
        pts = np.array([[float(v) for v in r[:3]] for r in rows])
    except ValueError as e:
        raise ValueError(f"{path}: {e}") from None
    if pts.ndim != 2 or pts.shape[1] != 3 or not np.all(np.isfinite(pts)):
        raise ValueError(f"{path}: expected rows of at least three finite coordinates")
    return pts


def import_directory(root: Path, n_points: int, seed: int) -> LabeledDataset:
    """Convert pre-sampled clouds stored as ``root/<class>/<name>.txt|.xyz`` (classes in sorted order)."""
    class_dirs = sorted(d for d in Path(root).iterdir() if d.is_dir())
    if len(class_dirs) < 2:
        raise ValueError(f"{root}: need at least two class subdirectories")
    clouds, labels = [], []
    for label, d in enumerate(class_dirs):
        files = sorted(f for f in d.iterdir() if f.suffix in (".txt", ".xyz"))
        if not files:
            raise ValueError(f"{d}: no .txt or .xyz clouds")
        for f in files:
            clouds.append(_read_xyz(f))
            labels.append(label)
    return import_clouds(clouds, labels, [d.name for d in class_dirs], n_points, seed)


def cmd_gen_data(cfg, out: Path, jobs: int = 1) -> int:
    """Write a synthetic dataset file, or convert an ``import_dir`` of external clouds."""
    if cfg["import_dir"]:
        ds = import_directory(Path(cfg["import_dir"]), cfg["n_points"], cfg["data_seed"])
    else:
        ds = _dataset({**cfg, "dataset": ""})
    path = out / cfg["output"]
    write_dataset(ds, path)
    counts = np.bincount(ds.labels, minlength=ds.n_classes)
    for name, n in zip(ds.class_names, counts):
        print(f"{name}: {n}")
    print(f"wrote {path}")
    return 0


def cmd_simple_ensemble(cfg, out: Path, jobs: int = 1) -> int:
    """Train N instances and report K-subset ensemble statistics."""
    ds, train_idx, test_idx = _prepare(cfg)
    models = _train_family(cfg["family"], ds, train_idx, cfg, cfg["n_instances"], jobs, cfg["seed"])
    mats = [predict_scores(m, ds, test_idx, f"{cfg['family']}#{i}") for i, m in enumerate(models)]
    if cfg["save_scores"]:
        for i, m in enumerate(mats):
            write_scores(m, out / f"scores_{cfg['family']}_{i}.csv")
    policy = SubsetPolicy(cfg["subset_mode"], cfg["subset_cap"], cfg["n_random"], cfg["seed"])
    rows = []
    lo, hi = cfg["k_range"]
    for k in range(lo, hi + 1):
        for method in cfg["methods"]:
            s = evaluate_k_subsets(mats, k, method, policy)
            rows.append([k, method, s.n_subsets, s.instance_mean, s.instance_std, s.class_mean, s.class_std])
    c = ds.n_classes
    singles = [metrics(predictions(m), m.labels, c) for m in mats]
    ens = aggregate(mats, "raw_mean")
    e = metrics(predictions(ens), ens.labels, c)
    single_pc = np.mean([r.per_class_accuracy for r in singles], axis=0)
    write_report(out / "per_class.csv", "simple-ensemble", cfg,
                 ["class_name", "single_acc", "ensemble_acc", "delta"],
                 [[name, a, b, b - a] for name, a, b in zip(ds.class_names, single_pc, e.per_class_accuracy)],
                 (f"single = mean over the {len(mats)} instances; ensemble = raw_mean of all instances",))
    write_report(out / "simple_ensemble.csv", "simple-ensemble", cfg,
                 ["k", "method", "n_subsets", "instance_mean", "instance_std", "class_mean", "class_std"], rows,
                 ("mean/std = average and population standard deviation over the K-subsets (never best-of)",
                  "expected trend: accuracy rises and spread shrinks as K grows"))
    return 0


def cmd_bagging(cfg, out: Path, jobs: int = 1) -> int:
    """Bagging with and without replacement over training fractions."""
    ds, train_idx, test_idx = _prepare(cfg)
    arch = default_arch(cfg["family"], ds.n_classes)
    res = run_bagging_experiment(ds, arch, _train_cfg(cfg), train_idx, test_idx, cfg["fractions"],
                                 cfg["n_instances"], cfg["seed"], jobs)
    rows = [[r.fraction, r.variant, r.n_models, r.single_instance_mean, r.single_instance_std,
             r.ensemble_instance, r.instance_gain, r.single_class_mean, r.ensemble_class, r.class_gain]
            for r in res]
    write_report(out / "bagging.csv", "bagging", cfg,
                 ["fraction", "variant", "n_models", "single_instance_mean", "single_instance_std",
                  "ensemble_instance", "instance_gain", "single_class_mean", "ensemble_class", "class_gain"],
                 rows, ("ensembles use raw_mean; with_replacement and simple rows repeat on every fraction",
                        "expected trend: the largest gain appears at the smallest training fraction"))
    return 0


def _constraints(cfg) -> dict[int, WeightRange]:
    fams = cfg["families"]
    return {fams.index(k[7:]): v for k, v in cfg.items() if k.startswith("weight.")}


def _pair_constraint(step: float) -> dict[int, WeightRange]:
    # k_1 strictly inside (0, 1): both members contribute
    return {0: WeightRange(step, 1.0 - step)}


def cmd_weight_search(cfg, out: Path, jobs: int = 1) -> int:
    """Weighted mixing of standardized architecture scores."""
    ds, train_idx, test_idx = _prepare(cfg)
    fams = cfg["families"]
    eval_src = []
    for f_i, fam in enumerate(fams):
        models = _train_family(fam, ds, train_idx, cfg, cfg["n_instances"], jobs, cfg["seed"] + 1000 * f_i)
        te = [predict_scores(m, ds, test_idx, fam) for m in models]
        tr = [predict_scores(m, ds, train_idx, fam) for m in models]
        if cfg["mix"] == "single":
            te, tr = te[:1], tr[:1]
        te_e, tr_e = aggregate(te, "raw_mean"), aggregate(tr, "raw_mean")
        # sigma comes from the training-set scores, the mix is scored on the test split
        eval_src.append(standardize(te_e, tr_e))
    c = ds.n_classes
    ranks = best_per_class_rank([metrics(predictions(m), m.labels, c) for m in eval_src])
    write_report(out / "rank.csv", "weight-search", cfg, ["architecture", "score"],
                 [[f, r] for f, r in zip(fams, ranks)],
                 ("one point per class to the best architecture; an N-way tie gives 1/N each",))
    header = ["search", "mix", *[f"w_{f}" for f in fams], "instance_accuracy", "class_accuracy"]
    rows = []

    def emit(kind, w_full, mixed):
        r = metrics(predictions(mixed), mixed.labels, c)
        rows.append([kind, cfg["mix"], *w_full, r.instance_accuracy, r.mean_class_accuracy])

    if cfg["search"] == "pair":
        step = cfg["pair_step"]
        for a, b in itertools.combinations(range(len(fams)), 2):
            for w in weight_lattice(2, step, _pair_constraint(step)):
                full = [0.0] * len(fams)
                full[a], full[b] = w
                emit("pair", full, weighted_mix([eval_src[a], eval_src[b]], w))
    else:
        lattice = weight_lattice(len(fams), cfg["grid_step"], _constraints(cfg))
        scored = []
        for w in lattice:
            mixed = weighted_mix(eval_src, w)
            r = metrics(predictions(mixed), mixed.labels, c)
            scored.append((-r.instance_accuracy, w, mixed))
        scored.sort(key=lambda t: (t[0], t[1]))
        for _, w, mixed in scored:
            emit("grid", list(w), mixed)
    uniform = [1.0 / len(fams)] * len(fams)
    emit("uniform", uniform, weighted_mix(eval_src, uniform))
    emit("raw_mean", uniform, aggregate(eval_src, "raw_mean"))
    write_report(out / "weight_search.csv", "weight-search", cfg, header, rows,
                 (f"mix = {cfg['mix']}: " + ("raw_mean sub-ensemble of each architecture's instances"
                                             if cfg["mix"] == "subensemble" else "first instance of each architecture"),
                  "scores standardized by the pooled std of each source's training-set scores; "
                  "accuracy measured on the test split",
                  "grid rows sorted by instance accuracy (desc) then weights"))
    return 0


def cmd_random_factors(cfg, out: Path, jobs: int = 1) -> int:
    """Ensembles over the 8 const/varied seed-factor combinations."""
    ds, train_idx, test_idx = _prepare(cfg)
    arch = default_arch(cfg["family"], ds.n_classes)
    root, n = cfg["seed"], cfg["n_instances"]
    grid = list(itertools.product((False, True), repeat=3))
    tasks, owners = [], []
    for row, (vd, vi, vr) in enumerate(grid):
        for i in range(n):
            sb = SeedBundle(root + i if vd else None, root + i if vi else None, root + i if vr else None)
            tasks.append((arch, ds, train_idx, sb, _train_cfg(cfg)))
            owners.append(row)
    models = train_many(tasks, jobs)
    c = ds.n_classes
    rows = []
    for row, (vd, vi, vr) in enumerate(grid):
        ms = [m for m, o in zip(models, owners) if o == row]
        mats = [predict_scores(m, ds, test_idx) for m in ms]
        inst, cls = _single_stats(mats, c)
        ens = aggregate(mats, "raw_mean")
        e = metrics(predictions(ens), ens.labels, c)
        diff = max(float(np.max(np.abs(a.scores - mats[0].scores))) for a in mats)
        same = all(np.array_equal(m.params, ms[0].params) for m in ms)
        lab = ["varied" if v else "const" for v in (vd, vi, vr)]
        rows.append([*lab, len(ms), float(inst.mean()), float(inst.std()), e.instance_accuracy,
                     e.instance_accuracy - float(inst.mean()), float(cls.mean()), e.mean_class_accuracy,
                     e.mean_class_accuracy - float(cls.mean()), diff, same])
    write_report(out / "random_factors.csv", "random-factors", cfg,
                 ["data_order", "init", "dropout", "n_models", "single_instance_mean", "single_instance_std",
                  "ensemble_instance", "instance_gain", "single_class_mean", "ensemble_class", "class_gain",
                  "max_score_diff", "identical_models"], rows,
                 ("const = shared fixed seed; varied = seed + instance index",
                  "data_order covers both sample order and augmentation",
                  "expected: the all-const row has identical models and zero gain"))
    return 0


def cmd_head_ensemble(cfg, out: Path, jobs: int = 1) -> int:
    """Retrain classifier heads on frozen encoders."""
    ds, train_idx, test_idx = _prepare(cfg)
    n_enc, n_heads = cfg["n_encoders"], cfg["n_heads"]
    root = cfg["seed"]
    encoders = _train_family(cfg["family"], ds, train_idx, cfg, n_enc, jobs, root)
    c = ds.n_classes
    rows = []
    tot = np.zeros(6)
    for i, enc in enumerate(encoders):
        base = predict_scores(enc, ds, test_idx)
        b = metrics(predictions(base), base.labels, c)
        heads = [retrain_classifier(enc, ds, train_idx, root + n_enc + i * n_heads + j, cfg["head_epochs"],
                                    _train_cfg(cfg)) for j in range(n_heads)]
        unchanged = all(h.encoder_params.tobytes() == enc.encoder_params.tobytes() for h in heads)
        mats = [predict_scores(h, ds, test_idx) for h in heads]
        inst, cls = _single_stats(mats, c)
        ens = aggregate(mats, "raw_mean")
        e = metrics(predictions(ens), ens.labels, c)
        vals = [b.instance_accuracy, float(inst.mean()), e.instance_accuracy, b.mean_class_accuracy,
                float(cls.mean()), e.mean_class_accuracy]
        tot += vals
        rows.append([i, *vals[:3], vals[2] - vals[1], *vals[3:], vals[5] - vals[4], unchanged])
    m = tot / n_enc
    rows.append(["mean", *m[:3], m[2] - m[1], *m[3:], m[5] - m[4], all(r[-1] for r in rows)])
    write_report(out / "head_ensemble.csv", "head-ensemble", cfg,
                 ["encoder", "original_instance", "heads_single_instance", "heads_ensemble_instance",
                  "instance_increase", "original_class", "heads_single_class", "heads_ensemble_class",
                  "class_increase", "encoder_unchanged"], rows,
                 (f"{n_heads} heads per encoder, {cfg['head_epochs']} epochs each, encoder frozen",
                  "heads_single = mean over the retrained heads; ensemble = raw_mean of the heads"))
    return 0


def cmd_frustum(cfg, out: Path, jobs: int = 1) -> int:
    """Train pipeline instances and score none / last / all ensembling."""
    train_sc = generate_scenes(cfg["n_train_scenes"], cfg["n_object_points"], cfg["n_clutter_points"],
                               cfg["scene_seed"])
    test_sc = generate_scenes(cfg["n_test_scenes"], cfg["n_object_points"], cfg["n_clutter_points"],
                              cfg["scene_seed"] + 1)
    pcfg = PipelineTrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                               learning_rate=cfg["learning_rate"])
    # two seed streams per instance (init, data order)
    seeds = [cfg["seed"] + 2 * i for i in range(cfg["n_instances"])]
    if jobs > 1 and len(seeds) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            instances = list(ex.map(train_pipeline, [train_sc] * len(seeds), seeds, [pcfg] * len(seeds)))
    else:
        instances = [train_pipeline(train_sc, s, pcfg) for s in seeds]
    miou = float(np.mean([mask_iou(segment(instances[0], s.points, s.label) >= 0.5, s.mask) for s in test_sc]))
    res = evaluate_detection(instances, test_sc, ENSEMBLE_MODES)
    thr = cfg["iou_threshold"]
    rows, det_rows = [], []
    for mode in ENSEMBLE_MODES:
        sel = [r for r in res if r.mode == mode]
        for iou_mode, attr in (("ground", "iou_ground"), ("full3d", "iou_3d")):
            v = np.array([getattr(r, attr) for r in sel])
            rows.append([mode, iou_mode, len(sel), float(np.mean(v >= thr)), float(v.mean())])
            det_rows += [[r.scene_id, f"{mode}/{iou_mode}", getattr(r, attr), getattr(r, attr) >= thr] for r in sel]
    notes = (f"instances = {len(instances)}; none = instance 0 alone; last = box heads averaged on instance 0's "
             "mask and centering; all = probabilities, translations and box heads averaged",
             f"ap = fraction of scenes with IoU >= {thr} (one box per scene)",
             f"instance 0 mean mask IoU on test scenes = {miou:.6f}",
             "expected trend: averaging all modules beats averaging only the last module")
    write_report(out / "frustum.csv", "frustum", cfg, ["mode", "iou_mode", "n_scenes", "ap", "mean_iou"], rows, notes)
    write_report(out / "detections.csv", "frustum", cfg, ["scene_id", "mode", "iou", "correct"], det_rows)
    return 0


def cmd_timing(cfg, out: Path, jobs: int = 1) -> int:
    """Batch inference timing and parameter counts."""
    rng = seeded_rng(cfg["seed"])
    batch = rng.standard_normal((cfg["batch_size"], cfg["n_points"], 3))
    rows = []
    for i, fam in enumerate(cfg["families"]):
        arch = default_arch(fam, cfg["n_classes"])
        init = seeded_rng(cfg["seed"] + 1 + i)
        params = np.concatenate([init_params(arch.phi, init), init_params(arch.rho, init)])
        t = time_inference(TrainedModel(arch, params), batch, cfg["repetitions"])
        rows.append([fam, t["param_count"], t["batch_size"], t["repetitions"], t["mean"], t["std"],
                     t["min"], t["max"]])
    write_report(out / "timing.csv", "timing", cfg,
                 ["family", "param_count", "batch_size", "repetitions", "mean_s", "std_s", "min_s", "max_s"],
                 rows, ("seconds per forward pass of one batch; one warm-up pass excluded",
                        "timings depend on the machine and are not reproducible byte-for-byte"))
    return 0


HANDLERS = {"gen-data": cmd_gen_data, "simple-ensemble": cmd_simple_ensemble, "bagging": cmd_bagging,
            "weight-search": cmd_weight_search, "random-factors": cmd_random_factors,
            "head-ensemble": cmd_head_ensemble, "frustum": cmd_frustum, "timing": cmd_timing}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="psetlab", description="Point-set ensemble experiments.")
    p.add_argument("--version", action="version", version=f"psetlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name, help=(HANDLERS[name].__doc__ or name.replace("-", " ")).strip().splitlines()[0])
        s.add_argument("--config", type=Path, help="key = value config file")
        s.add_argument("--out", type=Path, default=Path("."), help="output directory")
        s.add_argument("--seed", type=int, help="overrides the config seed root")
        s.add_argument("--jobs", type=int, default=1, help="parallel training processes")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def run(command: str, config_text: str = "", out: Path = Path("."), seed: int | None = None,
        jobs: int = 1) -> int:
    """Validate ``config_text`` and run ``command``; returns the exit code."""
    try:
        cfg = resolve_config(command, read_config_text(config_text), seed)
        if jobs < 1:
            raise ConfigError("--jobs must be >= 1")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        out.mkdir(parents=True, exist_ok=True)
        return HANDLERS[command](cfg, out, jobs)
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    text = ""
    if args.config is not None:
        try:
            text = args.config.read_text(encoding="utf-8")
        except OSError as e:
            print(f"config error: cannot read {args.config}: {e}", file=sys.stderr)
            return 2
    return run(args.command, text, args.out, args.seed, args.jobs)


if __name__ == "__main__":
    sys.exit(main())
