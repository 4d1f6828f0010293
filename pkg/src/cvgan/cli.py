"""Command-line orchestration for the CVGAN pipeline.

Every command reads one YAML run configuration (``--config``), resolves it
against the defaults below, and writes its artifacts under ``--out``. Run
directories are named after the variant, loss configuration, mode and seed
plus a short hash of the resolved configuration, so rerunning an identical
configuration finds its finished run instead of training again.

Errors are reported as one ``key=value`` line on stderr and mapped onto exit
codes: 2 configuration, 3 data, 4 numerical abort, 5 contract violation.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import yaml

from .argen import ar_generate, plan_hi_schedule, rms_profile
from .dataset import (
    WindowSet,
    build_lifecycle,
    dataset_fingerprint,
    fit_norm_stats,
    ingest_bearing,
    load_dataset,
    phm_fpt_index,
    save_dataset,
    toy_corpus,
)
from .errors import ConfigError, ContractError, CvganError, MissingDataError
from .evaluation import Evaluator
from .losses import DISC_SIDE, LossConfig, Term, compose_config
from .metrics import FeatureExtractor, MetricReport, write_json, write_reports
from .nets import VARIANTS, build_model, load_checkpoint
from .rulpred import ExperimentPlan, PredictorPlan, PredictorSpec, build_predictor, train_predictor, window_arrays
from .trainer import MODES, PAPER_SEEDS, TrainPlan, train, train_feature_extractor, train_initial_generator

logger = logging.getLogger("cvgan")

COMMANDS = ("prepare", "train", "train-init", "generate", "evaluate", "rul", "report")

DEFAULTS = {
    "dataset": {
        "container": None,  # default: <out>/dataset.zip
        "source": "synthetic",  # synthetic | phm
        "raw_dir": None,
        "bearings": [],
        "synthetic": {"count": 8, "n": 200, "fpt_index": 80, "noise_scale": 0.05, "seed": 0},
        "k": 15,
        "n_feature": 512,
        "hi_mode": "piecewise",
    },
    "model": {"variant": "CVGAN", "channel_scale": None},
    "loss": {"config": "conf9", "weights": {}, "terms": None},
    "train": {f.name: f.default for f in dataclasses.fields(TrainPlan)},
    "generate": {"checkpoint": None, "initial": None, "length": 1000, "fpt_step": 300, "seeds": None},
    "evaluate": {
        "checkpoint": None,
        "initial": None,
        "generated": None,
        "metrics": ["mmd", "fid"],
        "pca_dims": 64,
        "bandwidth": 1.0,
        "extractor_epochs": 5,
        "predictor_epochs": 0,
    },
    "rul": {
        "test_bearing": None,
        "train_bearings": None,
        "predictor": "SCNN",
        "seeds": list(PAPER_SEEDS),
        "augmentation": "none",  # none | container | checkpoint
        "generated": None,
        "checkpoint": None,
        "initial": None,
        "n_generated": 1,
        "length": None,
        "fpt_step": None,
        "plan": {f.name: f.default for f in dataclasses.fields(PredictorPlan)},
    },
}
DEFAULTS["train"]["betas"] = list(DEFAULTS["train"]["betas"])

# sections whose values are free-form mappings rather than fixed keys
_OPEN_KEYS = {("loss", "weights")}


# ---------------------------------------------------------------------------
# configuration


def _merge(base: dict, update: dict, path: tuple = ()) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = path + (key,)
        if key not in base:
            raise ConfigError(f"unknown config key {'.'.join(map(str, where))}")
        if isinstance(base[key], dict) and where not in _OPEN_KEYS:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {'.'.join(where)} must be a mapping")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | Path | None, seed: int | None = None) -> dict:
    """Defaults overlaid with the YAML document at ``path``; unknown keys are rejected."""
    user = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            user = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as err:
            raise ConfigError(f"{path}: invalid YAML: {' '.join(str(err).split())}") from err
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    cfg = _merge(DEFAULTS, user)
    if seed is not None:
        cfg["train"]["seed"] = int(seed)
        cfg["rul"]["plan"]["seed"] = int(seed)
    if cfg["model"]["variant"] not in VARIANTS:
        raise ConfigError(f"unknown variant {cfg['model']['variant']!r}; expected one of {sorted(VARIANTS)}")
    if cfg["train"]["mode"] not in MODES:
        raise ConfigError(f"unknown training mode {cfg['train']['mode']!r}; expected one of {MODES}")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha1(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:10]


def loss_config(cfg: dict) -> LossConfig:
    sec = cfg["loss"]
    if sec["terms"]:
        terms = [Term(t) for t in sec["terms"]]
        vae = {t: 1.0 for t in terms if t not in DISC_SIDE and t is not Term.C}
        disc = {t: 1.0 for t in terms if t in DISC_SIDE}
        out = LossConfig("custom", vae, disc)
        for term, w in (sec["weights"] or {}).items():
            out = out.with_weight(term, w)
        return out
    return compose_config(sec["config"], sec["weights"] or None)


def train_plan(cfg: dict) -> TrainPlan:
    try:
        return TrainPlan(**cfg["train"])
    except TypeError as err:
        raise ConfigError(f"train: {err}") from err


# ---------------------------------------------------------------------------
# run directories


@contextmanager
def run_lock(run_dir: Path):
    """Advisory lock so two processes never write into the same run directory."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ContractError(f"run directory {run_dir} is locked by another process ({lock})") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield run_dir
    finally:
        lock.unlink(missing_ok=True)


def run_dir_for(out: Path, command: str, cfg: dict, *parts) -> Path:
    name = "-".join(str(p) for p in parts if p is not None)
    return out / command / f"{name}-{config_hash(cfg)}"


def _finished(run_dir: Path, marker: str) -> bool:
    return (run_dir / marker).is_file() and (run_dir / "manifest.json").is_file()


def _write_manifest(run_dir: Path, cfg: dict, command: str, **fields):
    write_json(run_dir / "manifest.json", {"command": command, "config": cfg, "status": "complete", **fields})


def _container_path(cfg: dict, out: Path) -> Path:
    return Path(cfg["dataset"]["container"] or out / "dataset.zip")


def _load_real(cfg: dict, out: Path):
    lifecycles, meta = load_dataset(_container_path(cfg, out))
    k, nf = cfg["dataset"]["k"], cfg["dataset"]["n_feature"]
    if lifecycles and lifecycles[0].n_feature != nf:
        raise ConfigError(f"dataset has n_feature={lifecycles[0].n_feature}, config says {nf}")
    return lifecycles, meta, k


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(cfg: dict, out: Path) -> dict:
    ds = cfg["dataset"]
    k, nf = ds["k"], ds["n_feature"]
    if ds["source"] == "synthetic":
        syn = ds["synthetic"]
        lifecycles = toy_corpus(syn["count"], syn["n"], syn["fpt_index"], n_feature=nf, noise_scale=syn["noise_scale"], seed=syn["seed"])
        provenance = {"source": "synthetic", "synthetic": syn}
    elif ds["source"] == "phm":
        if not ds["raw_dir"]:
            raise ConfigError("dataset.raw_dir is required for source 'phm'")
        root = Path(ds["raw_dir"])
        if not root.is_dir():
            raise MissingDataError(f"raw data directory not found: {root}")
        if not ds["bearings"]:
            raise ConfigError("dataset.bearings must list at least one bearing")
        recordings = [ingest_bearing(root / b, b) for b in ds["bearings"]]
        stats = fit_norm_stats(r.snapshots for r in recordings)
        lifecycles = [build_lifecycle(r, phm_fpt_index(r.bearing_id), stats, nf, ds["hi_mode"]) for r in recordings]
        provenance = {"source": "phm", "raw_dir": str(root), "bearings": list(ds["bearings"])}
    else:
        raise ConfigError(f"unknown dataset.source {ds['source']!r}; expected 'synthetic' or 'phm'")

    counts = {lc.bearing_id: {"snapshots": len(lc), "windows": max(len(lc) - k, 0)} for lc in lifecycles}
    path = _container_path(cfg, out)
    digest = save_dataset(path, lifecycles, provenance | {"k": k, "n_feature": nf, "hi_mode": ds["hi_mode"]})
    for bid, c in counts.items():
        print(f"{bid}\tsnapshots={c['snapshots']}\twindows={c['windows']}")
    print(f"container={path}\tsha256={digest}")
    return {"container": str(path), "sha256": digest, "counts": counts}


def cmd_train(cfg: dict, out: Path) -> dict:
    lifecycles, _, k = _load_real(cfg, out)
    plan = train_plan(cfg)
    lc_cfg = loss_config(cfg)
    variant = cfg["model"]["variant"]
    run_dir = run_dir_for(out, "train", cfg, variant, lc_cfg.name, plan.mode, f"s{plan.seed}")
    if _finished(run_dir, "checkpoint.pt"):
        print(f"run_dir={run_dir}\tstatus=up-to-date")
        return {"run_dir": str(run_dir)}
    overrides = {}
    if cfg["model"]["channel_scale"] is not None:
        overrides["channel_scale"] = cfg["model"]["channel_scale"]
    with run_lock(run_dir):
        model = build_model(variant, k, cfg["dataset"]["n_feature"], seed=plan.seed, **overrides)
        _, manifest = train(model, WindowSet(lifecycles, k), lc_cfg, plan, run_dir)
        manifest.extra["config"] = cfg
        manifest.extra["command"] = "train"
        manifest.write(run_dir)
    print(f"run_dir={run_dir}\tbest_epoch={manifest.best_epoch}\tbest_score={manifest.best_score:.6g}")
    return {"run_dir": str(run_dir), "best_epoch": manifest.best_epoch}


def cmd_train_init(cfg: dict, out: Path) -> dict:
    lifecycles, _, k = _load_real(cfg, out)
    plan = train_plan(cfg)
    run_dir = run_dir_for(out, "train-init", cfg, "INIT", f"s{plan.seed}")
    if _finished(run_dir, "initial.pt"):
        print(f"run_dir={run_dir}\tstatus=up-to-date")
        return {"run_dir": str(run_dir)}
    scale = cfg["model"]["channel_scale"] or 1.0
    with run_lock(run_dir):
        train_initial_generator(lifecycles, k, plan, scale, run_dir)
        _write_manifest(run_dir, cfg, "train-init", dataset_fingerprint=dataset_fingerprint(lifecycles))
    print(f"run_dir={run_dir}\tcheckpoint={run_dir / 'initial.pt'}")
    return {"run_dir": str(run_dir)}


def _require(value, key: str):
    if not value:
        raise ConfigError(f"{key} is required")
    return value


def _generate_lifecycles(checkpoint: str, initial: str | None, length: int, fpt_step: int, seeds, norm_stats):
    model = load_checkpoint(checkpoint)
    init = load_checkpoint(initial) if initial else None
    schedule = plan_hi_schedule(length, fpt_step)
    out = []
    for s in seeds:
        g = ar_generate(model, init, schedule, int(s))
        out.append(g.to_lifecycle(f"generated_{model.variant}_s{s}", norm_stats))
    return out


def cmd_generate(cfg: dict, out: Path) -> dict:
    gen = cfg["generate"]
    ckpt = _require(gen["checkpoint"], "generate.checkpoint")
    seeds = gen["seeds"] or [cfg["train"]["seed"]]
    run_dir = run_dir_for(out, "generate", cfg, Path(ckpt).parent.name, f"L{gen['length']}", f"s{seeds[0]}")
    if _finished(run_dir, "generated.zip"):
        print(f"run_dir={run_dir}\tstatus=up-to-date")
        return {"run_dir": str(run_dir)}
    norm_stats = None
    container = _container_path(cfg, out)
    if container.is_file():
        real, _ = load_dataset(container)
        norm_stats = real[0].norm_stats if real else None
    with run_lock(run_dir):
        lifecycles = _generate_lifecycles(ckpt, gen["initial"], gen["length"], gen["fpt_step"], seeds, norm_stats)
        digest = save_dataset(run_dir / "generated.zip", lifecycles, {"checkpoint": str(ckpt), "seeds": list(seeds)})
        for lc in lifecycles:
            rms = rms_profile(lc)
            np.savetxt(run_dir / f"rms_{lc.bearing_id}.csv", rms, delimiter=",", header="horizontal,vertical", comments="")
        _write_manifest(run_dir, cfg, "generate", sha256=digest, lengths=[len(lc) for lc in lifecycles])
    print(f"run_dir={run_dir}\tlifecycles={len(lifecycles)}\tsteps={gen['length']}")
    return {"run_dir": str(run_dir), "lengths": [len(lc) for lc in lifecycles]}


def cmd_evaluate(cfg: dict, out: Path) -> dict:
    ev = cfg["evaluate"]
    lifecycles, _, k = _load_real(cfg, out)
    seed = cfg["train"]["seed"]
    windows = WindowSet(lifecycles, k)
    extractor = None
    if "fid" in ev["metrics"]:
        extractor = FeatureExtractor(train_feature_extractor(windows, epochs=ev["extractor_epochs"], seed=seed))
    predictor = None
    if ev["predictor_epochs"] > 0:
        spec = PredictorSpec("SCNN", k, windows.n_feature)
        plan = PredictorPlan(epochs=ev["predictor_epochs"], seed=seed)
        predictor, _ = train_predictor(build_predictor(spec, seed), window_arrays(windows), plan)
    evaluator = Evaluator.fit(lifecycles, k, ev["pca_dims"], extractor, predictor)
    evaluator.bandwidth = float(ev["bandwidth"])

    rows = []
    if ev["generated"]:
        name = Path(ev["generated"]).stem
        gen_lcs, _ = load_dataset(ev["generated"])
        report = evaluator.report(WindowSet(gen_lcs, k).batch()[0])
        rows.append(_metric_row(name, "file", report))
        key = name
    else:
        ckpt = _require(ev["checkpoint"], "evaluate.checkpoint or evaluate.generated")
        model = load_checkpoint(ckpt, {"k": k, "n_feature": windows.n_feature})
        init = load_checkpoint(ev["initial"]) if ev["initial"] else None
        reports = evaluator.evaluate(model, init, seed)
        key = Path(ckpt).parent.name
        rows += [_metric_row(key, mode, reports[mode]) for mode in ("AR", "NAR")]
    run_dir = run_dir_for(out, "evaluate", cfg, key, f"s{seed}")
    with run_lock(run_dir):
        write_reports(run_dir / "report.csv", rows)
        write_json(run_dir / "report.json", {"metrics": rows})
        _write_manifest(run_dir, cfg, "evaluate")
    _print_table(rows)
    print(f"run_dir={run_dir}")
    return {"run_dir": str(run_dir), "rows": rows}


def _metric_row(model: str, mode: str, report: MetricReport) -> dict:
    prov = report.provenance
    return {
        "kind": "metrics",
        "model": model,
        "mode": mode,
        **report.row(),
        "projector_fingerprint": ":".join(prov["projector_fingerprints"]),
        "extractor_fingerprint": prov.get("extractor_fingerprint") or "",
    }


def cmd_rul(cfg: dict, out: Path) -> dict:
    from .rulpred import augmentation_experiment

    r = cfg["rul"]
    lifecycles, _, k = _load_real(cfg, out)
    test = _require(r["test_bearing"], "rul.test_bearing")
    generated = []
    if r["augmentation"] == "container":
        generated, _ = load_dataset(_require(r["generated"], "rul.generated"))
    elif r["augmentation"] == "checkpoint":
        ckpt = _require(r["checkpoint"], "rul.checkpoint")
        ref = next((lc for lc in lifecycles if lc.bearing_id == test), lifecycles[0])
        length = r["length"] or len(ref)
        fpt = r["fpt_step"] or min(max(ref.fpt_index + 1, 1), length - 1)
        seeds = [cfg["train"]["seed"] * 1000 + i for i in range(r["n_generated"])]
        generated = _generate_lifecycles(ckpt, r["initial"], length, fpt, seeds, lifecycles[0].norm_stats)
    elif r["augmentation"] != "none":
        raise ConfigError(f"unknown rul.augmentation {r['augmentation']!r}; expected none, container or checkpoint")

    plan = ExperimentPlan(
        test_bearing=test,
        train_bearings=r["train_bearings"],
        predictor=r["predictor"],
        seeds=tuple(r["seeds"]),
        k=k,
        predictor_plan=PredictorPlan(**r["plan"]),
        augmentation=r["augmentation"],
    )
    run_dir = run_dir_for(out, "rul", cfg, r["predictor"], test, r["augmentation"])
    with run_lock(run_dir):
        result = augmentation_experiment(plan, lifecycles, generated)
        row = {
            "kind": "rul",
            "model": r["predictor"],
            "mode": r["augmentation"],
            "test_bearing": test,
            "n_train_windows": result["n_train_windows"],
            **{key: (result["mean"] or {}).get(key, "undefined") for key in ("mae", "rmse", "score")},
            "partial": result["partial"],
        }
        write_reports(run_dir / "report.csv", [row])
        write_json(run_dir / "report.json", {"rul": [row], "detail": result})
        _write_manifest(run_dir, cfg, "rul")
    _print_table([row])
    print(f"run_dir={run_dir}")
    return {"run_dir": str(run_dir), "row": row}


METRIC_COLUMNS = ("kind", "model", "mode") + MetricReport.VALUE_FIELDS + (
    "n_generated",
    "n_real",
    "projector_fingerprint",
    "extractor_fingerprint",
    "run",
)
RUL_COLUMNS = ("kind", "model", "mode", "test_bearing", "n_train_windows", "mae", "rmse", "score", "partial", "run")


def _ordered(row: dict, columns) -> dict:
    out = {c: row[c] for c in columns if c in row}
    out.update({k: v for k, v in row.items() if k not in out})
    return out


def merge_reports(run_dirs) -> list[dict]:
    """Rows of every run's report, refusing to mix evaluator provenance.

    Run directories without a report (training or generation runs) add no
    rows; a directory without a manifest is not a run directory at all.
    """
    rows, seen = [], {}
    for d in map(Path, run_dirs):
        path = d / "report.json"
        if not path.is_file():
            if not (d / "manifest.json").is_file():
                raise MissingDataError(f"not a run directory (no manifest.json): {d}")
            continue
        doc = json.loads(path.read_text())
        for row in doc.get("metrics", []):
            fp = row.get("projector_fingerprint", "")
            seen.setdefault(fp, str(d))
            rows.append(_ordered(dict(row, run=str(d)), METRIC_COLUMNS))
        rows += [_ordered(dict(row, run=str(d)), RUL_COLUMNS) for row in doc.get("rul", [])]
    if len(seen) > 1:
        listing = " vs ".join(f"{fp}@{d}" for fp, d in seen.items())
        raise ContractError(f"refusing to merge MMD/FID columns: projector fingerprints differ: {listing}")
    return rows


def cmd_report(run_dirs, out: Path, plot: bool = False) -> dict:
    if not run_dirs:
        raise ConfigError("report needs at least one run directory")
    rows = merge_reports(run_dirs)
    out.mkdir(parents=True, exist_ok=True)
    metric_rows = [r for r in rows if r.get("kind") == "metrics"]
    rul_rows = [r for r in rows if r.get("kind") == "rul"]
    if metric_rows:
        write_reports(out / "metrics.csv", metric_rows)
        _print_table(metric_rows)
    if rul_rows:
        write_reports(out / "rul.csv", rul_rows)
        _print_table(rul_rows)
    if plot:
        _plots(run_dirs, out)
    return {"rows": rows}


def _plots(run_dirs, out: Path):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.warning("matplotlib not installed; skipping plots")
        return
    for d in map(Path, run_dirs):
        trace = d / "loss_trace.csv"
        if trace.is_file():
            with open(trace) as fh:
                recs = list(csv.DictReader(fh))
            fig, ax = plt.subplots(figsize=(6, 3.5))
            for key in ("vae", "disc", "cls", "val"):
                if recs and key in recs[0]:
                    ax.plot([float(r[key]) if r[key] else np.nan for r in recs], label=key)
            ax.set_xlabel("epoch")
            ax.legend()
            fig.savefig(out / f"loss_{d.name}.png", dpi=100, bbox_inches="tight")
            plt.close(fig)
        for rms_file in sorted(d.glob("rms_*.csv")):
            rms = np.loadtxt(rms_file, delimiter=",", skiprows=1, ndmin=2)
            fig, ax = plt.subplots(figsize=(6, 3.5))
            ax.plot(rms[:, 0], label="horizontal")
            ax.plot(rms[:, 1], label="vertical")
            ax.set_xlabel("step")
            ax.set_ylabel("RMS")
            ax.legend()
            fig.savefig(out / f"{rms_file.stem}.png", dpi=100, bbox_inches="tight")
            plt.close(fig)


def _print_table(rows: list[dict]):
    if not rows:
        return
    keys = list(rows[0])
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]
    print("\t".join(keys))
    for r in rows:
        cells = []
        for k in keys:
            v = r.get(k, "")
            cells.append(f"{v:.6g}" if isinstance(v, float) else str(v))
        print("\t".join(cells))


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="YAML run configuration")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override every seed in the config")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output root (default: runs)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="cvgan", description=__doc__.split("\n")[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "report":
            p.add_argument("run_dirs", nargs="+")
            p.add_argument("--plot", action="store_true")
    return parser


def _fail(err: Exception, code: int) -> int:
    msg = " ".join(str(err).split())
    print(f"error code={code} type={type(err).__name__} message={json.dumps(msg)}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    out = Path(getattr(args, "out", "runs"))
    try:
        if args.command == "report":
            cmd_report(args.run_dirs, out, args.plot)
            return 0
        cfg = load_config(getattr(args, "config", None), getattr(args, "seed", None))
        handler = {
            "prepare": cmd_prepare,
            "train": cmd_train,
            "train-init": cmd_train_init,
            "generate": cmd_generate,
            "evaluate": cmd_evaluate,
            "rul": cmd_rul,
        }[args.command]
        handler(cfg, out)
        return 0
    except CvganError as err:
        return _fail(err, err.exit_code)


if __name__ == "__main__":
    sys.exit(main())
