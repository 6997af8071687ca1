"""Command-line pipeline: cohort-gen, train, segment, eval, stats.

Settings come from a scale preset, then an optional ``key=value`` config file,
then ``--seed`` and ``--set KEY=VALUE`` flags (later wins).  All artefacts live
under ``--workdir``.

Exit codes: 0 success, 2 usage or input error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .autograd import NonFiniteGradientError
from .cohortstats import (Plot, bland_altman, cohort_summary, gam_fit, rows_from_subjects, write_report)
from .cohortstats.report import column
from .phantom import (COHORT_COLUMNS, DESK_SPACING, FULL_SPACING, CohortSpec, read_cohort_csv, sample_cohort,
                      synthesize_cohort_member, write_cohort_csv)
from .prep import CropSpec, SubjectImages, build_training_set
from .trainer import TrainConfig, evaluate_dsc, segment_subject, subject_dsc, train, write_history_csv
from .vnet import CorruptCheckpointError, load_checkpoint, save_checkpoint
from .voxgrid import LEFT, RIGHT, LandmarkPair, MvolError, dsc, read_mvol, write_mvol

log = logging.getLogger("muscleseg")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

PRESETS = {
    "desk": {"n": 30, "n_train": 24, "crop": (32, 32, 64), "spacing": DESK_SPACING, "width": 0.25,
             "epochs": 5, "batch_size": 3, "lr": 1e-3, "aug_count": 0},
    "full": {"n": 90, "n_train": 70, "crop": (96, 96, 192), "spacing": FULL_SPACING, "width": 1.0,
              "epochs": 100, "batch_size": 3, "lr": 1e-4, "aug_count": 7},
}
COMMON = {"seed": 0, "aug_range": 1.0, "images": True, "symmetric": False, "cleanup": False,
          "validate": False, "volumes": "predicted", "gam_knots": 10}
PREDICTED = ("predicted_left_ml", "predicted_right_ml")


class InputError(Exception):
    """Bad configuration or missing/invalid inputs (exit code 2)."""


# ------------------------------------------------------------------ config

def _parse_value(key: str, raw: str, like):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, tuple):
            cast = int if isinstance(like[0], int) else float
            return tuple(cast(v) for v in raw.split(","))
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        return raw
    except ValueError:
        raise InputError(f"bad value for {key}: {raw!r}") from None


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"config line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve_config(scale: str = "desk", config_path=None, seed=None, overrides=()) -> dict:
    cfg = {**COMMON, **PRESETS[scale]}
    raw: dict[str, str] = {}
    if config_path is not None:
        try:
            raw.update(parse_config_text(Path(config_path).read_text(encoding="utf-8")))
        except OSError as exc:
            raise InputError(f"cannot read config {config_path}: {exc.strerror}") from None
    for item in overrides:
        if "=" not in item:
            raise InputError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = value
    for key, value in raw.items():
        if key not in cfg:
            raise InputError(f"unknown setting {key!r}; known: {', '.join(sorted(cfg))}")
        cfg[key] = _parse_value(key, value, cfg[key])
    if seed is not None:
        cfg["seed"] = seed
    if "n" in raw and "n_train" not in raw:
        # keep the preset's train fraction when only the cohort size changes
        preset = PRESETS[scale]
        cfg["n_train"] = round(cfg["n"] * preset["n_train"] / preset["n"])
    if cfg["n"] < 1:
        raise InputError(f"cohort size n must be >= 1, got {cfg['n']}")
    if not 0 <= cfg["n_train"] <= cfg["n"]:
        raise InputError("n_train must lie in [0, n]")
    if cfg["volumes"] not in ("predicted", "true"):
        raise InputError("volumes must be 'predicted' or 'true'")
    try:
        cfg["crop_spec"] = CropSpec(tuple(int(v) for v in cfg["crop"]))
    except ValueError as exc:
        raise InputError(str(exc)) from None
    return cfg


# ------------------------------------------------------------------ files

def _atomic_write(path: Path, writer) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _paths(workdir: Path) -> dict[str, Path]:
    return {
        "cohort": workdir / "cohort.csv", "landmarks": workdir / "landmarks.csv",
        "images": workdir / "images", "masks": workdir / "masks", "checkpoint": workdir / "model.ckpt",
        "history": workdir / "history.csv", "predictions": workdir / "predictions",
        "segmented": workdir / "cohort_segmented.csv", "eval": workdir / "eval_dsc.csv", "stats": workdir / "stats",
    }


LANDMARK_COLUMNS = ("id", "right_x", "right_y", "right_z", "left_x", "left_y", "left_z")


def _write_landmarks(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LANDMARK_COLUMNS)
        for sid, lm in rows:
            w.writerow([sid, *lm.right, *lm.left])


def _read_landmarks(path: Path) -> dict[str, LandmarkPair]:
    if not path.exists():
        raise InputError(f"missing landmarks file {path}")
    with open(path, newline="") as fh:
        return {r["id"]: LandmarkPair((r["right_x"], r["right_y"], r["right_z"]),
                                      (r["left_x"], r["left_y"], r["left_z"])) for r in csv.DictReader(fh)}


def _load_cohort(p):
    if not p["cohort"].exists():
        raise InputError(f"missing cohort {p['cohort']}; run cohort-gen first")
    try:
        return read_cohort_csv(p["cohort"])
    except (KeyError, ValueError) as exc:
        raise InputError(f"malformed cohort CSV: {exc}") from None


def _load_images(p, ids, need_masks: bool = True):
    lms = _read_landmarks(p["landmarks"])
    out = []
    for sid in ids:
        img_path, mask_path = p["images"] / f"{sid}.mvol", p["masks"] / f"{sid}.mvol"
        if not img_path.exists():
            raise InputError(f"missing image {img_path}")
        if need_masks and not mask_path.exists():
            raise InputError(f"no ground-truth mask for {sid} ({mask_path})")
        if sid not in lms:
            raise InputError(f"no landmarks for {sid}")
        mask = read_mvol(mask_path) if mask_path.exists() else None
        out.append(SubjectImages(sid, read_mvol(img_path), mask, lms[sid]))
    return out


def _split(cfg, subjects):
    ids = [s.id for s in subjects]
    return ids[:cfg["n_train"]], ids[cfg["n_train"]:]


def _load_model(p, cfg):
    if not p["checkpoint"].exists():
        raise InputError(f"missing checkpoint {p['checkpoint']}; run train first")
    model = load_checkpoint(p["checkpoint"])
    if tuple(model.spec.input_dims) != cfg["crop_spec"].dims:
        raise InputError(f"checkpoint expects crops {model.spec.input_dims}, config asks for {cfg['crop_spec'].dims}")
    return model


# --------------------------------------------------------------- commands

def cmd_cohort_gen(cfg, workdir: Path) -> int:
    p = _paths(workdir)
    subjects = sample_cohort(CohortSpec(cfg["n"], seed=cfg["seed"]))
    workdir.mkdir(parents=True, exist_ok=True)
    _atomic_write(p["cohort"], lambda t: write_cohort_csv(subjects, t))
    if not cfg["images"]:
        log.info("wrote %d subjects (covariates only)", len(subjects))
        return EXIT_OK
    p["images"].mkdir(exist_ok=True)
    p["masks"].mkdir(exist_ok=True)
    landmarks = []
    for i, s in enumerate(subjects):
        vol, mask, lm = synthesize_cohort_member(s, i, cfg["seed"], cfg["crop_spec"].dims, cfg["spacing"],
                                                 symmetric=cfg["symmetric"])
        write_mvol(vol, p["images"] / f"{s.id}.mvol")
        write_mvol(mask, p["masks"] / f"{s.id}.mvol")
        landmarks.append((s.id, lm))
    _atomic_write(p["landmarks"], lambda t: _write_landmarks(landmarks, t))
    log.info("wrote %d subjects with images to %s", len(subjects), workdir)
    return EXIT_OK


def cmd_train(cfg, workdir: Path) -> int:
    p = _paths(workdir)
    subjects, _ = _load_cohort(p)
    train_ids, val_ids = _split(cfg, subjects)
    if not train_ids:
        raise InputError("n_train is 0; nothing to train on")
    data = _load_images(p, train_ids)
    samples = build_training_set(data, cfg["crop_spec"], cfg["aug_count"], seed=cfg["seed"],
                                 range_scale=cfg["aug_range"])
    tc = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"], seed=cfg["seed"],
                     width=cfg["width"], crop_dims=cfg["crop_spec"].dims, train_ids=train_ids, val_ids=val_ids)
    validation = _load_images(p, val_ids) if cfg["validate"] and val_ids else None
    log.info("training on %d samples from %d subjects", len(samples), len(train_ids))
    model, history = train(tc, samples, validation=validation, crop_spec=cfg["crop_spec"], log=log.info)
    model.metadata["train_ids"] = list(train_ids)
    save_checkpoint(model, p["checkpoint"])
    _atomic_write(p["history"], lambda t: write_history_csv(history, t))
    return EXIT_OK


def cmd_segment(cfg, workdir: Path) -> int:
    p = _paths(workdir)
    subjects, rows = _load_cohort(p)
    model = _load_model(p, cfg)
    data = _load_images(p, [s.id for s in subjects], need_masks=False)
    p["predictions"].mkdir(exist_ok=True)
    left, right = [], []
    for subj in data:
        mask, lml, rml = segment_subject(model, subj.volume, subj.landmarks, cfg["crop_spec"], cfg["cleanup"])
        write_mvol(mask, p["predictions"] / f"{subj.id}.mvol")
        left.append(lml)
        right.append(rml)
    _atomic_write(p["segmented"], lambda t: write_cohort_csv(
        subjects, t, {PREDICTED[0]: left, PREDICTED[1]: right}))
    log.info("segmented %d subjects", len(data))
    return EXIT_OK


def _fmt(v: float) -> str:
    return repr(float(v))


def cmd_eval(cfg, workdir: Path) -> int:
    p = _paths(workdir)
    subjects, _ = _load_cohort(p)
    model = _load_model(p, cfg)
    _, held_out = _split(cfg, subjects)
    if not held_out:
        raise InputError("no held-out subjects (n_train == n)")
    data = _load_images(p, held_out, need_masks=True)
    table = []
    for subj in data:
        pred, _, _ = segment_subject(model, subj.volume, subj.landmarks, cfg["crop_spec"], cfg["cleanup"])
        table.append((subj.id, dsc(subj.mask, pred, RIGHT), dsc(subj.mask, pred, LEFT), subject_dsc(subj.mask, pred)))
    scores = np.array([t[3] for t in table])
    sd = float(scores.std(ddof=1)) if scores.size > 1 else float("nan")

    def write(path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "dsc_right", "dsc_left", "dsc"])
            for row in table:
                w.writerow([row[0], *(_fmt(v) for v in row[1:])])
            for name, v in (("mean", scores.mean()), ("sd", sd), ("min", scores.min()), ("max", scores.max())):
                w.writerow([f"#{name}", "", "", _fmt(v)])

    _atomic_write(p["eval"], write)
    log.info("DSC %.4f +/- %.4f (range %.4f to %.4f) over %d subjects", scores.mean(), sd, scores.min(),
             scores.max(), scores.size)
    print(f"mean_dsc={scores.mean():.4f}")
    return EXIT_OK


def cmd_stats(cfg, workdir: Path) -> int:
    p = _paths(workdir)
    use_pred = cfg["volumes"] == "predicted"
    src = p["segmented"] if use_pred else p["cohort"]
    if not src.exists():
        raise InputError(f"missing {src}; run {'segment' if use_pred else 'cohort-gen'} first")
    with open(src, newline="") as fh:
        header = next(csv.reader(fh), [])
    for col in COHORT_COLUMNS + (PREDICTED if use_pred else ()):
        if col not in header:
            raise InputError(f"{src.name} lacks column {col!r}")
    subjects, raw = read_cohort_csv(src)
    if use_pred:
        pl = [float(r[PREDICTED[0]]) for r in raw]
        pr = [float(r[PREDICTED[1]]) for r in raw]
        rows = rows_from_subjects(subjects, pl, pr)
    else:
        rows = rows_from_subjects(subjects)
    report = cohort_summary(rows)
    out = p["stats"]
    out.mkdir(parents=True, exist_ok=True)
    sexes = sorted({r.sex for r in rows})
    by_sex = {s: [r for r in rows if r.sex == s] for s in sexes}

    plot = Plot("Total volume by height", "height (cm)", "total volume (ml)")
    for s in sexes:
        plot.scatter(column(by_sex[s], "height_cm"), column(by_sex[s], "total_ml"), s)
    plot.save(out / "volume_vs_height.svg")
    plot = Plot("IMI by BMI", "BMI (kg/m^2)", "IMI (ml/m^2)")
    for s in sexes:
        plot.scatter(column(by_sex[s], "bmi"), column(by_sex[s], "imi"), s)
    plot.save(out / "imi_vs_bmi.svg")

    plot = Plot("IMI by age", "age (years)", "IMI (ml/m^2)")
    gams = {}
    for s in sexes:
        age, val = column(by_sex[s], "age"), column(by_sex[s], "imi")
        plot.scatter(age, val, s)
        # small groups get fewer knots so every sex still gets a curve
        knots = min(cfg["gam_knots"], age.size - 3)
        try:
            fit = gam_fit(age, val, knots)
        except ValueError as exc:
            gams[s] = {"skipped": str(exc)}
            continue
        grid = np.linspace(age.min(), age.max(), 120)
        plot.curve(grid, fit(grid), s, colour=plot.series[-1][3])
        gams[s] = {"lambda": fit.lam, "edf": fit.edf, "gcv": fit.gcv, "knots": [float(k) for k in fit.knots]}
    plot.save(out / "imi_vs_age.svg")
    report.extras["gam_imi_vs_age"] = gams

    # per-muscle agreement: both sides pooled, ground truth as the reference
    manual = [v for s in subjects for v in (s.true_left_ml, s.true_right_ml)]
    auto = [v for r in rows for v in (r.left_ml, r.right_ml)]
    ba = bland_altman(manual, auto)
    plot = Plot("Bland-Altman: predicted vs ground truth", "mean of pair (ml)", "predicted - truth (ml)")
    plot.scatter(ba.means, ba.diffs, "muscles")
    plot.hline(ba.loa_high, f"+1.96 SD {ba.loa_high:.1f}")
    plot.hline(ba.bias, f"bias {ba.bias:.1f}")
    plot.hline(ba.loa_low, f"-1.96 SD {ba.loa_low:.1f}")
    plot.save(out / "bland_altman.svg")
    report.extras["bland_altman"] = {"bias": ba.bias, "sd_diff": ba.sd_diff, "loa_low": ba.loa_low,
                                     "loa_high": ba.loa_high, "n": ba.n, "volumes": cfg["volumes"]}
    write_report(report, out)
    log.info("wrote stats for %d subjects to %s", len(rows), out)
    return EXIT_OK


COMMANDS = {"cohort-gen": cmd_cohort_gen, "train": cmd_train, "segment": cmd_segment, "eval": cmd_eval,
            "stats": cmd_stats}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value settings file")
    common.add_argument("--seed", type=int, help="master seed (u64)")
    common.add_argument("--workdir", default=".", help="directory holding all artefacts (default: .)")
    common.add_argument("--scale", choices=sorted(PRESETS), default="desk")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a setting")
    common.add_argument("-q", "--quiet", action="store_true")
    ap = argparse.ArgumentParser(prog="muscleseg", description=__doc__.splitlines()[0], parents=[common])
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=(fn.__doc__ or "").strip() or None,
                       argument_default=argparse.SUPPRESS)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_INPUT
    try:
        cfg = resolve_config(args.scale, args.config, args.seed, args.set)
        return COMMANDS[args.command](cfg, Path(args.workdir))
    except (InputError, MvolError, CorruptCheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc.strerror or exc}: {exc.filename or ''}".rstrip(": "), file=sys.stderr)
        return EXIT_INPUT
    except (FloatingPointError, NonFiniteGradientError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
