"""Command-line entry point tying the pipeline together.

Subcommands: phantom, prep, train, cv, eval, report. Every command
resolves its configuration from built-in defaults, then an optional
JSON config file (--config), then explicit flags (flags win), prints
the resolved configuration as one JSON line for reproducibility, and
only then starts working. Commands are idempotent for identical inputs
and seeds and never mutate their inputs.

Exit codes: 0 success, 2 usage error (unknown flag etc.), 3 invalid
configuration, 4 missing or malformed input, 1 any other failure.
Failures print one machine-readable line to stderr:
``ERROR {"code": ..., "message": ..."}``.

The default output root can be set with the PTVSEG_OUT environment
variable; --out overrides it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import crossval, dataprep, phantom, report, trainer, unet
from .errors import ConfigError, DatasetError, ReportError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_INPUT = 4
EXIT_OTHER = 1

OUT_ENV = "PTVSEG_OUT"

EPILOG = """\
exit codes: 0 ok, 2 usage error, 3 invalid configuration, 4 missing/malformed
input, 1 other failure. Failures print `ERROR {json}` to stderr.
Config file: a JSON object whose keys mirror the long flag names with
underscores (e.g. {"base_channels": 8, "lr": 0.001}); explicit flags override
file values. $PTVSEG_OUT provides the default --out root."""


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--base-channels", type=int, default=None, help="U-Net width at the first level")
    p.add_argument("--depth", type=int, default=None, help="number of pooling levels")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--loss", choices=["bcel", "dice"], default=None, help="training objective")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None, help="learning rate")
    p.add_argument("--patience", type=int, default=None, help="early-stopping patience in epochs")
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="ptvseg",
        description="CT target-volume segmentation pipeline (phantom data, U-Net, 5-fold CV)",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    p.add_argument("--seed", type=int, default=None, required=False)
    p.add_argument("--patients", type=int, default=None)
    p.add_argument("--size", type=int, default=None, help="slice extent in pixels")
    p.add_argument("--slices-min", type=int, default=None)
    p.add_argument("--slices-max", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)

    p = sub.add_parser("prep", help="window HU slices to 8-bit model inputs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)

    for name, help_txt in [
        ("train", "train one rotation (train/val split from the fold plan)"),
        ("cv", "run the full 5-fold cross-validation protocol"),
    ]:
        p = sub.add_parser(name, help=help_txt)
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=None, help="mandatory: master RNG seed")
        p.add_argument("--threshold", type=float, default=None)
        p.add_argument("--config", default=None)
        _add_model_flags(p)
        _add_train_flags(p)
        if name == "train":
            p.add_argument("--rotation", type=int, default=None, help="fold rotation to train (default 0)")
        else:
            p.add_argument("--jobs", type=int, default=None, help="parallel rotation processes")

    p = sub.add_parser("eval", help="compute per-patient metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--config", default=None)

    p = sub.add_parser("report", help="aggregate metrics CSVs into stats and boxplot SVGs")
    p.add_argument("csvs", nargs="+", metavar="LABEL=CSV", help="labeled metrics files, e.g. bcel=m.csv")
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)

    return ap


class _Resolver:
    """Merge precedence: built-in default < config file < explicit flag."""

    def __init__(self, args: argparse.Namespace):
        self.flags = vars(args)
        self.file: dict = {}
        cfg_path = self.flags.get("config")
        if cfg_path:
            if not os.path.isfile(cfg_path):
                raise DatasetError(cfg_path, "config file not found")
            try:
                with open(cfg_path) as fh:
                    self.file = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{cfg_path}: config file is not valid JSON: {exc}") from exc
            if not isinstance(self.file, dict):
                raise ConfigError(f"{cfg_path}: config file must hold a JSON object")
        self.resolved: dict = {}

    def get(self, key: str, default=None, required: bool = False):
        val = self.flags.get(key)
        if val is None:
            val = self.file.get(key, default)
        if val is None and required:
            raise ConfigError(f"missing required setting {key!r} (flag or config file)")
        self.resolved[key] = val
        return val

    def out_dir(self, required: bool = True) -> str | None:
        out = self.flags.get("out") or self.file.get("out") or os.environ.get(OUT_ENV)
        if out is None and required:
            raise ConfigError("no output directory: pass --out or set $" + OUT_ENV)
        self.resolved["out"] = out
        return out

    def announce(self, command: str) -> None:
        print("config: " + json.dumps({"command": command, **self.resolved}, sort_keys=True))


def _unet_config(r: _Resolver) -> unet.UNetConfig:
    return unet.UNetConfig(
        base_channels=int(r.get("base_channels", 32)),
        depth=int(r.get("depth", 4)),
    )


def _train_config(r: _Resolver) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        batch_size=int(r.get("batch_size", 4)),
        learning_rate=float(r.get("lr", 1e-5)),
        loss=r.get("loss", "bcel"),
        patience=int(r.get("patience", 10)),
        min_delta=float(r.get("min_delta", 1e-3)),
        max_epochs=int(r.get("max_epochs", 100)),
        seed=int(r.get("seed", required=True)),
        optimizer=r.get("optimizer", "adam"),
    )


def cmd_phantom(args: argparse.Namespace) -> int:
    r = _Resolver(args)
    spec = phantom.PhantomSpec(
        seed=int(r.get("seed", 0)),
        n_patients=int(r.get("patients", 10)),
        size=int(r.get("size", 64)),
        slices_min=int(r.get("slices_min", 6)),
        slices_max=int(r.get("slices_max", 10)),
    )
    out = r.out_dir()
    r.announce("phantom")
    manifest = phantom.write_dataset(spec, out)
    print(f"wrote {spec.n_patients} phantom patients to {manifest}")
    return EXIT_OK


def cmd_prep(args: argparse.Namespace) -> int:
    r = _Resolver(args)
    manifest = r.get("manifest", required=True)
    out = r.out_dir()
    r.announce("prep")
    records = dataprep.load_dataset(manifest)
    os.makedirs(out, exist_ok=True)
    index = []
    for rec in records:
        pdir = os.path.join(out, rec.patient_id)
        os.makedirs(pdir, exist_ok=True)
        entries = []
        for i in range(rec.n_slices):
            img_rel = f"{rec.patient_id}/windowed_{i:04d}.u8"
            dataprep.window_slice(rec.hu[i]).tofile(os.path.join(out, img_rel))
            mask_rel = f"{rec.patient_id}/mask_{i:04d}.u8"
            rec.mask[i].tofile(os.path.join(out, mask_rel))
            entries.append({"image": img_rel, "mask": mask_rel, "z_mm": rec.z_positions_mm[i]})
        index.append(
            {
                "id": rec.patient_id,
                "acquisition_date": rec.acquisition_date,
                "spacing_mm": list(rec.spacing_mm),
                "slice_shape": list(rec.hu.shape[1:]),
                "pixel_format": "uint8_windowed",
                "slices": entries,
            }
        )
    with open(os.path.join(out, "prepped.json"), "w") as fh:
        json.dump({"version": 1, "patients": index}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"windowed {len(records)} patients into {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    r = _Resolver(args)
    manifest = r.get("manifest", required=True)
    ucfg = _unet_config(r)
    tcfg = _train_config(r)
    rotation = int(r.get("rotation", 0))
    out = r.out_dir()
    r.announce("train")
    records = dataprep.load_dataset(manifest)
    plan = crossval.assign_folds(records)
    if not 0 <= rotation < plan.k:
        raise ConfigError(f"rotation must be in [0, {plan.k}), got {rotation}")
    by_id = {p.patient_id: p for p in records}
    _, val_fold, train_folds = plan.rotations[rotation]
    train_set = [
        s for f in train_folds for pid in plan.patients_in_fold(f)
        for s in crossval.patient_samples(by_id[pid])
    ]
    val_set = [
        s for pid in plan.patients_in_fold(val_fold) for s in crossval.patient_samples(by_id[pid])
    ]
    cfg = replace(tcfg, seed=tcfg.seed + rotation)
    model = unet.build_unet(ucfg, cfg.seed)
    result = trainer.run_training(model, train_set, val_set, cfg, out)
    print(
        f"trained {len(result.history)} epochs; best validation loss "
        f"{result.best_val_loss:.6f}; checkpoint in {out}"
    )
    return EXIT_OK


def cmd_cv(args: argparse.Namespace) -> int:
    r = _Resolver(args)
    manifest = r.get("manifest", required=True)
    ucfg = _unet_config(r)
    tcfg = _train_config(r)
    threshold = float(r.get("threshold", 0.5))
    jobs = int(r.get("jobs", 1))
    out = r.out_dir()
    r.announce("cv")
    records = dataprep.load_dataset(manifest)
    plan = crossval.assign_folds(records)
    results = crossval.run_cross_validation(records, plan, tcfg, ucfg, threshold, out, jobs)
    n_rows = sum(len(res.patient_metrics) for res in results)
    dscs = [m.dsc for res in results for m in res.patient_metrics]
    print(
        f"cross-validation done: {plan.k} rotations, {n_rows} test patients, "
        f"mean DSC {np.mean(dscs):.4f}; outputs in {out}"
    )
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    r = _Resolver(args)
    ckpt_path = r.get("checkpoint", required=True)
    manifest = r.get("manifest", required=True)
    threshold = float(r.get("threshold", 0.5))
    out = r.out_dir()
    r.announce("eval")
    if not os.path.isfile(ckpt_path):
        raise DatasetError(ckpt_path, "checkpoint not found")
    model = unet.load_checkpoint(ckpt_path)
    records = dataprep.load_dataset(manifest)
    rows = [crossval.evaluate_patient(model, rec, fold=-1, threshold=threshold) for rec in records]
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "metrics.csv")
    crossval.write_metrics_csv(path, rows)
    print(f"evaluated {len(rows)} patients; metrics in {path}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    r = _Resolver(args)
    out = r.out_dir()
    labeled: dict[str, str] = {}
    for token in args.csvs:
        label, sep, path = token.partition("=")
        if not sep or not label or not path:
            raise ConfigError(f"expected LABEL=CSV, got {token!r}")
        labeled[label] = path
    r.resolved["csvs"] = labeled
    r.announce("report")
    reports: dict[str, report.MetricReport] = {}
    for label, path in labeled.items():
        if not os.path.isfile(path):
            raise DatasetError(path, "metrics CSV not found")
        reports[label] = report.aggregate(report.read_metrics_csv(path))
    os.makedirs(out, exist_ok=True)
    for metric in ("dsc", "hd95"):
        plottable = {
            lbl: rep for lbl, rep in reports.items() if (metric == "dsc" or rep.hd95 is not None)
        }
        if not plottable:
            continue
        svg = report.render_boxplot_svg(plottable, metric)
        with open(os.path.join(out, f"boxplot_{metric}.svg"), "w") as fh:
            fh.write(svg)
    summary = {
        label: {
            "n": rep.dsc.n,
            "dsc_mean": rep.dsc.mean,
            "dsc_std": rep.dsc.std,
            "hd95_mean": rep.hd95.mean if rep.hd95 else None,
            "hd95_std": rep.hd95.std if rep.hd95 else None,
            "hd95_undefined": rep.hd95_undefined_count,
            "note": "std is the population standard deviation",
        }
        for label, rep in reports.items()
    }
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    for label, rep in reports.items():
        report.write_csv(rep, os.path.join(out, f"report_{label}.csv"))
    print(f"report written to {out}")
    return EXIT_OK


COMMANDS = {
    "phantom": cmd_phantom,
    "prep": cmd_prep,
    "train": cmd_train,
    "cv": cmd_cv,
    "eval": cmd_eval,
    "report": cmd_report,
}


def _fail(code: int, message: str, **extra) -> int:
    print("ERROR " + json.dumps({"code": code, "message": message, **extra}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except DatasetError as exc:
        return _fail(EXIT_INPUT, str(exc), path=exc.path)
    except ReportError as exc:
        return _fail(EXIT_INPUT, str(exc))
    except Exception as exc:  # noqa: BLE001 - boundary of the process
        return _fail(EXIT_OTHER, f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
