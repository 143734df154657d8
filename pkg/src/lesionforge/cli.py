"""``lesionforge`` command line: every pipeline stage as a subcommand.

Exit codes: 0 success, 1 usage/contract/config/IO error, 2 numeric failure.
Errors are printed as one ``error[<kind>]: <message>`` line on stderr.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from . import DEFAULT_SEED, __version__
from .config import RunConfig, help_text
from .errors import ConfigError, ContractError, LesionForgeError, NumericError

log = logging.getLogger("lesionforge")

THREADS_ENV = "LESIONFORGE_THREADS"
EXIT_OK, EXIT_ERROR, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with exit code 1 and the machine-parsable error line."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, out_required: bool = False) -> None:
    p.add_argument("--seed", type=int, default=None,
                   help=f"run seed (overrides train.seed; default {DEFAULT_SEED})")
    p.add_argument("--out", default=None, required=out_required, help="output directory")
    p.add_argument("--config", default=None, help="config file with [data] [model] [dae] [train] [eval] sections")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    epilog = help_text()
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="lesionforge", description="DAE + residual-network lesion classification pipeline",
                     epilog=epilog, formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"lesionforge {__version__}")
    subs = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    subs.required = True

    def add(name, help_):
        p = subs.add_parser(name, help=help_, description=help_, epilog=epilog, formatter_class=fmt)
        return p

    p = add("synth", "generate the synthetic 7-class dataset")
    _common(p, out_required=True)

    p = add("prep", "convert a manifest of RGB rasters or LTD1 images into a resized LTD1 dataset")
    _common(p, out_required=True)
    p.add_argument("--manifest", help="input manifest (default: data.manifest)")
    p.add_argument("--data-root", help="image root (default: data.data_root or the manifest dir)")

    for name, what in (("train-classifier", "train the residual classifier"),
                       ("train-dae", "train the convolutional autoencoder")):
        p = add(name, what)
        _common(p, out_required=True)
        p.add_argument("--data", help="dataset manifest (default: data.manifest or synthetic data)")
        p.add_argument("--resume", help="checkpoint directory to resume from")

    p = add("reconstruct", "pass every image of a dataset through a trained autoencoder")
    _common(p, out_required=True)
    p.add_argument("--data", help="dataset manifest (default: data.manifest or synthetic data)")
    p.add_argument("--dae", required=True, help="autoencoder checkpoint directory")

    p = add("hybrid", "direct training, autoencoder reconstruction, retraining on reconstructed data")
    _common(p, out_required=True)
    p.add_argument("--data", help="dataset manifest (default: data.manifest or synthetic data)")

    p = add("eval", "predict a dataset with a classifier checkpoint and report")
    _common(p, out_required=True)
    p.add_argument("--model", required=True, help="classifier checkpoint directory")
    p.add_argument("--data", help="dataset manifest (default: data.manifest or synthetic data)")

    p = add("report", "class report from a prediction file")
    _common(p)
    p.add_argument("--pred", required=True, help="CSV id,actual,predicted,score_0..score_K-1")

    p = add("gallery", "captioned grid of test predictions")
    _common(p, out_required=True)
    p.add_argument("--pred", required=True, help="prediction CSV")
    p.add_argument("--data", help="dataset manifest holding the predicted samples")
    p.add_argument("-n", type=int, default=None, help="images to show (default: eval.gallery_n)")

    p = add("gradcheck", "finite-difference check of every primitive and both model families")
    _common(p)
    p.add_argument("--trials", type=int, default=20, help="seeded trials per check")
    p.add_argument("--only", action="append", help="restrict to a named check (repeatable)")
    return parser


# ----------------------------------------------------------------- helpers

def _limit_threads():
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {n}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _resolve(args) -> RunConfig:
    cfg = RunConfig.load(args.config, args.overrides)
    if args.seed is not None:
        cfg.set("train.seed", args.seed)
    return cfg


def _out(args) -> Path | None:
    if args.out is None:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(out: Path, cfg: RunConfig) -> None:
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")


def _dataset(cfg: RunConfig, manifest: str | None):
    from .data import load_dataset, synth_generate

    manifest = manifest or cfg["data.manifest"]
    if manifest:
        root = cfg["data.data_root"] or None
        ds = load_dataset(manifest, root)
        if len(ds) and ds.samples[0].image.shape[1:] != cfg.image_size():
            raise ConfigError(f"dataset images are {ds.samples[0].image.shape[1:]}, model expects "
                              f"{cfg.image_size()}; run `prep` or set data.image_size")
        return ds
    return synth_generate(cfg["data.n_per_class"], cfg.image_size(), cfg.seed)


def _print(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


# ----------------------------------------------------------------- subcommands

def cmd_synth(args, cfg):
    from .data import save_dataset, synth_generate

    out = _out(args)
    ds = synth_generate(cfg["data.n_per_class"], cfg.image_size(), cfg.seed)
    manifest = save_dataset(ds, out)
    _write_config(out, cfg)
    _print(f"wrote {len(ds)} samples to {manifest}")


def cmd_prep(args, cfg):
    from .data import prep_dataset, save_dataset

    manifest = args.manifest or cfg["data.manifest"]
    if not manifest:
        raise ConfigError("prep needs --manifest or data.manifest")
    root = args.data_root or cfg["data.data_root"] or None
    ds = prep_dataset(manifest, root, cfg.image_size())
    out = _out(args)
    path = save_dataset(ds, out)
    _write_config(out, cfg)
    _print(f"wrote {len(ds)} samples at {cfg.image_size()} to {path}")


def _eval_and_write(model, test, out: Path, name: str, logs, title: str, cfg: RunConfig):
    from .report import emit_curves, format_text, report_from_predictions, write_predictions, write_report
    from .trainer import classifier_predictions, write_epoch_logs

    preds = classifier_predictions(model, test)
    rep = report_from_predictions(preds, test.class_names, title=title)
    write_report(rep, out / "reports" / name)
    write_predictions(out / "reports" / f"{name}_predictions.csv", preds)
    if logs:
        write_epoch_logs(out / "logs" / f"{name}.csv", logs)
        emit_curves(logs, out / "reports" / f"{name}_curves")
    _print(format_text(rep))
    return rep


def cmd_train_classifier(args, cfg):
    from .models import build_resnet
    from .trainer import norm_tensors, prepare_splits, train_classifier

    out = _out(args)
    _write_config(out, cfg)
    sp = prepare_splits(_dataset(cfg, args.data), cfg.hybrid_config())
    model = build_resnet(cfg.resnet_config(), seed=cfg.seed)
    res = train_classifier(model, sp.train, sp.val, cfg.train_config(), out_dir=out / "checkpoints",
                           prefix="classifier", resume_from=args.resume,
                           extra_tensors=norm_tensors(sp.train.norm_stats))
    _eval_and_write(model, sp.test, out, "classifier", res.logs, "classifier", cfg)


def cmd_train_dae(args, cfg):
    from .report import emit_curves
    from .trainer import evaluate_dae, prepare_splits, train_dae, write_epoch_logs
    from .models import build_dae

    out = _out(args)
    _write_config(out, cfg)
    sp = prepare_splits(_dataset(cfg, args.data), cfg.hybrid_config())
    dae = build_dae(cfg.dae_config(), seed=cfg.seed)
    res = train_dae(dae, sp.train_raw, cfg.dae_train_config(), val=sp.val_raw, out_dir=out / "checkpoints",
                    prefix="dae", resume_from=args.resume)
    write_epoch_logs(out / "logs" / "dae.csv", res.logs)
    emit_curves(res.logs, out / "reports" / "dae_curves")
    first, last = res.logs[0].train_loss, res.logs[-1].train_loss
    _print(f"reconstruction loss epoch {res.logs[0].epoch}: {first:.4f}  epoch {res.logs[-1].epoch}: {last:.4f}  "
           f"test: {evaluate_dae(dae, sp.test_raw):.4f}")


def cmd_reconstruct(args, cfg):
    from .data import save_dataset
    from .models import load_model
    from .trainer import reconstruct_dataset

    dae, _, _ = load_model(args.dae)
    ds = _dataset(cfg, args.data)
    rec = reconstruct_dataset(dae, ds)
    out = _out(args)
    path = save_dataset(rec, out)
    _write_config(out, cfg)
    _print(f"reconstructed {len(rec)} samples to {path}")


def cmd_hybrid(args, cfg):
    from .trainer import PHASES, run_hybrid

    out = _out(args)
    raw = _dataset(cfg, args.data)
    rep = run_hybrid(raw, cfg.resnet_config(), cfg.dae_config(), cfg.train_config(), cfg.dae_train_config(),
                     cfg.hybrid_config(), out_dir=out, config_text=cfg.to_text())
    _print((out / "reports" / "comparison.txt").read_text(encoding="utf-8"))
    for phase in PHASES:
        _print(f"{phase}: {out / 'reports' / (phase + '.txt')}")


def cmd_eval(args, cfg):
    from .data import normalize
    from .models import load_model
    from .trainer import norm_from_tensors

    model, _, extra = load_model(args.model)
    if model.kind != "classifier":
        raise ContractError(f"{args.model} is not a classifier checkpoint")
    ds = _dataset(cfg, args.data)
    stats = norm_from_tensors(extra)
    if stats is None:
        raise ContractError(f"{args.model} carries no normalization statistics")
    out = _out(args)
    _write_config(out, cfg)
    _eval_and_write(model, normalize(ds, stats), out, "eval", None, "eval", cfg)


def cmd_report(args, cfg):
    from .report import format_text, read_predictions, report_from_predictions, write_report

    rep = report_from_predictions(read_predictions(args.pred), title="")
    _print(format_text(rep))
    out = _out(args)
    if out is not None:
        write_report(rep, out / "report")


def cmd_gallery(args, cfg):
    from .data import Dataset
    from .report import prediction_gallery, read_predictions

    preds = read_predictions(args.pred)
    ds = _dataset(cfg, args.data)
    by_id = {s.id: s for s in ds.samples}
    missing = [i for i in preds.ids if i not in by_id]
    if missing:
        raise ContractError(f"{len(missing)} predicted ids not in the dataset (first: {missing[0]!r})")
    subset = Dataset(tuple(by_id[i] for i in preds.ids), ds.class_names, ds.provenance, ds.norm_stats)
    n = args.n if args.n is not None else min(cfg["eval.gallery_n"], len(subset))
    path, flags = prediction_gallery(subset, preds.predicted, n, _out(args) / "gallery.svg", seed=cfg.seed)
    _print(f"wrote {path} ({n} images, {flags} misclassified)")


def cmd_gradcheck(args, cfg):
    from .gradsuite import TOLERANCE, run_suite

    seed = args.seed if args.seed is not None else cfg.seed
    try:
        res = run_suite(seed, args.trials, args.only)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from None
    lines = [f"{name:<24} max_rel_err={err:.3e} {'ok' if err < TOLERANCE else 'FAIL'}"
             + (f" skipped_probes={res.skipped[name]}" if res.skipped[name] else "")
             for name, err in res.worst.items()]
    lines.append(f"{'all' if res.passed else 'not all'} checks below {TOLERANCE:g} over {res.trials} trials")
    text = "\n".join(lines) + "\n"
    _print(text)
    out = _out(args)
    if out is not None:
        (out / "gradcheck.txt").write_text(text, encoding="utf-8")
    return EXIT_OK if res.passed else EXIT_ERROR


COMMANDS = {
    "synth": cmd_synth, "prep": cmd_prep, "train-classifier": cmd_train_classifier, "train-dae": cmd_train_dae,
    "reconstruct": cmd_reconstruct, "hybrid": cmd_hybrid, "eval": cmd_eval, "report": cmd_report,
    "gallery": cmd_gallery, "gradcheck": cmd_gradcheck,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"error[usage]: {exc}\n")
        return EXIT_ERROR
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _resolve(args)
        with _limit_threads():
            code = COMMANDS[args.command](args, cfg)
        return EXIT_OK if code is None else code
    except NumericError as exc:
        sys.stderr.write(f"error[{exc.kind}]: {exc}\n")
        return EXIT_NUMERIC
    except LesionForgeError as exc:
        sys.stderr.write(f"error[{exc.kind}]: {exc}\n")
        return EXIT_ERROR
    except FileNotFoundError as exc:
        sys.stderr.write(f"error[io]: {exc}\n")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
