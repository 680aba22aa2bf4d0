"""Command-line entry point: ``dnsmos <subcommand> ...``.

Exit status: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from dnsmos.audio import load_wav, prepare_clip
from dnsmos.errors import DnsmosError, NonFiniteActivation
from dnsmos.features import extract_features, save_features
from dnsmos.nnet import FitConfig, fit, init_model, load_model, save_model, write_loss_history

log = logging.getLogger("dnsmos")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _require_file(path, what="file"):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _manifest_clips(manifest):
    from dnsmos.evaluation import read_manifest

    records = read_manifest(manifest)
    base = Path(manifest).parent
    for r in records:
        _require_file(base / r.path, "clip")
    return records, [base / r.path for r in records]


def _features_for(paths):
    return np.stack([extract_features(prepare_clip(load_wav(p))).values for p in paths])


def _fit_config(args) -> FitConfig:
    return FitConfig(epochs=args.epochs, seed=args.seed, lr=args.lr, batch_size=args.batch_size)


# ---------------------------------------------------------------------------
# subcommands


def cmd_score(args):
    from dnsmos.scoring import score_many

    model = load_model(_require_file(args.model, "model file"))
    inp = Path(args.input)
    if inp.is_dir():
        paths = sorted(inp.glob("*.wav"))
        ids = [p.stem for p in paths]
    elif inp.suffix.lower() == ".csv":
        records, paths = _manifest_clips(_require_file(inp, "manifest"))
        ids = [r.clip_id for r in records]
    else:
        paths = [_require_file(inp, "input")]
        ids = [inp.stem]
    loaders = [lambda p=p: load_wav(p) for p in paths]
    scores = score_many(model, loaders, args.clamp, args.segment_average, args.jobs)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["clip_id", "mos"])
        for cid, s in zip(ids, scores):
            w.writerow([cid, repr(s)])
    for cid, s in zip(ids, scores):
        print(f"{cid}\t{s:.4f}")


def cmd_train(args):
    records, paths = _manifest_clips(_require_file(args.manifest, "manifest"))
    x = _features_for(paths)
    y = np.array([r.mos for r in records])
    model = init_model(seed=args.seed)
    model, history = fit(model, (x, y), _fit_config(args))
    digest = save_model(model, args.out)
    loss_path = args.loss_history or f"{args.out}.loss.csv"
    write_loss_history(history, loss_path)
    print(f"trained {len(history)} epochs, final loss {history[-1] if history else float('nan'):.6f}")
    print(f"model {args.out} sha256 {digest}")


def cmd_selfteach(args):
    from dnsmos.selfteach import parse_alphas, save_ensemble, train_pipeline

    specs = parse_alphas(args.alphas, allow_deep=args.allow_deep)
    records, paths = _manifest_clips(_require_file(args.manifest, "manifest"))
    x = _features_for(paths)
    r = np.array([rec.mos for rec in records])
    config = _fit_config(args)
    ensemble = train_pipeline((x, r), specs, config)
    manifest = save_ensemble(ensemble, args.out, config)
    for k, st in enumerate(ensemble.stages):
        print(f"stage {k} alphas={st.spec} epochs={len(st.history)} hash={st.model_hash}")
    print(f"pipeline manifest {manifest}")


def cmd_eval(args):
    from dnsmos.evaluation import (
        aggregate_per_model,
        metric_comparison,
        per_category_report,
        read_manifest,
        read_predictions,
        write_report,
        write_scatter,
    )

    records = read_manifest(_require_file(args.manifest, "manifest"))
    preds = read_predictions(_require_file(args.pred, "predictions"))
    if args.per_category:
        reports = per_category_report(records, preds, args.grouping, args.weighted)
    else:
        reports = {"Overall": aggregate_per_model(records, preds, args.grouping, args.weighted)}
    comparison = None
    if any(r.external_scores for r in records):
        comparison = metric_comparison(records, preds, grouping=args.grouping)
    summary = write_report(reports, args.out, comparison)
    write_scatter(records, preds, Path(args.out).with_suffix(".scatter.csv"), args.grouping)
    print(summary.read_text(), end="")


def cmd_simulate(args):
    from dnsmos.datasim import RatingConfig, SynthSpec, make_dataset

    spec = SynthSpec(n_clips=args.n, n_suppressors=args.suppressors, seed=args.seed,
                     snr_range_db=(args.snr_low, args.snr_high))
    lo, _, hi = args.votes.partition("-")
    rating = RatingConfig(votes_range=(int(lo), int(hi or lo)), rater_sigma=args.rater_sigma,
                          run_bias_sigma=args.run_bias_sigma, n_runs=args.runs, seed=args.seed)
    ds = make_dataset(spec, rating, args.out)
    print(f"wrote {len(ds.rows)} clips; manifest {ds.manifest_path}; hidden oracle {ds.oracle_path}")


def cmd_features(args):
    clip = prepare_clip(load_wav(_require_file(args.input, "input")))
    save_features(extract_features(clip), args.out)
    print(f"wrote {args.out}")


def cmd_serve(args):
    from dnsmos.service import serve

    serve(args.model, args.bind, max_bytes=args.max_bytes)


# ---------------------------------------------------------------------------


def _add_training_flags(p):
    p.add_argument("--epochs", type=int, default=100, help="maximum epochs (early stop on loss saturation)")
    p.add_argument("--seed", type=int, default=0, help="seed for initialization, shuffling and dropout")
    p.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate")
    p.add_argument("--batch-size", type=int, default=32, help="minibatch size")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dnsmos", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("score", help="predict MOS for WAV files")
    p.add_argument("--model", required=True, help="model file written by train/selfteach")
    p.add_argument("--input", required=True, help="a WAV file, a directory of WAVs, or a manifest CSV")
    p.add_argument("--out", required=True, help="output CSV (clip_id,mos)")
    p.add_argument("--clamp", action="store_true", help="clamp reported MOS to [1, 5]")
    p.add_argument("--segment-average", action="store_true",
                   help="average scores over 9 s windows instead of padding/trimming to 9 s")
    p.add_argument("--jobs", type=int, default=1, help="clips scored concurrently")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("train", help="train one model on manifest MOS labels")
    p.add_argument("--manifest", required=True, help="manifest CSV with clip paths and MOS")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--loss-history", help="loss CSV path (default: <out>.loss.csv)")
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("selfteach", help="multi-stage self-teaching pipeline")
    p.add_argument("--manifest", required=True, help="manifest CSV with clip paths and MOS")
    p.add_argument("--alphas", required=True,
                   help="blend weights: ';' separates stages, ',' separates weights, e.g. '1.0;0.8,0.2'")
    p.add_argument("--out", required=True, help="output directory for stage models and pipeline.json")
    p.add_argument("--allow-deep", action="store_true", help="permit more than two student stages")
    _add_training_flags(p)
    p.set_defaults(func=cmd_selfteach)

    p = sub.add_parser("eval", help="correlate predictions with human MOS")
    p.add_argument("--manifest", required=True, help="manifest CSV with human MOS")
    p.add_argument("--pred", required=True, help="predictions CSV (clip_id,mos)")
    p.add_argument("--out", required=True, help="report CSV; a .txt summary and .scatter.csv are written beside it")
    p.add_argument("--per-category", action="store_true", help="one report per category plus Overall")
    p.add_argument("--grouping", choices=("per-model", "per-clip"), default="per-model",
                   help="correlate suppressor means (default) or individual clips")
    p.add_argument("--weighted", action="store_true", help="weight suppressor means by vote count")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simulate", help="write a synthetic rated dataset")
    p.add_argument("--n", type=int, default=200, help="number of clips")
    p.add_argument("--seed", type=int, default=0, help="seed for audio and ratings")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--suppressors", type=int, default=20, help="number of simulated noise suppressors")
    p.add_argument("--votes", default="5-10", help="votes per clip, 'N' or 'LO-HI'")
    p.add_argument("--rater-sigma", type=float, default=1.0, help="per-vote rater noise (MOS)")
    p.add_argument("--run-bias-sigma", type=float, default=0.25, help="per-run rating bias (MOS)")
    p.add_argument("--runs", type=int, default=4, help="number of rating runs")
    p.add_argument("--snr-low", type=float, default=-5.0, help="lowest input SNR in dB")
    p.add_argument("--snr-high", type=float, default=20.0, help="highest input SNR in dB")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("features", help="dump the 900x120 log-mel features of one WAV")
    p.add_argument("--input", required=True, help="input WAV file")
    p.add_argument("--out", required=True, help="output feature dump")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("serve", help="run the HTTP scoring service")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--bind", default="127.0.0.1:8000", help="host:port to listen on")
    p.add_argument("--max-bytes", type=int, default=50 * 2**20, help="maximum request body size")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except NonFiniteActivation as exc:
        print(f"dnsmos: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DnsmosError as exc:
        print(f"dnsmos: {exc.code}: {exc}", file=sys.stderr)
        return exc.exit_status
    except (FileNotFoundError, IsADirectoryError, ValueError) as exc:
        print(f"dnsmos: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
