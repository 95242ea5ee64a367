"""``atm`` command line: gen-data, train, enhance, identify, eval, export-embed.

Exit codes: 0 success, 2 usage/config error, 3 IO error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import load_config
from .corpus import build_dataset, manifest_hash, read_manifest
from .dsp import analyze, read_wav, write_wav
from .errors import AtmError, CheckpointError, DataError, InvalidInputError, MetricError, UsageError
from .evaluate import enhance_waveform, evaluate_split, export_embeddings, write_aggregate, write_metrics
from .pipeline import VARIANTS, load_split
from .train import TrainData, train_variant, with_variant

EXIT_OK, EXIT_USAGE, EXIT_IO = 0, 2, 3

log = logging.getLogger("atm")


def _aggregate_path(out: Path) -> Path:
    return out.with_name(out.stem + "_aggregate" + out.suffix)


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config).with_seed(args.seed)
    out = Path(args.out)
    records = build_dataset(cfg.corpus, out, cfg.stft)
    counts = Counter(r.split for r in records)
    for split in ("train", "val", "test_se", "test_si"):
        print(f"{split}: {counts.get(split, 0)} clips")
    print(f"manifest: {out / 'manifest.jsonl'}  sha256 {manifest_hash(out)}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.variant not in VARIANTS:
        raise UsageError(f"unknown variant {args.variant!r}; expected one of {VARIANTS}")
    cfg = load_config(args.config).with_seed(args.seed)
    train = load_split(args.data, "train", cfg.stft)
    val = load_split(args.data, "val", cfg.stft)
    data = TrainData.from_utterances(train, val, cfg.model.n_classes)
    system, report = train_variant(data, with_variant(cfg.train, args.variant), cfg.model)
    out = Path(args.out)
    crc = ckpt.save_system(out, system)
    report_path = Path(args.report) if args.report else out.with_suffix(".report.csv")
    report.to_csv(report_path)
    print(f"checkpoint {out} crc32 {crc:08x}; report {report_path}")
    return EXIT_OK


def _load_system(path):
    return ckpt.load_system(path)


def _read_input(path, system_rate: int):
    w = read_wav(path)
    if w.sample_rate != system_rate:
        raise InvalidInputError(f"{path}: sample rate {w.sample_rate} Hz, expected {system_rate} Hz")
    return w


def cmd_enhance(args) -> int:
    cfg = load_config(args.config)
    system = _load_system(args.checkpoint)
    if not system.has_se:
        raise UsageError(f"checkpoint variant {system.variant!r} has no SE model")
    noisy = _read_input(args.input, cfg.stft.sample_rate)
    write_wav(args.output, enhance_waveform(system, noisy, cfg.stft))
    return EXIT_OK


def cmd_identify(args) -> int:
    cfg = load_config(args.config)
    system = _load_system(args.checkpoint)
    if not system.has_si:
        raise UsageError(f"checkpoint variant {system.variant!r} has no SI model")
    wav = _read_input(args.input, cfg.stft.sample_rate)
    post = system.speaker_posterior(analyze(wav, cfg.stft)[0]).posterior.data
    with open(args.output, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_index", "predicted_class"] + [f"p{k}" for k in range(post.shape[1])])
        for i, row in enumerate(post):
            w.writerow([i, int(np.argmax(row))] + [repr(float(p)) for p in row])
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    if args.passthrough == bool(args.checkpoint):
        raise UsageError("give exactly one of --checkpoint or --passthrough")
    system = None if args.passthrough else _load_system(args.checkpoint)
    records = read_manifest(args.data, args.split)
    if not records:
        raise UsageError(f"split {args.split!r} is empty")
    root = Path(args.data)
    root = root.parent if root.is_file() else root
    rows = evaluate_split(system, records, root, args.passthrough, cfg.stft)
    out = Path(args.out)
    write_metrics(out, rows)
    write_aggregate(_aggregate_path(out), rows)
    print(f"{len(rows)} metric rows -> {out}; aggregate -> {_aggregate_path(out)}")
    return EXIT_OK


def cmd_export_embed(args) -> int:
    cfg = load_config(args.config)
    system = _load_system(args.checkpoint)
    root = Path(args.data)
    root = root.parent if root.is_file() else root
    n = export_embeddings(system, read_manifest(root, args.split), root, args.out, cfg.stft)
    print(f"{n} embedding rows -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atm", description="ATM speech enhancement and speaker identification toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=False):
        sp.add_argument("--config", metavar="PATH", help="key = value run configuration")
        if seed:
            sp.add_argument("--seed", type=int, metavar="U64")

    sp = sub.add_parser("gen-data", help="render the synthetic dialogue corpus")
    common(sp, seed=True)
    sp.add_argument("--out", required=True, metavar="PATH")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train one variant")
    sp.add_argument("variant", help="one of " + ", ".join(VARIANTS))
    common(sp, seed=True)
    sp.add_argument("--data", required=True, metavar="DIR")
    sp.add_argument("--out", required=True, metavar="PATH", help="checkpoint file")
    sp.add_argument("--report", metavar="PATH", help="report CSV (default: <out>.report.csv)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("enhance", help="enhance a noisy WAV")
    common(sp)
    sp.add_argument("--checkpoint", required=True, metavar="PATH")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.set_defaults(func=cmd_enhance)

    sp = sub.add_parser("identify", help="per-frame speaker posteriors for a WAV")
    common(sp)
    sp.add_argument("--checkpoint", required=True, metavar="PATH")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.set_defaults(func=cmd_identify)

    sp = sub.add_parser("eval", help="metric CSVs over a manifest split")
    common(sp)
    sp.add_argument("--checkpoint", metavar="PATH")
    sp.add_argument("--passthrough", action="store_true", help="score the noisy input as is")
    sp.add_argument("--data", required=True, metavar="DIR")
    sp.add_argument("--split", default="test_se", choices=("test_se", "test_si", "val", "train"))
    sp.add_argument("--out", required=True, metavar="PATH")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("export-embed", help="export SI speaker codes for external projection")
    common(sp)
    sp.add_argument("--checkpoint", required=True, metavar="PATH")
    sp.add_argument("--data", required=True, metavar="DIR")
    sp.add_argument("--split", default="test_si")
    sp.add_argument("--out", required=True, metavar="PATH")
    sp.set_defaults(func=cmd_export_embed)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, InvalidInputError, MetricError) as exc:
        print(f"atm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CheckpointError, DataError) as exc:
        print(f"atm: io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except AtmError as exc:
        print(f"atm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
