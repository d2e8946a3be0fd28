"""Command-line interface for the triage pipeline.

Exit codes: 0 success, 1 runtime failure, 2 partial failure, 64 usage
error. Precedence for settings is flags over environment over config
file. `--mock` swaps in the offline decompiler and provider so no Ghidra
install, network access, or API key is ever touched.
"""

from __future__ import annotations

import argparse
import json
import random
import sys
from pathlib import Path

import numpy as np

from .config import (
    DEFAULT_CONFIG_FILENAME,
    PipelineConfig,
    default_config_text,
    load_config,
)
from .decompiler import (
    DecompilerDriver,
    DecompileStatus,
    GhidraBackend,
    MockBackend,
)
from .errors import ConfigError, TriageError
from .evaluate import (
    ConfusionMatrix,
    MetricsReport,
    compute_metrics,
    format_percent,
    render_report,
    run_experiment,
)
from .finetune import export_finetune_dataset, select_finetune_subset
from .gbdt import GbdtParams, load_model, predict, save_model, train_gbdt
from .llm import HttpTransport, LlmClient, MockTransport
from .pe import extract_features
from .store import DatasetSplit, Label, SampleSource, SampleStore

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_PARTIAL = 2
EXIT_USAGE = 64

_LABELS = {"malware": Label.MALWARE, "benign": Label.BENIGN}
_SOURCES = {
    "book-corpus-2017": SampleSource.BOOK_CORPUS_2017,
    "malware-bazaar-2025": SampleSource.MALWARE_BAZAAR_2025,
    "local-benign": SampleSource.LOCAL_BENIGN,
    "synthetic-fixture": SampleSource.SYNTHETIC_FIXTURE,
}
_SPLITS = {
    "baseline-2017": DatasetSplit.BASELINE_2017,
    "contemporary-2025": DatasetSplit.CONTEMPORARY_2025,
    "custom": DatasetSplit.CUSTOM,
}


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit 2 on usage errors; we reserve 2 for
    partial failures and use the conventional 64 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--config",
        default=None,
        help=f"config file path (default ./{DEFAULT_CONFIG_FILENAME})",
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="decomp-triage", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_ingest = sub.add_parser("ingest", help="copy binaries into the sample store")
    _add_common(p_ingest)
    p_ingest.add_argument("--label", required=True, choices=sorted(_LABELS))
    p_ingest.add_argument("--family", default=None, help="malware family name")
    p_ingest.add_argument("--source", required=True, choices=sorted(_SOURCES))
    p_ingest.add_argument("--split", required=True, choices=sorted(_SPLITS))
    p_ingest.add_argument("paths", nargs="+", help="files to ingest")
    p_ingest.set_defaults(func=cmd_ingest)

    p_dec = sub.add_parser("decompile", help="decompile a split into the cache")
    _add_common(p_dec)
    p_dec.add_argument("--split", required=True, choices=sorted(_SPLITS))
    p_dec.add_argument("--max-parallel", type=int, default=1)
    p_dec.add_argument("--mock", action="store_true", help="use the offline mock decompiler")
    p_dec.set_defaults(func=cmd_decompile)

    p_cls = sub.add_parser("classify", help="run the classification experiment")
    _add_common(p_cls)
    p_cls.add_argument("--split", required=True, choices=sorted(_SPLITS))
    p_cls.add_argument("--model", default=None, help="model profile name")
    p_cls.add_argument("--provider", default=None, help="provider profile name")
    p_cls.add_argument(
        "--mock", action="store_true",
        help="offline end to end: mock decompiler and mock provider",
    )
    p_cls.add_argument("--with-static-context", action="store_true")
    p_cls.add_argument("--run-id", default=None, help="resume or name a run")
    p_cls.add_argument("--max-parallel", type=int, default=1)
    p_cls.add_argument("--max-in-flight", type=int, default=1)
    p_cls.set_defaults(func=cmd_classify)

    p_base = sub.add_parser("baseline", help="static-feature GBDT baseline")
    base_sub = p_base.add_subparsers(dest="baseline_command", required=True, parser_class=_Parser)
    p_train = base_sub.add_parser("train", help="train on a split (stratified 80/20)")
    _add_common(p_train)
    p_train.add_argument("--split", required=True, choices=sorted(_SPLITS))
    p_train.add_argument("--model-out", required=True)
    p_train.add_argument("--seed", type=int, default=1337)
    p_train.add_argument("--rounds", type=int, default=100)
    p_train.add_argument("--depth", type=int, default=4)
    p_train.add_argument("--learning-rate", type=float, default=0.1)
    p_train.add_argument("--min-samples-leaf", type=int, default=2)
    p_train.set_defaults(func=cmd_baseline_train)
    p_eval = base_sub.add_parser("eval", help="score a split with a trained model")
    _add_common(p_eval)
    p_eval.add_argument("--split", required=True, choices=sorted(_SPLITS))
    p_eval.add_argument("--model-in", required=True)
    p_eval.set_defaults(func=cmd_baseline_eval)

    p_ft = sub.add_parser("export-finetune", help="export a tuning dataset")
    _add_common(p_ft)
    p_ft.add_argument("--split", required=True, choices=sorted(_SPLITS))
    p_ft.add_argument("--n-per-class", required=True, type=int)
    p_ft.add_argument("--out", required=True)
    p_ft.add_argument("--by-decompiled-size", action="store_true")
    p_ft.add_argument("--model", default=None, help="model profile name")
    p_ft.add_argument("--mock", action="store_true", help="use the offline mock decompiler")
    p_ft.set_defaults(func=cmd_export_finetune)

    p_rep = sub.add_parser("report", help="print the table for a completed run")
    _add_common(p_rep)
    p_rep.add_argument("--run", required=True, help="run id under runs_dir")
    p_rep.add_argument("--format", default="markdown", choices=["markdown", "csv"])
    p_rep.set_defaults(func=cmd_report)

    p_cfg = sub.add_parser("config", help="configuration helpers")
    cfg_sub = p_cfg.add_subparsers(dest="config_command", required=True, parser_class=_Parser)
    p_val = cfg_sub.add_parser("validate", help="parse and validate the config")
    _add_common(p_val)
    p_val.set_defaults(func=cmd_config_validate)
    p_init = cfg_sub.add_parser("init", help="write a commented starter config")
    _add_common(p_init)
    p_init.set_defaults(func=cmd_config_init)

    return parser


def _config_path(args) -> str:
    return args.config if args.config else None


def _make_driver(config: PipelineConfig, mock: bool) -> DecompilerDriver:
    if mock:
        return DecompilerDriver(config.decomp_cache_dir, MockBackend())
    return DecompilerDriver(config.decomp_cache_dir, GhidraBackend(config.decompiler))


def cmd_ingest(args) -> int:
    label = _LABELS[args.label]
    if label is Label.BENIGN and args.family:
        print("error: --family is only valid with --label malware", file=sys.stderr)
        return EXIT_USAGE
    config = load_config(_config_path(args))
    store = SampleStore(config.store_dir)
    new = existing = failed = 0
    seen = {record.sha256 for record in store.load_manifest()}
    for raw_path in args.paths:
        try:
            record = store.ingest_sample(
                Path(raw_path),
                label=label,
                family=args.family,
                source=_SOURCES[args.source],
                split=_SPLITS[args.split],
            )
        except TriageError as exc:
            print(f"error: {raw_path}: {exc}", file=sys.stderr)
            failed += 1
            continue
        if record.sha256 in seen:
            existing += 1
        else:
            new += 1
            seen.add(record.sha256)
            print(f"{record.sha256}  {record.original_name}")
    print(f"ingested {new} new, {existing} existing, {failed} failed")
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_decompile(args) -> int:
    config = load_config(_config_path(args))
    store = SampleStore(config.store_dir)
    manifest = store.load_manifest()
    records = manifest.for_split(_SPLITS[args.split])
    driver = _make_driver(config, args.mock)
    units = driver.decompile_batch(
        store,
        records,
        max_parallel=max(1, args.max_parallel),
        timeout_s=config.decompiler.timeout_s,
    )
    counts = {status: 0 for status in DecompileStatus}
    for unit in units:
        counts[unit.status] += 1
    print(
        " ".join(f"{status.value}: {counts[status]}" for status in DecompileStatus)
    )
    return EXIT_OK if counts[DecompileStatus.OK] >= 1 else EXIT_FAILURE


def cmd_classify(args) -> int:
    config = load_config(_config_path(args))
    store = SampleStore(config.store_dir)
    manifest = store.load_manifest()
    model_profile = config.model_profile(args.model)
    provider_profile = config.provider_profile(args.provider)
    driver = _make_driver(config, args.mock)
    transport = MockTransport() if args.mock else HttpTransport()
    client = LlmClient(provider_profile, transport)
    run_dir = run_experiment(
        store,
        manifest,
        _SPLITS[args.split],
        driver,
        model_profile,
        client,
        config.runs_dir,
        with_static_context=args.with_static_context,
        run_id=args.run_id,
        max_parallel=max(1, args.max_parallel),
        max_in_flight=max(1, args.max_in_flight),
        decompile_timeout_s=config.decompiler.timeout_s,
    )
    metrics = json.loads((run_dir / "metrics.json").read_text(encoding="utf-8"))
    print(f"run_id: {run_dir.name}")
    print(_metrics_line(metrics))
    return EXIT_OK


def _metrics_line(metrics: dict) -> str:
    parts = [f"{key}={metrics[key]}" for key in ("tp", "fn", "fp", "tn")]
    for key in ("accuracy", "precision", "recall", "f1"):
        parts.append(f"{key}={format_percent(metrics[key])}")
    parts.append(f"scored={metrics['n_scored']}")
    parts.append(f"unscored={metrics['n_unscored']}")
    return " ".join(parts)


def _split_features(
    store: SampleStore, split: DatasetSplit
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    manifest = store.load_manifest()
    records = manifest.for_split(split)
    if not records:
        raise TriageError(f"no samples in split {split.value}")
    features = np.stack([extract_features(store.read_bytes(r.sha256)) for r in records])
    labels = np.array([r.label is Label.MALWARE for r in records])
    return features, labels, [r.sha256 for r in records]


def _stratified_indices(
    labels: np.ndarray, seed: int, train_fraction: float = 0.8
) -> tuple[list[int], list[int]]:
    """Per-class shuffle then split; deterministic for a fixed seed."""
    rng = random.Random(seed)
    train: list[int] = []
    holdout: list[int] = []
    for cls in (True, False):
        indices = [i for i, y in enumerate(labels) if bool(y) == cls]
        rng.shuffle(indices)
        cut = int(len(indices) * train_fraction)
        train.extend(indices[:cut])
        holdout.extend(indices[cut:])
    return sorted(train), sorted(holdout)


def _score_matrix(model, features: np.ndarray, labels: np.ndarray) -> ConfusionMatrix:
    tp = fn = fp = tn = 0
    for x, y in zip(features, labels):
        _, predicted = predict(model, x)
        if y and predicted:
            tp += 1
        elif y:
            fn += 1
        elif predicted:
            fp += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, fn, fp, tn)


def cmd_baseline_train(args) -> int:
    config = load_config(_config_path(args))
    store = SampleStore(config.store_dir)
    features, labels, _ = _split_features(store, _SPLITS[args.split])
    train_idx, holdout_idx = _stratified_indices(labels, args.seed)
    params = GbdtParams(
        num_rounds=args.rounds,
        max_depth=args.depth,
        learning_rate=args.learning_rate,
        min_samples_leaf=args.min_samples_leaf,
    )
    model = train_gbdt(features[train_idx], labels[train_idx], params)
    save_model(model, args.model_out)

    rows = []
    for name, idx in (("train", train_idx), ("holdout", holdout_idx)):
        if not idx:
            continue
        cm = _score_matrix(model, features[idx], labels[idx])
        rows.append((name, cm, compute_metrics(cm)))
    print(f"model written to {args.model_out}")
    print(render_report(rows, "markdown"), end="")
    return EXIT_OK


def cmd_baseline_eval(args) -> int:
    config = load_config(_config_path(args))
    store = SampleStore(config.store_dir)
    features, labels, _ = _split_features(store, _SPLITS[args.split])
    model = load_model(args.model_in)
    cm = _score_matrix(model, features, labels)
    name = Path(args.model_in).stem
    print(render_report([(name, cm, compute_metrics(cm))], "markdown"), end="")
    return EXIT_OK


def cmd_export_finetune(args) -> int:
    config = load_config(_config_path(args))
    store = SampleStore(config.store_dir)
    manifest = store.load_manifest()
    split = _SPLITS[args.split]
    records = manifest.for_split(split)
    driver = _make_driver(config, args.mock)
    units = {
        unit.sha256: unit
        for unit in driver.decompile_batch(
            store, records, timeout_s=config.decompiler.timeout_s
        )
    }
    chosen = select_finetune_subset(
        manifest,
        units,
        args.n_per_class,
        split=split,
        by_decompiled_size=args.by_decompiled_size,
    )
    rule = "smallest_decompiled_size" if args.by_decompiled_size else "smallest_size_bytes"
    count = export_finetune_dataset(
        chosen,
        units,
        config.model_profile(args.model),
        args.out,
        meta={
            "selection_rule": rule,
            "n_per_class": args.n_per_class,
            "source_split": split.value,
        },
    )
    print(f"wrote {count} examples to {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    config = load_config(_config_path(args))
    metrics_path = config.runs_dir / args.run / "metrics.json"
    if not metrics_path.exists():
        raise TriageError(f"no metrics for run {args.run} under {config.runs_dir}")
    metrics = json.loads(metrics_path.read_text(encoding="utf-8"))
    cm = ConfusionMatrix(metrics["tp"], metrics["fn"], metrics["fp"], metrics["tn"])
    report = MetricsReport(
        accuracy=metrics["accuracy"],
        precision=metrics["precision"],
        recall=metrics["recall"],
        f1=metrics["f1"],
        n_scored=metrics["n_scored"],
        n_unscored=metrics["n_unscored"],
    )
    print(render_report([(args.run, cm, report)], args.format), end="")
    return EXIT_OK


def cmd_config_validate(args) -> int:
    config = load_config(_config_path(args))
    print(
        f"config ok: {len(config.model_profiles)} model profile(s),"
        f" {len(config.provider_profiles)} provider profile(s),"
        f" default '{config.default_profile}'"
    )
    return EXIT_OK


def cmd_config_init(args) -> int:
    path = Path(args.config if args.config else DEFAULT_CONFIG_FILENAME)
    if path.exists():
        raise TriageError(f"refusing to overwrite existing {path}")
    path.write_text(default_config_text(), encoding="utf-8")
    print(f"wrote {path}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except TriageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def entry() -> None:
    sys.exit(main())
