"""Verdict scoring, metric computation, and experiment orchestration.

Malware is the positive class throughout. Verdicts that never produced a
boolean (malformed output, transport failures) are excluded from the
confusion matrix and surfaced as n_unscored instead of being coerced to
either class, which would silently bias recall.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass
from datetime import datetime, timezone
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Sequence

from .decompiler import DecompilerDriver, DecompileStatus
from .errors import TriageError
from .llm import ClassifyFailure, LlmClient, ParsePath, Verdict
from .pe import describe_static
from .prompt import PromptPayload, load_template, overhead_text, render_prompt
from .store import DatasetManifest, DatasetSplit, Label, SampleStore
from .tokens import (
    ModelProfile,
    NotDecompiledExclusion,
    TooLarge,
    estimate_tokens,
    filter_dataset,
)


class UnknownSample(TriageError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fn: int = 0
    fp: int = 0
    tn: int = 0

    def __post_init__(self) -> None:
        for name in ("tp", "fn", "fp", "tn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(
            self.tp + other.tp,
            self.fn + other.fn,
            self.fp + other.fp,
            self.tn + other.tn,
        )


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float | None
    precision: float | None
    recall: float | None
    f1: float | None
    n_scored: int
    n_unscored: int


def accumulate(
    items: Iterable[Verdict | ClassifyFailure], manifest: DatasetManifest
) -> tuple[ConfusionMatrix, list[ClassifyFailure]]:
    """Fold verdicts into a confusion matrix against manifest labels.

    Failures pass through to the unscored list. A verdict for a sha256
    the manifest does not know is a caller bug, not data: UnknownSample.
    """
    tp = fn = fp = tn = 0
    unscored: list[ClassifyFailure] = []
    for item in items:
        if isinstance(item, ClassifyFailure):
            unscored.append(item)
            continue
        record = manifest.get(item.sha256)
        if record is None:
            raise UnknownSample(f"verdict for unknown sample {item.sha256}")
        actual_malware = record.label is Label.MALWARE
        if actual_malware and item.is_malware:
            tp += 1
        elif actual_malware:
            fn += 1
        elif item.is_malware:
            fp += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, fn, fp, tn), unscored


def _ratio(numerator: int, denominator: int) -> float | None:
    if denominator == 0:
        return None
    return numerator / denominator


def compute_metrics(cm: ConfusionMatrix, n_unscored: int = 0) -> MetricsReport:
    """Accuracy/precision/recall/F1; zero-denominator metrics are absent,
    never reported as 0 by convention."""
    accuracy = _ratio(cm.tp + cm.tn, cm.total)
    precision = _ratio(cm.tp, cm.tp + cm.fp)
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    if precision is None or recall is None or precision + recall == 0:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return MetricsReport(
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        f1=f1,
        n_scored=cm.total,
        n_unscored=n_unscored,
    )


UNDEFINED_MARK = "—"


def format_percent(value: float | None) -> str:
    """One-decimal percent with half-up rounding, e.g. 0.80111 -> \"80.1%\".

    Half-up (not banker's) matches how results tables are conventionally
    rounded; Decimal on the float's shortest repr keeps .X5 cases exact.
    """
    if value is None:
        return UNDEFINED_MARK
    percent = Decimal(repr(value * 100)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)
    return f"{percent}%"


ReportRow = tuple[str, ConfusionMatrix, MetricsReport]

_COLUMNS = ["Model", "TP", "FN", "FP", "TN", "Accuracy", "Precision", "Recall", "F1"]


def _row_cells(name: str, cm: ConfusionMatrix, metrics: MetricsReport) -> list[str]:
    return [
        name,
        str(cm.tp),
        str(cm.fn),
        str(cm.fp),
        str(cm.tn),
        format_percent(metrics.accuracy),
        format_percent(metrics.precision),
        format_percent(metrics.recall),
        format_percent(metrics.f1),
    ]


def render_report(rows: Sequence[ReportRow], format: str = "markdown") -> str:
    if format == "markdown":
        lines = [
            "| " + " | ".join(_COLUMNS) + " |",
            "|" + "|".join("---" for _ in _COLUMNS) + "|",
        ]
        for name, cm, metrics in rows:
            lines.append("| " + " | ".join(_row_cells(name, cm, metrics)) + " |")
        return "\n".join(lines) + "\n"
    if format == "csv":
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow([c.lower() for c in _COLUMNS])
        for name, cm, metrics in rows:
            writer.writerow(_row_cells(name, cm, metrics))
        return buffer.getvalue()
    raise ValueError(f"unknown report format {format!r}")


# --- experiment orchestration ------------------------------------------------


_PARSE_PATH_LABELS = {
    ParsePath.STRICT_JSON: "StrictJson",
    ParsePath.FENCE_STRIPPED: "FenceStripped",
    ParsePath.BOOLEAN_COERCED: "BooleanCoerced",
}
_PARSE_PATH_BY_LABEL = {v: k for k, v in _PARSE_PATH_LABELS.items()}


def verdict_to_json(verdict: Verdict) -> str:
    return json.dumps(
        {
            "sha256": verdict.sha256,
            "is_malware": verdict.is_malware,
            "raw_response": verdict.raw_response,
            "provider_name": verdict.provider_name,
            "model_id": verdict.model_id,
            "latency_ms": verdict.latency_ms,
            "parse_path": _PARSE_PATH_LABELS[verdict.parse_path],
        }
    )


def verdict_from_json(line: str) -> Verdict:
    obj = json.loads(line)
    return Verdict(
        sha256=obj["sha256"],
        is_malware=bool(obj["is_malware"]),
        raw_response=obj["raw_response"],
        provider_name=obj["provider_name"],
        model_id=obj["model_id"],
        latency_ms=int(obj["latency_ms"]),
        parse_path=_PARSE_PATH_BY_LABEL[obj["parse_path"]],
    )


def make_run_id(
    model_profile: ModelProfile,
    model_id: str,
    *,
    now: datetime | None = None,
) -> str:
    """UTC timestamp plus a short hash of template + profile identity."""
    stamp = (now or datetime.now(timezone.utc)).strftime("%Y%m%dT%H%M%SZ")
    template_hash = hashlib.sha256(load_template().encode("utf-8")).hexdigest()
    short = hashlib.sha256(
        f"{template_hash}:{model_profile.name}:{model_id}".encode()
    ).hexdigest()[:8]
    return f"{stamp}-{short}"


def _exclusion_to_json(exclusion: TooLarge | NotDecompiledExclusion) -> str:
    if isinstance(exclusion, TooLarge):
        obj = {
            "sha256": exclusion.sha256,
            "reason": exclusion.reason,
            "estimated": exclusion.estimated,
            "limit": exclusion.limit,
        }
    else:
        obj = {
            "sha256": exclusion.sha256,
            "reason": exclusion.reason,
            "status": exclusion.status.value,
        }
    return json.dumps(obj)


def run_experiment(
    store: SampleStore,
    manifest: DatasetManifest,
    split: DatasetSplit,
    driver: DecompilerDriver,
    model_profile: ModelProfile,
    client: LlmClient,
    runs_dir: Path | str,
    *,
    with_static_context: bool = False,
    run_id: str | None = None,
    max_parallel: int = 1,
    max_in_flight: int = 1,
    decompile_timeout_s: float = 600.0,
    report_name: str | None = None,
) -> Path:
    """Decompile, filter, classify, and score one split; returns the run dir.

    Resumable: pointing a second invocation at the same run_id reuses the
    decompilation cache and every verdict already on disk, so completed
    samples cost zero provider calls.
    """
    records = manifest.for_split(split)
    units = driver.decompile_batch(
        store, records, max_parallel=max_parallel, timeout_s=decompile_timeout_s
    )

    template = load_template()
    base_overhead = estimate_tokens(overhead_text(template=template), model_profile)

    payloads: list[PromptPayload] = []
    excluded: list[TooLarge | NotDecompiledExclusion] = []
    contexts: dict[str, str] = {}
    for unit in units:
        if with_static_context and unit.status is DecompileStatus.OK:
            context = describe_static(store.read_bytes(unit.sha256))
            contexts[unit.sha256] = context
            overhead = estimate_tokens(
                overhead_text(static_context=context, template=template), model_profile
            )
        else:
            overhead = base_overhead
        usable, dropped = filter_dataset([unit], overhead, model_profile)
        excluded.extend(dropped)
        for ok_unit in usable:
            payloads.append(
                render_prompt(
                    ok_unit,
                    static_context=contexts.get(ok_unit.sha256),
                    profile=model_profile,
                    template=template,
                )
            )

    if run_id is None:
        run_id = make_run_id(model_profile, client.profile.model_id)
    run_dir = Path(runs_dir) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)

    verdicts_path = run_dir / "verdicts.jsonl"
    previous: dict[str, Verdict] = {}
    if verdicts_path.exists():
        for line in verdicts_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                verdict = verdict_from_json(line)
                previous[verdict.sha256] = verdict

    to_run = [p for p in payloads if p.sha256 not in previous]

    def sink(sha256: str, raw: str) -> None:
        (run_dir / f"{sha256}.resp.txt").write_text(raw, encoding="utf-8")

    results = client.classify_batch(
        to_run, max_in_flight=max_in_flight, response_sink=sink
    )

    new_verdicts = [r for r in results if isinstance(r, Verdict)]
    if new_verdicts:
        with verdicts_path.open("a", encoding="utf-8") as handle:
            for verdict in new_verdicts:
                handle.write(verdict_to_json(verdict) + "\n")
    elif not verdicts_path.exists():
        verdicts_path.write_text("", encoding="utf-8")

    failures = [r for r in results if isinstance(r, ClassifyFailure)]
    (run_dir / "failures.jsonl").write_text(
        "".join(
            json.dumps(
                {"sha256": f.sha256, "error_kind": f.error_kind, "message": f.message}
            )
            + "\n"
            for f in failures
        ),
        encoding="utf-8",
    )

    scored: list[Verdict | ClassifyFailure] = list(previous.values())
    scored.extend(results)
    cm, unscored = accumulate(scored, manifest)
    metrics = compute_metrics(cm, n_unscored=len(unscored))

    (run_dir / "excluded.jsonl").write_text(
        "".join(_exclusion_to_json(e) + "\n" for e in excluded), encoding="utf-8"
    )
    (run_dir / "metrics.json").write_text(
        json.dumps(
            {
                "tp": cm.tp,
                "fn": cm.fn,
                "fp": cm.fp,
                "tn": cm.tn,
                "accuracy": metrics.accuracy,
                "precision": metrics.precision,
                "recall": metrics.recall,
                "f1": metrics.f1,
                "n_scored": metrics.n_scored,
                "n_unscored": metrics.n_unscored,
            },
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    row_name = report_name or client.profile.model_id
    rows = [(row_name, cm, metrics)]
    (run_dir / "report.md").write_text(render_report(rows, "markdown"), encoding="utf-8")
    (run_dir / "report.csv").write_text(render_report(rows, "csv"), encoding="utf-8")
    return run_dir
