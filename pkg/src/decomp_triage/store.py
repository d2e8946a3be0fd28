"""Content-addressed sample store and dataset manifest.

Samples live under ``<root>/store/<hh>/<sha256>.bin`` where ``hh`` is the
first two hex digits of the SHA-256. Labels and provenance live in a JSONL
manifest next to the store directory. Binaries are treated as quarantine
material: nothing in this module executes or interprets their contents.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import re
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator

from .errors import TriageError

MANIFEST_SCHEMA_VERSION = 1

_SHA256_RE = re.compile(r"^[0-9a-f]{64}$")


class StoreError(TriageError):
    pass


class UnreadablePath(StoreError):
    pass


class EmptyFile(StoreError):
    pass


class LabelFamilyMismatch(StoreError):
    pass


class DuplicateSha256(StoreError):
    pass


class MalformedManifestLine(StoreError):
    def __init__(self, line_no: int, reason: str):
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"manifest line {line_no}: {reason}")


class Label(enum.Enum):
    MALWARE = "Malware"
    BENIGN = "Benign"


class SampleSource(enum.Enum):
    BOOK_CORPUS_2017 = "BookCorpus2017"
    MALWARE_BAZAAR_2025 = "MalwareBazaar2025"
    LOCAL_BENIGN = "LocalBenign"
    SYNTHETIC_FIXTURE = "SyntheticFixture"


class DatasetSplit(enum.Enum):
    BASELINE_2017 = "Baseline2017"
    CONTEMPORARY_2025 = "Contemporary2025"
    CUSTOM = "Custom"


def compute_sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class SampleRecord:
    """One sample's identity, label, and provenance.

    ``family`` names the malware family and is only meaningful for malware;
    benign records must leave it unset.
    """

    sha256: str
    original_name: str
    size_bytes: int
    label: Label
    family: str | None
    source: SampleSource
    split: DatasetSplit
    acquired_at: datetime

    def __post_init__(self) -> None:
        if not _SHA256_RE.fullmatch(self.sha256):
            raise StoreError(f"bad sha256: {self.sha256!r}")
        if self.size_bytes <= 0:
            raise StoreError(f"size_bytes must be positive, got {self.size_bytes}")
        if self.label is Label.BENIGN and self.family is not None:
            raise LabelFamilyMismatch(
                f"benign sample {self.sha256} must not carry family {self.family!r}"
            )
        if self.family is not None and not self.family:
            raise StoreError("family, when present, must be non-empty")
        if self.acquired_at.tzinfo is None:
            raise StoreError("acquired_at must be timezone-aware UTC")

    def to_json(self) -> str:
        obj = {
            "sha256": self.sha256,
            "original_name": self.original_name,
            "size_bytes": self.size_bytes,
            "label": self.label.value,
            "family": self.family,
            "source": self.source.value,
            "split": self.split.value,
            "acquired_at": _format_rfc3339(self.acquired_at),
        }
        return json.dumps(obj, sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "SampleRecord":
        obj = json.loads(text)
        if not isinstance(obj, dict):
            raise ValueError("record must be a JSON object")
        required = {
            "sha256", "original_name", "size_bytes", "label",
            "family", "source", "split", "acquired_at",
        }
        missing = required - obj.keys()
        if missing:
            raise ValueError(f"missing fields: {sorted(missing)}")
        return cls(
            sha256=obj["sha256"],
            original_name=obj["original_name"],
            size_bytes=obj["size_bytes"],
            label=Label(obj["label"]),
            family=obj["family"],
            source=SampleSource(obj["source"]),
            split=DatasetSplit(obj["split"]),
            acquired_at=_parse_rfc3339(obj["acquired_at"]),
        )


def _format_rfc3339(dt: datetime) -> str:
    # fromisoformat on 3.10 only takes 3- or 6-digit fractions; keep all 6
    dt = dt.astimezone(timezone.utc)
    if dt.microsecond:
        return dt.strftime("%Y-%m-%dT%H:%M:%S.%f") + "Z"
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


def _parse_rfc3339(text: str) -> datetime:
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        raise ValueError(f"timestamp lacks timezone: {text!r}")
    return dt.astimezone(timezone.utc)


def _sort_key(record: SampleRecord) -> tuple:
    return (record.split.value, record.label.value, record.sha256)


class DatasetManifest:
    """Ordered collection of sample records, unique by sha256.

    Iteration order is always sorted by (split, label, sha256) so that
    serialized manifests are stable and diffs are meaningful.
    """

    def __init__(self, records: Iterable[SampleRecord] = ()):
        self._by_sha: dict[str, SampleRecord] = {}
        for record in records:
            self.add(record)

    def add(self, record: SampleRecord) -> None:
        if record.sha256 in self._by_sha:
            raise DuplicateSha256(record.sha256)
        self._by_sha[record.sha256] = record

    def get(self, sha256: str) -> SampleRecord | None:
        return self._by_sha.get(sha256)

    def __contains__(self, sha256: str) -> bool:
        return sha256 in self._by_sha

    def __len__(self) -> int:
        return len(self._by_sha)

    def __iter__(self) -> Iterator[SampleRecord]:
        return iter(sorted(self._by_sha.values(), key=_sort_key))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return self._by_sha == other._by_sha

    def for_split(self, split: DatasetSplit) -> list[SampleRecord]:
        return [r for r in self if r.split is split]

    def count_labels(self, split: DatasetSplit) -> tuple[int, int]:
        """Return (malware, benign) counts for a split."""
        malware = benign = 0
        for r in self.for_split(split):
            if r.label is Label.MALWARE:
                malware += 1
            else:
                benign += 1
        return malware, benign

    def to_lines(self) -> str:
        return "".join(r.to_json() + "\n" for r in self)

    @classmethod
    def from_lines(cls, text: str) -> "DatasetManifest":
        manifest = cls()
        for line_no, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                record = SampleRecord.from_json(line)
            except DuplicateSha256:
                raise
            except (ValueError, KeyError, TypeError, StoreError) as exc:
                raise MalformedManifestLine(line_no, str(exc)) from exc
            try:
                manifest.add(record)
            except DuplicateSha256 as exc:
                raise MalformedManifestLine(
                    line_no, f"duplicate sha256 {record.sha256}"
                ) from exc
        return manifest


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class SampleStore:
    """Filesystem layout for quarantined samples plus their manifest."""

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.store_dir = self.root / "store"
        self.manifest_path = self.root / "manifest.jsonl"

    def sample_path(self, sha256: str) -> Path:
        if not _SHA256_RE.fullmatch(sha256):
            raise StoreError(f"bad sha256: {sha256!r}")
        return self.store_dir / sha256[:2] / f"{sha256}.bin"

    def read_bytes(self, sha256: str) -> bytes:
        path = self.sample_path(sha256)
        try:
            return path.read_bytes()
        except OSError as exc:
            raise UnreadablePath(f"cannot read stored sample {sha256}: {exc}") from exc

    def load_manifest(self) -> DatasetManifest:
        if not self.manifest_path.exists():
            return DatasetManifest()
        return DatasetManifest.from_lines(self.manifest_path.read_text(encoding="utf-8"))

    def save_manifest(self, manifest: DatasetManifest) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        _atomic_write_bytes(self.manifest_path, manifest.to_lines().encode("utf-8"))

    def ingest_sample(
        self,
        path: Path | str,
        label: Label,
        family: str | None,
        source: SampleSource,
        split: DatasetSplit,
        *,
        now: datetime | None = None,
    ) -> SampleRecord:
        """Copy a file into the store and record it in the manifest.

        Re-ingesting bytes already present is a no-op that returns the
        existing record; the original label and provenance win.
        """
        path = Path(path)
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise UnreadablePath(f"cannot read {path}: {exc}") from exc
        if not data:
            raise EmptyFile(f"refusing to ingest empty file {path}")

        sha256 = compute_sha256(data)
        manifest = self.load_manifest()
        existing = manifest.get(sha256)
        if existing is not None:
            return existing

        acquired = now if now is not None else datetime.now(timezone.utc)
        acquired = acquired.replace(microsecond=0)
        record = SampleRecord(
            sha256=sha256,
            original_name=path.name,
            size_bytes=len(data),
            label=label,
            family=family,
            source=source,
            split=split,
            acquired_at=acquired,
        )

        dest = self.sample_path(sha256)
        dest.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write_bytes(dest, data)

        manifest.add(record)
        self.save_manifest(manifest)
        return record

    def verify_integrity(self) -> list[str]:
        """Re-hash every stored sample; return sha256s that do not match."""
        bad = []
        for record in self.load_manifest():
            try:
                data = self.read_bytes(record.sha256)
            except UnreadablePath:
                bad.append(record.sha256)
                continue
            if compute_sha256(data) != record.sha256:
                bad.append(record.sha256)
        return bad


def relabel(record: SampleRecord, **changes) -> SampleRecord:
    """Return a copy of a record with fields replaced; validation re-runs."""
    return replace(record, **changes)
