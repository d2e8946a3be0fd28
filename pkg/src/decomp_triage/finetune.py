"""Supervised fine-tuning dataset export: smallest-N per class.

Selection favors the smallest binaries because token limits and token
cost scale with decompiled size; binary size is the stable
pre-decompilation proxy. An alternative rule orders by decompiled text
size instead. The actual tuning run happens on an external managed
service; this module only produces its input file plus a provenance
sidecar.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .decompiler import DecompiledUnit, DecompileStatus
from .errors import TriageError
from .prompt import render_prompt
from .store import DatasetManifest, DatasetSplit, Label, SampleRecord
from .tokens import ModelProfile

COMPLETION_MALWARE = '{"Malware": True}'
COMPLETION_BENIGN = '{"Malware": False}'

SELECTION_BY_BINARY_SIZE = "smallest_size_bytes"
SELECTION_BY_DECOMPILED_SIZE = "smallest_decompiled_size"


class FinetuneError(TriageError):
    pass


class InsufficientSamples(FinetuneError):
    def __init__(self, label: Label, available: int, requested: int):
        self.label = label
        self.available = available
        self.requested = requested
        super().__init__(
            f"need {requested} decompiled {label.value} samples, have {available}"
        )


class MissingDecompilation(FinetuneError):
    pass


@dataclass(frozen=True)
class FinetuneExample:
    sha256: str
    prompt: str
    completion: str


def select_finetune_subset(
    manifest: DatasetManifest,
    units: Mapping[str, DecompiledUnit],
    n_per_class: int,
    *,
    split: DatasetSplit | None = None,
    by_decompiled_size: bool = False,
) -> list[SampleRecord]:
    """Pick the n smallest decompiled-Ok samples of each class.

    Ascending size (binary bytes, or decompiled text length with the
    alternative rule), ties broken by ascending sha256. The result lists
    malware first, then benign, each in selection order; the choice is a
    pure function of the record set, independent of manifest ordering.
    """
    if n_per_class < 1:
        raise FinetuneError("n_per_class must be >= 1")

    def ok_unit(sha256: str) -> DecompiledUnit | None:
        unit = units.get(sha256)
        if unit is not None and unit.status is DecompileStatus.OK:
            return unit
        return None

    def sort_key(record: SampleRecord) -> tuple:
        if by_decompiled_size:
            unit = ok_unit(record.sha256)
            assert unit is not None and unit.c_text is not None
            return (len(unit.c_text), record.sha256)
        return (record.size_bytes, record.sha256)

    chosen: list[SampleRecord] = []
    for label in (Label.MALWARE, Label.BENIGN):
        eligible = [
            r
            for r in manifest
            if r.label is label
            and (split is None or r.split is split)
            and ok_unit(r.sha256) is not None
        ]
        if len(eligible) < n_per_class:
            raise InsufficientSamples(label, len(eligible), n_per_class)
        eligible.sort(key=sort_key)
        chosen.extend(eligible[:n_per_class])
    return chosen


def export_finetune_dataset(
    records: Iterable[SampleRecord],
    units: Mapping[str, DecompiledUnit],
    profile: ModelProfile,
    out_path: Path | str,
    *,
    meta: dict | None = None,
) -> int:
    """Write one JSON line per example; returns the line count.

    Prompts are full rendered payloads (no static context); completions
    are the exact forms the classifier prompt demands. A `.meta.json`
    sidecar records selection provenance. Identical inputs produce a
    byte-identical file.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    lines: list[str] = []
    examples: list[FinetuneExample] = []
    template_hash = None
    malware_count = benign_count = 0
    for record in records:
        unit = units.get(record.sha256)
        if unit is None or unit.status is not DecompileStatus.OK:
            raise MissingDecompilation(
                f"sample {record.sha256} has no Ok decompilation"
            )
        payload = render_prompt(unit, profile=profile)
        template_hash = payload.template_hash
        if record.label is Label.MALWARE:
            completion = COMPLETION_MALWARE
            malware_count += 1
        else:
            completion = COMPLETION_BENIGN
            benign_count += 1
        example = FinetuneExample(
            sha256=record.sha256, prompt=payload.text, completion=completion
        )
        examples.append(example)
        lines.append(
            json.dumps({"prompt": example.prompt, "completion": example.completion})
        )

    tmp = out_path.with_name(out_path.name + ".tmp")
    tmp.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    os.replace(tmp, out_path)

    sidecar = {
        "template_hash": template_hash,
        "examples": len(examples),
        "malware": malware_count,
        "benign": benign_count,
        # The tuning run itself is out of scope; epoch count is recorded
        # for provenance with the external service, not acted upon here.
        "suggested_epochs": 40,
    }
    if meta:
        sidecar.update(meta)
    meta_path = out_path.with_name(out_path.stem + ".meta.json")
    meta_path.write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    return len(lines)
