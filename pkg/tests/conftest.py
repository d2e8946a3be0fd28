import random
from datetime import datetime, timezone
from pathlib import Path

import pytest

from decomp_triage.store import (
    DatasetSplit,
    Label,
    SampleSource,
    SampleStore,
)

from pe_builder import build_pe, CODE_SECTION_FLAGS, DATA_SECTION_FLAGS

# Synthetic family names: these fixtures are harmless generated PEs, so
# they deliberately do not borrow real malware family names.
FIXTURE_FAMILIES = [
    "AlphaRat", "BravoStealer", "CharlieMiner",
    "DeltaWorm", "EchoLoader", "FoxtrotBot",
]

IMPORT_POOL = [
    ("kernel32.dll", ["CreateFileA", "WriteFile", "VirtualAlloc", "GetProcAddress"]),
    ("advapi32.dll", ["RegOpenKeyExA", "RegSetValueExA"]),
    ("wininet.dll", ["InternetOpenA", "InternetConnectA"]),
    ("user32.dll", ["MessageBoxA", "FindWindowA"]),
    ("ws2_32.dll", ["socket", "connect", "send", "recv"]),
]


def make_fixture_binary(rng: random.Random, *, noisy: bool) -> bytes:
    """One synthetic PE. Noisy ones carry high-entropy payload sections."""
    code = bytes([0xB8, rng.randrange(256), 0, 0, 0, 0xC3]) + rng.randbytes(
        rng.randrange(64, 512)
    )
    if noisy:
        payload = rng.randbytes(rng.randrange(1024, 4096))
    else:
        pattern = bytes([rng.randrange(8)] * 16)
        payload = pattern * rng.randrange(64, 256)
    n_dlls = rng.randrange(1, 4)
    imports = {}
    for dll, symbols in rng.sample(IMPORT_POOL, n_dlls):
        imports[dll] = rng.sample(symbols, rng.randrange(1, len(symbols) + 1))
    return build_pe(
        sections=[
            (".text", code, CODE_SECTION_FLAGS),
            (".data", payload, DATA_SECTION_FLAGS),
        ],
        imports=imports,
        timestamp=0x50000000 + rng.randrange(1 << 24),
        with_debug_dir=not noisy,
    )


def write_fixture_corpus(
    directory: Path, n_malware: int = 6, n_benign: int = 6, seed: int = 20250821
) -> list[tuple[Path, Label, str | None]]:
    """Deterministic corpus of synthetic PEs on disk."""
    rng = random.Random(seed)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for i in range(n_malware):
        path = directory / f"mal_{i:02d}.exe"
        path.write_bytes(make_fixture_binary(rng, noisy=True))
        out.append((path, Label.MALWARE, FIXTURE_FAMILIES[i % len(FIXTURE_FAMILIES)]))
    for i in range(n_benign):
        path = directory / f"ben_{i:02d}.exe"
        path.write_bytes(make_fixture_binary(rng, noisy=False))
        out.append((path, Label.BENIGN, None))
    return out


def ingest_fixture_corpus(
    store: SampleStore,
    files: list[tuple[Path, Label, str | None]],
    split: DatasetSplit = DatasetSplit.CUSTOM,
):
    records = []
    stamp = datetime(2025, 8, 1, 12, 0, 0, tzinfo=timezone.utc)
    for path, label, family in files:
        records.append(
            store.ingest_sample(
                path,
                label=label,
                family=family,
                source=SampleSource.SYNTHETIC_FIXTURE,
                split=split,
                now=stamp,
            )
        )
    return records


@pytest.fixture
def store(tmp_path: Path) -> SampleStore:
    return SampleStore(tmp_path / "data")


@pytest.fixture
def corpus(tmp_path: Path, store: SampleStore):
    """(store, records) with the standard 12-sample corpus ingested."""
    files = write_fixture_corpus(tmp_path / "incoming")
    records = ingest_fixture_corpus(store, files)
    return store, records


class FakeClock:
    """Deterministic time for pacing/backoff tests: sleep advances now."""

    def __init__(self):
        self.t = 0.0
        self.sleeps: list[float] = []

    def now(self) -> float:
        return self.t

    def sleep(self, duration: float) -> None:
        self.sleeps.append(duration)
        self.t += duration


@pytest.fixture
def fake_clock() -> FakeClock:
    return FakeClock()
