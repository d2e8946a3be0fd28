"""Ghidra headless decompilation with a cache and an offline mock backend.

The real backend shells out to ``analyzeHeadless`` with a post-analysis
export script; the mock backend synthesizes deterministic pseudo-C from the
sample bytes so the rest of the pipeline can be exercised with no Ghidra
install. Results are cached per sha256 under the cache directory as
``<sha256>.c`` plus a ``<sha256>.meta`` JSON sidecar.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import random
import subprocess
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol

from .errors import TriageError
from .store import SampleRecord, SampleStore, compute_sha256

# Function boundaries in exported C text. The Ghidra post-script emits the
# same markers; keep these literals in sync with it.
FUNCTION_MARKER_PREFIX = "// FUNCTION "
FAILURE_MARKER_PREFIX = "// DECOMPILE FAILED "

EXPORT_SCRIPT_NAME = "ExportDecompiledC.java"

# Typical blow-up from executable bytes to decompiled C observed on real
# binaries; the mock backend reproduces it so size-based filtering behaves
# like it would against real exports.
MOCK_EXPANSION_FACTOR = 13.4


class DecompilerError(TriageError):
    pass


class GhidraNotFound(DecompilerError):
    pass


class ToolTimeout(DecompilerError):
    pass


class ToolFailure(DecompilerError):
    pass


class DecompileStatus(enum.Enum):
    OK = "Ok"
    TIMEOUT = "Timeout"
    TOOL_ERROR = "ToolError"
    EMPTY = "Empty"


@dataclass(frozen=True)
class DecompiledUnit:
    """Outcome of decompiling one sample. ``c_text`` is set only for OK."""

    sha256: str
    status: DecompileStatus
    c_text: str | None
    function_count: int
    tool_version: str
    duration_ms: int


@dataclass(frozen=True)
class DecompilerConfig:
    ghidra_home: Path
    project_dir: Path
    timeout_s: float = 600.0
    analysis_enabled: bool = True
    # Directory holding the export post-script, passed via -scriptPath.
    script_dir: Path | None = None


def count_functions(c_text: str) -> int:
    return sum(
        1 for line in c_text.splitlines() if line.startswith(FUNCTION_MARKER_PREFIX)
    )


def synthesize_c(data: bytes, expansion: float = MOCK_EXPANSION_FACTOR) -> str:
    """Deterministic pseudo-C for a byte string.

    Pure function of the input bytes: function count, names, and bodies all
    derive from the SHA-256, and output length tracks ``len(data) * expansion``
    so size filtering sees realistic magnitudes.
    """
    digest = hashlib.sha256(data).digest()
    hexd = digest.hex()
    rng = random.Random(int.from_bytes(digest[:8], "big"))
    n_funcs = 1 + digest[0] % 4
    target_len = max(600, int(len(data) * expansion))

    calls = [
        "GetProcAddress", "LoadLibraryA", "VirtualAlloc", "CreateFileA",
        "RegOpenKeyExA", "WriteFile", "InternetOpenA", "Sleep",
    ]
    chunks: list[str] = []
    per_func = max(200, target_len // n_funcs)
    for i in range(n_funcs):
        address = 0x00401000 + i * 0x80
        name = f"FUN_{address:08x}"
        body: list[str] = [
            f"{FUNCTION_MARKER_PREFIX}{name} @ {address:08x}",
            f"undefined4 {name}(void)",
            "{",
            "  undefined4 uVar1;",
            "  int iVar2;",
            "",
        ]
        body_len = sum(len(s) + 1 for s in body)
        j = 0
        while body_len < per_func:
            roll = rng.randrange(4)
            if roll == 0:
                line = f"  uVar1 = uVar1 ^ 0x{rng.getrandbits(32):08x};"
            elif roll == 1:
                line = f"  iVar2 = iVar2 + {rng.randrange(1, 0xFFFF)};"
            elif roll == 2:
                line = f"  {calls[rng.randrange(len(calls))]}();"
            else:
                line = f"  *(undefined4 *)(uVar1 + {rng.randrange(4, 256)}) = iVar2;"
            body.append(line)
            body_len += len(line) + 1
            j += 1
        body.append(f"  return {digest[i] % 2};")
        body.append("}")
        body.append("")
        chunks.append("\n".join(body))
    header = f"// {hexd[:16]} functions={n_funcs}\n\n"
    return header + "\n".join(chunks)


class Backend(Protocol):
    def run(self, input_path: Path, timeout_s: float) -> str:
        """Return exported C text for one binary, or raise a DecompilerError."""

    def tool_version(self) -> str: ...


class MockBackend:
    """Offline stand-in for Ghidra.

    ``overrides`` maps sha256 to a forced failure mode ("timeout", "error",
    or "empty"); everything else succeeds deterministically. ``sleep_s``
    makes each call hold a concurrency slot for that long, which lets tests
    observe parallelism; a sleep longer than the timeout raises ToolTimeout
    without actually waiting it out.
    """

    def __init__(self, overrides: dict[str, str] | None = None, sleep_s: float = 0.0):
        self.overrides = dict(overrides or {})
        self.sleep_s = sleep_s
        self.calls = 0
        self.max_observed_parallel = 0
        self._active = 0
        self._lock = threading.Lock()

    def tool_version(self) -> str:
        return "mock-1"

    def run(self, input_path: Path, timeout_s: float) -> str:
        data = Path(input_path).read_bytes()
        sha256 = compute_sha256(data)
        with self._lock:
            self.calls += 1
            self._active += 1
            self.max_observed_parallel = max(self.max_observed_parallel, self._active)
        try:
            if self.sleep_s:
                if self.sleep_s > timeout_s:
                    raise ToolTimeout(f"simulated decompile exceeded {timeout_s}s")
                time.sleep(self.sleep_s)
            mode = self.overrides.get(sha256)
            if mode == "timeout":
                raise ToolTimeout(f"simulated timeout for {sha256}")
            if mode == "error":
                raise ToolFailure(f"simulated tool failure for {sha256}")
            if mode == "empty":
                return ""
            return synthesize_c(data)
        finally:
            with self._lock:
                self._active -= 1


class GhidraBackend:
    """Drives ``analyzeHeadless`` with the export post-script."""

    def __init__(self, config: DecompilerConfig):
        self.config = config
        self._headless = Path(config.ghidra_home) / "support" / "analyzeHeadless"
        if not self._headless.exists():
            raise GhidraNotFound(f"analyzeHeadless not found at {self._headless}")

    def tool_version(self) -> str:
        props = Path(self.config.ghidra_home) / "Ghidra" / "application.properties"
        try:
            for line in props.read_text(encoding="utf-8").splitlines():
                if line.startswith("application.version="):
                    return "ghidra-" + line.split("=", 1)[1].strip()
        except OSError:
            pass
        return "ghidra-unknown"

    def command(self, input_path: Path, output_path: Path, project_name: str) -> list[str]:
        cmd = [
            str(self._headless),
            str(self.config.project_dir),
            project_name,
            "-import", str(input_path),
            "-overwrite",
            "-postScript", EXPORT_SCRIPT_NAME, str(output_path),
            "-deleteProject",
        ]
        if self.config.script_dir is not None:
            cmd[6:6] = ["-scriptPath", str(self.config.script_dir)]
        if not self.config.analysis_enabled:
            cmd.append("-noanalysis")
        return cmd

    def run(self, input_path: Path, timeout_s: float) -> str:
        Path(self.config.project_dir).mkdir(parents=True, exist_ok=True)
        with tempfile.TemporaryDirectory(prefix="decomp-export-") as tmp:
            output_path = Path(tmp) / "export.c"
            project = "triage_" + hashlib.sha256(str(input_path).encode()).hexdigest()[:12]
            cmd = self.command(input_path, output_path, project)
            try:
                proc = subprocess.run(
                    cmd, capture_output=True, text=True, timeout=timeout_s,
                )
            except subprocess.TimeoutExpired as exc:
                raise ToolTimeout(f"analyzeHeadless exceeded {timeout_s}s") from exc
            except OSError as exc:
                raise ToolFailure(f"failed to launch analyzeHeadless: {exc}") from exc
            if proc.returncode != 0:
                tail = (proc.stderr or proc.stdout or "")[-2000:]
                raise ToolFailure(
                    f"analyzeHeadless exited {proc.returncode}: {tail}"
                )
            if not output_path.exists():
                raise ToolFailure("export script produced no output file")
            return output_path.read_text(encoding="utf-8", errors="replace")


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


class DecompilerDriver:
    """Cache-aware decompilation front end."""

    def __init__(self, cache_dir: Path | str, backend: Backend):
        self.cache_dir = Path(cache_dir)
        self.backend = backend

    def _c_path(self, sha256: str) -> Path:
        return self.cache_dir / f"{sha256}.c"

    def _meta_path(self, sha256: str) -> Path:
        return self.cache_dir / f"{sha256}.meta"

    def load_cached(self, sha256: str) -> DecompiledUnit | None:
        meta_path = self._meta_path(sha256)
        if not meta_path.exists():
            return None
        try:
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
            status = DecompileStatus(meta["status"])
            c_text = None
            if status is DecompileStatus.OK:
                c_text = self._c_path(sha256).read_text(encoding="utf-8")
            return DecompiledUnit(
                sha256=sha256,
                status=status,
                c_text=c_text,
                function_count=int(meta["function_count"]),
                tool_version=str(meta["tool_version"]),
                duration_ms=int(meta["duration_ms"]),
            )
        except (OSError, ValueError, KeyError):
            # Corrupt or partial cache entry: treat as a miss and redo.
            return None

    def _write_cache(self, unit: DecompiledUnit) -> None:
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        if unit.status is DecompileStatus.OK:
            assert unit.c_text is not None
            _atomic_write_text(self._c_path(unit.sha256), unit.c_text)
        meta = {
            "sha256": unit.sha256,
            "status": unit.status.value,
            "function_count": unit.function_count,
            "tool_version": unit.tool_version,
            "duration_ms": unit.duration_ms,
        }
        _atomic_write_text(self._meta_path(unit.sha256), json.dumps(meta, indent=2) + "\n")

    def decompile(
        self, store: SampleStore, record: SampleRecord, *, timeout_s: float = 600.0
    ) -> DecompiledUnit:
        cached = self.load_cached(record.sha256)
        if cached is not None:
            return cached

        input_path = store.sample_path(record.sha256)
        start = time.monotonic()
        try:
            c_text = self.backend.run(input_path, timeout_s)
            status = DecompileStatus.OK
        except ToolTimeout:
            c_text, status = None, DecompileStatus.TIMEOUT
        except ToolFailure:
            c_text, status = None, DecompileStatus.TOOL_ERROR
        duration_ms = int((time.monotonic() - start) * 1000)

        function_count = 0
        if status is DecompileStatus.OK:
            function_count = count_functions(c_text or "")
            if function_count == 0:
                status = DecompileStatus.EMPTY
                c_text = None

        unit = DecompiledUnit(
            sha256=record.sha256,
            status=status,
            c_text=c_text,
            function_count=function_count,
            tool_version=self.backend.tool_version(),
            duration_ms=duration_ms,
        )
        self._write_cache(unit)
        return unit

    def decompile_batch(
        self,
        store: SampleStore,
        records: Iterable[SampleRecord],
        *,
        max_parallel: int = 1,
        timeout_s: float = 600.0,
    ) -> list[DecompiledUnit]:
        """Decompile many samples; results come back in input order."""
        records = list(records)
        if max_parallel <= 1:
            return [self.decompile(store, r, timeout_s=timeout_s) for r in records]
        with ThreadPoolExecutor(max_workers=max_parallel) as pool:
            return list(
                pool.map(lambda r: self.decompile(store, r, timeout_s=timeout_s), records)
            )


def make_driver(
    cache_dir: Path | str,
    config: DecompilerConfig | None = None,
    *,
    mock: bool = False,
    mock_overrides: dict[str, str] | None = None,
) -> DecompilerDriver:
    if mock:
        return DecompilerDriver(cache_dir, MockBackend(overrides=mock_overrides))
    if config is None:
        raise DecompilerError("a DecompilerConfig is required unless mock=True")
    return DecompilerDriver(cache_dir, GhidraBackend(config))
