"""Static PE inspection and fixed-width feature extraction.

The parser is total: any byte string yields a PeSummary. Malformed or
truncated executables are data, not faults; real malware ships with
deliberately broken headers, so every read is bounds-checked and a
truncation flag replaces exceptions.

Feature layout (336 values):
  [0:256]   normalized byte-value histogram
  [256:320] normalized 64-bucket histogram of hashed import names,
            bucket = FNV-1a 64-bit of lowercase "dll!symbol" mod 64
  [320:336] scalar header/section statistics (see _scalar_block)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

FEATURE_DIM = 336
IMPORT_BUCKETS = 64

FNV64_OFFSET_BASIS = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3

_SECTION_EXECUTE = 0x20000000
_SECTION_WRITE = 0x80000000

# Hostile-input guards: descriptor/thunk walks stop at these counts.
_MAX_IMPORT_DESCRIPTORS = 4096
_MAX_THUNKS_PER_DLL = 8192
_MAX_NAME_LEN = 512


def byte_entropy(data: bytes) -> float:
    """Shannon entropy in bits over the byte-value distribution, in [0, 8]."""
    if not data:
        return 0.0
    counts = np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=256)
    probs = counts[counts > 0] / len(data)
    return float(-(probs * np.log2(probs)).sum())


def fnv1a_64(data: bytes) -> int:
    value = FNV64_OFFSET_BASIS
    for byte in data:
        value ^= byte
        value = (value * FNV64_PRIME) & 0xFFFFFFFFFFFFFFFF
    return value


def import_bucket(dll: str, symbol: str) -> int:
    key = f"{dll}!{symbol}".lower().encode("utf-8", errors="replace")
    return fnv1a_64(key) % IMPORT_BUCKETS


@dataclass(frozen=True)
class PeSection:
    name: str
    virtual_size: int
    virtual_address: int
    raw_size: int
    raw_offset: int
    characteristics: int
    entropy: float


@dataclass(frozen=True)
class PeImport:
    dll: str
    symbols: tuple[str, ...]


@dataclass(frozen=True)
class PeSummary:
    is_pe: bool
    truncated: bool
    file_size: int
    overall_entropy: float
    machine: int | None = None
    timestamp: int | None = None
    subsystem: int | None = None
    image_base: int | None = None
    sections: tuple[PeSection, ...] = field(default_factory=tuple)
    imports: tuple[PeImport, ...] = field(default_factory=tuple)
    has_debug_dir: bool = False

    @property
    def num_sections(self) -> int:
        return len(self.sections)


class _Reader:
    """Bounds-checked little-endian reads; any miss sets the truncated flag."""

    def __init__(self, data: bytes):
        self.data = data
        self.truncated = False

    def _take(self, offset: int, size: int) -> bytes | None:
        if offset < 0 or size < 0 or offset + size > len(self.data):
            self.truncated = True
            return None
        return self.data[offset : offset + size]

    def u16(self, offset: int) -> int | None:
        raw = self._take(offset, 2)
        return None if raw is None else struct.unpack("<H", raw)[0]

    def u32(self, offset: int) -> int | None:
        raw = self._take(offset, 4)
        return None if raw is None else struct.unpack("<I", raw)[0]

    def u64(self, offset: int) -> int | None:
        raw = self._take(offset, 8)
        return None if raw is None else struct.unpack("<Q", raw)[0]

    def bytes_at(self, offset: int, size: int) -> bytes | None:
        return self._take(offset, size)

    def cstring(self, offset: int, limit: int = _MAX_NAME_LEN) -> str | None:
        if offset < 0 or offset >= len(self.data):
            self.truncated = True
            return None
        end = self.data.find(b"\0", offset, offset + limit)
        if end == -1:
            end = min(offset + limit, len(self.data))
        return self.data[offset:end].decode("latin-1")


def _rva_to_offset(rva: int, sections: list[PeSection], file_size: int) -> int | None:
    for sec in sections:
        span = max(sec.virtual_size, sec.raw_size)
        if sec.virtual_address <= rva < sec.virtual_address + span:
            return sec.raw_offset + (rva - sec.virtual_address)
    # Header region before the first mapped section.
    if rva < file_size and (not sections or rva < sections[0].virtual_address):
        return rva
    return None


def _parse_sections(reader: _Reader, offset: int, count: int) -> list[PeSection]:
    sections = []
    for i in range(count):
        base = offset + i * 40
        raw = reader.bytes_at(base, 40)
        if raw is None:
            break
        name = raw[0:8].rstrip(b"\0").decode("latin-1")
        virtual_size, virtual_address, raw_size, raw_offset = struct.unpack_from(
            "<IIII", raw, 8
        )
        characteristics = struct.unpack_from("<I", raw, 36)[0]
        content = reader.data[raw_offset : raw_offset + raw_size]
        sections.append(
            PeSection(
                name=name,
                virtual_size=virtual_size,
                virtual_address=virtual_address,
                raw_size=raw_size,
                raw_offset=raw_offset,
                characteristics=characteristics,
                entropy=byte_entropy(content),
            )
        )
    return sections


def _parse_imports(
    reader: _Reader, import_rva: int, sections: list[PeSection], thunk_size: int
) -> list[PeImport]:
    imports = []
    ordinal_flag = 1 << (thunk_size * 8 - 1)
    for i in range(_MAX_IMPORT_DESCRIPTORS):
        desc_rva = import_rva + i * 20
        desc_off = _rva_to_offset(desc_rva, sections, len(reader.data))
        if desc_off is None:
            reader.truncated = True
            break
        raw = reader.bytes_at(desc_off, 20)
        if raw is None:
            break
        original_first_thunk, _, _, name_rva, first_thunk = struct.unpack("<IIIII", raw)
        if original_first_thunk == 0 and name_rva == 0 and first_thunk == 0:
            break
        name_off = _rva_to_offset(name_rva, sections, len(reader.data))
        if name_off is None:
            reader.truncated = True
            continue
        dll = reader.cstring(name_off)
        if dll is None:
            continue
        thunk_rva = original_first_thunk or first_thunk
        symbols: list[str] = []
        for j in range(_MAX_THUNKS_PER_DLL):
            thunk_off = _rva_to_offset(
                thunk_rva + j * thunk_size, sections, len(reader.data)
            )
            if thunk_off is None:
                reader.truncated = True
                break
            entry = reader.u32(thunk_off) if thunk_size == 4 else reader.u64(thunk_off)
            if entry is None or entry == 0:
                break
            if entry & ordinal_flag:
                symbols.append(f"ordinal_{entry & 0xFFFF}")
                continue
            hint_off = _rva_to_offset(entry & 0x7FFFFFFF, sections, len(reader.data))
            if hint_off is None:
                reader.truncated = True
                continue
            symbol = reader.cstring(hint_off + 2)
            if symbol:
                symbols.append(symbol)
        imports.append(PeImport(dll=dll, symbols=tuple(symbols)))
    return imports


def parse_pe(data: bytes) -> PeSummary:
    """Total parser: returns a summary for any input, never raises."""
    file_size = len(data)
    overall = byte_entropy(data)

    if file_size < 2 or data[0:2] != b"MZ":
        return PeSummary(
            is_pe=False, truncated=False, file_size=file_size, overall_entropy=overall
        )

    reader = _Reader(data)
    e_lfanew = reader.u32(0x3C)
    signature = None if e_lfanew is None else reader.bytes_at(e_lfanew, 4)
    if signature != b"PE\0\0":
        return PeSummary(
            is_pe=False,
            truncated=reader.truncated,
            file_size=file_size,
            overall_entropy=overall,
        )

    coff = e_lfanew + 4
    machine = reader.u16(coff)
    num_sections = reader.u16(coff + 2)
    timestamp = reader.u32(coff + 4)
    opt_size = reader.u16(coff + 16)

    subsystem = None
    image_base = None
    import_rva = 0
    debug_rva = debug_size = 0
    thunk_size = 4

    opt_off = coff + 20
    magic = reader.u16(opt_off) if opt_size else None
    if magic == 0x10B:
        image_base = reader.u32(opt_off + 28)
        subsystem = reader.u16(opt_off + 68)
        n_dirs = reader.u32(opt_off + 92) or 0
        dirs_off = opt_off + 96
    elif magic == 0x20B:
        thunk_size = 8
        image_base = reader.u64(opt_off + 24)
        subsystem = reader.u16(opt_off + 68)
        n_dirs = reader.u32(opt_off + 108) or 0
        dirs_off = opt_off + 112
    else:
        n_dirs = 0
        dirs_off = opt_off

    if n_dirs > 1:
        import_rva = reader.u32(dirs_off + 8) or 0
    if n_dirs > 6:
        debug_rva = reader.u32(dirs_off + 48) or 0
        debug_size = reader.u32(dirs_off + 52) or 0

    sections = _parse_sections(reader, opt_off + opt_size, num_sections or 0)
    imports: list[PeImport] = []
    if import_rva:
        imports = _parse_imports(reader, import_rva, sections, thunk_size)

    return PeSummary(
        is_pe=True,
        truncated=reader.truncated,
        file_size=file_size,
        overall_entropy=overall,
        machine=machine,
        timestamp=timestamp,
        subsystem=subsystem,
        image_base=image_base,
        sections=tuple(sections),
        imports=tuple(imports),
        has_debug_dir=bool(debug_rva and debug_size),
    )


def _scalar_block(summary: PeSummary) -> list[float]:
    """The 16 scalar features, in fixed documented order."""
    entropies = [s.entropy for s in summary.sections]
    n_symbols = sum(len(imp.symbols) for imp in summary.imports)
    return [
        math.log1p(summary.file_size),
        summary.overall_entropy,
        1.0 if summary.is_pe else 0.0,
        1.0 if summary.truncated else 0.0,
        float(summary.num_sections),
        float(sum(entropies) / len(entropies)) if entropies else 0.0,
        float(max(entropies)) if entropies else 0.0,
        math.log1p(sum(s.virtual_size for s in summary.sections)),
        math.log1p(sum(s.raw_size for s in summary.sections)),
        float(sum(1 for s in summary.sections if s.characteristics & _SECTION_EXECUTE)),
        float(sum(1 for s in summary.sections if s.characteristics & _SECTION_WRITE)),
        math.log1p(len(summary.imports)),
        math.log1p(n_symbols),
        1.0 if summary.has_debug_dir else 0.0,
        float(summary.subsystem or 0),
        1.0 if summary.machine == 0x8664 else 0.0,
    ]


def extract_features(data: bytes) -> np.ndarray:
    """336-value feature vector; pure function of the input bytes."""
    vector = np.zeros(FEATURE_DIM, dtype=np.float64)

    if data:
        counts = np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=256)
        vector[0:256] = counts / len(data)

    summary = parse_pe(data)

    bucket_counts = np.zeros(IMPORT_BUCKETS, dtype=np.float64)
    total_symbols = 0
    for imp in summary.imports:
        for symbol in imp.symbols:
            bucket_counts[import_bucket(imp.dll, symbol)] += 1
            total_symbols += 1
    if total_symbols:
        vector[256:320] = bucket_counts / total_symbols

    vector[320:336] = _scalar_block(summary)
    return vector


def describe_static(data: bytes) -> str:
    """Human-readable static summary, used as prompt context.

    Deterministic formatting: same bytes always yield the same text.
    """
    summary = parse_pe(data)
    lines = [
        f"file_size_bytes: {summary.file_size}",
        f"overall_entropy: {summary.overall_entropy:.3f}",
        f"pe: {'yes' if summary.is_pe else 'no'}",
    ]
    if not summary.is_pe:
        return "\n".join(lines)
    lines.append(f"machine: 0x{summary.machine:04x}" if summary.machine is not None else "machine: unknown")
    lines.append(f"subsystem: {summary.subsystem}" if summary.subsystem is not None else "subsystem: unknown")
    if summary.truncated:
        lines.append("truncated: yes")
    lines.append(f"sections: {summary.num_sections}")
    for sec in summary.sections:
        lines.append(
            f"  {sec.name or '<unnamed>'} vsize={sec.virtual_size}"
            f" rsize={sec.raw_size} entropy={sec.entropy:.3f}"
            f" flags=0x{sec.characteristics:08x}"
        )
    n_symbols = sum(len(imp.symbols) for imp in summary.imports)
    lines.append(f"imports: {len(summary.imports)} dlls, {n_symbols} symbols")
    for imp in summary.imports:
        shown = ", ".join(imp.symbols[:12])
        more = f" (+{len(imp.symbols) - 12} more)" if len(imp.symbols) > 12 else ""
        lines.append(f"  {imp.dll}: {shown}{more}")
    lines.append(f"debug_dir: {'present' if summary.has_debug_dir else 'absent'}")
    return "\n".join(lines)
