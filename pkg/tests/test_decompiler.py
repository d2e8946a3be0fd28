import json

import pytest

from decomp_triage.decompiler import (
    FAILURE_MARKER_PREFIX,
    FUNCTION_MARKER_PREFIX,
    MOCK_EXPANSION_FACTOR,
    DecompileStatus,
    DecompilerConfig,
    DecompilerDriver,
    DecompilerError,
    GhidraBackend,
    GhidraNotFound,
    MockBackend,
    count_functions,
    make_driver,
    synthesize_c,
)
from decomp_triage.store import DatasetSplit, Label, SampleSource


def _ingest(store, tmp_path, name: str, data: bytes):
    path = tmp_path / name
    path.write_bytes(data)
    return store.ingest_sample(
        path, Label.BENIGN, None, SampleSource.SYNTHETIC_FIXTURE, DatasetSplit.CUSTOM
    )


def test_synthesize_c_is_deterministic():
    data = b"\x4d\x5a" + bytes(range(200))
    assert synthesize_c(data) == synthesize_c(data)
    assert synthesize_c(data) != synthesize_c(data + b"\x00")


def test_synthesize_c_tracks_expansion_factor():
    data = bytes((i * 37) % 251 for i in range(50_000)) * 4  # 200 KB
    text = synthesize_c(data)
    target = len(data) * MOCK_EXPANSION_FACTOR
    assert 0.8 * target <= len(text) <= 1.3 * target


def test_synthesize_c_structure():
    data = b"sample bytes for structure check"
    text = synthesize_c(data)
    import hashlib

    digest = hashlib.sha256(data).digest()
    expected_funcs = 1 + digest[0] % 4
    assert count_functions(text) == expected_funcs
    assert "undefined" in text
    markers = [
        line for line in text.splitlines() if line.startswith(FUNCTION_MARKER_PREFIX)
    ]
    for marker in markers:
        name_part = marker[len(FUNCTION_MARKER_PREFIX):]
        name, _, address = name_part.partition(" @ ")
        assert name.startswith("FUN_")
        assert int(address, 16) >= 0x00401000


def test_count_functions_ignores_failure_markers():
    text = (
        f"{FUNCTION_MARKER_PREFIX}FUN_00401000 @ 00401000\n"
        "int FUN_00401000(void) { return 0; }\n"
        f"{FAILURE_MARKER_PREFIX}FUN_00401080 @ 00401080 : timeout\n"
    )
    assert count_functions(text) == 1


def test_driver_ok_path_writes_cache(store, tmp_path):
    record = _ingest(store, tmp_path, "a.exe", b"binary A contents")
    driver = DecompilerDriver(tmp_path / "cache", MockBackend())
    unit = driver.decompile(store, record)
    assert unit.status is DecompileStatus.OK
    assert unit.sha256 == record.sha256
    assert unit.function_count >= 1
    assert unit.tool_version == "mock-1"
    assert unit.duration_ms >= 0

    c_path = tmp_path / "cache" / f"{record.sha256}.c"
    meta_path = tmp_path / "cache" / f"{record.sha256}.meta"
    assert c_path.read_text(encoding="utf-8") == unit.c_text
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    assert meta["status"] == "Ok"
    assert meta["function_count"] == unit.function_count


def test_driver_hits_cache_without_recalling_backend(store, tmp_path):
    record = _ingest(store, tmp_path, "a.exe", b"binary A contents")
    backend = MockBackend()
    driver = DecompilerDriver(tmp_path / "cache", backend)
    first = driver.decompile(store, record)
    second = driver.decompile(store, record)
    assert backend.calls == 1
    assert second == first


def test_driver_failure_statuses_cached_without_c_file(store, tmp_path):
    modes = {"timeout": DecompileStatus.TIMEOUT, "error": DecompileStatus.TOOL_ERROR,
             "empty": DecompileStatus.EMPTY}
    for mode, expected in modes.items():
        record = _ingest(store, tmp_path, f"{mode}.exe", f"payload {mode}".encode())
        backend = MockBackend(overrides={record.sha256: mode})
        driver = DecompilerDriver(tmp_path / f"cache_{mode}", backend)
        unit = driver.decompile(store, record)
        assert unit.status is expected
        assert unit.c_text is None
        assert unit.function_count == 0
        assert not (tmp_path / f"cache_{mode}" / f"{record.sha256}.c").exists()
        # failure result is served from cache on the next call
        assert driver.decompile(store, record) == unit
        assert backend.calls == 1


def test_corrupt_meta_is_a_cache_miss(store, tmp_path):
    record = _ingest(store, tmp_path, "a.exe", b"binary A contents")
    backend = MockBackend()
    driver = DecompilerDriver(tmp_path / "cache", backend)
    driver.decompile(store, record)
    (tmp_path / "cache" / f"{record.sha256}.meta").write_text("{oops", encoding="utf-8")
    unit = driver.decompile(store, record)
    assert unit.status is DecompileStatus.OK
    assert backend.calls == 2


def test_missing_c_body_is_a_cache_miss(store, tmp_path):
    record = _ingest(store, tmp_path, "a.exe", b"binary A contents")
    backend = MockBackend()
    driver = DecompilerDriver(tmp_path / "cache", backend)
    driver.decompile(store, record)
    (tmp_path / "cache" / f"{record.sha256}.c").unlink()
    unit = driver.decompile(store, record)
    assert unit.status is DecompileStatus.OK
    assert backend.calls == 2


def test_batch_preserves_input_order(store, tmp_path):
    records = [
        _ingest(store, tmp_path, f"s{i}.exe", f"sample {i}".encode()) for i in range(5)
    ]
    driver = DecompilerDriver(tmp_path / "cache", MockBackend())
    units = driver.decompile_batch(store, records, max_parallel=3)
    assert [u.sha256 for u in units] == [r.sha256 for r in records]


def test_batch_runs_in_parallel(store, tmp_path):
    records = [
        _ingest(store, tmp_path, f"s{i}.exe", f"sample {i}".encode()) for i in range(4)
    ]
    backend = MockBackend(sleep_s=0.05)
    driver = DecompilerDriver(tmp_path / "cache", backend)
    driver.decompile_batch(store, records, max_parallel=4)
    assert backend.max_observed_parallel >= 2


def test_batch_serial_when_max_parallel_one(store, tmp_path):
    records = [
        _ingest(store, tmp_path, f"s{i}.exe", f"sample {i}".encode()) for i in range(3)
    ]
    backend = MockBackend(sleep_s=0.01)
    driver = DecompilerDriver(tmp_path / "cache", backend)
    driver.decompile_batch(store, records, max_parallel=1)
    assert backend.max_observed_parallel == 1


def test_mock_sleep_beyond_timeout_raises_timeout(store, tmp_path):
    record = _ingest(store, tmp_path, "slow.exe", b"slow sample")
    backend = MockBackend(sleep_s=10.0)
    driver = DecompilerDriver(tmp_path / "cache", backend)
    unit = driver.decompile(store, record, timeout_s=0.1)
    assert unit.status is DecompileStatus.TIMEOUT


def _fake_ghidra(tmp_path, version: str | None = "11.2"):
    home = tmp_path / "ghidra"
    (home / "support").mkdir(parents=True)
    (home / "support" / "analyzeHeadless").write_text("#!/bin/sh\n")
    if version is not None:
        (home / "Ghidra").mkdir()
        (home / "Ghidra" / "application.properties").write_text(
            f"application.name=Ghidra\napplication.version={version}\n"
        )
    return home


def test_ghidra_backend_command_line(tmp_path):
    home = _fake_ghidra(tmp_path)
    config = DecompilerConfig(
        ghidra_home=home,
        project_dir=tmp_path / "proj",
        script_dir=tmp_path / "scripts",
    )
    backend = GhidraBackend(config)
    cmd = backend.command(tmp_path / "in.exe", tmp_path / "out.c", "proj1")
    assert cmd == [
        str(home / "support" / "analyzeHeadless"),
        str(tmp_path / "proj"),
        "proj1",
        "-import", str(tmp_path / "in.exe"),
        "-overwrite",
        "-scriptPath", str(tmp_path / "scripts"),
        "-postScript", "ExportDecompiledC.java", str(tmp_path / "out.c"),
        "-deleteProject",
    ]


def test_ghidra_backend_noanalysis_flag(tmp_path):
    home = _fake_ghidra(tmp_path)
    config = DecompilerConfig(
        ghidra_home=home, project_dir=tmp_path / "proj", analysis_enabled=False
    )
    cmd = GhidraBackend(config).command(tmp_path / "in.exe", tmp_path / "out.c", "p")
    assert cmd[-1] == "-noanalysis"
    assert "-scriptPath" not in cmd


def test_ghidra_backend_reads_tool_version(tmp_path):
    home = _fake_ghidra(tmp_path, version="11.2")
    config = DecompilerConfig(ghidra_home=home, project_dir=tmp_path / "proj")
    assert GhidraBackend(config).tool_version() == "ghidra-11.2"


def test_ghidra_backend_unknown_version(tmp_path):
    home = _fake_ghidra(tmp_path, version=None)
    config = DecompilerConfig(ghidra_home=home, project_dir=tmp_path / "proj")
    assert GhidraBackend(config).tool_version() == "ghidra-unknown"


def test_ghidra_backend_requires_headless_binary(tmp_path):
    config = DecompilerConfig(
        ghidra_home=tmp_path / "nowhere", project_dir=tmp_path / "proj"
    )
    with pytest.raises(GhidraNotFound):
        GhidraBackend(config)


def test_make_driver_mock_and_config_validation(tmp_path):
    driver = make_driver(tmp_path / "cache", mock=True)
    assert isinstance(driver.backend, MockBackend)
    with pytest.raises(DecompilerError):
        make_driver(tmp_path / "cache")
