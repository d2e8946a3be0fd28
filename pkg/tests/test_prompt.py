import hashlib

import pytest

from decomp_triage.decompiler import DecompiledUnit, DecompileStatus
from decomp_triage.errors import NotDecompiled
from decomp_triage.prompt import (
    FILE_HEADER,
    STATIC_HEADER,
    TEMPLATE_SHA256,
    PromptPayload,
    TemplateIntegrityError,
    load_template,
    overhead_text,
    render_prompt,
)
from decomp_triage.tokens import ModelProfile, estimate_tokens

SHA = "f" * 64


def _unit(c_text: str | None = "int main(void) { return 0; }\n",
          status=DecompileStatus.OK) -> DecompiledUnit:
    return DecompiledUnit(
        sha256=SHA, status=status, c_text=c_text,
        function_count=1, tool_version="mock-1", duration_ms=3,
    )


def test_template_matches_pinned_hash():
    text = load_template()
    assert hashlib.sha256(text.encode("utf-8")).hexdigest() == TEMPLATE_SHA256


def test_template_shape():
    text = load_template()
    assert not text.endswith("\n")
    assert len(text.splitlines()) == 10
    assert text.startswith("You are an expert in cybersecurity")
    assert '{"Malware": <True/False>}' in text


def test_load_template_unverified_skips_check(monkeypatch):
    import decomp_triage.prompt as prompt_mod

    monkeypatch.setattr(prompt_mod, "TEMPLATE_SHA256", "0" * 64)
    with pytest.raises(TemplateIntegrityError):
        load_template()
    assert load_template(verify=False)


def test_render_layout_without_context():
    template = load_template()
    unit = _unit()
    payload = render_prompt(unit)
    assert payload.text == template + FILE_HEADER + unit.c_text
    assert payload.template_hash == TEMPLATE_SHA256
    assert payload.sha256 == SHA
    assert payload.includes_static_context is False
    assert payload.estimated_tokens == estimate_tokens(payload.text, 4.0)


def test_render_layout_with_context():
    template = load_template()
    unit = _unit()
    payload = render_prompt(unit, static_context="size: 1 KB")
    assert payload.text == (
        template + STATIC_HEADER + "size: 1 KB" + FILE_HEADER + unit.c_text
    )
    assert payload.includes_static_context is True


def test_render_uses_profile_ratio():
    profile = ModelProfile("m", 100_000, chars_per_token=2.0)
    payload = render_prompt(_unit(), profile=profile)
    assert payload.estimated_tokens == estimate_tokens(payload.text, 2.0)


def test_render_rejects_undecompiled():
    with pytest.raises(NotDecompiled):
        render_prompt(_unit(c_text=None, status=DecompileStatus.TIMEOUT))


def test_render_with_explicit_template_hashes_it():
    payload = render_prompt(_unit(), template="CUSTOM TEMPLATE")
    assert payload.template_hash == hashlib.sha256(b"CUSTOM TEMPLATE").hexdigest()
    assert payload.text.startswith("CUSTOM TEMPLATE")


def test_overhead_text_is_prompt_minus_code():
    unit = _unit()
    for ctx in (None, "imports: kernel32.dll"):
        payload = render_prompt(unit, static_context=ctx)
        overhead = overhead_text(static_context=ctx)
        assert payload.text == overhead + unit.c_text
        assert overhead.endswith(FILE_HEADER)


def test_payload_is_frozen():
    payload = render_prompt(_unit())
    assert isinstance(payload, PromptPayload)
    with pytest.raises(AttributeError):
        payload.text = "nope"
