"""Classification prompt assembly from the golden template.

The template ships as package data and is covered by a pinned SHA-256 so
accidental edits fail loudly: classification quality is sensitive to exact
wording, so the text is change-controlled rather than built from parts.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from importlib import resources

from .decompiler import DecompiledUnit, DecompileStatus
from .errors import NotDecompiled, TriageError
from .tokens import ModelProfile, estimate_tokens

TEMPLATE_RESOURCE = "classify_v1.txt"

# Pinned digest of prompts/classify_v1.txt. Any template change must update
# this constant deliberately.
TEMPLATE_SHA256 = "2d1b9019e3c7ac2ef128760364707f2ae3a2202f090f873d749eb5d5771f02bf"

# Static analysis context precedes the code: a reader does better seeing
# file facts before a multi-megabyte code listing.
STATIC_HEADER = "\n\n# Static Analysis\n"
FILE_HEADER = "\n\n# File\n"


class TemplateIntegrityError(TriageError):
    pass


def load_template(verify: bool = True) -> str:
    text = (
        resources.files("decomp_triage.prompts")
        .joinpath(TEMPLATE_RESOURCE)
        .read_text(encoding="utf-8")
    )
    if verify:
        digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
        if digest != TEMPLATE_SHA256:
            raise TemplateIntegrityError(
                f"template digest {digest} does not match pinned {TEMPLATE_SHA256}"
            )
    return text


@dataclass(frozen=True)
class PromptPayload:
    text: str
    template_hash: str
    estimated_tokens: int
    sha256: str
    includes_static_context: bool


def render_prompt(
    unit: DecompiledUnit,
    static_context: str | None = None,
    profile: ModelProfile | None = None,
    *,
    template: str | None = None,
) -> PromptPayload:
    """Build the classification prompt for one decompiled sample.

    Layout is fixed: template, then the optional static analysis block,
    then the decompiled C under a file header. Token estimation uses the
    given profile's ratio (default 4.0 chars/token when none is given).
    """
    if unit.status is not DecompileStatus.OK or unit.c_text is None:
        raise NotDecompiled(unit.sha256, unit.status.value)
    if template is None:
        template = load_template()
    parts = [template]
    if static_context is not None:
        parts.append(STATIC_HEADER)
        parts.append(static_context)
    parts.append(FILE_HEADER)
    parts.append(unit.c_text)
    text = "".join(parts)
    return PromptPayload(
        text=text,
        template_hash=hashlib.sha256(template.encode("utf-8")).hexdigest(),
        estimated_tokens=estimate_tokens(text, profile if profile else 4.0),
        sha256=unit.sha256,
        includes_static_context=static_context is not None,
    )


def overhead_text(static_context: str | None = None, template: str | None = None) -> str:
    """Everything in a rendered prompt except the C text.

    Token-estimating this separately lets filtering budget for the fixed
    parts before any per-sample code is considered.
    """
    if template is None:
        template = load_template()
    parts = [template]
    if static_context is not None:
        parts.append(STATIC_HEADER)
        parts.append(static_context)
    parts.append(FILE_HEADER)
    return "".join(parts)
