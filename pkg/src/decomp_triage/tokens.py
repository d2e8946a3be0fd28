"""Character-ratio token estimation and context-window filtering.

Estimates are deliberately simple: tokens = ceil(chars / chars_per_token).
No real tokenizer is involved, which keeps the pipeline provider-agnostic;
the ratio is configurable per model profile for calibration. Oversized
samples are excluded outright rather than truncated or chunked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Union

from .decompiler import DecompiledUnit, DecompileStatus
from .errors import NotDecompiled


@dataclass(frozen=True)
class ModelProfile:
    """Context budget description for one target model."""

    name: str
    context_limit_tokens: int
    chars_per_token: float = 4.0
    reserved_output_tokens: int = 64

    def __post_init__(self) -> None:
        if self.context_limit_tokens <= 0:
            raise ValueError("context_limit_tokens must be positive")
        if self.chars_per_token <= 0:
            raise ValueError("chars_per_token must be positive")
        if self.reserved_output_tokens < 0:
            raise ValueError("reserved_output_tokens must be >= 0")
        if self.context_limit_tokens <= self.reserved_output_tokens:
            raise ValueError("context_limit_tokens must exceed reserved_output_tokens")

    @property
    def available_tokens(self) -> int:
        return self.context_limit_tokens - self.reserved_output_tokens


def estimate_tokens(text: str, profile: Union["ModelProfile", float] = 4.0) -> int:
    """Ceiling of len(text) / chars_per_token, computed exactly.

    Accepts either a ModelProfile or a bare ratio. Fraction arithmetic
    avoids float rounding at exact multiples: a 4000 character text at 4.0
    chars/token is exactly 1000 tokens, never 1001.
    """
    ratio = profile.chars_per_token if isinstance(profile, ModelProfile) else profile
    if ratio <= 0:
        raise ValueError("chars_per_token must be positive")
    if not text:
        return 0
    return math.ceil(Fraction(len(text)) / Fraction(ratio))


def _fits(estimated_tokens: int, overhead_tokens: int, profile: ModelProfile) -> bool:
    return estimated_tokens + overhead_tokens <= profile.available_tokens


def fits_context(
    unit: DecompiledUnit, prompt_overhead_tokens: int, profile: ModelProfile
) -> bool:
    """True when the unit's C text plus overhead fits the context window.

    The boundary is inclusive: a prompt landing exactly on the available
    budget (limit minus reserved output) is accepted.
    """
    if unit.status is not DecompileStatus.OK or unit.c_text is None:
        raise NotDecompiled(unit.sha256, unit.status.value)
    estimated = estimate_tokens(unit.c_text, profile)
    return _fits(estimated, prompt_overhead_tokens, profile)


@dataclass(frozen=True)
class TooLarge:
    """Excluded because the estimated prompt exceeds the usable window."""

    sha256: str
    estimated: int
    limit: int

    reason = "too_large"


@dataclass(frozen=True)
class NotDecompiledExclusion:
    """Excluded because decompilation never produced usable C text."""

    sha256: str
    status: DecompileStatus

    reason = "not_decompiled"


Exclusion = Union[TooLarge, NotDecompiledExclusion]


def filter_dataset(
    units: Iterable[DecompiledUnit],
    prompt_overhead_tokens: int,
    profile: ModelProfile,
) -> tuple[list[DecompiledUnit], list[Exclusion]]:
    """Partition decompiled units into usable and excluded.

    Every input lands in exactly one of the two lists, in input order.
    """
    usable: list[DecompiledUnit] = []
    excluded: list[Exclusion] = []
    for unit in units:
        if unit.status is not DecompileStatus.OK or unit.c_text is None:
            excluded.append(NotDecompiledExclusion(unit.sha256, unit.status))
            continue
        estimated = estimate_tokens(unit.c_text, profile)
        if _fits(estimated, prompt_overhead_tokens, profile):
            usable.append(unit)
        else:
            excluded.append(TooLarge(unit.sha256, estimated, profile.available_tokens))
    return usable, excluded
