"""Decompile-and-classify malware triage pipeline.

Binaries are ingested into a content-addressed quarantine store,
decompiled to C with Ghidra's headless analyzer (or an offline mock),
filtered against model context budgets, and classified by an LLM behind a
fixed prompt; a from-scratch gradient-boosted tree model over static PE
features provides the non-LLM baseline.
"""

__version__ = "0.1.0"

from .store import (  # noqa: F401
    DatasetManifest,
    DatasetSplit,
    Label,
    SampleRecord,
    SampleSource,
    SampleStore,
    compute_sha256,
)
from .decompiler import (  # noqa: F401
    DecompiledUnit,
    DecompileStatus,
    DecompilerConfig,
    DecompilerDriver,
    GhidraBackend,
    MockBackend,
)
from .tokens import ModelProfile, estimate_tokens, filter_dataset, fits_context  # noqa: F401
from .prompt import PromptPayload, load_template, render_prompt, TEMPLATE_SHA256  # noqa: F401
from .llm import (  # noqa: F401
    ClassifyFailure,
    HttpTransport,
    LlmClient,
    MockTransport,
    ParsePath,
    ProviderProfile,
    Verdict,
    parse_verdict,
)
from .pe import byte_entropy, describe_static, extract_features, parse_pe  # noqa: F401
from .gbdt import GbdtModel, GbdtParams, load_model, predict, save_model, train_gbdt  # noqa: F401
from .evaluate import (  # noqa: F401
    ConfusionMatrix,
    MetricsReport,
    accumulate,
    compute_metrics,
    render_report,
    run_experiment,
)
from .finetune import export_finetune_dataset, select_finetune_subset  # noqa: F401
from .config import PipelineConfig, load_config  # noqa: F401
