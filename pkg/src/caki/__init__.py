"""Class-specific prompt learning with a key-value prompt bank and
training-free query-key matching that refines a coarse classifier.

The public surface re-exports the main types and operations of each layer:
numerics kernels, encoder backends, prompt training, the prompt bank,
query-key matching inference, and the evaluation harness.
"""

from .bank import (
    BankEntry,
    PromptBank,
    bank_lookup,
    build_bank,
    crc32c,
    load_bank,
    save_bank,
)
from .config import (
    PipelineConfig,
    SplitConfig,
    default_pipeline_config,
    load_pipeline_config,
    parse_pipeline_config,
)
from .encoder import (
    ClassCatalog,
    EncoderFingerprint,
    SyntheticWorldSpec,
    fingerprints_compatible,
    make_synthetic_world,
    template_prompt,
)
from .errors import (
    CakiError,
    ConfigError,
    DegenerateInputError,
    EmptyBankError,
    FingerprintMismatchError,
    FormatError,
    NotFoundError,
    UnsupportedOperationError,
)
from .harness import (
    ExperimentResult,
    Metrics,
    Split,
    harmonic_mean,
    make_offline_split,
    make_split,
    run_experiment,
    run_seeded_synthetic,
    summarize_hm,
    sweep,
    train_bank_for_split,
    write_results_csv,
)
from .numerics import AdamWHyper, AdamWState, adamw_step, cosine, cross_entropy, softmax
from .offline import load_offline_features, write_feature_file
from .prompt_learning import (
    FewShotDataset,
    TrainConfig,
    TrainReport,
    class_probabilities,
    prompt_loss_and_grad,
    train_class_prompt,
    train_shared_prompt,
)
from .qkpm import (
    MatchResult,
    PipelineClassifier,
    Prediction,
    QkpmConfig,
    classify,
    coarse_predict,
    fine_ensemble,
    match_topk,
    refine,
)

__version__ = "0.1.0"
