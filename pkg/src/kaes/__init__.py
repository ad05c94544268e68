"""Kernel-based automated essay scoring.

Essays are compared with a blended character n-gram intersection kernel and
with intersection kernels over super-word-embedding histograms; the two
similarity matrices are fused by summation and regressed with nu-SVR in the
dual.  Evaluation follows repeated cross-validation (in-domain) and
source-to-target transfer (cross-domain) protocols scored with quadratic
weighted kappa.
"""

from .boswe import (
    BosweHistogram,
    Codebook,
    assign,
    boswe_kernel_matrix,
    build_histogram,
    fit_codebook,
    hik_pair,
    load_codebook,
    mean_std_doc_embedding,
    save_codebook,
)
from .corpus import (
    ASAP_SCORE_RANGES,
    Essay,
    FoldPlan,
    ScoreRange,
    TransferPlan,
    make_folds,
    make_transfer_split,
    parse_asap_tsv,
    scale_score,
    transfer_split_manifest,
    unscale_score,
)
from .embeddings import (
    EmbeddingModel,
    load_word2vec_binary,
    lookup,
    save_word2vec_binary,
    tokenize,
)
from .errors import (
    BinaryFormatError,
    KaesError,
    KernelMismatchError,
    ScoreValidationError,
    TsvParseError,
)
from .fusion import concat_features, linear_gram, sum_kernels
from .harness import (
    ExperimentConfig,
    ResultCell,
    ResultTable,
    emit_report,
    run_cross_domain,
    run_in_domain,
    table_from_csv,
)
from .metrics import QwkReport, average_qwk, qwk
from .string_kernel import (
    FeatureMatrix,
    KernelMatrix,
    NGramProfile,
    extract_ngram_counts,
    hisk_pair,
    kernel_matrix,
    load_kernel_matrix,
    normalize_kernel,
    normalize_text,
    save_kernel_matrix,
)
from .svr import (
    SvrConfig,
    SvrModel,
    dual_objective,
    load_svr_model,
    predict,
    save_svr_model,
    train_nu_svr,
)

__version__ = "0.1.0"
