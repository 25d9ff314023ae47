"""Multi-pivot ensemble decoding engine and MT evaluation toolkit."""

from .combiners import (
    combine,
    combine_direct,
    combine_logavg,
    combine_maxens,
    combine_multiavg,
)
from .core import (
    CombinedStep,
    Combiner,
    DecodeParams,
    Hypothesis,
    LengthNorm,
    SentenceRecord,
    SourceSet,
    StepDistribution,
    TokenSeq,
    Vocab,
    read_sentences,
    recompute_score,
    write_sentences,
)
from .decoder import (
    DecodeError,
    DecodeResult,
    DecodeTrace,
    Scorer,
    StepQuery,
    beam_search,
    replay_trace,
    score_fixed_sequence,
)
from .metrics import (
    BootstrapResult,
    ChrfParams,
    EvalReport,
    SystemScores,
    TngParams,
    bleu,
    chrf,
    compute_marks,
    hallucination_rate_chrf,
    paired_bootstrap,
    render_report_table,
    tng_flag,
    tng_rate,
)
from .modelwire import (
    BackendError,
    EndpointConfig,
    ProtocolError,
    SessionMeta,
    WireClient,
    WireScorer,
    fetch_step_batch,
    handshake,
    verify_endpoint,
)
from .pipeline import (
    DEFAULT_PIVOTS,
    CorpusRunResult,
    PipelineError,
    RunConfig,
    produce_pivots,
    run_corpus,
    translate_sentence,
)
from .synthharness import (
    AttractorConfig,
    ChannelModel,
    CipherLanguage,
    ConfusionSpec,
    ExperimentConfig,
    SynthTask,
    SyntheticScorer,
    build_task,
    channel_step,
    load_experiment_config,
    run_experiment,
)

__version__ = "0.1.0"
