"""Query-driven task-oriented dialogue over structured knowledge.

Three-stage pipeline per user turn: generate a standalone retrieval
query from the dialogue context, rank knowledge records against it, and
generate the system response grounded in the top-n records. Evaluation,
dataset tooling, a FastAPI service, and a CLI sit on top.
"""

from .backends import (
    GenerationRequest,
    GenerationResponse,
    RemoteBackend,
    RuleBackend,
    ScriptedBackend,
    make_backend,
)
from .data import (
    AnnotatedDialogue,
    DatasetSplit,
    TurnRecord,
    build_crossdomain,
    dataset_stats,
    fewshot_split,
    load_dataset,
    save_dataset,
)
from .errors import (
    BackendError,
    CapacityError,
    ContractViolation,
    QtodError,
    SchemaError,
    ServerError,
    TransportError,
    ValidationError,
)
from .evaluation import (
    EvalReport,
    bleu,
    entity_f1,
    evaluate_rows,
    extract_entities,
    recall_at_n,
    run_scaling_benchmark,
    run_split_eval,
    run_topn_ablation,
)
from .kb import (
    KnowledgeBase,
    KnowledgeRecord,
    canonicalize,
    expand_kb,
    linearize_record,
    load_kb,
    merge_to_dataset_level,
    save_kb,
    union_lexicon,
)
from .pipeline import (
    DialogueContext,
    DialogueTurn,
    Query,
    Session,
    TurnResult,
    export_training_pairs,
    replay_dialogue,
    run_turn,
    serialize_context,
)
from .prompts import NOTHING_TOKEN, QUERY_PREFIX, RESPONSE_PREFIX
from .retriever import (
    Bm25Index,
    DenseIndex,
    HashingEmbedder,
    RetrievalResult,
    bm25_score,
    build_index,
    retrieve,
    tokenize,
)

__version__ = "0.1.0"

__all__ = [
    "AnnotatedDialogue",
    "BackendError",
    "Bm25Index",
    "CapacityError",
    "ContractViolation",
    "DatasetSplit",
    "DenseIndex",
    "DialogueContext",
    "DialogueTurn",
    "EvalReport",
    "GenerationRequest",
    "GenerationResponse",
    "HashingEmbedder",
    "KnowledgeBase",
    "KnowledgeRecord",
    "NOTHING_TOKEN",
    "QUERY_PREFIX",
    "Query",
    "QtodError",
    "RESPONSE_PREFIX",
    "RemoteBackend",
    "RetrievalResult",
    "RuleBackend",
    "SchemaError",
    "ScriptedBackend",
    "ServerError",
    "Session",
    "TransportError",
    "TurnRecord",
    "TurnResult",
    "ValidationError",
    "bleu",
    "bm25_score",
    "build_crossdomain",
    "build_index",
    "canonicalize",
    "dataset_stats",
    "entity_f1",
    "evaluate_rows",
    "expand_kb",
    "export_training_pairs",
    "extract_entities",
    "fewshot_split",
    "linearize_record",
    "load_dataset",
    "load_kb",
    "make_backend",
    "merge_to_dataset_level",
    "recall_at_n",
    "replay_dialogue",
    "retrieve",
    "run_scaling_benchmark",
    "run_split_eval",
    "run_topn_ablation",
    "run_turn",
    "save_dataset",
    "save_kb",
    "serialize_context",
    "tokenize",
    "union_lexicon",
]
