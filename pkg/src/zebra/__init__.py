"""Retrieval-augmented commonsense question answering.

The pipeline in three moves: retrieve the knowledge-base examples most
similar to a question, prompt a language model with those examples to
write question-specific explanations, then answer by picking the choice
label with the highest first-token log-probability.
"""

from .contrastive import (
    AdapterWeights,
    AugmentationBank,
    TrainConfig,
    TrainResult,
    TrainingBatch,
    TrainingDivergedError,
    assemble_batch,
    augment_passages,
    build_augmentation_bank,
    init_adapter,
    load_adapter,
    mine_positives,
    nce_grads_from_sims,
    nce_loss,
    nce_loss_from_sims,
    save_adapter,
    train_adapter,
)
from .evaluation import EvalAborted, EvalConfig, EvalReport, evaluate, sweep_k, write_report
from .gateway import (
    LABEL_ABSENT_LOGPROB,
    CachingGateway,
    ChatMessage,
    ChatRequest,
    ChatResponse,
    Gateway,
    GatewayError,
    HttpGateway,
    LogprobsUnsupportedError,
    MockGateway,
    MockRule,
    ResponseCache,
    TransportError,
    configure_mock,
    render_messages,
    request_key,
)
from .kb_builder import KbBuildParams, build_silver_prompt, generate_kb, parse_silver
from .kb_core import (
    Choice,
    Example,
    ExampleSet,
    KbError,
    QueryView,
    ValidationReport,
    label_for_index,
    load_examples,
    make_choices,
    serialize_query,
    validate_example,
    write_examples,
)
from .knowledge import (
    KgPromptConfig,
    KnowledgeGeneration,
    KnowledgeList,
    build_kg_prompt,
    generate_knowledge,
    parse_knowledge,
)
from .reasoning import (
    AnswerPrediction,
    ChoiceScores,
    ReasoningConfig,
    build_ir_prompt,
    build_qa_prompt,
    prediction_record,
    score_choices,
    select_answer,
)
from .retrieval import (
    EmbeddingProvider,
    ExampleIndex,
    HashingProvider,
    RetrievalHit,
    build_index,
    embed_texts,
    load_embedding_map,
    load_embeddings,
    search,
    write_embeddings,
)

__version__ = "0.1.0"
