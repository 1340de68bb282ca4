"""Zero-shot 3D lesion segmentation via attribute-aligned mask tokens."""

from .attributes import (
    ASPECTS,
    BACKGROUND_ID,
    AttributeSchema,
    EmbeddingBank,
    HashedSubwordProvider,
    KnowledgeTable,
    default_knowledge_table,
    default_schema,
    description_text,
    embed_descriptions,
    load_bank,
    load_knowledge_table,
    load_schema,
    query_disease,
    save_bank,
)
from .errors import (
    BoundsError,
    ConfigError,
    DivergenceError,
    EmptyMaskError,
    FormatError,
    HashMismatchError,
    MaleniaError,
    NumericalError,
    OverlapError,
    ProviderError,
    SchemaError,
    ShapeError,
    SizeError,
    UnknownValueError,
)
from .phantom import (
    LESION_CLASSES,
    SEEN_CLASSES,
    UNSEEN_CLASSES,
    LesionSpec,
    Sample,
    Volume,
    generate_dataset,
    generate_phantom,
    read_manifest,
    read_volume,
    sample_lesion_spec,
    split_dataset,
    write_manifest,
    write_volume,
)
from .backbone import Backbone, FeaturePyramid
from .maskdecoder import (
    Assignment,
    DecoderBlock,
    bipartite_match,
    mask_proposals,
    matching_costs,
    upsample_logits,
)
from .alignment import (
    PairSets,
    build_pairs,
    deep_dice_loss,
    mp_nce,
    multiscale_sim_loss,
    similarity,
    soft_dice_loss,
)
from .cmki import (
    AttributeAggregator,
    EnsembleHead,
    FusionModule,
    PredictionBundle,
    ProjectionHeads,
    ensemble,
    predict_masks,
    seg_loss,
    total_loss,
)
from .metrics import MetricReport, dsc, nsd, pair_lesions
from .model import MaleniaModel
from .pipeline import (
    Config,
    InferenceResult,
    TrainResult,
    evaluate,
    export_bank,
    infer,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
