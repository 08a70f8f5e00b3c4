"""Cross-modal image identification via superpixel graphs.

Images become superpixel graphs (SLIC segmentation, KNN adjacency), a
GNN encoder embeds each graph's nodes, and a cross-attention stage with
entropic optimal-transport fusion aligns the two modalities before
pooled embeddings are compared for retrieval.
"""

from .align import (
    AlignParams,
    AlignResult,
    OTConfig,
    TransportPlan,
    TransportProblem,
    align_pair,
    sinkhorn,
    uniform_marginals,
)
from .encoders import BACKBONES, EncoderConfig, EncoderParams, encode
from .estimators import CrossModalMatcher, SuperpixelGraphBuilder
from .exceptions import (
    CheckpointError,
    GraphMatchError,
    ImageDecodeError,
    MetricError,
    MiningError,
    StoreParseError,
    TrainingError,
)
from .graphs import ModalGraph, graph_from_image, knn_graph, read_graph_store, write_graph_store
from .imaging import ImageRecord, SegmentationResult, extract_contours, load_image, slic_segment
from .retrieval import MetricsReport, ScoreMatrix, evaluate, score_independent, score_paired
from .training import (
    Model,
    ModelParams,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    split_dataset,
    train_loop,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # imaging
    "ImageRecord",
    "SegmentationResult",
    "load_image",
    "extract_contours",
    "slic_segment",
    # graphs
    "ModalGraph",
    "graph_from_image",
    "knn_graph",
    "read_graph_store",
    "write_graph_store",
    # encoders
    "BACKBONES",
    "EncoderConfig",
    "EncoderParams",
    "encode",
    # alignment
    "OTConfig",
    "TransportProblem",
    "TransportPlan",
    "AlignParams",
    "AlignResult",
    "uniform_marginals",
    "sinkhorn",
    "align_pair",
    # training
    "TrainConfig",
    "ModelParams",
    "Model",
    "split_dataset",
    "train_loop",
    "save_checkpoint",
    "load_checkpoint",
    # retrieval
    "ScoreMatrix",
    "MetricsReport",
    "score_paired",
    "score_independent",
    "evaluate",
    # estimators
    "SuperpixelGraphBuilder",
    "CrossModalMatcher",
    # errors
    "GraphMatchError",
    "ImageDecodeError",
    "StoreParseError",
    "CheckpointError",
    "TrainingError",
    "MiningError",
    "MetricError",
]
