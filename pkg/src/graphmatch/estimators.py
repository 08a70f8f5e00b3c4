"""Scikit-learn style wrappers around the graph builder and matcher.

These follow the estimator contract (bare __init__, get_params/set_params,
fit returning self) so they compose with sklearn tooling; the heavy
lifting stays in the functional modules.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .encoders import EncoderConfig
from .graphs import ModalGraph, graph_from_image
from .imaging import ImageRecord
from .retrieval import score_paired
from .training import Model, TrainConfig, train_loop

__all__ = ["SuperpixelGraphBuilder", "CrossModalMatcher"]


def _check_images(X) -> list[ImageRecord]:
    items = list(X)
    for i, item in enumerate(items):
        if not isinstance(item, ImageRecord):
            raise TypeError(f"X[{i}] must be an ImageRecord, got {type(item).__name__}")
    return items


def _check_graphs(X) -> list[ModalGraph]:
    items = list(X)
    for i, item in enumerate(items):
        if not isinstance(item, ModalGraph):
            raise TypeError(f"X[{i}] must be a ModalGraph, got {type(item).__name__}")
    return items


class SuperpixelGraphBuilder(TransformerMixin, BaseEstimator):
    """Transform ImageRecords into superpixel ModalGraphs.

    Stateless apart from parameter validation; fit exists to satisfy the
    transformer contract.
    """

    def __init__(
        self,
        n_segments: int = 300,
        compactness: float = 10.0,
        slic_iterations: int = 10,
        knn_k: int = 6,
        contour_blend: float = 0.0,
    ):
        self.n_segments = n_segments
        self.compactness = compactness
        self.slic_iterations = slic_iterations
        self.knn_k = knn_k
        self.contour_blend = contour_blend

    def fit(self, X, y=None):
        if self.n_segments < 1:
            raise ValueError(f"n_segments must be >= 1, got {self.n_segments}")
        if self.knn_k < 1:
            raise ValueError(f"knn_k must be >= 1, got {self.knn_k}")
        if not 0.0 <= self.contour_blend <= 1.0:
            raise ValueError(f"contour_blend must lie in [0, 1], got {self.contour_blend}")
        _check_images(X)
        self.n_features_in_ = 1
        return self

    def transform(self, X) -> list[ModalGraph]:
        check_is_fitted(self)
        return [
            graph_from_image(
                img,
                n_segments=self.n_segments,
                compactness=self.compactness,
                slic_iterations=self.slic_iterations,
                knn_k=self.knn_k,
                contour_blend=self.contour_blend,
            )
            for img in _check_images(X)
        ]


class CrossModalMatcher(BaseEstimator):
    """Train the full pipeline on ModalGraphs and rank faces for queries.

    fit consumes a mixed list of face and query-modality graphs (labels
    come from each graph's subject_id, so y is ignored); predict returns
    the top-1 gallery subject per query graph using paired scoring
    against the faces seen at fit time.
    """

    def __init__(
        self,
        backbone: str = "graph_transformer",
        layers: int = 2,
        hidden_dim: int = 64,
        out_dim: int = 64,
        heads: int = 4,
        edge_bias: bool = False,
        edge_bias_strength: float = 1.0,
        epochs: int = 50,
        learning_rate: float = 1e-4,
        weight_decay: float = 1e-5,
        batch_size: int = 16,
        margin: float = 0.3,
        seed: int = 0,
        epsilon: float = 0.1,
        sinkhorn_iterations: int = 80,
        lambda_blend: float = 0.5,
        ot_loss_weight: float = 0.0,
        ca_on: bool = True,
        ot_on: bool = True,
        bidirectional_ca: bool = True,
        share_encoders: bool = False,
        extra_query_layers: int = 0,
        val_mode: str = "independent",
        train_ratio: float = 0.70,
        val_ratio: float = 0.20,
        test_ratio: float = 0.10,
    ):
        self.backbone = backbone
        self.layers = layers
        self.hidden_dim = hidden_dim
        self.out_dim = out_dim
        self.heads = heads
        self.edge_bias = edge_bias
        self.edge_bias_strength = edge_bias_strength
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.margin = margin
        self.seed = seed
        self.epsilon = epsilon
        self.sinkhorn_iterations = sinkhorn_iterations
        self.lambda_blend = lambda_blend
        self.ot_loss_weight = ot_loss_weight
        self.ca_on = ca_on
        self.ot_on = ot_on
        self.bidirectional_ca = bidirectional_ca
        self.share_encoders = share_encoders
        self.extra_query_layers = extra_query_layers
        self.val_mode = val_mode
        self.train_ratio = train_ratio
        self.val_ratio = val_ratio
        self.test_ratio = test_ratio

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            margin=self.margin,
            seed=self.seed,
            epsilon=self.epsilon,
            sinkhorn_iterations=self.sinkhorn_iterations,
            lambda_blend=self.lambda_blend,
            ot_loss_weight=self.ot_loss_weight,
            ca_on=self.ca_on,
            ot_on=self.ot_on,
            bidirectional_ca=self.bidirectional_ca,
            share_encoders=self.share_encoders,
            extra_query_layers=self.extra_query_layers,
            val_mode=self.val_mode,
            train_ratio=self.train_ratio,
            val_ratio=self.val_ratio,
            test_ratio=self.test_ratio,
            encoder=EncoderConfig(
                backbone=self.backbone,
                layers=self.layers,
                hidden_dim=self.hidden_dim,
                out_dim=self.out_dim,
                heads=self.heads,
                edge_bias=self.edge_bias,
                edge_bias_strength=self.edge_bias_strength,
            ),
        )

    def fit(self, X, y=None):
        graphs = _check_graphs(X)
        cfg = self._train_config()
        cfg.validate()
        result = train_loop(graphs, cfg)
        self.model_ = Model(result.params, cfg)
        self.split_ = result.split
        self.log_ = result.log
        self.best_val_recall_at_1_ = result.best_val_recall_at_1
        self.gallery_ = sorted(
            (g for g in graphs if g.modality == "face"), key=lambda g: g.graph_id
        )
        self.n_features_in_ = graphs[0].node_features.shape[1]
        return self

    def transform(self, X) -> np.ndarray:
        """Encoder-only unit embeddings, one row per graph."""
        check_is_fitted(self)
        return np.array([self.model_.embed_independent(g) for g in _check_graphs(X)])

    def predict(self, X) -> np.ndarray:
        """Top-1 gallery subject_id per query graph (paired scoring)."""
        check_is_fitted(self)
        queries = _check_graphs(X)
        if not queries:
            return np.array([], dtype=object)
        matrix = score_paired(queries, self.gallery_, self.model_)
        # argmax returns the first (lowest-index) maximum, matching rank ties
        best = np.argmax(matrix.scores, axis=1)
        return np.array([matrix.gallery_subjects[int(b)] for b in best])

    def score(self, X, y=None) -> float:
        """Recall@1 of predict against each query graph's subject_id."""
        check_is_fitted(self)
        queries = _check_graphs(X)
        if not queries:
            raise ValueError("score needs at least one query graph")
        predicted = self.predict(queries)
        truth = np.array([g.subject_id for g in queries])
        return float(np.mean(predicted == truth))
