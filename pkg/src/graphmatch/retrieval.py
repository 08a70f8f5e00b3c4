"""Retrieval scoring and rank metrics for query-vs-gallery evaluation.

Two scoring modes: paired (the full pipeline, one alignment forward per
query/gallery pair) and independent (encoder-only pooled embeddings,
gallery encoded once). Metrics are brute-force-verifiable definitions of
Recall@K, truncated mAP@K, and the Mann-Whitney ROC-AUC.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import MetricError

__all__ = [
    "ScoreMatrix",
    "MetricsReport",
    "score_paired",
    "score_independent",
    "rank_relevants",
    "recall_at_k",
    "map_at_k",
    "roc_auc",
    "roc_points",
    "relevance_sets",
    "genuine_impostor_scores",
    "metrics_from_matrix",
    "evaluate_matrix",
    "evaluate",
]


@dataclass
class ScoreMatrix:
    """Q x G similarity scores (higher = more similar) with row/column labels."""

    scores: np.ndarray
    query_ids: list[str]
    query_subjects: list[str]
    gallery_ids: list[str]
    gallery_subjects: list[str]
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.query_ids), len(self.gallery_ids)):
            raise ValueError(
                f"score matrix shape {self.scores.shape} does not match "
                f"{len(self.query_ids)} queries x {len(self.gallery_ids)} gallery items"
            )
        if len(self.query_subjects) != len(self.query_ids):
            raise ValueError("query subject labels do not match query ids")
        if len(self.gallery_subjects) != len(self.gallery_ids):
            raise ValueError("gallery subject labels do not match gallery ids")
        if not np.isfinite(self.scores).all():
            raise ValueError("score matrix contains non-finite entries")


@dataclass
class MetricsReport:
    """Retrieval metrics at the requested cutoffs plus solver diagnostics."""

    recall_at: dict[int, float]
    map_at: dict[int, float]
    roc_auc: float
    per_query_ranks: list[int]
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "map_at": {str(k): v for k, v in self.map_at.items()},
            "roc_auc": self.roc_auc,
            "per_query_ranks": list(self.per_query_ranks),
            "diagnostics": dict(self.diagnostics),
        }


def score_paired(queries, gallery, model) -> ScoreMatrix:
    """Full-pipeline scores: entry (q, g) = -||z_q - z_g||^2 from align_pair.

    Runs one alignment forward pass per (query, gallery) pair, so cost is
    O(Q*G); diagnostics record the worst Sinkhorn marginal error and the
    mean transport cost across all pairs.
    """
    queries = list(queries)
    gallery = list(gallery)
    scores = np.zeros((len(queries), len(gallery)))
    worst_marginal = 0.0
    cost_total = 0.0
    for qi, q in enumerate(queries):
        for gi, g in enumerate(gallery):
            result = model.align_graphs(q, g)
            scores[qi, gi] = -float(np.sum((result.z_m - result.z_n) ** 2))
            worst_marginal = max(worst_marginal, result.plan.marginal_err)
            cost_total += result.transport_cost
    n_pairs = max(len(queries) * len(gallery), 1)
    return ScoreMatrix(
        scores=scores,
        query_ids=[q.graph_id for q in queries],
        query_subjects=[q.subject_id for q in queries],
        gallery_ids=[g.graph_id for g in gallery],
        gallery_subjects=[g.subject_id for g in gallery],
        diagnostics={
            "mode": "paired",
            "max_marginal_err": worst_marginal,
            "mean_transport_cost": cost_total / n_pairs,
        },
    )


def score_independent(queries, gallery, model) -> ScoreMatrix:
    """Encoder-only scores: cosine similarity of pooled unit embeddings.

    Every graph is embedded once (gallery embeddings reused across
    queries), so cost is O(Q + G) forward passes.
    """
    queries = list(queries)
    gallery = list(gallery)
    z_q = np.array([model.embed_independent(q) for q in queries])
    z_g = np.array([model.embed_independent(g) for g in gallery])
    # embeddings are unit-norm, so the dot product is the cosine
    scores = z_q @ z_g.T if queries and gallery else np.zeros((len(queries), len(gallery)))
    return ScoreMatrix(
        scores=scores,
        query_ids=[q.graph_id for q in queries],
        query_subjects=[q.subject_id for q in queries],
        gallery_ids=[g.graph_id for g in gallery],
        gallery_subjects=[g.subject_id for g in gallery],
        diagnostics={"mode": "independent"},
    )


def _descending_order(score_row: np.ndarray) -> np.ndarray:
    """Gallery indices by descending score, ties to the lower index."""
    return np.argsort(-np.asarray(score_row, dtype=np.float64), kind="stable")


def rank_relevants(score_row, relevant_indices) -> int:
    """Best 1-based rank of any relevant gallery item in one score row."""
    relevant = set(int(i) for i in relevant_indices)
    if not relevant:
        raise MetricError("query has no relevant gallery item")
    order = _descending_order(score_row)
    for rank, gi in enumerate(order, start=1):
        if int(gi) in relevant:
            return rank
    raise MetricError("relevant index out of gallery range")


def recall_at_k(per_query_ranks, k: int) -> float:
    """Fraction of queries whose best relevant rank is <= K."""
    ranks = list(per_query_ranks)
    if not ranks:
        raise MetricError("recall undefined: no queries")
    if k < 1:
        raise MetricError(f"K must be >= 1, got {k}")
    return float(sum(1 for r in ranks if r <= k)) / len(ranks)


def map_at_k(scores: np.ndarray, relevance: list[set[int]], k: int) -> float:
    """Truncated mean average precision.

    AP@K per query = sum_{i<=K} Precision@i * rel(i) / min(|relevant|, K),
    so a single relevant item contributes 1/rank when rank <= K, else 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != len(relevance):
        raise MetricError("relevance sets do not match the score matrix")
    if scores.shape[0] == 0:
        raise MetricError("mAP undefined: no queries")
    if k < 1:
        raise MetricError(f"K must be >= 1, got {k}")
    total = 0.0
    for qi in range(scores.shape[0]):
        relevant = set(int(i) for i in relevance[qi])
        if not relevant:
            raise MetricError(f"query {qi} has no relevant gallery item")
        order = _descending_order(scores[qi])
        hits = 0
        ap = 0.0
        for i, gi in enumerate(order[:k], start=1):
            if int(gi) in relevant:
                hits += 1
                ap += hits / i
        total += ap / min(len(relevant), k)
    return total / scores.shape[0]


def roc_auc(genuine_scores, impostor_scores) -> float:
    """Mann-Whitney AUC: P(genuine > impostor) + 0.5 P(tie).

    Counted via sorted search rather than the quadratic pair loop.
    """
    genuine = np.asarray(list(genuine_scores), dtype=np.float64)
    impostor = np.asarray(list(impostor_scores), dtype=np.float64)
    if genuine.size == 0 or impostor.size == 0:
        raise MetricError("ROC-AUC undefined: need both genuine and impostor scores")
    imp_sorted = np.sort(impostor)
    below = np.searchsorted(imp_sorted, genuine, side="left")
    below_or_equal = np.searchsorted(imp_sorted, genuine, side="right")
    wins = below.sum() + 0.5 * (below_or_equal - below).sum()
    return float(wins) / (genuine.size * impostor.size)


def roc_points(genuine_scores, impostor_scores) -> np.ndarray:
    """(threshold, TPR, FPR) rows at every distinct score, descending.

    A pair is accepted when its score is >= the threshold, so TPR and FPR
    are nondecreasing down the rows and the last row is (min score, 1, 1).
    """
    genuine = np.asarray(list(genuine_scores), dtype=np.float64)
    impostor = np.asarray(list(impostor_scores), dtype=np.float64)
    if genuine.size == 0 or impostor.size == 0:
        raise MetricError("ROC curve undefined: need both genuine and impostor scores")
    thresholds = np.unique(np.concatenate([genuine, impostor]))[::-1]
    rows = np.empty((thresholds.size, 3))
    for i, t in enumerate(thresholds):
        rows[i, 0] = t
        rows[i, 1] = np.mean(genuine >= t)
        rows[i, 2] = np.mean(impostor >= t)
    return rows


def _view_of(graph_id: str) -> str:
    parts = graph_id.split(":")
    return parts[2] if len(parts) >= 3 else ""


def relevance_sets(matrix: ScoreMatrix, relevance: str = "subject") -> list[set[int]]:
    """Relevant gallery indices per query.

    "subject" marks every same-subject gallery item relevant; "image"
    additionally requires the same view tag (third field of ids shaped
    like subject:modality:view).
    """
    if relevance not in ("subject", "image"):
        raise ValueError(f"relevance must be subject or image, got {relevance!r}")
    out: list[set[int]] = []
    for qi, qs in enumerate(matrix.query_subjects):
        hits = {
            gi
            for gi, gs in enumerate(matrix.gallery_subjects)
            if gs == qs
            and (
                relevance == "subject"
                or _view_of(matrix.gallery_ids[gi]) == _view_of(matrix.query_ids[qi])
            )
        }
        out.append(hits)
    return out


def genuine_impostor_scores(
    matrix: ScoreMatrix, relevance: str = "subject"
) -> tuple[list[float], list[float]]:
    """Pool matrix entries into genuine (relevant) and impostor score lists."""
    rel = relevance_sets(matrix, relevance)
    genuine = [float(matrix.scores[qi, gi]) for qi in range(len(rel)) for gi in rel[qi]]
    impostor = [
        float(matrix.scores[qi, gi])
        for qi in range(len(rel))
        for gi in range(matrix.scores.shape[1])
        if gi not in rel[qi]
    ]
    return genuine, impostor


def evaluate_matrix(graphs, model, mode: str = "paired") -> ScoreMatrix:
    """Score non-face queries against the face gallery of a graph store.

    Queries and gallery are each sorted by graph id for determinism.
    """
    graphs = list(graphs)
    queries = sorted((g for g in graphs if g.modality != "face"), key=lambda g: g.graph_id)
    gallery = sorted((g for g in graphs if g.modality == "face"), key=lambda g: g.graph_id)
    if not queries or not gallery:
        raise MetricError("evaluation needs at least one query and one gallery graph")
    if mode == "paired":
        return score_paired(queries, gallery, model)
    if mode == "independent":
        return score_independent(queries, gallery, model)
    raise ValueError(f"mode must be paired or independent, got {mode!r}")


def evaluate(
    graphs,
    model,
    ks=(1, 5, 10),
    mode: str = "paired",
    relevance: str = "subject",
) -> MetricsReport:
    """Full evaluation: score a store split, then compute all rank metrics.

    ROC-AUC pools genuine (relevant) and impostor scores across the whole
    matrix.
    """
    matrix = evaluate_matrix(graphs, model, mode)
    return metrics_from_matrix(matrix, ks=ks, relevance=relevance)


def metrics_from_matrix(matrix: ScoreMatrix, ks=(1, 5, 10), relevance: str = "subject") -> MetricsReport:
    """Metrics for an existing score matrix (shared by evaluate and tests)."""
    ks = sorted(set(int(k) for k in ks))
    if not ks:
        raise MetricError("no cutoffs requested")
    rel = relevance_sets(matrix, relevance)
    ranks = [rank_relevants(matrix.scores[qi], rel[qi]) for qi in range(len(rel))]
    genuine, impostor = genuine_impostor_scores(matrix, relevance)
    # with no impostors every relevant item is trivially separated
    auc = roc_auc(genuine, impostor) if impostor else 1.0
    return MetricsReport(
        recall_at={k: recall_at_k(ranks, k) for k in ks},
        map_at={k: map_at_k(matrix.scores, rel, k) for k in ks},
        roc_auc=auc,
        per_query_ranks=ranks,
        diagnostics=dict(matrix.diagnostics),
    )
