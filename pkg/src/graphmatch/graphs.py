"""Superpixel graphs: node features, KNN adjacency, and a JSON-lines store.

Each segmented image becomes one graph. Node i carries the 5 features
[centroid_col/W, centroid_row/H, mean_intensity, std_intensity,
area/(W*H)], all in [0, 1]. Edges are the symmetrized union of each
node's k nearest centroids; edge_dist is the centroid distance divided by
the image diagonal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import StoreParseError
from .imaging import ImageRecord, SegmentationResult, extract_contours, slic_segment

__all__ = [
    "ModalGraph",
    "build_node_features",
    "knn_graph",
    "graph_from_image",
    "write_graph_store",
    "read_graph_store",
]

FEATURE_DIM = 5


@dataclass
class ModalGraph:
    """Undirected superpixel graph for one image."""

    graph_id: str
    subject_id: str
    modality: str
    node_features: np.ndarray
    edges: np.ndarray  # (E, 2) with smaller index first, lexicographically sorted
    edge_dist: np.ndarray  # (E,) in [0, 1]

    def __post_init__(self) -> None:
        self.node_features = np.asarray(self.node_features, dtype=np.float64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.edge_dist = np.asarray(self.edge_dist, dtype=np.float64)

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]


def build_node_features(seg: SegmentationResult, img: ImageRecord) -> np.ndarray:
    """Per-segment feature rows, every entry normalized into [0, 1]."""
    if seg.labels.shape != img.pixels.shape:
        raise ValueError(
            f"segmentation shape {seg.labels.shape} does not match image {img.pixels.shape}"
        )
    h, w = img.pixels.shape
    return np.column_stack(
        [
            seg.centroids[:, 1] / w,
            seg.centroids[:, 0] / h,
            seg.mean_intensity,
            seg.std_intensity,
            seg.areas / (w * h),
        ]
    )


def knn_graph(
    centroids: np.ndarray, k: int, diagonal: float
) -> tuple[np.ndarray, np.ndarray]:
    """Undirected deduplicated union of per-node k-nearest picks.

    Each node selects its min(k, N-1) nearest centroids by Euclidean
    distance with ties resolved toward the lower node index; ``diagonal``
    normalizes edge distances into [0, 1].
    """
    pts = np.asarray(centroids, dtype=np.float64)
    n = pts.shape[0]
    if n < 1:
        raise ValueError("need at least one centroid")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if n == 1:
        return np.empty((0, 2), dtype=np.int64), np.empty(0)

    diff = pts[:, None, :] - pts[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(d2, np.inf)
    kk = min(k, n - 1)
    # stable sort keeps equal distances in index order (lower index wins)
    nearest = np.argsort(d2, axis=1, kind="stable")[:, :kk]

    src = np.repeat(np.arange(n), kk)
    dst = nearest.ravel()
    lo = np.minimum(src, dst)
    hi = np.maximum(src, dst)
    edges = np.unique(np.column_stack([lo, hi]), axis=0)
    dist = np.linalg.norm(pts[edges[:, 0]] - pts[edges[:, 1]], axis=1) / diagonal
    return edges.astype(np.int64), dist


def graph_from_image(
    img: ImageRecord,
    n_segments: int = 300,
    compactness: float = 10.0,
    slic_iterations: int = 10,
    knn_k: int = 6,
    contour_blend: float = 0.0,
    graph_id: str | None = None,
) -> ModalGraph:
    """Segment an image and build its superpixel graph."""
    if contour_blend > 0.0:
        img = extract_contours(img, contour_blend)
    seg = slic_segment(img, n_segments, compactness, slic_iterations)
    features = build_node_features(seg, img)
    diagonal = float(np.hypot(img.width, img.height))
    if seg.n_segments == 1:
        edges = np.empty((0, 2), dtype=np.int64)
        dist = np.empty(0)
    else:
        edges, dist = knn_graph(seg.centroids, knn_k, diagonal)
    if graph_id is None:
        graph_id = f"{img.subject_id}:{img.modality}:{img.view or ''}"
    return ModalGraph(
        graph_id=graph_id,
        subject_id=img.subject_id,
        modality=img.modality,
        node_features=features,
        edges=edges,
        edge_dist=dist,
    )


# ---------------------------------------------------------------------------
# JSON-lines store
# ---------------------------------------------------------------------------


def write_graph_store(graphs, path) -> None:
    """One JSON object per line; float round-trip is exact (repr-based)."""
    with open(path, "w", encoding="utf-8") as fh:
        for g in graphs:
            record = {
                "graph_id": g.graph_id,
                "subject_id": g.subject_id,
                "modality": g.modality,
                "n_nodes": int(g.n_nodes),
                "d0": int(g.node_features.shape[1]),
                "node_features": g.node_features.tolist(),
                "edges": g.edges.tolist(),
                "edge_dist": g.edge_dist.tolist(),
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def read_graph_store(path) -> list[ModalGraph]:
    graphs: list[ModalGraph] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                graph = ModalGraph(
                    graph_id=rec["graph_id"],
                    subject_id=rec["subject_id"],
                    modality=rec["modality"],
                    node_features=np.asarray(rec["node_features"], dtype=np.float64).reshape(
                        rec["n_nodes"], rec["d0"]
                    ),
                    edges=np.asarray(rec["edges"], dtype=np.int64).reshape(-1, 2),
                    edge_dist=np.asarray(rec["edge_dist"], dtype=np.float64),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise StoreParseError(f"line {line_no}: malformed graph record ({exc})") from exc
            if len(graph.edges) != len(graph.edge_dist):
                raise StoreParseError(
                    f"line {line_no}: {len(graph.edges)} edges but {len(graph.edge_dist)} distances"
                )
            if len(graph.edges) and int(graph.edges.max()) >= graph.n_nodes:
                raise StoreParseError(f"line {line_no}: edge index out of range")
            graphs.append(graph)
    return graphs
