"""Image loading, contour extraction, and SLIC superpixel segmentation.

Images are grayscale float64 grids in [0, 1]. Segmentation follows the
classic SLIC recipe: centers seeded on a grid with spacing S, perturbed to
the lowest-gradient spot in a 3x3 neighborhood, then alternating windowed
assignment and center updates in joint intensity-position space, followed
by a connectivity-enforcement pass that folds stray components into their
best-bordering neighbor segment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .exceptions import ImageDecodeError

__all__ = [
    "ImageRecord",
    "SegmentationResult",
    "load_image",
    "extract_contours",
    "slic_segment",
]

MODALITIES = ("face", "skull", "sketch")

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass
class ImageRecord:
    """Grayscale intensities in [0, 1] with identity labels."""

    pixels: np.ndarray
    modality: str = "face"
    subject_id: str = ""
    view: str | None = None

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError(f"pixels must be 2-D, got shape {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class SegmentationResult:
    """Dense per-pixel labels plus per-segment statistics.

    centroids[i] is the (row, col) mean position of segment i in pixel
    units; intensities are dimensionless in [0, 1]; areas are pixel counts.
    """

    labels: np.ndarray
    n_segments: int
    centroids: np.ndarray
    mean_intensity: np.ndarray
    std_intensity: np.ndarray
    areas: np.ndarray


def load_image(
    path,
    target_size: tuple[int, int],
    modality: str = "face",
    subject_id: str = "",
    view: str | None = None,
) -> ImageRecord:
    """Decode a raster image to grayscale [0, 1] at (width, height).

    Conversion uses luma weighting; resizing is bilinear and skipped when
    the source already has the target size.
    """
    w, h = target_size
    if w <= 0 or h <= 0:
        raise ValueError(f"target_size must be positive, got {target_size}")
    try:
        with Image.open(path) as im:
            gray = im.convert("L")
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc
    if gray.size != (w, h):
        gray = gray.resize((w, h), Image.Resampling.BILINEAR)
    pixels = np.asarray(gray, dtype=np.float64) / 255.0
    return ImageRecord(pixels, modality=modality, subject_id=subject_id, view=view)


def extract_contours(img: ImageRecord, blend: float) -> ImageRecord:
    """Blend the input with its normalized Sobel gradient magnitude.

    output = blend * (|grad| / max|grad|) + (1 - blend) * input; a
    gradient-free image contributes zero to the blended term.
    """
    if not 0.0 <= blend <= 1.0:
        raise ValueError(f"blend must lie in [0, 1], got {blend}")
    p = np.pad(img.pixels, 1, mode="reflect")
    gx = (p[:-2, 2:] + 2.0 * p[1:-1, 2:] + p[2:, 2:]) - (
        p[:-2, :-2] + 2.0 * p[1:-1, :-2] + p[2:, :-2]
    )
    gy = (p[2:, :-2] + 2.0 * p[2:, 1:-1] + p[2:, 2:]) - (
        p[:-2, :-2] + 2.0 * p[:-2, 1:-1] + p[:-2, 2:]
    )
    mag = np.hypot(gx, gy)
    peak = mag.max()
    edge = mag / peak if peak > 0.0 else mag
    out = blend * edge + (1.0 - blend) * img.pixels
    return ImageRecord(out, modality=img.modality, subject_id=img.subject_id, view=img.view)


# ---------------------------------------------------------------------------
# SLIC
# ---------------------------------------------------------------------------


def _grid_dims(h: int, w: int, n_segments: int, spacing: float) -> tuple[int, int]:
    """Grid rows/cols proportional to the aspect ratio with ny*nx <= target."""
    ny = max(1, int(round(h / spacing)))
    nx = max(1, int(round(n_segments / ny)))
    while ny * nx > n_segments:
        if nx >= ny and nx > 1:
            nx -= 1
        elif ny > 1:
            ny -= 1
        else:
            nx -= 1
    return ny, nx


def _seed_centers(px: np.ndarray, n_segments: int, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    """Grid-seeded centers moved to the lowest-gradient spot in a 3x3 patch."""
    h, w = px.shape
    pe = np.pad(px, 1, mode="edge")
    grad = (pe[2:, 1:-1] - pe[:-2, 1:-1]) ** 2 + (pe[1:-1, 2:] - pe[1:-1, :-2]) ** 2

    ny, nx = _grid_dims(h, w, n_segments, spacing)
    grid_r = np.clip(np.round((np.arange(ny) + 0.5) * h / ny).astype(int), 0, h - 1)
    grid_c = np.clip(np.round((np.arange(nx) + 0.5) * w / nx).astype(int), 0, w - 1)

    rows = np.empty(ny * nx, dtype=int)
    cols = np.empty(ny * nx, dtype=int)
    k = 0
    for r in grid_r:
        for c in grid_c:
            r0, r1 = max(0, r - 1), min(h, r + 2)
            c0, c1 = max(0, c - 1), min(w, c + 2)
            window = grad[r0:r1, c0:c1]
            # first minimum in row-major scan wins ties
            flat = int(np.argmin(window))
            rows[k] = r0 + flat // window.shape[1]
            cols[k] = c0 + flat % window.shape[1]
            k += 1
    return rows, cols


def slic_segment(
    img: ImageRecord,
    n_segments: int,
    compactness: float = 10.0,
    iterations: int = 10,
) -> SegmentationResult:
    """Segment into at most ``n_segments`` 4-connected superpixels.

    The joint distance is D^2 = d_intensity^2 + (compactness * d_spatial/S)^2
    with S = sqrt(W*H/n_segments); each center claims pixels inside a window
    of half-width ceil(S) around its current position, ties going to the
    lower center index. Pixels left uncovered by every window fall back to
    the globally nearest center under the same distance.
    """
    px = img.pixels
    h, w = px.shape
    if n_segments < 1:
        raise ValueError(f"n_segments must be >= 1, got {n_segments}")
    if n_segments > px.size:
        raise ValueError(f"n_segments {n_segments} exceeds pixel count {px.size}")

    spacing = float(np.sqrt(w * h / n_segments))
    ratio2 = (compactness / spacing) ** 2
    rows_i, cols_i = _seed_centers(px, n_segments, spacing)
    n_centers = rows_i.size
    rows_f = rows_i.astype(np.float64)
    cols_f = cols_i.astype(np.float64)
    ints = px[rows_i, cols_i].copy()

    half = int(np.ceil(spacing))
    offs = np.arange(-half, half + 1)
    row_coords, col_coords = np.indices((h, w))
    flat_rows = row_coords.ravel().astype(np.float64)
    flat_cols = col_coords.ravel().astype(np.float64)
    labels = np.zeros((h, w), dtype=np.int64)

    for _ in range(iterations):
        anchor_r = np.clip(np.round(rows_f).astype(int), 0, h - 1)
        anchor_c = np.clip(np.round(cols_f).astype(int), 0, w - 1)
        win_r = np.clip(anchor_r[:, None] + offs[None, :], 0, h - 1)
        win_c = np.clip(anchor_c[:, None] + offs[None, :], 0, w - 1)
        rr = win_r[:, :, None].astype(np.float64)
        cc = win_c[:, None, :].astype(np.float64)
        patch = px[win_r[:, :, None], win_c[:, None, :]]
        d2 = (patch - ints[:, None, None]) ** 2 + ratio2 * (
            (rr - rows_f[:, None, None]) ** 2 + (cc - cols_f[:, None, None]) ** 2
        )

        best = np.full((h, w), np.inf)
        labels.fill(-1)
        for k in range(n_centers):
            sel = np.ix_(win_r[k], win_c[k])
            closer = d2[k] < best[sel]
            if closer.any():
                labels[sel] = np.where(closer, k, labels[sel])
                best[sel] = np.where(closer, d2[k], best[sel])

        uncovered = labels < 0
        if uncovered.any():
            ys, xs = np.nonzero(uncovered)
            d_int = px[ys, xs][None, :] - ints[:, None]
            d_all = d_int**2 + ratio2 * (
                (ys[None, :] - rows_f[:, None]) ** 2 + (xs[None, :] - cols_f[:, None]) ** 2
            )
            labels[ys, xs] = np.argmin(d_all, axis=0)

        flat = labels.ravel()
        counts = np.bincount(flat, minlength=n_centers)
        sum_r = np.bincount(flat, weights=flat_rows, minlength=n_centers)
        sum_c = np.bincount(flat, weights=flat_cols, minlength=n_centers)
        sum_i = np.bincount(flat, weights=px.ravel(), minlength=n_centers)
        occupied = counts > 0  # empty clusters keep their previous center
        rows_f[occupied] = sum_r[occupied] / counts[occupied]
        cols_f[occupied] = sum_c[occupied] / counts[occupied]
        ints[occupied] = sum_i[occupied] / counts[occupied]

    labels = _enforce_connectivity(labels, n_centers)
    return _segment_stats(labels, px)


def _enforce_connectivity(labels: np.ndarray, n_centers: int) -> np.ndarray:
    """Fold every non-main component of each label into a settled neighbor.

    The largest component of each label (ties: earliest in row-major scan)
    is kept; every other component is merged into the settled segment with
    the largest shared 4-border, ties to the lower label index. Orphans not
    yet touching settled ground are retried after others merge, which always
    makes progress because settled territory only grows.
    """
    h, w = labels.shape
    settled = np.zeros((h, w), dtype=bool)
    orphans: list[tuple[int, np.ndarray, np.ndarray]] = []  # (min flat index, ys, xs)

    for lab in range(n_centers):
        mask = labels == lab
        if not mask.any():
            continue
        comp, n_comp = ndimage.label(mask, structure=_FOUR_CONN)
        if n_comp == 1:
            settled |= mask
            continue
        sizes = np.bincount(comp.ravel())[1:]
        main = int(np.argmax(sizes)) + 1  # argmax picks the earliest-scanned on ties
        settled |= comp == main
        for ci in range(1, n_comp + 1):
            if ci == main:
                continue
            ys, xs = np.nonzero(comp == ci)
            orphans.append((int(ys[0] * w + xs[0]), ys, xs))

    orphans.sort(key=lambda item: item[0])
    queue = list(orphans)
    while queue:
        deferred = []
        merged_any = False
        for key, ys, xs in queue:
            border: list[np.ndarray] = []
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ny, nx = ys + dy, xs + dx
                ok = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
                ny, nx = ny[ok], nx[ok]
                touching = settled[ny, nx]
                border.append(labels[ny[touching], nx[touching]])
            neighbor_labels = np.concatenate(border)
            if neighbor_labels.size == 0:
                deferred.append((key, ys, xs))
                continue
            values, counts = np.unique(neighbor_labels, return_counts=True)
            target = int(values[counts == counts.max()].min())
            labels[ys, xs] = target
            settled[ys, xs] = True
            merged_any = True
        if deferred and not merged_any:
            raise RuntimeError("connectivity enforcement failed to make progress")
        queue = deferred

    # dense relabel in ascending original-label order
    used = np.unique(labels)
    remap = np.zeros(used.max() + 1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    return remap[labels]


def _segment_stats(labels: np.ndarray, px: np.ndarray) -> SegmentationResult:
    h, w = labels.shape
    n = int(labels.max()) + 1
    flat = labels.ravel()
    areas = np.bincount(flat, minlength=n)
    row_coords, col_coords = np.indices((h, w))
    cent_r = np.bincount(flat, weights=row_coords.ravel(), minlength=n) / areas
    cent_c = np.bincount(flat, weights=col_coords.ravel(), minlength=n) / areas
    mean_i = np.bincount(flat, weights=px.ravel(), minlength=n) / areas
    # two-pass variance: the E[x^2]-E[x]^2 form cancels catastrophically
    # and reports nonzero spread on constant segments
    centered_sq = (px.ravel() - mean_i[flat]) ** 2
    std_i = np.sqrt(np.bincount(flat, weights=centered_sq, minlength=n) / areas)
    return SegmentationResult(
        labels=labels,
        n_segments=n,
        centroids=np.column_stack([cent_r, cent_c]),
        mean_intensity=mean_i,
        std_intensity=std_i,
        areas=areas,
    )
