"""Command-line surface for the pipeline plus a synthetic dataset generator.

Commands: synth, segment, graph, train, eval, query, sweep-k, ablate.
Every command is deterministic given --seed, echoes its effective
configuration into the output directory as run_config.json, and exits
nonzero on error with a single-line code-prefixed message.

Config precedence is CLI flag > --config JSON file > built-in default.
The config file uses flat keys mirroring the flag names; unknown keys are
rejected.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import retrieval
from .encoders import BACKBONES, EncoderConfig
from .exceptions import GraphMatchError, StoreParseError
from .graphs import graph_from_image, read_graph_store, write_graph_store
from .imaging import MODALITIES, ImageRecord, extract_contours, load_image, slic_segment
from .training import (
    Model,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    split_dataset,
    train_loop,
)

__all__ = [
    "RunConfig",
    "ManifestRow",
    "load_manifest",
    "save_manifest",
    "generate_synthetic_dataset",
    "build_parser",
    "main",
]


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Flat bag of every pipeline parameter with the pinned benchmark defaults."""

    seed: int = 0
    threads: int = 1
    # imaging / graph construction
    image_size: int = 200
    contour_blend: float = 0.0
    segments: int = 300
    compactness: float = 10.0
    slic_iterations: int = 10
    knn_k: int = 6
    # encoder
    backbone: str = "graph_transformer"
    layers: int = 2
    hidden_dim: int = 64
    out_dim: int = 64
    heads: int = 4
    edge_bias: bool = False
    edge_bias_strength: float = 1.0
    # optimization
    epochs: int = 50
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 16
    margin: float = 0.3
    # alignment
    epsilon: float = 0.1
    sinkhorn_iterations: int = 80
    lambda_blend: float = 0.5
    ot_loss_weight: float = 0.0
    ca_on: bool = True
    ot_on: bool = True
    bidirectional_ca: bool = True
    share_encoders: bool = False
    extra_query_layers: int = 0
    # splits / validation
    val_mode: str = "independent"
    train_ratio: float = 0.70
    val_ratio: float = 0.20
    test_ratio: float = 0.10

    def validate(self) -> None:
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")
        if self.image_size < 3:
            raise ValueError(f"image_size must be >= 3, got {self.image_size}")
        if not 0.0 <= self.contour_blend <= 1.0:
            raise ValueError(f"contour_blend must lie in [0, 1], got {self.contour_blend}")
        if self.segments < 1:
            raise ValueError(f"segments must be >= 1, got {self.segments}")
        if self.knn_k < 1:
            raise ValueError(f"knn_k must be >= 1, got {self.knn_k}")
        self.to_train_config().validate()

    def to_encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            backbone=self.backbone,
            layers=self.layers,
            hidden_dim=self.hidden_dim,
            out_dim=self.out_dim,
            heads=self.heads,
            edge_bias=self.edge_bias,
            edge_bias_strength=self.edge_bias_strength,
        )

    def to_train_config(self) -> TrainConfig:
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
            encoder=self.to_encoder_config(),
        )

    def graph_kwargs(self) -> dict:
        return {
            "n_segments": self.segments,
            "compactness": self.compactness,
            "slic_iterations": self.slic_iterations,
            "knn_k": self.knn_k,
            "contour_blend": self.contour_blend,
        }


_RUN_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce_config_value(name: str, value):
    default = _RUN_FIELDS[name].default
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError(f"config key {name!r} expects a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"config key {name!r} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"config key {name!r} expects a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ValueError(f"config key {name!r} expects a string, got {value!r}")
    return value


def load_config_file(path) -> dict:
    """Parse a flat JSON config; unknown keys are an error."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"config file {path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ValueError(f"config file {path}: expected a JSON object")
    unknown = sorted(set(data) - set(_RUN_FIELDS))
    if unknown:
        raise ValueError(f"config file {path}: unknown keys {unknown}")
    return {k: _coerce_config_value(k, v) for k, v in data.items()}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, the optional config file, and CLI flags (highest wins)."""
    values: dict = {}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for name in _RUN_FIELDS:
        cli_value = getattr(args, name, None)
        if cli_value is not None:
            values[name] = cli_value
    cfg = replace(RunConfig(), **values)
    cfg.validate()
    return cfg


def write_run_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(dataclasses.asdict(cfg), indent=2, sort_keys=True) + "\n"
    (out_dir / "run_config.json").write_text(payload)


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------

_MANIFEST_HEADER = ["subject_id", "modality", "view", "path"]


@dataclass
class ManifestRow:
    subject_id: str
    modality: str
    view: str
    path: Path
    split: str | None = None


def load_manifest(path, require_pairs: bool = True) -> list[ManifestRow]:
    """Read a dataset manifest CSV, resolving paths relative to the file.

    With require_pairs every subject must contribute at least one face row
    and one non-face row; gallery-only manifests pass require_pairs=False.
    """
    path = Path(path)
    root = path.parent
    rows: list[ManifestRow] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise StoreParseError(f"{path}: empty manifest") from None
        if header not in (_MANIFEST_HEADER, _MANIFEST_HEADER + ["split"]):
            raise StoreParseError(
                f"{path}: header must be subject_id,modality,view,path[,split], got {header}"
            )
        has_split = len(header) == 5
        for line_no, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise StoreParseError(f"{path} line {line_no}: expected {len(header)} fields")
            subject, modality, view, rel = rec[:4]
            if not subject:
                raise StoreParseError(f"{path} line {line_no}: empty subject_id")
            if modality not in MODALITIES:
                raise StoreParseError(
                    f"{path} line {line_no}: modality must be one of {MODALITIES}, got {modality!r}"
                )
            resolved = (root / rel).resolve() if not Path(rel).is_absolute() else Path(rel)
            if not resolved.is_file():
                raise StoreParseError(f"{path} line {line_no}: missing image {rel}")
            rows.append(ManifestRow(subject, modality, view, resolved, rec[4] if has_split else None))
    if require_pairs:
        by_subject: dict[str, set[bool]] = {}
        for r in rows:
            by_subject.setdefault(r.subject_id, set()).add(r.modality == "face")
        bad = sorted(s for s, kinds in by_subject.items() if kinds != {True, False})
        if bad or not rows:
            raise StoreParseError(
                f"{path}: every subject needs a face row and a non-face row; offending: {bad}"
            )
    return rows


def save_manifest(rows: list[ManifestRow], path, relative_to=None) -> None:
    path = Path(path)
    base = Path(relative_to) if relative_to is not None else path.parent
    has_split = any(r.split is not None for r in rows)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_MANIFEST_HEADER + (["split"] if has_split else []))
        for r in rows:
            try:
                rel = str(Path(r.path).relative_to(base))
            except ValueError:
                rel = str(r.path)
            rec = [r.subject_id, r.modality, r.view, rel]
            if has_split:
                rec.append(r.split or "")
            writer.writerow(rec)


# ---------------------------------------------------------------------------
# Synthetic paired-modality dataset
# ---------------------------------------------------------------------------


def _blob_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """Sum of 4-8 seeded Gaussian blobs, normalized to [0, 1]."""
    n_blobs = int(rng.integers(4, 9))
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0.15 * size, 0.85 * size, size=2)
        sigma = rng.uniform(0.08 * size, 0.18 * size)
        amp = rng.uniform(0.5, 1.0)
        img += amp * np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2.0 * sigma**2))
    return img / img.max()


def _paired_modality(rng: np.random.Generator, face: np.ndarray, noise_sigma: float = 0.05) -> np.ndarray:
    """Identity-preserving transform: inverted edge map plus seeded noise."""
    record = ImageRecord(pixels=face, modality="face", subject_id="", view="")
    edges = extract_contours(record, blend=1.0).pixels
    noisy = (1.0 - edges) + rng.normal(0.0, noise_sigma, size=face.shape)
    return np.clip(noisy, 0.0, 1.0)


def _save_png(pixels: np.ndarray, path: Path) -> None:
    data = np.round(pixels * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def generate_synthetic_dataset(
    out_dir,
    n_subjects: int,
    seed: int = 0,
    image_size: int = 200,
    query_modality: str = "skull",
) -> Path:
    """Write paired face/query PNGs plus manifest.csv; returns the manifest path.

    Each subject is a seeded blob field rendered twice: directly as the
    face, and as an inverted gradient-magnitude map with sigma 0.05 noise
    as the query modality. Deterministic for a fixed seed.
    """
    if n_subjects < 3:
        raise ValueError(f"need at least 3 subjects, got {n_subjects}")
    if query_modality not in MODALITIES or query_modality == "face":
        raise ValueError(f"query_modality must be a non-face member of {MODALITIES}")
    out = Path(out_dir)
    images = out / "images"
    images.mkdir(parents=True, exist_ok=True)
    rows: list[ManifestRow] = []
    streams = np.random.SeedSequence(seed).spawn(n_subjects)
    for idx in range(n_subjects):
        rng = np.random.default_rng(streams[idx])
        subject = f"s{idx:03d}"
        face = _blob_image(rng, image_size)
        query = _paired_modality(rng, face)
        face_path = images / f"{subject}_face.png"
        query_path = images / f"{subject}_{query_modality}.png"
        _save_png(face, face_path)
        _save_png(query, query_path)
        rows.append(ManifestRow(subject, "face", "frontal", face_path))
        rows.append(ManifestRow(subject, query_modality, "frontal", query_path))
    manifest = out / "manifest.csv"
    save_manifest(rows, manifest, relative_to=out)
    return manifest


# ---------------------------------------------------------------------------
# Command helpers
# ---------------------------------------------------------------------------


def _graph_task(task):
    path, size, modality, subject, view, kwargs = task
    img = load_image(path, (size, size), modality=modality, subject_id=subject, view=view)
    return graph_from_image(img, **kwargs)


def _build_graphs(rows: list[ManifestRow], cfg: RunConfig):
    tasks = [
        (str(r.path), cfg.image_size, r.modality, r.subject_id, r.view, cfg.graph_kwargs())
        for r in rows
    ]
    if cfg.threads > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            return list(pool.map(_graph_task, tasks))
    return [_graph_task(t) for t in tasks]


def _split_graphs(graphs, tcfg: TrainConfig, which: str):
    if which == "all":
        return list(graphs)
    assignment = split_dataset(
        sorted({g.subject_id for g in graphs}),
        (tcfg.train_ratio, tcfg.val_ratio, tcfg.test_ratio),
        tcfg.seed,
    )
    return [g for g in graphs if assignment[g.subject_id] == which]


def _parse_ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise ValueError(f"--ks expects comma-separated integers, got {text!r}") from None
    if not ks:
        raise ValueError("--ks must name at least one cutoff")
    return ks


def _write_metrics(report: retrieval.MetricsReport, matrix, out: Path, relevance: str) -> None:
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    genuine, impostor = retrieval.genuine_impostor_scores(matrix, relevance)
    with open(out / "roc.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "tpr", "fpr"])
        if impostor:
            for threshold, tpr, fpr in retrieval.roc_points(genuine, impostor):
                writer.writerow([repr(float(threshold)), repr(float(tpr)), repr(float(fpr))])


def _metric_row(report: retrieval.MetricsReport, ks) -> list[str]:
    row = [repr(report.recall_at[k]) for k in ks]
    row += [repr(report.map_at[k]) for k in ks]
    row.append(repr(report.roc_auc))
    return row


def _metric_header(ks) -> list[str]:
    return [f"recall_at_{k}" for k in ks] + [f"map_at_{k}" for k in ks] + ["roc_auc"]


def _train_and_eval(graphs, tcfg: TrainConfig, ks, mode: str, relevance: str, split: str):
    result = train_loop(graphs, tcfg)
    model = Model(result.params, tcfg)
    subset = _split_graphs(graphs, tcfg, split)
    matrix = retrieval.evaluate_matrix(subset, model, mode)
    report = retrieval.metrics_from_matrix(matrix, ks=ks, relevance=relevance)
    return result, model, matrix, report


def _write_train_log(log: list[dict], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_recall_at_1"])
        for entry in log:
            writer.writerow(
                [entry["epoch"], repr(entry["train_loss"]), repr(entry["val_recall_at_1"])]
            )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if args.subjects < 3:
        raise ValueError(f"--subjects must be >= 3, got {args.subjects}")
    out = Path(args.out)
    manifest = generate_synthetic_dataset(out, args.subjects, cfg.seed, cfg.image_size)
    write_run_config(cfg, out)
    print(f"synth: wrote {args.subjects} subjects ({2 * args.subjects} images) to {manifest}")
    return 0


def cmd_segment(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    img = load_image(args.image, (cfg.image_size, cfg.image_size), modality=args.modality)
    if cfg.contour_blend > 0.0:
        img = extract_contours(img, cfg.contour_blend)
    seg = slic_segment(img, cfg.segments, cfg.compactness, cfg.slic_iterations)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "n_segments": int(seg.n_segments),
        "labels": seg.labels.tolist(),
        "centroids": seg.centroids.tolist(),
        "mean_intensity": seg.mean_intensity.tolist(),
        "std_intensity": seg.std_intensity.tolist(),
        "areas": seg.areas.tolist(),
    }
    (out / "segmentation.json").write_text(json.dumps(payload) + "\n")
    write_run_config(cfg, out)
    print(f"segment: {seg.n_segments} segments -> {out / 'segmentation.json'}")
    return 0


def cmd_graph(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    rows = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    graphs = _build_graphs(rows, cfg)
    store = out / "graphs.jsonl"
    write_graph_store(graphs, store)
    nodes = np.array([g.n_nodes for g in graphs])
    stats = {
        "graphs": len(graphs),
        "nodes_min": int(nodes.min()),
        "nodes_mean": float(nodes.mean()),
        "nodes_max": int(nodes.max()),
    }
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    write_run_config(cfg, out)
    print(
        f"graph: {stats['graphs']} graphs -> {store} "
        f"(nodes min {stats['nodes_min']} mean {stats['nodes_mean']:.1f} max {stats['nodes_max']})"
    )
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    tcfg = cfg.to_train_config()
    graphs = read_graph_store(args.store)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train_loop(graphs, tcfg)
    save_checkpoint(
        result.params,
        tcfg,
        out / "checkpoint",
        metrics={
            "best_epoch": result.best_epoch,
            "val_recall_at_1": result.best_val_recall_at_1,
        },
    )
    _write_train_log(result.log, out / "train_log.csv")
    (out / "split.json").write_text(json.dumps(result.split, indent=2, sort_keys=True) + "\n")
    write_run_config(cfg, out)
    print(
        f"train: {tcfg.epochs} epochs, best val recall@1 "
        f"{result.best_val_recall_at_1:.4f} at epoch {result.best_epoch} -> {out / 'checkpoint'}"
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    params, tcfg = load_checkpoint(args.checkpoint)
    model = Model(params, tcfg)
    graphs = read_graph_store(args.store)
    subset = _split_graphs(graphs, tcfg, args.split)
    ks = _parse_ks(args.ks)
    matrix = retrieval.evaluate_matrix(subset, model, args.mode)
    report = retrieval.metrics_from_matrix(matrix, ks=ks, relevance=args.relevance)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_metrics(report, matrix, out, args.relevance)
    write_run_config(cfg, out)
    summary = " ".join(f"R@{k}={report.recall_at[k]:.4f}" for k in sorted(report.recall_at))
    print(f"eval[{args.split},{args.mode}]: {summary} auc={report.roc_auc:.4f} -> {out}")
    return 0


def cmd_query(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    params, tcfg = load_checkpoint(args.checkpoint)
    model = Model(params, tcfg)
    img = load_image(
        args.image,
        (cfg.image_size, cfg.image_size),
        modality=args.modality,
        subject_id="query",
        view="",
    )
    query = graph_from_image(img, **cfg.graph_kwargs())
    rows = [r for r in load_manifest(args.gallery, require_pairs=False) if r.modality == "face"]
    if not rows:
        raise ValueError(f"gallery manifest {args.gallery} has no face rows")
    gallery = _build_graphs(rows, cfg)
    matrix = (
        retrieval.score_paired([query], gallery, model)
        if args.mode == "paired"
        else retrieval.score_independent([query], gallery, model)
    )
    order = np.argsort(-matrix.scores[0], kind="stable")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ranking.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "gallery_id", "subject_id", "score"])
        for rank, gi in enumerate(order[: args.topk], start=1):
            writer.writerow(
                [
                    rank,
                    matrix.gallery_ids[gi],
                    matrix.gallery_subjects[gi],
                    repr(float(matrix.scores[0, gi])),
                ]
            )
            print(
                f"{rank}\t{matrix.gallery_ids[gi]}\t{matrix.gallery_subjects[gi]}\t"
                f"{matrix.scores[0, gi]:.6f}"
            )
    write_run_config(cfg, out)
    return 0


def cmd_sweep_k(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    ks = _parse_ks(args.ks)
    k_values = _parse_ks(args.k_list)
    rows = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table: list[list[str]] = []
    for k in k_values:
        k_cfg = replace(cfg, knn_k=k)
        graphs = _build_graphs(rows, k_cfg)
        _, _, _, report = _train_and_eval(
            graphs, k_cfg.to_train_config(), ks, args.mode, args.relevance, args.split
        )
        table.append([str(k)] + _metric_row(report, ks))
        print(f"sweep-k k={k}: " + " ".join(f"R@{c}={report.recall_at[c]:.4f}" for c in ks))
    with open(out / "sweep_k.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k"] + _metric_header(ks))
        writer.writerows(table)
    write_run_config(cfg, out)
    print(f"sweep-k: wrote {out / 'sweep_k.csv'}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    ks = _parse_ks(args.ks)
    graphs = read_graph_store(args.store)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table: list[list[str]] = []
    for ca_on, ot_on in ((True, True), (True, False), (False, True), (False, False)):
        tcfg = replace(cfg.to_train_config(), ca_on=ca_on, ot_on=ot_on)
        _, _, _, report = _train_and_eval(graphs, tcfg, ks, args.mode, args.relevance, args.split)
        table.append([str(ca_on).lower(), str(ot_on).lower()] + _metric_row(report, ks))
        print(
            f"ablate ca={'on' if ca_on else 'off'} ot={'on' if ot_on else 'off'}: "
            + " ".join(f"R@{c}={report.recall_at[c]:.4f}" for c in ks)
        )
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ca_on", "ot_on"] + _metric_header(ks))
        writer.writerows(table)
    write_run_config(cfg, out)
    print(f"ablate: wrote {out / 'ablation.csv'}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Argument errors exit with the same single-line code-prefixed format."""

    def error(self, message: str):
        print(f"E_USAGE: {message}", file=sys.stderr)
        raise SystemExit(2)


def _add_run_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file with flat keys mirroring these flags")
    group = parser.add_argument_group("pipeline configuration")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if isinstance(f.default, bool):
            group.add_argument(
                flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None
            )
        else:
            kwargs = {"dest": f.name, "type": type(f.default), "default": None}
            if f.name == "backbone":
                kwargs["choices"] = list(BACKBONES)
            group.add_argument(flag, **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="graphmatch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        _add_run_config_flags(p)
        p.add_argument("--out", required=True, help="output directory")
        return p

    p = add("synth", cmd_synth, "generate a synthetic paired-modality dataset")
    p.add_argument("--subjects", type=int, default=40)

    p = add("segment", cmd_segment, "superpixel-segment one image")
    p.add_argument("--image", required=True)
    p.add_argument("--modality", default="face", choices=list(MODALITIES))

    p = add("graph", cmd_graph, "build a graph store from a manifest")
    p.add_argument("--manifest", required=True)

    p = add("train", cmd_train, "train on a graph store")
    p.add_argument("--store", required=True)

    p = add("eval", cmd_eval, "evaluate a checkpoint on a store split")
    p.add_argument("--store", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--ks", default="1,5,10")
    p.add_argument("--mode", default="paired", choices=["paired", "independent"])
    p.add_argument("--relevance", default="subject", choices=["subject", "image"])

    p = add("query", cmd_query, "rank a face gallery for one query image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--modality", default="skull", choices=[m for m in MODALITIES if m != "face"])
    p.add_argument("--gallery", required=True, help="manifest of gallery face images")
    p.add_argument("--topk", type=int, default=5)
    p.add_argument("--mode", default="paired", choices=["paired", "independent"])

    p = add("sweep-k", cmd_sweep_k, "train/evaluate across graph KNN values")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k-list", dest="k_list", default="4,6,8")
    p.add_argument("--ks", default="1,5,10")
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--mode", default="paired", choices=["paired", "independent"])
    p.add_argument("--relevance", default="subject", choices=["subject", "image"])

    p = add("ablate", cmd_ablate, "train/evaluate the 4-way CA/OT ablation grid")
    p.add_argument("--store", required=True)
    p.add_argument("--ks", default="1,5")
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--mode", default="paired", choices=["paired", "independent"])
    p.add_argument("--relevance", default="subject", choices=["subject", "image"])

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except GraphMatchError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"E_CONFIG: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"E_IO: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
