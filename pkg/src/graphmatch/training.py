"""Training: subject splits, triplet mining, the optimizer, and checkpoints.

Each training item is one identity's (query-modality graph, face graph)
pair. A step encodes every pair in the batch, aligns each query against
its own face, mines the hardest in-batch negative face per anchor, and
backpropagates the mean triplet loss with the transport plans frozen.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .align import AlignParams, AlignResult, OTConfig, align_pair, align_pair_backward, layer_norm_rows, pool_embed
from .encoders import EncoderConfig, EncoderParams, encode_backward, encode_forward
from .exceptions import CheckpointError, MiningError, TrainingError
from .numcore import ParamTensor

__all__ = [
    "TrainConfig",
    "ModelParams",
    "Model",
    "OptimizerState",
    "TripletBatch",
    "TrainResult",
    "split_dataset",
    "triplet_loss",
    "triplet_loss_backward",
    "mine_negatives",
    "adamw_step",
    "train_step",
    "train_loop",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    """Optimization, alignment, and ablation settings for one run."""

    epochs: int = 50
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 16
    margin: float = 0.3
    seed: int = 0
    epsilon: float = 0.1
    sinkhorn_iterations: int = 80
    lambda_blend: float = 0.5
    ot_loss_weight: float = 0.0
    ca_on: bool = True
    ot_on: bool = True
    bidirectional_ca: bool = True
    share_encoders: bool = False
    extra_query_layers: int = 0
    val_mode: str = "independent"
    train_ratio: float = 0.70
    val_ratio: float = 0.20
    test_ratio: float = 0.10
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def validate(self) -> None:
        if self.margin < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2 (in-batch negatives), got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.val_mode not in ("independent", "paired"):
            raise ValueError(f"val_mode must be independent or paired, got {self.val_mode!r}")
        ratios = (self.train_ratio, self.val_ratio, self.test_ratio)
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {ratios}")
        self.encoder.validate()

    def ot_config(self) -> OTConfig:
        return OTConfig(self.epsilon, self.sinkhorn_iterations, self.lambda_blend)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        data = dict(data)
        enc = data.pop("encoder", {})
        return cls(encoder=EncoderConfig(**enc), **data)


@dataclass
class ModelParams:
    """Per-modality encoder weights plus the shared alignment parameters."""

    encoders: dict[str, EncoderParams]
    encoder_cfgs: dict[str, EncoderConfig]
    align: AlignParams
    modalities: list[str]
    in_dim: int
    share_encoders: bool

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        modalities,
        in_dim: int,
        cfg: TrainConfig,
    ) -> ModelParams:
        modalities = sorted(set(modalities))
        encoders: dict[str, EncoderParams] = {}
        encoder_cfgs: dict[str, EncoderConfig] = {}
        if cfg.share_encoders:
            shared = EncoderParams.init(rng, cfg.encoder, in_dim, "encoder.shared")
            for m in modalities:
                encoders[m] = shared
                encoder_cfgs[m] = cfg.encoder
        else:
            for m in modalities:
                e_cfg = cfg.encoder
                if m != "face" and cfg.extra_query_layers > 0:
                    e_cfg = replace(cfg.encoder, layers=cfg.encoder.layers + cfg.extra_query_layers)
                encoders[m] = EncoderParams.init(rng, e_cfg, in_dim, f"encoder.{m}")
                encoder_cfgs[m] = e_cfg
        align = AlignParams.init(rng, cfg.encoder.out_dim, cfg.encoder.heads)
        return cls(
            encoders=encoders,
            encoder_cfgs=encoder_cfgs,
            align=align,
            modalities=modalities,
            in_dim=in_dim,
            share_encoders=cfg.share_encoders,
        )

    def encoder_for(self, modality: str) -> tuple[EncoderParams, EncoderConfig]:
        if modality not in self.encoders:
            raise ValueError(
                f"no encoder for modality {modality!r}; model covers {self.modalities}"
            )
        return self.encoders[modality], self.encoder_cfgs[modality]

    def tensors(self) -> list[ParamTensor]:
        out: list[ParamTensor] = []
        seen: set[int] = set()
        for m in self.modalities:
            enc = self.encoders[m]
            if id(enc) in seen:
                continue
            seen.add(id(enc))
            out.extend(enc.tensors())
        out.extend(self.align.tensors())
        return out


@dataclass
class Model:
    """Read-only forward interface over trained parameters."""

    params: ModelParams
    cfg: TrainConfig

    def encode_graph(self, graph) -> np.ndarray:
        enc, e_cfg = self.params.encoder_for(graph.modality)
        h, _ = encode_forward(graph, enc, e_cfg)
        return h

    def embed_independent(self, graph) -> np.ndarray:
        """Encoder-only embedding: pool(layer_norm(encode)), no cross terms."""
        h = self.encode_graph(graph)
        hat = layer_norm_rows(h, self.params.align.gamma.value, self.params.align.beta.value)
        return pool_embed(hat)

    def align_graphs(self, query_graph, face_graph) -> AlignResult:
        h_q = self.encode_graph(query_graph)
        h_f = self.encode_graph(face_graph)
        result, _ = align_pair(
            h_q,
            h_f,
            self.params.align,
            self.cfg.ot_config(),
            ca_on=self.cfg.ca_on,
            ot_on=self.cfg.ot_on,
            bidirectional=self.cfg.bidirectional_ca,
        )
        return result


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def split_dataset(
    subject_ids,
    ratios: tuple[float, float, float] = (0.70, 0.20, 0.10),
    seed: int = 0,
) -> dict[str, str]:
    """Seeded subject-level split with largest-remainder rounding."""
    ids = sorted(set(subject_ids))
    if len(ids) < 3:
        raise ValueError(f"need at least 3 subjects to split, got {len(ids)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    shuffled = [ids[i] for i in rng.permutation(len(ids))]

    # quantize so remainder ties behave as in exact arithmetic
    exact = np.round(np.asarray(ratios, dtype=np.float64) * len(ids), 9)
    counts = np.floor(exact).astype(int)
    leftover = len(ids) - int(counts.sum())
    # distribute leftovers to the largest remainders, earlier split on ties
    remainders = np.round(exact - counts, 9)
    order = np.argsort(-remainders, kind="stable")
    counts[order[:leftover]] += 1

    assignment: dict[str, str] = {}
    cursor = 0
    for name, cnt in zip(("train", "val", "test"), counts):
        for sid in shuffled[cursor : cursor + cnt]:
            assignment[sid] = name
        cursor += cnt
    return assignment


# ---------------------------------------------------------------------------
# Loss and mining
# ---------------------------------------------------------------------------


def triplet_loss(z_a: np.ndarray, z_p: np.ndarray, z_n: np.ndarray, margin: float) -> float:
    """max(0, ||z_a - z_p||^2 - ||z_a - z_n||^2 + margin)."""
    d_ap = float(np.sum((z_a - z_p) ** 2))
    d_an = float(np.sum((z_a - z_n) ** 2))
    return max(0.0, d_ap - d_an + margin)


def triplet_loss_backward(
    z_a: np.ndarray, z_p: np.ndarray, z_n: np.ndarray, margin: float
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Loss plus gradients; the hinge is flat (zero gradient) when inactive."""
    loss = triplet_loss(z_a, z_p, z_n, margin)
    if loss == 0.0:
        zero = np.zeros_like(z_a)
        return loss, zero, zero.copy(), zero.copy()
    dz_a = 2.0 * (z_n - z_p)
    dz_p = -2.0 * (z_a - z_p)
    dz_n = 2.0 * (z_a - z_n)
    return loss, dz_a, dz_p, dz_n


@dataclass
class TripletBatch:
    """Mined triplets referencing in-batch embeddings by index."""

    anchors: list[np.ndarray]
    positives: list[np.ndarray]
    negatives: list[np.ndarray]
    negative_indices: list[int]


def mine_negatives(
    subject_ids: list[str],
    anchor_embeddings: list[np.ndarray],
    face_embeddings: list[np.ndarray],
) -> TripletBatch:
    """Batch-hard mining: nearest other-identity face per anchor.

    Distances are compared squared (same argmin as the Euclidean norm);
    ties resolve to the lower batch index via argmin order.
    """
    n = len(subject_ids)
    negatives: list[np.ndarray] = []
    negative_indices: list[int] = []
    for i in range(n):
        d2 = np.array(
            [
                np.sum((anchor_embeddings[i] - face_embeddings[j]) ** 2)
                if subject_ids[j] != subject_ids[i]
                else np.inf
                for j in range(n)
            ]
        )
        if not np.isfinite(d2).any():
            raise MiningError(
                f"no in-batch negative for subject {subject_ids[i]!r}; "
                "a batch must contain at least two identities"
            )
        j = int(np.argmin(d2))
        negatives.append(face_embeddings[j])
        negative_indices.append(j)
    return TripletBatch(
        anchors=list(anchor_embeddings),
        positives=list(face_embeddings),
        negatives=negatives,
        negative_indices=negative_indices,
    )


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Adaptive-moment accumulators with decoupled weight decay."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, tensors: list[ParamTensor]) -> OptimizerState:
        return cls(
            m=[np.zeros_like(t.value) for t in tensors],
            v=[np.zeros_like(t.value) for t in tensors],
        )


def adamw_step(
    tensors: list[ParamTensor],
    state: OptimizerState,
    learning_rate: float,
    weight_decay: float,
) -> None:
    """p <- p - lr * mhat/(sqrt(vhat)+eps) - lr * wd * p."""
    if len(tensors) != len(state.m):
        raise ValueError("optimizer state does not match parameter list")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for t, m, v in zip(tensors, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * t.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * t.grad**2
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        t.value -= learning_rate * update + learning_rate * weight_decay * t.value


# ---------------------------------------------------------------------------
# Steps and loop
# ---------------------------------------------------------------------------


def train_step(
    batch: list[tuple[str, object, object]],
    params: ModelParams,
    opt_state: OptimizerState,
    cfg: TrainConfig,
) -> float:
    """One optimization step over a batch of (subject, query graph, face graph)."""
    for t in params.tensors():
        t.zero_grad()
    ot_cfg = cfg.ot_config()

    records = []
    for subject, g_query, g_face in batch:
        enc_q, cfg_q = params.encoder_for(g_query.modality)
        enc_f, cfg_f = params.encoder_for(g_face.modality)
        h_q, cache_q = encode_forward(g_query, enc_q, cfg_q)
        h_f, cache_f = encode_forward(g_face, enc_f, cfg_f)
        result, cache_a = align_pair(
            h_q,
            h_f,
            params.align,
            ot_cfg,
            ca_on=cfg.ca_on,
            ot_on=cfg.ot_on,
            bidirectional=cfg.bidirectional_ca,
        )
        records.append((subject, enc_q, cache_q, enc_f, cache_f, result, cache_a))

    subjects = [r[0] for r in records]
    anchors = [r[5].z_m for r in records]
    faces = [r[5].z_n for r in records]
    mined = mine_negatives(subjects, anchors, faces)

    b = len(records)
    total = 0.0
    dz_anchor = [np.zeros_like(z) for z in anchors]
    dz_face = [np.zeros_like(z) for z in faces]
    for i in range(b):
        j = mined.negative_indices[i]
        loss_i, da, dp, dn = triplet_loss_backward(anchors[i], faces[i], faces[j], cfg.margin)
        total += loss_i
        dz_anchor[i] += da / b
        dz_face[i] += dp / b
        dz_face[j] += dn / b
    loss = total / b
    if cfg.ot_loss_weight != 0.0:
        loss += cfg.ot_loss_weight * sum(r[5].transport_cost for r in records) / b
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite training loss: {loss!r}")

    grad_tc = cfg.ot_loss_weight / b if cfg.ot_loss_weight != 0.0 else 0.0
    for i, (_, enc_q, cache_q, enc_f, cache_f, _, cache_a) in enumerate(records):
        dh_q, dh_f = align_pair_backward(
            dz_anchor[i], dz_face[i], cache_a, params.align, grad_transport_cost=grad_tc
        )
        encode_backward(dh_q, cache_q, enc_q)
        encode_backward(dh_f, cache_f, enc_f)

    adamw_step(params.tensors(), opt_state, cfg.learning_rate, cfg.weight_decay)
    return float(loss)


def build_pairs(graphs) -> list[tuple[str, object, object]]:
    """(subject, query graph, face graph) items; faces assigned in sorted order."""
    by_subject: dict[str, dict[str, list]] = {}
    for g in graphs:
        side = "face" if g.modality == "face" else "query"
        by_subject.setdefault(g.subject_id, {"face": [], "query": []})[side].append(g)
    pairs = []
    for subject in sorted(by_subject):
        faces = sorted(by_subject[subject]["face"], key=lambda g: g.graph_id)
        queries = sorted(by_subject[subject]["query"], key=lambda g: g.graph_id)
        if not faces or not queries:
            continue
        for qi, q in enumerate(queries):
            pairs.append((subject, q, faces[qi % len(faces)]))
    return pairs


@dataclass
class TrainResult:
    params: ModelParams
    final_params: ModelParams
    log: list[dict]
    best_epoch: int
    best_val_recall_at_1: float
    split: dict[str, str]


def _val_recall_at_1(val_graphs, model: Model) -> float:
    from . import retrieval

    queries = sorted((g for g in val_graphs if g.modality != "face"), key=lambda g: g.graph_id)
    gallery = sorted((g for g in val_graphs if g.modality == "face"), key=lambda g: g.graph_id)
    if not queries or not gallery:
        return float("nan")
    if model.cfg.val_mode == "paired":
        matrix = retrieval.score_paired(queries, gallery, model)
    else:
        matrix = retrieval.score_independent(queries, gallery, model)
    ranks = [
        retrieval.rank_relevants(
            matrix.scores[qi],
            [gi for gi, gs in enumerate(matrix.gallery_subjects) if gs == qs],
        )
        for qi, qs in enumerate(matrix.query_subjects)
    ]
    return retrieval.recall_at_k(ranks, 1)


def train_loop(graphs, cfg: TrainConfig) -> TrainResult:
    """Train on the subject-split store; keep the best-validation checkpoint.

    Deterministic for a fixed config and seed. Ties on validation Recall@1
    go to the later epoch; with an empty validation split the final
    parameters are retained instead.
    """
    cfg.validate()
    subjects = sorted({g.subject_id for g in graphs})
    split = split_dataset(subjects, (cfg.train_ratio, cfg.val_ratio, cfg.test_ratio), cfg.seed)
    train_pairs = build_pairs([g for g in graphs if split[g.subject_id] == "train"])
    if not train_pairs:
        raise ValueError("empty training split: no query/face pairs to train on")
    val_graphs = [g for g in graphs if split[g.subject_id] == "val"]

    modalities = sorted({g.modality for g in graphs})
    in_dim = graphs[0].node_features.shape[1]
    init_ss, shuffle_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    params = ModelParams.init(np.random.default_rng(init_ss), modalities, in_dim, cfg)
    opt_state = OptimizerState.init(params.tensors())
    shuffle_rng = np.random.default_rng(shuffle_ss)

    best_params = copy.deepcopy(params)
    best_epoch = 0
    best_val = -np.inf
    have_val = False
    log: list[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_pairs))
        chunks = [
            order[i : i + cfg.batch_size].tolist()
            for i in range(0, len(order), cfg.batch_size)
        ]
        if len(chunks) > 1 and len(chunks[-1]) < 2:
            chunks[-2].extend(chunks.pop())
        total = 0.0
        count = 0
        for chunk in chunks:
            batch = [train_pairs[i] for i in chunk]
            loss = train_step(batch, params, opt_state, cfg)
            total += loss * len(batch)
            count += len(batch)
        train_loss = total / count
        val_r1 = _val_recall_at_1(val_graphs, Model(params, cfg))
        log.append({"epoch": epoch, "train_loss": train_loss, "val_recall_at_1": val_r1})
        if np.isfinite(val_r1):
            have_val = True
            if val_r1 >= best_val:
                best_val = val_r1
                best_params = copy.deepcopy(params)
                best_epoch = epoch
    if not have_val:
        best_params = copy.deepcopy(params)
        best_epoch = cfg.epochs
        best_val = float("nan")
    return TrainResult(
        params=best_params,
        final_params=params,
        log=log,
        best_epoch=best_epoch,
        best_val_recall_at_1=float(best_val),
        split=split,
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, cfg: TrainConfig, path, metrics: dict | None = None) -> None:
    """Directory checkpoint: manifest.json plus little-endian f64 weights.bin."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    tensors = params.tensors()
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "train_config": cfg.to_dict(),
        "modalities": params.modalities,
        "in_dim": params.in_dim,
        "parameters": [{"name": t.name, "shape": list(t.shape)} for t in tensors],
        "metrics": metrics or {},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    with open(out / "weights.bin", "wb") as fh:
        for t in tensors:
            fh.write(np.ascontiguousarray(t.value, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, TrainConfig]:
    """Rebuild parameters from a checkpoint directory, verifying structure."""
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest at {root}: {exc}") from exc
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format: {manifest.get('format_version')!r}")
    try:
        cfg = TrainConfig.from_dict(manifest["train_config"])
        modalities = manifest["modalities"]
        in_dim = int(manifest["in_dim"])
        declared = manifest["parameters"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"incomplete checkpoint manifest: {exc}") from exc

    params = ModelParams.init(np.random.default_rng(0), modalities, in_dim, cfg)
    tensors = params.tensors()
    if len(tensors) != len(declared):
        raise CheckpointError(
            f"checkpoint declares {len(declared)} parameters, config implies {len(tensors)}"
        )
    for t, d in zip(tensors, declared):
        if t.name != d.get("name") or list(t.shape) != list(d.get("shape")):
            raise CheckpointError(
                f"parameter mismatch: expected {t.name}{list(t.shape)}, "
                f"manifest has {d.get('name')}{d.get('shape')}"
            )
    try:
        raw = (root / "weights.bin").read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint weights: {exc}") from exc
    flat = np.frombuffer(raw, dtype="<f8")
    expected = sum(int(np.prod(t.shape)) for t in tensors)
    if flat.size != expected:
        raise CheckpointError(
            f"weights length mismatch: {flat.size} values on disk, manifest implies {expected}"
        )
    offset = 0
    for t in tensors:
        n = int(np.prod(t.shape))
        t.value[...] = flat[offset : offset + n].reshape(t.shape)
        offset += n
    return params, cfg
