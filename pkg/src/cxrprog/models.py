"""Prognosis models: the single-image classifier and the multi-image transformer.

``SipModel`` appends a linear classifier to a (pretrained) encoder and is
fine-tuned in one of four modes. ``MipModel`` embeds every scan of a
sequence, concatenates a sinusoidal embedding of its time before the final
scan, projects, runs a transformer over the sequence and pools.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import augment
from .augment import AugmentConfig
from .autodiff import Tensor, backward, concat, no_grad, sigmoid
from .autodiff import checkpoint as ckpt
from .autodiff.nn import Encoder, Linear, Module, TransformerEncoder
from .autodiff.ops import bce_with_logits, dropout
from .autodiff.optim import cosine_annealing_lr, make_optimizer
from .cohort import LAYOUTS, LabeledExample, LabeledSequence, LabelLayout, SEQUENCE_CUTOFF_HOURS
from .errors import ContractError, InvalidInputError, UndefinedMetricError
from .evalstats import ScoredSet, roc_auc

log = logging.getLogger(__name__)

MODES = ("CL", "FT", "FT_RA", "SCRATCH")
MODE_EPOCHS = {"CL": 5, "FT": 20, "FT_RA": 40, "SCRATCH": 20}
POOLINGS = ("sum", "last")
# flip variants (horizontal, vertical) of one image, in cache order
FLIP_VARIANTS = ((False, False), (True, False), (False, True), (True, True))


# -- datasets ----------------------------------------------------------------
@dataclass
class ImageSet:
    """Images with label matrices; row ``i`` of labels/mask belongs to ``images[i]``."""

    images: list[np.ndarray]
    labels: np.ndarray  # [N, L] int8
    mask: np.ndarray  # [N, L] bool
    ids: list[str]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.labels.ndim != 2:
            self.labels = self.labels.reshape(len(self.images), -1)
        self.mask = np.asarray(self.mask, dtype=bool).reshape(self.labels.shape)
        if len(self.ids) != len(self.images):
            raise ContractError("ids and images differ in length")

    def __len__(self):
        return len(self.images)

    @classmethod
    def from_examples(cls, examples: Sequence[LabeledExample], images: Mapping[str, np.ndarray]) -> "ImageSet":
        if not examples:
            return cls([], np.zeros((0, 0), np.int8), np.zeros((0, 0), bool), [])
        return cls([images[ex.scan.scan_id] for ex in examples],
                   np.stack([ex.labels for ex in examples]),
                   np.stack([ex.mask for ex in examples]),
                   [ex.scan.scan_id for ex in examples])


@dataclass
class SequenceSet:
    """Scan sequences; ``scan_ids[i]`` ends at the index scan whose labels are row ``i``."""

    scan_ids: list[list[str]]
    hours: list[np.ndarray]
    labels: np.ndarray
    mask: np.ndarray
    ids: list[str]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.labels.ndim != 2:
            self.labels = self.labels.reshape(len(self.scan_ids), -1)
        self.mask = np.asarray(self.mask, dtype=bool).reshape(self.labels.shape)
        for h in self.hours:
            check_hours(h)

    def __len__(self):
        return len(self.scan_ids)

    @classmethod
    def from_sequences(cls, seqs: Sequence[LabeledSequence]) -> "SequenceSet":
        if not seqs:
            return cls([], [], np.zeros((0, 0), np.int8), np.zeros((0, 0), bool), [])
        return cls([[s.scan_id for s in q.scans] for q in seqs],
                   [np.asarray(q.hours_before, dtype=np.float64) for q in seqs],
                   np.stack([q.labels for q in seqs]), np.stack([q.mask for q in seqs]),
                   [q.index_scan.scan_id for q in seqs])

    def last_only(self) -> "SequenceSet":
        """The same examples reduced to their index scan."""
        return SequenceSet([ids[-1:] for ids in self.scan_ids], [np.zeros(1) for _ in self.hours],
                           self.labels, self.mask, list(self.ids))


# -- single-image model ------------------------------------------------------
class SipModel(Module):
    """Encoder followed by a linear classifier over the pooled embedding."""

    def __init__(self, encoder: Encoder, n_labels: int, rng: np.random.Generator, mode: str = "FT"):
        super().__init__()
        if mode not in MODES:
            raise ContractError(f"unknown fine-tuning mode {mode!r}")
        self.encoder = encoder
        self.classifier = Linear(encoder.embed_dim, n_labels, rng)
        self.mode = mode
        if mode == "CL":
            encoder.requires_grad_(False)
            encoder.eval()

    @property
    def frozen(self) -> bool:
        return self.mode == "CL"

    def train(self, mode: bool = True) -> "SipModel":
        super().train(mode)
        if self.frozen:
            self.encoder.eval()
        return self

    def trainable_parameters(self):
        return self.classifier.parameters() if self.frozen else self.parameters()

    def head(self, emb: Tensor) -> Tensor:
        return self.classifier(emb)

    def forward(self, x: Tensor) -> Tensor:
        return self.classifier(self.encoder(x))


def sip_forward(model: SipModel, img) -> Tensor:
    """Label logits for one image (``[L]``) or a batch (``[B, L]``)."""
    single = isinstance(img, np.ndarray) and img.ndim == 2
    x = _image_batch([img] if single else img)
    out = model(x)
    return out.reshape(-1) if single else out


def build_sip_model(n_labels: int, mode: str, encoder_state: Mapping | None = None,
                    widths=(16, 32, 64, 128), seed: int = 0) -> SipModel:
    """SCRATCH ignores ``encoder_state``; the other modes start from it."""
    rng = np.random.default_rng([seed, 10])
    encoder = Encoder(widths, rng=rng)
    if mode != "SCRATCH":
        if encoder_state is None:
            raise ContractError(f"mode {mode} needs a pretrained encoder")
        encoder.load_state_dict(encoder_state)
    return SipModel(encoder, n_labels, rng, mode)


# -- time embedding and DropImage -------------------------------------------
def check_hours(hours) -> None:
    h = np.asarray(hours, dtype=np.float64)
    if h.size == 0:
        raise ContractError("a sequence needs at least one scan")
    if np.any(h < 0) or np.any(h >= SEQUENCE_CUTOFF_HOURS) or not np.all(np.isfinite(h)):
        raise ContractError(f"relative times must lie in [0, {SEQUENCE_CUTOFF_HOURS:g}) hours")


def cpe_embed(t, d: int) -> np.ndarray:
    """Sinusoidal embedding of hours-before-final: pairs (sin, cos) of t / 10000^(2i/d).

    Accepts a scalar (returns ``[d]``) or an array of times (returns ``[..., d]``).
    """
    if d <= 0 or d % 2:
        raise ContractError(f"embedding size must be a positive even integer, got {d}")
    t_arr = np.asarray(t, dtype=np.float64)
    check_hours(t_arr.reshape(-1))
    freqs = 10000.0 ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    angles = t_arr[..., None] * freqs
    out = np.empty(t_arr.shape + (d,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def drop_image_mask(n: int, p_drop: float, rng: np.random.Generator) -> np.ndarray:
    """Keep-mask of length n; earlier scans drop independently, the last is always kept."""
    if n < 1:
        raise ContractError("a sequence needs at least one scan")
    if not 0.0 <= p_drop < 1.0:
        raise ContractError("p_drop must lie in [0, 1)")
    keep = np.ones(n, dtype=bool)
    if n > 1:
        keep[:-1] = rng.random(n - 1) >= p_drop
    return keep


# -- multi-image model -------------------------------------------------------
@dataclass
class MipConfig:
    cpe_dim: int = 64
    d_proj: int = 64
    layers: int = 2
    heads: int = 4
    ff_mult: int = 4
    dropout: float = 0.5
    pooling: str = "sum"
    p_drop: float = 0.1
    freeze_encoder: bool = True
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 1e-5
    epochs: int = 50
    batch_size: int = 32
    cosine: bool = False
    seed: int = 0
    monitor: str = "any_adverse@96h"
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.pooling not in POOLINGS:
            raise ContractError(f"pooling must be one of {POOLINGS}")
        if self.cpe_dim % 2 or self.cpe_dim <= 0:
            raise ContractError("cpe_dim must be a positive even integer")
        if not 0.0 <= self.p_drop < 1.0:
            raise ContractError("p_drop must lie in [0, 1)")
        if self.d_proj % self.heads:
            raise ContractError("d_proj must be divisible by the number of heads")


class MipModel(Module):
    def __init__(self, encoder: Encoder, n_labels: int, cfg: MipConfig, rng: np.random.Generator):
        super().__init__()
        self.encoder = encoder
        self.proj = Linear(encoder.embed_dim + cfg.cpe_dim, cfg.d_proj, rng)
        self.transformer = TransformerEncoder(cfg.d_proj, cfg.layers, cfg.heads, cfg.ff_mult * cfg.d_proj,
                                              cfg.dropout, rng)
        self.classifier = Linear(cfg.d_proj, n_labels, rng)
        self.cfg = cfg
        if cfg.freeze_encoder:
            encoder.requires_grad_(False)
            encoder.eval()

    def train(self, mode: bool = True) -> "MipModel":
        super().train(mode)
        if self.cfg.freeze_encoder:
            self.encoder.eval()
        return self

    def trainable_parameters(self):
        if self.cfg.freeze_encoder:
            return self.proj.parameters() + self.transformer.parameters() + self.classifier.parameters()
        return self.parameters()

    def head(self, embeddings: Sequence[Tensor], hours: Sequence[np.ndarray], rng=None) -> Tensor:
        """Logits ``[B, L]`` from per-sequence scan embeddings ``[n_i, E]`` and their times."""
        B = len(embeddings)
        if B == 0 or len(hours) != B:
            raise ContractError("need one time vector per sequence and at least one sequence")
        lengths = np.array([e.shape[0] for e in embeddings])
        for e, h in zip(embeddings, hours):
            if len(h) != e.shape[0]:
                raise ContractError("time vector length differs from the number of scans")
        if np.any(lengths == 0):
            raise ContractError("empty sequence")
        T, E, d = int(lengths.max()), self.encoder.embed_dim, self.cfg.cpe_dim
        flat = concat(list(embeddings), axis=0)
        dtype = flat.dtype
        padded = concat([flat, Tensor(np.zeros((1, E), dtype=dtype))], axis=0)
        key_mask = np.arange(T)[None, :] < lengths[:, None]
        offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        gather = np.where(key_mask, offsets[:, None] + np.arange(T)[None, :], flat.shape[0])
        h = padded[gather]  # [B, T, E]
        times = np.zeros((B, T))
        for b, hr in enumerate(hours):
            times[b, :lengths[b]] = hr
        emb = cpe_embed(times, d) * key_mask[..., None]
        z = concat([h, Tensor(emb.astype(dtype))], axis=2)
        z = dropout(z, self.cfg.dropout, rng, self.training)
        y = self.transformer(self.proj(z), key_mask, rng)
        if self.cfg.pooling == "sum":
            pooled = (y * Tensor(key_mask[..., None].astype(dtype))).sum(axis=1)
        else:
            pooled = y[np.arange(B), lengths - 1]
        return self.classifier(pooled)

    def forward(self, sequences: Sequence[Sequence[np.ndarray]], hours: Sequence[np.ndarray], rng=None) -> Tensor:
        lengths = [len(s) for s in sequences]
        flat = [img for s in sequences for img in s]
        if not flat:
            raise ContractError("empty sequence")
        emb = self.encoder(_image_batch(flat))
        splits, start = [], 0
        for n in lengths:
            splits.append(emb[start:start + n])
            start += n
        return self.head(splits, hours, rng)


def build_mip_model(n_labels: int, cfg: MipConfig, encoder_state: Mapping | None = None,
                    widths=(16, 32, 64, 128)) -> MipModel:
    rng = np.random.default_rng([cfg.seed, 11])
    encoder = Encoder(widths, rng=rng)
    if encoder_state is not None:
        encoder.load_state_dict(encoder_state)
    return MipModel(encoder, n_labels, cfg, rng)


def mip_forward(model: MipModel, images: Sequence[np.ndarray], hours, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
    """Logits ``[L]`` for one sequence of preprocessed images ordered oldest to newest.

    In training mode DropImage removes earlier scans (the final one stays) and
    dropout draws from ``rng``; evaluation is deterministic.
    """
    hours = np.asarray(hours, dtype=np.float64)
    if len(images) == 0:
        raise ContractError("empty sequence")
    if len(hours) != len(images):
        raise ContractError("one relative time per image is required")
    check_hours(hours)
    was_training = model.training
    model.train(training)
    try:
        if training:
            if rng is None:
                raise ContractError("training mode needs an rng")
            keep = drop_image_mask(len(images), model.cfg.p_drop, rng)
            images = [img for img, k in zip(images, keep) if k]
            hours = hours[keep]
        return model([list(images)], [hours], rng).reshape(-1)
    finally:
        model.train(was_training)


# -- fine-tuning ---------------------------------------------------------------
@dataclass
class FinetuneConfig:
    mode: str = "FT"
    epochs: int | None = None  # None -> the mode's default
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 32
    cosine: bool = True
    seed: int = 0
    monitor: str = "any_adverse@96h"
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown fine-tuning mode {self.mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ContractError("optimizer must be 'adam' or 'sgd'")

    @property
    def n_epochs(self) -> int:
        return MODE_EPOCHS[self.mode] if self.epochs is None else int(self.epochs)


def _image_batch(images: Sequence[np.ndarray]) -> Tensor:
    return Tensor(np.stack(images).astype(np.float32)[:, None, :, :])


def eval_view(img: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    return augment.finetune_view(img, None, cfg)


def flip_variant_views(img: np.ndarray, cfg: AugmentConfig) -> list[np.ndarray]:
    """The evaluation view under each of the four flip combinations."""
    base = eval_view(img, cfg)
    rev, keep = slice(None, None, -1), slice(None)
    return [base[rev if v else keep, rev if h else keep].copy() for h, v in FLIP_VARIANTS]


def _flip_draw(rng: np.random.Generator, cfg: AugmentConfig) -> int:
    # consumes the generator exactly like the two random_flip calls of finetune_view
    h = rng.random() < cfg.p_hflip
    v = rng.random() < cfg.p_vflip
    return FLIP_VARIANTS.index((bool(h), bool(v)))


def encode_images(encoder: Encoder, images: Sequence[np.ndarray], batch_size: int = 128) -> np.ndarray:
    """Embeddings of already-preprocessed images with the encoder in evaluation mode."""
    was = encoder.training
    encoder.eval()
    try:
        with no_grad():
            out = [encoder(_image_batch(images[i:i + batch_size])).data
                   for i in range(0, len(images), batch_size)]
    finally:
        encoder.train(was)
    return np.concatenate(out) if out else np.zeros((0, encoder.embed_dim), np.float32)


class EmbeddingCache:
    """Frozen-encoder embeddings of each image under the four flip variants."""

    def __init__(self, encoder: Encoder, images: Mapping[str, np.ndarray] | Sequence[np.ndarray],
                 cfg: AugmentConfig, batch_size: int = 128):
        keys = list(images) if isinstance(images, Mapping) else list(range(len(images)))
        views = []
        for k in keys:
            views.extend(flip_variant_views(images[k], cfg))
        emb = encode_images(encoder, views, batch_size)
        self.index = {k: i for i, k in enumerate(keys)}
        self.table = emb.reshape(len(keys), len(FLIP_VARIANTS), -1)

    def get(self, key, variant: int = 0) -> np.ndarray:
        return self.table[self.index[key], variant]


def _label_aucs(scores: np.ndarray, labels: np.ndarray, mask: np.ndarray, names: Sequence[str]) -> dict:
    out = {}
    for j, name in enumerate(names):
        m = mask[:, j]
        try:
            out[name] = roc_auc(ScoredSet(scores[m, j], labels[m, j]))
        except UndefinedMetricError:
            out[name] = float("nan")
    return out


def _lr_at(cfg, step: int, total: int) -> float:
    return cosine_annealing_lr(min(step, total), total, cfg.lr) if cfg.cosine else cfg.lr


def predict_sip(model: SipModel, images: Sequence[np.ndarray], cfg: AugmentConfig | None = None,
                batch_size: int = 128) -> np.ndarray:
    """Sigmoid probabilities ``[N, L]`` on the deterministic evaluation view."""
    cfg = cfg or AugmentConfig()
    was = model.training
    model.eval()
    try:
        with no_grad():
            out = [sigmoid(model(_image_batch([eval_view(im, cfg) for im in images[i:i + batch_size]]))).data
                   for i in range(0, len(images), batch_size)]
    finally:
        model.train(was)
    return np.concatenate(out).astype(np.float64) if out else np.zeros((0, model.classifier.weight.shape[0]))


def finetune(model: SipModel, train: ImageSet, val: ImageSet | None, cfg: FinetuneConfig,
             layout: LabelLayout) -> tuple[SipModel, list[dict]]:
    """Masked-BCE fine-tuning; returns the model and per-epoch loss / validation AUCs.

    CL trains the classifier on a frozen encoder (frozen BN statistics too);
    its embeddings are computed once per flip variant, which gives the same
    numbers as encoding every augmented batch.
    """
    if len(train) == 0:
        raise InvalidInputError("empty training split")
    if val is not None and len(val) == 0:
        raise InvalidInputError("empty validation split")
    if train.labels.shape[1] != layout.size or model.classifier.weight.shape[0] != layout.size:
        raise ContractError("label layout does not match the dataset or model")
    if cfg.mode != model.mode:
        raise ContractError(f"config mode {cfg.mode} differs from model mode {model.mode}")
    opt = make_optimizer(cfg.optimizer, model.trainable_parameters(), cfg.lr, cfg.weight_decay)
    cache = EmbeddingCache(model.encoder, train.images, cfg.augment) if model.frozen else None
    N, B = len(train), cfg.batch_size
    n_batches = math.ceil(N / B)
    total = max(cfg.n_epochs * n_batches, 1)
    history = []
    for epoch in range(cfg.n_epochs):
        model.train()
        order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(N)
        losses = []
        for b in range(n_batches):
            idx = order[b * B:(b + 1) * B]
            if not train.mask[idx].any():
                continue
            opt.lr = _lr_at(cfg, epoch * n_batches + b, total)
            if cache is not None:
                variants = [_flip_draw(augment.sample_rng(cfg.seed, epoch, int(i)), cfg.augment) for i in idx]
                emb = np.stack([cache.get(int(i), v) for i, v in zip(idx, variants)])
                logits = model.head(Tensor(emb))
            else:
                views = [augment.finetune_view(train.images[i], augment.sample_rng(cfg.seed, epoch, int(i)),
                                               cfg.augment, affine_aug=cfg.mode == "FT_RA") for i in idx]
                logits = model(_image_batch(views))
            loss = bce_with_logits(logits, train.labels[idx].astype(np.float32), train.mask[idx])
            opt.zero_grad()
            backward(loss)
            opt.step()
            losses.append(loss.item())
        entry = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan"), "lr": opt.lr}
        if val is not None:
            entry["val_auc"] = _label_aucs(predict_sip(model, val.images, cfg.augment), val.labels, val.mask,
                                           layout.names)
            entry["val_monitor"] = entry["val_auc"].get(cfg.monitor, float("nan"))
        log.info("finetune %s epoch %d loss %.4f", cfg.mode, epoch, entry["loss"])
        history.append(entry)
    model.eval()
    return model, history


class _SequenceEmbedder:
    """Per-scan embeddings for MIP training: cached when the encoder is frozen."""

    def __init__(self, model: MipModel, images: Mapping[str, np.ndarray], scan_ids, cfg: MipConfig):
        self.model, self.images, self.cfg = model, images, cfg
        self.cache = None
        if cfg.freeze_encoder:
            needed = sorted({s for ids in scan_ids for s in ids})
            self.cache = EmbeddingCache(model.encoder, {s: images[s] for s in needed}, cfg.augment)

    def embed(self, ids: Sequence[str], variants: Sequence[int]) -> Tensor:
        if self.cache is not None:
            return Tensor(np.stack([self.cache.get(s, v) for s, v in zip(ids, variants)]))
        views = [flip_variant_views(self.images[s], self.cfg.augment)[v] for s, v in zip(ids, variants)]
        return self.model.encoder(_image_batch(views))


def predict_mip(model: MipModel, data: SequenceSet, images: Mapping[str, np.ndarray],
                embedder: _SequenceEmbedder | None = None, batch_size: int = 64) -> np.ndarray:
    """Sigmoid probabilities ``[N, L]``; evaluation never drops images."""
    was = model.training
    model.eval()
    try:
        with no_grad():
            out = []
            for start in range(0, len(data), batch_size):
                rows = range(start, min(start + batch_size, len(data)))
                if embedder is not None:
                    embs = [embedder.embed(data.scan_ids[i], [0] * len(data.scan_ids[i])) for i in rows]
                else:
                    embs = []
                    for i in rows:
                        views = [eval_view(images[s], model.cfg.augment) for s in data.scan_ids[i]]
                        embs.append(model.encoder(_image_batch(views)))
                out.append(sigmoid(model.head(embs, [data.hours[i] for i in rows])).data)
    finally:
        model.train(was)
    return np.concatenate(out).astype(np.float64) if out else np.zeros((0, model.classifier.weight.shape[0]))


def finetune_mip(model: MipModel, train: SequenceSet, val: SequenceSet | None, images: Mapping[str, np.ndarray],
                 layout: LabelLayout) -> tuple[MipModel, list[dict]]:
    """Masked-BCE training of the sequence model with DropImage and random flips."""
    cfg = model.cfg
    if len(train) == 0:
        raise InvalidInputError("empty training set")
    if val is not None and len(val) == 0:
        raise InvalidInputError("empty validation set")
    if train.labels.shape[1] != layout.size or model.classifier.weight.shape[0] != layout.size:
        raise ContractError("label layout does not match the dataset or model")
    all_ids = list(train.scan_ids) + (list(val.scan_ids) if val is not None else [])
    embedder = _SequenceEmbedder(model, images, all_ids, cfg)
    opt = make_optimizer(cfg.optimizer, model.trainable_parameters(), cfg.lr, cfg.weight_decay)
    N, B = len(train), cfg.batch_size
    n_batches = math.ceil(N / B)
    total = max(cfg.epochs * n_batches, 1)
    history = []
    for epoch in range(cfg.epochs):
        model.train()
        order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(N)
        losses = []
        for b in range(n_batches):
            idx = order[b * B:(b + 1) * B]
            if not train.mask[idx].any():
                continue
            opt.lr = _lr_at(cfg, epoch * n_batches + b, total)
            embs, hours = [], []
            for i in idx:
                rng = augment.sample_rng(cfg.seed, epoch, int(i))
                ids = train.scan_ids[i]
                keep = drop_image_mask(len(ids), cfg.p_drop, rng)
                kept = [s for s, k in zip(ids, keep) if k]
                variants = [_flip_draw(rng, cfg.augment) for _ in kept]
                embs.append(embedder.embed(kept, variants))
                hours.append(train.hours[i][keep])
            drop_rng = np.random.default_rng([cfg.seed, 3, epoch, b])
            logits = model.head(embs, hours, drop_rng)
            loss = bce_with_logits(logits, train.labels[idx].astype(np.float32), train.mask[idx])
            opt.zero_grad()
            backward(loss)
            opt.step()
            losses.append(loss.item())
        entry = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan"), "lr": opt.lr}
        if val is not None:
            entry["val_auc"] = _label_aucs(predict_mip(model, val, images, embedder), val.labels, val.mask,
                                           layout.names)
            entry["val_monitor"] = entry["val_auc"].get(cfg.monitor, float("nan"))
        log.info("finetune_mip epoch %d loss %.4f", epoch, entry["loss"])
        history.append(entry)
    model.eval()
    return model, history


# -- checkpoints -------------------------------------------------------------
def _layout_meta(layout: LabelLayout) -> dict:
    return {"events": ",".join(layout.events),
            "windows": ",".join("any" if w is None else str(w) for w in layout.windows)}


def layout_from_meta(meta: Mapping) -> LabelLayout:
    events = tuple(meta["events"].split(","))
    windows = tuple(None if w == "any" else int(w) for w in meta["windows"].split(","))
    return LabelLayout(events, windows)


def save_model(path, model: SipModel | MipModel, layout: LabelLayout, task: str, extra: Mapping | None = None) -> None:
    meta = {"task": task, "widths": ",".join(map(str, model.encoder.widths)), **_layout_meta(layout)}
    if isinstance(model, SipModel):
        meta.update(kind="sip", mode=model.mode)
    else:
        cfg = asdict(model.cfg)
        cfg.pop("augment")
        meta.update(kind="mip", **{f"mip.{k}": v for k, v in cfg.items()})
    meta.update(extra or {})
    ckpt.save(path, model.state_dict(), meta)


def _parse_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return {"True": True, "False": False}.get(text, text)


def load_model(path) -> tuple[SipModel | MipModel, LabelLayout, dict]:
    entries, meta = ckpt.load(path)
    if not meta or meta.get("kind") not in ("sip", "mip"):
        raise ContractError(f"{path} is not a prognosis-model checkpoint")
    layout = layout_from_meta(meta)
    widths = tuple(int(w) for w in meta["widths"].split(","))
    if meta["kind"] == "sip":
        model = SipModel(Encoder(widths), layout.size, np.random.default_rng(0), meta["mode"])
    else:
        kw = {k[4:]: _parse_value(v) for k, v in meta.items() if k.startswith("mip.")}
        model = MipModel(Encoder(widths), layout.size, MipConfig(**kw), np.random.default_rng(0))
    model.load_state_dict(entries)
    model.eval()
    return model, layout, meta


def task_layout(task: str) -> LabelLayout:
    try:
        return LAYOUTS[task]
    except KeyError:
        raise ContractError(f"unknown task {task!r}") from None
