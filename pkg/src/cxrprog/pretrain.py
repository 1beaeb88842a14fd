"""Momentum-contrast pretraining and the supervised multi-label baseline.

The query network (encoder + projection head) is trained by SGD on the
InfoNCE loss; the key network is an exponential moving average of it and
fills a FIFO queue of unit-norm negatives.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import augment
from .augment import AugmentConfig
from .autodiff import Tensor, backward, concat, no_grad
from .autodiff import checkpoint as ckpt
from .autodiff.nn import Encoder, Linear, MLPHead, Module
from .autodiff.ops import bce_with_logits, l2_normalize, log_softmax
from .autodiff.optim import SGD, Adam, cosine_annealing_lr
from .errors import ContractError, InvalidInputError

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    lr: float = 0.01
    feature_dim: int = 128
    queue_size: int = 1024
    tau: float = 0.2
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 10
    weight_decay: float = 1e-4
    sgd_momentum: float = 0.9
    cosine: bool = True
    # key network normalises with the query network's running statistics
    # instead of its own batch statistics (see _sync_key_buffers)
    key_running_stats: bool = True
    head_norm: bool = True
    prime_queue: bool = True
    encoder_widths: tuple[int, ...] = (16, 32, 64, 128)
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.tau <= 0:
            raise ContractError("tau must be positive")
        if not 0.0 <= self.momentum <= 1.0:
            raise ContractError("momentum coefficient must lie in [0, 1]")
        if self.feature_dim not in (64, 128, 256):
            log.warning("feature_dim %d is outside the searched grid {64, 128, 256}", self.feature_dim)
        if self.queue_size < self.batch_size or self.queue_size % self.batch_size:
            raise ContractError("queue_size must be a positive multiple of batch_size")


class ContrastiveNet(Module):
    """Encoder followed by the projection head; outputs unit vectors."""

    def __init__(self, widths, feature_dim: int, rng: np.random.Generator, head_norm: bool = True):
        super().__init__()
        self.encoder = Encoder(widths, rng=rng)
        emb = self.encoder.embed_dim
        self.head = MLPHead(emb, emb, feature_dim, rng, hidden_norm=head_norm)

    def forward(self, x: Tensor) -> Tensor:
        return l2_normalize(self.head(self.encoder(x)), axis=1)


def _batch_tensor(images: Sequence[np.ndarray]) -> Tensor:
    arr = np.stack(images).astype(np.float32)
    return Tensor(arr[:, None, :, :])


def encode_and_project(net: ContrastiveNet, images) -> Tensor:
    """Representations ``[B, C]`` with unit L2 norm; a single 2-d image gives ``[1, C]``."""
    if isinstance(images, np.ndarray) and images.ndim == 2:
        images = [images]
    x = images if isinstance(images, Tensor) else _batch_tensor(images)
    return net(x)


def info_nce_loss(r_q, r_k, queue: np.ndarray, tau: float):
    """Mean InfoNCE over the batch with the positive as class 0 of K+1 logits.

    Returns ``(loss, logits)``. ``r_k`` and ``queue`` are constants.
    """
    if tau <= 0:
        raise ContractError("tau must be positive")
    if not isinstance(r_q, Tensor):
        r_q = Tensor(r_q)
    if r_q.ndim == 1:
        r_q = r_q.reshape(1, -1)
    k = np.asarray(r_k.data if isinstance(r_k, Tensor) else r_k, dtype=r_q.dtype)
    k = k.reshape(r_q.shape)
    queue = np.asarray(queue, dtype=r_q.dtype)
    if queue.ndim != 2 or queue.shape[1] != r_q.shape[1]:
        raise ContractError(f"queue shape {queue.shape} does not match representation dim {r_q.shape[1]}")
    l_pos = (r_q * Tensor(k)).sum(axis=1, keepdims=True)
    l_neg = r_q @ Tensor(queue.T.copy())
    logits = concat([l_pos, l_neg], axis=1) * (1.0 / tau)
    logp = log_softmax(logits, axis=1)
    loss = -logp[:, 0].sum() * (1.0 / r_q.shape[0])
    return loss, logits.data


def momentum_update(query: Module, key: Module, m: float) -> None:
    """theta_k <- m * theta_k + (1 - m) * theta_q, in place."""
    q_params = dict(query.named_parameters())
    k_params = dict(key.named_parameters())
    if q_params.keys() != k_params.keys():
        raise ContractError("query and key networks have different parameters")
    for name, pk in k_params.items():
        pq = q_params[name]
        if pq.shape != pk.shape:
            raise ContractError(f"{name}: shape {pq.shape} != {pk.shape}")
        if m == 1.0:
            continue
        pk.data *= m
        pk.data += (1.0 - m) * pq.data


def _sync_key_buffers(query: Module, key: Module) -> None:
    """Copy batch-norm running statistics from the query to the key network.

    Keys computed with their own batch statistics carry a fingerprint of the
    batch composition, which the query batch shares; the positive is then
    separable from older queue entries without learning anything about the
    image. Normalising keys with running statistics removes that shortcut.
    """
    src = dict(query.named_buffers())
    for name, buf in key.named_buffers():
        buf[...] = src[name]


def enqueue(queue: np.ndarray, ptr: int, keys: np.ndarray) -> int:
    """Overwrite rows ``[ptr, ptr + B)`` with ``keys``; return the advanced pointer."""
    K, B = queue.shape[0], keys.shape[0]
    if B == 0 or K % B:
        raise ContractError(f"batch size {B} must divide queue size {K}")
    if ptr % B:
        raise ContractError("queue pointer is not aligned to the batch size")
    queue[ptr:ptr + B] = keys
    return (ptr + B) % K


@dataclass
class MoCoState:
    query: ContrastiveNet
    key: ContrastiveNet
    queue: np.ndarray
    queue_ptr: int
    tau: float
    m: float
    optimizer: SGD
    epoch: int = 0
    primed: bool = False

    @property
    def encoder(self) -> Encoder:
        return self.query.encoder


def init_moco(cfg: PretrainConfig) -> MoCoState:
    rng = np.random.default_rng([cfg.seed, 0])
    query = ContrastiveNet(cfg.encoder_widths, cfg.feature_dim, rng, cfg.head_norm)
    key = ContrastiveNet(cfg.encoder_widths, cfg.feature_dim, rng, cfg.head_norm)
    key.load_state_dict(query.state_dict())
    key.requires_grad_(False)
    queue = rng.normal(size=(cfg.queue_size, cfg.feature_dim)).astype(np.float32)
    queue /= np.linalg.norm(queue, axis=1, keepdims=True)
    opt = SGD(query.parameters(), cfg.lr, momentum=cfg.sgd_momentum, weight_decay=cfg.weight_decay)
    return MoCoState(query, key, queue, 0, cfg.tau, cfg.momentum, opt)


def prime_queue(state: MoCoState, corpus: Sequence[np.ndarray], cfg: PretrainConfig) -> None:
    """Fill the queue with keys of augmented corpus images before the first step.

    A queue of random unit vectors is trivially separable from real keys, so
    the cheapest early solution maps every image to one direction; once the
    queue fills with those keys the loss sits at ln(K + 1) with no gradient.
    """
    K, B = state.queue.shape[0], cfg.batch_size
    rng = np.random.default_rng([cfg.seed, 2])
    idx = rng.choice(len(corpus), size=K, replace=K > len(corpus))
    state.key.train(not cfg.key_running_stats)
    if cfg.key_running_stats:
        _sync_key_buffers(state.query, state.key)
    with no_grad():
        for start in range(0, K, B):
            views = [augment.pretrain_view(corpus[i], np.random.default_rng([cfg.seed, 2, start + j]), cfg.augment)
                     for j, i in enumerate(idx[start:start + B])]
            state.queue_ptr = enqueue(state.queue, state.queue_ptr, state.key(_batch_tensor(views)).data)
    state.primed = True


def pretrain_epoch(state: MoCoState, corpus: Sequence[np.ndarray], cfg: PretrainConfig) -> dict:
    """One pass over ``corpus``; returns mean loss and top-1 contrastive accuracy."""
    B = cfg.batch_size
    n_batches = len(corpus) // B
    if n_batches == 0:
        raise InvalidInputError(f"corpus of {len(corpus)} images is smaller than one batch of {B}")
    epoch = state.epoch
    if cfg.prime_queue and not state.primed and epoch == 0:
        prime_queue(state, corpus, cfg)
    order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(len(corpus))
    total_steps = cfg.epochs * n_batches
    losses, hits, seen = [], 0, 0
    state.query.train()
    state.key.train(not cfg.key_running_stats)
    for b in range(n_batches):
        idx = order[b * B:(b + 1) * B]
        pairs = [augment.make_query_key_pair(corpus[i], augment.sample_rng(cfg.seed, epoch, int(i)), cfg.augment)
                 for i in idx]
        xq = _batch_tensor([p[0] for p in pairs])
        xk = _batch_tensor([p[1] for p in pairs])
        if cfg.cosine:
            step = min(epoch * n_batches + b, total_steps)
            state.optimizer.lr = cosine_annealing_lr(step, max(total_steps, 1), cfg.lr)
        if cfg.key_running_stats:
            _sync_key_buffers(state.query, state.key)
        r_q = state.query(xq)
        with no_grad():
            r_k = state.key(xk).data
        loss, logits = info_nce_loss(r_q, r_k, state.queue, state.tau)
        state.optimizer.zero_grad()
        backward(loss)
        state.optimizer.step()
        momentum_update(state.query, state.key, state.m)
        state.queue_ptr = enqueue(state.queue, state.queue_ptr, r_k)
        losses.append(loss.item())
        hits += int((logits.argmax(axis=1) == 0).sum())
        seen += len(idx)
    state.epoch += 1
    return {"epoch": epoch, "loss": float(np.mean(losses)), "top1": hits / seen, "lr": state.optimizer.lr}


def pretrain_moco(corpus: Sequence[np.ndarray], cfg: PretrainConfig, state: MoCoState | None = None,
                  callback=None) -> tuple[MoCoState, list[dict]]:
    state = state or init_moco(cfg)
    history = []
    while state.epoch < cfg.epochs:
        stats = pretrain_epoch(state, corpus, cfg)
        log.info("moco epoch %d loss %.4f top1 %.3f", stats["epoch"], stats["loss"], stats["top1"])
        history.append(stats)
        if callback is not None:
            callback(state, stats)
    return state, history


# -- supervised baseline -----------------------------------------------------
class FindingsNet(Module):
    def __init__(self, widths, n_findings: int, rng: np.random.Generator):
        super().__init__()
        self.encoder = Encoder(widths, rng=rng)
        self.classifier = Linear(self.encoder.embed_dim, n_findings, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.classifier(self.encoder(x))


@dataclass
class SupervisedConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 64
    epochs: int = 10
    lr_decay: float = 0.1
    encoder_widths: tuple[int, ...] = (16, 32, 64, 128)
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)


def supervised_lr_schedule(cfg: SupervisedConfig) -> list[float]:
    return [cfg.lr * cfg.lr_decay ** e for e in range(cfg.epochs)]


def supervised_pretrain(images: Sequence[np.ndarray], findings: np.ndarray, cfg: SupervisedConfig,
                        net: FindingsNet | None = None) -> tuple[FindingsNet, list[dict]]:
    """Multi-label BCE training with flips-only augmentation; lr divided by 10 each epoch."""
    if len(images) == 0:
        raise InvalidInputError("supervised pretraining needs a nonempty corpus")
    findings = np.asarray(findings, dtype=np.float32)
    if net is None:
        net = FindingsNet(cfg.encoder_widths, findings.shape[1], np.random.default_rng([cfg.seed, 0]))
    opt = Adam(net.parameters(), cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    net.train()
    for epoch, lr in enumerate(supervised_lr_schedule(cfg)):
        opt.lr = lr
        order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(len(images))
        losses = []
        for start in range(0, len(images), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            views = [augment.finetune_view(images[i], augment.sample_rng(cfg.seed, epoch, int(i)), cfg.augment)
                     for i in idx]
            logits = net(_batch_tensor(views))
            loss = bce_with_logits(logits, findings[idx])
            opt.zero_grad()
            backward(loss)
            opt.step()
            losses.append(loss.item())
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr})
        log.info("supervised epoch %d loss %.4f lr %.1e", epoch, history[-1]["loss"], lr)
    return net, history


# -- checkpoints -------------------------------------------------------------
def _prefixed(prefix: str, state) -> dict:
    return {f"{prefix}.{k}": v for k, v in state.items()}


def save_moco(path, state: MoCoState, cfg: PretrainConfig) -> None:
    entries = {}
    entries.update(_prefixed("encoder", state.query.encoder.state_dict()))
    entries.update(_prefixed("head", state.query.head.state_dict()))
    entries.update(_prefixed("momentum_encoder", state.key.encoder.state_dict()))
    entries.update(_prefixed("momentum_head", state.key.head.state_dict()))
    entries["__moco__.queue"] = state.queue
    entries["__moco__.queue_ptr"] = np.array(state.queue_ptr, dtype=np.float64)
    entries["__moco__.epoch"] = np.array(state.epoch, dtype=np.float64)
    entries["__optim__.step"] = np.array(state.optimizer.state.step, dtype=np.float64)
    entries.update(dict(state.optimizer.named_buffers("__optim__")))
    meta = {"kind": "moco", "feature_dim": cfg.feature_dim, "widths": ",".join(map(str, cfg.encoder_widths)),
            "tau": cfg.tau, "m": cfg.momentum, "queue_size": cfg.queue_size}
    ckpt.save(path, entries, meta)


def load_moco(path, cfg: PretrainConfig) -> MoCoState:
    entries, _ = ckpt.load(path)
    state = init_moco(cfg)

    def sub(prefix):
        n = len(prefix) + 1
        return {k[n:]: v for k, v in entries.items() if k.startswith(prefix + ".")}

    state.query.encoder.load_state_dict(sub("encoder"))
    state.query.head.load_state_dict(sub("head"))
    state.key.encoder.load_state_dict(sub("momentum_encoder"))
    state.key.head.load_state_dict(sub("momentum_head"))
    state.queue[...] = entries["__moco__.queue"]
    state.queue_ptr = int(entries["__moco__.queue_ptr"])
    state.epoch = int(entries["__moco__.epoch"])
    state.primed = state.epoch > 0  # priming happens inside the first epoch
    state.optimizer.state.step = int(entries["__optim__.step"])
    for name, buf in state.optimizer.named_buffers("__optim__"):
        buf[...] = entries[name]
    return state


def save_supervised(path, net: FindingsNet, cfg: SupervisedConfig) -> None:
    entries = _prefixed("encoder", net.encoder.state_dict())
    entries.update(_prefixed("classifier", net.classifier.state_dict()))
    ckpt.save(path, entries, {"kind": "supervised", "widths": ",".join(map(str, cfg.encoder_widths))})


def load_encoder_state(path) -> tuple[dict, dict]:
    """``encoder.*`` entries (prefix stripped) and the metadata of any pretraining checkpoint."""
    entries, meta = ckpt.load(path)
    enc = {k[len("encoder."):]: v for k, v in entries.items() if k.startswith("encoder.")}
    if not enc:
        raise ContractError(f"{path} holds no encoder.* entries")
    return enc, meta or {}
