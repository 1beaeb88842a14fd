import math

import numpy as np
import pytest

from cxrprog.augment import AugmentConfig
from cxrprog.autodiff import Tensor, backward
from cxrprog.autodiff.gradcheck import check_gradients
from cxrprog.errors import ContractError, InvalidInputError
from cxrprog.pretrain import (
    PretrainConfig, SupervisedConfig, encode_and_project, enqueue, info_nce_loss, init_moco, load_moco,
    momentum_update, pretrain_epoch, save_moco, supervised_lr_schedule, supervised_pretrain,
)

TINY = dict(encoder_widths=(4, 8), feature_dim=64, batch_size=8, queue_size=32,
            augment=AugmentConfig(target_size=16))


def tiny_cfg(**kw):
    return PretrainConfig(**{**TINY, **kw})


def cluster_corpus(n=48, size=16, seed=0):
    """Images from a handful of distinct prototypes plus a little noise."""
    rng = np.random.default_rng(seed)
    protos = [np.clip(np.kron(rng.uniform(size=(4, 4)), np.ones((size // 4, size // 4))), 0, 1) for _ in range(6)]
    return [np.clip(protos[i % 6] + 0.02 * rng.normal(size=(size, size)), 0, 1) for i in range(n)]


def unit_rows(rng, shape):
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _params_bytes(net):
    return b"".join(p.data.tobytes() for p in net.parameters())


# -- InfoNCE ---------------------------------------------------------------------
@pytest.mark.parametrize("K", [1, 3, 15, 1023])
def test_uniform_logits_give_log_k_plus_one(K):
    q = np.zeros((1, 8))
    q[0, 0] = 1.0
    pos = np.zeros((1, 8))
    pos[0, 1] = 1.0
    queue = np.tile(pos, (K, 1))  # every dot product is 0
    loss, logits = info_nce_loss(Tensor(q), pos, queue, 0.2)
    assert logits.shape == (1, K + 1)
    assert abs(loss.item() - math.log(K + 1)) < 1e-6


def test_dominant_positive_gives_near_zero_loss():
    q = np.array([[1.0, 0.0]])
    loss, _ = info_nce_loss(Tensor(q), q, np.tile([[-1.0, 0.0]], (16, 1)), 0.07)
    assert 0.0 <= loss.item() < 1e-9


def test_info_nce_requires_positive_tau():
    with pytest.raises(ContractError):
        info_nce_loss(Tensor(np.ones((1, 2))), np.ones((1, 2)), np.ones((3, 2)), 0.0)


def test_info_nce_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    q = Tensor(unit_rows(rng, (3, 5)), requires_grad=True)
    k, queue = unit_rows(rng, (3, 5)), unit_rows(rng, (7, 5))
    assert check_gradients(lambda: info_nce_loss(q, k, queue, 0.2)[0], [q]) < 1e-4


def test_logits_bounded_by_inverse_temperature():
    rng = np.random.default_rng(1)
    _, logits = info_nce_loss(Tensor(unit_rows(rng, (4, 6))), unit_rows(rng, (4, 6)), unit_rows(rng, (20, 6)), 0.2)
    assert np.abs(logits).max() <= 1 / 0.2 + 1e-9


# -- momentum update and queue ------------------------------------------------------
def test_momentum_update_examples():
    st = init_moco(tiny_cfg())
    for p in st.query.parameters():
        p.data[...] = 1.0
    for p in st.key.parameters():
        p.data[...] = 0.0
    momentum_update(st.query, st.key, 1.0)
    assert all(not p.data.any() for p in st.key.parameters())
    momentum_update(st.query, st.key, 0.999)
    assert all(np.allclose(p.data, 0.001) for p in st.key.parameters())
    momentum_update(st.query, st.key, 0.0)
    assert _params_bytes(st.key) == _params_bytes(st.query)


def test_enqueue_ring():
    q = np.zeros((4, 2))
    ptr = enqueue(q, 0, np.ones((2, 2)))
    assert ptr == 2
    ptr = enqueue(q, ptr, 2 * np.ones((2, 2)))
    assert ptr == 0 and q.tolist() == [[1, 1], [1, 1], [2, 2], [2, 2]]
    with pytest.raises(ContractError):
        enqueue(q, 0, np.ones((3, 2)))


def test_queue_fully_turns_over():
    rng = np.random.default_rng(2)
    K, B = 32, 8
    queue = unit_rows(rng, (K, 4))
    original = queue.copy()
    ptr = 0
    batches = []
    for _ in range(K // B):
        keys = unit_rows(rng, (B, 4))
        batches.append(keys)
        ptr = enqueue(queue, ptr, keys)
    assert ptr == 0
    assert np.array_equal(queue, np.concatenate(batches))
    assert not any((queue == row).all(axis=1).any() for row in original)


# -- encoder/projection ---------------------------------------------------------
def test_representations_are_unit_norm_and_deterministic():
    st = init_moco(tiny_cfg())
    st.query.eval()
    imgs = cluster_corpus(4)
    r = encode_and_project(st.query, imgs).data
    np.testing.assert_allclose(np.linalg.norm(r, axis=1), 1.0, atol=1e-5)
    assert encode_and_project(st.query, imgs).data.tobytes() == r.tobytes()
    assert not np.array_equal(r[0], r[1])


# -- epochs ------------------------------------------------------------------------
def test_no_gradient_reaches_key_network_or_queue():
    cfg = tiny_cfg()
    st = init_moco(cfg)
    corpus = cluster_corpus(16)
    pretrain_epoch(st, corpus, cfg)
    assert all(p.grad is None for p in st.key.parameters())
    assert all(not p.requires_grad for p in st.key.parameters())
    assert all(p.grad is not None for p in st.query.parameters())


def test_frozen_epoch_only_rotates_the_queue():
    cfg = tiny_cfg(lr=0.0, momentum=1.0, prime_queue=False)
    st = init_moco(cfg)
    before_q, before_k, before_queue = _params_bytes(st.query), _params_bytes(st.key), st.queue.copy()
    pretrain_epoch(st, cluster_corpus(16), cfg)
    assert _params_bytes(st.query) == before_q and _params_bytes(st.key) == before_k
    assert not np.array_equal(st.queue, before_queue) and st.queue_ptr == 16


def test_queue_rows_stay_unit_norm():
    cfg = tiny_cfg()
    st = init_moco(cfg)
    corpus = cluster_corpus(32)
    for _ in range(2):
        pretrain_epoch(st, corpus, cfg)
        np.testing.assert_allclose(np.linalg.norm(st.queue, axis=1), 1.0, atol=1e-5)


def test_corpus_smaller_than_a_batch():
    cfg = tiny_cfg()
    with pytest.raises(InvalidInputError):
        pretrain_epoch(init_moco(cfg), cluster_corpus(4), cfg)


def test_top1_rises_above_chance():
    cfg = tiny_cfg(lr=0.05, momentum=0.9, epochs=5, queue_size=16)
    st = init_moco(cfg)
    corpus = cluster_corpus(48)
    stats = [pretrain_epoch(st, corpus, cfg) for _ in range(5)]
    assert max(s["top1"] for s in stats) > 2.0 / (cfg.queue_size + 1)


def test_key_network_lag_settles():
    cfg = tiny_cfg(lr=0.02, momentum=0.9, epochs=20, cosine=False, queue_size=16)
    st = init_moco(cfg)
    corpus = cluster_corpus(32)
    lags = []
    for _ in range(20):
        pretrain_epoch(st, corpus, cfg)
        lags.append(max(float(np.abs(q.data - k.data).max())
                        for q, k in zip(st.query.parameters(), st.key.parameters())))
    # the lag peaks while the query network moves fastest, then falls to a steady level
    late = lags[-5:]
    assert np.mean(late) < max(lags)
    assert max(late) / min(late) < 1.5


def test_checkpoint_resume_is_exact(tmp_path):
    cfg = tiny_cfg(epochs=2)
    corpus = cluster_corpus(16)
    straight = init_moco(cfg)
    for _ in range(2):
        pretrain_epoch(straight, corpus, cfg)
    resumed = init_moco(cfg)
    pretrain_epoch(resumed, corpus, cfg)
    save_moco(tmp_path / "m.ckpt", resumed, cfg)
    resumed = load_moco(tmp_path / "m.ckpt", cfg)
    pretrain_epoch(resumed, corpus, cfg)
    assert _params_bytes(resumed.query) == _params_bytes(straight.query)
    assert resumed.queue.tobytes() == straight.queue.tobytes()


def test_config_validation():
    with pytest.raises(ContractError):
        tiny_cfg(tau=0.0)
    with pytest.raises(ContractError):
        tiny_cfg(queue_size=12)


# -- supervised baseline --------------------------------------------------------------
def test_supervised_lr_schedule():
    lrs = supervised_lr_schedule(SupervisedConfig())
    assert len(lrs) == 10
    np.testing.assert_allclose(lrs, [10.0 ** -(3 + e) for e in range(10)], rtol=1e-12)


def _findings_corpus(n=32):
    corpus = cluster_corpus(n)
    findings = np.array([[i % 6 < 3, i % 2] for i in range(n)], dtype=np.float32)
    return corpus, findings


def test_supervised_lr_zero_leaves_parameters():
    corpus, findings = _findings_corpus()
    cfg = SupervisedConfig(lr=0.0, epochs=1, batch_size=8, encoder_widths=(4, 8), augment=AugmentConfig(target_size=16))
    from cxrprog.pretrain import FindingsNet
    net = FindingsNet(cfg.encoder_widths, 2, np.random.default_rng([cfg.seed, 0]))
    before = _params_bytes(net)
    supervised_pretrain(corpus, findings, cfg, net)
    assert _params_bytes(net) == before


def test_supervised_loss_decreases():
    corpus, findings = _findings_corpus(48)
    cfg = SupervisedConfig(lr=1e-2, lr_decay=0.7, epochs=4, batch_size=8, encoder_widths=(4, 8),
                           augment=AugmentConfig(target_size=16))
    _, hist = supervised_pretrain(corpus, findings, cfg)
    losses = [h["loss"] for h in hist]
    assert all(b <= a * 1.05 for a, b in zip(losses, losses[1:]))


def test_supervised_requires_data():
    with pytest.raises(InvalidInputError):
        supervised_pretrain([], np.zeros((0, 2)), SupervisedConfig())


def test_backward_through_projection_only_touches_query():
    st = init_moco(tiny_cfg())
    r = encode_and_project(st.query, cluster_corpus(8))
    backward((r * r).sum())
    assert all(p.grad is None for p in st.key.parameters())
