import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cxrprog import cohort as C
from cxrprog.augment import AugmentConfig, finetune_view, sample_rng
from cxrprog.autodiff import Tensor, backward
from cxrprog.autodiff.gradcheck import check_gradients
from cxrprog.autodiff.nn import Encoder
from cxrprog.autodiff.ops import bce_with_logits
from cxrprog.errors import ContractError, InvalidInputError
from cxrprog.models import (
    FLIP_VARIANTS, MODE_EPOCHS, EmbeddingCache, FinetuneConfig, ImageSet, MipConfig, SequenceSet, _flip_draw,
    build_mip_model, build_sip_model, cpe_embed, drop_image_mask, encode_images, finetune, finetune_mip,
    flip_variant_views, load_model, mip_forward, predict_mip, predict_sip, save_model, sip_forward,
)
from cxrprog.synth import SynthConfig, synth_cohort

WIDTHS = (4, 8)
AUG = AugmentConfig(target_size=16)
L = C.ADVERSE_LAYOUT


def small_images(n, seed=0, size=16):
    rng = np.random.default_rng(seed)
    return [rng.uniform(size=(size, size)) for _ in range(n)]


def encoder_state(seed=0):
    return Encoder(WIDTHS, rng=np.random.default_rng(seed)).state_dict()


def small_mip(**kw):
    cfg = MipConfig(**{"cpe_dim": 8, "d_proj": 8, "heads": 2, "layers": 1, "augment": AUG, **kw})
    return build_mip_model(L.size, cfg, encoder_state(), widths=WIDTHS)


def image_set(n, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=(n, L.size))
    return ImageSet(small_images(n, seed), labels, np.ones_like(labels, bool), [f"i{k}" for k in range(n)])


# -- CPE -------------------------------------------------------------------------
def test_cpe_at_zero_alternates():
    assert cpe_embed(0.0, 8).tolist() == [0.0, 1.0] * 4


def test_cpe_direct_value():
    e = cpe_embed(math.pi / 2, 16)
    assert e[0] == 1.0 and abs(e[1]) < 1e-15


@given(st.floats(0, 359.999), st.integers(1, 64))
def test_cpe_pairs_lie_on_the_unit_circle(t, half):
    e = cpe_embed(t, 2 * half)
    np.testing.assert_allclose(e[0::2] ** 2 + e[1::2] ** 2, 1.0, atol=1e-6)


def test_cpe_errors():
    with pytest.raises(ContractError):
        cpe_embed(1.0, 7)
    for bad in (-1.0, 360.0):
        with pytest.raises(ContractError):
            cpe_embed(bad, 8)


# -- DropImage ---------------------------------------------------------------------
def test_drop_image_examples():
    rng = np.random.default_rng(0)
    assert drop_image_mask(6, 0.0, rng).all()
    assert drop_image_mask(1, 0.9, rng).tolist() == [True]
    draws = np.array([drop_image_mask(5, 0.5, rng) for _ in range(10_000)])
    assert draws[:, -1].all()
    assert np.all(np.abs(1 - draws[:, :-1].mean(axis=0) - 0.5) <= 0.02)


def test_drop_image_rejects_bad_inputs():
    with pytest.raises(ContractError):
        drop_image_mask(0, 0.1, np.random.default_rng(0))
    with pytest.raises(ContractError):
        drop_image_mask(3, 1.0, np.random.default_rng(0))


# -- single-image model -----------------------------------------------------------
def test_sip_output_matches_layout():
    m = build_sip_model(L.size, "FT", encoder_state(), WIDTHS)
    m.eval()
    assert sip_forward(m, small_images(1)[0]).shape == (20,)
    orp = build_sip_model(C.OXYGEN_LAYOUT.size, "SCRATCH", widths=WIDTHS)
    assert sip_forward(orp, small_images(3)).shape == (3, 5)


def test_zero_classifier_returns_bias():
    m = build_sip_model(L.size, "FT", encoder_state(), WIDTHS)
    m.eval()
    m.classifier.weight.data[...] = 0.0
    m.classifier.bias.data[...] = np.arange(20)
    np.testing.assert_array_equal(sip_forward(m, small_images(1)[0]).data, np.arange(20))


def test_pretrained_modes_need_an_encoder():
    with pytest.raises(ContractError):
        build_sip_model(L.size, "FT", None, WIDTHS)
    with pytest.raises(ContractError):
        build_sip_model(L.size, "BOGUS", encoder_state(), WIDTHS)


def test_mode_epoch_defaults():
    assert {m: FinetuneConfig(mode=m).n_epochs for m in MODE_EPOCHS} == {"CL": 5, "FT": 20, "FT_RA": 40,
                                                                          "SCRATCH": 20}


def test_flip_variant_cache_matches_augmented_views():
    img = small_images(1, seed=3, size=24)[0]
    variants = flip_variant_views(img, AUG)
    for i in range(32):
        v = _flip_draw(sample_rng(5, 1, i), AUG)
        view = finetune_view(img, sample_rng(5, 1, i), AUG)
        assert view.tobytes() == variants[v].tobytes()
    enc = Encoder(WIDTHS, rng=np.random.default_rng(1))
    cache = EmbeddingCache(enc, {"a": img}, AUG)
    for v in range(len(FLIP_VARIANTS)):
        np.testing.assert_array_equal(cache.get("a", v), encode_images(enc, [variants[v]])[0])


def _encoder_bytes(model):
    return b"".join(v.tobytes() for v in model.encoder.state_dict().values())


def test_cl_mode_freezes_encoder_and_statistics():
    model = build_sip_model(L.size, "CL", encoder_state(), WIDTHS)
    probe = small_images(4, seed=9)
    before_emb = encode_images(model.encoder, probe)
    before_enc = _encoder_bytes(model)
    before_cls = model.classifier.weight.data.copy()
    finetune(model, image_set(24), None, FinetuneConfig(mode="CL", epochs=2, batch_size=8, augment=AUG), L)
    assert _encoder_bytes(model) == before_enc
    assert encode_images(model.encoder, probe).tobytes() == before_emb.tobytes()
    assert not np.array_equal(model.classifier.weight.data, before_cls)


def test_zero_learning_rate_keeps_model_and_reports_history():
    model = build_sip_model(L.size, "FT", encoder_state(), WIDTHS)
    before = [p.data.copy() for p in model.parameters()]
    _, hist = finetune(model, image_set(16), image_set(16, seed=1),
                       FinetuneConfig(mode="FT", lr=0.0, epochs=2, batch_size=8, augment=AUG), L)
    assert len(hist) == 2 and "val_auc" in hist[0]
    for p, b in zip(model.parameters(), before):
        assert p.data.tobytes() == b.tobytes()


def test_finetune_rejects_empty_and_mismatched_inputs():
    model = build_sip_model(L.size, "FT", encoder_state(), WIDTHS)
    cfg = FinetuneConfig(mode="FT", epochs=1, augment=AUG)
    empty = ImageSet([], np.zeros((0, 20)), np.zeros((0, 20), bool), [])
    with pytest.raises(InvalidInputError):
        finetune(model, empty, None, cfg, L)
    with pytest.raises(ContractError):
        finetune(model, image_set(4), None, cfg, C.OXYGEN_LAYOUT)


def test_masked_labels_contribute_no_gradient():
    rng = np.random.default_rng(2)
    z = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    t = rng.integers(0, 2, size=(3, 4)).astype(np.float64)
    mask = rng.random((3, 4)) < 0.5
    mask[0, 0], mask[1, 1] = True, False
    backward(bce_with_logits(z, t, mask))
    assert np.all(z.grad[~mask] == 0.0)
    # finite differences agree, including the zero entries
    assert check_gradients(lambda: bce_with_logits(z, t, mask), [z]) < 1e-6


# -- multi-image model -------------------------------------------------------------
def test_single_scan_sequence_structure():
    model = small_mip(dropout=0.0)
    img = small_images(1)[:1]
    out = mip_forward(model, img, [0.0])
    assert out.shape == (20,)
    model.eval()
    emb = model.encoder(Tensor(img[0][None, None].astype(np.float32)))
    z = Tensor(np.concatenate([emb.data, cpe_embed(np.zeros(1), 8).astype(np.float32)], axis=1)[None])
    expected = model.classifier(model.transformer(model.proj(z), np.ones((1, 1), bool)).sum(axis=1))
    np.testing.assert_allclose(out.data, expected.data.reshape(-1), atol=1e-6)


def test_sum_pooling_ignores_order_of_earlier_scans():
    model = small_mip()
    imgs = small_images(4, seed=5)
    hours = np.array([100.0, 60.0, 20.0, 0.0])
    a = mip_forward(model, imgs, hours).data
    b = mip_forward(model, [imgs[1], imgs[0], imgs[2], imgs[3]], hours[[1, 0, 2, 3]]).data
    assert np.abs(a - b).max() < 1e-5


def test_duplicating_final_scan_changes_sum_pooled_logits():
    model = small_mip()
    imgs = small_images(2, seed=6)
    a = mip_forward(model, imgs, [30.0, 0.0]).data
    b = mip_forward(model, imgs + [imgs[-1]], [30.0, 0.0, 0.0]).data
    assert np.abs(a - b).max() > 1e-4


def test_last_pooling_and_eval_determinism():
    model = small_mip(pooling="last", p_drop=0.5)
    imgs = small_images(3, seed=7)
    a = mip_forward(model, imgs, [50.0, 10.0, 0.0])
    b = mip_forward(model, imgs, [50.0, 10.0, 0.0])
    assert a.data.tobytes() == b.data.tobytes()
    t = mip_forward(model, imgs, [50.0, 10.0, 0.0], training=True, rng=np.random.default_rng(0))
    assert t.shape == (20,)


def test_mip_forward_errors():
    model = small_mip()
    with pytest.raises(ContractError):
        mip_forward(model, [], [])
    with pytest.raises(ContractError):
        mip_forward(model, small_images(2), [360.0, 0.0])


def test_mip_gradients_reach_projection_and_concat_input():
    model = small_mip(dropout=0.5).to(np.float64)
    model.train()
    rng = np.random.default_rng(3)
    embs = [Tensor(rng.normal(size=(3, 8)), requires_grad=True), Tensor(rng.normal(size=(1, 8)), requires_grad=True)]
    hours = [np.array([40.0, 12.5, 0.0]), np.zeros(1)]
    targets = rng.integers(0, 2, size=(2, 20)).astype(np.float64)

    def loss():
        return bce_with_logits(model.head(embs, hours, np.random.default_rng(11)), targets)

    assert check_gradients(loss, [model.proj.weight, embs[0], embs[1]], max_coords=40,
                           rng=np.random.default_rng(4)) < 1e-4


def _sequence_data(n, seed=0):
    rng = np.random.default_rng(seed)
    images, ids, hours = {}, [], []
    for i in range(n):
        k = int(rng.integers(1, 4))
        seq = [f"s{i}_{j}" for j in range(k)]
        for s in seq:
            images[s] = rng.uniform(size=(16, 16))
        ids.append(seq)
        hours.append(np.sort(rng.uniform(1, 300, size=k))[::-1] * (np.arange(k) < k - 1))
    labels = rng.integers(0, 2, size=(n, 20))
    return SequenceSet(ids, hours, labels, np.ones_like(labels, bool), [s[-1] for s in ids]), images


def test_finetune_mip_runs_and_eval_is_deterministic():
    data, images = _sequence_data(20)
    model = small_mip(epochs=2, batch_size=8)
    _, hist = finetune_mip(model, data, data, images, L)
    assert len(hist) == 2 and np.isfinite(hist[-1]["loss"])
    a = predict_mip(model, data, images)
    b = predict_mip(model, data, images)
    assert a.tobytes() == b.tobytes()


def test_finetune_mip_single_scan_sequences():
    data, images = _sequence_data(12, seed=1)
    model = small_mip(epochs=1, batch_size=4, p_drop=0.0)
    finetune_mip(model, data.last_only(), None, images, L)
    with pytest.raises(InvalidInputError):
        finetune_mip(model, SequenceSet([], [], np.zeros((0, 20)), np.zeros((0, 20), bool), []), None, images, L)


# -- checkpoints -------------------------------------------------------------------------
def test_reloaded_models_give_identical_logits(tmp_path):
    sip = build_sip_model(L.size, "FT", encoder_state(), WIDTHS)
    imgs = small_images(3, seed=8)
    save_model(tmp_path / "sip.ckpt", sip, L, "sip")
    back, layout, meta = load_model(tmp_path / "sip.ckpt")
    assert layout == L and meta["mode"] == "FT"
    assert predict_sip(back, imgs, AUG).tobytes() == predict_sip(sip, imgs, AUG).tobytes()

    mip = small_mip(pooling="last")
    data, images = _sequence_data(5, seed=2)
    save_model(tmp_path / "mip.ckpt", mip, L, "mip")
    back, _, meta = load_model(tmp_path / "mip.ckpt")
    assert back.cfg.pooling == "last"
    # the reloaded config carries the default augmentation, so compare on explicit views
    back.cfg = mip.cfg
    assert predict_mip(back, data, images).tobytes() == predict_mip(mip, data, images).tobytes()


# -- end to end on planted signal ----------------------------------------------------------
@pytest.mark.slow
def test_fine_tuning_recovers_planted_signal():
    cfg = SynthConfig(image_size=32, hazard_steepness=14.0)
    aug = AugmentConfig(target_size=32)

    def split(n, seed):
        coh = synth_cohort(n, cfg, seed=seed)
        scans = C.apply_task_filter(coh.scans, coh.events, "sip")
        return ImageSet.from_examples(C.label_examples(scans, coh.events), coh.images)

    train, val = split(300, 1), split(200, 2)
    model = build_sip_model(L.size, "SCRATCH", widths=(8, 16, 32), seed=0)
    ft = FinetuneConfig(mode="SCRATCH", lr=3e-3, epochs=15, monitor="any_adverse@any", augment=aug)
    _, hist = finetune(model, train, val, ft, L)
    assert hist[-1]["val_monitor"] > 0.9
