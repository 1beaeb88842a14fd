"""Synthetic experiments behind the directional acceptance checks.

* ``run_transfer``: MoCo-pretrained vs supervised-pretrained vs randomly
  initialised encoders, fine-tuned on one synthetic cohort and scored on an
  independent one.
* ``run_sequence``: the multi-image transformer against single-image models
  on cohorts whose opacity grows with scan rank.
* ``bootstrap_coverage`` / ``paired_agreement``: calibration of the bootstrap
  machinery on binormal scores with known population AUC.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.stats import norm

from . import cohort as C
from .augment import AugmentConfig
from .evalstats import ScoredSet, bootstrap_ci, delong_test, paired_bootstrap_diff, roc_auc
from .models import (
    FinetuneConfig, ImageSet, MipConfig, SequenceSet, _SequenceEmbedder, build_mip_model, build_sip_model,
    finetune, finetune_mip, predict_mip, predict_sip,
)
from .pretrain import (
    PretrainConfig, SupervisedConfig, init_moco, pretrain_moco, supervised_pretrain,
)
from .synth import SynthConfig, synth_cohort, synth_pretrain_corpus

log = logging.getLogger(__name__)

DESK_PRETRAIN = PretrainConfig(lr=0.01, momentum=0.9, epochs=10)


def _aug(synth: SynthConfig) -> AugmentConfig:
    return AugmentConfig(target_size=synth.image_size)


def sip_dataset(n_patients: int, synth: SynthConfig, seed: int, task: str = "sip") -> ImageSet:
    coh = synth_cohort(n_patients, synth, seed=seed)
    scans = C.apply_task_filter(coh.scans, coh.events, task)
    return ImageSet.from_examples(C.label_examples(scans, coh.events, C.LAYOUTS[task]), coh.images)


def test_auc(probs: np.ndarray, data: ImageSet | SequenceSet, label: str, layout=C.ADVERSE_LAYOUT) -> float:
    j = layout.index_of(label)
    m = data.mask[:, j]
    return roc_auc(ScoredSet(probs[m, j], data.labels[m, j]))


# -- transfer learning -------------------------------------------------------
@dataclass
class TransferConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    pretrain_images: int = 2000
    corpus_seed: int = 3
    finetune_patients: int = 500
    finetune_seed: int = 100
    test_patients: int = 1000
    test_seed: int = 200
    runs: tuple[int, ...] = (0, 1, 2)
    pretrain: PretrainConfig = field(default_factory=lambda: replace(DESK_PRETRAIN))
    supervised: SupervisedConfig | None = field(default_factory=SupervisedConfig)
    finetune_lr: float = 1e-3
    label: str = "any_adverse@any"


def run_transfer(cfg: TransferConfig, report: Callable[[str], None] = log.info) -> dict:
    """Test AUC on ``cfg.label`` per run for MoCo FT, supervised FT and scratch."""
    t0 = time.perf_counter()
    aug = _aug(cfg.synth)
    corpus = synth_pretrain_corpus(cfg.pretrain_images, cfg.synth, seed=cfg.corpus_seed)
    train = sip_dataset(cfg.finetune_patients, cfg.synth, cfg.finetune_seed)
    test = sip_dataset(cfg.test_patients, cfg.synth, cfg.test_seed)
    layout = C.ADVERSE_LAYOUT
    results: dict[str, list[float]] = {"moco_ft": [], "scratch": []}
    if cfg.supervised is not None:
        results["supervised_ft"] = []

    def fine_tune(encoder_state, mode, seed):
        model = build_sip_model(layout.size, mode, encoder_state, cfg.pretrain.encoder_widths, seed=seed)
        ft = FinetuneConfig(mode=mode, lr=cfg.finetune_lr, seed=seed, monitor=cfg.label, augment=aug)
        finetune(model, train, None, ft, layout)
        return test_auc(predict_sip(model, test.images, aug), test, cfg.label)

    for run in cfg.runs:
        pcfg = replace(cfg.pretrain, seed=run, augment=aug)
        state, hist = pretrain_moco(corpus.images, pcfg, init_moco(pcfg))
        results["moco_ft"].append(fine_tune(state.encoder.state_dict(), "FT", run))
        report(f"run {run}: moco loss {hist[0]['loss']:.3f} -> {hist[-1]['loss']:.3f}, "
               f"FT AUC {results['moco_ft'][-1]:.4f}")
        if cfg.supervised is not None:
            scfg = replace(cfg.supervised, seed=run, augment=aug, encoder_widths=cfg.pretrain.encoder_widths)
            net, _ = supervised_pretrain(corpus.images, corpus.findings, scfg)
            results["supervised_ft"].append(fine_tune(net.encoder.state_dict(), "FT", run))
            report(f"run {run}: supervised FT AUC {results['supervised_ft'][-1]:.4f}")
        results["scratch"].append(fine_tune(None, "SCRATCH", run))
        report(f"run {run}: scratch AUC {results['scratch'][-1]:.4f}")
    summary = {k: float(np.mean(v)) for k, v in results.items()}
    return {"runs": results, "mean": summary, "seconds": time.perf_counter() - t0,
            "n_train": len(train), "n_test": len(test)}


# -- sequence advantage ------------------------------------------------------
@dataclass
class SequenceConfig:
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(trend=0.15))
    train_patients: int = 500
    test_patients: int = 500
    seeds: tuple[int, ...] = (0, 1, 2)
    mip: MipConfig = field(default_factory=lambda: MipConfig(epochs=30))
    cl_epochs: int = 20
    cl_lr: float = 1e-2
    label: str = "any_adverse@96h"


def sequence_data(n_patients: int, synth: SynthConfig, seed: int):
    coh = synth_cohort(n_patients, synth, seed=seed)
    eligible = C.apply_task_filter(coh.scans, coh.events, "mip")
    return SequenceSet.from_sequences(C.build_sequences(eligible, coh.events)), coh.images


def pretrained_encoder(synth: SynthConfig, pretrain: PretrainConfig = DESK_PRETRAIN, n_images: int = 2000,
                       corpus_seed: int = 3) -> dict:
    corpus = synth_pretrain_corpus(n_images, synth, seed=corpus_seed)
    pcfg = replace(pretrain, augment=_aug(synth))
    state, _ = pretrain_moco(corpus.images, pcfg, init_moco(pcfg))
    return state.encoder.state_dict()


def run_sequence(cfg: SequenceConfig, encoder_state: dict, widths=(16, 32, 64, 128),
                 report: Callable[[str], None] = log.info) -> dict:
    """Test AUC of MIP and of the single-image baselines, per seed, on one frozen encoder.

    Single-image baselines see only the index scan of every sequence: a
    linear classifier on the frozen embedding (CL) and the transformer
    itself on length-1 sequences.
    """
    t0 = time.perf_counter()
    aug = _aug(cfg.synth)
    layout = C.ADVERSE_LAYOUT
    out: dict[str, list[float]] = {"mip": [], "cl_last": [], "mip_last": []}
    for seed in cfg.seeds:
        train, images = sequence_data(cfg.train_patients, cfg.synth, 1000 + seed)
        test, test_images = sequence_data(cfg.test_patients, cfg.synth, 2000 + seed)
        # both cohorts number patients from p0, so scan ids collide: keep the image maps apart
        mcfg = replace(cfg.mip, seed=seed, augment=aug, monitor=cfg.label)

        def fit_mip(tr, te):
            model = build_mip_model(layout.size, mcfg, encoder_state, widths)
            finetune_mip(model, tr, None, images, layout)
            embedder = _SequenceEmbedder(model, test_images, te.scan_ids, mcfg)
            return test_auc(predict_mip(model, te, test_images, embedder), te, cfg.label)

        out["mip"].append(fit_mip(train, test))
        out["mip_last"].append(fit_mip(train.last_only(), test.last_only()))
        sip = build_sip_model(layout.size, "CL", encoder_state, widths, seed=seed)
        tr_img = ImageSet([images[ids[-1]] for ids in train.scan_ids], train.labels, train.mask, train.ids)
        te_img = ImageSet([test_images[ids[-1]] for ids in test.scan_ids], test.labels, test.mask, test.ids)
        finetune(sip, tr_img, None, FinetuneConfig(mode="CL", epochs=cfg.cl_epochs, lr=cfg.cl_lr, seed=seed,
                                                   augment=aug), layout)
        out["cl_last"].append(test_auc(predict_sip(sip, te_img.images, aug), te_img, cfg.label))
        report(f"seed {seed}: mip {out['mip'][-1]:.4f}  mip_last {out['mip_last'][-1]:.4f}  "
               f"cl_last {out['cl_last'][-1]:.4f}")
    mean = {k: float(np.mean(v)) for k, v in out.items()}
    best_single = max(mean["cl_last"], mean["mip_last"])
    return {"runs": out, "mean": mean, "gap": mean["mip"] - best_single, "seconds": time.perf_counter() - t0}


# -- bootstrap calibration ---------------------------------------------------
def binormal_scores(n: int, auc: float, rng: np.random.Generator, prevalence: float = 0.5):
    """Scores with population AUC ``auc``: positives N(d, 1), negatives N(0, 1), d = sqrt(2) Phi^-1(auc)."""
    d = math.sqrt(2.0) * norm.ppf(auc)
    labels = (rng.random(n) < prevalence).astype(np.int8)
    while labels.sum() in (0, n):
        labels = (rng.random(n) < prevalence).astype(np.int8)
    return rng.normal(size=n) + d * labels, labels


def bootstrap_coverage(trials: int = 200, n: int = 500, auc: float = 0.75, n_iter: int = 1000,
                       seed: int = 0) -> float:
    """Fraction of percentile intervals that contain the population AUC."""
    hits = 0
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        scores, labels = binormal_scores(n, auc, rng)
        lo, hi = bootstrap_ci(ScoredSet(scores, labels), n_iter, 0.95, rng)
        hits += lo <= auc <= hi
    return hits / trials


def paired_agreement(scenarios: int = 100, n_iter: int = 1000, alpha: float = 0.05, seed: int = 0) -> float:
    """Fraction of random paired scenarios where bootstrap and DeLong agree on significance.

    Both tests are one-sided (model a better). Scenarios vary size, prevalence,
    the AUC of model b, the gain of model a and the correlation between them.
    """
    agree = 0
    for k in range(scenarios):
        rng = np.random.default_rng([seed, 1, k])
        n = int(rng.integers(100, 400))
        labels = (rng.random(n) < rng.uniform(0.2, 0.5)).astype(np.int8)
        labels[:2], labels[2:4] = 1, 0
        d_b = math.sqrt(2.0) * norm.ppf(rng.uniform(0.6, 0.8))
        gain = rng.uniform(0.0, 0.6)
        rho = rng.uniform(0.3, 0.9)
        shared = rng.normal(size=n)
        a = d_b * labels + gain * labels + rho * shared + math.sqrt(1 - rho ** 2) * rng.normal(size=n)
        b = d_b * labels + rho * shared + math.sqrt(1 - rho ** 2) * rng.normal(size=n)
        sa, sb = ScoredSet(a, labels), ScoredSet(b, labels)
        _, p_boot = paired_bootstrap_diff(sa, sb, n_iter, rng)
        _, p_dl = delong_test(sa, sb, alternative="greater")
        agree += (p_boot < alpha) == (p_dl < alpha)
    return agree / scenarios
