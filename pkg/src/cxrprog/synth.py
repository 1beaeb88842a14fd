"""Synthetic radiograph cohorts with planted, tunable signal.

Each patient has a latent severity ``s ~ U[0, 1]``. Scans show Gaussian
opacity blobs inside two lung fields with amplitude
``a0 * (s + trend * scan_rank) + noise``; adverse events arrive with
exponential hazards that grow with ``s``. Ground truth is written next to
the records in ``latent.csv`` so tests can check the planted relations.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .cohort import EventRecord, ScanRecord, write_events, write_scans
from .errors import ContractError
from .pgm import write_pgm

FINDINGS = ("left_opacity", "right_opacity", "dense_opacity", "basal_band")


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    amplitude: float = 0.55  # a0
    trend: float = 0.0  # per-scan-rank increase of the opacity amplitude
    amplitude_noise: float = 0.05
    pixel_noise: float = 0.03
    texture: float = 0.06
    blob_sigma: tuple[float, float] = (4.0, 7.0)
    max_scans: int = 6
    scan_gap_hours: tuple[float, float] = (12.0, 96.0)
    ed_revisit_prob: float = 0.1
    followup_hours: float = 720.0
    hazard_steepness: float = 7.0
    # per-hour hazard at s = 0.5
    icu_rate: float = 0.0025
    intubation_rate: float = 0.0015
    mortality_rate: float = 0.0008
    o2_rate: float = 0.004
    o2_days: tuple[int, int] = (1, 5)
    bits: int = 8
    focal_weight: float = 1.0
    diffuse_weight: float = 0.5
    diffuse_scale: float = 1.5  # smoothing of the patchy diffuse pattern, pixels
    anatomy_jitter: float = 0.04
    lung_scale: tuple[float, float] = (0.85, 1.15)
    exposure_gradient: float = 0.15


@dataclass
class SynthCohort:
    scans: list[ScanRecord]
    events: list[EventRecord]
    images: dict[str, np.ndarray]  # scan_id -> image
    severity: dict[str, float]  # patient_id -> s
    amplitude: dict[str, float]  # scan_id -> planted blob amplitude
    scan_rank: dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class Anatomy:
    """Per-patient appearance shared by all of that patient's scans."""

    shift: tuple[float, float] = (0.0, 0.0)  # lung-field offset, fraction of the image
    lung_scale: float = 1.0
    gradient: tuple[float, float] = (0.0, 0.0)  # exposure ramp along rows / cols


def sample_anatomy(rng: np.random.Generator, cfg: SynthConfig) -> Anatomy:
    j, g = cfg.anatomy_jitter, cfg.exposure_gradient
    return Anatomy((float(rng.uniform(-j, j)), float(rng.uniform(-j, j))),
                   float(rng.uniform(*cfg.lung_scale)),
                   (float(rng.uniform(-g, g)), float(rng.uniform(-g, g))))


def _lung_geometry(n: int, anatomy: Anatomy):
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) / (n - 1)
    dy, dx = anatomy.shift
    k = anatomy.lung_scale
    body = np.exp(-(((xx - 0.5 - dx) / (0.46 * k)) ** 8 + ((yy - 0.52 - dy) / (0.48 * k)) ** 8))
    cy = 0.5 + dy
    left = ((xx - 0.5 - dx + 0.19 * k) / (0.15 * k)) ** 2 + ((yy - cy) / (0.3 * k)) ** 2 < 1.0
    right = ((xx - 0.5 - dx - 0.19 * k) / (0.15 * k)) ** 2 + ((yy - cy) / (0.3 * k)) ** 2 < 1.0
    return yy, xx, body, left, right


def render_image(rng: np.random.Generator, cfg: SynthConfig, blobs, amplitude: float,
                 basal_band: float = 0.0, anatomy: Anatomy | None = None) -> np.ndarray:
    """Chest-like background plus opacity of the given amplitude.

    The opacity has a focal part (Gaussian blobs, ``blobs`` given as
    (row, col, sigma) in pixels) and a diffuse patchy part spread over both
    lung fields.
    """
    n = cfg.image_size
    anatomy = anatomy or Anatomy()
    yy, xx, body, left, right = _lung_geometry(n, anatomy)
    lungs = ndimage.gaussian_filter((left | right).astype(np.float64), 1.5)
    img = 0.15 + 0.45 * body - 0.3 * lungs
    img += anatomy.gradient[0] * (yy - 0.5) + anatomy.gradient[1] * (xx - 0.5)
    img += cfg.texture * ndimage.gaussian_filter(rng.normal(size=(n, n)), 3.0) * 3.0
    rows, cols = np.mgrid[0:n, 0:n].astype(np.float64)
    focal = np.zeros((n, n))
    for r, c, sg in blobs:
        focal += np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2 * sg ** 2))
    patch = ndimage.gaussian_filter(rng.normal(size=(n, n)), cfg.diffuse_scale)
    patch = 0.5 + 0.5 * np.tanh(patch / (patch.std() + 1e-12))
    img += amplitude * (cfg.focal_weight * focal + cfg.diffuse_weight * patch) * lungs
    if basal_band:
        img += basal_band * np.exp(-((yy - 0.78 - anatomy.shift[0]) / 0.05) ** 2) * lungs
    img += cfg.pixel_noise * rng.normal(size=(n, n))
    return np.clip(img, 0.0, 1.0)


def _sample_blobs(rng: np.random.Generator, cfg: SynthConfig, sides=("left", "right"),
                  anatomy: Anatomy | None = None):
    n = cfg.image_size
    anatomy = anatomy or Anatomy()
    dy, dx = anatomy.shift
    k = anatomy.lung_scale
    blobs = []
    for side in sides:
        cx = 0.5 + dx + (-0.19 if side == "left" else 0.19) * k
        r = (0.5 + dy + rng.uniform(-0.2, 0.2) * k) * (n - 1)
        c = (cx + rng.uniform(-0.06, 0.06) * k) * (n - 1)
        blobs.append((r, c, rng.uniform(*cfg.blob_sigma)))
    return blobs


def hazard(s: float, base_rate: float, steepness: float) -> float:
    return base_rate * math.exp(steepness * (s - 0.5))


def simulate_patient(pid: str, rng: np.random.Generator, cfg: SynthConfig):
    s = float(rng.uniform())
    t0 = float(np.round(rng.uniform(0.0, 24.0 * 90), 2))
    horizon = t0 + cfg.followup_hours
    events: list[EventRecord] = []
    for etype, rate in (("icu", cfg.icu_rate), ("intubation", cfg.intubation_rate),
                        ("mortality", cfg.mortality_rate)):
        t = t0 + rng.exponential(1.0 / hazard(s, rate, cfg.hazard_steepness))
        if t <= horizon:
            events.append(EventRecord(pid, etype, float(np.round(t, 2))))
    o2_onset = t0 + rng.exponential(1.0 / hazard(s, cfg.o2_rate, cfg.hazard_steepness))
    n_days = int(rng.integers(cfg.o2_days[0], cfg.o2_days[1] + 1))
    for d in range(n_days):
        t = o2_onset + 24.0 * d
        if t <= horizon:
            events.append(EventRecord(pid, "o2_gt6l", float(np.round(t, 2))))
    death = next((e.event_time for e in events if e.event_type == "mortality"), math.inf)
    events = sorted((e for e in events if e.event_time <= death), key=lambda e: (e.event_time, e.event_type))

    n_scans = int(rng.integers(1, cfg.max_scans + 1))
    times = [t0]
    for _ in range(n_scans - 1):
        times.append(float(np.round(times[-1] + rng.uniform(*cfg.scan_gap_hours), 2)))
    times = [t for t in times if t < min(death, horizon)]
    anatomy = sample_anatomy(rng, cfg)
    blobs = _sample_blobs(rng, cfg, anatomy=anatomy)
    scans, images, amps, ranks = [], {}, {}, {}
    for rank, t in enumerate(times):
        loc = "ed" if rank == 0 or rng.random() < cfg.ed_revisit_prob else "inpatient"
        sid = f"{pid}_s{rank}"
        a = max(cfg.amplitude * (s + cfg.trend * rank) + rng.normal(0.0, cfg.amplitude_noise), 0.0)
        images[sid] = render_image(rng, cfg, blobs, a, anatomy=anatomy)
        amps[sid] = a
        ranks[sid] = rank
        scans.append(ScanRecord(pid, sid, t, loc, f"images/{sid}.pgm"))
    return s, events, scans, images, amps, ranks


def synth_cohort(n_patients: int, cfg: SynthConfig | None = None, seed: int = 0, out_dir=None) -> SynthCohort:
    """Generate a cohort; with ``out_dir`` also write PGMs, CSVs and ``latent.csv``."""
    if n_patients < 1:
        raise ContractError("n_patients must be >= 1")
    cfg = cfg or SynthConfig()
    root = np.random.SeedSequence(seed)
    cohort = SynthCohort([], [], {}, {}, {})
    width = len(str(n_patients - 1))
    for i, child in enumerate(root.spawn(n_patients)):
        pid = f"p{i:0{width}d}"
        s, events, scans, images, amps, ranks = simulate_patient(pid, np.random.default_rng(child), cfg)
        cohort.severity[pid] = s
        cohort.events.extend(events)
        cohort.scans.extend(scans)
        cohort.images.update(images)
        cohort.amplitude.update(amps)
        cohort.scan_rank.update(ranks)
    if out_dir is not None:
        write_cohort(cohort, out_dir, cfg)
    return cohort


def write_cohort(cohort: SynthCohort, out_dir, cfg: SynthConfig) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for s in cohort.scans:
        write_pgm(out / s.image_path, cohort.images[s.scan_id], bits=cfg.bits)
    write_events(out / "events.csv", cohort.events)
    write_scans(out / "scans.csv", cohort.scans)
    with open(out / "latent.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["scan_id", "patient_id", "severity", "amplitude", "scan_rank"])
        for s in cohort.scans:
            w.writerow([s.scan_id, s.patient_id, repr(cohort.severity[s.patient_id]),
                        repr(cohort.amplitude[s.scan_id]), cohort.scan_rank[s.scan_id]])


@dataclass
class PretrainCorpus:
    images: list[np.ndarray]
    findings: np.ndarray  # [N, len(FINDINGS)] in {0, 1}
    names: list[str]


def synth_pretrain_corpus(n_images: int, cfg: SynthConfig | None = None, seed: int = 0,
                          out_dir=None) -> PretrainCorpus:
    """Unrelated-patient radiographs with multi-label findings (supervised pretraining stand-in)."""
    if n_images < 1:
        raise ContractError("n_images must be >= 1")
    cfg = cfg or SynthConfig()
    images, findings, names = [], [], []
    width = len(str(n_images - 1))
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n_images)):
        rng = np.random.default_rng(child)
        sides = [side for side in ("left", "right") if rng.random() < 0.6]
        a = cfg.amplitude * rng.uniform(0.0, 1.3)
        band = 0.25 * cfg.amplitude if rng.random() < 0.3 else 0.0
        anatomy = sample_anatomy(rng, cfg)
        img = render_image(rng, cfg, _sample_blobs(rng, cfg, sides, anatomy), a, basal_band=band, anatomy=anatomy)
        visible = a > 0.25 * cfg.amplitude
        findings.append([
            int(visible and "left" in sides),
            int(visible and "right" in sides),
            int(bool(sides) and a > 0.8 * cfg.amplitude),
            int(band > 0),
        ])
        images.append(img)
        names.append(f"img{i:0{width}d}")
    corpus = PretrainCorpus(images, np.asarray(findings, dtype=np.int8), names)
    if out_dir is not None:
        out = Path(out_dir)
        (out / "images").mkdir(parents=True, exist_ok=True)
        with open(out / "findings.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["image_path", *FINDINGS])
            for name, img, row in zip(names, images, corpus.findings):
                rel = f"images/{name}.pgm"
                write_pgm(out / rel, img, bits=cfg.bits)
                w.writerow([rel, *map(int, row)])
    return corpus


def config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)
