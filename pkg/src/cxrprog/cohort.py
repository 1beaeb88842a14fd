"""Clinical records, window labels, task filters, sequences and splits.

Times are decimal hours since an arbitrary cohort epoch. A label
``(event, w)`` for a scan at time ``t`` is positive iff an event of that type
falls in ``(t, t + w]``; the ``any`` window is ``(t, inf)``.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, IntegrityError, InvalidInputError, ParseError

log = logging.getLogger(__name__)

EVENT_TYPES = ("icu", "intubation", "mortality", "o2_gt6l")
ADVERSE_TYPES = ("icu", "intubation", "mortality")
LOCATIONS = ("ed", "inpatient")
WINDOWS = (24, 48, 72, 96, None)
SEQUENCE_CUTOFF_HOURS = 360.0
EVENTS_HEADER = ["patient_id", "event_type", "event_time_hours"]
SCANS_HEADER = ["patient_id", "scan_id", "acquired_time_hours", "location", "image_path"]


@dataclass(frozen=True)
class EventRecord:
    patient_id: str
    event_type: str
    event_time: float


@dataclass(frozen=True)
class ScanRecord:
    patient_id: str
    scan_id: str
    acquired_time: float
    location: str
    image_path: str


@dataclass(frozen=True)
class LabelLayout:
    """Label vector layout: ``index = event_index * len(windows) + window_index``."""

    events: tuple[str, ...]
    windows: tuple[int | None, ...] = WINDOWS

    @property
    def size(self) -> int:
        return len(self.events) * len(self.windows)

    def index(self, event: str, window: int | None) -> int:
        return self.events.index(event) * len(self.windows) + self.windows.index(window)

    @property
    def names(self) -> list[str]:
        return [label_name(e, w) for e in self.events for w in self.windows]

    def index_of(self, name: str) -> int:
        return self.names.index(name)


def label_name(event: str, window: int | None) -> str:
    return f"{event}@{'any' if window is None else f'{window}h'}"


ADVERSE_LAYOUT = LabelLayout(("icu", "intubation", "mortality", "any_adverse"))
OXYGEN_LAYOUT = LabelLayout(("oxygen_gt_6l",))
LAYOUTS = {"sip": ADVERSE_LAYOUT, "mip": ADVERSE_LAYOUT, "orp": OXYGEN_LAYOUT}
PRIMARY_LABEL = {"sip": "any_adverse@96h", "mip": "any_adverse@96h", "orp": "oxygen_gt_6l@96h"}

# layout event name -> raw event types it covers
_LAYOUT_EVENT_SOURCES = {
    "icu": ("icu",),
    "intubation": ("intubation",),
    "mortality": ("mortality",),
    "any_adverse": ADVERSE_TYPES,
    "oxygen_gt_6l": ("o2_gt6l",),
}


@dataclass
class LabeledExample:
    scan: ScanRecord
    labels: np.ndarray  # int8, layout order
    mask: np.ndarray  # bool, False where the label is undefined (censored)


@dataclass
class LabeledSequence:
    patient_id: str
    scans: list[ScanRecord]
    hours_before: np.ndarray  # strictly decreasing to 0 at the index scan
    labels: np.ndarray
    mask: np.ndarray

    @property
    def index_scan(self) -> ScanRecord:
        return self.scans[-1]


# -- ingestion -------------------------------------------------------------
def _read_rows(path, header: list[str]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None:
            return
        if [c.strip() for c in first] != header:
            raise ParseError(f"expected header {','.join(header)}, got {','.join(first)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            yield lineno, [c.strip() for c in row]


def _parse_time(text: str, lineno: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"{column} is not numeric: {text!r}", line=lineno) from None
    if not math.isfinite(value):
        raise ParseError(f"{column} is not finite: {text!r}", line=lineno)
    return value


def read_events(path) -> list[EventRecord]:
    events = []
    for lineno, (pid, etype, etime) in _read_rows(path, EVENTS_HEADER):
        if etype not in EVENT_TYPES:
            raise ParseError(f"unknown event_type {etype!r}", line=lineno)
        if not pid:
            raise ParseError("empty patient_id", line=lineno)
        events.append(EventRecord(pid, etype, _parse_time(etime, lineno, "event_time_hours")))
    return events


def read_scans(path) -> list[ScanRecord]:
    scans = []
    for lineno, (pid, sid, t, loc, img) in _read_rows(path, SCANS_HEADER):
        if loc not in LOCATIONS:
            raise ParseError(f"unknown location {loc!r}", line=lineno)
        if not pid or not sid:
            raise ParseError("empty patient_id or scan_id", line=lineno)
        scans.append(ScanRecord(pid, sid, _parse_time(t, lineno, "acquired_time_hours"), loc, img))
    return scans


def validate(events: Sequence[EventRecord], scans: Sequence[ScanRecord]) -> None:
    seen: set[str] = set()
    for s in scans:
        if s.scan_id in seen:
            raise IntegrityError(f"duplicate scan_id {s.scan_id!r}")
        seen.add(s.scan_id)
    for pid, evs in group_events(events).items():
        deaths = [e.event_time for e in evs if e.event_type == "mortality"]
        if len(deaths) > 1:
            raise IntegrityError(f"patient {pid!r} has {len(deaths)} mortality events")
        if deaths and any(e.event_time > deaths[0] for e in evs):
            raise IntegrityError(f"patient {pid!r} has events after mortality")
    scan_patients = {s.patient_id for s in scans}
    orphans = sorted({e.patient_id for e in events} - scan_patients)
    if orphans:
        log.warning("%d patients have events but no scans (e.g. %s)", len(orphans), orphans[0])


def ingest(events_file, scans_file) -> tuple[list[EventRecord], list[ScanRecord]]:
    events = read_events(events_file)
    scans = read_scans(scans_file)
    validate(events, scans)
    return events, scans


def _fmt(x: float) -> str:
    return repr(float(x))


def write_events(path, events: Iterable[EventRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(EVENTS_HEADER)
        for e in events:
            w.writerow([e.patient_id, e.event_type, _fmt(e.event_time)])


def write_scans(path, scans: Iterable[ScanRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(SCANS_HEADER)
        for s in scans:
            w.writerow([s.patient_id, s.scan_id, _fmt(s.acquired_time), s.location, s.image_path])


# -- labels ----------------------------------------------------------------
def group_events(events: Iterable[EventRecord]) -> dict[str, list[EventRecord]]:
    by_patient: dict[str, list[EventRecord]] = defaultdict(list)
    for e in events:
        by_patient[e.patient_id].append(e)
    for evs in by_patient.values():
        evs.sort(key=lambda e: e.event_time)
    return dict(by_patient)


def _patient_events(scan: ScanRecord, events) -> Sequence[EventRecord]:
    if isinstance(events, Mapping):
        return events.get(scan.patient_id, ())
    return [e for e in events if e.patient_id == scan.patient_id]


def window_labels(scan: ScanRecord, events, layout: LabelLayout = ADVERSE_LAYOUT,
                  followup_end: Mapping[str, float] | None = None) -> LabeledExample:
    """Binary labels for ``scan``; ``events`` is a list or a patient->events mapping.

    With ``followup_end`` given, a negative label whose window reaches past
    the patient's follow-up end is masked as undefined.
    """
    evs = _patient_events(scan, events)
    t0 = scan.acquired_time
    labels = np.zeros(layout.size, dtype=np.int8)
    mask = np.ones(layout.size, dtype=bool)
    end = None if followup_end is None else followup_end.get(scan.patient_id, t0)
    nw = len(layout.windows)
    for ei, name in enumerate(layout.events):
        sources = _LAYOUT_EVENT_SOURCES[name]
        future = [e.event_time - t0 for e in evs if e.event_type in sources and e.event_time > t0]
        first = min(future) if future else math.inf
        for wi, w in enumerate(layout.windows):
            horizon = math.inf if w is None else float(w)
            positive = bool(future) and first <= horizon
            labels[ei * nw + wi] = positive
            if end is not None and not positive and t0 + horizon > end:
                mask[ei * nw + wi] = False
    return LabeledExample(scan, labels, mask)


# -- task filters ----------------------------------------------------------
def first_adverse_times(events: Iterable[EventRecord]) -> dict[str, float]:
    first: dict[str, float] = {}
    for e in events:
        if e.event_type in ADVERSE_TYPES:
            first[e.patient_id] = min(first.get(e.patient_id, math.inf), e.event_time)
    return first


def apply_task_filter(scans: Sequence[ScanRecord], events: Iterable[EventRecord], task: str) -> list[ScanRecord]:
    """Eligible scans for ``task``.

    sip: ED scans with no adverse event at or before the scan time.
    orp: every ED scan.
    mip: ED and inpatient scans strictly before the first adverse event.
    """
    task = task.lower()
    if task not in ("sip", "orp", "mip"):
        raise ContractError(f"unknown task {task!r}")
    first = first_adverse_times(events)

    def before_first(s):
        return s.acquired_time < first.get(s.patient_id, math.inf)

    if task == "orp":
        return [s for s in scans if s.location == "ed"]
    if task == "sip":
        return [s for s in scans if s.location == "ed" and before_first(s)]
    return [s for s in scans if before_first(s)]


def build_sequences(scans: Sequence[ScanRecord], events, layout: LabelLayout = ADVERSE_LAYOUT,
                    cutoff: float = SEQUENCE_CUTOFF_HOURS) -> list[LabeledSequence]:
    """One sequence per eligible scan: it plus prior scans less than ``cutoff`` hours earlier."""
    grouped = events if isinstance(events, Mapping) else group_events(events)
    by_patient: dict[str, list[ScanRecord]] = defaultdict(list)
    for s in scans:
        by_patient[s.patient_id].append(s)
    out = []
    for pid in sorted(by_patient):
        ordered = sorted(by_patient[pid], key=lambda s: (s.acquired_time, s.scan_id))
        for j, index_scan in enumerate(ordered):
            t = index_scan.acquired_time
            prior = [s for s in ordered[:j] if s.acquired_time < t and t - s.acquired_time < cutoff]
            # keep one scan per timestamp so times stay strictly increasing
            dedup: dict[float, ScanRecord] = {}
            for s in prior:
                dedup[s.acquired_time] = s
            members = [dedup[k] for k in sorted(dedup)] + [index_scan]
            hours = np.array([t - s.acquired_time for s in members], dtype=np.float64)
            ex = window_labels(index_scan, grouped, layout)
            out.append(LabeledSequence(pid, members, hours, ex.labels, ex.mask))
    return out


def label_examples(scans: Sequence[ScanRecord], events, layout: LabelLayout = ADVERSE_LAYOUT,
                   followup_end=None) -> list[LabeledExample]:
    grouped = events if isinstance(events, Mapping) else group_events(events)
    return [window_labels(s, grouped, layout, followup_end) for s in scans]


# -- splits ------------------------------------------------------------------
def patient_split(patient_ids: Iterable[str], rng: np.random.Generator,
                  fractions: Mapping[str, float] | None = None) -> dict[str, list[str]]:
    """Uniformly random patient-level split (default 88% trainval / 12% test)."""
    fractions = dict(fractions or {"trainval": 0.88, "test": 0.12})
    if abs(sum(fractions.values()) - 1.0) > 1e-9 or any(f < 0 for f in fractions.values()):
        raise ContractError("split fractions must be nonnegative and sum to 1")
    ids = sorted(set(patient_ids))
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    out, start, cum = {}, 0, 0.0
    names = list(fractions)
    for k, name in enumerate(names):
        cum += fractions[name]
        stop = len(ids) if k == len(names) - 1 else int(round(cum * len(ids)))
        out[name] = sorted(shuffled[start:stop])
        start = stop
    return out


def stratified_kfold(patient_ids: Iterable[str], k: int, positive: Mapping[str, bool],
                     rng: np.random.Generator) -> list[list[str]]:
    """Patient-level folds with near-equal sizes and positive counts.

    Positives are dealt round-robin first, negatives continue the rotation,
    so fold sizes and positive counts each differ by at most one.
    """
    if k < 2:
        raise ContractError("k must be >= 2")
    ids = sorted(set(patient_ids))
    if len(ids) < k:
        raise InvalidInputError(f"{len(ids)} patients cannot fill {k} folds")
    pos = [p for p in ids if positive.get(p, False)]
    neg = [p for p in ids if not positive.get(p, False)]
    pos = [pos[i] for i in rng.permutation(len(pos))]
    neg = [neg[i] for i in rng.permutation(len(neg))]
    folds: list[list[str]] = [[] for _ in range(k)]
    for i, pid in enumerate(pos + neg):
        folds[i % k].append(pid)
    return [sorted(f) for f in folds]


def patient_positive(examples: Iterable[LabeledExample | LabeledSequence], label_index: int) -> dict[str, bool]:
    out: dict[str, bool] = {}
    for ex in examples:
        pid = ex.scan.patient_id if isinstance(ex, LabeledExample) else ex.patient_id
        out[pid] = out.get(pid, False) or bool(ex.labels[label_index])
    return out


# -- summaries ---------------------------------------------------------------
def split_summary(events, scans, split: Mapping[str, Sequence[str]]) -> list[dict]:
    """Scan/patient counts per task and split, in the layout of the cohort table."""
    rows = []
    membership = {pid: name for name, ids in split.items() for pid in ids}
    for task in ("sip", "mip", "orp"):
        eligible = apply_task_filter(scans, events, task)
        row = {"task": task.upper()}
        for name in split:
            members = [s for s in eligible if membership.get(s.patient_id) == name]
            row[f"scans_{name}"] = len(members)
            row[f"patients_{name}"] = len({s.patient_id for s in members})
        row["scans_total"] = len(eligible)
        row["patients_total"] = len({s.patient_id for s in eligible})
        rows.append(row)
    return rows


def event_window_counts(events, scans, task: str) -> list[dict]:
    """Positive label counts per event type and window over the task's scans."""
    eligible = apply_task_filter(scans, events, task)
    grouped = group_events(events)
    layout = ADVERSE_LAYOUT
    totals = np.zeros(layout.size, dtype=np.int64)
    for s in eligible:
        totals += window_labels(s, grouped, layout).labels
    rows = []
    for name in layout.events:
        row = {"task": task.upper(), "event": name}
        for w in layout.windows:
            row["any" if w is None else f"{w}h"] = int(totals[layout.index(name, w)])
        rows.append(row)
    return rows
