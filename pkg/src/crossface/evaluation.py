"""Identification (CMC) and verification (ROC) protocols plus report emission.

Identification is closed-set: every probe subject must be enrolled. The rank
of the true subject is its position in the fused, deterministically
tie-broken subject ranking; CMC(k) is the fraction of probes whose true rank
is <= k. Verification counts one genuine attempt per probe (against its own
subject's fused gallery score) and one imposter attempt per probe per other
enrolled subject, then sweeps a threshold over all observed scores.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidParameterError, ProtocolError
from .matching import GalleryIndex, Template, subject_scores

GALLERY_SPECS = ("one_per_subject", "two_per_subject", "all_per_subject")


@dataclass(frozen=True)
class Protocol:
    """Gallery/probe construction rules for one experiment."""

    gallery_spec: str = "one_per_subject"
    probe_modality: str = "target"
    gallery_modality: str = "source"
    train_subjects: tuple[str, ...] = ()
    test_subjects: tuple[str, ...] = ()

    def __post_init__(self):
        if self.gallery_spec not in GALLERY_SPECS:
            raise InvalidParameterError(
                f"gallery_spec must be one of {GALLERY_SPECS}, got {self.gallery_spec!r}"
            )
        overlap = set(self.train_subjects) & set(self.test_subjects)
        if overlap:
            raise ProtocolError(f"train/test subject sets overlap: {sorted(overlap)}")

    @property
    def gallery_images_per_subject(self) -> int | None:
        return {"one_per_subject": 1, "two_per_subject": 2, "all_per_subject": None}[
            self.gallery_spec
        ]


@dataclass
class CmcCurve:
    """Identification rate at each rank, 1..#gallery subjects."""

    rates: np.ndarray

    def rate_at(self, rank: int) -> float:
        return float(self.rates[rank - 1])

    @property
    def rank1(self) -> float:
        return float(self.rates[0])


@dataclass
class IdentificationResult:
    rank1: float
    cmc: CmcCurve
    true_ranks: np.ndarray      # (n_probes,), 1-based rank of the true subject
    predicted: list[str]
    n_probes: int
    n_gallery_subjects: int


def run_identification(probes: list[Template], gallery: GalleryIndex) -> IdentificationResult:
    if not probes:
        raise ProtocolError("no probes to identify")
    subjects = gallery.subject_ids
    n_subjects = len(subjects)
    ranks = np.zeros(len(probes), dtype=np.int64)
    predicted = []
    for i, probe in enumerate(probes):
        fused = subject_scores(probe, gallery)
        if probe.subject_id not in fused:
            raise ProtocolError(
                f"closed-set violation: probe subject {probe.subject_id!r} is not enrolled"
            )
        ranked = sorted(fused.items(), key=lambda kv: (-kv[1], kv[0]))
        predicted.append(ranked[0][0])
        for pos, (subj, _) in enumerate(ranked, start=1):
            if subj == probe.subject_id:
                ranks[i] = pos
                break
    rates = np.array([np.mean(ranks <= k) for k in range(1, n_subjects + 1)])
    return IdentificationResult(
        rank1=float(rates[0]),
        cmc=CmcCurve(rates),
        true_ranks=ranks,
        predicted=predicted,
        n_probes=len(probes),
        n_gallery_subjects=n_subjects,
    )


@dataclass
class RocCurve:
    points: np.ndarray  # (n, 2) of (false-accept rate, true-accept rate)
    genuine_count: int
    imposter_count: int


def run_verification(probes: list[Template], gallery: GalleryIndex) -> RocCurve:
    """Threshold sweep over per-subject fused scores."""
    genuine: list[float] = []
    imposter: list[float] = []
    enrolled = set(gallery.subject_ids)
    for probe in probes:
        fused = subject_scores(probe, gallery)
        for subj, s in fused.items():
            (genuine if subj == probe.subject_id else imposter).append(s)
    if not genuine or not imposter:
        raise ProtocolError(
            f"verification needs both attempt kinds, got {len(genuine)} genuine / "
            f"{len(imposter)} imposter (enrolled subjects: {len(enrolled)})"
        )
    gen = np.sort(np.asarray(genuine))
    imp = np.sort(np.asarray(imposter))
    thresholds = np.unique(np.concatenate([gen, imp]))[::-1]
    points = [(0.0, 0.0)]
    for thr in thresholds:
        tar = float(np.mean(gen >= thr))
        far = float(np.mean(imp >= thr))
        points.append((far, tar))
    return RocCurve(np.asarray(points), len(genuine), len(imposter))


@dataclass
class ModalityGapReport:
    within_rank1: float
    raw_cross_rank1: float
    dpm_cross_rank1: float

    @property
    def bridged_fraction(self) -> float:
        gap = self.within_rank1 - self.raw_cross_rank1
        if gap == 0.0:
            return math.nan
        return (self.dpm_cross_rank1 - self.raw_cross_rank1) / gap


def modality_gap_report(
    within: IdentificationResult,
    raw_cross: IdentificationResult,
    dpm_cross: IdentificationResult,
) -> ModalityGapReport:
    return ModalityGapReport(within.rank1, raw_cross.rank1, dpm_cross.rank1)


# --- report emission ---------------------------------------------------------


@dataclass
class ReportBundle:
    """Everything emit_report writes; construction order does not matter."""

    config: dict
    rank1: dict = field(default_factory=dict)            # pipeline -> rank-1 rate
    cmc: dict = field(default_factory=dict)              # pipeline -> CmcCurve
    roc: dict = field(default_factory=dict)              # pipeline -> RocCurve
    modality_gap: ModalityGapReport | None = None


def _fmt(x: float) -> str:
    return repr(float(x))


def emit_report(bundle: ReportBundle, outdir: str | Path) -> list[Path]:
    """Write report.json plus one CSV per curve; byte-stable across reruns."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    doc: dict = {"config": bundle.config, "rank1": dict(sorted(bundle.rank1.items()))}
    if bundle.modality_gap is not None:
        mg = bundle.modality_gap
        doc["modality_gap"] = {
            "within_rank1": mg.within_rank1,
            "raw_cross_rank1": mg.raw_cross_rank1,
            "dpm_cross_rank1": mg.dpm_cross_rank1,
            "bridged_fraction": None if math.isnan(mg.bridged_fraction) else mg.bridged_fraction,
        }
    doc["verification"] = {
        name: {"genuine_count": roc.genuine_count, "imposter_count": roc.imposter_count}
        for name, roc in sorted(bundle.roc.items())
    }
    report_path = outdir / "report.json"
    report_path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    written.append(report_path)

    for name, cmc in sorted(bundle.cmc.items()):
        path = outdir / f"cmc_{name}.csv"
        lines = ["rank,rate"]
        lines += [f"{k},{_fmt(r)}" for k, r in enumerate(cmc.rates, start=1)]
        path.write_text("\n".join(lines) + "\n")
        written.append(path)

    for name, roc in sorted(bundle.roc.items()):
        path = outdir / f"roc_{name}.csv"
        lines = ["far,tar"]
        lines += [f"{_fmt(far)},{_fmt(tar)}" for far, tar in roc.points]
        path.write_text("\n".join(lines) + "\n")
        written.append(path)

    return written
