"""Template construction and cosine-similarity matching.

A template is the L2-normalized concatenation of an image's per-block
descriptor values in canonical grid order. Three pipeline variants exist:

* ``raw``  - both modalities concatenated as extracted (66-d per block)
* ``pls``  - both modalities projected to the shared latent space (p-d per block)
* ``dpm``  - source images mapped through the trained network first; target
             images concatenated raw

Scoring a probe against a gallery is a single matrix-vector product of unit
vectors, so similarities are cosines in [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import container
from .dpm import DpmModel, map_descriptor_set
from .errors import InvalidInputError, InvalidParameterError
from .features import MAPPED_SOURCE, SOURCE, TARGET, DescriptorSet
from .pls import PlsModel, pls_project

PIPELINES = ("raw", "pls", "dpm")


@dataclass
class PipelineModels:
    """Trained models required by the non-raw pipelines."""

    dpm: DpmModel | None = None
    pls: PlsModel | None = None


@dataclass(frozen=True)
class Template:
    image_id: str
    subject_id: str
    vector: np.ndarray
    pipeline_tag: str


def build_template(
    dset: DescriptorSet,
    subject_id: str,
    pipeline: str,
    models: PipelineModels | None = None,
) -> Template:
    """Concatenate an image's descriptors per the pipeline and L2-normalize."""
    models = models or PipelineModels()
    if pipeline == "raw":
        values = dset.values
    elif pipeline == "dpm":
        if dset.modality == SOURCE:
            if models.dpm is None:
                raise InvalidInputError("dpm pipeline requires a trained mapping model")
            values = map_descriptor_set(models.dpm, dset).values
        elif dset.modality in (TARGET, MAPPED_SOURCE):
            values = dset.values
        else:
            raise InvalidInputError(f"unknown modality {dset.modality!r}")
    elif pipeline == "pls":
        if models.pls is None:
            raise InvalidInputError("pls pipeline requires a fitted PLS model")
        side = "source" if dset.modality == SOURCE else "target"
        values = pls_project(models.pls, dset.values, side)
    else:
        raise InvalidParameterError(f"unknown pipeline {pipeline!r}; expected one of {PIPELINES}")
    vector = np.ascontiguousarray(values, dtype=np.float64).reshape(-1)
    norm = np.linalg.norm(vector)
    if norm == 0.0:
        raise InvalidInputError(f"degenerate zero template for image {dset.image_id!r}")
    return Template(dset.image_id, subject_id, vector / norm, pipeline)


@dataclass
class GalleryIndex:
    """Immutable enrolled gallery; scoring happens against ``matrix``."""

    templates: list[Template]
    matrix: np.ndarray            # (G, D), one unit row per template
    subjects: list[str]           # parallel to templates
    fusion: str = "max"           # per-subject score fusion: max or mean

    @classmethod
    def build(cls, templates: list[Template], fusion: str = "max") -> "GalleryIndex":
        if not templates:
            raise InvalidInputError("gallery must contain at least one template")
        if fusion not in ("max", "mean"):
            raise InvalidParameterError(f"fusion must be 'max' or 'mean', got {fusion!r}")
        tag = templates[0].pipeline_tag
        length = templates[0].vector.shape[0]
        for t in templates:
            if t.pipeline_tag != tag:
                raise InvalidInputError("gallery templates mix pipeline tags")
            if t.vector.shape[0] != length:
                raise InvalidInputError("gallery templates mix vector lengths")
        matrix = np.ascontiguousarray(np.stack([t.vector for t in templates]))
        return cls(list(templates), matrix, [t.subject_id for t in templates], fusion)

    @property
    def size(self) -> int:
        return len(self.templates)

    @property
    def subject_ids(self) -> list[str]:
        return sorted(set(self.subjects))

    def save(self, path) -> None:
        meta = {
            "fusion": self.fusion,
            "pipeline_tag": self.templates[0].pipeline_tag,
            "image_ids": [t.image_id for t in self.templates],
            "subjects": self.subjects,
        }
        container.write_container(path, "gallery", {"matrix": self.matrix}, meta)

    @classmethod
    def load(cls, path) -> "GalleryIndex":
        _, arrays, meta = container.read_container(path, expect_kind="gallery")
        matrix = arrays["matrix"]
        templates = [
            Template(img, subj, matrix[i], meta["pipeline_tag"])
            for i, (img, subj) in enumerate(zip(meta["image_ids"], meta["subjects"]))
        ]
        return cls(templates, matrix, list(meta["subjects"]), meta["fusion"])


def _check_probe(probe: Template, gallery: GalleryIndex) -> None:
    if probe.pipeline_tag != gallery.templates[0].pipeline_tag:
        raise InvalidInputError(
            f"probe pipeline {probe.pipeline_tag!r} != gallery {gallery.templates[0].pipeline_tag!r}"
        )
    if probe.vector.shape[0] != gallery.matrix.shape[1]:
        raise InvalidInputError(
            f"probe length {probe.vector.shape[0]} != gallery length {gallery.matrix.shape[1]}"
        )


def score(probe: Template, gallery: GalleryIndex) -> list[tuple[str, float]]:
    """Cosine similarity of the probe against every gallery template."""
    sims = score_array(probe, gallery)
    return [(t.image_id, float(s)) for t, s in zip(gallery.templates, sims)]


def score_array(probe: Template, gallery: GalleryIndex) -> np.ndarray:
    _check_probe(probe, gallery)
    return gallery.matrix @ probe.vector


def subject_scores(probe: Template, gallery: GalleryIndex) -> dict[str, float]:
    """Per-subject fused similarity (max or mean over the subject's templates)."""
    sims = score_array(probe, gallery)
    fused: dict[str, float] = {}
    if gallery.fusion == "mean":
        counts: dict[str, int] = {}
        for subj, s in zip(gallery.subjects, sims):
            fused[subj] = fused.get(subj, 0.0) + float(s)
            counts[subj] = counts.get(subj, 0) + 1
        return {subj: total / counts[subj] for subj, total in fused.items()}
    for subj, s in zip(gallery.subjects, sims):
        prev = fused.get(subj)
        if prev is None or s > prev:
            fused[subj] = float(s)
    return fused


def identify(probe: Template, gallery: GalleryIndex) -> tuple[str, list[tuple[str, float]]]:
    """Ranked subjects by fused similarity; ties break to the lowest subject_id."""
    fused = subject_scores(probe, gallery)
    ranked = sorted(fused.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[0][0], ranked
