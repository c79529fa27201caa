"""Pipeline orchestration shared by the CLI commands and the test harness.

Stages hand off through immutable artifacts (descriptor archives, model
containers, galleries) so every command is independently re-runnable, but the
same functions also compose in-process for the benchmark suite.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .dpm import TrainConfig, train
from .errors import ArtifactError, InvalidInputError, InvalidParameterError, ProtocolError
from .evaluation import (
    IdentificationResult,
    Protocol,
    ReportBundle,
    RocCurve,
    modality_gap_report,
    run_identification,
    run_verification,
)
from .features import (
    DEFAULT_BLOCK,
    DEFAULT_PCA_DIMS,
    DEFAULT_SCALES,
    DEFAULT_STRIDE,
    SOURCE,
    TARGET,
    DescriptorSet,
    PcaModel,
    extract_dense_values,
    make_grid,
    pca_fit,
)
from .imgproc import PreprocessParams, preprocess, read_image
from .manifest import Manifest, ManifestRecord
from .matching import GalleryIndex, PipelineModels, Template, build_template
from .synth import SynthConfig


@dataclass(frozen=True)
class ExtractParams:
    block: int = DEFAULT_BLOCK
    stride: int = DEFAULT_STRIDE
    scales: tuple[float, ...] = DEFAULT_SCALES
    pca_dims: int = DEFAULT_PCA_DIMS
    preprocess: PreprocessParams = PreprocessParams()


@dataclass
class DescriptorArchive:
    """All embedded descriptor sets of a dataset plus the PCA models used."""

    sets: dict[str, DescriptorSet]              # image_id -> descriptors
    records: dict[str, ManifestRecord]          # image_id -> manifest record
    pca_source: PcaModel
    pca_target: PcaModel
    params: ExtractParams

    def save(self, path: str | Path) -> None:
        arrays = {}
        recs = []
        for image_id in sorted(self.sets):
            ds = self.sets[image_id]
            arrays[f"values/{image_id}"] = ds.values
            r = self.records[image_id]
            recs.append(
                {
                    "image_id": image_id,
                    "subject_id": r.subject_id,
                    "modality": r.modality,
                    "session": r.session,
                    "condition": r.condition,
                    "enrollment_order": r.enrollment_order,
                    "path": r.path,
                    "width": ds.width,
                    "height": ds.height,
                }
            )
        arrays["pca_source/mean"] = self.pca_source.mean
        arrays["pca_source/basis"] = self.pca_source.basis
        arrays["pca_source/explained_variance"] = self.pca_source.explained_variance
        arrays["pca_target/mean"] = self.pca_target.mean
        arrays["pca_target/basis"] = self.pca_target.basis
        arrays["pca_target/explained_variance"] = self.pca_target.explained_variance
        meta = {
            "records": recs,
            "block": self.params.block,
            "stride": self.params.stride,
            "scales": list(self.params.scales),
            "pca_dims": self.params.pca_dims,
            "median_radius": self.params.preprocess.median_radius,
            "dog_sigma_inner": self.params.preprocess.dog_sigma_inner,
            "dog_sigma_outer": self.params.preprocess.dog_sigma_outer,
            "pca_source_fingerprint": self.pca_source.fingerprint,
            "pca_target_fingerprint": self.pca_target.fingerprint,
        }
        container.write_container(path, "descriptor-archive", arrays, meta)

    @classmethod
    def load(cls, path: str | Path) -> "DescriptorArchive":
        _, arrays, meta = container.read_container(path, expect_kind="descriptor-archive")
        pca_source = PcaModel(
            arrays["pca_source/mean"], arrays["pca_source/basis"], arrays["pca_source/explained_variance"]
        )
        pca_target = PcaModel(
            arrays["pca_target/mean"], arrays["pca_target/basis"], arrays["pca_target/explained_variance"]
        )
        params = ExtractParams(
            block=meta["block"],
            stride=meta["stride"],
            scales=tuple(meta["scales"]),
            pca_dims=meta["pca_dims"],
            preprocess=PreprocessParams(
                median_radius=meta["median_radius"],
                dog_sigma_inner=meta["dog_sigma_inner"],
                dog_sigma_outer=meta["dog_sigma_outer"],
            ),
        )
        sets: dict[str, DescriptorSet] = {}
        records: dict[str, ManifestRecord] = {}
        for rec in meta["records"]:
            image_id = rec["image_id"]
            grid = make_grid(rec["width"], rec["height"], params.block, params.stride)
            n_scales = len(params.scales)
            values = arrays[f"values/{image_id}"]
            centers = np.tile(grid.positions, (n_scales, 1))
            scale_index = np.repeat(np.arange(n_scales, dtype=np.int8), len(grid))
            sets[image_id] = DescriptorSet(
                image_id, rec["modality"], rec["width"], rec["height"], values, centers, scale_index
            )
            records[image_id] = ManifestRecord(
                path=rec["path"],
                subject_id=rec["subject_id"],
                modality=rec["modality"],
                session=rec["session"],
                condition=rec["condition"],
                enrollment_order=rec["enrollment_order"],
            )
        return cls(sets, records, pca_source, pca_target, params)

    def pipeline_fingerprints(self) -> dict[str, str]:
        return {
            "pca_source": self.pca_source.fingerprint,
            "pca_target": self.pca_target.fingerprint,
        }


def load_image(data_dir: str | Path, record: ManifestRecord):
    path = Path(data_dir) / record.path
    if not path.exists():
        raise ArtifactError(f"image not found: {path}", produced_by="synth-gen")
    return read_image(path)


def extract_archive(
    manifest: Manifest,
    data_dir: str | Path,
    train_subjects: list[str],
    params: ExtractParams = ExtractParams(),
) -> DescriptorArchive:
    """Preprocess and extract every image; PCA is fitted per modality on the
    training subjects' raw descriptors pooled across scales and positions."""
    train_set = set(train_subjects)
    raw: dict[str, np.ndarray] = {}
    grids: dict[tuple[int, int], object] = {}
    processed: dict[str, object] = {}
    for rec in manifest.records:
        img = preprocess(load_image(data_dir, rec), params.preprocess)
        key = (img.width, img.height)
        if key not in grids:
            grids[key] = make_grid(img.width, img.height, params.block, params.stride)
        raw[rec.image_id] = extract_dense_values(img, grids[key], params.scales)
        processed[rec.image_id] = key

    pools = {SOURCE: [], TARGET: []}
    for rec in manifest.records:
        if rec.subject_id in train_set:
            pools[rec.modality].append(raw[rec.image_id])
    for modality, chunks in pools.items():
        if not chunks:
            raise ProtocolError(f"no training images of modality {modality!r}")
    pca_source = pca_fit(np.vstack(pools[SOURCE]), params.pca_dims)
    pca_target = pca_fit(np.vstack(pools[TARGET]), params.pca_dims)

    sets: dict[str, DescriptorSet] = {}
    records: dict[str, ManifestRecord] = {}
    for rec in manifest.records:
        pca = pca_source if rec.modality == SOURCE else pca_target
        w, h = processed[rec.image_id]
        grid = grids[(w, h)]
        coeffs = pca.transform(raw[rec.image_id])
        half = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
        n_scales = len(params.scales)
        pos = np.tile(grid.positions / half, (n_scales, 1))
        values = np.hstack([coeffs, pos])
        centers = np.tile(grid.positions, (n_scales, 1))
        scale_index = np.repeat(np.arange(n_scales, dtype=np.int8), len(grid))
        sets[rec.image_id] = DescriptorSet(rec.image_id, rec.modality, w, h, values, centers, scale_index)
        records[rec.image_id] = rec
    return DescriptorArchive(sets, records, pca_source, pca_target, params)


def build_pairs(
    archive: DescriptorArchive,
    train_subjects: list[str],
    *,
    pair_mode: str = "same-session",
    pool_size: int | None = 1_000_000,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Aligned (source, target) descriptor pairs from corresponding images.

    Descriptors pair position-by-position between a subject's source image
    and target image; ``pair_mode`` picks which image pairs correspond.
    """
    if pair_mode not in ("same-session", "all-sessions"):
        raise InvalidParameterError(f"unknown pair_mode {pair_mode!r}")
    by_subject: dict[str, dict[str, list]] = {}
    for image_id, rec in archive.records.items():
        if rec.subject_id not in train_subjects:
            continue
        by_subject.setdefault(rec.subject_id, {SOURCE: [], TARGET: []})[rec.modality].append(
            (rec.session, image_id)
        )
    xs, ts = [], []
    for subj in sorted(by_subject):
        sources = sorted(by_subject[subj][SOURCE])
        targets = sorted(by_subject[subj][TARGET])
        if not sources or not targets:
            raise ProtocolError(f"training subject {subj!r} lacks one modality")
        if pair_mode == "same-session":
            t_by_session = dict(targets)
            combos = [
                (sid, t_by_session[sess]) for sess, sid in sources if sess in t_by_session
            ]
        else:
            combos = [(sid, tid) for _, sid in sources for _, tid in targets]
        for sid, tid in combos:
            a, b = archive.sets[sid], archive.sets[tid]
            if a.n_descriptors != b.n_descriptors:
                raise InvalidInputError(f"descriptor counts differ for {sid} vs {tid}")
            xs.append(a.values)
            ts.append(b.values)
    if not xs:
        raise ProtocolError("no training pairs could be built")
    x = np.vstack(xs)
    t = np.vstack(ts)
    if pool_size is not None and x.shape[0] > pool_size:
        idx = np.random.default_rng(seed).choice(x.shape[0], size=pool_size, replace=False)
        idx.sort()
        x, t = x[idx], t[idx]
    return x, t


def gallery_records(
    manifest_records: list[ManifestRecord], protocol: Protocol
) -> list[ManifestRecord]:
    """Pick gallery images per subject by enrollment order."""
    per_subject: dict[str, list[ManifestRecord]] = {}
    for rec in manifest_records:
        per_subject.setdefault(rec.subject_id, []).append(rec)
    count = protocol.gallery_images_per_subject
    chosen = []
    for subj in sorted(per_subject):
        recs = sorted(per_subject[subj], key=lambda r: (r.enrollment_order, r.session, r.path))
        chosen.extend(recs if count is None else recs[:count])
    return chosen


def build_templates(
    archive: DescriptorArchive,
    records: list[ManifestRecord],
    pipeline: str,
    models: PipelineModels,
) -> list[Template]:
    return [
        build_template(archive.sets[r.image_id], r.subject_id, pipeline, models) for r in records
    ]


@dataclass
class BenchmarkConfig:
    """The frozen desk-scale benchmark: data, training and protocol settings."""

    synth: SynthConfig = field(default_factory=SynthConfig)
    n_train_subjects: int = 20
    extract: ExtractParams = field(default_factory=ExtractParams)
    pair_mode: str = "all-sessions"
    pair_pool_size: int = 120_000
    pair_seed: int = 11
    deep_hidden: tuple[int, ...] = (200, 200)
    shallow_hidden: tuple[int, ...] = (1000,)
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            reg_lambda=1e-4,
            learning_rate=0.02,
            batch_size=128,
            epochs=18,
            seed=7,
            standardize_dims=64,
        )
    )
    pls_components: int = 20
    gallery_spec: str = "one_per_subject"
    fusion: str = "max"

    def train_subjects(self, manifest: Manifest) -> list[str]:
        return manifest.subjects()[: self.n_train_subjects]

    def test_subjects(self, manifest: Manifest) -> list[str]:
        return manifest.subjects()[self.n_train_subjects :]

    def config_echo(self) -> dict:
        from dataclasses import asdict

        return {
            "synth": asdict(self.synth),
            "n_train_subjects": self.n_train_subjects,
            "extract": {
                "block": self.extract.block,
                "stride": self.extract.stride,
                "scales": list(self.extract.scales),
                "pca_dims": self.extract.pca_dims,
                "median_radius": self.extract.preprocess.median_radius,
                "dog_sigma_inner": self.extract.preprocess.dog_sigma_inner,
                "dog_sigma_outer": self.extract.preprocess.dog_sigma_outer,
            },
            "pair_mode": self.pair_mode,
            "pair_pool_size": self.pair_pool_size,
            "pair_seed": self.pair_seed,
            "deep_hidden": list(self.deep_hidden),
            "shallow_hidden": list(self.shallow_hidden),
            "train": asdict(self.train),
            "pls_components": self.pls_components,
            "gallery_spec": self.gallery_spec,
            "fusion": self.fusion,
        }


@dataclass
class BenchmarkResult:
    identification: dict[str, IdentificationResult]
    verification: dict[str, RocCurve]
    within_target: IdentificationResult
    config: BenchmarkConfig
    elapsed_seconds: float

    @property
    def modality_gap(self):
        return modality_gap_report(
            self.within_target, self.identification["raw"], self.identification["dpm"]
        )

    def bundle(self) -> ReportBundle:
        bundle = ReportBundle(config=self.config.config_echo())
        for name, res in self.identification.items():
            bundle.rank1[name] = res.rank1
            bundle.cmc[name] = res.cmc
        bundle.roc = dict(self.verification)
        bundle.modality_gap = self.modality_gap
        return bundle


def run_benchmark(cfg: BenchmarkConfig, workdir: str | Path, *, reuse: bool = True) -> BenchmarkResult:
    """Generate data, extract, train all pipelines and run the protocol grid."""
    from . import pls as pls_mod
    from . import synth as synth_mod

    start = time.perf_counter()
    workdir = Path(workdir)
    manifest_path = workdir / "manifest.tsv"
    if reuse and manifest_path.exists():
        manifest = Manifest.load(manifest_path)
    else:
        manifest = synth_mod.generate(cfg.synth, workdir)

    train_subjects = cfg.train_subjects(manifest)
    test_subjects = cfg.test_subjects(manifest)
    if not test_subjects:
        raise ProtocolError("benchmark needs at least one test subject")

    archive = extract_archive(manifest, workdir, train_subjects, cfg.extract)
    x, t = build_pairs(
        archive,
        train_subjects,
        pair_mode=cfg.pair_mode,
        pool_size=cfg.pair_pool_size,
        seed=cfg.pair_seed,
    )

    d = x.shape[1]
    deep_dims = (d, *cfg.deep_hidden, d)
    shallow_dims = (d, *cfg.shallow_hidden, d)
    deep_model, _ = train(x, t, cfg.train, deep_dims)
    shallow_model, _ = train(x, t, cfg.train, shallow_dims)
    pls_model = pls_mod.pls_fit(x, t, cfg.pls_components)

    protocol = Protocol(
        gallery_spec=cfg.gallery_spec,
        train_subjects=tuple(train_subjects),
        test_subjects=tuple(test_subjects),
    )
    test_source = manifest.filter(subjects=test_subjects, modality=SOURCE)
    test_target = manifest.filter(subjects=test_subjects, modality=TARGET)
    gal_recs = gallery_records(test_source, protocol)

    identification: dict[str, IdentificationResult] = {}
    verification: dict[str, RocCurve] = {}
    pipeline_models = {
        "raw": PipelineModels(),
        "pls": PipelineModels(pls=pls_model),
        "dpm": PipelineModels(dpm=deep_model),
        "dpm_shallow": PipelineModels(dpm=shallow_model),
    }
    for name, models in pipeline_models.items():
        pipeline = "dpm" if name.startswith("dpm") else name
        gallery = GalleryIndex.build(
            build_templates(archive, gal_recs, pipeline, models), fusion=cfg.fusion
        )
        probes = build_templates(archive, test_target, pipeline, models)
        identification[name] = run_identification(probes, gallery)
        if name in ("raw", "dpm"):
            verification[name] = run_verification(probes, gallery)

    # within-target-modality protocol: first target image enrolls, rest probe
    within_gal_recs = gallery_records(test_target, Protocol(gallery_spec="one_per_subject"))
    within_gal_ids = {r.image_id for r in within_gal_recs}
    within_probe_recs = [r for r in test_target if r.image_id not in within_gal_ids]
    within_gallery = GalleryIndex.build(
        build_templates(archive, within_gal_recs, "raw", PipelineModels()), fusion=cfg.fusion
    )
    within_probes = build_templates(archive, within_probe_recs, "raw", PipelineModels())
    within = run_identification(within_probes, within_gallery)

    elapsed = time.perf_counter() - start
    return BenchmarkResult(identification, verification, within, cfg, elapsed)
