"""Command-line pipeline: dataset generation through evaluation and benchmarks.

Commands compose through file artifacts under a working directory:

    synth-gen  -> manifest.tsv + images/
    extract    -> artifacts/descriptors.bin (+ models/pca_*.bin)
    train-dpm  -> models/<tag>.bin
    train-pls  -> models/pls.bin
    enroll     -> galleries/<pipeline>.bin
    identify / verify / modality-gap / eval-suite -> report/
    bench      -> timing figures on stdout

Exit codes: 0 success, 1 usage error, 2 data/protocol error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import config as config_mod
from .dpm import DpmModel, train
from .errors import (
    ArtifactError,
    CrossfaceError,
    InvalidInputError,
    InvalidParameterError,
    NumericalFailureError,
    ProtocolError,
    UsageError,
)
from .evaluation import Protocol, emit_report, run_identification, run_verification
from .features import SOURCE, TARGET
from .imgproc import preprocess
from .manifest import Manifest
from .matching import GalleryIndex, PipelineModels, build_template, identify as match_identify
from .pls import PlsModel, pls_fit
from .synth import generate
from .workflow import (
    BenchmarkConfig,
    DescriptorArchive,
    build_pairs,
    build_templates,
    extract_archive,
    gallery_records,
    load_image,
    run_benchmark,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); usage errors are exit 1
        raise UsageError(message)


def _add_common(parser):
    parser.add_argument("--workdir", required=True, help="artifact directory for this run")
    parser.add_argument("--config", help="key=value config file; flags override it")


def _resolved_config(args, extra_overrides: dict | None = None) -> BenchmarkConfig:
    file_values = config_mod.load_config_file(args.config) if args.config else {}
    overrides = dict(extra_overrides or {})
    return config_mod.benchmark_config(config_mod.resolve(file_values, overrides))


def _load_manifest(workdir: Path) -> Manifest:
    path = workdir / "manifest.tsv"
    if not path.exists():
        raise ArtifactError(f"manifest not found: {path}", produced_by="synth-gen")
    return Manifest.load(path)


def _load_archive(workdir: Path) -> DescriptorArchive:
    path = workdir / "artifacts" / "descriptors.bin"
    if not path.exists():
        raise ArtifactError(f"descriptor archive not found: {path}", produced_by="extract")
    return DescriptorArchive.load(path)


def _load_models(workdir: Path, pipeline: str, model_path: str | None) -> PipelineModels:
    if pipeline == "raw":
        return PipelineModels()
    if pipeline == "pls":
        path = Path(model_path) if model_path else workdir / "models" / "pls.bin"
        if not path.exists():
            raise ArtifactError(f"PLS model not found: {path}", produced_by="train-pls")
        return PipelineModels(pls=PlsModel.load(path))
    path = Path(model_path) if model_path else workdir / "models" / "dpm.bin"
    if not path.exists():
        raise ArtifactError(f"mapping model not found: {path}", produced_by="train-dpm")
    return PipelineModels(dpm=DpmModel.load(path))


def _check_fingerprints(archive: DescriptorArchive, models: PipelineModels) -> None:
    if models.dpm is None:
        return
    expected = archive.pipeline_fingerprints()
    got = models.dpm.meta.get("pca_fingerprints")
    if got and got != expected:
        raise ProtocolError(
            "mapping model was trained against different PCA models than this "
            f"descriptor archive (model {got}, archive {expected})"
        )


def _split_subjects(archive: DescriptorArchive, cfg: BenchmarkConfig):
    subjects = sorted({r.subject_id for r in archive.records.values()})
    train_subjects = subjects[: cfg.n_train_subjects]
    test_subjects = subjects[cfg.n_train_subjects :]
    if not test_subjects:
        raise ProtocolError(
            f"no test subjects left: {len(subjects)} subjects, {cfg.n_train_subjects} reserved for training"
        )
    return train_subjects, test_subjects


def _probe_and_gallery(archive: DescriptorArchive, cfg: BenchmarkConfig, pipeline: str, models: PipelineModels):
    _, test_subjects = _split_subjects(archive, cfg)
    records = list(archive.records.values())
    test_source = sorted(
        (r for r in records if r.subject_id in test_subjects and r.modality == SOURCE),
        key=lambda r: r.image_id,
    )
    test_target = sorted(
        (r for r in records if r.subject_id in test_subjects and r.modality == TARGET),
        key=lambda r: r.image_id,
    )
    protocol = Protocol(gallery_spec=cfg.gallery_spec)
    gal_recs = gallery_records(test_source, protocol)
    gallery = GalleryIndex.build(
        build_templates(archive, gal_recs, pipeline, models), fusion=cfg.fusion
    )
    probes = build_templates(archive, test_target, pipeline, models)
    return probes, gallery


# --- commands ----------------------------------------------------------------


def _cmd_synth_gen(args) -> int:
    cfg = _resolved_config(args, {"identity_seed": args.seed})
    manifest = generate(cfg.synth, args.workdir)
    print(f"wrote {len(manifest.records)} images under {args.workdir}")
    return 0


def _cmd_extract(args) -> int:
    workdir = Path(args.workdir)
    cfg = _resolved_config(args)
    manifest = _load_manifest(workdir)
    train_subjects = manifest.subjects()[: cfg.n_train_subjects]
    archive = extract_archive(manifest, workdir, train_subjects, cfg.extract)
    archive.save(workdir / "artifacts" / "descriptors.bin")
    models_dir = workdir / "models"
    archive.pca_source.save(models_dir / "pca_source.bin")
    archive.pca_target.save(models_dir / "pca_target.bin")
    print(
        f"extracted {len(archive.sets)} descriptor sets "
        f"({next(iter(archive.sets.values())).n_descriptors} descriptors/image)"
    )
    return 0


def _cmd_train_dpm(args) -> int:
    workdir = Path(args.workdir)
    overrides = {"seed": args.seed, "epochs": args.epochs, "learning_rate": args.learning_rate}
    cfg = _resolved_config(args, overrides)
    archive = _load_archive(workdir)
    train_subjects, _ = _split_subjects(archive, cfg)
    x, t = build_pairs(
        archive, train_subjects, pair_mode=cfg.pair_mode,
        pool_size=cfg.pair_pool_size, seed=cfg.pair_seed,
    )
    hidden = tuple(int(h) for h in args.hidden.split(",")) if args.hidden else cfg.deep_hidden
    dims = (x.shape[1], *hidden, x.shape[1])
    model, log = train(x, t, cfg.train, dims)
    model.meta["pca_fingerprints"] = archive.pipeline_fingerprints()
    out = workdir / "models" / f"{args.tag}.bin"
    model.save(out)
    print(f"trained {dims} on {x.shape[0]} pairs; final epoch loss {log.epoch_loss[-1]:.6f}")
    print(f"wrote {out}")
    return 0


def _cmd_train_pls(args) -> int:
    workdir = Path(args.workdir)
    cfg = _resolved_config(args, {"pls_components": args.components})
    archive = _load_archive(workdir)
    train_subjects, _ = _split_subjects(archive, cfg)
    x, t = build_pairs(
        archive, train_subjects, pair_mode=cfg.pair_mode,
        pool_size=cfg.pair_pool_size, seed=cfg.pair_seed,
    )
    model = pls_fit(x, t, cfg.pls_components)
    out = workdir / "models" / "pls.bin"
    model.save(out)
    print(f"fitted {model.p}-component PLS on {x.shape[0]} pairs; wrote {out}")
    return 0


def _cmd_enroll(args) -> int:
    workdir = Path(args.workdir)
    cfg = _resolved_config(args, {"gallery_spec": args.gallery_spec})
    archive = _load_archive(workdir)
    models = _load_models(workdir, args.pipeline, args.model)
    _check_fingerprints(archive, models)
    _, gallery = _probe_and_gallery(archive, cfg, args.pipeline, models)
    out = Path(args.out) if args.out else workdir / "galleries" / f"{args.pipeline}.bin"
    gallery.save(out)
    print(f"enrolled {gallery.size} templates ({len(gallery.subject_ids)} subjects); wrote {out}")
    return 0


def _cmd_identify(args) -> int:
    workdir = Path(args.workdir)
    cfg = _resolved_config(args)
    archive = _load_archive(workdir)
    models = _load_models(workdir, args.pipeline, args.model)
    _check_fingerprints(archive, models)
    gallery_path = Path(args.gallery) if args.gallery else workdir / "galleries" / f"{args.pipeline}.bin"
    if gallery_path.exists():
        gallery = GalleryIndex.load(gallery_path)
        probes, _ = _probe_and_gallery(archive, cfg, args.pipeline, models)
    else:
        probes, gallery = _probe_and_gallery(archive, cfg, args.pipeline, models)
    if args.probe_id:
        probes = [p for p in probes if p.image_id == args.probe_id]
        if not probes:
            raise InvalidInputError(f"probe {args.probe_id!r} not found among test targets")
        _, ranked = match_identify(probes[0], gallery)
        for rank, (subj, sim) in enumerate(ranked[: args.top], start=1):
            print(f"{rank:3d}  {subj}  {sim:.6f}")
        return 0
    result = run_identification(probes, gallery)
    print(f"probes: {result.n_probes}  gallery subjects: {result.n_gallery_subjects}")
    print(f"rank-1: {result.rank1:.4f}")
    return 0


def _cmd_verify(args) -> int:
    workdir = Path(args.workdir)
    cfg = _resolved_config(args)
    archive = _load_archive(workdir)
    models = _load_models(workdir, args.pipeline, args.model)
    _check_fingerprints(archive, models)
    probes, gallery = _probe_and_gallery(archive, cfg, args.pipeline, models)
    roc = run_verification(probes, gallery)
    print(f"genuine attempts: {roc.genuine_count}  imposter attempts: {roc.imposter_count}")
    idx = np.searchsorted(roc.points[:, 0], 0.01, side="right") - 1
    print(f"TAR at FAR<=1%: {roc.points[max(idx, 0), 1]:.4f}")
    return 0


def _cmd_eval_suite(args) -> int:
    cfg = _resolved_config(args)
    result = run_benchmark(cfg, args.workdir, reuse=not args.regen)
    report_dir = Path(args.workdir) / "report"
    paths = emit_report(result.bundle(), report_dir)
    print("rank-1 identification")
    for name in ("raw", "pls", "dpm_shallow", "dpm"):
        print(f"  {name:12s} {result.identification[name].rank1:.4f}")
    gap = result.modality_gap
    print(f"within-target rank-1 {gap.within_rank1:.4f}")
    print(f"modality gap bridged {gap.bridged_fraction:.1%}")
    print(f"elapsed {result.elapsed_seconds:.1f}s")
    for p in paths:
        print(f"wrote {p}")
    return 0


def _cmd_modality_gap(args) -> int:
    workdir = Path(args.workdir)
    cfg = _resolved_config(args)
    archive = _load_archive(workdir)
    dpm_models = _load_models(workdir, "dpm", args.model)
    _check_fingerprints(archive, dpm_models)

    raw_probes, raw_gallery = _probe_and_gallery(archive, cfg, "raw", PipelineModels())
    raw_res = run_identification(raw_probes, raw_gallery)
    dpm_probes, dpm_gallery = _probe_and_gallery(archive, cfg, "dpm", dpm_models)
    dpm_res = run_identification(dpm_probes, dpm_gallery)

    _, test_subjects = _split_subjects(archive, cfg)
    records = list(archive.records.values())
    test_target = sorted(
        (r for r in records if r.subject_id in test_subjects and r.modality == TARGET),
        key=lambda r: r.image_id,
    )
    within_gal = gallery_records(test_target, Protocol(gallery_spec="one_per_subject"))
    within_ids = {r.image_id for r in within_gal}
    within_probe_recs = [r for r in test_target if r.image_id not in within_ids]
    gallery = GalleryIndex.build(
        build_templates(archive, within_gal, "raw", PipelineModels()), fusion=cfg.fusion
    )
    within_res = run_identification(
        build_templates(archive, within_probe_recs, "raw", PipelineModels()), gallery
    )

    from .evaluation import modality_gap_report

    gap = modality_gap_report(within_res, raw_res, dpm_res)
    print(f"within-target rank-1:   {gap.within_rank1:.4f}")
    print(f"raw cross-modal rank-1: {gap.raw_cross_rank1:.4f}")
    print(f"dpm cross-modal rank-1: {gap.dpm_cross_rank1:.4f}")
    print(f"gap bridged:            {gap.bridged_fraction:.1%}")
    return 0


def measure_scoring_latency(gallery_size: int, dims: int, repeats: int, seed: int) -> dict:
    """Per-probe gallery scan latency on synthetic unit templates."""
    rng = np.random.default_rng(seed)
    matrix = rng.standard_normal((gallery_size, dims))
    matrix /= np.linalg.norm(matrix, axis=1, keepdims=True)
    probe = rng.standard_normal(dims)
    probe /= np.linalg.norm(probe)
    for _ in range(3):
        matrix @ probe  # warm caches and BLAS
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        matrix @ probe
        samples.append((time.perf_counter() - t0) * 1000.0)
    samples.sort()
    return {
        "gallery_size": gallery_size,
        "dims": dims,
        "repeats": repeats,
        "scoring_ms_min": samples[0],
        "scoring_ms_median": samples[len(samples) // 2],
        "threads": {
            var: os.environ.get(var, "")
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
        },
    }


def _cmd_bench(args) -> int:
    out = {"scoring": measure_scoring_latency(args.gallery_size, args.dims, args.repeats, args.seed)}
    if args.workdir:
        workdir = Path(args.workdir)
        archive = _load_archive(workdir)
        models = _load_models(workdir, "dpm", None) if (workdir / "models" / "dpm.bin").exists() else PipelineModels()
        cfg = _resolved_config(args) if args.config else BenchmarkConfig()
        probes, gallery = _probe_and_gallery(archive, cfg, "dpm" if models.dpm else "raw", models)
        manifest = _load_manifest(workdir)
        rec = next(r for r in manifest.records if r.modality == TARGET)
        grid_params = archive.params

        def end_to_end():
            img = preprocess(load_image(workdir, rec), grid_params.preprocess)
            from .features import build_descriptor_set, make_grid

            grid = make_grid(img.width, img.height, grid_params.block, grid_params.stride)
            dset = build_descriptor_set(
                rec.image_id, rec.modality, img, grid, archive.pca_target, grid_params.scales
            )
            tpl = build_template(dset, rec.subject_id, gallery.templates[0].pipeline_tag, models)
            gallery.matrix @ tpl.vector

        end_to_end()  # warm
        samples = []
        for _ in range(max(3, args.repeats // 10)):
            t0 = time.perf_counter()
            end_to_end()
            samples.append((time.perf_counter() - t0) * 1000.0)
        out["end_to_end_probe_ms_min"] = min(samples)
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="crossface", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate the synthetic paired-modality dataset")
    _add_common(p)
    p.add_argument("--seed", type=int, help="identity seed override")
    p.set_defaults(func=_cmd_synth_gen)

    p = sub.add_parser("extract", help="preprocess, extract descriptors, fit per-modality PCA")
    _add_common(p)
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("train-dpm", help="train the descriptor mapping network")
    _add_common(p)
    p.add_argument("--hidden", help="comma-separated hidden layer sizes (default: config)")
    p.add_argument("--tag", default="dpm", help="model file name under models/")
    p.add_argument("--seed", type=int, help="training seed override")
    p.add_argument("--epochs", type=int, help="epoch count override")
    p.add_argument("--learning-rate", dest="learning_rate", type=float, help="learning rate override")
    p.set_defaults(func=_cmd_train_dpm)

    p = sub.add_parser("train-pls", help="fit the PLS latent-space baseline")
    _add_common(p)
    p.add_argument("--components", type=int, help="latent dimension count override")
    p.set_defaults(func=_cmd_train_pls)

    p = sub.add_parser("enroll", help="build and persist a gallery for a pipeline")
    _add_common(p)
    p.add_argument("--pipeline", required=True, choices=("raw", "pls", "dpm"))
    p.add_argument("--model", help="explicit model file (defaults to models/<pipeline>.bin)")
    p.add_argument("--gallery-spec", dest="gallery_spec", choices=("one_per_subject", "two_per_subject", "all_per_subject"))
    p.add_argument("--out", help="output gallery file")
    p.set_defaults(func=_cmd_enroll)

    p = sub.add_parser("identify", help="rank gallery subjects for probes")
    _add_common(p)
    p.add_argument("--pipeline", required=True, choices=("raw", "pls", "dpm"))
    p.add_argument("--model", help="explicit model file")
    p.add_argument("--gallery", help="explicit gallery file")
    p.add_argument("--probe-id", dest="probe_id", help="identify a single probe image id")
    p.add_argument("--top", type=int, default=10, help="ranks to print for --probe-id")
    p.set_defaults(func=_cmd_identify)

    p = sub.add_parser("verify", help="verification ROC for a pipeline")
    _add_common(p)
    p.add_argument("--pipeline", required=True, choices=("raw", "pls", "dpm"))
    p.add_argument("--model", help="explicit model file")
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("eval-suite", help="full benchmark: generate, train, evaluate, report")
    _add_common(p)
    p.add_argument("--regen", action="store_true", help="regenerate data even if present")
    p.set_defaults(func=_cmd_eval_suite)

    p = sub.add_parser("modality-gap", help="within- vs cross-modality comparison table")
    _add_common(p)
    p.add_argument("--model", help="explicit mapping model file")
    p.set_defaults(func=_cmd_modality_gap)

    p = sub.add_parser("bench", help="scoring and end-to-end probe latency")
    p.add_argument("--workdir", help="optional artifact dir for end-to-end timing")
    p.add_argument("--config", help="config file (only with --workdir)")
    p.add_argument("--gallery-size", dest="gallery_size", type=int, default=2460)
    p.add_argument("--dims", type=int, default=26928)
    p.add_argument("--repeats", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericalFailureError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ArtifactError, ProtocolError, InvalidInputError, InvalidParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CrossfaceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
