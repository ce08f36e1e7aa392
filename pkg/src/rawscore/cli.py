"""Command-line surface over the library modules.

Every subcommand maps 1:1 onto module operations and composes through
files; logs go to stderr, data to files (the one exception: `compress`
prints the compression ratio and `report` prints the verdict table on
stdout, both being the command's actual output).

Exit codes:
  0  success
  2  usage error (bad flags, unknown subcommand)
  3  precondition or input validation failed
  4  file I/O failure
  5  unsupported file format
  6  artifact mismatch (model/classifier/schema/geometry disagreement)
  7  numeric failure (fit diverged, no peak, encode failure)
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from rawscore import backend, codec, mlseg, morph, pipeline, tomo
from rawscore.calib import NoiseModel, fit_noise_model, simulate_calibration_bench
from rawscore.errors import (
    InvalidSpec,
    IoError,
    MismatchError,
    NumericalError,
    RawscoreError,
    TooFewReplicates,
    UnsupportedFormat,
    ValidationError,
)
from rawscore.imgio import ImageStack, PhantomSpec, generate_phantom, read_stack, write_stack
from rawscore.score import report_from_json, report_to_json
from rawscore.synth import SynthSpec, generate_raw_equivalents

log = logging.getLogger(__name__)

_EXIT_FAMILIES = (
    (ValidationError, 3),
    (IoError, 4),
    (UnsupportedFormat, 5),
    (MismatchError, 6),
    (NumericalError, 7),
)


def exit_code_for(exc: BaseException) -> int:
    for cls, code in _EXIT_FAMILIES:
        if isinstance(exc, cls):
            return code
    if isinstance(exc, OSError):
        return 4
    return 1


def _set_workers(n: int | None) -> None:
    if n is not None:
        backend.set_num_threads(n)


def _load_model(path) -> NoiseModel:
    return NoiseModel.from_json(Path(path).read_text())


def _load_classifier(path):
    return mlseg.classifier_from_json(Path(path).read_text())


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_calibrate(args) -> int:
    truth = NoiseModel(
        K=args.gain,
        offset=args.offset,
        read_variance=args.read_noise**2,
        saturation=args.saturation,
    )
    series = simulate_calibration_bench(
        truth,
        dims=tuple(args.dims),
        n_levels=args.levels,
        n_frames=args.frames,
        seed=args.seed,
    )
    model = fit_noise_model(series)
    Path(args.out).write_text(model.to_json())
    log.info(
        "fitted K=%.4f offset=%.2f read_var=%.3f -> %s",
        model.K, model.offset, model.read_variance, args.out,
    )
    return 0


def cmd_synth(args) -> int:
    raw = read_stack(args.input)
    model = _load_model(args.model)
    spec = SynthSpec(
        n_replicates=args.replicates, seed=args.seed, clamp=not args.no_clamp
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, rep in enumerate(generate_raw_equivalents(raw, model, spec)):
        write_stack(rep, out / f"rep_{i:03d}.tif")
    log.info("wrote %d replicates to %s", args.replicates, out)
    return 0


def cmd_compress(args) -> int:
    raw = read_stack(args.input)
    if args.blob is not None and args.codec != "noisenorm":
        raise InvalidSpec("--blob only applies to --codec noisenorm")
    if args.codec == "identity":
        result = codec.CodecResult(
            decoded=raw,
            encoded_bytes=raw.data.size * 2,
            compression_ratio=1.0,
            codec_id="identity",
        )
    elif args.codec == "bit8":
        result = codec.downsample_16_to_8(raw)
    elif args.codec == "jpeg":
        quality = args.quality
        if quality is None:
            quality = codec.find_jpeg_quality(raw, args.target_ratio)
            log.info("quality %d for target ratio %.1f:1", quality, args.target_ratio)
        result = codec.jpeg_roundtrip(raw, quality)
    else:  # noisenorm
        if args.model is None:
            raise InvalidSpec("--codec noisenorm requires --model")
        model = _load_model(args.model)
        blob = codec.noisenorm_encode(raw, model, seed=args.seed, q=args.q)
        result = codec.CodecResult(
            decoded=codec.noisenorm_decode(blob, model),
            encoded_bytes=len(blob),
            compression_ratio=raw.data.size * 2 / len(blob),
            codec_id="noisenorm",
        )
        if args.blob is not None:
            Path(args.blob).write_bytes(blob)
    write_stack(result.decoded, args.out)
    print(repr(float(result.compression_ratio)))
    log.info(
        "%s: ratio %.3f:1, decoded %d-bit -> %s",
        result.codec_id, result.compression_ratio, result.decoded.bit_depth, args.out,
    )
    return 0


def cmd_train(args) -> int:
    raw = read_stack(args.input)
    labels = read_stack(args.labels)
    if labels.data.shape != raw.data.shape:
        raise InvalidSpec("label image dimensions do not match the input")
    recipe = mlseg.FeatureRecipe(
        sigmas=tuple(float(s) for s in args.sigmas.split(",")),
        kinds=tuple(args.kinds.split(",")),
        dimensionality=2 if raw.depth == 1 else 3,
    )
    features = mlseg.compute_features(raw, recipe)
    scribbles = pipeline._auto_scribbles(
        labels.data, args.scribbles_per_class, args.seed
    )
    clf = mlseg.train_classifier(
        features, scribbles, recipe,
        n_trees=args.trees, seed=args.seed, min_leaf=args.min_leaf,
    )
    Path(args.out).write_text(mlseg.classifier_to_json(clf))
    log.info("%d trees, %d features -> %s", args.trees, features.shape[-1], args.out)
    return 0


def cmd_predict(args) -> int:
    stack = read_stack(args.input)
    clf = _load_classifier(args.classifier)
    proba = mlseg.predict_proba(clf, mlseg.compute_features(stack, clf.recipe))
    if not 0 <= args.class_id < proba.shape[-1]:
        raise InvalidSpec(f"class id {args.class_id} outside 0..{proba.shape[-1] - 1}")
    # probability plane stored as uint16, 65535 == 1.0
    plane = np.rint(proba[..., args.class_id] * 65535.0).astype(np.uint16)
    write_stack(ImageStack(data=plane), args.out)
    log.info("class %d probability -> %s", args.class_id, args.out)
    return 0


def cmd_segment(args) -> int:
    stack = read_stack(args.input)
    clf = _load_classifier(args.classifier)
    proba = mlseg.predict_proba(clf, mlseg.compute_features(stack, clf.recipe))
    mask = mlseg.threshold_mask(proba, clf, class_id=args.class_id, threshold=args.threshold)
    write_stack(
        ImageStack(data=mask.astype(np.uint8) * 255, bit_depth=8), args.out
    )
    n = None
    if args.objects_csv is not None:
        labeled = morph.measure_objects(morph.label_components(mask))
        Path(args.objects_csv).write_text(morph.records_to_csv(labeled.records))
        n = labeled.n_objects
    log.info(
        "mask -> %s%s", args.out, f" ({n} objects -> {args.objects_csv})" if n is not None else ""
    )
    return 0


def cmd_score(args) -> int:
    if len(args.replicates) < 2:
        raise TooFewReplicates(
            f"scoring needs >= 2 replicate images, got {len(args.replicates)}"
        )
    from rawscore import score as sc

    clf = _load_classifier(args.classifier)
    raw = read_stack(args.raw)
    comp = read_stack(args.comp)
    reps = [read_stack(p) for p in args.replicates]
    raw_lab = pipeline._segment(raw, clf, args.threshold)
    comp_lab = pipeline._segment(comp, clf, args.threshold)
    rep_labs = [pipeline._segment(r, clf, args.threshold) for r in reps]
    parameters = (
        tuple(args.parameters.split(","))
        if args.parameters
        else (pipeline.DEFAULT_PARAMETERS_2D if raw.depth == 1 else pipeline.DEFAULT_PARAMETERS_3D)
    )

    chi_raw = pipeline._image_means(raw_lab, parameters)
    rep_means = [pipeline._image_means(lab, parameters) for lab in rep_labs]
    samples = {
        name: sc.ParamSample(name, tuple(m[name] for m in rep_means))
        for name in chi_raw
    }
    obj = sc.per_object_scores(
        raw_lab.records,
        [lab.records for lab in rep_labs],
        comp_lab.records,
        parameters,
        max_distance=args.max_distance,
    )
    summary = sc.averaged_scores(obj.epsilons)
    m = sc.match_objects(raw_lab.records, comp_lab.records, max_distance=args.max_distance)
    hists = [(args.comp_name, sc.delta_distribution(m, parameters[0]))] if m.n_pairs else []
    report = sc.build_report(
        samples,
        chi_raw,
        {args.comp_name: pipeline._image_means(comp_lab, parameters)},
        matching={args.comp_name: m},
        delta_histograms=hists,
        appendix={"per_object_scores": {args.comp_name: sc.summary_doc(summary)}},
    )
    Path(args.out).write_text(report_to_json(report))
    log.info("report -> %s", args.out)
    return 0


def cmd_tomo(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.demo is not None:
        if args.demo != "shepp-logan":
            raise InvalidSpec(f"unknown demo {args.demo!r}")
        stack, _ = generate_phantom(
            PhantomSpec(kind="shepp_logan2d", width=args.size, height=args.size)
        )
        write_stack(stack, out_dir / "phantom.tif")
        angles = np.arange(args.n_angles) * (180.0 / args.n_angles)
        sino = tomo.forward_radon(stack.astype_float()[0], angles)
        _save_sinogram(sino.data[:, np.newaxis, :], angles, out_dir / "sinogram.tif")
        recon = tomo.fbp_reconstruct(sino, filter_name=args.filter)
        write_stack(
            ImageStack(data=tomo.normalize_volume(recon[np.newaxis])),
            out_dir / "reconstruction.tif",
        )
        log.info("phantom, sinogram and reconstruction -> %s", out_dir)
        return 0
    if args.project is not None:
        stack = read_stack(args.project)
        angles = np.arange(args.n_angles) * (180.0 / args.n_angles)
        sinos = np.stack(
            [tomo.forward_radon(sl, angles).data for sl in stack.astype_float()]
        )
        _save_sinogram(np.moveaxis(sinos, 0, 1), angles, out_dir / "sinogram.tif")
        log.info("%d slices projected at %d angles -> %s", stack.depth, args.n_angles, out_dir)
        return 0
    if args.reconstruct is not None:
        proj, angles, spacing = tomo.load_projections(args.reconstruct)
        recon = tomo.reconstruct_stack(
            proj, angles, layout="angles", filter_name=args.filter,
            detector_spacing=spacing,
        )
        write_stack(recon, out_dir / "reconstruction.tif")
        log.info("reconstruction -> %s", out_dir / "reconstruction.tif")
        return 0
    raise InvalidSpec("tomo needs one of --demo, --project, --reconstruct")


def _save_sinogram(camera_view: np.ndarray, angles: np.ndarray, path) -> None:
    """Quantize a float projection set (angle, slice, detector) to uint16.

    Plain max scaling: reconstruction is linear and its output is
    re-normalized, so a global factor is harmless, while percentile
    clipping would not be.
    """
    peak = float(camera_view.max())
    scaled = camera_view / peak if peak > 0 else camera_view
    data = np.rint(np.clip(scaled, 0.0, 1.0) * 65535.0).astype(np.uint16)
    tomo.save_projections(ImageStack(data=data), angles, path)


def cmd_report(args) -> int:
    report = report_from_json(Path(args.input).read_text())
    if args.validate_only:
        log.info("%s: valid", args.input)
        return 0
    print(f"{'parameter':24s} {'codec':12s} {'epsilon':>10s}  verdict")
    for name, p in sorted(report["parameters"].items()):
        for codec_id, c in sorted(p["codecs"].items()):
            eps = "-" if c["epsilon"] is None else f"{c['epsilon']:10.3f}"
            print(f"{name:24s} {codec_id:12s} {eps:>10s}  {c['verdict']}")
    return 0


def cmd_run(args) -> int:
    if args.demo:
        config = pipeline.demo_config()
    elif args.config is not None:
        config = pipeline.PipelineConfig.from_file(args.config)
    else:
        raise InvalidSpec("run needs --config or --demo")
    pipeline.run_pipeline(config, out_dir=args.out_dir)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rawscore",
        description="Compression tolerance scoring against the raw noise floor.",
        epilog="Exit codes: 0 ok, 2 usage, 3 validation, 4 I/O, "
               "5 format, 6 mismatch, 7 numeric.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument(
        "--workers", type=int, default=None,
        help="compute thread count (never changes output bytes)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="simulate a calibration bench and fit a noise model")
    p.add_argument("--out", required=True, help="output noise model JSON")
    p.add_argument("--gain", type=float, default=2.0, help="true gain, ADU per photon")
    p.add_argument("--offset", type=float, default=100.0, help="true black level, ADU")
    p.add_argument("--read-noise", type=float, default=3.0, help="true read noise std, ADU")
    p.add_argument("--saturation", type=float, default=65535.0)
    p.add_argument("--dims", type=int, nargs=2, default=(32, 32), metavar=("H", "W"))
    p.add_argument("--levels", type=int, default=16, help="illumination levels")
    p.add_argument("--frames", type=int, default=200, help="frames per level")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("synth", help="generate raw-equivalent replicates")
    p.add_argument("--input", required=True, help="16-bit TIFF stack")
    p.add_argument("--model", required=True, help="noise model JSON")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--replicates", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-clamp", action="store_true", help="skip clamping to the bit range")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("compress", help="run one codec; prints the compression ratio")
    p.add_argument("--input", required=True)
    p.add_argument("--codec", required=True, choices=("identity", "bit8", "jpeg", "noisenorm"))
    p.add_argument("--out", required=True, help="decoded image TIFF")
    p.add_argument("--blob", default=None, help="also write the encoded byte stream")
    p.add_argument("--quality", type=int, default=None, help="jpeg quality 1..95")
    p.add_argument("--target-ratio", type=float, default=10.0, help="jpeg ratio if no quality")
    p.add_argument("--model", default=None, help="noise model JSON (noisenorm)")
    p.add_argument("--q", type=float, default=1.0, help="noisenorm step, units of sigma")
    p.add_argument("--seed", type=int, default=0, help="noisenorm dither seed")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("train", help="train a pixel classifier from a label image")
    p.add_argument("--input", required=True)
    p.add_argument("--labels", required=True, help="label TIFF; 0 background, >0 foreground")
    p.add_argument("--out", required=True, help="classifier JSON")
    p.add_argument("--trees", type=int, default=50)
    p.add_argument("--min-leaf", type=int, default=2)
    p.add_argument("--scribbles-per-class", type=int, default=200)
    p.add_argument("--sigmas", default="0.7,1.0,1.6,3.5,5.0")
    p.add_argument(
        "--kinds",
        default="raw_intensity,gaussian,gradient_magnitude,laplacian,"
                "hessian_eigenvalues,structure_tensor_eigenvalues",
    )
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write a class probability map (uint16, 65535 = 1)")
    p.add_argument("--input", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--class-id", type=int, default=1)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("segment", help="threshold a class probability into a mask")
    p.add_argument("--input", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--out", required=True, help="8-bit mask TIFF (0/255)")
    p.add_argument("--class-id", type=int, default=1)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--objects-csv", default=None, help="also measure objects into CSV")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("score", help="score a processed image against replicate spread")
    p.add_argument("--raw", required=True)
    p.add_argument("--comp", required=True, help="processed image to score")
    p.add_argument("--comp-name", default="comp", help="codec label in the report")
    p.add_argument("--replicates", nargs="+", required=True, help="replicate TIFFs")
    p.add_argument("--classifier", required=True)
    p.add_argument("--out", required=True, help="report JSON")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--max-distance", type=float, default=None)
    p.add_argument("--parameters", default=None, help="comma-separated parameter names")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("tomo", help="forward projection and filtered back projection")
    p.add_argument("--demo", default=None, metavar="NAME", help="'shepp-logan'")
    p.add_argument("--project", default=None, metavar="TIFF", help="slice stack to project")
    p.add_argument("--reconstruct", default=None, metavar="TIFF", help="saved projections")
    p.add_argument("--out-dir", default=".", help="output directory")
    p.add_argument("--size", type=int, default=256, help="demo phantom size")
    p.add_argument("--n-angles", type=int, default=180)
    p.add_argument("--filter", default="ramp", choices=("ramp", "hann"))
    p.set_defaults(func=cmd_tomo)

    p = sub.add_parser("report", help="validate a report and print the verdict table")
    p.add_argument("--input", required=True)
    p.add_argument("--validate-only", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="run the full pipeline from a config file")
    p.add_argument("--config", default=None)
    p.add_argument("--demo", action="store_true", help="use the bundled 2D demo config")
    p.add_argument("--out-dir", default=None, help="override the config output dir")
    p.set_defaults(func=cmd_run)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        _set_workers(args.workers)
        return args.func(args)
    except RawscoreError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exit_code_for(exc)
    except UnicodeDecodeError as exc:
        log.error("not a text file: %s", exc)
        return 5
    except OSError as exc:
        log.error("i/o failure: %s", exc)
        return 4


if __name__ == "__main__":
    sys.exit(main())
