"""End-to-end orchestration: one config in, one verdict report out.

A run is a pure function of (config document, input files): every random
draw flows from the single global seed through per-stage labels, all
intermediate artifacts land in the output directory with content hashes
recorded in the report provenance, and running the same config twice
produces byte-identical report JSON.

Stage order: input -> calibrate -> synth -> compress -> train ->
segment -> match/score -> report. Logs go to stderr via `logging`; data
only ever goes to files.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from rawscore import cbrng, codec, mlseg, morph, score, synth
from rawscore.calib import NoiseModel, fit_noise_model, simulate_calibration_bench
from rawscore.errors import InvalidSpec, SchemaViolation
from rawscore.imgio import ImageStack, PhantomSpec, generate_phantom, read_stack, write_stack
from rawscore.score import ParamSample

log = logging.getLogger(__name__)

CONFIG_VERSION = 1

# parameters scored per object and, as per-image means, in the report body
DEFAULT_PARAMETERS_2D = morph.PARAM_NAMES_2D
DEFAULT_PARAMETERS_3D = morph.PARAM_NAMES_3D


@dataclass(frozen=True)
class PipelineConfig:
    """A validated configuration document plus its resolution directory.

    Relative paths inside the document resolve against `base_dir` (the
    directory the config file came from), so configs stay relocatable.
    """

    doc: dict
    base_dir: Path

    @staticmethod
    def from_file(path) -> "PipelineConfig":
        p = Path(path)
        if not p.exists():
            raise InvalidSpec(f"config file {p} does not exist")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise SchemaViolation(f"config is not valid JSON: {exc}") from exc
        return PipelineConfig.from_dict(doc, base_dir=p.parent)

    @staticmethod
    def from_dict(doc: dict, base_dir=".") -> "PipelineConfig":
        schema = score.load_schema("pipeline_config.schema.json")
        try:
            jsonschema.validate(doc, schema)
        except jsonschema.ValidationError as exc:
            raise SchemaViolation(
                f"config rejected: {exc.message} at /{'/'.join(map(str, exc.absolute_path))}"
            ) from exc
        cfg = PipelineConfig(doc=doc, base_dir=Path(base_dir))
        cfg._check_referenced_files()
        return cfg

    def resolve(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    def _check_referenced_files(self) -> None:
        refs = []
        if "path" in self.doc["input"]:
            refs.append(self.doc["input"]["path"])
        if "model_path" in self.doc["calibration"]:
            refs.append(self.doc["calibration"]["model_path"])
        if "path" in self.doc["classifier"]:
            refs.append(self.doc["classifier"]["path"])
        for ref in refs:
            if not self.resolve(ref).exists():
                raise InvalidSpec(f"referenced file {ref!r} does not exist")

    def canonical_json(self) -> str:
        return json.dumps(self.doc, sort_keys=True)


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def demo_config() -> PipelineConfig:
    """The bundled 2D demo: disks phantom, three codecs, small and fast."""
    from importlib import resources

    text = resources.files("rawscore").joinpath("configs/demo2d.json").read_text()
    return PipelineConfig.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def _stage_input(cfg: PipelineConfig, seed: int):
    spec = cfg.doc["input"]
    if "path" in spec:
        stack = read_stack(cfg.resolve(spec["path"]))
        log.info("input: read %s pages=%d", spec["path"], stack.depth)
        return stack, None
    ph = dict(spec["phantom"])
    ph.setdefault("seed", cbrng.derive_seed(seed, "phantom"))
    stack, labels = generate_phantom(PhantomSpec(**ph))
    log.info(
        "input: %s phantom %dx%d, %d objects",
        ph["kind"], ph["width"], ph["height"], int(labels.max()),
    )
    return stack, labels


def _stage_model(cfg: PipelineConfig, seed: int) -> NoiseModel:
    spec = cfg.doc["calibration"]
    if "model_path" in spec:
        model = NoiseModel.from_json(cfg.resolve(spec["model_path"]).read_text())
        log.info("calibrate: loaded model from %s", spec["model_path"])
        return model
    sim = spec["simulate"]
    truth = NoiseModel(
        K=float(sim["gain"]),
        offset=float(sim["offset"]),
        read_variance=float(sim["read_noise"]) ** 2,
        saturation=float(sim.get("saturation", 65535.0)),
    )
    series = simulate_calibration_bench(
        truth,
        dims=tuple(sim.get("dims", (32, 32))),
        n_levels=int(sim.get("n_levels", 16)),
        n_frames=int(sim.get("n_frames", 200)),
        seed=cbrng.derive_seed(seed, "calibrate"),
    )
    model = fit_noise_model(series)
    log.info(
        "calibrate: fitted K=%.4f offset=%.2f read_var=%.3f",
        model.K, model.offset, model.read_variance,
    )
    return model


def _apply_codec(raw: ImageStack, spec: dict, model: NoiseModel, seed: int):
    """-> (name, decoded 16-bit stack, compression ratio)."""
    cid = spec["id"]
    name = spec.get("name", cid)
    if cid == "identity":
        return name, raw, 1.0
    if cid == "bit8":
        r = codec.downsample_16_to_8(raw)
        return name, codec.upsample_8_to_16(r.decoded), r.compression_ratio
    if cid == "jpeg":
        quality = spec.get("quality")
        if quality is None:
            quality = codec.find_jpeg_quality(raw, spec.get("target_ratio", 10.0))
        r = codec.jpeg_roundtrip(raw, quality)
        return name, r.decoded, r.compression_ratio
    if cid == "noisenorm":
        r = codec.noisenorm_roundtrip(
            raw, model,
            seed=cbrng.derive_seed(seed, f"codec-{name}"),
            q=float(spec.get("q", 1.0)),
        )
        return name, r.decoded, r.compression_ratio
    raise InvalidSpec(f"unknown codec id {cid!r}")


def _auto_scribbles(truth: np.ndarray, n_per_class: int, seed: int) -> mlseg.LabelScribbles:
    """Sample training pixels from a ground-truth label image."""
    rng = np.random.default_rng(seed)
    flat = truth.ravel()
    mapping = {}
    for class_id, pool in ((0, np.flatnonzero(flat == 0)), (1, np.flatnonzero(flat > 0))):
        if pool.size == 0:
            raise InvalidSpec(f"phantom has no pixels for class {class_id}")
        take = min(n_per_class, pool.size)
        for idx in np.sort(rng.choice(pool, take, replace=False)):
            mapping[int(idx)] = class_id
    return mlseg.LabelScribbles(mapping)


def _stage_classifier(cfg: PipelineConfig, raw: ImageStack, truth, seed: int):
    spec = cfg.doc["classifier"]
    if "path" in spec:
        clf = mlseg.classifier_from_json(cfg.resolve(spec["path"]).read_text())
        log.info("train: loaded classifier from %s", spec["path"])
        return clf
    if truth is None:
        raise InvalidSpec(
            "training a classifier needs a phantom input (ground truth labels); "
            "provide classifier.path for file inputs"
        )
    train = spec.get("train", {})
    recipe_spec = train.get("recipe", {})
    recipe = mlseg.FeatureRecipe(
        sigmas=tuple(recipe_spec.get("sigmas", (0.7, 1.0, 1.6, 3.5, 5.0))),
        kinds=tuple(
            recipe_spec.get(
                "kinds",
                (
                    "raw_intensity",
                    "gaussian",
                    "gradient_magnitude",
                    "laplacian",
                    "hessian_eigenvalues",
                    "structure_tensor_eigenvalues",
                ),
            )
        ),
        dimensionality=int(recipe_spec.get("dimensionality", 2 if raw.depth == 1 else 3)),
    )
    features = mlseg.compute_features(raw, recipe)
    scribbles = _auto_scribbles(
        truth,
        int(train.get("scribbles_per_class", 200)),
        cbrng.derive_seed(seed, "scribbles"),
    )
    clf = mlseg.train_classifier(
        features,
        scribbles,
        recipe,
        n_trees=int(train.get("n_trees", 50)),
        seed=cbrng.derive_seed(seed, "train"),
        min_leaf=int(train.get("min_leaf", 2)),
    )
    log.info(
        "train: %d trees on %d scribbles, %d features",
        len(clf.trees), len(scribbles.mapping), features.shape[-1],
    )
    return clf


def _segment(stack: ImageStack, clf, threshold: float) -> morph.LabeledObjects:
    features = mlseg.compute_features(stack, clf.recipe)
    proba = mlseg.predict_proba(clf, features)
    mask = mlseg.threshold_mask(proba, clf, class_id=1, threshold=threshold)
    return morph.measure_objects(morph.label_components(mask))


def _mask_stack(labeled: morph.LabeledObjects) -> ImageStack:
    return ImageStack(
        data=(labeled.label_map > 0).astype(np.uint8) * 255, bit_depth=8
    )


def _image_means(labeled: morph.LabeledObjects, parameters) -> dict:
    if not labeled.records:
        raise InvalidSpec("segmentation produced no objects; nothing to score")
    out = {}
    for p in parameters:
        vals = np.asarray([float(getattr(r, p)) for r in labeled.records])
        vals = vals[np.isfinite(vals)]  # degenerate-shape params are NaN
        if vals.size == 0:
            raise InvalidSpec(
                f"parameter {p!r} is degenerate on every object; "
                "drop it from the parameters list"
            )
        out[f"mean_{p}"] = float(vals.mean())
    out["n_tot"] = float(labeled.n_objects)
    gp = morph.global_params(labeled)
    out["a_tot" if gp.a_tot is not None else "v_tot"] = float(
        gp.a_tot if gp.a_tot is not None else gp.v_tot
    )
    return out


# ---------------------------------------------------------------------------
# the run
# ---------------------------------------------------------------------------


def run_pipeline(config: PipelineConfig, out_dir=None) -> dict:
    """Execute every stage and return the report (also written to disk)."""
    cfg = config.doc
    seed = int(cfg["seed"])
    out = Path(out_dir) if out_dir is not None else config.resolve(
        cfg.get("output_dir", "rawscore_out")
    )
    out.mkdir(parents=True, exist_ok=True)

    raw, truth = _stage_input(config, seed)

    model = _stage_model(config, seed)
    (out / "model.json").write_text(model.to_json())

    if truth is not None and cfg["input"]["phantom"].get("acquire_noise", True):
        # phantoms are noiseless scenes; one synthetic draw stands in for
        # the actual acquisition so chi_raw carries sensor noise too
        raw = synth.generate_raw_equivalents(
            raw, model,
            synth.SynthSpec(n_replicates=2, seed=cbrng.derive_seed(seed, "acquire")),
        )[0]
        log.info("input: applied one acquisition noise draw to the phantom")
    write_stack(raw, out / "raw.tif")
    if truth is not None:
        write_stack(
            ImageStack(data=truth.astype(np.uint16)), out / "truth_labels.tif"
        )

    synth_spec = synth.SynthSpec(
        n_replicates=int(cfg["synth"]["n_replicates"]),
        seed=cbrng.derive_seed(seed, "synth"),
        clamp=bool(cfg["synth"].get("clamp", True)),
    )
    replicates = synth.generate_raw_equivalents(raw, model, synth_spec)
    rep_dir = out / "replicates"
    rep_dir.mkdir(exist_ok=True)
    for i, rep in enumerate(replicates):
        write_stack(rep, rep_dir / f"rep_{i:03d}.tif")
    log.info("synth: %d raw-equivalent replicates", len(replicates))

    codec_dir = out / "codecs"
    codec_dir.mkdir(exist_ok=True)
    decoded = {}
    ratios = {}
    for spec in cfg["codecs"]:
        name, stack, ratio = _apply_codec(raw, spec, model, seed)
        if name in decoded:
            raise InvalidSpec(f"duplicate codec name {name!r}; set distinct names")
        decoded[name] = stack
        ratios[name] = float(ratio)
        write_stack(stack, codec_dir / f"{name}.tif")
        log.info("compress: %s ratio %.2f:1", name, ratio)

    clf = _stage_classifier(config, raw, truth, seed)
    clf_json = mlseg.classifier_to_json(clf)
    (out / "classifier.json").write_text(clf_json)

    threshold = float(cfg["classifier"].get("threshold", 0.5))
    seg_dir = out / "segmentation"
    seg_dir.mkdir(exist_ok=True)
    raw_lab = _segment(raw, clf, threshold)
    write_stack(_mask_stack(raw_lab), seg_dir / "raw_mask.tif")
    (seg_dir / "raw_objects.csv").write_text(morph.records_to_csv(raw_lab.records))
    log.info("segment: raw image -> %d objects", raw_lab.n_objects)
    rep_labs = [_segment(r, clf, threshold) for r in replicates]
    codec_labs = {}
    for name in sorted(decoded):
        codec_labs[name] = _segment(decoded[name], clf, threshold)
        write_stack(_mask_stack(codec_labs[name]), seg_dir / f"{name}_mask.tif")
        log.info("segment: %s -> %d objects", name, codec_labs[name].n_objects)

    parameters = tuple(
        cfg.get(
            "parameters",
            DEFAULT_PARAMETERS_2D if raw.depth == 1 else DEFAULT_PARAMETERS_3D,
        )
    )
    max_distance = cfg.get("matching", {}).get("max_distance")

    chi_raw = _image_means(raw_lab, parameters)
    rep_means = [_image_means(lab, parameters) for lab in rep_labs]
    samples = {
        name: ParamSample(name, tuple(m[name] for m in rep_means))
        for name in chi_raw
    }
    chi_c = {name: _image_means(lab, parameters) for name, lab in codec_labs.items()}

    matching = {}
    delta_hists = []
    appendix_per_object = {}
    delta_param = parameters[0]
    for name in sorted(codec_labs):
        obj = score.per_object_scores(
            raw_lab.records,
            [lab.records for lab in rep_labs],
            codec_labs[name].records,
            parameters,
            max_distance=max_distance,
        )
        summary = score.averaged_scores(obj.epsilons)
        appendix_per_object[name] = score.summary_doc(summary)
        m = score.match_objects(
            raw_lab.records, codec_labs[name].records, max_distance=max_distance
        )
        matching[name] = m
        if m.n_pairs:
            delta_hists.append((name, score.delta_distribution(m, delta_param)))

    provenance = {
        "config_sha256": _sha256(config.canonical_json()),
        "model_sha256": _sha256(model.to_json()),
        "classifier_sha256": _sha256(clf_json),
        "seeds": {
            "global": seed,
            "stages": {
                label: cbrng.derive_seed(seed, label)
                for label in ("phantom", "calibrate", "synth", "scribbles", "train")
            },
        },
        "n_replicates": len(replicates),
    }
    appendix = {
        "compression_ratios": {k: ratios[k] for k in sorted(ratios)},
        "per_object_scores": appendix_per_object,
        "object_counts": {
            "raw": raw_lab.n_objects,
            **{k: codec_labs[k].n_objects for k in sorted(codec_labs)},
        },
    }

    report = score.build_report(
        samples, chi_raw, chi_c,
        matching=matching,
        delta_histograms=delta_hists,
        provenance=provenance,
        appendix=appendix,
    )
    (out / "report.json").write_text(score.report_to_json(report))
    log.info("report: %s", out / "report.json")
    return report
