"""Standard scores against replicate spread, matching, and reports.

The scoring chain: replicate values of a parameter give a predictive
uncertainty sigma (sample std, n-1). A processed value chi_c is scored
as epsilon = (chi_raw - chi_c) / sigma, and |epsilon| < 1 reads
"tolerable": the processing-induced shift hides inside the shot-noise
variability of the measurement itself. sigma == 0 (integer parameters
that never vary) yields a flagged indeterminate verdict, never a
division.

Objects are matched between segmentations by greedy nearest-centroid
pairing, ascending by distance with index tie-breaks, each object used
once, capped by max_distance (5 px in 2D, 3 voxels in 3D by default).
Per-object sigma comes from matching each synthetic replicate back to
the raw segmentation as the anchor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from rawscore.errors import (
    DegenerateSpread,
    DimMismatch,
    EmptyPairing,
    InvalidSpec,
    SchemaViolation,
    TooFewReplicates,
)

MAX_DISTANCE_2D = 5.0
MAX_DISTANCE_3D = 3.0

TOLERABLE_LIMIT = 1.0

REPORT_VERSION = 1


@dataclass(frozen=True)
class ParamSample:
    name: str
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "values", tuple(float(v) for v in self.values)
        )


def predictive_uncertainty(sample: ParamSample) -> tuple[float, float]:
    """(replicate mean, sample std with n-1) of one parameter."""
    vals = np.asarray(sample.values)
    if vals.size < 2:
        raise TooFewReplicates(
            f"{sample.name}: need >= 2 replicate values, got {vals.size}"
        )
    return float(vals.mean()), float(vals.std(ddof=1))


def standard_score(chi_raw: float, chi_c: float, sigma_raw: float) -> float:
    if sigma_raw < 0:
        raise InvalidSpec(f"sigma_raw must be >= 0, got {sigma_raw}")
    if sigma_raw == 0:
        raise DegenerateSpread(
            "sigma_raw is 0; the score is indeterminate, not infinite"
        )
    return (chi_raw - chi_c) / sigma_raw


# ---------------------------------------------------------------------------
# object matching
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int, float], ...]  # (raw idx, other idx, dist)
    unpaired_raw: tuple[int, ...]
    unpaired_other: tuple[int, ...]
    raw_records: tuple | None = None
    other_records: tuple | None = None

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)


def _centroids(objs) -> tuple[np.ndarray, tuple | None]:
    """(n, d) centroid array from records or a plain coordinate array."""
    if isinstance(objs, np.ndarray):
        arr = np.asarray(objs, np.float64)
        if arr.ndim != 2 or arr.shape[1] not in (2, 3):
            raise InvalidSpec(
                f"centroid array must be (n, 2) or (n, 3), got {arr.shape}"
            )
        return arr, None
    records = tuple(objs)
    cols = []
    for rec in records:
        if hasattr(rec, "z_cm"):
            cols.append((rec.x_cm, rec.y_cm, rec.z_cm))
        elif hasattr(rec, "x_cm"):
            cols.append((rec.x_cm, rec.y_cm))
        else:
            raise InvalidSpec(f"object {rec!r} carries no centroid")
    if not records:
        return np.empty((0, 2)), records
    arr = np.asarray(cols, np.float64)
    if np.unique([len(c) for c in cols]).size != 1:
        raise InvalidSpec("objects mix 2D and 3D centroids")
    return arr, records


def match_objects(raw_objs, other_objs, max_distance: float | None = None) -> MatchResult:
    """Greedy nearest-centroid pairing, each object used at most once."""
    a, raw_records = _centroids(raw_objs)
    b, other_records = _centroids(other_objs)
    if a.size and b.size and a.shape[1] != b.shape[1]:
        raise DimMismatch(
            f"cannot match {a.shape[1]}D against {b.shape[1]}D centroids"
        )
    dim = a.shape[1] if a.size else (b.shape[1] if b.size else 2)
    if max_distance is None:
        max_distance = MAX_DISTANCE_3D if dim == 3 else MAX_DISTANCE_2D

    pairs = []
    used_a = np.zeros(len(a), bool)
    used_b = np.zeros(len(b), bool)
    if len(a) and len(b):
        d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
        flat = d.ravel()
        ok = np.nonzero(flat <= max_distance)[0]
        # ascending by distance, ties broken by raw then other index
        for k in ok[np.argsort(flat[ok], kind="stable")]:
            i, j = divmod(int(k), len(b))
            if not used_a[i] and not used_b[j]:
                used_a[i] = used_b[j] = True
                pairs.append((i, j, float(d[i, j])))
    return MatchResult(
        pairs=tuple(pairs),
        unpaired_raw=tuple(np.nonzero(~used_a)[0].tolist()),
        unpaired_other=tuple(np.nonzero(~used_b)[0].tolist()),
        raw_records=raw_records,
        other_records=other_records,
    )


# ---------------------------------------------------------------------------
# delta distributions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeltaStats:
    parameter: str
    deltas: tuple[float, ...]
    mean: float
    std: float
    bin_edges: tuple[float, ...]
    counts: tuple[int, ...]


def delta_distribution(
    match: MatchResult, parameter: str, bin_width: float = 0.5
) -> DeltaStats:
    """Per-pair raw-minus-other differences of one parameter."""
    if not match.pairs:
        raise EmptyPairing("no matched pairs to difference")
    if match.raw_records is None or match.other_records is None:
        raise InvalidSpec(
            "delta distributions need record inputs, not bare centroids"
        )
    if bin_width <= 0:
        raise InvalidSpec(f"bin_width must be positive, got {bin_width}")
    deltas = np.array(
        [
            getattr(match.raw_records[i], parameter)
            - getattr(match.other_records[j], parameter)
            for i, j, _ in match.pairs
        ]
    )
    lo = np.floor(deltas.min() / bin_width) * bin_width
    hi = np.ceil(deltas.max() / bin_width) * bin_width
    if hi <= lo:
        hi = lo + bin_width
    edges = np.arange(lo, hi + bin_width / 2.0, bin_width)
    counts, _ = np.histogram(deltas, bins=edges)
    return DeltaStats(
        parameter=parameter,
        deltas=tuple(float(x) for x in deltas),
        mean=float(deltas.mean()),
        std=float(deltas.std(ddof=1)) if deltas.size > 1 else 0.0,
        bin_edges=tuple(float(e) for e in edges),
        counts=tuple(int(c) for c in counts),
    )


def delta_table_csv(match: MatchResult, parameters) -> str:
    """Per-pair CSV: indices, distance, one delta column per parameter."""
    if match.raw_records is None or match.other_records is None:
        raise InvalidSpec("delta tables need record inputs")
    names = list(parameters)
    rows = ["raw_index,other_index,distance," + ",".join(f"delta_{n}" for n in names)]
    for i, j, dist in match.pairs:
        deltas = [
            getattr(match.raw_records[i], n) - getattr(match.other_records[j], n)
            for n in names
        ]
        rows.append(
            f"{i},{j},{dist!r}," + ",".join(repr(float(x)) for x in deltas)
        )
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------------------
# score aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScoreSummary:
    mean: float
    std: float
    n: int
    n_degenerate: int


def averaged_scores(per_object_eps: dict) -> dict:
    """Per-parameter mean/std over objects; degenerate entries counted.

    Input maps parameter -> sequence of epsilon or None (None marks a
    degenerate per-object sigma).
    """
    out = {}
    for name, eps in per_object_eps.items():
        vals = [e for e in eps if e is not None and np.isfinite(e)]
        n_bad = len(list(eps)) - len(vals)
        arr = np.asarray(vals)
        out[name] = ScoreSummary(
            mean=float(arr.mean()) if arr.size else float("nan"),
            std=float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
            n=int(arr.size),
            n_degenerate=int(n_bad),
        )
    return out


@dataclass(frozen=True)
class ObjectScores:
    raw_indices: tuple[int, ...]
    epsilons: dict  # parameter -> tuple of float | None, aligned
    n_unmatched_comp: int
    n_underrepresented: int


def per_object_scores(
    raw_records,
    replicate_sets,
    comp_records,
    parameters,
    max_distance: float | None = None,
) -> ObjectScores:
    """Per-object epsilon per parameter.

    Each replicate segmentation and the processed segmentation are
    matched back to the raw segmentation; an object needs a processed
    partner and >= 2 replicate partners to be scored. A parameter whose
    replicate spread sits at or below float-rounding scale (relative to
    the largest replicate value) is left None (degenerate) rather than
    divided by.
    """
    raw_records = tuple(raw_records)
    if len(replicate_sets) < 2:
        raise TooFewReplicates(
            f"need >= 2 replicate segmentations, got {len(replicate_sets)}"
        )
    comp_match = match_objects(raw_records, comp_records, max_distance)
    comp_of = {i: j for i, j, _ in comp_match.pairs}
    rep_of = []
    for rep in replicate_sets:
        m = match_objects(raw_records, rep, max_distance)
        rep_of.append(({i: j for i, j, _ in m.pairs}, tuple(rep)))

    indices = []
    eps: dict = {p: [] for p in parameters}
    n_under = 0
    for i, rec in enumerate(raw_records):
        if i not in comp_of:
            continue
        partners = [
            recs[mapping[i]] for mapping, recs in rep_of if i in mapping
        ]
        if len(partners) < 2:
            n_under += 1
            continue
        indices.append(i)
        comp_rec = tuple(comp_records)[comp_of[i]]
        for p in parameters:
            vals = np.array([getattr(r, p) for r in partners], np.float64)
            sigma = float(vals.std(ddof=1))
            chi_raw = float(getattr(rec, p))
            chi_c = float(getattr(comp_rec, p))
            # spread at float-rounding scale is numerical coincidence
            # (distinct pixel sets colliding to near-equal deriveds),
            # not a measured uncertainty: flag degenerate, do not divide
            floor = 1e-9 * max(1.0, float(np.abs(vals).max()))
            if not np.isfinite(sigma) or sigma <= floor:
                eps[p].append(None)
            else:
                eps[p].append(standard_score(chi_raw, chi_c, sigma))
    return ObjectScores(
        raw_indices=tuple(indices),
        epsilons={p: tuple(v) for p, v in eps.items()},
        n_unmatched_comp=len(raw_records) - len(comp_of),
        n_underrepresented=n_under,
    )


def operator_scores(
    raw_stack, comp_stack, replicate_stacks, kinds, sigmas
) -> dict:
    """Mean per-pixel epsilon of filter-bank operator outputs.

    Returns {(kind, sigma): ScoreSummary}; sigma is None for
    raw_intensity. Degenerate pixels (zero replicate spread) are
    excluded and counted.
    """
    from rawscore.mlseg import FeatureRecipe, compute_features

    if comp_stack.dims != raw_stack.dims:
        raise DimMismatch(
            f"processed dims {comp_stack.dims} != raw dims {raw_stack.dims}"
        )
    for rep in replicate_stacks:
        if rep.dims != raw_stack.dims:
            raise DimMismatch("replicate dims differ from raw dims")
    if len(replicate_stacks) < 2:
        raise TooFewReplicates(
            f"need >= 2 replicate stacks, got {len(replicate_stacks)}"
        )
    dimensionality = 2 if raw_stack.depth == 1 else 3
    recipe = FeatureRecipe(
        sigmas=tuple(sigmas), kinds=tuple(kinds),
        dimensionality=dimensionality,
    )
    f_raw = compute_features(raw_stack, recipe).astype(np.float64)
    f_comp = compute_features(comp_stack, recipe).astype(np.float64)
    f_reps = np.stack(
        [
            compute_features(r, recipe).astype(np.float64)
            for r in replicate_stacks
        ]
    )
    sigma = f_reps.std(axis=0, ddof=1)

    names = recipe.feature_names()
    out = {}
    for kind in recipe.kinds:
        scales = (None,) if kind == "raw_intensity" else recipe.sigmas
        for s in scales:
            if kind == "raw_intensity":
                wanted = {"raw"}
            elif kind.endswith("eigenvalues"):
                tag = "hess" if kind.startswith("hessian") else "st"
                wanted = {
                    f"{tag}_eig{i}:{s:g}" for i in range(dimensionality)
                }
            else:
                wanted = {f"{kind}:{s:g}"}
            sel = [k for k, n in enumerate(names) if n in wanted]
            num = f_raw[..., sel] - f_comp[..., sel]
            sig = sigma[..., sel]
            good = sig > 0
            vals = num[good] / sig[good]
            out[(kind, s)] = ScoreSummary(
                mean=float(vals.mean()) if vals.size else float("nan"),
                std=float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
                n=int(vals.size),
                n_degenerate=int(num.size - vals.size),
            )
    return out


# ---------------------------------------------------------------------------
# tolerance report
# ---------------------------------------------------------------------------


def _verdict(epsilon: float | None) -> str:
    if epsilon is None:
        return "indeterminate"
    return "tolerable" if abs(epsilon) < TOLERABLE_LIMIT else "intolerable"


def build_report(
    param_samples: dict,
    chi_raw: dict,
    chi_c: dict,
    matching: dict | None = None,
    delta_histograms=(),
    provenance: dict | None = None,
    appendix: dict | None = None,
) -> dict:
    """Assemble the verdict document.

    param_samples: parameter -> ParamSample of replicate values.
    chi_raw: parameter -> true raw value.
    chi_c: codec id -> {parameter -> processed value}.
    """
    params_doc = {}
    for name, sample in sorted(param_samples.items()):
        if name not in chi_raw:
            raise SchemaViolation(f"no raw value for parameter {name!r}")
        mean, sigma = predictive_uncertainty(sample)
        codecs_doc = {}
        for codec_id, values in sorted(chi_c.items()):
            if name not in values:
                raise SchemaViolation(
                    f"codec {codec_id!r} misses parameter {name!r}"
                )
            if sigma > 0:
                eps = standard_score(chi_raw[name], values[name], sigma)
            else:
                eps = None
            codecs_doc[codec_id] = {
                "chi_c": float(values[name]),
                "epsilon": eps,
                "verdict": _verdict(eps),
            }
        params_doc[name] = {
            "chi_raw": float(chi_raw[name]),
            "chi_raw_mean": mean,
            "sigma_raw": sigma,
            "degenerate": sigma == 0.0,
            "codecs": codecs_doc,
        }

    hist_doc = []
    for codec_id, stats in delta_histograms:
        hist_doc.append(
            {
                "codec": codec_id,
                "parameter": stats.parameter,
                "mean": stats.mean,
                "std": stats.std,
                "bin_edges": list(stats.bin_edges),
                "counts": list(stats.counts),
            }
        )

    match_doc = {}
    for codec_id, m in sorted((matching or {}).items()):
        match_doc[codec_id] = {
            "n_pairs": m.n_pairs,
            "n_unpaired_raw": len(m.unpaired_raw),
            "n_unpaired_other": len(m.unpaired_other),
        }

    report = {
        "version": REPORT_VERSION,
        "parameters": params_doc,
        "delta_histograms": hist_doc,
        "matching": match_doc,
        "provenance": dict(provenance or {}),
    }
    if appendix:
        report["appendix"] = appendix
    validate_report(report)
    return report


def summary_doc(summaries: dict) -> dict:
    """ScoreSummary mapping -> plain JSON-safe dict (NaN becomes null)."""

    def num(x):
        return float(x) if np.isfinite(x) else None

    return {
        name: {
            "mean": num(s.mean),
            "std": num(s.std),
            "n": s.n,
            "n_degenerate": s.n_degenerate,
        }
        for name, s in sorted(summaries.items())
    }


def report_to_json(report: dict) -> str:
    try:
        return json.dumps(report, sort_keys=True, indent=2, allow_nan=False) + "\n"
    except ValueError as exc:
        raise SchemaViolation(f"report holds non-finite numbers: {exc}") from exc


def report_from_json(text: str) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"report is not valid JSON: {exc}") from exc
    validate_report(doc)
    return doc


def load_schema(name: str) -> dict:
    from importlib import resources

    text = (
        resources.files("rawscore").joinpath(f"schemas/{name}").read_text()
    )
    return json.loads(text)


def validate_report(doc: dict) -> None:
    """Schema check plus the arithmetic invariants of the verdicts."""
    import jsonschema

    schema = load_schema("tolerance_report.schema.json")
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        raise SchemaViolation(f"report schema violation: {exc.message}") from exc
    for name, pdoc in doc["parameters"].items():
        sigma = pdoc["sigma_raw"]
        for codec_id, cdoc in pdoc["codecs"].items():
            eps = cdoc["epsilon"]
            if sigma > 0:
                want = (pdoc["chi_raw"] - cdoc["chi_c"]) / sigma
                if eps is None or abs(eps - want) > 1e-9 * max(1.0, abs(want)):
                    raise SchemaViolation(
                        f"{name}/{codec_id}: epsilon does not equal "
                        "(chi_raw - chi_c)/sigma_raw"
                    )
            elif eps is not None:
                raise SchemaViolation(
                    f"{name}/{codec_id}: degenerate sigma must not carry "
                    "an epsilon"
                )
            if cdoc["verdict"] != _verdict(eps):
                raise SchemaViolation(
                    f"{name}/{codec_id}: verdict inconsistent with epsilon"
                )
