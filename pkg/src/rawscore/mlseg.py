"""Pixel/voxel classification: filter-bank features + random forest.

Features are Gaussian-scale-space operators (scipy.ndimage, reflect
boundary, truncate=4): smoothed intensity, gradient magnitude, Laplacian,
and Hessian / structure-tensor eigenvalues (sorted descending). Channel
order follows the recipe: kinds in the order given, scale-dependent kinds
expanded over the sigma ladder in order. Structure tensor uses gradient
scale sigma/2 and integration scale sigma.

The forest is Breiman-style: one bootstrap per tree, sqrt(F) feature
candidates per split, Gini impurity, midpoint thresholds, grown until
leaves are pure or a split would produce a child below the minimum leaf
size. Training is pure numpy and deterministic in the seed (per-tree RNG
streams derived by hashing). Prediction averages the normalized leaf
histograms over trees; the traversal has a numba kernel with a vectorized
numpy fallback, and both accumulate trees in index order so backends
agree bitwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from rawscore import backend
from rawscore.cbrng import derive_seed
from rawscore.errors import (
    CorruptFile,
    DegenerateLabels,
    DimMismatch,
    InvalidSpec,
    RecipeMismatch,
    SchemaViolation,
)
from rawscore.imgio import ImageStack

FEATURE_KINDS = (
    "raw_intensity",
    "gaussian",
    "gradient_magnitude",
    "laplacian",
    "hessian_eigenvalues",
    "structure_tensor_eigenvalues",
)

DEFAULT_SIGMAS = (0.7, 1.0, 1.6, 3.5, 5.0)

_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class FeatureRecipe:
    sigmas: tuple[float, ...] = DEFAULT_SIGMAS
    kinds: tuple[str, ...] = FEATURE_KINDS
    dimensionality: int = 2

    def __post_init__(self) -> None:
        sigmas = tuple(float(s) for s in self.sigmas)
        kinds = tuple(self.kinds)
        if not kinds:
            raise InvalidSpec("recipe needs at least one feature kind")
        unknown = [k for k in kinds if k not in FEATURE_KINDS]
        if unknown:
            raise InvalidSpec(f"unknown feature kinds {unknown}")
        if len(set(kinds)) != len(kinds):
            raise InvalidSpec("feature kinds must not repeat")
        if any(s <= 0 for s in sigmas) or any(
            b <= a for a, b in zip(sigmas, sigmas[1:])
        ):
            raise InvalidSpec("sigmas must be strictly increasing and > 0")
        if any(k != "raw_intensity" for k in kinds) and not sigmas:
            raise InvalidSpec("scale-dependent kinds need at least one sigma")
        if self.dimensionality not in (2, 3):
            raise InvalidSpec(
                f"dimensionality must be 2 or 3, got {self.dimensionality}"
            )
        object.__setattr__(self, "sigmas", sigmas)
        object.__setattr__(self, "kinds", kinds)

    def feature_names(self) -> tuple[str, ...]:
        names: list[str] = []
        for kind in self.kinds:
            if kind == "raw_intensity":
                names.append("raw")
                continue
            for s in self.sigmas:
                if kind.endswith("eigenvalues"):
                    tag = "hess" if kind.startswith("hessian") else "st"
                    names.extend(
                        f"{tag}_eig{i}:{s:g}"
                        for i in range(self.dimensionality)
                    )
                else:
                    names.append(f"{kind}:{s:g}")
        return tuple(names)

    @property
    def n_features(self) -> int:
        return len(self.feature_names())

    def to_doc(self) -> dict:
        return {
            "sigmas": list(self.sigmas),
            "kinds": list(self.kinds),
            "dimensionality": self.dimensionality,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "FeatureRecipe":
        try:
            return cls(
                sigmas=tuple(doc["sigmas"]),
                kinds=tuple(doc["kinds"]),
                dimensionality=int(doc["dimensionality"]),
            )
        except (KeyError, TypeError) as exc:
            raise SchemaViolation(f"bad feature recipe: {exc}") from exc


@dataclass(frozen=True)
class LabelScribbles:
    """Sparse training labels: flat pixel index -> class id."""

    mapping: dict

    def __post_init__(self) -> None:
        if not self.mapping:
            raise InvalidSpec("scribbles are empty")
        clean = {int(i): int(c) for i, c in self.mapping.items()}
        if any(i < 0 for i in clean):
            raise InvalidSpec("scribble indices must be >= 0")
        object.__setattr__(self, "mapping", clean)

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.mapping.values())))


# ---------------------------------------------------------------------------
# feature computation
# ---------------------------------------------------------------------------


def _gauss_kernel1d(sigma: float, order: int) -> np.ndarray:
    """Sampled Gaussian-derivative tap row, response-calibrated.

    Sampling and truncation leave the raw taps with a nonzero DC term
    (a constant image would yield a nonzero derivative), so order 1 and
    2 are corrected to zero DC and rescaled to give exactly slope 1 on
    a ramp / curvature 1 on a parabola.
    """
    r = int(4.0 * sigma + 0.5)
    x = np.arange(-r, r + 1, dtype=np.float64)
    phi = np.exp(-0.5 * (x / sigma) ** 2)
    if order == 0:
        return phi / phi.sum()
    if order == 1:
        k = x / sigma**2 * phi
        return k / (k * x).sum()
    k = (x**2 / sigma**4 - 1.0 / sigma**2) * phi
    k -= k.sum() / k.size
    return k / (k * x**2 / 2.0).sum()


def _smooth(img, sigma, order):
    """Separable Gaussian (-derivative) filter, reflect boundary."""
    out = np.asarray(img, np.float64)
    if np.isscalar(order):
        order = (order,) * out.ndim
    for ax, o in enumerate(order):
        out = ndimage.correlate1d(
            out, _gauss_kernel1d(sigma, o), axis=ax, mode="reflect"
        )
    return out


def _eig_desc_2x2(axx, axy, ayy):
    half = (axx + ayy) / 2.0
    root = np.sqrt(((axx - ayy) / 2.0) ** 2 + axy * axy)
    return half + root, half - root


def _hessian_eigs(img, sigma, ndim):
    if ndim == 2:
        hyy = _smooth(img, sigma, (2, 0))
        hxy = _smooth(img, sigma, (1, 1))
        hxx = _smooth(img, sigma, (0, 2))
        return _eig_desc_2x2(hxx, hxy, hyy)
    comps = np.empty(img.shape + (3, 3))
    orders = {
        (0, 0): (2, 0, 0), (1, 1): (0, 2, 0), (2, 2): (0, 0, 2),
        (0, 1): (1, 1, 0), (0, 2): (1, 0, 1), (1, 2): (0, 1, 1),
    }
    for (i, j), order in orders.items():
        comps[..., i, j] = comps[..., j, i] = _smooth(img, sigma, order)
    eigs = np.linalg.eigvalsh(comps)  # ascending
    return tuple(eigs[..., k] for k in range(2, -1, -1))


def _structure_tensor_eigs(img, sigma, ndim):
    grads = [
        _smooth(img, sigma / 2.0, tuple(int(a == ax) for a in range(ndim)))
        for ax in range(ndim)
    ]
    if ndim == 2:
        sxx = _smooth(grads[1] * grads[1], sigma, 0)
        syy = _smooth(grads[0] * grads[0], sigma, 0)
        sxy = _smooth(grads[0] * grads[1], sigma, 0)
        return _eig_desc_2x2(sxx, sxy, syy)
    comps = np.empty(img.shape + (3, 3))
    for i in range(3):
        for j in range(i, 3):
            comps[..., i, j] = comps[..., j, i] = _smooth(
                grads[i] * grads[j], sigma, 0
            )
    eigs = np.linalg.eigvalsh(comps)
    return tuple(eigs[..., k] for k in range(2, -1, -1))


def compute_features(stack: ImageStack, recipe: FeatureRecipe) -> np.ndarray:
    """Per-pixel feature vectors, shape (depth, h, w, F), float32."""
    if recipe.dimensionality == 2 and stack.depth != 1:
        raise DimMismatch(
            f"2D recipe cannot process a {stack.depth}-slice stack"
        )
    if recipe.dimensionality == 3 and stack.depth == 1:
        raise DimMismatch("3D recipe needs a stack with more than one slice")
    ndim = recipe.dimensionality
    img = stack.astype_float()
    work = img[0] if ndim == 2 else img

    channels: list[np.ndarray] = []
    for kind in recipe.kinds:
        if kind == "raw_intensity":
            channels.append(work)
            continue
        for s in recipe.sigmas:
            if kind == "gaussian":
                channels.append(_smooth(work, s, 0))
            elif kind == "gradient_magnitude":
                parts = [
                    _smooth(
                        work, s, tuple(int(a == ax) for a in range(ndim))
                    )
                    for ax in range(ndim)
                ]
                channels.append(np.sqrt(sum(p * p for p in parts)))
            elif kind == "laplacian":
                channels.append(
                    sum(
                        _smooth(
                            work, s,
                            tuple(2 * int(a == ax) for a in range(ndim)),
                        )
                        for ax in range(ndim)
                    )
                )
            elif kind == "hessian_eigenvalues":
                channels.extend(_hessian_eigs(work, s, ndim))
            elif kind == "structure_tensor_eigenvalues":
                channels.extend(_structure_tensor_eigs(work, s, ndim))
    feats = np.stack(channels, axis=-1).astype(np.float32)
    if ndim == 2:
        feats = feats[np.newaxis]
    return feats


# ---------------------------------------------------------------------------
# random forest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Tree:
    feature: np.ndarray  # int32, -1 at leaves
    threshold: np.ndarray  # float64
    left: np.ndarray  # int32
    right: np.ndarray  # int32
    hist: np.ndarray  # (n_nodes, n_classes) float64, filled at leaves


@dataclass(frozen=True)
class PixelClassifier:
    trees: tuple[Tree, ...]
    recipe: FeatureRecipe
    classes: tuple[int, ...]
    train_seed: int

    @property
    def n_features(self) -> int:
        return self.recipe.n_features


def _gini_best_split(x, y, n_classes, min_leaf):
    """Best (threshold, weighted impurity) for one feature, or None."""
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ys = y[order]
    n = xs.size
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), ys] = 1.0
    prefix = np.cumsum(onehot, axis=0)
    total = prefix[-1]
    # candidate cut after position i (left = [:i+1]) where value changes
    cuts = np.nonzero(xs[:-1] < xs[1:])[0]
    cuts = cuts[(cuts + 1 >= min_leaf) & (n - cuts - 1 >= min_leaf)]
    if cuts.size == 0:
        return None
    nl = (cuts + 1).astype(np.float64)
    nr = n - nl
    left_counts = prefix[cuts]
    right_counts = total - left_counts
    gini_l = nl - (left_counts**2).sum(axis=1) / nl
    gini_r = nr - (right_counts**2).sum(axis=1) / nr
    score = gini_l + gini_r
    best = int(np.argmin(score))
    thr = (xs[cuts[best]] + xs[cuts[best] + 1]) / 2.0
    return float(thr), float(score[best])


def _grow_tree(X, y, n_classes, rng, min_leaf):
    n_feat = X.shape[1]
    n_try = max(1, int(np.sqrt(n_feat)))
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    hist: list[np.ndarray] = []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        hist.append(np.zeros(n_classes))
        return len(feature) - 1

    def build(idx, node):
        counts = np.bincount(y[idx], minlength=n_classes).astype(np.float64)
        pure = counts.max() == idx.size
        if pure or idx.size < 2 * min_leaf:
            hist[node][:] = counts
            return
        cand = rng.choice(n_feat, size=n_try, replace=False)
        best = None
        for f in cand:
            split = _gini_best_split(X[idx, f], y[idx], n_classes, min_leaf)
            if split is not None and (best is None or split[1] < best[2]):
                best = (int(f), split[0], split[1])
        if best is None:
            hist[node][:] = counts
            return
        f, thr, _ = best
        go_left = X[idx, f] <= thr
        feature[node] = f
        threshold[node] = thr
        left[node] = new_node()
        right[node] = new_node()
        build(idx[go_left], left[node])
        build(idx[~go_left], right[node])

    root = new_node()
    boot = rng.integers(0, y.size, y.size)
    build(np.sort(boot), root)
    return Tree(
        feature=np.array(feature, np.int32),
        threshold=np.array(threshold, np.float64),
        left=np.array(left, np.int32),
        right=np.array(right, np.int32),
        hist=np.array(hist, np.float64),
    )


def train_classifier(
    features: np.ndarray,
    scribbles: LabelScribbles,
    recipe: FeatureRecipe,
    n_trees: int = 100,
    seed: int = 0,
    min_leaf: int = 2,
) -> PixelClassifier:
    """Fit a random forest on the scribbled pixels of a feature stack."""
    if n_trees < 1:
        raise InvalidSpec(f"n_trees must be >= 1, got {n_trees}")
    F = features.shape[-1]
    if F != recipe.n_features:
        raise RecipeMismatch(
            f"feature stack has {F} channels, recipe describes "
            f"{recipe.n_features}"
        )
    flat = features.reshape(-1, F)
    idx = np.array(sorted(scribbles.mapping), np.int64)
    if idx.size and idx.max() >= flat.shape[0]:
        raise InvalidSpec(
            f"scribble index {idx.max()} outside image of {flat.shape[0]} px"
        )
    classes = scribbles.classes
    if len(classes) < 2:
        raise DegenerateLabels(
            f"need at least 2 classes, scribbles contain {len(classes)}"
        )
    lut = {c: k for k, c in enumerate(classes)}
    y = np.array([lut[scribbles.mapping[int(i)]] for i in idx], np.int64)
    X = flat[idx].astype(np.float64)
    trees = tuple(
        _grow_tree(
            X, y, len(classes),
            np.random.default_rng(derive_seed(seed, f"tree-{t}")),
            min_leaf,
        )
        for t in range(n_trees)
    )
    return PixelClassifier(
        trees=trees, recipe=recipe, classes=classes, train_seed=seed
    )


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def _flatten_forest(clf: PixelClassifier):
    """Concatenate trees into flat arrays for the traversal kernels."""
    starts = []
    offset = 0
    feats, thrs, lefts, rights, probs = [], [], [], [], []
    for tree in clf.trees:
        starts.append(offset)
        n = tree.feature.size
        feats.append(tree.feature)
        thrs.append(tree.threshold)
        lefts.append(np.where(tree.left >= 0, tree.left + offset, -1))
        rights.append(np.where(tree.right >= 0, tree.right + offset, -1))
        sums = tree.hist.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore"):
            p = np.where(sums > 0, tree.hist / sums, 0.0)
        probs.append(p)
        offset += n
    return (
        np.array(starts, np.int64),
        np.concatenate(feats).astype(np.int32),
        np.concatenate(thrs),
        np.concatenate(lefts).astype(np.int64),
        np.concatenate(rights).astype(np.int64),
        np.concatenate(probs),
    )


def _forest_predict_numpy(X, starts, feature, threshold, left, right, probs,
                          out):
    n = X.shape[0]
    for s in starts:
        node = np.full(n, s, np.int64)
        active = feature[node] >= 0
        while np.any(active):
            f = feature[node[active]]
            x = X[np.nonzero(active)[0], f]
            go_left = x <= threshold[node[active]]
            nxt = np.where(go_left, left[node[active]], right[node[active]])
            node[active] = nxt
            active = feature[node] >= 0
        out += probs[node]
    out /= len(starts)


def predict_proba(clf: PixelClassifier, features: np.ndarray) -> np.ndarray:
    """Class probability map, shape features.shape[:-1] + (n_classes,)."""
    F = features.shape[-1]
    if F != clf.n_features:
        raise RecipeMismatch(
            f"feature stack has {F} channels, classifier expects "
            f"{clf.n_features}"
        )
    X = np.ascontiguousarray(features.reshape(-1, F), np.float64)
    flat = _flatten_forest(clf)
    out = np.zeros((X.shape[0], len(clf.classes)))
    impl = backend.select(_forest_predict_numpy, "forest_predict")
    impl(X, *flat, out)
    return out.reshape(features.shape[:-1] + (len(clf.classes),))


def threshold_mask(
    proba: np.ndarray, clf: PixelClassifier, class_id: int, threshold: float
) -> np.ndarray:
    """Binary mask P[class] >= threshold (ties are foreground)."""
    if class_id not in clf.classes:
        raise InvalidSpec(
            f"class {class_id} not in classifier classes {clf.classes}"
        )
    if not 0.0 <= threshold <= 1.0:
        raise InvalidSpec(f"threshold must be in [0, 1], got {threshold}")
    k = clf.classes.index(class_id)
    return proba[..., k] >= threshold


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def classifier_to_json(clf: PixelClassifier) -> str:
    doc = {
        "version": _SCHEMA_VERSION,
        "classes": list(clf.classes),
        "train_seed": clf.train_seed,
        "recipe": clf.recipe.to_doc(),
        "trees": [
            {
                "feature": t.feature.tolist(),
                "threshold": t.threshold.tolist(),
                "left": t.left.tolist(),
                "right": t.right.tolist(),
                "hist": t.hist.tolist(),
            }
            for t in clf.trees
        ],
    }
    return json.dumps(doc, sort_keys=True)


def classifier_from_json(text: str) -> PixelClassifier:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptFile(f"classifier is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaViolation("classifier document must be a JSON object")
    missing = {"version", "classes", "train_seed", "recipe", "trees"} - set(
        doc
    )
    if missing:
        raise SchemaViolation(f"classifier misses fields {sorted(missing)}")
    if doc["version"] != _SCHEMA_VERSION:
        raise SchemaViolation(
            f"unsupported classifier version {doc['version']!r}"
        )
    recipe = FeatureRecipe.from_doc(doc["recipe"])
    n_classes = len(doc["classes"])
    trees = []
    try:
        for td in doc["trees"]:
            tree = Tree(
                feature=np.array(td["feature"], np.int32),
                threshold=np.array(td["threshold"], np.float64),
                left=np.array(td["left"], np.int32),
                right=np.array(td["right"], np.int32),
                hist=np.array(td["hist"], np.float64),
            )
            if tree.hist.ndim != 2 or tree.hist.shape[1] != n_classes:
                raise SchemaViolation("tree histogram shape mismatch")
            n = tree.feature.size
            if tree.feature.max(initial=-1) >= recipe.n_features or np.any(
                (tree.left >= n) | (tree.right >= n)
            ):
                raise SchemaViolation("tree references invalid indices")
            trees.append(tree)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaViolation(f"bad tree encoding: {exc}") from exc
    if not trees:
        raise SchemaViolation("classifier holds no trees")
    return PixelClassifier(
        trees=tuple(trees),
        recipe=recipe,
        classes=tuple(int(c) for c in doc["classes"]),
        train_seed=int(doc["train_seed"]),
    )
