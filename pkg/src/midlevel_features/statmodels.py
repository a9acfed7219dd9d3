#!/usr/bin/env python3
"""
Classical statistics and shallow models: correlation, cross-validation,
grouped splits, ridge regression, PCA, RBF kernel ridge, one-vs-rest
logistic classification, AUC and weighted F1, plus the emotion and
cluster reports built on them.
"""
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.special
from scipy.stats import pearsonr
from sklearn.decomposition import PCA
from sklearn.kernel_ridge import KernelRidge
from sklearn.linear_model import LogisticRegression, Ridge
from sklearn.metrics import f1_score, roc_auc_score
from sklearn.model_selection import KFold, StratifiedKFold, train_test_split
from sklearn.preprocessing import StandardScaler

from midlevel_features.errors import (
    ConstantInput,
    DegenerateClass,
    InsufficientOverlap,
    InvalidArgument,
    LengthMismatch,
    NonPositiveHyperparam,
    SingleClass,
    SingularSystem,
    TooFewGroups,
    TooFewItems,
    TooFewRows,
)
from midlevel_features.extractors import MIDLEVEL_NAMES, MidLevelName

logger = logging.getLogger(__name__)

EMOTION_DIMENSIONS = (
    "valence",
    "energy",
    "tension",
    "anger",
    "fear",
    "happy",
    "sad",
    "tender",
)

# Values reported for the released annotations, printed next to reproduced ones.
REFERENCE_ALPHA = {
    MidLevelName.MELODIOUSNESS: 0.72,
    MidLevelName.ARTICULATION: 0.8,
    MidLevelName.RHYTHMIC_STABILITY: 0.69,
    MidLevelName.RHYTHMIC_COMPLEXITY: 0.27,
    MidLevelName.DISSONANCE: 0.74,
    MidLevelName.TONAL_STABILITY: 0.44,
    MidLevelName.MODALITY: 0.69,
}
REFERENCE_EMOTION_RHO = {
    "valence": 0.88,
    "energy": 0.79,
    "tension": 0.84,
    "anger": 0.65,
    "fear": 0.82,
    "happy": 0.81,
    "sad": 0.73,
    "tender": 0.72,
}
# cluster -> (AUC, F-measure)
REFERENCE_CLUSTERS = {
    1: (0.62, 0.38),
    2: (0.7, 0.5),
    3: (0.8, 0.67),
    4: (0.65, 0.45),
    5: (0.78, 0.64),
}
REFERENCE_WEIGHTED_F1 = 0.54

_M = MidLevelName
REFERENCE_CORRELATIONS = {
    (_M.MELODIOUSNESS, _M.ARTICULATION): -0.13,
    (_M.MELODIOUSNESS, _M.RHYTHMIC_COMPLEXITY): -0.22,
    (_M.MELODIOUSNESS, _M.RHYTHMIC_STABILITY): 0.27,
    (_M.MELODIOUSNESS, _M.DISSONANCE): -0.59,
    (_M.MELODIOUSNESS, _M.TONAL_STABILITY): 0.58,
    (_M.MELODIOUSNESS, _M.MODALITY): -0.22,
    (_M.ARTICULATION, _M.RHYTHMIC_COMPLEXITY): 0.39,
    (_M.ARTICULATION, _M.RHYTHMIC_STABILITY): 0.60,
    (_M.ARTICULATION, _M.DISSONANCE): 0.45,
    (_M.ARTICULATION, _M.TONAL_STABILITY): -0.05,
    (_M.ARTICULATION, _M.MODALITY): -0.14,
    (_M.RHYTHMIC_COMPLEXITY, _M.RHYTHMIC_STABILITY): -0.009,
    (_M.RHYTHMIC_COMPLEXITY, _M.DISSONANCE): 0.48,
    (_M.RHYTHMIC_COMPLEXITY, _M.TONAL_STABILITY): -0.30,
    (_M.RHYTHMIC_COMPLEXITY, _M.MODALITY): 0.06,
    (_M.RHYTHMIC_STABILITY, _M.DISSONANCE): 0.06,
    (_M.RHYTHMIC_STABILITY, _M.TONAL_STABILITY): 0.36,
    (_M.RHYTHMIC_STABILITY, _M.MODALITY): -0.17,
    (_M.DISSONANCE, _M.TONAL_STABILITY): -0.55,
    (_M.DISSONANCE, _M.MODALITY): 0.23,
    (_M.TONAL_STABILITY, _M.MODALITY): -0.16,
}

# extractor column -> perceptual feature it approximates
BASELINE_PAIRS = (
    ("attack_leap", _M.ARTICULATION),
    ("pulse_clarity", _M.RHYTHMIC_STABILITY),
    ("dissonance", _M.DISSONANCE),
    ("inharmonicity", _M.DISSONANCE),
    ("hcdf_mean", _M.TONAL_STABILITY),
    ("majorness", _M.MODALITY),
)


def reference_correlation(a, b):
    a, b = MidLevelName.parse(a), MidLevelName.parse(b)
    return REFERENCE_CORRELATIONS.get((a, b), REFERENCE_CORRELATIONS.get((b, a)))


def pearson(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatch(
            f"pearson needs equal-length vectors, got {x.shape} and {y.shape}"
        )
    if x.size < 3:
        raise TooFewItems("pearson needs at least 3 pairs")
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        raise ConstantInput("pearson is undefined for a constant input")
    return float(np.clip(pearsonr(x, y)[0], -1.0, 1.0))


@dataclass(frozen=True)
class FoldAssignment:
    folds: dict
    k: int

    def test_ids(self, fold):
        return [i for i, f in self.folds.items() if f == fold]

    def train_ids(self, fold):
        return [i for i, f in self.folds.items() if f != fold]

    def sizes(self):
        return [sum(1 for f in self.folds.values() if f == j) for j in range(self.k)]


def kfold(ids, k=10, seed=0):
    ids = list(ids)
    if k < 2 or len(ids) < k:
        raise TooFewItems(f"{k}-fold split needs at least {k} items, got {len(ids)}")
    splitter = KFold(n_splits=k, shuffle=True, random_state=seed)
    folds = {}
    for fold, (_, test) in enumerate(splitter.split(ids)):
        folds.update((ids[j], fold) for j in test)
    return FoldAssignment({i: folds[i] for i in ids}, k)


@dataclass(frozen=True)
class GroupedSplit:
    train: list
    test: list
    groups: dict
    fraction_reached: bool = True

    @property
    def test_fraction(self):
        return len(self.test) / (len(self.train) + len(self.test))


def grouped_split(ids, groups, test_frac=0.08, seed=0, tolerance=0.02):
    """
    Move whole groups (e.g. performers) into the test set in seeded order
    until the target fraction is reached.

    When no group fits under the target the smallest one is used and the
    result is flagged with fraction_reached=False.
    """
    ids = list(ids)
    groups = list(groups)
    if len(ids) != len(groups):
        raise LengthMismatch("ids and groups differ in length")
    members = {}
    for i, g in zip(ids, groups):
        members.setdefault(g, []).append(i)
    if len(members) < 2:
        raise TooFewGroups(f"grouped split needs 2 groups, got {len(members)}")

    names = sorted(members, key=str)
    order = np.random.default_rng(seed).permutation(len(names))
    target = int(round(test_frac * len(ids)))
    test_groups = []
    size = 0
    for j in order:
        g = names[j]
        if size + len(members[g]) <= target:
            test_groups.append(g)
            size += len(members[g])
    if not test_groups:
        test_groups = [min(names, key=lambda g: (len(members[g]), str(g)))]
        size = len(members[test_groups[0]])

    reached = abs(size / len(ids) - test_frac) <= tolerance
    if not reached:
        logger.warning(
            f"Test fraction {test_frac:.2%} unreachable by whole groups; "
            f"using {size / len(ids):.2%}"
        )
    chosen = set(test_groups)
    test = [i for i, g in zip(ids, groups) if g in chosen]
    train = [i for i, g in zip(ids, groups) if g not in chosen]
    return GroupedSplit(train, test, dict(zip(ids, groups)), reached)


def validation_split(ids, fraction=0.02, seed=0):
    """Seeded (train, validation) split with at least one validation item."""
    ids = list(ids)
    if len(ids) < 2:
        raise TooFewItems("validation split needs at least 2 items")
    n_val = min(len(ids) - 1, max(1, int(round(fraction * len(ids)))))
    train, val = train_test_split(
        np.arange(len(ids)), test_size=n_val, random_state=seed
    )
    return [ids[j] for j in sorted(train)], [ids[j] for j in sorted(val)]


def _as_matrix(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if not np.all(np.isfinite(X)):
        raise InvalidArgument("design matrix has non-finite entries")
    return X


@dataclass(frozen=True, eq=False)
class LinearModel:
    weights: np.ndarray
    intercept: float
    lam: float
    mean: np.ndarray = None
    scale: np.ndarray = None

    @property
    def standardized(self):
        return self.mean is not None


def fit_linear(X, y, lam=1e-6, standardize=False):
    """
    Ridge regression with an unpenalized intercept, solved on centered data.

    With standardize=True the weights live on the standardized feature scale.
    """
    X = _as_matrix(X)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (X.shape[0],):
        raise LengthMismatch(f"{X.shape[0]} rows but {y.size} targets")
    if lam < 0:
        raise NonPositiveHyperparam("ridge penalty must be non-negative")
    mean = scale = None
    if standardize:
        scaler = StandardScaler().fit(X)
        mean, scale = scaler.mean_, scaler.scale_
        X = scaler.transform(X)
    if lam == 0 and np.linalg.matrix_rank(X - X.mean(axis=0)) < X.shape[1]:
        raise SingularSystem("design matrix is rank deficient and lam is 0")
    ridge = Ridge(alpha=lam, solver="cholesky").fit(X, y)
    return LinearModel(ridge.coef_, float(ridge.intercept_), lam, mean, scale)


def predict_linear(model, X):
    X = _as_matrix(X)
    if model.standardized:
        X = (X - model.mean) / model.scale
    return X @ model.weights + model.intercept


@dataclass(frozen=True, eq=False)
class PcaTransform:
    scaler: StandardScaler
    keep: np.ndarray
    pca: PCA

    @property
    def components(self):
        return self.pca.components_

    @property
    def n_components(self):
        return self.pca.n_components_

    @property
    def explained_variance_ratio(self):
        return self.pca.explained_variance_ratio_


def pca_fit(X, n_components=30):
    """Standardize with training statistics, then keep the top principal axes."""
    X = _as_matrix(X)
    if X.shape[0] < n_components:
        raise TooFewRows(
            f"PCA with {n_components} components needs as many rows, got {X.shape[0]}"
        )
    scaler = StandardScaler().fit(X)
    keep = scaler.var_ > 0
    if not keep.any():
        raise ConstantInput("PCA input has no varying column")
    if not keep.all():
        logger.warning(f"PCA dropped {int((~keep).sum())} zero-variance column(s)")
    Z = scaler.transform(X)[:, keep]
    pca = PCA(n_components=min(n_components, Z.shape[1]), svd_solver="full").fit(Z)
    return PcaTransform(scaler, keep, pca)


def pca_standardize(t, X):
    return t.scaler.transform(_as_matrix(X))[:, t.keep]


def pca_apply(t, X):
    return t.pca.transform(pca_standardize(t, X))


def pca_reconstruct(t, reduced):
    """Map reduced coordinates back to the standardized feature space."""
    return t.pca.inverse_transform(np.asarray(reduced))


@dataclass(frozen=True, eq=False)
class KernelModel:
    estimator: KernelRidge
    gamma: float
    lam: float
    offset: float


def fit_kernel_rbf(X, y, lam, gamma):
    """Kernel ridge regression with k(u, v) = exp(-gamma |u - v|^2) on centered y."""
    if lam <= 0 or gamma <= 0:
        raise NonPositiveHyperparam(
            f"lam and gamma must be positive, got {lam}, {gamma}"
        )
    X = _as_matrix(X)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] < 2:
        raise TooFewRows("kernel regression needs at least 2 rows")
    if y.shape != (X.shape[0],):
        raise LengthMismatch(f"{X.shape[0]} rows but {y.size} targets")
    offset = float(y.mean())
    estimator = KernelRidge(alpha=lam, kernel="rbf", gamma=gamma).fit(X, y - offset)
    return KernelModel(estimator, gamma, lam, offset)


def predict_kernel(model, X):
    return model.estimator.predict(_as_matrix(X)) + model.offset


def rmse(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


DEFAULT_LAMBDAS = tuple(10.0 ** np.arange(-4, 2))
DEFAULT_GAMMAS = tuple(10.0 ** np.arange(-3.0, 2.5, 0.5))


def tune_kernel_rbf(
    X_train, y_train, X_val, y_val, lambdas=DEFAULT_LAMBDAS, gammas=DEFAULT_GAMMAS
):
    """Grid search on a validation split; returns (best model, {(lam, gamma): rmse})."""
    grid = {}
    best = None
    for lam in lambdas:
        for gamma in gammas:
            model = fit_kernel_rbf(X_train, y_train, lam, gamma)
            score = rmse(predict_kernel(model, X_val), y_val)
            grid[(lam, gamma)] = score
            if best is None or score < best[0]:
                best = (score, lam, gamma)
    _, lam, gamma = best
    logger.debug(f"Kernel ridge picked lam={lam:g}, gamma={gamma:g}")
    return fit_kernel_rbf(X_train, y_train, lam, gamma), grid


@dataclass(frozen=True, eq=False)
class OvrClassifier:
    classes: np.ndarray
    weights: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray


def fit_ovr_classifier(X, labels, l2=1e-3, max_iter=2000, min_examples=2):
    """
    One-vs-rest L2-regularized logistic regression on standardized inputs.

    l2 is the penalty on the mean log-loss, i.e. C = 1 / (l2 * n_rows).
    Every class needs at least min_examples rows.
    """
    X = _as_matrix(X)
    labels = np.asarray(labels)
    if labels.shape != (X.shape[0],):
        raise LengthMismatch(f"{X.shape[0]} rows but {labels.size} labels")
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < 2:
        raise DegenerateClass("classification needs at least 2 classes")
    if counts.min() < min_examples:
        raise DegenerateClass(
            f"class {classes[np.argmin(counts)]} has fewer than {min_examples} examples"
        )

    scaler = StandardScaler().fit(X)
    Z = scaler.transform(X)
    W = np.zeros((X.shape[1], classes.size))
    b = np.zeros(classes.size)
    for j, c in enumerate(classes):
        model = LogisticRegression(C=1.0 / (l2 * X.shape[0]), max_iter=max_iter)
        model.fit(Z, labels == c)
        W[:, j] = model.coef_[0]
        b[j] = model.intercept_[0]
    return OvrClassifier(classes, W, b, scaler.mean_, scaler.scale_)


def scores(classifier, X):
    """Per-class probabilities [rows x classes]; rows need not sum to 1."""
    Z = (_as_matrix(X) - classifier.mean) / classifier.scale
    p = scipy.special.expit(Z @ classifier.weights + classifier.bias)
    return np.clip(p, 1e-15, 1.0 - 1e-15)


def predict_ovr(classifier, X):
    return classifier.classes[np.argmax(scores(classifier, X), axis=1)]


def roc_auc(score, labels):
    """P(positive scores above negative) + half the tie probability."""
    score = np.asarray(score, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if score.shape != labels.shape:
        raise LengthMismatch("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC needs both positive and negative examples")
    return float(roc_auc_score(labels, score))


def f1_per_class(predicted, truth):
    """{class: (f1, support)} over the classes present in truth."""
    predicted, truth = np.asarray(predicted), np.asarray(truth)
    if predicted.shape != truth.shape:
        raise LengthMismatch("predicted and true labels differ in length")
    if truth.size == 0:
        raise TooFewItems("F1 needs at least one item")
    classes, support = np.unique(truth, return_counts=True)
    f1 = f1_score(truth, predicted, labels=classes, average=None, zero_division=0)
    return {
        c.item(): (float(score), int(n)) for c, score, n in zip(classes, f1, support)
    }


def f1_weighted(predicted, truth):
    per_class = f1_per_class(predicted, truth)
    total = sum(support for _, support in per_class.values())
    return float(sum(f1 * support for f1, support in per_class.values()) / total)


def _aligned(left, right, minimum):
    shared = left.index.intersection(right.index)
    if len(shared) < minimum:
        raise InsufficientOverlap(f"only {len(shared)} songs shared, need {minimum}")
    shared = shared.sort_values()
    return left.loc[shared], right.loc[shared]


def midlevel_frame(vectors):
    """DataFrame [song_id x seven features] of the complete vectors."""
    rows = {v.song_id: v.as_array() for v in vectors if v.is_complete}
    return pd.DataFrame.from_dict(
        rows, orient="index", columns=[n.value for n in MIDLEVEL_NAMES]
    ).sort_index()


@dataclass(frozen=True)
class EmotionRow:
    dimension: str
    rho: float
    n_songs: int
    weights: dict = field(default_factory=dict)
    top_features: tuple = ()

    @property
    def reference_rho(self):
        return REFERENCE_EMOTION_RHO.get(self.dimension)


def emotion_report(midlevel, targets, k=10, seed=0, n_top=3):
    """
    Out-of-fold linear prediction of each emotion dimension from the seven
    mid-level features (standardized); weights from a fit on all songs.
    """
    X_all, Y_all = _aligned(midlevel, targets, 30)
    rows = []
    for dimension in Y_all.columns:
        y = Y_all[dimension].astype(float).dropna()
        if len(y) < max(30, k):
            logger.warning(f"Skipping {dimension}: only {len(y)} songs with a value")
            continue
        X = X_all.loc[y.index].to_numpy()
        folds = kfold(list(range(len(y))), k, seed)
        predicted = np.empty(len(y))
        for fold in range(k):
            test = folds.test_ids(fold)
            train = folds.train_ids(fold)
            model = fit_linear(X[train], y.to_numpy()[train], standardize=True)
            predicted[test] = predict_linear(model, X[test])
        full = fit_linear(X, y.to_numpy(), standardize=True)
        weights = dict(zip(X_all.columns, full.weights.tolist()))
        top = tuple(sorted(weights, key=lambda name: -abs(weights[name]))[:n_top])
        rho = pearson(predicted, y.to_numpy())
        rows.append(EmotionRow(dimension, rho, len(y), weights, top))
    return rows


@dataclass(frozen=True)
class ClusterRow:
    cluster: int
    auc: float
    f1: float
    support: int

    @property
    def reference(self):
        return REFERENCE_CLUSTERS.get(self.cluster)


@dataclass(frozen=True)
class ClusterReport:
    clusters: list
    weighted_f1: float


def cluster_report(midlevel, labels, k=10, seed=0):
    """Per-cluster OVR AUC and F1 from out-of-fold classifier scores."""
    X_df, y_s = _aligned(midlevel, labels.to_frame("cluster"), max(k, 10))
    X = X_df.to_numpy()
    y = y_s["cluster"].to_numpy().astype(int)
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise DegenerateClass("cluster report needs at least 2 clusters")
    small = [int(c) for c, n in zip(classes, counts) if n < 2]
    if small:
        raise DegenerateClass(
            f"cluster(s) {small} have a single song; each cluster needs at least 2"
        )
    if counts.max() < k:
        raise DegenerateClass(f"every cluster has fewer than k={k} songs")
    if counts.min() < k:
        logger.warning(
            f"cluster {classes[np.argmin(counts)]} has {counts.min()} songs, fewer "
            f"than k={k}; some test folds will not contain it"
        )
    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    oof = np.zeros((len(y), classes.size))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        splits = list(splitter.split(X, y))
    for train, test in splits:
        clf = fit_ovr_classifier(X[train], y[train], min_examples=1)
        fold_scores = scores(clf, X[test])
        for j, c in enumerate(clf.classes):
            oof[test, np.searchsorted(classes, c)] = fold_scores[:, j]
    predicted = classes[np.argmax(oof, axis=1)]
    f1s = f1_per_class(predicted, y)
    rows = [
        ClusterRow(int(c), roc_auc(oof[:, j], y == c), f1s[int(c)][0], f1s[int(c)][1])
        for j, c in enumerate(classes)
    ]
    return ClusterReport(rows, f1_weighted(predicted, y))


@dataclass(frozen=True)
class BaselineRow:
    extractor: str
    feature: MidLevelName
    r: float
    n_songs: int


def baseline_correlations(handcrafted, midlevel):
    """Pearson r of each extractor against the perceptual feature it targets."""
    feats, perceived = _aligned(handcrafted, midlevel, 3)
    rows = []
    for extractor, feature in BASELINE_PAIRS:
        try:
            r = pearson(
                feats[extractor].to_numpy(float),
                perceived[feature.value].to_numpy(float),
            )
        except ConstantInput:
            logger.warning(f"{extractor} is constant over the shared songs")
            r = float("nan")
        rows.append(BaselineRow(extractor, feature, r, len(feats)))
    return rows


def midlevel_scores(predictions, truth):
    """Per-feature Pearson r of predicted vs annotated [songs x 7] arrays."""
    predictions = np.asarray(predictions, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if predictions.shape != truth.shape:
        raise LengthMismatch(f"prediction shape {predictions.shape} != {truth.shape}")
    return {
        name: pearson(predictions[:, j], truth[:, j])
        for j, name in enumerate(MIDLEVEL_NAMES)
    }

