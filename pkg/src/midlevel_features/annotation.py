#!/usr/bin/env python3
"""
Annotation arithmetic: pairwise-comparison ranking, 1-9 anchor scales,
rating aggregation, worker screening and agreement statistics.
"""
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from midlevel_features.errors import (
    ConstantFeature,
    DegenerateVariance,
    EmptyInput,
    IncompleteMatrix,
    InvalidArgument,
    OutOfRangeRating,
    SelfComparison,
    TooFewSongs,
)
from midlevel_features.extractors import MIDLEVEL_NAMES, MidLevelName

logger = logging.getLogger(__name__)

ANCHOR_COUNT = 9
RATING_MIN = 1
RATING_MAX = 9
TAU_DEV = 2.5
TAU_STD = 2.3
# std of uniform guessing on 1..9
RANDOM_GUESS_STD = math.sqrt((RATING_MAX - RATING_MIN + 1) ** 2 - 1) / math.sqrt(12)


@dataclass(frozen=True)
class ComparisonRecord:
    worker_id: str
    feature: MidLevelName
    song_a: str
    song_b: str
    winner: str

    def __post_init__(self):
        if self.song_a == self.song_b:
            raise SelfComparison(f"song '{self.song_a}' compared with itself")
        if self.winner not in ("A", "B"):
            raise InvalidArgument(f"winner must be 'A' or 'B', got '{self.winner}'")
        object.__setattr__(self, "feature", MidLevelName.parse(self.feature))

    @property
    def winning_song(self):
        return self.song_a if self.winner == "A" else self.song_b


@dataclass(frozen=True)
class RatingRecord:
    worker_id: str
    song_id: str
    feature: MidLevelName
    rating: int

    def __post_init__(self):
        if isinstance(self.rating, bool) or int(self.rating) != self.rating:
            raise OutOfRangeRating(f"rating must be an integer, got {self.rating}")
        if not RATING_MIN <= self.rating <= RATING_MAX:
            raise OutOfRangeRating(f"rating {self.rating} outside 1..9")
        object.__setattr__(self, "rating", int(self.rating))
        object.__setattr__(self, "feature", MidLevelName.parse(self.feature))


@dataclass(frozen=True)
class AnchorScale:
    feature: MidLevelName
    anchors: tuple

    def __post_init__(self):
        if len(self.anchors) != ANCHOR_COUNT or len(set(self.anchors)) != ANCHOR_COUNT:
            raise InvalidArgument("an anchor scale needs 9 distinct songs")


@dataclass(frozen=True)
class MidLevelVector:
    """Averaged ratings of one song; absent features are missing from `values`."""

    song_id: str
    values: dict = field(default_factory=dict)
    n_ratings: dict = field(default_factory=dict)

    def __post_init__(self):
        values = {MidLevelName.parse(k): float(v) for k, v in self.values.items()}
        for name, v in values.items():
            if not RATING_MIN <= v <= RATING_MAX:
                raise InvalidArgument(f"{name.value} mean {v} outside [1, 9]")
        counts = {MidLevelName.parse(k): int(v) for k, v in self.n_ratings.items()}
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "n_ratings", counts)

    def get(self, feature):
        return self.values.get(MidLevelName.parse(feature))

    @property
    def is_complete(self):
        return all(name in self.values for name in MIDLEVEL_NAMES)

    def as_array(self):
        return np.array([self.values.get(name, np.nan) for name in MIDLEVEL_NAMES])


@dataclass(frozen=True)
class WorkerStats:
    worker_id: str
    n_ratings: int
    mean_abs_dev: float = None
    dev_std: float = None
    banned: bool = False

    @property
    def evaluated(self):
        return self.mean_abs_dev is not None


def comparisons_needed(n):
    if n < 0:
        raise InvalidArgument("song count must be non-negative")
    return n * (n - 1) // 2


def win_rate_ranking(comparisons, feature):
    """
    Songs ordered by the fraction of their comparisons won, highest first.

    Ties are broken by song id so the order is deterministic.
    """
    if not comparisons:
        raise EmptyInput("no comparisons given")
    feature = MidLevelName.parse(feature)
    wins = defaultdict(int)
    appearances = defaultdict(int)
    for c in comparisons:
        if c.feature is not feature:
            continue
        appearances[c.song_a] += 1
        appearances[c.song_b] += 1
        wins[c.winning_song] += 1

    ranking = [(song, wins[song] / n) for song, n in appearances.items()]
    ranking.sort(key=lambda item: (-item[1], item[0]))
    return ranking


def build_anchor_scale(ranking, feature):
    """Pick 9 evenly spaced songs from a ranking, ordered low to high."""
    n = len(ranking)
    if n < ANCHOR_COUNT:
        raise TooFewSongs(f"anchor scale needs {ANCHOR_COUNT} ranked songs, got {n}")
    ascending = ranking[::-1]
    positions = [
        int(math.floor(i * (n - 1) / (ANCHOR_COUNT - 1) + 0.5))
        for i in range(ANCHOR_COUNT)
    ]
    return AnchorScale(
        MidLevelName.parse(feature), tuple(ascending[p][0] for p in positions)
    )


def _ratings_frame(records):
    return pd.DataFrame(
        {
            "worker_id": [r.worker_id for r in records],
            "song_id": [r.song_id for r in records],
            "feature": [r.feature.value for r in records],
            "rating": [float(r.rating) for r in records],
        }
    )


def aggregate_ratings(records):
    """Mean rating per (song, feature), one MidLevelVector per song."""
    if not records:
        return []
    stats = _ratings_frame(records).groupby(["song_id", "feature"])["rating"].agg(
        ["mean", "count"]
    )
    vectors = []
    for song_id, group in stats.groupby(level="song_id", sort=True):
        group = group.droplevel("song_id")
        vectors.append(
            MidLevelVector(
                song_id,
                values=group["mean"].to_dict(),
                n_ratings=group["count"].to_dict(),
            )
        )
    return vectors


def cronbach_alpha(matrix):
    """
    Cronbach's alpha of a complete raters x items matrix.

    Population variances; raises DegenerateVariance when the item totals
    do not vary.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 2 or m.shape[1] < 2:
        raise IncompleteMatrix("alpha needs at least 2 raters and 2 items")
    if not np.all(np.isfinite(m)):
        raise IncompleteMatrix("alpha needs a matrix without missing cells")
    k = m.shape[0]
    total_var = m.sum(axis=0).var()
    if total_var <= 1e-12 * max(1.0, np.abs(m).max() ** 2):
        raise DegenerateVariance("total score variance is zero")
    return float(k / (k - 1) * (1.0 - m.var(axis=1).sum() / total_var))


def pseudo_rater_matrix(records, feature, n_raters=5, seed=0):
    """
    Build a complete raters x songs matrix from crowd ratings.

    Songs with fewer than n_raters ratings are left out; each remaining song's
    ratings are shuffled and the first n_raters fill the rater slots.
    """
    feature = MidLevelName.parse(feature)
    by_song = defaultdict(list)
    for r in records:
        if r.feature is feature:
            by_song[r.song_id].append(r.rating)

    rng = np.random.default_rng(seed)
    columns = []
    for song_id in sorted(by_song):
        ratings = by_song[song_id]
        if len(ratings) < n_raters:
            continue
        shuffled = rng.permutation(np.asarray(ratings, dtype=np.float64))
        columns.append(shuffled[:n_raters])

    if not columns:
        return np.zeros((n_raters, 0))
    return np.column_stack(columns)


def reliability_report(records, n_raters=5, seed=0):
    """Alpha per feature; None where the matrix is too small or degenerate."""
    rng = np.random.default_rng(seed)
    report = {}
    for name in MIDLEVEL_NAMES:
        matrix = pseudo_rater_matrix(records, name, n_raters, seed=rng)
        try:
            alpha = cronbach_alpha(matrix)
        except (IncompleteMatrix, DegenerateVariance) as e:
            logger.warning(f"No alpha for {name.value}: {e}")
            alpha = None
        report[name] = {"alpha": alpha, "n_songs": matrix.shape[1]}
    return report


def screen_workers(records, golden, tau_dev=TAU_DEV, tau_std=TAU_STD):
    """
    Compare every worker against trusted song means.

    `golden` maps (song_id, feature) to a trusted mean. A worker is banned when
    the mean |rating - golden| exceeds tau_dev, or when the std of
    (rating - song mean) reaches tau_std; the song mean is the mean of the
    other workers' ratings, or the golden mean for songs nobody else rated.
    Workers without golden overlap are returned unevaluated.
    """
    golden = {(song, MidLevelName.parse(feat)): v for (song, feat), v in golden.items()}
    if not records:
        return []
    df = _ratings_frame(records)
    keys = list(zip(df["song_id"], df["feature"].map(MidLevelName)))
    grouped = df.groupby(["song_id", "feature"])["rating"]
    sums = grouped.transform("sum")
    counts = grouped.transform("count")
    others = counts - 1
    loo_mean = (sums - df["rating"]) / others.where(others > 0)
    golden_mean = pd.Series([golden.get(k, np.nan) for k in keys], index=df.index)
    df["song_mean"] = loo_mean.fillna(golden_mean)
    df["golden"] = golden_mean

    stats = []
    for worker_id, rows in df.groupby("worker_id", sort=True):
        on_golden = rows.dropna(subset=["golden"])
        if on_golden.empty:
            stats.append(WorkerStats(worker_id, len(rows)))
            continue
        mean_abs_dev = float((on_golden["rating"] - on_golden["golden"]).abs().mean())
        deviations = (rows["rating"] - rows["song_mean"]).dropna()
        dev_std = float(deviations.std(ddof=0)) if len(deviations) >= 2 else 0.0
        banned = mean_abs_dev > tau_dev or dev_std >= tau_std
        if banned:
            logger.info(
                f"Banning worker {worker_id}: mean |dev| {mean_abs_dev:.2f}, "
                f"std {dev_std:.2f}"

            )
        stats.append(WorkerStats(worker_id, len(rows), mean_abs_dev, dev_std, banned))
    return stats


def complete_matrix(vectors):
    """Stack the songs that have all seven features into a [songs x 7] array."""
    complete = [v for v in vectors if v.is_complete]
    if not complete:
        return np.zeros((0, len(MIDLEVEL_NAMES))), []
    return np.vstack([v.as_array() for v in complete]), [v.song_id for v in complete]


def correlation_matrix(vectors, strict=False):
    """
    7x7 Pearson correlations between the averaged mid-level features.

    A feature with zero variance gets NaN off the diagonal (logged), or raises
    ConstantFeature when ``strict``.
    """
    data, _ = complete_matrix(vectors)
    if data.shape[0] < 3:
        raise TooFewSongs(f"correlations need 3 complete songs, got {data.shape[0]}")
    constant = np.ptp(data, axis=0) == 0.0
    for j in np.flatnonzero(constant):
        if strict:
            raise ConstantFeature(MIDLEVEL_NAMES[j])
        logger.warning(
            f"{MIDLEVEL_NAMES[j]} has zero variance; its correlations are NaN"
        )

    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.corrcoef(data, rowvar=False)
    r = np.clip((r + r.T) / 2.0, -1.0, 1.0)
    r[constant, :] = np.nan
    r[:, constant] = np.nan
    np.fill_diagonal(r, 1.0)
    return r



def rating_histogram(vectors, feature):
    """Counts of averaged ratings in the unit bins [1,2), ..., [8,9]."""
    feature = MidLevelName.parse(feature)
    values = [v.values[feature] for v in vectors if feature in v.values]
    counts, _ = np.histogram(values, bins=np.arange(RATING_MIN, RATING_MAX + 1))
    return counts


def worker_load_summary(records):
    """(number of workers, mean and std of distinct songs per worker)."""
    if not records:
        return 0, 0.0, 0.0
    per_worker = _ratings_frame(records).groupby("worker_id")["song_id"].nunique()
    return int(per_worker.size), float(per_worker.mean()), float(per_worker.std(ddof=0))
