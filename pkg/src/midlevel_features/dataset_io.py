#!/usr/bin/env python3
"""
Reading and writing the toolkit's files:
- annotations (raw ratings or averaged per song), comparisons, emotion targets
- song / tag manifests and cluster labels
- extracted feature tables (CSV or JSON)
- fetch_archive for the released dataset

Loaders collect bad rows in a LoadResult instead of raising.
"""
import hashlib
import json
import logging
import os
import tempfile
import urllib.error
import urllib.request
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from midlevel_features.annotation import ComparisonRecord, MidLevelVector, RatingRecord
from midlevel_features.core import _retry
from midlevel_features.errors import (
    ChecksumMismatch,
    DuplicateSongId,
    EmptyDataset,
    InvalidArgument,
    IoFailure,
    MidlevelError,
    NetworkFailure,
    OutOfRangeRating,
    UnknownSchema,
)
from midlevel_features.extractors import (
    FEATURE_FIELDS,
    MIDLEVEL_NAMES,
    HandcraftedFeatures,
)
from midlevel_features.statmodels import EMOTION_DIMENSIONS

logger = logging.getLogger(__name__)

DEFAULT_ARCHIVE_URL = "https://osf.io/5aupt/"
MAX_SONGS_PER_ARTIST = 5
SONG_SOURCES = ("jamendo", "magnatune", "reused-dataset")
TAG_SEPARATOR = ";"

# column names of the released archive -> canonical names
COLUMN_ALIASES = {
    "song id": "song_id",
    "songid": "song_id",
    "melody": "melodiousness",
    "rhythm_stability": "rhythmic_stability",
    "rhythm_complexity": "rhythmic_complexity",
    "minorness": "modality",
    "mode": "modality",
}

RAW_COLUMNS = ("worker_id", "song_id", "feature", "rating")
COMPARISON_COLUMNS = ("worker_id", "feature", "song_a", "song_b", "winner")
FEATURE_COLUMNS = ("clip_id",) + FEATURE_FIELDS
MIDLEVEL_COLUMNS = tuple(n.value for n in MIDLEVEL_NAMES)


@dataclass(frozen=True)
class RowError:
    row: int
    error: Exception

    def __str__(self):
        return f"line {self.row}: {type(self.error).__name__}: {self.error}"


@dataclass
class LoadResult:
    records: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    schema: str = ""

    def raise_for_errors(self):
        if self.errors:
            raise self.errors[0].error
        return self

    def __len__(self):
        return len(self.records)


@dataclass(frozen=True)
class SongManifestEntry:
    song_id: str
    artist_id: str
    source: str
    audio_path: str = None
    url: str = None

    def __post_init__(self):
        if self.source not in SONG_SOURCES:
            raise InvalidArgument(f"unknown source '{self.source}'")


@dataclass(frozen=True)
class EmotionTargetTable:
    """song_id -> {dimension: value}; missing cells are absent, not zero."""

    values: dict
    dimensions: tuple
    unknown_columns: tuple = ()

    def to_frame(self):
        frame = pd.DataFrame.from_dict(
            self.values, orient="index", columns=list(self.dimensions)
        )
        return frame.astype(float).sort_index()


@dataclass(frozen=True, eq=False)
class TagManifest:
    tags: tuple
    song_ids: tuple
    matrix: np.ndarray
    min_count: int

    def __post_init__(self):
        if not self.tags:
            raise EmptyDataset("no tag reaches the minimum count")


def _normalize_column(name):
    key = str(name).strip().lower()
    key = COLUMN_ALIASES.get(key, key).replace(" ", "_").replace("-", "_")
    return COLUMN_ALIASES.get(key, key)


def read_table(path):
    """All cells as stripped strings, headers normalized to canonical names."""
    path = Path(path)
    try:
        frame = pd.read_csv(
            path, dtype=str, keep_default_na=False, skipinitialspace=True
        )
    except (OSError, UnicodeDecodeError, pd.errors.ParserError) as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    except pd.errors.EmptyDataError as e:
        raise UnknownSchema(f"{path} has no header") from e
    frame.columns = [_normalize_column(c) for c in frame.columns]
    return frame.apply(lambda col: col.str.strip())


def _rows(frame):
    """(line number, row dict) with the header on line 1."""
    for i, row in enumerate(frame.to_dict(orient="records")):
        yield i + 2, row


def _float_or_none(text):
    return None if text == "" else float(text)


def _collect(frame, build, schema):
    result = LoadResult(schema=schema)
    for line, row in _rows(frame):
        try:
            result.records.append(build(row))
        except (MidlevelError, ValueError, TypeError) as e:
            result.errors.append(RowError(line, e))
    for err in result.errors:
        logger.warning(f"Rejected {err}")
    return result


def _parse_rating(text):
    try:
        value = float(text)
    except ValueError:
        raise OutOfRangeRating(f"rating '{text}' is not a number")
    if not value.is_integer():
        raise OutOfRangeRating(f"rating {text} is not an integer")
    return int(value)


def _averaged_vector(row, seen):
    song_id = row["song_id"]
    if not song_id:
        raise InvalidArgument("empty song_id")
    if song_id in seen:
        raise DuplicateSongId(f"song '{song_id}' appears twice")
    values, counts = {}, {}
    for name in MIDLEVEL_COLUMNS:
        value = _float_or_none(row.get(name, ""))
        if value is None:
            continue
        if not 1.0 <= value <= 9.0:
            raise OutOfRangeRating(f"{name} = {value} outside [1, 9]")
        values[name] = value
        count = row.get(f"n_{name}", "")
        if count:
            counts[name] = int(count)
    seen.add(song_id)
    return MidLevelVector(song_id, values, counts)


def load_annotations(path):
    """
    Raw ratings (worker_id, song_id, feature, rating) or averaged ratings
    (song_id + feature columns); the schema is picked from the header.
    """
    frame = read_table(path)
    columns = set(frame.columns)
    if set(RAW_COLUMNS) <= columns:
        return _collect(
            frame,
            lambda r: RatingRecord(
                r["worker_id"], r["song_id"], r["feature"], _parse_rating(r["rating"])
            ),
            "raw",
        )
    if "song_id" in columns and columns & set(MIDLEVEL_COLUMNS):
        known = {"song_id", *MIDLEVEL_COLUMNS, *(f"n_{c}" for c in MIDLEVEL_COLUMNS)}
        unknown = sorted(columns - known)
        if unknown:
            logger.warning(f"Ignoring unknown columns in {path}: {', '.join(unknown)}")
        seen = set()
        return _collect(frame, lambda r: _averaged_vector(r, seen), "averaged")
    raise UnknownSchema(
        f"{path}: header {sorted(columns)} matches no annotation schema"
    )


def load_comparisons(path):
    frame = read_table(path)
    missing = set(COMPARISON_COLUMNS) - set(frame.columns)
    if missing:
        raise UnknownSchema(f"{path} lacks columns {sorted(missing)}")
    return _collect(
        frame,
        lambda r: ComparisonRecord(
            r["worker_id"], r["feature"], r["song_a"], r["song_b"], r["winner"].upper()
        ),
        "comparisons",
    )


def load_emotion_targets(path):
    """Emotion table keyed by song_id; records holds a single EmotionTargetTable."""
    frame = read_table(path)
    if "song_id" not in frame.columns:
        raise UnknownSchema(f"{path} has no song_id column")
    dimensions = tuple(c for c in frame.columns if c != "song_id")
    unknown = tuple(c for c in dimensions if c not in EMOTION_DIMENSIONS)
    if unknown:
        logger.warning(
            f"Unknown emotion columns in {path} kept as-is: {', '.join(unknown)}"
        )

    values = {}
    errors = []
    for line, row in _rows(frame):
        try:
            song_id = row["song_id"]
            if song_id in values:
                raise DuplicateSongId(f"song '{song_id}' appears twice")
            parsed = {d: _float_or_none(row[d]) for d in dimensions}
            if any(v is not None and not np.isfinite(v) for v in parsed.values()):
                raise InvalidArgument("emotion values must be finite")
            values[song_id] = {d: v for d, v in parsed.items() if v is not None}
        except (MidlevelError, ValueError) as e:
            errors.append(RowError(line, e))
    for err in errors:
        logger.warning(f"Rejected {err}")
    table = EmotionTargetTable(values, dimensions, unknown)
    return LoadResult([table], errors, "emotion")


def load_song_manifest(path):
    frame = read_table(path)
    missing = {"song_id", "artist_id", "source"} - set(frame.columns)
    if missing:
        raise UnknownSchema(f"{path} lacks columns {sorted(missing)}")
    seen = set()

    def build(r):
        if r["song_id"] in seen:
            raise DuplicateSongId(f"song '{r['song_id']}' appears twice")
        seen.add(r["song_id"])
        return SongManifestEntry(
            r["song_id"],
            r["artist_id"],
            r["source"].lower(),
            r.get("audio_path") or None,
            r.get("url") or None,
        )

    result = _collect(frame, build, "manifest")
    per_artist = Counter(e.artist_id for e in result.records)
    for artist, n in sorted(per_artist.items()):
        if n > MAX_SONGS_PER_ARTIST:
            logger.warning(
                f"Artist {artist} has {n} songs (limit {MAX_SONGS_PER_ARTIST})"
            )
    return result


def build_tag_manifest(song_tags, min_count=3000):
    """Keep the tags applied to at least min_count songs; one bit row per song."""
    song_ids = tuple(sorted(song_tags))
    counts = Counter(t for s in song_ids for t in set(song_tags[s]))
    tags = tuple(sorted(t for t, n in counts.items() if n >= min_count))
    column = {t: j for j, t in enumerate(tags)}
    matrix = np.zeros((len(song_ids), len(tags)))
    for i, s in enumerate(song_ids):
        for t in song_tags[s]:
            if t in column:
                matrix[i, column[t]] = 1.0
    dropped = len(counts) - len(tags)
    if dropped:
        logger.info(f"Dropped {dropped} tag(s) applied to fewer than {min_count} songs")
    return TagManifest(tags, song_ids, matrix, min_count)


def load_tag_manifest(path, min_count=3000):
    frame = read_table(path)
    if not {"song_id", "tags"} <= set(frame.columns):
        raise UnknownSchema(f"{path} needs song_id and tags columns")
    song_tags = {}
    for line, row in _rows(frame):
        if row["song_id"] in song_tags:
            raise DuplicateSongId(f"line {line}: song '{row['song_id']}' appears twice")
        tags = (t.strip() for t in row["tags"].split(TAG_SEPARATOR))
        song_tags[row["song_id"]] = [t for t in tags if t]
    return build_tag_manifest(song_tags, min_count)


def _cluster_row(r):
    cluster = int(r["cluster"])
    if not 1 <= cluster <= 5:
        raise InvalidArgument(f"cluster {cluster} outside 1..5")
    return r["song_id"], cluster


def load_cluster_labels(path):
    frame = read_table(path)
    if not {"song_id", "cluster"} <= set(frame.columns):
        raise UnknownSchema(f"{path} needs song_id and cluster columns")
    return _collect(frame, _cluster_row, "clusters")


def _format(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _feature_rows(records, kind):
    if kind == "handcrafted":
        columns = list(FEATURE_COLUMNS)
        rows = [{c: getattr(r, c) for c in columns} for r in records]
        return columns, rows
    columns = ["song_id"] + list(MIDLEVEL_COLUMNS)
    with_counts = any(r.n_ratings for r in records)
    if with_counts:
        columns += [f"n_{c}" for c in MIDLEVEL_COLUMNS]
    rows = []
    for r in records:
        row = {"song_id": r.song_id}
        for name in MIDLEVEL_NAMES:
            row[name.value] = r.values.get(name)
            if with_counts:
                row[f"n_{name.value}"] = r.n_ratings.get(name)
        rows.append(row)
    return columns, rows


def _kind_of(records, kind):
    if kind:
        return kind
    if records and isinstance(records[0], MidLevelVector):
        return "midlevel"
    return "handcrafted"


def write_features(records, path, fmt="csv", kind=None):
    """
    Write HandcraftedFeatures or MidLevelVector records in a fixed column
    order; reals use the shortest repr that reads back exactly.
    """
    columns, rows = _feature_rows(records, _kind_of(records, kind))
    try:
        if fmt == "json":
            Path(path).write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
        elif fmt == "csv":
            frame = pd.DataFrame(
                [[_format(row[c]) for c in columns] for row in rows], columns=columns
            )
            frame.to_csv(path, index=False)
        else:
            raise InvalidArgument(f"unknown format '{fmt}'")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def _handcrafted(row):
    values = {f: float(row[f]) for f in FEATURE_FIELDS}
    return HandcraftedFeatures(clip_id=str(row.get("clip_id", "")), **values)


def load_features(path):
    """Matching loader for write_features (CSV or JSON by extension)."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        try:
            rows = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise IoFailure(f"cannot read {path}: {e}") from e
        if not isinstance(rows, list):
            raise UnknownSchema(f"{path} must hold a JSON array")
        frame = pd.DataFrame(
            [{k: "" if v is None else str(v) for k, v in row.items()} for row in rows]
        )
        frame.columns = [_normalize_column(c) for c in frame.columns]
    else:
        frame = read_table(path)
    columns = set(frame.columns)
    if "clip_id" in columns or columns >= set(FEATURE_FIELDS):
        return _collect(frame, _handcrafted, "handcrafted")
    if "song_id" in columns:
        seen = set()
        return _collect(frame, lambda r: _averaged_vector(r, seen), "averaged")
    if frame.empty:
        return LoadResult(schema="empty")
    raise UnknownSchema(f"{path}: header {sorted(columns)} is not a feature table")


def features_frame(records):
    """DataFrame of HandcraftedFeatures indexed by clip_id."""
    frame = pd.DataFrame(
        [{f: getattr(r, f) for f in FEATURE_COLUMNS} for r in records],
        columns=list(FEATURE_COLUMNS),
    )
    return frame.set_index("clip_id").sort_index()


def _download(url, tmp_path, timeout):
    digest = hashlib.sha256()
    with urllib.request.urlopen(url, timeout=timeout) as response, open(
        tmp_path, "wb"
    ) as out:
        for chunk in iter(lambda: response.read(1 << 16), b""):
            digest.update(chunk)
            out.write(chunk)
    return digest.hexdigest()


def fetch_archive(
    url=DEFAULT_ARCHIVE_URL,
    dest="midlevel_archive.zip",
    expected_sha256=None,
    max_retries=3,
    initial_delay=1.0,
    timeout=60,
):
    """Download url to dest; with a checksum, a mismatching download is removed."""
    dest = Path(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dest.parent, prefix=f".{dest.name}.")
    os.close(fd)
    try:
        digest = _retry(
            _download,
            url,
            tmp,
            timeout,
            max_retries=max_retries,
            initial_delay=initial_delay,

        )
    except (urllib.error.URLError, ConnectionError, TimeoutError, OSError) as e:
        Path(tmp).unlink(missing_ok=True)
        raise NetworkFailure(f"download of {url} failed: {e}") from e
    if expected_sha256 and digest != expected_sha256.lower():
        Path(tmp).unlink(missing_ok=True)
        raise ChecksumMismatch(f"sha256 {digest} != expected {expected_sha256}")
    os.replace(tmp, dest)
    logger.info(f"Fetched {url} -> {dest} (sha256 {digest})")
    return digest
