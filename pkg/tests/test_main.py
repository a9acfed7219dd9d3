import json
import os

import numpy as np
import pandas as pd
import pytest

from midlevel_features import annotation, dataset_io, statmodels
from midlevel_features.core import CONFIG_ECHO_NAME
from midlevel_features.extractors import MIDLEVEL_NAMES
from midlevel_features.main import (
    EXIT_FATAL,
    EXIT_OK,
    EXIT_PARTIAL,
    discover_wavs,
    main,
    write_method_comparison,
)
from tests.conftest import click_train, sine, tones

FEATURES = [n.value for n in MIDLEVEL_NAMES]


def _write_midlevel(path, frame):
    frame.rename_axis("song_id").reset_index().to_csv(path, index=False)
    return path


def _random_midlevel(n, seed=0):
    rng = np.random.default_rng(seed)
    ids = [f"song{i:03d}" for i in range(n)]
    return pd.DataFrame(rng.uniform(1, 9, size=(n, 7)).round(3), index=ids, columns=FEATURES)


# ──────────────────────────────────────────────────────────────────────────────
# Argument handling
# ──────────────────────────────────────────────────────────────────────────────
def test_no_command_prints_help(capsys):
    assert main([]) == EXIT_FATAL
    assert "usage" in capsys.readouterr().out


def test_missing_inputs_is_fatal(tmp_path):
    assert main(["extract", "--out", str(tmp_path)]) == EXIT_FATAL
    assert main(["emotion", "--input", "x.csv", "--out", str(tmp_path)]) == EXIT_FATAL


def test_unknown_config_key_is_fatal(tmp_path, caplog):
    config = tmp_path / "run.yaml"
    config.write_text("seed: 1\nbogus_option: 3\n")
    assert main(["extract", "--config", str(config), "--out", str(tmp_path)]) == EXIT_FATAL
    assert "bogus_option" in caplog.text


def test_discover_wavs(tmp_path):
    (tmp_path / "sub").mkdir()
    for name in ("b.wav", "sub/a.WAV", "notes.txt"):
        (tmp_path / name).write_bytes(b"")
    assert [p.name for p in discover_wavs([tmp_path])] == ["b.wav", "a.WAV"]


# ──────────────────────────────────────────────────────────────────────────────
# extract
# ──────────────────────────────────────────────────────────────────────────────
def test_extract_writes_one_row_per_clip(tmp_path, write_wav):
    clips = tmp_path / "clips"
    clips.mkdir()
    write_wav("clips/a.wav", sine(440, 3.0))
    write_wav("clips/b.wav", tones([261.63, 329.63, 392.0], 3.0))
    write_wav("clips/c.wav", tones([440.0, 466.16], 3.0))
    out = tmp_path / "out"

    status = main(["extract", "--input", str(clips), "--out", str(out), "--quiet", "--jobs", "2"])
    assert status == EXIT_OK
    frame = pd.read_csv(out / "features.csv")
    assert list(frame["clip_id"]) == ["a", "b", "c"]
    assert frame.loc[0, "dissonance"] < frame.loc[2, "dissonance"]
    echo = json.loads((out / CONFIG_ECHO_NAME).read_text())
    assert echo["command"] == "extract"
    assert echo["options"]["jobs"] == 2


def test_extract_reports_partial_failure(tmp_path, write_wav):
    good = write_wav("good.wav", sine(440, 3.0))
    broken = tmp_path / "broken.wav"
    broken.write_bytes(b"RIFF\x00\x00\x00\x00WAVEjunk")
    out = tmp_path / "out"
    args = ["extract", "--input", str(good), "--input", str(broken), "--out", str(out), "--quiet"]
    assert main(args) == EXIT_PARTIAL
    assert len(pd.read_csv(out / "features.csv")) == 1


def test_extract_json_from_config(tmp_path, write_wav):
    wav = write_wav("a.wav", sine(440, 3.0))
    config = tmp_path / "run.yaml"
    config.write_text(f"input: {wav}\nformat: json\njobs: 1\nquiet: true\n")
    assert main(["extract", "--config", str(config), "--out", str(tmp_path)]) == EXIT_OK
    rows = json.loads((tmp_path / "features.json").read_text())
    assert rows[0]["clip_id"] == "a"


# ──────────────────────────────────────────────────────────────────────────────
# reliability / emotion / clusters / baselines
# ──────────────────────────────────────────────────────────────────────────────
def test_reliability_with_perfect_agreement(tmp_path):
    songs = [f"s{i:02d}" for i in range(20)]
    rows = [
        {"worker_id": f"w{w}", "song_id": s, "feature": "melodiousness", "rating": 1 + i % 9}
        for w in range(5)
        for i, s in enumerate(songs)
    ]
    raw = tmp_path / "raw.csv"
    pd.DataFrame(rows).to_csv(raw, index=False)
    golden = tmp_path / "golden.csv"
    pd.DataFrame(
        {"song_id": songs, "melodiousness": [1 + i % 9 for i in range(20)]}
    ).to_csv(golden, index=False)
    out = tmp_path / "out"

    status = main(["reliability", "--input", str(raw), "--golden", str(golden), "--out", str(out)])
    assert status == EXIT_OK
    table = pd.read_csv(out / "reliability.csv").set_index("feature")
    assert table.loc["melodiousness", "alpha"] == pytest.approx(1.0)
    assert table.loc["melodiousness", "n_songs"] == 20
    assert np.isnan(table.loc["dissonance", "alpha"])
    workers = pd.read_csv(out / "workers.csv")
    assert len(workers) == 5 and not workers["banned"].any()
    report = (out / "reliability.txt").read_text()
    assert "| melodiousness | 1.00 | 20 |" in report
    assert "0 of 5 workers banned" in report


def test_reliability_writes_feature_correlations(tmp_path):
    songs = [f"s{i:02d}" for i in range(12)]
    rows = []
    for i, s in enumerate(songs):
        values = {name: 1 + (i + j) % 9 for j, name in enumerate(FEATURES)}
        values["dissonance"] = 10 - values["melodiousness"]
        rows += [
            {"worker_id": f"w{w}", "song_id": s, "feature": f, "rating": v}
            for w in range(5)
            for f, v in values.items()
        ]
    raw = tmp_path / "raw.csv"
    pd.DataFrame(rows).to_csv(raw, index=False)
    out = tmp_path / "out"

    assert main(["reliability", "--input", str(raw), "--out", str(out)]) == EXIT_OK
    table = pd.read_csv(out / "correlations.csv")
    assert len(table) == 21
    wanted = ["melodiousness", "dissonance"]
    pair = table[table["feature_a"].isin(wanted) & table["feature_b"].isin(wanted)]
    pair = pair.iloc[0]

    assert pair["r"] == pytest.approx(-1.0)
    assert pair["reference_r"] == pytest.approx(-0.59)


def test_reliability_rejects_averaged_input(tmp_path):
    path = _write_midlevel(tmp_path / "means.csv", _random_midlevel(5))
    assert main(["reliability", "--input", str(path), "--out", str(tmp_path)]) == EXIT_FATAL


def test_emotion_command(tmp_path):
    midlevel = _random_midlevel(40, seed=1)
    path = _write_midlevel(tmp_path / "means.csv", midlevel)
    targets = pd.DataFrame(
        {"song_id": midlevel.index, "valence": 0.7 * midlevel["modality"] - 0.2 * midlevel["dissonance"]}
    )
    targets.to_csv(tmp_path / "targets.csv", index=False)
    out = tmp_path / "out"

    args = ["emotion", "--input", str(path), "--targets", str(tmp_path / "targets.csv")]
    assert main(args + ["--folds", "5", "--out", str(out)]) == EXIT_OK
    frame = pd.read_csv(out / "emotion.csv")
    assert frame.loc[0, "dimension"] == "valence"
    assert frame.loc[0, "rho"] > 0.99
    assert frame.loc[0, "top_features"].startswith("modality")
    assert (out / "emotion.txt").exists()


def test_emotion_with_too_few_songs_is_fatal(tmp_path):
    midlevel = _random_midlevel(10)
    path = _write_midlevel(tmp_path / "means.csv", midlevel)
    pd.DataFrame({"song_id": midlevel.index, "valence": 1.0}).to_csv(tmp_path / "t.csv", index=False)
    args = ["emotion", "--input", str(path), "--targets", str(tmp_path / "t.csv"), "--out", str(tmp_path)]
    assert main(args) == EXIT_FATAL


def test_clusters_command(tmp_path):
    rng = np.random.default_rng(2)
    centers = np.eye(5, 7) * 6.0 + 1.5
    labels = np.repeat(np.arange(1, 6), 10)
    values = np.clip(centers[labels - 1] + rng.normal(scale=0.3, size=(50, 7)), 1, 9).round(3)
    ids = [f"song{i:03d}" for i in range(50)]
    path = _write_midlevel(tmp_path / "means.csv", pd.DataFrame(values, index=ids, columns=FEATURES))
    pd.DataFrame({"song_id": ids, "cluster": labels}).to_csv(tmp_path / "labels.csv", index=False)
    out = tmp_path / "out"

    args = ["clusters", "--input", str(path), "--labels", str(tmp_path / "labels.csv")]
    assert main(args + ["--folds", "5", "--out", str(out)]) == EXIT_OK
    frame = pd.read_csv(out / "clusters.csv")
    assert list(frame["cluster"]) == [1, 2, 3, 4, 5]
    assert (frame["auc"] > 0.9).all()
    assert (out / "clusters.txt").exists()


def test_baselines_command(tmp_path):
    midlevel = _random_midlevel(30, seed=3)
    path = _write_midlevel(tmp_path / "means.csv", midlevel)
    features = pd.DataFrame(
        {
            "clip_id": midlevel.index,
            "dissonance": midlevel["dissonance"],
            "inharmonicity": 0.1,
            "pulse_clarity": midlevel["rhythmic_stability"] / 9.0,
            "attack_leap": 2.0 * midlevel["articulation"],
            "hcdf_mean": midlevel["tonal_stability"],
            "majorness": (midlevel["modality"] - 5.0) / 4.0,
        }
    )
    features.to_csv(tmp_path / "features.csv", index=False)
    out = tmp_path / "out"

    args = ["baselines", "--input", str(tmp_path / "features.csv"), "--midlevel", str(path)]
    assert main(args + ["--out", str(out)]) == EXIT_OK
    frame = pd.read_csv(out / "baselines.csv").set_index("extractor")
    assert frame.loc["attack_leap", "r"] == pytest.approx(1.0)
    assert frame.loc["attack_leap", "feature"] == "articulation"
    assert np.isnan(frame.loc["inharmonicity", "r"])


# ──────────────────────────────────────────────────────────────────────────────
# train / fetch
# ──────────────────────────────────────────────────────────────────────────────
def test_train_gradcheck_passes(tmp_path, capsys):
    args = ["train", "--stage", "gradcheck", "--out", str(tmp_path), "--n-params", "50"]
    assert main(args) == EXIT_OK
    assert "max relative error" in capsys.readouterr().out


def test_train_stages_on_synthetic_data(tmp_path):
    common = ["--synthetic", "40", "--input-size", "16", "--embedding-dim", "8", "--quiet"]
    pre = tmp_path / "pre"
    assert main(["train", "--stage", "pretrain", "--epochs", "1", "--out", str(pre)] + common) == EXIT_OK
    checkpoint = pre / "pretrain.ckpt"
    assert checkpoint.exists()
    metrics = pd.read_csv(pre / "pretrain_metrics.csv")
    assert list(metrics["stage"]) == ["pretrain"]

    emb = tmp_path / "emb"
    args = ["train", "--stage", "embed", "--checkpoint", str(checkpoint), "--out", str(emb)]
    assert main(args + common) == EXIT_OK
    embeddings = pd.read_csv(emb / "embeddings.csv")
    assert embeddings.shape == (40, 9)

    ft = tmp_path / "ft"
    args = ["train", "--stage", "finetune", "--checkpoint", str(checkpoint), "--epochs", "1"]
    assert main(args + ["--out", str(ft)] + common) == EXIT_OK
    stages = set(pd.read_csv(ft / "finetune_metrics.csv")["stage"])
    assert stages == {"finetune1", "finetune2"}
    assert (ft / "finetune.ckpt").exists()


def test_train_scratch_and_method_comparison(tmp_path):
    common = ["--synthetic", "80", "--input-size", "16", "--embedding-dim", "8", "--quiet"]
    pre = tmp_path / "pre"
    assert main(["train", "--stage", "pretrain", "--epochs", "1", "--out", str(pre)] + common) == EXIT_OK

    out = tmp_path / "cmp"
    args = ["train", "--stage", "scratch", "--epochs", "2", "--out", str(out)]
    assert main(args + common) == EXIT_OK
    assert (out / "scratch.ckpt").exists()
    assert set(pd.read_csv(out / "scratch_metrics.csv")["stage"]) == {"finetune2"}
    scratch = pd.read_csv(out / "scratch_scores.csv")
    assert list(scratch.columns) == ["feature", "r"]

    args = ["train", "--stage", "finetune", "--checkpoint", str(pre / "pretrain.ckpt")]
    assert main(args + ["--epochs", "1", "--out", str(out)] + common) == EXIT_OK
    table = pd.read_csv(out / "method_comparison.csv")
    assert list(table.columns) == ["method", "feature", "r"]
    expected = len(scratch) + len(pd.read_csv(out / "finetune_scores.csv"))
    assert len(table) == expected
    assert set(table["method"]) <= {"scratch", "finetune"}


def test_method_comparison_merges_score_tables(tmp_path):
    pd.DataFrame({"feature": ["melodiousness", "modality"], "r": [0.7, 0.5]}).to_csv(
        tmp_path / "transfer.csv", index=False
    )
    pd.DataFrame(
        {"extractor": ["majorness"], "feature": ["modality"], "r": [0.3], "n_songs": [30]}
    ).to_csv(tmp_path / "baselines.csv", index=False)
    path = write_method_comparison(tmp_path)
    table = pd.read_csv(path)
    assert table.to_dict(orient="records") == [
        {"method": "transfer", "feature": "melodiousness", "r": 0.7},
        {"method": "transfer", "feature": "modality", "r": 0.5},
        {"method": "handcrafted:majorness", "feature": "modality", "r": 0.3},
    ]
    assert write_method_comparison(tmp_path / "empty") is None


def test_train_without_checkpoint_is_fatal(tmp_path):

    assert main(["train", "--stage", "embed", "--out", str(tmp_path)]) == EXIT_FATAL
    missing = str(tmp_path / "none.ckpt")
    assert main(["train", "--stage", "transfer", "--checkpoint", missing, "--out", str(tmp_path)]) == EXIT_FATAL


def test_fetch_from_file_url(tmp_path, capsys):
    source = tmp_path / "archive.zip"
    source.write_bytes(b"zip bytes")
    out = tmp_path / "out"
    assert main(["fetch", "--url", source.as_uri(), "--out", str(out), "--dest", "a.zip"]) == EXIT_OK
    assert (out / "a.zip").read_bytes() == b"zip bytes"
    assert "sha256=" in capsys.readouterr().out
    echo = json.loads((out / CONFIG_ECHO_NAME).read_text())
    assert echo["command"] == "fetch"
    assert echo["options"]["dest"] == "a.zip"


def test_fetch_checksum_mismatch_is_fatal(tmp_path):
    source = tmp_path / "archive.zip"
    source.write_bytes(b"zip bytes")
    args = ["fetch", "--url", source.as_uri(), "--out", str(tmp_path), "--sha256", "0" * 64]
    assert main(args) == EXIT_FATAL


# ──────────────────────────────────────────────────────────────────────────────
# Repeatability: same inputs and seed give byte-identical results
# ──────────────────────────────────────────────────────────────────────────────
def _run_twice(tmp_path, args, outputs):
    runs = []
    for name in ("first", "second"):
        out = tmp_path / name
        assert main(args + ["--out", str(out)]) == EXIT_OK
        echo = json.loads((out / CONFIG_ECHO_NAME).read_text())
        echo.pop("out")
        runs.append(([(out / o).read_bytes() for o in outputs], echo))
    assert runs[0] == runs[1]


def test_extract_is_repeatable(tmp_path, write_wav):
    clips = tmp_path / "clips"
    clips.mkdir()
    write_wav("clips/a.wav", tones([261.63, 329.63, 392.0], 3.0))
    write_wav("clips/b.wav", click_train(seconds=3.0))
    args = ["extract", "--input", str(clips), "--quiet", "--jobs", "2"]
    _run_twice(tmp_path, args, ["features.csv"])


def test_emotion_and_clusters_are_repeatable(tmp_path):
    rng = np.random.default_rng(7)
    labels = np.repeat(np.arange(1, 6), 10)
    centers = np.eye(5, 7) * 6.0 + 1.5
    values = np.clip(centers[labels - 1] + rng.normal(scale=0.8, size=(50, 7)), 1, 9)
    ids = [f"song{i:03d}" for i in range(50)]
    midlevel = pd.DataFrame(values.round(3), index=ids, columns=FEATURES)
    path = _write_midlevel(tmp_path / "means.csv", midlevel)
    pd.DataFrame({"song_id": ids, "valence": midlevel["modality"] + rng.normal(size=50)}).to_csv(
        tmp_path / "targets.csv", index=False
    )
    pd.DataFrame({"song_id": ids, "cluster": labels}).to_csv(tmp_path / "labels.csv", index=False)

    emotion = ["emotion", "--input", str(path), "--targets", str(tmp_path / "targets.csv")]
    _run_twice(tmp_path / "emotion", emotion + ["--seed", "3"], ["emotion.csv", "emotion.txt"])
    clusters = ["clusters", "--input", str(path), "--labels", str(tmp_path / "labels.csv")]
    _run_twice(tmp_path / "clusters", clusters + ["--seed", "3"], ["clusters.csv", "clusters.txt"])


def test_pretrain_is_repeatable(tmp_path):
    args = ["train", "--stage", "pretrain", "--synthetic", "40", "--input-size", "16"]
    args += ["--embedding-dim", "8", "--epochs", "2", "--quiet"]
    _run_twice(tmp_path, args, ["pretrain.ckpt", "pretrain_metrics.csv"])


# ──────────────────────────────────────────────────────────────────────────────
# Released annotations (skipped unless MIDLEVEL_DATA_DIR is set)
# ──────────────────────────────────────────────────────────────────────────────
def _released(data_dir, name):
    path = os.path.join(data_dir, name)
    if not os.path.isfile(path):
        pytest.skip(f"{name} not found under MIDLEVEL_DATA_DIR")
    return path


def test_released_feature_correlations(data_dir, tmp_path):
    main(["reliability", "--input", f"{data_dir}/annotations.csv", "--out", str(tmp_path)])
    table = pd.read_csv(tmp_path / "correlations.csv").set_index(["feature_a", "feature_b"])
    assert table.loc[("melodiousness", "dissonance"), "r"] == pytest.approx(-0.59, abs=0.05)
    assert table.loc[("articulation", "rhythmic_stability"), "r"] == pytest.approx(0.60, abs=0.05)


def test_released_emotion_correlations(data_dir, tmp_path):
    targets = _released(data_dir, "emotion_targets.csv")
    args = ["emotion", "--input", f"{data_dir}/annotations.csv", "--targets", targets]
    assert main(args + ["--out", str(tmp_path)]) in (EXIT_OK, EXIT_PARTIAL)
    rho = pd.read_csv(tmp_path / "emotion.csv").set_index("dimension")["rho"]
    assert rho["valence"] == pytest.approx(0.88, abs=0.05)
    assert rho["tension"] == pytest.approx(0.84, abs=0.05)
    assert rho["fear"] == pytest.approx(0.82, abs=0.05)


def test_released_cluster_weighted_f1(data_dir):
    labels = dataset_io.load_cluster_labels(_released(data_dir, "cluster_labels.csv"))
    loaded = dataset_io.load_annotations(f"{data_dir}/annotations.csv")
    midlevel = statmodels.midlevel_frame(annotation.aggregate_ratings(loaded.records))
    series = pd.Series(dict(labels.records), name="cluster")
    report = statmodels.cluster_report(midlevel, series, k=10, seed=0)
    assert report.weighted_f1 == pytest.approx(0.54, abs=0.07)


def test_reliability_on_released_annotations(data_dir, tmp_path):
    status = main(["reliability", "--input", f"{data_dir}/annotations.csv", "--out", str(tmp_path)])
    assert status in (EXIT_OK, EXIT_PARTIAL)
    table = pd.read_csv(tmp_path / "reliability.csv")
    assert set(table["feature"]) == set(FEATURES)
