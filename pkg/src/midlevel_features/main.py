#!/usr/bin/env python3
"""
CLI for midlevel-features: feature extraction, annotation reliability,
emotion/cluster reports, extractor baselines, network training and
dataset download.

Exit codes: 0 success, 1 partial per-item failure (or failed gradient
check), 2 fatal configuration or input error.
"""
import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), os.pardir)))
# fmt: off
from midlevel_features import annotation, dataset_io, neuralnet, statmodels  # noqa: E402
from midlevel_features.core import (  # noqa: E402
    RunConfig,
    load_config_file,
    output_path,
    render_report,
    resolve_input,
    write_config_echo,
    write_report,
    write_table,
)
from midlevel_features.dsp import clip_to_patch, load_wav  # noqa: E402
from midlevel_features.errors import (  # noqa: E402
    ConfigError,
    InsufficientOverlap,
    IoFailure,
    MidlevelError,

    MissingCheckpoint,
    NoInputs,
)
from midlevel_features.extractors import MIDLEVEL_NAMES, extract_all  # noqa: E402
# fmt: on


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_FATAL = 2
GRADCHECK_TOLERANCE = 1e-4
TRAIN_STAGES = ("pretrain", "embed", "transfer", "finetune", "scratch", "gradcheck")
# method -> score table written into --out
SCORE_TABLES = {
    "scratch": "scratch_scores",
    "transfer": "transfer",
    "finetune": "finetune_scores",
}


def _run_config(args):
    skip = {
        "command",
        "input",
        "out",
        "seed",
        "format",
        "config",
        "log_level",
        "quiet",
        "run_tests",
        "handler",
    }
    options = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    return RunConfig(
        args.command, tuple(args.input or ()), args.out, args.seed, args.format, options
    )


def _inputs(args, minimum=1):
    paths = [resolve_input(p) for p in args.input or []]
    if len(paths) < minimum:
        raise NoInputs(f"'{args.command}' needs {minimum} --input path(s)")
    return paths


def discover_wavs(paths):
    """WAV files from files and directories (recursive), sorted by path."""
    found = set()
    for path in paths:
        path = Path(path)
        if path.is_dir():
            found.update(p for p in path.rglob("*") if p.suffix.lower() == ".wav")
        else:
            found.add(path)
    return sorted(found)


def _extract_one(path):
    try:
        return extract_all(load_wav(path), clip_id=path.stem), None
    except (MidlevelError, OSError) as e:
        return None, e


def cmd_extract(args):
    """One HandcraftedFeatures row per clip; failures are logged and skipped."""
    wavs = discover_wavs(_inputs(args))
    if not wavs:
        raise NoInputs("no WAV files found")
    rows, failed = [], 0
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        results = pool.map(_extract_one, wavs)
        progress = tqdm(
            zip(wavs, results),
            total=len(wavs),
            desc="extract",
            unit="clip",
            disable=args.quiet,
        )
        for path, (features, error) in progress:
            if error is not None:
                failed += 1
                logger.error(f"Extraction failed for {path}: {error}")
                continue
            rows.append(features)

    out = output_path(args.out, "features", args.format)
    dataset_io.write_features(rows, out, args.format, kind="handcrafted")
    write_config_echo(_run_config(args), args.out)
    logger.info(f"Wrote {len(rows)} feature rows to {out} ({failed} failed)")
    return EXIT_PARTIAL if failed else EXIT_OK


def _golden_means(path):
    result = dataset_io.load_annotations(path)
    if result.schema != "averaged":
        raise ConfigError(f"golden file {path} must use the averaged schema")
    return {
        (v.song_id, name): value
        for v in result.records
        for name, value in v.values.items()
    }


def cmd_reliability(args):
    """Per-feature alpha from pseudo-rater matrices, plus worker screening."""
    (path,) = _inputs(args)[:1]
    loaded = dataset_io.load_annotations(path)
    if loaded.schema != "raw":
        raise ConfigError(
            f"{path} must hold raw ratings (worker_id, song_id, feature, rating)"
        )
    records = loaded.records
    report = annotation.reliability_report(records, args.n_raters, args.seed)
    rows = [
        {
            "feature": name.value,
            "alpha": entry["alpha"],
            "n_songs": entry["n_songs"],
            "reference_alpha": statmodels.REFERENCE_ALPHA[name],
        }
        for name, entry in report.items()
    ]
    out = output_path(args.out, "reliability", args.format)
    write_table(pd.DataFrame(rows), out, args.format)
    _write_correlations(records, args)

    workers = []
    if args.golden:
        golden = _golden_means(resolve_input(args.golden))
        workers = annotation.screen_workers(records, golden, args.tau_dev, args.tau_std)
        frame = pd.DataFrame([vars(w) for w in workers])
        write_table(frame, output_path(args.out, "workers", args.format), args.format)
    n_workers, load_mean, load_std = annotation.worker_load_summary(records)

    text = render_report(
        "reliability.md",
        rows=rows,
        workers=workers,
        n_banned=sum(w.banned for w in workers),
        n_workers=n_workers,
        load_mean=load_mean,
        load_std=load_std,
        seed=args.seed,
    )
    write_report(text, args.out, "reliability")
    write_config_echo(_run_config(args), args.out)
    return EXIT_PARTIAL if loaded.errors else EXIT_OK


def _write_correlations(records, args):
    """Upper triangle of the feature correlations over the averaged ratings."""
    vectors = annotation.aggregate_ratings(records)
    try:
        r = annotation.correlation_matrix(vectors)
    except MidlevelError as e:
        logger.warning(f"Skipping feature correlations: {e}")
        return None
    rows = [
        {
            "feature_a": a.value,
            "feature_b": b.value,
            "r": r[i, j],
            "reference_r": statmodels.reference_correlation(a, b),
        }
        for i, a in enumerate(MIDLEVEL_NAMES)
        for j, b in enumerate(MIDLEVEL_NAMES)
        if i < j
    ]
    out = output_path(args.out, "correlations", args.format)
    return write_table(pd.DataFrame(rows), out, args.format)


def _midlevel(path):
    loaded = dataset_io.load_annotations(path)
    if loaded.schema == "raw":
        vectors = annotation.aggregate_ratings(loaded.records)
    else:
        vectors = loaded.records
    return statmodels.midlevel_frame(vectors), loaded.errors


def cmd_emotion(args):
    (path,) = _inputs(args)[:1]
    if not args.targets:
        raise NoInputs("emotion needs --targets")
    midlevel, errors = _midlevel(path)
    targets = dataset_io.load_emotion_targets(resolve_input(args.targets))
    table = targets.records[0].to_frame()
    rows = statmodels.emotion_report(midlevel, table, args.folds, args.seed)
    frame = pd.DataFrame(
        [
            {
                "dimension": r.dimension,
                "rho": r.rho,
                "n_songs": r.n_songs,
                "top_features": ";".join(r.top_features),
                "reference_rho": r.reference_rho,
                **{f"w_{k}": v for k, v in r.weights.items()},
            }
            for r in rows
        ]
    )
    write_table(frame, output_path(args.out, "emotion", args.format), args.format)
    text = render_report("emotion.md", rows=rows, seed=args.seed, folds=args.folds)
    write_report(text, args.out, "emotion")
    write_config_echo(_run_config(args), args.out)
    return EXIT_PARTIAL if errors or targets.errors else EXIT_OK


def cmd_clusters(args):
    (path,) = _inputs(args)[:1]
    if not args.labels:
        raise NoInputs("clusters needs --labels")
    midlevel, errors = _midlevel(path)
    labels = dataset_io.load_cluster_labels(resolve_input(args.labels))
    series = pd.Series(dict(labels.records), name="cluster")
    report = statmodels.cluster_report(midlevel, series, args.folds, args.seed)
    frame = pd.DataFrame(
        [
            {
                "cluster": r.cluster,
                "auc": r.auc,
                "f1": r.f1,
                "support": r.support,
                "reference_auc": (r.reference or (None, None))[0],
                "reference_f1": (r.reference or (None, None))[1],
            }
            for r in report.clusters
        ]
    )
    write_table(frame, output_path(args.out, "clusters", args.format), args.format)
    text = render_report(
        "clusters.md",
        report=report,
        reference_f1=statmodels.REFERENCE_WEIGHTED_F1,
        seed=args.seed,
        folds=args.folds,
    )
    write_report(text, args.out, "clusters")
    write_config_echo(_run_config(args), args.out)
    return EXIT_PARTIAL if errors or labels.errors else EXIT_OK


def cmd_baselines(args):
    """Correlation of each extractor with the perceptual feature it targets."""
    (path,) = _inputs(args)[:1]
    if not args.midlevel:
        raise NoInputs("baselines needs --midlevel")
    features = dataset_io.load_features(path)
    midlevel, errors = _midlevel(resolve_input(args.midlevel))
    handcrafted = dataset_io.features_frame(features.records)
    rows = statmodels.baseline_correlations(handcrafted, midlevel)
    frame = pd.DataFrame(
        [
            {
                "extractor": r.extractor,
                "feature": r.feature.value,
                "r": r.r,
                "n_songs": r.n_songs,
            }
            for r in rows
        ]
    )
    write_table(frame, output_path(args.out, "baselines", args.format), args.format)
    write_report(render_report("baselines.md", rows=rows), args.out, "baselines")
    write_method_comparison(args.out, args.format)
    write_config_echo(_run_config(args), args.out)
    return EXIT_PARTIAL if errors or features.errors else EXIT_OK


def cmd_fetch(args):
    dest = Path(args.out) / args.dest
    digest = dataset_io.fetch_archive(args.url, dest, args.sha256)
    print(f"{dest} sha256={digest}")
    write_config_echo(_run_config(args), args.out)
    return EXIT_OK


def _read_output(path, fmt):
    try:
        return pd.read_json(path) if fmt == "json" else pd.read_csv(path)
    except (OSError, ValueError) as e:
        raise IoFailure(f"cannot read {path}: {e}") from e


def write_method_comparison(out, fmt="csv"):
    """
    Merge the per-feature score tables found in `out` into one long table
    (method, feature, r). Hand-crafted baselines appear as
    ``handcrafted:<extractor>``.
    """
    frames = []
    for method, name in SCORE_TABLES.items():
        path = output_path(out, name, fmt)
        if path.is_file():
            frame = _read_output(path, fmt).reindex(columns=["feature", "r"])
            frames.append(frame.assign(method=method)[["method", "feature", "r"]])
    path = output_path(out, "baselines", fmt)
    if path.is_file():
        frame = _read_output(path, fmt)
        frame["method"] = "handcrafted:" + frame["extractor"].astype(str)

        frames.append(frame[["method", "feature", "r"]])
    if not frames:
        return None
    table = pd.concat(frames, ignore_index=True)
    return write_table(table, output_path(out, "method_comparison", fmt), fmt)


def _network_config(args):
    return neuralnet.NetworkConfig(
        input_size=args.input_size,
        embedding_dim=args.embedding_dim,
        n_tags=args.n_tags,
    )


def _train_config(args, freeze=False):
    return neuralnet.TrainConfig(
        batch_size=args.batch_size,
        epochs=args.epochs,
        learning_rate=args.learning_rate,
        freeze_backbone=freeze,
        seed=args.seed,
        patience=args.patience,
    )


def _load_net(args):
    if not args.checkpoint:
        raise MissingCheckpoint(f"stage '{args.stage}' needs --checkpoint")
    return neuralnet.load_checkpoint(resolve_input(args.checkpoint))


def _audio_patches(paths, size, rng, quiet):
    patches = []
    for path in tqdm(paths, desc="patches", unit="clip", disable=quiet):
        patch = clip_to_patch(load_wav(path), size, offset="random", seed=rng)
        patches.append(patch.values)
    return np.stack(patches)[:, None]


def _tag_data(args, rng):
    if args.synthetic:
        return neuralnet.synthetic_tag_dataset(
            args.synthetic, args.input_size, args.n_tags, args.seed
        )
    (path,) = _inputs(args)[:1]
    frame = dataset_io.read_table(path)
    if "audio_path" not in frame.columns:
        raise ConfigError(f"{path} needs an audio_path column for training")
    manifest = dataset_io.load_tag_manifest(path, args.min_tag_count)
    audio = dict(zip(frame["song_id"], frame["audio_path"]))
    paths = [resolve_input(audio[s]) for s in manifest.song_ids]
    return _audio_patches(paths, args.input_size, rng, args.quiet), manifest.matrix


def _midlevel_data(args, rng):
    """(patches, [n x 7] targets, group per song) for transfer and fine-tuning."""
    if args.synthetic:
        patches, targets = neuralnet.synthetic_midlevel_dataset(
            args.synthetic, args.input_size, args.seed
        )
        return patches, targets, list(range(len(targets)))
    (path,) = _inputs(args)[:1]
    if not args.manifest:
        raise NoInputs("training on annotations needs --manifest with audio paths")
    midlevel, _ = _midlevel(path)
    manifest = dataset_io.load_song_manifest(resolve_input(args.manifest))
    entries = {e.song_id: e for e in manifest.records if e.audio_path}
    songs = [s for s in midlevel.index if s in entries]
    if not songs:
        raise InsufficientOverlap("no annotated song has an audio path in the manifest")
    paths = [resolve_input(entries[s].audio_path) for s in songs]
    patches = _audio_patches(paths, args.input_size, rng, args.quiet)
    groups = [entries[s].artist_id for s in songs]
    return patches, midlevel.loc[songs].to_numpy(), groups


def _stage_pretrain(args, rng):
    patches, tags = _tag_data(args, rng)
    config = _network_config(args)
    config = neuralnet.NetworkConfig(**{**config.to_dict(), "n_tags": tags.shape[1]})
    net = neuralnet.build_network(config, args.seed)
    result = neuralnet.train_tags(
        net, patches, tags, _train_config(args), holdout=args.holdout
    )
    neuralnet.save_checkpoint(net, output_path(args.out, "pretrain.ckpt"))
    neuralnet.write_metrics(
        result.metrics, output_path(args.out, "pretrain_metrics.csv")
    )
    aucs = [(j, a) for j, a in enumerate(result.tag_auc) if a is not None]
    if aucs:
        best, worst = max(aucs, key=lambda t: t[1]), min(aucs, key=lambda t: t[1])
        logger.info(
            f"Held-out AUC {result.mean_auc:.3f} (best tag {best[0]}: {best[1]:.3f}, "
            f"worst tag {worst[0]}: {worst[1]:.3f})"
        )
    return EXIT_OK


def _stage_embed(args, rng):
    net = _load_net(args)
    if args.synthetic:
        patches, _ = neuralnet.synthetic_tag_dataset(
            args.synthetic, net.config.input_size, 4, args.seed
        )
        ids = [str(i) for i in range(len(patches))]
    else:
        manifest = dataset_io.load_song_manifest(_inputs(args)[0])
        entries = [e for e in manifest.records if e.audio_path]
        ids = [e.song_id for e in entries]
        paths = [resolve_input(e.audio_path) for e in entries]
        patches = _audio_patches(paths, net.config.input_size, rng, args.quiet)
    emb = net.embed(patches)
    frame = pd.DataFrame(emb, columns=[f"e{j}" for j in range(emb.shape[1])])
    frame.insert(0, "song_id", ids)
    write_table(frame, output_path(args.out, "embeddings", args.format), args.format)
    return EXIT_OK


def _splits(groups, seed):
    ids = list(range(len(groups)))
    split = statmodels.grouped_split(ids, groups, 0.08, seed)
    train, val = statmodels.validation_split(split.train, 0.02, seed)
    return train, val, split.test


def _stage_transfer(args, rng):
    net = _load_net(args)
    args.input_size = net.config.input_size
    patches, targets, groups = _midlevel_data(args, rng)
    train, val, test = _splits(groups, args.seed)
    result = neuralnet.transfer_regression(
        net, patches, targets, train, val, test, args.n_components
    )
    frame = pd.DataFrame(
        [{"feature": k.value, "r": v} for k, v in result.scores.items()]
    )
    write_table(frame, output_path(args.out, "transfer", args.format), args.format)
    return EXIT_OK


def _stage_finetune(args, rng):
    net = _load_net(args)
    if "midlevel" not in net.heads:
        neuralnet.attach_midlevel_head(net, args.seed)
    return _fit_midlevel(args, rng, net, "finetune", (1, 2))


def _stage_scratch(args, rng):
    """Same architecture and splits as fine-tuning, no pre-training."""
    net = neuralnet.build_network(_network_config(args), args.seed)
    neuralnet.attach_midlevel_head(net, args.seed)
    return _fit_midlevel(args, rng, net, "scratch", (2,))


def _fit_midlevel(args, rng, net, name, stages):
    args.input_size = net.config.input_size
    patches, targets, groups = _midlevel_data(args, rng)
    train, val, test = _splits(groups, args.seed)
    result = neuralnet.finetune(
        net,
        patches[train],
        targets[train],
        _train_config(args),
        val_patches=patches[val],
        val_targets=targets[val],
        stages=stages,
    )
    neuralnet.save_checkpoint(net, output_path(args.out, f"{name}.ckpt"))
    metrics_path = output_path(args.out, f"{name}_metrics.csv")
    neuralnet.write_metrics(result.metrics, metrics_path)

    preds = net.forward(patches[test], "midlevel").output
    try:
        scores = statmodels.midlevel_scores(preds, targets[test])
    except MidlevelError as e:
        logger.warning(f"No test correlations: {e}")
        scores = {}
    frame = pd.DataFrame(
        [{"feature": k.value, "r": v} for k, v in scores.items()],
        columns=["feature", "r"],
    )
    out = output_path(args.out, SCORE_TABLES[name], args.format)
    write_table(frame, out, args.format)
    return EXIT_OK


def _stage_gradcheck(args, rng):
    if args.checkpoint:
        net = _load_net(args)
    else:
        config = neuralnet.NetworkConfig(
            input_size=8,
            conv_channels=(2, 2, 2, 2, 2),
            inception=((1, 1, 1, 1),),
            embedding_dim=4,
            n_tags=3,
        )
        net = neuralnet.build_network(config, args.seed)
    size = net.config.input_size
    x = rng.random((2, net.config.in_channels, size, size))
    head = "midlevel" if "midlevel" in net.heads else "tags"
    result = neuralnet.gradient_check(
        net, x, head, n_params_sampled=args.n_params, seed=args.seed
    )
    print(
        f"max relative error {result.max_relative_error:.3e} over "
        f"{result.n_checked} parameters ({result.n_kinks_skipped} skipped at kinks)"
    )
    return EXIT_OK if result.max_relative_error < GRADCHECK_TOLERANCE else EXIT_PARTIAL


def cmd_train(args):
    """Run one stage of the network pipeline."""
    rng = np.random.default_rng(args.seed)
    stage = {
        "pretrain": _stage_pretrain,
        "embed": _stage_embed,
        "transfer": _stage_transfer,
        "finetune": _stage_finetune,
        "scratch": _stage_scratch,
        "gradcheck": _stage_gradcheck,
    }[args.stage]
    status = stage(args, rng)
    if args.stage in SCORE_TABLES:
        write_method_comparison(args.out, args.format)
    write_config_echo(_run_config(args), args.out)
    return status


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--input", action="append", help="input file or directory (repeatable)"
    )
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="YAML file with option defaults")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument(
        "--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR")
    )
    common.add_argument("--quiet", action="store_true", help="hide progress bars")

    p = argparse.ArgumentParser(prog="midlevel-features")
    p.add_argument("--run-tests", action="store_true")
    sub = p.add_subparsers(dest="command")
    parsers = {}

    s = sub.add_parser(
        "extract", parents=[common], help="hand-crafted features from WAV files"
    )
    s.add_argument("--jobs", type=int, default=4)
    s.set_defaults(handler=cmd_extract)
    parsers["extract"] = s

    s = sub.add_parser(
        "reliability", parents=[common], help="Cronbach's alpha and worker screening"
    )
    s.add_argument("--golden", help="averaged annotations used as the golden standard")
    s.add_argument("--n-raters", type=int, default=5)
    s.add_argument("--tau-dev", type=float, default=annotation.TAU_DEV)
    s.add_argument("--tau-std", type=float, default=annotation.TAU_STD)
    s.set_defaults(handler=cmd_reliability)
    parsers["reliability"] = s

    s = sub.add_parser(
        "emotion", parents=[common], help="emotion dimensions from mid-level features"
    )
    s.add_argument("--targets", help="emotion target CSV")
    s.add_argument("--folds", type=int, default=10)
    s.set_defaults(handler=cmd_emotion)
    parsers["emotion"] = s

    s = sub.add_parser(
        "clusters", parents=[common], help="mood clusters from mid-level features"
    )
    s.add_argument("--labels", help="cluster label CSV")
    s.add_argument("--folds", type=int, default=10)
    s.set_defaults(handler=cmd_clusters)
    parsers["clusters"] = s

    s = sub.add_parser(
        "baselines", parents=[common], help="extractors vs perceived features"
    )
    s.add_argument("--midlevel", help="averaged or raw annotation CSV")
    s.set_defaults(handler=cmd_baselines)
    parsers["baselines"] = s

    s = sub.add_parser("train", parents=[common], help="network pipeline stages")
    s.add_argument("--stage", choices=TRAIN_STAGES, required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--manifest", help="song manifest with audio paths")
    s.add_argument(
        "--synthetic",
        type=int,
        default=0,
        help="use N synthetic patches instead of audio",
    )
    s.add_argument("--epochs", type=int, default=29)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--learning-rate", type=float, default=1e-3)
    s.add_argument("--patience", type=int, default=5)
    s.add_argument("--holdout", type=float, default=0.05)
    s.add_argument("--input-size", type=int, default=64)
    s.add_argument("--embedding-dim", type=int, default=128)
    s.add_argument("--n-tags", type=int, default=4)
    s.add_argument("--min-tag-count", type=int, default=3000)
    s.add_argument("--n-components", type=int, default=30)
    s.add_argument("--n-params", type=int, default=200)
    s.set_defaults(handler=cmd_train)
    parsers["train"] = s

    s = sub.add_parser(
        "fetch", parents=[common], help="download the released annotations"
    )
    s.add_argument("--url", default=dataset_io.DEFAULT_ARCHIVE_URL)
    s.add_argument("--dest", default="midlevel_archive.zip")
    s.add_argument("--sha256")
    s.set_defaults(handler=cmd_fetch)
    parsers["fetch"] = s
    return p, parsers


def _apply_config(parser, subparser, argv, args):
    values = load_config_file(resolve_input(args.config))
    known = {a.dest for a in subparser._actions}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if args.input and "input" in values:
        # --input flags replace the file's list instead of extending it
        del values["input"]
    elif isinstance(values.get("input"), str):
        values["input"] = [values["input"]]
    subparser.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv=None):
    parser, parsers = build_parser()
    args = parser.parse_args(argv)

    if args.run_tests:
        import pytest

        return pytest.main(["--maxfail=1", "--disable-warnings", "--cov=src"])
    if not args.command:
        parser.print_help()
        return EXIT_FATAL

    logging.basicConfig(
        level=getattr(logging, args.log_level), format="%(levelname)s: %(message)s"
    )
    logging.getLogger().setLevel(getattr(logging, args.log_level))
    try:
        if args.config:
            args = _apply_config(parser, parsers[args.command], argv, args)
        return args.handler(args)
    except MidlevelError as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
