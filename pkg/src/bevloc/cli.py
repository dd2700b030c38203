"""Sub-command handlers.

Every handler takes the parsed arguments and the run configuration, writes
its machine-readable output files, prints a short summary table and returns
the exit status: 0 when every item succeeded, 1 when any item failed, 2 for
usage errors.
"""

import argparse
import csv
import logging
from collections.abc import Callable
from pathlib import Path

import numpy as np
from rich.console import Console
from rich.table import Table

from .bev import Channel, encode, export_image
from .cloud_io import DatasetManifest, load_cloud, load_manifest, save_trajectory
from .config import Configuration, RunConfig
from .covis import Label, label_pairs, label_queries, read_labels_csv, write_labels_csv
from .exceptions import BevLocError, ConfigurationError, EvaluationError
from .features import FeatureSet, export_embeddings, import_embeddings, lazy_triplet_loss
from .pipeline import (
    LocalizationPipeline,
    aggregate_success,
    detect_loop_closures,
    encode_entry,
    write_records_csv,
)
from .pose_graph import graph_from_trajectory, optimize, read_g2o, write_g2o
from .retrieval import (
    DescriptorIndex,
    evaluate,
    load_index,
    positives_from_labels,
    query,
    save_index,
    write_report,
)
from .synth import make_benchmark

logger: logging.Logger = logging.getLogger(name=__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
_CLOUD_SUFFIXES = {".bin", ".csv"}

Handler = Callable[[argparse.Namespace, RunConfig, Console], int]


def _status(errors: int) -> int:
    return EXIT_ERROR if errors else EXIT_OK


def _summary(title: str, rows: list[tuple[str, str]]) -> Table:
    table = Table(title=title, show_header=False)
    table.add_column("item", style="cyan")
    table.add_column("value", justify="right")
    for name, value in rows:
        table.add_row(name, value)
    return table


def _features_by_entry(
    manifest: DatasetManifest, run_config: RunConfig
) -> tuple[dict[int, FeatureSet], dict[int, str]]:
    """Extract features for every entry; failures are logged and returned by index."""
    backend = run_config.make_backend()
    features: dict[int, FeatureSet] = {}
    failures: dict[int, str] = {}
    for k, entry in enumerate(manifest.entries):
        try:
            features[k] = encode_entry(entry, run_config, backend).features
        except BevLocError as err:
            logger.warning(msg=f"Skipping {entry.name}: {err}")
            failures[k] = f"{type(err).__name__}: {err}"
    return features, failures


def cmd_encode(args: argparse.Namespace, run_config: RunConfig, console: Console) -> int:
    """Write spatial and intensity images for a cloud file or every cloud of a manifest."""
    source = Path(args.input)
    output = Path(args.output)
    if source.suffix.lower() in _CLOUD_SUFFIXES:
        items = [(source.stem, lambda: load_cloud(source))]
    else:
        manifest = load_manifest(source, check_files=False)
        items = [(entry.name, entry.load) for entry in manifest.entries]

    table = Table(title="BEV encoding")
    for column in ("cloud", "occupied", "cropped", "status"):
        table.add_column(column)
    errors = 0
    for name, load in items:
        try:
            bev = encode(load(), run_config.bev)
            for channel in Channel:
                export_image(bev, output / f"{name}_{channel.value}.{args.format}", channel)
            table.add_row(name, str(int(bev.occupancy.sum())), str(bev.cropped), "ok")
        except BevLocError as err:
            errors += 1
            logger.warning(msg=f"Encoding {name} failed: {err}")
            table.add_row(name, "-", "-", f"[red]{type(err).__name__}[/red]")
    console.print(table)
    return _status(errors)


def cmd_label(args: argparse.Namespace, run_config: RunConfig, console: Console) -> int:
    """Co-visibility labels within one manifest or across query and database manifests."""
    database = load_manifest(args.manifest, check_files=False)
    thresholds = {
        "positive_iou": run_config.positive_iou,
        "negative_iou": run_config.negative_iou,
        "positive_distance": run_config.positive_distance,
        "workers": run_config.workers,
    }
    if args.queries:
        queries = load_manifest(args.queries, check_files=False)
        labels = label_queries(queries, database, run_config.label_mode, **thresholds)
    else:
        labels = label_pairs(database, run_config.label_mode, **thresholds)
    write_labels_csv(labels, args.output)
    console.print(
        _summary(
            f"Labels ({run_config.label_mode.value})",
            [
                ("pairs", str(len(labels))),
                ("positive", str(labels.count(Label.POSITIVE))),
                ("negative", str(labels.count(Label.NEGATIVE))),
                ("ignored", str(labels.count(Label.IGNORE))),
                ("excluded entries", str(len(labels.excluded))),
            ],
        )
    )
    return EXIT_OK


def cmd_extract(args: argparse.Namespace, run_config: RunConfig, console: Console) -> int:
    """Export every entry's features to an embedding archive."""
    manifest = load_manifest(args.manifest, check_files=False)
    features, failures = _features_by_entry(manifest, run_config)
    export_embeddings(args.output, {manifest.entries[k].name: fs for k, fs in features.items()})
    console.print(
        _summary("Feature export", [("exported", str(len(features))), ("failed", str(len(failures)))])
    )
    return _status(len(failures))


def cmd_index(args: argparse.Namespace, run_config: RunConfig, console: Console) -> int:
    """Build and save the global descriptor index of a database manifest."""
    manifest = load_manifest(args.manifest, check_files=False)
    features, failures = _features_by_entry(manifest, run_config)
    index = DescriptorIndex.build(
        {k: fs.global_descriptor for k, fs in features.items()},
        [manifest.entries[k].name for k in sorted(features)],
    )
    save_index(index, args.output)
    console.print(_summary("Descriptor index", [("indexed", str(len(index))), ("failed", str(len(failures)))]))
    return _status(len(failures))


def cmd_query(args: argparse.Namespace, run_config: RunConfig, console: Console) -> int:
    """Top-k database neighbours of every query as ``query,rank,database,id,distance`` rows."""
    index = load_index(args.index)
    queries = load_manifest(args.queries, check_files=False)
    if not queries.entries:
        console.print("[red]No queries given[/red]")
        return EXIT_USAGE
    features, failures = _features_by_entry(queries, run_config)
    output = Path(args.output)
    output.parent.mkdir(parents=True, exist_ok=True)
    with output.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["query", "rank", "database", "id", "distance", "error"])
        for k, entry in enumerate(queries.entries):
            if k in failures:
                writer.writerow([entry.name, "", "", "", "", failures[k]])
                continue
            for rank, hit in enumerate(query(index, features[k].global_descriptor, run_config.k), start=1):
                writer.writerow([entry.name, rank, index.name_of(hit.id), hit.id, f"{hit.distance:.17g}", ""])
    console.print(_summary("Retrieval", [("queries", str(len(queries))), ("failed", str(len(failures)))]))
    return _status(len(failures))


def cmd_localize(args: argparse.Namespace, run_config: RunConfig, console: Console) -> int:
    """Retrieve and register every query, then score it against its ground-truth pose."""
    database = load_manifest(args.database, check_files=False)
    queries = load_manifest(args.queries, check_files=False)
    if not queries.entries:
        console.print("[red]No queries given[/red]")
        return EXIT_USAGE
    output = Path(args.output)
    with LocalizationPipeline(database, run_config) as pipeline:
        records = pipeline.localize_queries(queries.entries)
        excluded = len(pipeline.excluded)
    summary = aggregate_success(records)
    write_records_csv(records, output / "localization.csv")
    (output / "summary.txt").write_text("\n".join(summary.summary_lines()) + "\n", encoding="utf-8")

    done = [r for r in records if not r.failed]
    mean_pr = float(np.mean([r.retrieval_time for r in done])) if done else 0.0
    mean_gl = float(np.mean([r.registration_time for r in done])) if done else 0.0
    rows = [(line.partition(": ")[0], line.partition(": ")[2]) for line in summary.summary_lines()]
    rows += [
        ("database scans excluded", str(excluded)),
        ("mean retrieval time (s)", f"{mean_pr:.4f}"),
        ("mean registration time (s)", f"{mean_gl:.4f}"),
    ]
    console.print(_summary("Localization", rows))
    return _status(summary.errors + excluded)


def cmd_evaluate(args: argparse.Namespace, run_config: RunConfig, console: Console) -> int:
    """Recall@1, PR curve and average precision of retrieval against co-visibility labels."""
    index = load_index(args.index)
    queries = load_manifest(args.queries, check_files=False)
    if not queries.entries:
        console.print("[red]No queries given[/red]")
        return EXIT_USAGE
    if args.labels:
        labels = read_labels_csv(args.labels)
    elif args.database:
        labels = label_queries(
            queries,
            load_manifest(args.database),
            run_config.label_mode,
            positive_iou=run_config.positive_iou,
            negative_iou=run_config.negative_iou,
            positive_distance=run_config.positive_distance,
            workers=run_config.workers,
        )
    else:
        raise ConfigurationError("evaluate needs --labels or --database")

    known = {int(i) for i in index.ids}
    unknown = sorted({db for (_, db) in labels if db not in known})
    if unknown:
        raise ConfigurationError(f"labels reference database ids missing from the index: {unknown[:5]}")
    unknown_queries = sorted({q for (q, _) in labels if not 0 <= q < len(queries)})
    if unknown_queries:
        raise ConfigurationError(f"labels reference query ids outside the manifest: {unknown_queries[:5]}")

    features, failures = _features_by_entry(queries, run_config)
    descriptors = {k: fs.global_descriptor for k, fs in features.items()}
    positives = positives_from_labels(labels, descriptors)
    positives = {q: wanted for q, wanted in positives.items() if q in descriptors}
    try:
        report = evaluate(index, descriptors, positives, k=run_config.k)
    except EvaluationError as err:
        console.print(f"[red]{err}[/red]")
        return EXIT_ERROR
    Path(args.output).mkdir(parents=True, exist_ok=True)
    write_report(report, args.output, plot=not args.no_plot)
    rows = [(line.partition(": ")[0], line.partition(": ")[2]) for line in report.summary_lines()]
    rows.append(("failed queries", str(len(failures))))
    console.print(_summary("Retrieval evaluation", rows))
    return _status(len(failures))


def cmd_graph_optimize(args: argparse.Namespace, run_config: RunConfig, console: Console) -> int:
    """Optimize a g2o pose graph and write the result."""
    graph = read_g2o(args.graph)
    result = optimize(graph, run_config.graph)
    write_g2o(graph.with_nodes(result.nodes), args.output)
    if args.trajectory:
        save_trajectory(args.trajectory, list(result.nodes))
    if not result.converged:
        console.print("[yellow]Optimization stopped before converging[/yellow]")
    console.print(
        _summary(
            "Pose graph",
            [
                ("nodes", str(len(graph.nodes))),
                ("odometry edges", str(len(graph.odometry))),
                ("loop edges", str(len(graph.loops))),
                ("initial cost", f"{result.initial_cost:.6g}"),
                ("final cost", f"{result.cost:.6g}"),
                ("iterations", str(result.iterations)),
                ("converged", str(result.converged).lower()),
            ],
        )
    )
    return EXIT_OK


def cmd_synth(args: argparse.Namespace, run_config: RunConfig, console: Console) -> int:
    """Generate a desk benchmark."""
    if args.database_scans < 1 or args.query_scans < 1:
        console.print("[red]Scan counts must be at least 1[/red]")
        return EXIT_USAGE
    benchmark = make_benchmark(
        args.output,
        tier=args.tier,
        database_scans=args.database_scans,
        query_scans=args.query_scans,
        seed=run_config.seed,
    )
    console.print(
        _summary(
            f"Synthetic benchmark ({args.tier})",
            [
                ("database manifest", str(benchmark.database)),
                ("query manifest", str(benchmark.queries)),
                ("primitives", str(benchmark.scene.landmarks)),
            ],
        )
    )
    return EXIT_OK


def cmd_loss(args: argparse.Namespace, run_config: RunConfig, console: Console) -> int:
    """Lazy triplet loss of every anchor with a positive and a negative in the labels.

    The positive is the highest-IoU positive partner (lowest index on ties);
    up to ``loss.negatives`` negatives are drawn with the run seed.
    """
    archive = import_embeddings(args.embeddings)
    manifest = load_manifest(args.manifest, check_files=False)
    labels = read_labels_csv(args.labels)
    names = manifest.names
    rng = np.random.default_rng(run_config.seed)

    partners: dict[int, dict[Label, list[tuple[float, int]]]] = {}
    for (i, j), value in labels.items():
        score = value.iou if value.iou is not None else 0.0
        for a, b in ((i, j), (j, i)):
            partners.setdefault(a, {}).setdefault(value.label, []).append((score, b))

    output = Path(args.output)
    output.parent.mkdir(parents=True, exist_ok=True)
    losses: list[float] = []
    errors = 0
    with output.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["anchor", "positive", "negatives", "loss", "error"])
        for anchor in sorted(partners):
            positives = partners[anchor].get(Label.POSITIVE, [])
            negatives = sorted(b for _, b in partners[anchor].get(Label.NEGATIVE, []))
            if not positives or not negatives:
                continue
            positive = min(positives, key=lambda item: (-item[0], item[1]))[1]
            if len(negatives) > run_config.loss.negatives:
                negatives = sorted(rng.choice(negatives, size=run_config.loss.negatives, replace=False).tolist())
            try:
                vectors = [archive[names[k]].global_descriptor for k in (anchor, positive, *negatives)]
                value = lazy_triplet_loss(vectors[0], vectors[1], np.vstack(vectors[2:]), run_config.loss)
            except (KeyError, IndexError) as err:
                errors += 1
                writer.writerow([anchor, positive, len(negatives), "", f"missing embedding: {err}"])
                continue
            losses.append(value)
            writer.writerow([anchor, positive, len(negatives), f"{value:.17g}", ""])
    mean = float(np.mean(losses)) if losses else float("nan")
    console.print(
        _summary("Lazy triplet loss", [("anchors", str(len(losses))), ("mean loss", f"{mean:.6f}"), ("errors", str(errors))])
    )
    return _status(errors)


def cmd_loops(args: argparse.Namespace, run_config: RunConfig, console: Console) -> int:
    """Detect loop closures along a sequence and write odometry plus loop edges as g2o."""
    manifest = load_manifest(args.manifest)
    closures = detect_loop_closures(manifest, run_config)
    graph = graph_from_trajectory(manifest.poses, [(c.i, c.j, c.measurement) for c in closures])
    if args.optimize:
        graph = graph.with_nodes(optimize(graph, run_config.graph).nodes)
    write_g2o(graph, args.output)
    console.print(
        _summary("Loop closures", [("frames", str(len(manifest))), ("loop edges", str(len(closures)))])
    )
    return EXIT_OK


COMMAND_HANDLERS: dict[str, Handler] = {
    "encode": cmd_encode,
    "label": cmd_label,
    "extract": cmd_extract,
    "index": cmd_index,
    "query": cmd_query,
    "localize": cmd_localize,
    "evaluate": cmd_evaluate,
    "graph-optimize": cmd_graph_optimize,
    "synth": cmd_synth,
    "loss": cmd_loss,
    "loops": cmd_loops,
}


def run(configuration: Configuration, console: Console | None = None) -> int:
    """Dispatch the configured sub-command and map module errors to exit codes."""
    console = console or Console()
    handler = COMMAND_HANDLERS[configuration.command]
    try:
        return handler(configuration.args, configuration.run_config, console)
    except ConfigurationError as err:
        logger.error(msg=f"{configuration.command}: {err}")
        console.print(f"[red]Configuration error:[/red] {err}")
        return EXIT_USAGE
    except BevLocError as err:
        logger.error(msg=f"{configuration.command}: {type(err).__name__}: {err}")
        console.print(f"[red]{type(err).__name__}:[/red] {err}")
        return EXIT_ERROR
