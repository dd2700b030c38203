"""Configuration module for bevloc."""

import argparse
import logging
import sys
import tomllib
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Any

from .bev import BevConfig
from .covis import LabelMode
from .exceptions import ConfigurationError
from .features import ChannelSet, EmbeddingBackend, FeatureBackend, LossConfig, ReferenceBackend
from .pose_graph import GraphConfig
from .registration import GncConfig, MatchConfig

logger: logging.Logger = logging.getLogger(name=__name__)

# Default configuration content
DEFAULT_CONFIG = """[general]
# Seed for every random choice (scene generation, sampling, noise)
seed = 0
# Worker threads for per-query work
workers = 1
# Number of database feature sets kept in memory
cache_size = 64
# Log directory; empty means ~/.cache/bevloc/logs
log_dir = ""

[bev]
# Meters per pixel and image size in pixels
resolution = 0.4
width = 200
height = 200
# Patch edge in pixels; must divide width and height
patch_size = 8

[features]
# "reference" (built-in extractor) or "embeddings" (imported archive)
backend = "reference"
embeddings = ""
dimension = 384
projection_seed = 7
# Channels feeding the global descriptor: both, spatial or intensity
channels = "both"

[loss]
margin = 0.3
alpha = 0.125
negatives = 18

[matching]
max_keypoints = 512
mutual = true
# Best / second-best distance cap; 1.0 disables
ratio = 0.95
# Candidates kept by a keypoint that fails the ratio check
top_k = 3
# "occupied" (every occupied database pixel) or "keypoints"
candidates = "occupied"
# Keypoint non-maximum suppression radius in pixels
suppression = 2
channels = "both"
# Pairwise length tolerance (m) of the pruning before GNC; 0 disables
consistency = 1.0

[gnc]
# TLS truncation in meters
truncation = 0.5
growth = 1.4
max_iterations = 100
tolerance = 1e-6
min_inliers = 10

[retrieval]
# "iou" (co-visibility) or "distance" positives
mode = "iou"
k = 1
positive_iou = 0.25
negative_iou = 0.2
positive_distance = 5.0

[pose_graph]
max_iterations = 100
tolerance = 1e-10
huber = false
huber_delta = 1.0

[loops]
# Frames between a query and its oldest candidate
min_separation = 10
max_descriptor_distance = 1.0
"""

DEFAULTS: dict[str, dict[str, Any]] = tomllib.loads(DEFAULT_CONFIG)
COMMANDS = (
    "encode",
    "label",
    "extract",
    "index",
    "query",
    "localize",
    "evaluate",
    "graph-optimize",
    "synth",
    "loss",
    "loops",
)


def parse_override(text: str) -> tuple[str, str, Any]:
    """Split ``section.key=value``; the value is read as a TOML scalar, else kept as text.

    Raises:
        ConfigurationError: Malformed override
    """
    name, sep, raw = text.partition("=")
    section, dot, key = name.strip().partition(".")
    if not sep or not dot or not section or not key:
        raise ConfigurationError(f"override {text!r} is not of the form section.key=value")
    try:
        value = tomllib.loads(f"value = {raw.strip()}")["value"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return section, key, value


def merge_config(
    base: Mapping[str, Mapping[str, Any]], *layers: Mapping[str, Mapping[str, Any]]
) -> dict[str, dict[str, Any]]:
    """Overlay ``layers`` on ``base``; unknown sections or keys are errors.

    Raises:
        ConfigurationError: A layer names a section or key missing from ``base``
    """
    merged = {section: dict(values) for section, values in base.items()}
    for layer in layers:
        for section, values in layer.items():
            if section not in merged:
                raise ConfigurationError(f"unknown configuration section [{section}]")
            if not isinstance(values, Mapping):
                raise ConfigurationError(f"[{section}] must be a table")
            for key, value in values.items():
                if key not in merged[section]:
                    raise ConfigurationError(f"unknown configuration key {section}.{key}")
                merged[section][key] = value
    return merged


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of a run, assembled from defaults, the config file and flags."""

    command: str = ""
    bev: BevConfig = field(default_factory=BevConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    matching: MatchConfig = field(default_factory=MatchConfig)
    gnc: GncConfig = field(default_factory=GncConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    backend: str = "reference"
    embeddings: Path | None = None
    dimension: int = 384
    projection_seed: int = 7
    feature_channels: ChannelSet = ChannelSet.BOTH
    label_mode: LabelMode = LabelMode.IOU
    k: int = 1
    positive_iou: float = 0.25
    negative_iou: float = 0.2
    positive_distance: float = 5.0
    min_separation: int = 10
    max_descriptor_distance: float = 1.0
    seed: int = 0
    workers: int = 1
    cache_size: int = 64
    log_dir: Path | None = None

    @classmethod
    def from_mapping(cls, config: Mapping[str, Mapping[str, Any]], command: str = "") -> "RunConfig":
        """Build from a full (merged) configuration mapping.

        Raises:
            ConfigurationError: A value has the wrong type or range
        """
        general, features, retrieval, loops = (
            config["general"],
            config["features"],
            config["retrieval"],
            config["loops"],
        )
        try:
            return cls(
                command=command,
                bev=BevConfig(**config["bev"]),
                loss=LossConfig(**config["loss"]),
                matching=MatchConfig(**config["matching"]),
                gnc=GncConfig(**config["gnc"]),
                graph=GraphConfig(**config["pose_graph"]),
                backend=str(features["backend"]),
                embeddings=Path(features["embeddings"]).expanduser() if features["embeddings"] else None,
                dimension=int(features["dimension"]),
                projection_seed=int(features["projection_seed"]),
                feature_channels=ChannelSet(features["channels"]),
                label_mode=LabelMode(retrieval["mode"]),
                k=int(retrieval["k"]),
                positive_iou=float(retrieval["positive_iou"]),
                negative_iou=float(retrieval["negative_iou"]),
                positive_distance=float(retrieval["positive_distance"]),
                min_separation=int(loops["min_separation"]),
                max_descriptor_distance=float(loops["max_descriptor_distance"]),
                seed=int(general["seed"]),
                workers=int(general["workers"]),
                cache_size=int(general["cache_size"]),
                log_dir=Path(general["log_dir"]).expanduser() if general["log_dir"] else None,
            )
        except (TypeError, ValueError) as err:
            raise ConfigurationError(f"invalid configuration value: {err}") from err

    def validate(self) -> "RunConfig":
        """Check cross-field consistency.

        Returns:
            The config itself, for chaining.

        Raises:
            ConfigurationError: Inconsistent settings
        """
        if self.backend not in {"reference", "embeddings"}:
            raise ConfigurationError(f"features.backend must be 'reference' or 'embeddings', got {self.backend!r}")
        if self.backend == "embeddings" and self.embeddings is None:
            raise ConfigurationError("features.backend = 'embeddings' requires features.embeddings")
        if self.workers < 1:
            raise ConfigurationError(f"general.workers must be at least 1, got {self.workers}")
        if self.cache_size < 1:
            raise ConfigurationError(f"general.cache_size must be at least 1, got {self.cache_size}")
        if self.k < 1:
            raise ConfigurationError(f"retrieval.k must be at least 1, got {self.k}")
        if self.dimension < 1:
            raise ConfigurationError(f"features.dimension must be at least 1, got {self.dimension}")
        if not 0.0 <= self.negative_iou <= self.positive_iou <= 1.0:
            raise ConfigurationError("retrieval thresholds must satisfy 0 <= negative_iou <= positive_iou <= 1")
        if not self.positive_distance > 0:
            raise ConfigurationError("retrieval.positive_distance must be positive")
        if self.min_separation < 1:
            raise ConfigurationError("loops.min_separation must be at least 1")
        return self

    def make_backend(self) -> FeatureBackend:
        """Instantiate the configured feature backend."""
        if self.backend == "embeddings" and self.embeddings is not None:
            backend: FeatureBackend = EmbeddingBackend.from_file(self.embeddings)
        else:
            backend = ReferenceBackend(
                dimension=self.dimension,
                patch_size=self.bev.patch_size,
                seed=self.projection_seed,
                channels=self.feature_channels,
            )
        return backend


def _add_command_arguments(subparsers: argparse._SubParsersAction) -> None:
    encode = subparsers.add_parser("encode", help="Write spatial and intensity BEV images")
    encode.add_argument("input", help="Cloud file or manifest")
    encode.add_argument("--output", required=True, help="Output directory")
    encode.add_argument("--format", choices=("png", "pgm"), default="png")

    label = subparsers.add_parser("label", help="Co-visibility labels for scan pairs")
    label.add_argument("manifest", help="Database manifest")
    label.add_argument("--queries", help="Query manifest; labels query x database pairs")
    label.add_argument("--output", required=True, help="Labels CSV")

    extract = subparsers.add_parser("extract", help="Export features to an embedding archive")
    extract.add_argument("manifest")
    extract.add_argument("--output", required=True, help="Embedding archive")

    index = subparsers.add_parser("index", help="Build a global descriptor index")
    index.add_argument("manifest")
    index.add_argument("--output", required=True, help="Index CSV")

    query = subparsers.add_parser("query", help="Retrieve database neighbours for each query")
    query.add_argument("index", help="Index CSV")
    query.add_argument("queries", help="Query manifest")
    query.add_argument("--output", required=True, help="Results CSV")

    localize = subparsers.add_parser("localize", help="Retrieve and register every query")
    localize.add_argument("database", help="Database manifest")
    localize.add_argument("queries", help="Query manifest")
    localize.add_argument("--output", required=True, help="Output directory")

    evaluate = subparsers.add_parser("evaluate", help="Recall, precision and PR curve of retrieval")
    evaluate.add_argument("index", help="Index CSV")
    evaluate.add_argument("queries", help="Query manifest")
    evaluate.add_argument("--database", help="Database manifest used to derive labels")
    evaluate.add_argument("--labels", help="Labels CSV from the label command")
    evaluate.add_argument("--output", required=True, help="Report directory")
    evaluate.add_argument("--no-plot", action="store_true", default=False, help="Skip the SVG")

    graph = subparsers.add_parser("graph-optimize", help="Optimize a g2o pose graph")
    graph.add_argument("graph", help="Input g2o file")
    graph.add_argument("--output", required=True, help="Optimized g2o file")
    graph.add_argument("--trajectory", help="Also write optimized poses in manifest pose format")

    synth = subparsers.add_parser("synth", help="Generate a synthetic desk benchmark")
    synth.add_argument("--output", required=True, help="Output directory")
    synth.add_argument("--tier", choices=("easy", "fov"), default="easy")
    synth.add_argument("--database-scans", type=int, default=50)
    synth.add_argument("--query-scans", type=int, default=50)

    loss = subparsers.add_parser("loss", help="Lazy triplet loss over an embedding archive")
    loss.add_argument("embeddings", help="Embedding archive")
    loss.add_argument("labels", help="Labels CSV over the archive's manifest")
    loss.add_argument("manifest", help="Manifest whose order the labels index")
    loss.add_argument("--output", required=True, help="Per-anchor loss CSV")

    loops = subparsers.add_parser("loops", help="Detect loop closures and write a pose graph")
    loops.add_argument("manifest", help="Sequence manifest; its poses act as odometry")
    loops.add_argument("--output", required=True, help="g2o file")
    loops.add_argument("--optimize", action="store_true", default=False, help="Optimize before writing")


def build_parser() -> argparse.ArgumentParser:
    """Argument parser for every sub-command."""
    arg_parser = argparse.ArgumentParser(
        prog="bevloc",
        description="LiDAR global localization from bird's-eye-view images.",
    )
    arg_parser.add_argument("--config", dest="config", help="Path to the config file", default=None)
    arg_parser.add_argument(
        "--create-config",
        dest="create_config",
        help="Create a default configuration file at the specified path",
        metavar="PATH",
    )
    arg_parser.add_argument(
        "--version", action="store_true", dest="version", help="Show version and exit", default=False
    )
    arg_parser.add_argument(
        "--debug", action="store_true", dest="debug", help="Enable debug logging", default=False
    )
    arg_parser.add_argument(
        "--info", action="store_true", dest="info", help="Enable info logging", default=False
    )
    arg_parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one configuration key (repeatable)",
    )
    arg_parser.add_argument("--seed", type=int, default=None, help="Override general.seed")
    arg_parser.add_argument("--workers", type=int, default=None, help="Override general.workers")
    subparsers = arg_parser.add_subparsers(dest="command", metavar="COMMAND")
    _add_command_arguments(subparsers)
    return arg_parser


def setup_logging(log_dir: Path, debug: bool = False, info: bool = False) -> Path:
    """Send log records to ``log_dir/bevloc.log``.

    Returns:
        The log file path.
    """
    log_dir.mkdir(parents=True, exist_ok=True)
    log_file: Path = log_dir / "bevloc.log"
    logging.basicConfig(
        level=logging.WARNING,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[
            logging.FileHandler(filename=log_file, mode="a"),
        ],
    )
    if debug:
        logging.getLogger("bevloc").setLevel(level=logging.DEBUG)
        logger.debug(msg="Debug log enabled")
    elif info:
        logging.getLogger("bevloc").setLevel(level=logging.INFO)
        logger.info(msg="Info log enabled")
    return log_file


class Configuration:
    """A class to handle configuration values."""

    DEFAULT_LOCATION: Path = Path.home() / ".config" / "bevloc" / "config.toml"
    DEFAULT_LOG_DIR: Path = Path.home() / ".cache" / "bevloc" / "logs"

    def __init__(self, exec_args: Sequence[str] | None = None) -> None:
        """Initialize the configuration.

        Args:
            exec_args: Command line arguments
        """
        arguments: list[str] = list(sys.argv[1:] if exec_args is None else exec_args)
        arg_parser = build_parser()
        self.args: argparse.Namespace = arg_parser.parse_args(args=arguments)

        # Handle version argument
        if self.args.version:
            try:
                version: str = metadata.version(distribution_name="bevloc")
                print(f"bevloc version: {version}")
                sys.exit(0)
            except metadata.PackageNotFoundError as e:
                print(f"Error getting version: {e}")
                sys.exit(1)

        # Handle create-config argument
        if self.args.create_config:
            self.create_default_config(config_path=self.args.create_config)
            print(f"Created default configuration at: {self.args.create_config}")
            sys.exit(0)

        if self.args.command is None:
            arg_parser.print_usage(sys.stderr)
            print("bevloc: error: a command is required", file=sys.stderr)
            sys.exit(2)

        try:
            self.config: dict[str, dict[str, Any]] = self.load_config(
                config_file=self.args.config, overrides=self.args.overrides
            )
            self.run_config: RunConfig = RunConfig.from_mapping(self.config, self.args.command).validate()
        except ConfigurationError as err:
            print(f"Configuration error: {err}", file=sys.stderr)
            sys.exit(2)

        self.log_file: Path = setup_logging(
            log_dir=self.run_config.log_dir or self.DEFAULT_LOG_DIR,
            debug=self.args.debug,
            info=self.args.info,
        )
        logger.debug(msg=f"Running {self.args.command} with seed {self.run_config.seed}")

    @property
    def command(self) -> str:
        """The selected sub-command."""
        return str(self.args.command)

    def load_config(self, config_file: str | None, overrides: Sequence[str] = ()) -> dict[str, dict[str, Any]]:
        """Merge defaults, the config file, ``--set`` overrides, ``--seed`` and ``--workers``.

        Args:
            config_file: Explicit config path; the user config is used when present otherwise
            overrides: ``section.key=value`` strings

        Returns:
            The merged configuration mapping

        Raises:
            ConfigurationError: Unreadable file or unknown keys
        """
        layers: list[dict[str, dict[str, Any]]] = [self.load_config_file(config_file)]
        flag_layer: dict[str, dict[str, Any]] = {}
        for text in overrides:
            section, key, value = parse_override(text)
            flag_layer.setdefault(section, {})[key] = value
        if self.args.seed is not None:
            flag_layer.setdefault("general", {})["seed"] = self.args.seed
        if self.args.workers is not None:
            flag_layer.setdefault("general", {})["workers"] = self.args.workers
        layers.append(flag_layer)
        return merge_config(DEFAULTS, *layers)

    def load_config_file(self, config_file: str | None) -> dict[str, dict[str, Any]]:
        """Load the configuration from the TOML file.

        Args:
            config_file: Path to the config file, or None for the default location

        Returns:
            Configuration dictionary (empty when no file is used)

        Raises:
            ConfigurationError: The file is missing or not valid TOML
        """
        if config_file is None:
            if not self.DEFAULT_LOCATION.exists():
                return {}
            config_path = self.DEFAULT_LOCATION
        else:
            config_path = Path(config_file)
        try:
            return tomllib.loads(config_path.read_text(encoding="utf-8"))
        except (FileNotFoundError, tomllib.TOMLDecodeError) as err:
            logger.error(msg=f"Error reading configuration file: {err}")
            raise ConfigurationError(f"cannot read configuration file {config_path}: {err}") from err

    def create_default_config(self, config_path: str) -> None:
        """Create a default configuration file at the specified path.

        Args:
            config_path: Path where the configuration file should be created
        """
        path = Path(config_path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(data=DEFAULT_CONFIG, encoding="utf-8")
        except OSError as e:
            logger.error(msg=f"Error writing configuration file: {e}")
            print(f"Error writing configuration file: {e}")
            sys.exit(1)
