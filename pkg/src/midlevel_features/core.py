#!/usr/bin/env python3
"""
Shared plumbing for midlevel-features:
- _retry (exponential backoff for network calls)
- RunConfig, config-file loading and the run_config.json echo
- input path resolution against MIDLEVEL_DATA_DIR
- write_table and Jinja2 text reports
"""
import functools
import json
import logging
import os
import random
import time
import urllib.error
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml
from jinja2 import Environment, FileSystemLoader, StrictUndefined, TemplateError

from midlevel_features.errors import ConfigError, InvalidArgument, IoFailure

logger = logging.getLogger(__name__)

DATA_DIR_ENV = "MIDLEVEL_DATA_DIR"
CONFIG_ECHO_NAME = "run_config.json"
TEMPLATES_DIR = Path(__file__).resolve().parents[2] / "templates"
OUTPUT_FORMATS = ("csv", "json")


def _retry(
    func,
    *args,
    max_retries=3,
    initial_delay=1.0,
    backoff_multiplier=2.0,
    jitter=False,
    **kwargs,
):
    delay = initial_delay
    retryable_exceptions = (urllib.error.URLError, ConnectionError, TimeoutError)
    callable_func = (
        func if not args and not kwargs else functools.partial(func, *args, **kwargs)
    )

    for attempt in range(max_retries + 1):
        try:
            return callable_func()
        except retryable_exceptions as e:
            if attempt == max_retries:
                logger.error(f"Retry failed after {max_retries} attempts: {e}")
                raise
            wait = delay * (1 + random.random()) if jitter else delay
            logger.warning(
                f"{type(e).__name__} on attempt {attempt + 1}/{max_retries}: {e}. Retrying in {wait:.2f}s..."
            )
            time.sleep(wait)
            delay *= backoff_multiplier
            continue
        except Exception as e:
            logger.error(f"Non-retryable exception: {e}")
            raise
    return None


@dataclass(frozen=True)
class RunConfig:
    command: str
    inputs: tuple = ()
    out: str = "."
    seed: int = 0
    fmt: str = "csv"
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.fmt not in OUTPUT_FORMATS:
            raise InvalidArgument(f"unknown output format '{self.fmt}'")

    def to_dict(self):
        data = asdict(self)
        data["inputs"] = [str(p) for p in self.inputs]
        return data


def load_config_file(path):
    """Flat YAML mapping of option names (dashes become underscores)."""
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a key-value mapping")
    flat = {}
    for key, value in data.items():
        if isinstance(value, dict):
            raise ConfigError(
                f"config key '{key}' is nested; only flat mappings are supported"
            )
        flat[str(key).replace("-", "_")] = value
    return flat


def resolve_input(path, data_dir=None):
    """Relative paths missing from the working directory come from MIDLEVEL_DATA_DIR."""

    path = Path(path)
    if path.is_absolute() or path.exists():
        return path
    data_dir = data_dir or os.getenv(DATA_DIR_ENV)
    if data_dir:
        candidate = Path(data_dir) / path
        if candidate.exists():
            logger.debug(f"Resolved {path} under {data_dir}")
            return candidate
    return path


def output_path(out, name, fmt=None):
    """Place `name` (with the format's extension) inside the output directory."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out / (f"{name}.{fmt}" if fmt else name)


def write_config_echo(config, out):
    """Write run_config.json (sorted keys, no timestamps) next to the results."""
    path = output_path(out, CONFIG_ECHO_NAME)
    try:
        text = json.dumps(config.to_dict(), indent=2, sort_keys=True, default=str)
        path.write_text(text + "\n", encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e
    return path


def write_table(frame, path, fmt="csv"):
    """CSV without index or JSON array of records; floats keep their repr."""
    try:
        if fmt == "json":
            text = frame.to_json(orient="records", indent=2, double_precision=15)
            Path(path).write_text(text + "\n", encoding="utf-8")
        else:
            frame.to_csv(path, index=False, float_format="%.10g")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e
    return path


@functools.lru_cache(maxsize=1)
def _environment(templates_dir):
    env = Environment(
        loader=FileSystemLoader(templates_dir),
        undefined=StrictUndefined,
        trim_blocks=True,
        lstrip_blocks=True,
        keep_trailing_newline=True,
    )
    env.filters["num"] = _format_number
    return env


def _format_number(value, digits=2):
    if value is None or (isinstance(value, float) and value != value):
        return "-"
    return f"{value:.{digits}f}"


def render_report(template_name, templates_dir=TEMPLATES_DIR, **context):
    try:
        template = _environment(str(templates_dir)).get_template(template_name)
        return template.render(**context)

    except TemplateError as e:
        logger.warning(f"Report template error ({e}); skipping text report")
        return ""


def write_report(text, out, name):
    if not text:
        return None
    path = output_path(out, f"{name}.txt")
    path.write_text(text, encoding="utf-8")
    return path
