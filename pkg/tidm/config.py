"""``key = value`` configuration files, CLI overrides and the environment default.

Dotted keys address sections (``train.epochs = 10``); list values are comma
separated; ``#`` starts a comment. Section seeds that are not set explicitly
follow the top-level ``seed``.
"""

import logging
import os
from typing import Any, Dict, Iterable, Mapping, Optional

from pydantic import ValidationError

from .errors import InputError
from .models.schemas import AppConfig

logger = logging.getLogger(__name__)

ENV_CONFIG = "TIDM_CONFIG"
SEEDED_SECTIONS = ("codec_train", "train", "dreambooth", "sampler", "probe", "eval")
_NONE_WORDS = {"none", "null", ""}


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Optional[str]]:
    """Flat ``{dotted key: raw value}``; later lines win."""
    values: Dict[str, Optional[str]] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise InputError(f"{source}:{number}: expected 'key = value', got {raw.strip()!r}")
        value = value.strip().strip('"').strip("'")
        values[key] = None if value.lower() in _NONE_WORDS else value
    return values


def read_config_file(path: str) -> Dict[str, Optional[str]]:
    if not os.path.exists(path):
        raise InputError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as handle:
        return parse_config_text(handle.read(), path)


def parse_overrides(items: Iterable[str]) -> Dict[str, Optional[str]]:
    """``--set key=value`` items."""
    return parse_config_text("\n".join(items), "--set")


def nest(flat: Mapping[str, Any]) -> Dict[str, Any]:
    tree: Dict[str, Any] = {}
    for key, value in flat.items():
        parts = key.split(".")
        node = tree
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise InputError(f"config key {key!r} conflicts with the scalar {part!r}")
            node = child
        if isinstance(node.get(parts[-1]), dict):
            raise InputError(f"config key {key!r} names a whole section")
        node[parts[-1]] = value
    return tree


def _validation_message(exc: ValidationError) -> str:
    problems = []
    for error in exc.errors():
        where = ".".join(str(part) for part in error["loc"]) or "config"
        problems.append(f"{where}: {error['msg']}")
    return "; ".join(problems)


def build_config(flat: Mapping[str, Any]) -> AppConfig:
    tree = nest(flat)
    seed = tree.get("seed")
    if seed is not None:
        for section in SEEDED_SECTIONS:
            node = tree.setdefault(section, {})
            if isinstance(node, dict):
                node.setdefault("seed", seed)
    try:
        return AppConfig.model_validate(tree)
    except ValidationError as exc:
        raise InputError(f"invalid configuration: {_validation_message(exc)}") from exc


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> AppConfig:
    """File values (``path`` or ``$TIDM_CONFIG``), then ``overrides`` on top."""
    path = path or os.getenv(ENV_CONFIG)
    flat: Dict[str, Any] = {}
    if path:
        flat.update(read_config_file(path))
        logger.info("Config: loaded %s (%d keys)", path, len(flat))
    for key, value in (overrides or {}).items():
        if value is not None:
            flat[key] = value
    return build_config(flat)


def flatten(config: AppConfig) -> Dict[str, Any]:
    """Dotted view of a config, the inverse of :func:`nest` for manifests."""
    flat: Dict[str, Any] = {}

    def walk(prefix: str, node: Any) -> None:
        if isinstance(node, dict):
            for key, value in node.items():
                walk(f"{prefix}.{key}" if prefix else key, value)
        else:
            flat[prefix] = node

    walk("", config.model_dump(mode="json"))
    return flat
