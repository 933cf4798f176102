"""Plain-text key-value configuration.

Run configs are flat files of dotted keys:

    seed = 7
    slides = runs/slides
    output = runs/out
    policy = oracle
    nav.K = 20
    nav.delta = 0.01
    cache.path = runs/cache.jsonl
    cache.frozen = true

Values parse as int, float, or bool when they look like one, else strings.
Dotted keys nest ("nav.K" lands in tree["nav"]["K"]).
"""

from __future__ import annotations

from pathlib import Path

from pathnav.errors import ConfigError


def _parse_value(raw: str):
    v = raw.strip()
    if v.lower() in ("true", "yes"):
        return True
    if v.lower() in ("false", "no"):
        return False
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        pass
    return v


def parse_config_text(text: str) -> dict:
    tree: dict = {}
    for ln, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {ln}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {ln}: empty key")
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"line {ln}: key {key!r} conflicts with a scalar")
        node[parts[-1]] = _parse_value(raw)
    return tree


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"))


def cfg_get(tree: dict, dotted: str, default=None):
    node = tree
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            return default
        node = node[part]
    return node


def flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out
