"""Sectioned key=value config files, parsed in-repo.

Format:
    # comment
    [section]
    key = value
    list_key = 0.1, 0.2, 0.3

Values are kept as strings; typed accessors convert on demand.
"""

from __future__ import annotations

from .errors import ConfigError

__all__ = ["Config", "parse_config", "load_config"]


class Config:
    def __init__(self, sections: dict[str, dict[str, str]] | None = None):
        self.sections: dict[str, dict[str, str]] = sections or {}

    def get(self, section: str, key: str, default=None) -> str | None:
        return self.sections.get(section, {}).get(key, default)

    def require(self, section: str, key: str) -> str:
        v = self.get(section, key)
        if v is None:
            raise ConfigError(f"missing config key [{section}] {key}")
        return v

    def get_int(self, section, key, default=None):
        v = self.get(section, key)
        if v is None:
            return default
        try:
            return int(v)
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {v!r} is not an integer") from None

    def get_float(self, section, key, default=None):
        v = self.get(section, key)
        if v is None:
            return default
        try:
            return float(v)
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {v!r} is not a number") from None

    def get_floats(self, section, key, default=None):
        v = self.get(section, key)
        if v is None:
            return default
        try:
            return [float(x) for x in v.split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {v!r} is not a float list") from None

    def get_bool(self, section, key, default=None):
        v = self.get(section, key)
        if v is None:
            return default
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"[{section}] {key} = {v!r} is not a boolean")

    def set(self, section: str, key: str, value) -> None:
        self.sections.setdefault(section, {})[key] = str(value)

    def merge(self, other: "Config") -> None:
        """Overlay other onto self (other wins)."""
        for sec, kv in other.sections.items():
            for k, v in kv.items():
                self.set(sec, k, v)

    def dump(self) -> str:
        lines = []
        for sec in sorted(self.sections):
            lines.append(f"[{sec}]")
            for k in sorted(self.sections[sec]):
                lines.append(f"{k} = {self.sections[sec][k]}")
            lines.append("")
        return "\n".join(lines)


def parse_config(text: str) -> Config:
    cfg = Config()
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not section:
                raise ConfigError(f"line {lineno}: empty section name")
            cfg.sections.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, _, value = line.partition("=")
        cfg.sections[section][key.strip()] = value.strip()
    return cfg


def load_config(path) -> Config:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return parse_config(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
