"""Plain-text configuration: one "dotted.key: value" per line.

Blank lines and #-comments are allowed. Values stay strings until read
through a typed accessor, so unknown keys survive a round trip.
"""

from typing import Dict, Optional


class ConfigError(ValueError):
    pass


_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


class Config:
    def __init__(self, entries: Optional[Dict[str, str]] = None):
        self._entries: Dict[str, str] = dict(entries or {})

    # -- parsing ------------------------------------------------------------

    @classmethod
    def parse(cls, text: str) -> "Config":
        entries = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if ":" not in line:
                raise ConfigError(f"line {lineno}: expected 'key: value', "
                                  f"got {raw!r}")
            key, value = line.split(":", 1)
            key = key.strip()
            if not key:
                raise ConfigError(f"line {lineno}: empty key")
            entries[key] = value.strip()
        return cls(entries)

    @classmethod
    def load(cls, path: str) -> "Config":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.parse(fh.read())

    def to_text(self) -> str:
        return "".join(f"{k}: {self._entries[k]}\n"
                       for k in sorted(self._entries))

    # -- access -------------------------------------------------------------

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def keys(self):
        return sorted(self._entries)

    def set(self, key: str, value) -> "Config":
        self._entries[key] = str(value)
        return self

    def get_str(self, key: str, default: Optional[str] = None) -> str:
        if key in self._entries:
            return self._entries[key]
        if default is None:
            raise ConfigError(f"missing required key {key!r}")
        return default

    def get_int(self, key: str, default: Optional[int] = None) -> int:
        raw = self._entries.get(key)
        if raw is None:
            if default is None:
                raise ConfigError(f"missing required key {key!r}")
            return default
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None

    def get_float(self, key: str, default: Optional[float] = None) -> float:
        raw = self._entries.get(key)
        if raw is None:
            if default is None:
                raise ConfigError(f"missing required key {key!r}")
            return default
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None

    def get_bool(self, key: str, default: bool = False) -> bool:
        raw = self._entries.get(key)
        if raw is None:
            return default
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")

    def get_groups(self, key: str):
        """Parse index groups like '0,2;1,3' into [[0, 2], [1, 3]]."""
        raw = self._entries.get(key, "")
        if not raw:
            return []
        groups = []
        for part in raw.split(";"):
            part = part.strip()
            if not part:
                continue
            try:
                groups.append([int(x) for x in part.split(",")])
            except ValueError:
                raise ConfigError(
                    f"{key}: expected integer groups, got {raw!r}") from None
        return groups
