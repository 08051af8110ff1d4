"""Line-based run-configuration files.

Format: UTF-8 text, ``#`` starts a comment (whole line or trailing),
``[section]`` headers on their own lines, entries ``key = value``. The four
recognized sections are [mass], [sde], [lattice], [verify]. Values stay raw
strings until a typed getter converts them, so conversion failures can cite
the file position.
"""

from __future__ import annotations

from .errors import ConfigError

KNOWN_SECTIONS = ("mass", "sde", "lattice", "verify")

_REQUIRED = object()


def parse_config(text: str, path: str | None = None) -> dict:
    """Parse config text into {section: {key: (raw_value, line_number)}}."""
    sections: dict = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError("unterminated section header", path, lineno)
            name = line[1:-1].strip()
            if name not in KNOWN_SECTIONS:
                raise ConfigError(
                    f"unknown section [{name}]; expected one of {KNOWN_SECTIONS}",
                    path, lineno)
            current = sections.setdefault(name, {})
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", path, lineno)
        if current is None:
            raise ConfigError("entry before any [section] header", path, lineno)
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError("empty key", path, lineno)
        if key in current:
            raise ConfigError(f"duplicate key {key!r}", path, lineno)
        current[key] = (value, lineno)
    return sections


def read_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", str(path)) from exc
    return parse_config(text, path=str(path))


def apply_overrides(cfg: dict, assignments) -> dict:
    """Apply command-line 'section.key=value' assignments onto a parsed config."""
    for item in assignments:
        head, eq, value = item.partition("=")
        if not eq or "." not in head:
            raise ConfigError(
                f"override must look like section.key=value, got {item!r}")
        section, key = (s.strip() for s in head.split(".", 1))
        if section not in KNOWN_SECTIONS:
            raise ConfigError(f"unknown section {section!r} in override {item!r}")
        if not key:
            raise ConfigError(f"empty key in override {item!r}")
        cfg.setdefault(section, {})[key] = (value.strip(), 0)
    return cfg


def echo_config(cfg: dict) -> dict:
    """Plain {section: {key: value}} view, as echoed into run manifests."""
    return {sec: {k: v for k, (v, _) in body.items()} for sec, body in cfg.items()}


def config_to_text(echo: dict) -> str:
    """Serialize an echoed config back to file syntax (manifest round trip)."""
    out = []
    for sec, body in echo.items():
        out.append(f"[{sec}]")
        for key, value in body.items():
            out.append(f"{key} = {value}")
        out.append("")
    return "\n".join(out)


def _parse_bool(value: str) -> bool:
    low = value.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(value)


def _parse_floats(value: str) -> tuple:
    return tuple(float(tok) for tok in value.replace(",", " ").split())


def _parse_strs(value: str) -> tuple:
    return tuple(tok for tok in value.replace(",", " ").split())


class SectionView:
    """Typed access to one section; tracks consumed keys so a command can
    reject leftovers it would otherwise silently ignore."""

    def __init__(self, cfg: dict, name: str, path: str | None = None):
        self.name = name
        self.path = path
        self.data = cfg.get(name, {})
        self.used: set = set()

    def __contains__(self, key: str) -> bool:
        return key in self.data

    def __bool__(self) -> bool:
        return bool(self.data)

    def _get(self, key, conv, default, what):
        if key not in self.data:
            if default is _REQUIRED:
                raise ConfigError(
                    f"[{self.name}] missing required key {key!r}", self.path)
            return default
        value, lineno = self.data[key]
        self.used.add(key)
        try:
            return conv(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(
                f"[{self.name}] {key}: expected {what}, got {value!r}",
                self.path, lineno) from exc

    def get_str(self, key, default=_REQUIRED) -> str:
        return self._get(key, str, default, "a string")

    def get_float(self, key, default=_REQUIRED):
        return self._get(key, float, default, "a real number")

    def get_int(self, key, default=_REQUIRED):
        return self._get(key, int, default, "an integer")

    def get_bool(self, key, default=_REQUIRED):
        return self._get(key, _parse_bool, default, "true/false")

    def get_floats(self, key, default=_REQUIRED):
        return self._get(key, _parse_floats, default, "a list of real numbers")

    def get_strs(self, key, default=_REQUIRED):
        return self._get(key, _parse_strs, default, "a list of words")

    def reject_unknown(self) -> None:
        extra = sorted(set(self.data) - self.used)
        if extra:
            raise ConfigError(
                f"[{self.name}] unknown key {extra[0]!r}",
                self.path, self.data[extra[0]][1])
