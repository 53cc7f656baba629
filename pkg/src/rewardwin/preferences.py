#############################
#  RewardWin - Preferences
#
#  Plain-text key=value configuration files,
#  one key per line, '#' starts a comment.
#
#  This program is distributed free
#  of charge (open source) under the
#  GNU General Public License
#############################

from __future__ import annotations

from pathlib import Path
from typing import Collection, Dict, Iterable, Mapping, Optional, Tuple, Union

from .rewardwin_common import ConfigError


def parse_preference_lines(lines: Iterable[str], source: str = "<config>",
                           allowed: Optional[Collection[str]] = None) -> Dict[str, str]:
    """
    Scan key=value lines and return them as a dict of stripped strings.

    Blank lines and lines whose first non-blank character is '#' are skipped,
    and a '#' after the value starts a trailing comment. A line without '=',
    a key given twice, or a key outside `allowed` is a ConfigError that names
    the source and line number.

    Example:
        parse_preference_lines(["# arm", "upper_arm_len = 0.18"]) ->
            { 'upper_arm_len' : '0.18' }
    """
    values: Dict[str, str] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        pos = line.find("=")
        if pos < 0:
            raise ConfigError("%s:%d: expected key = value, got %r" % (source, lineno, line))
        label = line[:pos].strip()
        if not label:
            raise ConfigError("%s:%d: empty key" % (source, lineno))
        if allowed is not None and label not in allowed:
            raise ConfigError("%s:%d: unknown key %r" % (source, lineno, label))
        if label in values:
            raise ConfigError("%s:%d: key %r given twice" % (source, lineno, label))
        values[label] = line[pos + 1:].strip()
    return values


def read_preferences(path: Union[str, Path], allowed: Optional[Collection[str]] = None) -> Dict[str, str]:
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise ConfigError("cannot read config %s: %s" % (path, e.strerror or e)) from e
    return parse_preference_lines(lines, str(path), allowed)


def parse_overrides(pairs: Iterable[str], allowed: Optional[Collection[str]] = None) -> Dict[str, str]:
    return parse_preference_lines(pairs, "--set", allowed)


def format_preferences(values: Mapping[str, object], header: str = "") -> str:
    out = []
    if header:
        out.extend("# " + h for h in header.splitlines())
    for key, value in values.items():
        out.append("%s = %s" % (key, format_value(value)))
    return "\n".join(out) + "\n"


def format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple) and value:
        if len(value) == 2 and all(isinstance(v, int) for v in value):
            return "%dx%d" % value
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


def to_int(key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError("%s: expected an integer, got %r" % (key, raw)) from None


def to_float(key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError("%s: expected a number, got %r" % (key, raw)) from None


def to_bool(key: str, raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError("%s: expected true/false, got %r" % (key, raw))


def to_resolution(key: str, raw: str) -> Tuple[int, int]:
    parts = raw.lower().replace(",", "x").split("x")
    if len(parts) != 2:
        raise ConfigError("%s: expected WIDTHxHEIGHT, got %r" % (key, raw))
    return to_int(key, parts[0]), to_int(key, parts[1])


def to_floats(key: str, raw: str, count: int) -> Tuple[float, ...]:
    parts = [p for p in raw.replace(",", " ").split() if p]
    if len(parts) != count:
        raise ConfigError("%s: expected %d numbers, got %r" % (key, count, raw))
    return tuple(to_float(key, p) for p in parts)


def to_pair(key: str, raw: str) -> Tuple[float, float]:
    return to_floats(key, raw, 2)
