"""Plain key=value text files.

The format used for configs and checkpoint manifests: one `key=value` per
line, `#` starts a comment, blank lines ignored. No quoting or escapes;
values are raw strings and typing is the reader's job.
"""

from __future__ import annotations


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def write_kv(path, pairs: dict, header: str | None = None) -> None:
    lines = []
    if header:
        lines.extend(f"# {h}" for h in header.splitlines())
    lines.extend(f"{k}={format_value(v)}" for k, v in pairs.items())
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_kv(path) -> dict:
    """Parse a key=value file. Duplicate keys and junk lines are errors."""
    out: dict = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw.rstrip()!r}")
            key, val = line.split("=", 1)
            key = key.strip()
            if not key:
                raise ValueError(f"{path}:{lineno}: empty key")
            if key in out:
                raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = val.strip()
    return out
