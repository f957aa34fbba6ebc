"""Flat key=value experiment config files.

One `key = value` pair per line; `#` starts a comment.  Values stay strings;
consumers coerce.  This is the format checked into experiment directories.
"""

from __future__ import annotations


def parse_kv(text):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_kv(path):
    with open(path) as f:
        return parse_kv(f.read())


def dump_kv(kv):
    return "".join(f"{k} = {v}\n" for k, v in kv.items())


def save_kv(path, kv):
    with open(path, "w") as f:
        f.write(dump_kv(kv))
