"""CSV/JSON writers shared by the command line tools.

CSV files start with one ``# invocation: ...`` comment line followed by
a header row; floats are written with ``repr`` so output is exact and
byte-stable across reruns.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "" if np.isnan(v) else repr(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def csv_text(columns, rows, invocation):
    buf = io.StringIO()
    buf.write(f"# invocation: {invocation}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        if isinstance(r, dict):
            r = [r.get(c) for c in columns]
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def write_csv(path, columns, rows, invocation):
    text = csv_text(columns, rows, invocation)
    if path is None or str(path) == "-":
        return text
    Path(path).write_text(text)
    return text


def read_csv(path):
    """Return (invocation, header, rows as dicts of strings)."""
    lines = Path(path).read_text().splitlines()
    invocation = None
    body = []
    for ln in lines:
        if ln.startswith("#"):
            if ln.startswith("# invocation: ") and invocation is None:
                invocation = ln[len("# invocation: "):]
            continue
        body.append(ln)
    reader = csv.reader(body)
    header = next(reader, [])
    return invocation, header, [dict(zip(header, r)) for r in reader]


def write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"
    Path(path).write_text(text)
    return text


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")
