"""Report Components - CSV/JSON writers and console tables for command output"""

import csv
import io
import json
import math
import sys
from contextlib import contextmanager
from pathlib import Path

from src.utils.log import get_logger

logger = get_logger(__name__)


@contextmanager
def _open_output(out):
    """File handle for a path, or stdout for None / "-" """
    if out in (None, "-"):
        yield sys.stdout
        return
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        yield f
    logger.debug(f"Wrote {path}")


def _cell(value):
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return f"{value:.6g}"
    if value is None:
        return ""
    return value


def render_csv(rows, columns, manifest_hash=None):
    buffer = io.StringIO()
    if manifest_hash:
        buffer.write(f"# manifest={manifest_hash}\n")
    writer = csv.DictWriter(buffer, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _cell(row.get(k)) for k in columns})
    return buffer.getvalue()


def write_csv(rows, columns, out=None, manifest_hash=None):
    """Rows as CSV, preceded by a `# manifest=<hash>` comment line"""
    text = render_csv(rows, columns, manifest_hash)
    with _open_output(out) as f:
        f.write(text)
    return text


def write_json(payload, out=None, manifest=None):
    """JSON document; the manifest, when given, is embedded under "manifest" """
    document = dict(payload)
    if manifest is not None:
        document["manifest"] = manifest.as_dict()
    text = json.dumps(document, indent=2, sort_keys=True, default=_json_default) + "\n"
    with _open_output(out) as f:
        f.write(text)
    return text


def _json_default(value):
    if hasattr(value, "as_dict"):
        return value.as_dict()
    if hasattr(value, "tolist"):
        return value.tolist()
    if hasattr(value, "value"):
        return value.value
    raise TypeError(f"cannot serialize {type(value).__name__}")


def render_table(rows, columns):
    """Fixed-width console table"""
    cells = [[str(_cell(row.get(c))) for c in columns] for row in rows]
    widths = [max([len(c)] + [len(r[i]) for r in cells]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in cells)
    return "\n".join(lines)


def render_tolerance_summary(rows):
    """One line per table: how many cells landed within tolerance"""
    summary = {}
    for row in rows:
        total, ok = summary.get(row["table"], (0, 0))
        summary[row["table"]] = (total + 1, ok + bool(row["within"]))
    return "\n".join(f"{table}: {ok}/{total} cells within tolerance" for table, (total, ok) in summary.items())
