"""Tabular and JSON rendering of evaluation results."""
from __future__ import annotations

import json
import math

COLUMNS = ("run", "identity", "trans_err", "rot_err", "temporal", "config_hash", "seed", "checkpoint")
HASH_COLUMNS = ("config_hash", "checkpoint")


def _cell(v, column: str = "") -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4f}"
    s = str(v)
    # long digests are shortened for display; names are kept whole
    return s[:12] if column in HASH_COLUMNS and len(s) > 16 else s


def format_table(results: list[dict]) -> str:
    rows = [[_cell(r.get(c), c) for c in COLUMNS] for r in results]
    widths = [max([len(c)] + [len(row[i]) for row in rows]) for i, c in enumerate(COLUMNS)]
    line = lambda cells: "| " + " | ".join(x.ljust(w) for x, w in zip(cells, widths)) + " |"
    out = [line(COLUMNS), "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
    out.extend(line(row) for row in rows)
    return "\n".join(out)


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def report(results: list[dict]) -> tuple[str, str]:
    """Markdown table plus JSON; rows keep the fixed column order, extra keys go under ``extra``."""
    rows = []
    for r in results:
        row = {c: _clean(r.get(c)) for c in COLUMNS}
        extra = {k: v for k, v in r.items() if k not in COLUMNS}
        if extra:
            row["extra"] = extra
        rows.append(row)
    return format_table(results), json.dumps({"columns": list(COLUMNS), "rows": rows}, indent=2, sort_keys=False)


def parse_report(text: str) -> list[dict]:
    obj = json.loads(text)
    out = []
    for row in obj["rows"]:
        r = {c: row.get(c) for c in obj["columns"]}
        r.update(row.get("extra", {}))
        out.append(r)
    return out
