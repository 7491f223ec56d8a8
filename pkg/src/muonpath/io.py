"""JSON-lines event/track files and CSV tables with a campaign-id comment line."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from muonpath.toysim import Event

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Unreadable or inconsistent input data."""


def dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_jsonl(path, records) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(dumps(rec) + "\n")
            n += 1
    return n


@dataclass
class ReadResult:
    records: list = field(default_factory=list)
    skipped: int = 0


def read_jsonl(path, parse=None) -> ReadResult:
    """Read records, skipping (and counting) lines that do not parse.

    ``parse`` converts each dict; any exception it raises marks the line corrupt.
    """
    out = ReadResult()
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise ValueError("not an object")
                out.records.append(parse(rec) if parse else rec)
            except (ValueError, KeyError, TypeError, IndexError) as exc:
                out.skipped += 1
                log.warning("%s:%d: skipping corrupt line (%s)", path, lineno, exc)
    return out


def read_events(path) -> ReadResult:
    return read_jsonl(path, Event.from_dict)


def campaign_ids(records, key: str = "campaign_id") -> set:
    return {r[key] if isinstance(r, dict) else getattr(r, key) for r in records}


def write_csv(path, campaign_id: str, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# campaign_id={campaign_id}\r\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def read_csv(path) -> tuple[str, list, list]:
    """Return (campaign_id, header, rows) with rows as strings."""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("# campaign_id="):
        raise DataError(f"{path}: missing campaign_id line")
    cid = text[0].split("=", 1)[1].strip()
    rows = list(csv.reader(text[1:]))
    return cid, rows[0], rows[1:]
