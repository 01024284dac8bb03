"""Report bundles: records CSV, aggregate JSON, manifest, optional SVG charts."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import platform
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .datagen import PRNG_IDENTITY
from .experiments import (
    RECORD_FIELDS, THRESHOLD_FIELDS, RankRecord, ThresholdRow, aggregate,
    summarize_thresholds,
)

RECORDS = "records.csv"
AGGREGATE = "aggregate.json"
MANIFEST = "manifest.json"
THRESHOLDS = "thresholds.csv"


def _cell(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _parse(value: str):
    if value in ("true", "false"):
        return value == "true"
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        return value


def _table_text(fields, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    for row in rows:
        writer.writerow([_cell(getattr(row, f)) for f in fields])
    return buf.getvalue()


def records_text(records) -> str:
    return _table_text(RECORD_FIELDS, records)


def parse_records(text: str, source="records") -> list[RankRecord]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != RECORD_FIELDS:
        raise ValueError(f"{source}: header must be {','.join(RECORD_FIELDS)}")
    out = []
    for line_no, row in enumerate(reader, start=2):
        if len(row) != len(RECORD_FIELDS):
            raise ValueError(f"{source}:{line_no}: expected {len(RECORD_FIELDS)} columns, got {len(row)}")
        v = dict(zip(RECORD_FIELDS, row))
        try:
            out.append(RankRecord(
                v["experiment"], _parse(v["sweep_value"]), int(v["fold"]), int(v["seed"]),
                int(v["epoch"]), v["layer"], v["kind"], int(v["observed_rank"]),
                int(v["bound"]), float(v["sigma_max"]), float(v["threshold"]),
            ))
        except ValueError as exc:
            raise ValueError(f"{source}:{line_no}: {exc}") from None
    return out


def thresholds_text(rows) -> str:
    return _table_text(THRESHOLD_FIELDS, rows)


def parse_thresholds(text: str, source="thresholds") -> list[ThresholdRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != THRESHOLD_FIELDS:
        raise ValueError(f"{source}: unexpected header")
    return [ThresholdRow(**{k: _parse(v) for k, v in row.items()}) for row in reader]


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def config_hash(cfg_dict: dict) -> str:
    return sha256(json.dumps(cfg_dict, sort_keys=True, separators=(",", ":")).encode())


def thread_count() -> int:
    from threadpoolctl import threadpool_info

    counts = [info.get("num_threads", 1) for info in threadpool_info()]
    return max(counts) if counts else 1


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class Bundle:
    """Files of one run, in memory, keyed by file name."""

    files: dict = field(default_factory=dict)

    def write(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        written = []
        for name, data in self.files.items():
            path = out_dir / name
            path.write_bytes(data)
            written.append(path)
        return written


def build_bundle(cfg, records, report, threshold_rows=None, charts=False,
                 started=None, jobs=1) -> Bundle:
    files = {RECORDS: records_text(records).encode()}
    if threshold_rows is not None:
        files[THRESHOLDS] = thresholds_text(threshold_rows).encode()
    files[AGGREGATE] = _json(report.to_dict()).encode()
    if charts:
        from .charts import render_charts

        files.update(render_charts(cfg, report, threshold_rows))
    cfg_dict = cfg.to_dict()
    manifest = {
        "tool": "gradrank",
        "version": __version__,
        "config": cfg_dict,
        "config_hash": config_hash(cfg_dict),
        "precision": cfg.precision,
        "precisions": cfg.precisions if cfg.hypothesis == "H3" else [cfg.precision],
        "prng": PRNG_IDENTITY,
        "threads": thread_count(),
        "jobs": jobs,
        "seeds": [cfg.seed + s for s in range(cfg.seeds)],
        "numpy": np.__version__,
        "python": platform.python_version(),
        "started": started or _now(),
        "finished": _now(),
        "files": {name: sha256(data) for name, data in sorted(files.items())},
    }
    files[MANIFEST] = _json(manifest).encode()
    return Bundle(files)


@dataclass
class VerifyResult:
    problems: list
    violations: list

    @property
    def ok(self):
        return not self.problems and not self.violations


def verify_bundle(path) -> VerifyResult:
    """Check hashes, re-derive the aggregate, and re-check every bound."""
    path = Path(path)
    problems, violations = [], []
    if not path.is_dir():
        return VerifyResult([f"{path}: bundle directory not found"], [])
    manifest_path = path / MANIFEST
    if not manifest_path.exists():
        return VerifyResult([f"{manifest_path}: missing manifest"], [])
    try:
        manifest = json.loads(manifest_path.read_text())
        hashes = manifest["files"]
        cfg_dict = manifest["config"]
    except (ValueError, KeyError) as exc:
        return VerifyResult([f"{manifest_path}: unreadable manifest ({exc})"], [])
    if config_hash(cfg_dict) != manifest.get("config_hash"):
        problems.append(f"{manifest_path}: config_hash does not match the recorded config")
    for name, digest in sorted(hashes.items()):
        f = path / name
        if not f.exists():
            problems.append(f"{f}: listed in manifest but missing")
        elif sha256(f.read_bytes()) != digest:
            problems.append(f"{f}: content hash does not match manifest")
    for required in (RECORDS, AGGREGATE):
        if required not in hashes:
            problems.append(f"{path / required}: not listed in manifest")
    try:
        records = parse_records((path / RECORDS).read_text(), str(path / RECORDS))
        stored = json.loads((path / AGGREGATE).read_text())
    except (OSError, ValueError) as exc:
        problems.append(str(exc))
        return VerifyResult(problems, violations)
    for line_no, r in enumerate(records, start=2):
        if r.observed_rank > r.bound:
            violations.append(
                f"{path / RECORDS}:{line_no}: {r.experiment} sweep={r.sweep_value} fold={r.fold} "
                f"seed={r.seed} epoch={r.epoch} layer={r.layer} {r.kind}: observed rank "
                f"{r.observed_rank} exceeds bound {r.bound}"
            )
    try:
        report = aggregate(records)
    except ValueError as exc:
        problems.append(f"{path / RECORDS}: {exc}")
        return VerifyResult(problems, violations)
    if (path / THRESHOLDS).exists():
        try:
            rows = parse_thresholds((path / THRESHOLDS).read_text(), str(path / THRESHOLDS))
            report.summary = {"thresholds": summarize_thresholds(rows)}
        except (ValueError, TypeError) as exc:
            problems.append(f"{path / THRESHOLDS}: {exc}")
    if json.loads(_json(report.to_dict())) != stored:
        problems.append(f"{path / AGGREGATE}: does not match the aggregate re-derived from records")
    if report.factorization_violations:
        violations.append(
            f"{path / RECORDS}: {report.factorization_violations} gradient(s) exceed "
            "min(rank A_(i-1), rank Delta_i)"
        )
    return VerifyResult(problems, violations)
