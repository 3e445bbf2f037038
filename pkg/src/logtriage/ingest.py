"""Raw log ingestion: turn a job's log-file directory into node-ordered record streams.

Node identity comes from the file layout (one file or one directory per node),
never from message content, because rank-in-message conventions vary by
framework. Timezone-less timestamps are interpreted as UTC so that cross-node
comparison has a single clock basis.
"""

from __future__ import annotations

import enum
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .errors import BundleIoError, EmptyBundleError, HeaderMismatch

EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


class Level(enum.Enum):
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"
    UNKNOWN = "UNKNOWN"


_LEVEL_TOKENS = {
    "DEBUG": Level.DEBUG,
    "INFO": Level.INFO,
    "WARNING": Level.WARNING,
    "WARN": Level.WARNING,
    "ERROR": Level.ERROR,
}


@dataclass(slots=True)
class RawLogRecord:
    node_id: str
    timestamp: datetime
    level: Level
    message: str
    source_line: int


@dataclass
class JobBundle:
    """All log records of one job, grouped per node and time-ordered."""

    job_id: str
    nodes: dict[str, list[RawLogRecord]]
    metadata: dict = field(default_factory=dict)

    @property
    def node_ids(self) -> list[str]:
        return sorted(self.nodes)

    @property
    def total_records(self) -> int:
        return sum(len(r) for r in self.nodes.values())

    def iter_records(self):
        """Yield records node by node (node ids sorted), preserving stream order."""
        for node_id in self.node_ids:
            yield from self.nodes[node_id]


# Timestamp grammar shared by the built-in header formats. The fractional part
# and timezone are optional; a comma separator (log4j style) is tolerated.
_TS = r"\d{4}-\d{2}-\d{2}[T ]\d{2}:\d{2}:\d{2}(?:[.,]\d{1,6})?(?:Z|[+-]\d{2}:?\d{2})?"

_BUILTIN_HEADERS = {
    # `2024-03-01T10:00:00.123 ERROR message ...`
    "iso": re.compile(rf"^(?P<ts>{_TS})\s+(?P<rest>\S.*)$"),
    # `[2024-03-01T10:00:00.123] [ERROR] message ...`
    "bracketed": re.compile(rf"^\[(?P<ts>{_TS})\]\s*\[(?P<level>\w+)\]\s*(?P<msg>.*)$"),
    # `worker: 2024-03-01T10:00:00.123 ERROR message ...`
    "prefixed": re.compile(rf"^\S+\s+(?P<ts>{_TS})\s+(?P<rest>\S.*)$"),
}


def _parse_timestamp(text: str) -> datetime:
    text = text.replace(",", ".")
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


class HeaderFormat:
    """One of the built-in header grammars, or a user regex with named
    captures ``ts``, ``level``, ``msg``."""

    def __init__(self, name: str, pattern: re.Pattern, split_level: bool):
        self.name = name
        self._pattern = pattern
        # built-in `iso`/`prefixed` grammars carry level as the first token of
        # the remainder rather than a dedicated capture group
        self._split_level = split_level

    @classmethod
    def get(cls, spec: str) -> "HeaderFormat":
        if spec in _BUILTIN_HEADERS:
            return cls(spec, _BUILTIN_HEADERS[spec], split_level=spec != "bracketed")
        pattern = re.compile(spec)
        for group in ("ts", "level", "msg"):
            if group not in pattern.groupindex:
                raise ValueError(
                    f"custom header regex must define named groups ts/level/msg, missing {group!r}"
                )
        return cls("custom", pattern, split_level=False)

    def parse(self, line: str) -> tuple[datetime, Level, str]:
        m = self._pattern.match(line)
        if m is None:
            raise HeaderMismatch(line[:120])
        try:
            ts = _parse_timestamp(m.group("ts"))
        except ValueError as exc:
            raise HeaderMismatch(str(exc)) from exc
        if self._split_level:
            rest = m.group("rest")
            head, _, tail = rest.partition(" ")
            level = _LEVEL_TOKENS.get(head.upper())
            if level is None:
                # unrecognized token stays part of the message
                return ts, Level.UNKNOWN, rest
            return ts, level, tail
        level = _LEVEL_TOKENS.get(m.group("level").upper(), Level.UNKNOWN)
        return ts, level, m.group("msg")


def parse_record_header(line: str, fmt: HeaderFormat) -> tuple[datetime, Level, str]:
    """Extract (timestamp, level, message) from one line or raise HeaderMismatch."""
    return fmt.parse(line)


def _read_node_file(path: Path, node_id: str, fmt: HeaderFormat,
                    line_offset: int = 0) -> list[RawLogRecord]:
    try:
        text = path.read_text(encoding="utf-8", errors="replace")
    except OSError as exc:
        raise BundleIoError(path, exc) from exc

    records: list[RawLogRecord] = []
    for lineno, line in enumerate(text.splitlines(), start=1 + line_offset):
        if not line.strip():
            continue
        if line[0] in (" ", "\t") and records:
            # continuation line (stack trace etc.): keep it attached to the
            # record that triggered it
            records[-1].message += "\n" + line.strip()
            continue
        try:
            ts, level, msg = fmt.parse(line)
        except HeaderMismatch:
            ts = records[-1].timestamp if records else EPOCH
            records.append(RawLogRecord(node_id, ts, Level.UNKNOWN, line, lineno))
            continue
        records.append(RawLogRecord(node_id, ts, level, msg, lineno))
    # stable sort: equal timestamps keep source_line order
    records.sort(key=lambda r: r.timestamp)
    return records


def _discover_nodes(root: Path, layout: str) -> dict[str, list[Path]]:
    if layout == "file-per-node":
        return {p.stem: [p] for p in sorted(root.glob("*.log")) if p.is_file()}
    if layout == "dir-per-node":
        nodes = {}
        for d in sorted(p for p in root.iterdir() if p.is_dir()):
            files = sorted(p for p in d.iterdir() if p.is_file())
            if files:
                nodes[d.name] = files
        return nodes
    raise ValueError(f"unknown layout {layout!r} (expected file-per-node or dir-per-node)")


def read_job_bundle(root_path, layout: str = "file-per-node", header: str = "iso",
                    job_id: str | None = None, jobs: int | None = None) -> JobBundle:
    """Ingest a job's log directory into a JobBundle.

    Lines that fail header parsing become UNKNOWN-level records carrying the
    preceding record's timestamp (epoch if first); indented lines are treated
    as continuations of the previous record.
    """
    root = Path(root_path)
    if not root.exists():
        raise BundleIoError(root, "path does not exist")
    fmt = HeaderFormat.get(header)
    node_files = _discover_nodes(root, layout)
    if not node_files:
        raise EmptyBundleError(f"no log files found under {root}")

    def read_node(item):
        node_id, paths = item
        records: list[RawLogRecord] = []
        for path in paths:
            records.extend(_read_node_file(path, node_id, fmt))
        if len(paths) > 1:
            records.sort(key=lambda r: r.timestamp)
        return node_id, records

    items = sorted(node_files.items())
    if jobs is not None and jobs <= 1:
        parsed = [read_node(it) for it in items]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parsed = list(pool.map(read_node, items))

    return JobBundle(
        job_id=job_id or root.name,
        nodes=dict(parsed),
        metadata={"root": str(root), "layout": layout, "header": fmt.name,
                  "node_count": len(parsed)},
    )
