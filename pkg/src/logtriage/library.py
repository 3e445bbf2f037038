"""Historical fault library: confirmed log-based fault patterns.

Patterns are matched against new failed jobs before (and alongside) full
analysis. Signatures are substring-or-regex over template text, not event
ids, so a library survives re-parsing and cross-job id instability.
"""

from __future__ import annotations

import enum
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import DuplicatePatternId, PatternValidationError
from .templates import ParsedBundle

_EVIDENCE_CAP = 5  # matched records kept per signature


class FaultCategory(enum.Enum):
    NETWORK = "NETWORK"
    ACCELERATOR = "ACCELERATOR"
    NODE = "NODE"
    STORAGE = "STORAGE"
    CONFIG = "CONFIG"
    PROGRAM_BUG = "PROGRAM_BUG"
    INCOMPATIBILITY = "INCOMPATIBILITY"
    MISOPERATION = "MISOPERATION"
    FRAMEWORK = "FRAMEWORK"
    PLATFORM = "PLATFORM"


class MatchMode(enum.Enum):
    ALL = "ALL"
    ANY = "ANY"


@dataclass
class FaultPattern:
    pattern_id: str
    name: str
    category: FaultCategory
    signature_events: list[str]
    match_mode: MatchMode = MatchMode.ANY
    root_cause: str = ""
    remediation: str = ""

    def validate(self) -> None:
        if not self.pattern_id:
            raise PatternValidationError("pattern_id must be non-empty")
        if not self.signature_events:
            raise PatternValidationError(
                f"pattern {self.pattern_id!r}: signature_events must be non-empty")

    def to_doc(self) -> dict:
        return {
            "pattern_id": self.pattern_id,
            "name": self.name,
            "category": self.category.value,
            "signature_events": list(self.signature_events),
            "match_mode": self.match_mode.value,
            "root_cause": self.root_cause,
            "remediation": self.remediation,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "FaultPattern":
        pattern = cls(
            pattern_id=str(doc["pattern_id"]),
            name=str(doc.get("name", doc["pattern_id"])),
            category=FaultCategory(doc.get("category", "PLATFORM")),
            signature_events=[str(s) for s in doc.get("signature_events", [])],
            match_mode=MatchMode(doc.get("match_mode", "ANY")),
            root_cause=str(doc.get("root_cause", "")),
            remediation=str(doc.get("remediation", "")),
        )
        pattern.validate()
        return pattern


@dataclass
class MatchedEvent:
    signature_pattern: str
    template: str
    node_id: str
    source_line: int
    message: str
    record_index: int = -1  # index within the node's record stream
    timestamp: str = ""


@dataclass
class MatchResult:
    pattern_id: str
    name: str
    confidence: float  # matched / total signature events; ALL-mode is 1.0
    matched_events: list[MatchedEvent]
    root_cause: str = ""
    remediation: str = ""
    category: str = ""


def _matcher(pattern: str):
    """Treat the signature as a regex; fall back to literal substring."""
    try:
        return re.compile(pattern).search
    except re.error:
        return lambda text, _p=pattern: _p in text


class FaultLibrary:
    def __init__(self, patterns: list[FaultPattern] | None = None,
                 path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self.patterns: dict[str, FaultPattern] = {}
        for p in patterns or []:
            self.add_pattern(p, persist=False)

    def __len__(self) -> int:
        return len(self.patterns)

    @classmethod
    def load(cls, path) -> "FaultLibrary":
        path = Path(path)
        patterns = []
        if path.exists():
            with open(path, encoding="utf-8") as fh:
                for doc in yaml.safe_load_all(fh):
                    if doc:
                        patterns.append(FaultPattern.from_doc(doc))
        return cls(patterns, path=path)

    def save(self, path=None) -> None:
        target = Path(path) if path is not None else self.path
        if target is None:
            raise ValueError("no library path configured")
        docs = [self.patterns[pid].to_doc() for pid in sorted(self.patterns)]
        payload = yaml.safe_dump_all(docs, sort_keys=False, explicit_start=True)
        fd, tmp = tempfile.mkstemp(dir=target.parent or ".", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(payload)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def add_pattern(self, pattern: FaultPattern, persist: bool = True) -> None:
        pattern.validate()
        if pattern.pattern_id in self.patterns:
            raise DuplicatePatternId(pattern.pattern_id)
        self.patterns[pattern.pattern_id] = pattern
        if persist and self.path is not None:
            self.save()

    def match(self, bundle: ParsedBundle) -> list[MatchResult]:
        """Match every pattern against the (unfiltered) parsed bundle.

        Results sorted by confidence then pattern_id; ALL-mode patterns only
        match when every signature event occurs somewhere in the bundle.
        """
        if not self.patterns:
            return []
        # one pass: template -> a few example records (with stream indices)
        examples: dict[int, list] = {}
        for node_id in bundle.node_ids:
            for idx, rec in enumerate(bundle.nodes[node_id]):
                bucket = examples.setdefault(rec.event_id, [])
                if len(bucket) < _EVIDENCE_CAP:
                    bucket.append((idx, rec))
        templates = list(bundle.templates.values())

        results = []
        for pid in sorted(self.patterns):
            pattern = self.patterns[pid]
            matched: list[MatchedEvent] = []
            matched_signatures = 0
            for sig_pattern in pattern.signature_events:
                search = _matcher(sig_pattern)
                hit = False
                for tpl in templates:
                    if search(tpl.signature):
                        hit = True
                        for idx, rec in examples.get(tpl.event_id, []):
                            matched.append(MatchedEvent(
                                signature_pattern=sig_pattern,
                                template=tpl.signature,
                                node_id=rec.node_id,
                                source_line=rec.source_line,
                                message=rec.message,
                                record_index=idx,
                                timestamp=rec.timestamp.isoformat(),
                            ))
                if hit:
                    matched_signatures += 1
            if matched_signatures == 0:
                continue
            if pattern.match_mode is MatchMode.ALL and \
                    matched_signatures < len(pattern.signature_events):
                continue
            confidence = matched_signatures / len(pattern.signature_events)
            results.append(MatchResult(
                pattern_id=pattern.pattern_id,
                name=pattern.name,
                confidence=confidence,
                matched_events=matched,
                root_cause=pattern.root_cause,
                remediation=pattern.remediation,
                category=pattern.category.value,
            ))
        results.sort(key=lambda r: (-r.confidence, r.pattern_id))
        return results
