"""Cross-job noise removal.

Successful runs with identical settings produce the same benign events
(including benign ERROR-level chatter) as a failed run, so any event that is
frequently present in the successful history is unlikely to explain the
failure. Matching is by template token signature, never event_id, because
parser instances are per job.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import EmptyHistoryError
from .templates import ParsedBundle

DEFAULT_PRESENCE_FRACTION = 0.5


@dataclass
class NormalEventPool:
    """Template signatures seen in successful jobs, with per-job presence counts."""

    signatures: dict[str, int]
    total_jobs: int

    def presence_fraction(self, signature: str) -> float:
        return self.signatures.get(signature, 0) / self.total_jobs

    def is_frequent(self, signature: str, presence_fraction: float) -> bool:
        return self.presence_fraction(signature) >= presence_fraction

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"total_jobs": self.total_jobs, "signatures": self.signatures},
                      fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "NormalEventPool":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        return cls(signatures=dict(data["signatures"]), total_jobs=int(data["total_jobs"]))


def build_pool(successful_bundles: list[ParsedBundle]) -> NormalEventPool:
    """Count, per template signature, how many successful jobs contain it."""
    if not successful_bundles:
        raise EmptyHistoryError("no successful jobs supplied")
    signatures: dict[str, int] = {}
    for bundle in successful_bundles:
        for sig in bundle.signatures():
            signatures[sig] = signatures.get(sig, 0) + 1
    return NormalEventPool(signatures=signatures, total_jobs=len(successful_bundles))


def filter_bundle(failed: ParsedBundle, pool: NormalEventPool,
                  presence_fraction: float = DEFAULT_PRESENCE_FRACTION) -> ParsedBundle:
    """Drop records whose signature is frequent in the pool; order is preserved.

    Returns a new bundle; the input is untouched. The result's template table
    is restricted to templates still referenced by surviving records.
    """
    if not 0.0 < presence_fraction <= 1.0:
        raise ValueError("presence_fraction must lie in (0, 1]")
    drop_ids = {
        event_id for event_id, tpl in failed.templates.items()
        if pool.is_frequent(tpl.signature, presence_fraction)
    }
    nodes = {
        node_id: [rec for rec in records if rec.event_id not in drop_ids]
        for node_id, records in failed.nodes.items()
    }
    keep_ids = {rec.event_id for records in nodes.values() for rec in records}
    templates = {eid: tpl for eid, tpl in failed.templates.items() if eid in keep_ids}
    return ParsedBundle(job_id=failed.job_id, nodes=nodes, templates=templates,
                        metadata=dict(failed.metadata))
