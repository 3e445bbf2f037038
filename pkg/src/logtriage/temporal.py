"""Temporal pattern comparison: stages, per-iteration sequences, DTW verdicts.

Training stages are recovered from rule-matched boundary templates. The
iterative span is split at per-step marker records; each iteration's event
sequence is compared (DTW over event equality) against the previous ten
iterations, and the three-sigma rule over the running similarity population
flags collapses.

Temporal analysis runs per node first; the job-level view is the union of
flagged iterations across nodes, so a single faulty rank is not diluted by
averaging over healthy ones.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field

from .errors import EmptySequenceError, NoIterationMarkers, NoIterativeStage
from .templates import WILDCARD, ParsedBundle, ParsedRecord

DEFAULT_WINDOW = 10


class Stage(enum.Enum):
    ENV_INIT = "ENV_INIT"
    DATA_LOAD = "DATA_LOAD"
    MODEL_INIT = "MODEL_INIT"
    ITER_TRAIN = "ITER_TRAIN"
    CHECKPOINT = "CHECKPOINT"
    TEARDOWN = "TEARDOWN"


STAGE_ORDER = {stage: i for i, stage in enumerate(Stage)}


@dataclass
class StageRule:
    stage: Stage
    boundary_patterns: list[str]  # regexes over template signatures
    priority: int

    def compile(self):
        return [re.compile(p) for p in self.boundary_patterns]


# Defaults target the built-in synthetic dialect; real deployments override
# them via a rule file.
DEFAULT_STAGE_RULES = [
    StageRule(Stage.ENV_INIT, [r"environment initialization started"], 10),
    StageRule(Stage.DATA_LOAD, [r"start data loading"], 20),
    StageRule(Stage.MODEL_INIT, [r"model initialization started"], 30),
    StageRule(Stage.ITER_TRAIN, [r"iterative training started"], 40),
    StageRule(Stage.CHECKPOINT, [r"saving final checkpoint started"], 50),
    StageRule(Stage.TEARDOWN, [r"training teardown started"], 60),
]


def load_stage_rules(path) -> list[StageRule]:
    """Rule file: one `STAGE PRIORITY PATTERN...` per line (pattern = rest of line)."""
    rules = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            stage_name, priority, pattern = line.split(None, 2)
            rules.append(StageRule(Stage[stage_name], [pattern], int(priority)))
    priorities = [r.priority for r in rules]
    if len(set(priorities)) != len(priorities):
        raise ValueError("stage rule priorities must be unique")
    return rules


@dataclass
class StageSpan:
    stage: Stage
    start: int  # record index within the node stream, inclusive
    end: int    # exclusive


def _boundary_index(bundle: ParsedBundle, rules: list[StageRule]) -> dict[int, StageRule]:
    """event_id -> highest-priority rule whose pattern matches the template."""
    compiled = [(rule, rule.compile()) for rule in
                sorted(rules, key=lambda r: -r.priority)]
    out = {}
    for eid, tpl in bundle.templates.items():
        for rule, patterns in compiled:
            if any(p.search(tpl.signature) for p in patterns):
                out[eid] = rule
                break
    return out


def segment_stages(bundle: ParsedBundle,
                   rules: list[StageRule] | None = None) -> dict[str, list[StageSpan]]:
    """Partition each node's stream into stage spans.

    A span is labeled by the last matched boundary; records before any
    boundary are ENV_INIT. Raises NoIterativeStage (with .spans carrying the
    partial result) when no node reaches an iterative-training span.
    """
    rules = rules if rules is not None else DEFAULT_STAGE_RULES
    if not any(r.stage is Stage.ITER_TRAIN for r in rules):
        raise ValueError("stage rules must cover ITER_TRAIN")
    boundaries = _boundary_index(bundle, rules)
    spans_by_node: dict[str, list[StageSpan]] = {}
    saw_iterative = False
    for node_id in bundle.node_ids:
        records = bundle.nodes[node_id]
        spans: list[StageSpan] = []
        current = Stage.ENV_INIT
        span_start = 0
        for idx, rec in enumerate(records):
            rule = boundaries.get(rec.event_id)
            if rule is not None and rule.stage is not current:
                if idx > span_start:
                    spans.append(StageSpan(current, span_start, idx))
                current = rule.stage
                span_start = idx
        if records:
            spans.append(StageSpan(current, span_start, len(records)))
        spans_by_node[node_id] = spans
        saw_iterative = saw_iterative or any(s.stage is Stage.ITER_TRAIN for s in spans)
    if not saw_iterative:
        exc = NoIterativeStage("no node stream contains an iterative-training span")
        exc.spans = spans_by_node
        raise exc
    return spans_by_node


def stage_of(spans: list[StageSpan], record_index: int) -> Stage | None:
    for span in spans:
        if span.start <= record_index < span.end:
            return span.stage
    return None


_MARKER_TRIGGERS = {"step", "iteration", "iter"}


class IterationMarker:
    """Matches the per-iteration marker template.

    Default: a template containing a masked counter adjacent to a step/iter
    token (framework step logs, e.g. `step <*> loss <*> ...`). A regex over
    the template signature can override it.
    """

    def __init__(self, pattern: str | None = None):
        self._regex = re.compile(pattern) if pattern else None

    def matches_tokens(self, tokens: list[str]) -> bool:
        if self._regex is not None:
            return bool(self._regex.search(" ".join(tokens)))
        for i, tok in enumerate(tokens):
            if tok.lower() in _MARKER_TRIGGERS:
                if (i + 1 < len(tokens) and tokens[i + 1] == WILDCARD) or \
                   (i > 0 and tokens[i - 1] == WILDCARD):
                    return True
        return False

    def marker_event_ids(self, bundle: ParsedBundle) -> set[int]:
        return {eid for eid, tpl in bundle.templates.items()
                if self.matches_tokens(tpl.tokens)}


@dataclass
class IterationSequence:
    iteration_index: int
    node_id: str
    events: list[str]   # template signatures, stream order
    indices: list[int]  # matching record indices within the node stream


def segment_iterations(records: list[ParsedRecord], bundle: ParsedBundle,
                       marker: IterationMarker | None = None,
                       node_id: str = "", indices: list[int] | None = None
                       ) -> list[IterationSequence]:
    """Split an iterative-training span at marker records.

    Records between consecutive markers form one sequence (marker included);
    trailing records after the last marker form the final, possibly
    incomplete, sequence. Records before the first marker (the stage boundary
    itself) belong to no iteration.
    """
    marker = marker or IterationMarker()
    marker_ids = marker.marker_event_ids(bundle)
    if indices is None:
        indices = list(range(len(records)))
    sig_of = {eid: tpl.signature for eid, tpl in bundle.templates.items()}

    sequences: list[IterationSequence] = []
    current: IterationSequence | None = None
    for rec, idx in zip(records, indices):
        if rec.event_id in marker_ids:
            current = IterationSequence(len(sequences), node_id, [], [])
            sequences.append(current)
        if current is not None:
            current.events.append(sig_of[rec.event_id])
            current.indices.append(idx)
    if not sequences:
        raise NoIterationMarkers(f"no iteration markers in span of node {node_id!r}")
    return sequences


def _events(seq) -> list:
    return seq.events if isinstance(seq, IterationSequence) else list(seq)


def dtw_distance(a, b) -> float:
    """Classic dynamic time warping with 0/1 local cost on event equality.

    Full dynamic program, no warping band; accepts IterationSequence or any
    event list.
    """
    ea, eb = _events(a), _events(b)
    if not ea or not eb:
        raise EmptySequenceError("DTW requires non-empty sequences")
    if ea == eb:
        return 0.0
    if len(eb) > len(ea):
        ea, eb = eb, ea
    n = len(eb)
    inf = math.inf
    prev = [0.0] + [inf] * n
    for ai in ea:
        cur = [inf]
        left = inf
        prev_diag = prev[0]
        append = cur.append
        for j in range(1, n + 1):
            up = prev[j]
            best = prev_diag if prev_diag < up else up
            if left < best:
                best = left
            left = best if ai == eb[j - 1] else best + 1.0
            append(left)
            prev_diag = up
        prev = cur
    return prev[n]


def sequence_similarity(a, b) -> float:
    """1 - dtw/max(len); bounded to [0, 1] so scores are scale-free."""
    ea, eb = _events(a), _events(b)
    d = dtw_distance(ea, eb)
    sim = 1.0 - d / max(len(ea), len(eb))
    return min(1.0, max(0.0, sim))


@dataclass
class IterationVerdict:
    iteration_index: int
    node_id: str
    similarity: float
    flagged: bool
    deviating_events: list[str] = field(default_factory=list)
    new_events: list[str] = field(default_factory=list)
    # signature -> record index of its first occurrence in this iteration
    new_event_indices: dict[str, int] = field(default_factory=dict)
    start_index: int = -1  # record index of the iteration's first record


def windowed_verdicts(sequences: list[IterationSequence],
                      window: int = DEFAULT_WINDOW) -> list[IterationVerdict]:
    """Score each iteration against its preceding window.

    For i >= window the similarity is the mean DTW similarity against the
    previous `window` sequences, and the iteration is flagged when it drops
    below mean - 3*sigma of all full-window similarities seen so far.
    Earlier iterations record similarity against the available history only
    and are never flagged. Deviating events are the symmetric difference
    between the iteration's event set and the window union, new events first,
    each side in first-occurrence order.
    """
    verdicts: list[IterationVerdict] = []
    event_sets = [set(s.events) for s in sequences]
    pop_n, pop_sum, pop_sumsq = 0, 0.0, 0.0
    for i, seq in enumerate(sequences):
        if i == 0:
            verdicts.append(IterationVerdict(seq.iteration_index, seq.node_id, 1.0, False,
                                             start_index=seq.indices[0]))
            continue
        lo = max(0, i - window)
        sims = [sequence_similarity(seq, sequences[j]) for j in range(lo, i)]
        sim = sum(sims) / len(sims)
        flagged = False
        deviating: list[str] = []
        new_events: list[str] = []
        evidence: dict[str, int] = {}
        if i >= window:
            pop_n += 1
            pop_sum += sim
            pop_sumsq += sim * sim
            mean = pop_sum / pop_n
            sigma = math.sqrt(max(pop_sumsq / pop_n - mean * mean, 0.0))
            flagged = sim < mean - 3.0 * sigma
            window_union = set().union(*event_sets[lo:i])
            current = event_sets[i]
            seen: set[str] = set()
            for sig, idx in zip(seq.events, seq.indices):
                if sig not in window_union and sig not in seen:
                    seen.add(sig)
                    new_events.append(sig)
                    evidence[sig] = idx
            gone: list[str] = []
            gone_seen: set[str] = set()
            for j in range(lo, i):
                for sig in sequences[j].events:
                    if sig not in current and sig not in gone_seen:
                        gone_seen.add(sig)
                        gone.append(sig)
            deviating = new_events + gone
        verdicts.append(IterationVerdict(
            seq.iteration_index, seq.node_id, sim, flagged,
            deviating_events=deviating, new_events=new_events,
            new_event_indices=evidence,
        ))
    return verdicts


@dataclass
class TemporalResult:
    stage_spans: dict[str, list[StageSpan]]
    verdicts: dict[str, list[IterationVerdict]]
    flagged: list[IterationVerdict]
    warnings: list[str] = field(default_factory=list)


def analyze_temporal(bundle: ParsedBundle, rules: list[StageRule] | None = None,
                     marker: IterationMarker | None = None,
                     window: int = DEFAULT_WINDOW) -> TemporalResult:
    """Per-node stage segmentation + iteration verdicts; never raises.

    Runs on the unfiltered parsed bundle: iteration structure (markers,
    periodic events) is exactly what cross-job filtering removes.
    """
    warnings: list[str] = []
    try:
        spans = segment_stages(bundle, rules)
    except NoIterativeStage as exc:
        warnings.append(f"temporal analysis skipped: {exc}")
        return TemporalResult(getattr(exc, "spans", {}), {}, [], warnings)

    marker = marker or IterationMarker()
    verdicts_by_node: dict[str, list[IterationVerdict]] = {}
    flagged: list[IterationVerdict] = []
    for node_id in bundle.node_ids:
        records = bundle.nodes[node_id]
        iter_records: list[ParsedRecord] = []
        iter_indices: list[int] = []
        for span in spans.get(node_id, []):
            if span.stage is Stage.ITER_TRAIN:
                iter_records.extend(records[span.start:span.end])
                iter_indices.extend(range(span.start, span.end))
        if not iter_records:
            continue
        try:
            sequences = segment_iterations(iter_records, bundle, marker,
                                           node_id=node_id, indices=iter_indices)
        except NoIterationMarkers as exc:
            warnings.append(str(exc))
            continue
        verdicts = windowed_verdicts(sequences, window=window)
        verdicts_by_node[node_id] = verdicts
        flagged.extend(v for v in verdicts if v.flagged)
    flagged.sort(key=lambda v: (v.iteration_index, v.node_id))
    return TemporalResult(spans, verdicts_by_node, flagged, warnings)
