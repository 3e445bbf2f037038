"""Online log template mining with a fixed-depth parse tree (Drain).

Each message is routed by token count, then by its leading tokens, to a leaf
holding candidate templates; the most similar template above the threshold
absorbs the message (differing positions widen to ``<*>``), otherwise a new
template is born. Wildcard positions count as matches during the similarity
scan, which keeps templates from fragmenting as they generalize.

Parser state is per job. Cross-job comparison happens on template token
signatures (the joined token string), so event ids never need global
coordination.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .errors import LengthMismatch
from .ingest import JobBundle, RawLogRecord

WILDCARD = "<*>"

# Default masks: file paths, IPs, hex ids, rank ids, plain numbers. Rank ids
# keep their prefix (`rank_7` -> `rank_<*>`) so rank-bearing templates stay
# recognizable. Order matters: paths and IPs must win over bare numbers.
DEFAULT_MASKS: list[tuple[str, str]] = [
    (r"(?:(?<=\s)|^)/(?:[\w.\-+]+/)*[\w.\-+]+", WILDCARD),
    (r"\b\d{1,3}(?:\.\d{1,3}){3}(?::\d{1,5})?\b", WILDCARD),
    (r"\b0[xX][0-9a-fA-F]+\b", WILDCARD),
    (r"\b[0-9a-fA-F]{8,}\b", WILDCARD),
    (r"(?<=rank_)\d+\b", WILDCARD),
    (r"(?<![\w.])[+-]?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?(?![\w.])", WILDCARD),
]


class MaskSet:
    """Compiled (pattern, placeholder) pairs applied before tokenization."""

    def __init__(self, masks: list[tuple[str, str]] | None = None):
        pairs = DEFAULT_MASKS if masks is None else masks
        self._rules = [(re.compile(p), repl) for p, repl in pairs]
        # single-pattern fast path when every placeholder is the wildcard
        if all(repl == WILDCARD for _, repl in pairs):
            self._combined = re.compile("|".join(f"(?:{p})" for p, _ in pairs))
        else:
            self._combined = None

    def apply(self, message: str) -> str:
        if self._combined is not None:
            return self._combined.sub(WILDCARD, message)
        for pattern, repl in self._rules:
            message = pattern.sub(repl, message)
        return message

    @classmethod
    def from_file(cls, path) -> "MaskSet":
        """One mask per line: `pattern<TAB>placeholder` (placeholder defaults to <*>)."""
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                pattern, _, placeholder = line.partition("\t")
                pairs.append((pattern, placeholder or WILDCARD))
        return cls(pairs)


def preprocess(message: str, masks: MaskSet | None = None) -> list[str]:
    """Mask variable spans, then split on whitespace. Empty message -> []."""
    masks = masks or _DEFAULT_MASKSET
    return masks.apply(message).split()


def similarity(tokens_a: list[str], template_tokens: list[str]) -> float:
    """Fraction of positions that agree; template wildcards count as matches."""
    if len(tokens_a) != len(template_tokens):
        raise LengthMismatch(f"{len(tokens_a)} vs {len(template_tokens)}")
    if not tokens_a:
        return 1.0
    hits = 0
    for a, t in zip(tokens_a, template_tokens):
        if t == a or t == WILDCARD:
            hits += 1
    return hits / len(tokens_a)


@dataclass
class LogTemplate:
    event_id: int
    tokens: list[str]
    occurrence_count: int = 0
    _signature: str | None = field(default=None, repr=False)
    _param_positions: list[int] | None = field(default=None, repr=False)

    @property
    def signature(self) -> str:
        if self._signature is None:
            self._signature = " ".join(self.tokens)
        return self._signature

    @property
    def param_positions(self) -> list[int]:
        if self._param_positions is None:
            self._param_positions = [i for i, t in enumerate(self.tokens) if t == WILDCARD]
        return self._param_positions

    def invalidate(self):
        self._signature = None
        self._param_positions = None


class _Node:
    __slots__ = ("children", "templates")

    def __init__(self):
        self.children: dict = {}
        self.templates: list[LogTemplate] = []


class DrainParser:
    """Single-writer parse tree; one instance per job."""

    def __init__(self, depth: int = 4, threshold: float = 0.4,
                 max_children: int = 100, masks: MaskSet | None = None):
        if depth < 2:
            raise ValueError("depth must be >= 2")
        if not 0.0 < threshold <= 1.0:
            raise ValueError("similarity threshold must lie in (0, 1]")
        self.depth = depth
        self.threshold = threshold
        self.max_children = max_children
        self.masks = masks or _DEFAULT_MASKSET
        self.templates: dict[int, LogTemplate] = {}
        self._root: dict[int, _Node] = {}
        self._next_id = 1
        self._memo: dict[str, int] = {}

    # -- tree walk -------------------------------------------------------

    def _leaf_for(self, tokens: list[str], create: bool) -> _Node | None:
        node = self._root.get(len(tokens))
        if node is None:
            if not create:
                return None
            node = self._root[len(tokens)] = _Node()
        for i in range(min(self.depth - 2, len(tokens))):
            token = tokens[i]
            child = node.children.get(token)
            if child is None:
                if create and token != WILDCARD and len(node.children) < self.max_children:
                    child = node.children[token] = _Node()
                else:
                    # overflow (or wildcard token) routes to the catch-all child
                    child = node.children.get(WILDCARD)
                    if child is None:
                        if not create:
                            return None
                        child = node.children[WILDCARD] = _Node()
            node = child
        return node

    def _best_match(self, leaf: _Node, tokens: list[str]) -> tuple[LogTemplate | None, float]:
        best, best_sim = None, 0.0
        for tpl in leaf.templates:
            sim = similarity(tokens, tpl.tokens)
            if sim > best_sim:
                best, best_sim = tpl, sim
        if best is not None and best_sim >= self.threshold:
            return best, best_sim
        return None, 0.0

    # -- public API ------------------------------------------------------

    def learn_masked(self, masked: str) -> int:
        """Assign (and update) a template for one pre-masked message; returns event_id."""
        cached = self._memo.get(masked)
        if cached is not None:
            self.templates[cached].occurrence_count += 1
            return cached
        tokens = masked.split() or ["<blank>"]
        leaf = self._leaf_for(tokens, create=True)
        tpl, _ = self._best_match(leaf, tokens)
        if tpl is None:
            tpl = LogTemplate(self._next_id, list(tokens), occurrence_count=1)
            self._next_id += 1
            self.templates[tpl.event_id] = tpl
            leaf.templates.append(tpl)
        else:
            changed = False
            for i, (a, t) in enumerate(zip(tokens, tpl.tokens)):
                if t != a and t != WILDCARD:
                    tpl.tokens[i] = WILDCARD
                    changed = True
            if changed:
                tpl.invalidate()
            tpl.occurrence_count += 1
        self._memo[masked] = tpl.event_id
        return tpl.event_id

    def parse_line(self, message: str) -> tuple[int, list[str]]:
        """Online parse of one raw message: returns (event_id, parameters)."""
        masked = self.masks.apply(message)
        event_id = self.learn_masked(masked)
        tpl = self.templates[event_id]
        tokens = masked.split() or ["<blank>"]
        params = [tokens[i] for i in tpl.param_positions]
        return event_id, params

    def extract_params(self, masked: str, event_id: int) -> list[str]:
        tokens = masked.split() or ["<blank>"]
        return [tokens[i] for i in self.templates[event_id].param_positions]


_DEFAULT_MASKSET = MaskSet()


@dataclass(slots=True)
class ParsedRecord:
    node_id: str
    timestamp: object
    level: object
    message: str
    source_line: int
    event_id: int
    parameters: list[str]


@dataclass
class ParsedBundle:
    """A JobBundle after template mining: records carry event ids."""

    job_id: str
    nodes: dict[str, list[ParsedRecord]]
    templates: dict[int, LogTemplate]
    metadata: dict = field(default_factory=dict)

    @property
    def node_ids(self) -> list[str]:
        return sorted(self.nodes)

    @property
    def total_records(self) -> int:
        return sum(len(r) for r in self.nodes.values())

    def signature(self, event_id: int) -> str:
        return self.templates[event_id].signature

    def signatures(self) -> set[str]:
        return {t.signature for t in self.templates.values()}

    def iter_records(self):
        for node_id in self.node_ids:
            yield from self.nodes[node_id]

    def to_jsonl(self, stream):
        """Dump parsed records as JSON lines: {node, ts, level, event_id, template, params}."""
        for rec in self.iter_records():
            stream.write(json.dumps({
                "node": rec.node_id,
                "ts": rec.timestamp.isoformat(),
                "level": rec.level.value,
                "event_id": rec.event_id,
                "template": self.signature(rec.event_id),
                "params": rec.parameters,
            }) + "\n")


def parse_bundle(bundle: JobBundle, depth: int = 4, threshold: float = 0.4,
                 max_children: int = 100, masks: MaskSet | None = None) -> ParsedBundle:
    """Mine templates over the whole job, then emit records against the frozen tree.

    Two passes keep the reconstruction property exact: parameters are extracted
    against each template's final wildcard layout, so substituting them back
    reproduces the masked message for every record.
    """
    parser = DrainParser(depth=depth, threshold=threshold,
                         max_children=max_children, masks=masks)
    apply_mask = parser.masks.apply
    learn = parser.learn_masked

    masked_per_node: dict[str, list[str]] = {}
    event_per_node: dict[str, list[int]] = {}
    for node_id in sorted(bundle.nodes):
        masked = [apply_mask(rec.message) for rec in bundle.nodes[node_id]]
        masked_per_node[node_id] = masked
        event_per_node[node_id] = [learn(m) for m in masked]

    templates = parser.templates
    param_cache: dict[str, list[str]] = {}
    nodes: dict[str, list[ParsedRecord]] = {}
    for node_id in sorted(bundle.nodes):
        out = []
        raw_records = bundle.nodes[node_id]
        masked = masked_per_node[node_id]
        events = event_per_node[node_id]
        for rec, m, eid in zip(raw_records, masked, events):
            params = param_cache.get(m)
            if params is None:
                params = param_cache[m] = parser.extract_params(m, eid)
            out.append(ParsedRecord(rec.node_id, rec.timestamp, rec.level,
                                    rec.message, rec.source_line, eid, params))
        nodes[node_id] = out

    return ParsedBundle(job_id=bundle.job_id, nodes=nodes, templates=templates,
                        metadata=dict(bundle.metadata))
