"""Label ontology: an immutable DAG of superclass relationships.

An edge ``parent -> child`` means ``parent`` is a superclass of ``child``.
Ancestor sets are precomputed at construction because inference and
training query them for every label of every instance.
"""
import heapq
import warnings
from dataclasses import dataclass
from typing import Iterable

from .errors import CycleError, ParseError, UnknownLabelError

__all__ = [
    "Ontology",
    "AncestralClosure",
    "Diagnostic",
    "parse_edge_list",
    "parse_obo_subset",
    "ancestors",
    "ancestral_closure",
    "assumption_diagnostic",
    "load_ontology",
]


@dataclass(frozen=True)
class AncestralClosure:
    label: str
    ordered_members: tuple

    def __contains__(self, item):
        return item in self.ordered_members

    def __len__(self):
        return len(self.ordered_members)


@dataclass(frozen=True)
class Diagnostic:
    is_tree: bool
    multi_parent_labels: list


class Ontology:
    """Immutable label DAG.

    Parameters
    ----------
    nodes : iterable of str
        Label identifiers. Order is kept and used to break ties when a
        topological order is needed.
    edges : iterable of (parent, child)
        Superclass edges. Duplicates are collapsed. Both endpoints must be
        listed in ``nodes``.

    Raises
    ------
    CycleError
        If the edges contain a directed cycle.
    """

    def __init__(self, nodes: Iterable[str] = (), edges: Iterable[tuple] = ()):
        node_list = []
        seen = set()
        for n in nodes:
            if n not in seen:
                seen.add(n)
                node_list.append(n)
        edge_list = []
        edge_seen = set()
        for parent, child in edges:
            for endpoint in (parent, child):
                if endpoint not in seen:
                    raise UnknownLabelError(endpoint)
            if (parent, child) not in edge_seen:
                edge_seen.add((parent, child))
                edge_list.append((parent, child))

        self._nodes = tuple(node_list)
        self._edges = tuple(edge_list)
        self._index = {n: i for i, n in enumerate(node_list)}
        parents = {n: set() for n in node_list}
        children = {n: set() for n in node_list}
        for parent, child in edge_list:
            parents[child].add(parent)
            children[parent].add(child)
        self._parents = {n: frozenset(p) for n, p in parents.items()}
        self._children = {n: frozenset(c) for n, c in children.items()}
        self._topo = self._toposort()
        self._topo_rank = {n: i for i, n in enumerate(self._topo)}

        anc = {}
        for n in self._topo:
            acc = set(self._parents[n])
            for p in self._parents[n]:
                acc |= anc[p]
            anc[n] = frozenset(acc)
        self._ancestors = anc

    def _toposort(self):
        # Kahn's algorithm, ready nodes released in declaration order.
        indegree = {n: len(self._parents[n]) for n in self._nodes}
        heap = [self._index[n] for n in self._nodes if indegree[n] == 0]
        heapq.heapify(heap)
        order = []
        while heap:
            n = self._nodes[heapq.heappop(heap)]
            order.append(n)
            for c in self._children[n]:
                indegree[c] -= 1
                if indegree[c] == 0:
                    heapq.heappush(heap, self._index[c])
        if len(order) != len(self._nodes):
            remaining = {n for n in self._nodes if indegree[n] > 0}
            raise CycleError(self._find_cycle(remaining))
        return tuple(order)

    def _find_cycle(self, remaining):
        # Every node left after Kahn's algorithm has a parent that is also
        # left, so walking parents must revisit a node.
        start = min(remaining, key=self._index.__getitem__)
        path, pos = [], {}
        n = start
        while n not in pos:
            pos[n] = len(path)
            path.append(n)
            n = min((p for p in self._parents[n] if p in remaining), key=self._index.__getitem__)
        cycle = path[pos[n]:]
        cycle.reverse()  # parent-to-child direction
        return cycle

    @property
    def nodes(self):
        return self._nodes

    @property
    def edges(self):
        return self._edges

    @property
    def topological_order(self):
        return self._topo

    def __len__(self):
        return len(self._nodes)

    def __contains__(self, label):
        return label in self._index

    def __eq__(self, other):
        if not isinstance(other, Ontology):
            return NotImplemented
        return set(self._nodes) == set(other._nodes) and set(self._edges) == set(other._edges)

    def __hash__(self):
        return hash((frozenset(self._nodes), frozenset(self._edges)))

    def __repr__(self):
        return f"Ontology({len(self._nodes)} nodes, {len(self._edges)} edges)"

    def _check(self, label):
        if label not in self._index:
            raise UnknownLabelError(label)

    def parents(self, label) -> frozenset:
        self._check(label)
        return self._parents[label]

    def children(self, label) -> frozenset:
        self._check(label)
        return self._children[label]

    def ancestors(self, label) -> frozenset:
        self._check(label)
        return self._ancestors[label]

    def closure(self, label) -> AncestralClosure:
        self._check(label)
        members = sorted(self._ancestors[label] | {label}, key=self._topo_rank.__getitem__)
        return AncestralClosure(label, tuple(members))

    def roots(self):
        return [n for n in self._nodes if not self._parents[n]]

    def leaves(self):
        return [n for n in self._nodes if not self._children[n]]

    def depth(self, label) -> int:
        """Length of the longest parent chain above ``label`` (roots are 0)."""
        return self._depths()[label]

    def _depths(self):
        if not hasattr(self, "_depth_cache"):
            depth = {}
            for n in self._topo:
                depth[n] = 1 + max((depth[p] for p in self._parents[n]), default=-1)
            self._depth_cache = depth
        return self._depth_cache

    def depth_histogram(self):
        hist = {}
        for d in self._depths().values():
            hist[d] = hist.get(d, 0) + 1
        return dict(sorted(hist.items()))

    def to_edge_list(self) -> str:
        return "".join(f"{p}\t{c}\n" for p, c in self._edges)


def ancestors(ont: Ontology, label) -> frozenset:
    """All labels with a directed path to ``label``, excluding itself."""
    return ont.ancestors(label)


def ancestral_closure(ont: Ontology, label) -> AncestralClosure:
    """``{label} | ancestors(label)`` in topological order, ancestors first."""
    return ont.closure(label)


def assumption_diagnostic(ont: Ontology) -> Diagnostic:
    """Report labels with more than one parent.

    On a tree every closure is a chain, so the factorized product is exact.
    Multi-parent labels are where the conditional-independence assumption
    may fail.
    """
    multi = [n for n in ont.nodes if len(ont.parents(n)) >= 2]
    return Diagnostic(is_tree=not multi, multi_parent_labels=multi)


def parse_edge_list(text: str) -> Ontology:
    """Parse ``parent<TAB>child`` lines. ``#`` starts a comment line."""
    nodes, edges = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = [t.strip() for t in line.split("\t")]
        if len(tokens) != 2 or not all(tokens):
            raise ParseError(f"expected 'parent<TAB>child', got {raw!r}", lineno)
        parent, child = tokens
        nodes.extend((parent, child))
        edges.append((parent, child))
    return Ontology(nodes, edges)


def parse_obo_subset(text: str, strict: bool = False) -> Ontology:
    """Parse ``[Term]`` stanzas of an OBO file.

    Only ``id``, ``is_a`` and ``is_obsolete`` are read. Obsolete terms are
    skipped. An ``is_a`` whose target is never defined (or is obsolete) is
    dropped with a warning, or raises ``ParseError`` when ``strict``.
    """
    terms = []  # (id, [parents], obsolete, lineno)
    current = None
    in_term = False

    def flush():
        if current is None:
            return
        if current["id"] is None:
            raise ParseError("[Term] stanza without id", current["lineno"])
        terms.append(current)

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("!"):
            continue
        if line.startswith("[") and line.endswith("]"):
            flush()
            in_term = line == "[Term]"
            current = {"id": None, "is_a": [], "obsolete": False, "lineno": lineno} if in_term else None
            continue
        if not in_term:
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise ParseError(f"expected 'key: value', got {raw!r}", lineno)
        key = key.strip()
        value = value.split("!", 1)[0].strip()
        if key == "id":
            current["id"] = value
        elif key == "is_a":
            target = value.split()[0] if value else ""
            if not target:
                raise ParseError("empty is_a", lineno)
            current["is_a"].append((target, lineno))
        elif key == "is_obsolete":
            current["obsolete"] = value.lower() == "true"
    flush()

    live = [t for t in terms if not t["obsolete"]]
    defined = {t["id"] for t in live}
    nodes = [t["id"] for t in live]
    edges = []
    for t in live:
        for target, lineno in t["is_a"]:
            if target not in defined:
                msg = f"is_a target {target!r} of {t['id']!r} is not a defined term"
                if strict:
                    raise ParseError(msg, lineno)
                warnings.warn(f"line {lineno}: {msg}; edge dropped", stacklevel=2)
                continue
            edges.append((target, t["id"]))
    return Ontology(nodes, edges)


def load_ontology(path, fmt: str = "edges", strict: bool = False) -> Ontology:
    """Read an ontology file in ``edges`` or ``obo`` format."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if fmt == "edges":
        return parse_edge_list(text)
    if fmt == "obo":
        return parse_obo_subset(text, strict=strict)
    raise ValueError(f"unknown ontology format {fmt!r}")
