"""Three-level category taxonomy with ``parent@child`` qualified names."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable

from .errors import FormatError

SEPARATOR = "@"
DEPTH = 3


@dataclass(frozen=True)
class CategoryNode:
    id: int
    name: str
    level: int
    parent_id: int | None
    qualified_name: str


def qualify(parent_name: str, child_name: str) -> str:
    for part in (parent_name, child_name):
        if SEPARATOR in part:
            raise FormatError(f"category name {part!r} contains the reserved separator {SEPARATOR!r}")
    return f"{parent_name}{SEPARATOR}{child_name}"


def parse_qualified(name: str) -> tuple[str, str]:
    if name.count(SEPARATOR) != 1:
        raise FormatError(f"qualified name {name!r} must contain exactly one {SEPARATOR!r}")
    parent, child = name.split(SEPARATOR)
    return parent, child


def _check_name(name, where: str) -> str:
    if not isinstance(name, str):
        raise FormatError(f"{where}: category name must be a string, got {name!r}")
    name = name.strip()
    if not name:
        raise FormatError(f"{where}: empty category name")
    if SEPARATOR in name:
        raise FormatError(f"{where}: category name {name!r} contains {SEPARATOR!r}")
    return name


@dataclass
class LabelTree:
    nodes: list[CategoryNode] = field(default_factory=list)
    children: dict[int, list[int]] = field(default_factory=dict)
    level_index: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        self._by_qualified = {n.qualified_name: n.id for n in self.nodes}

    def __len__(self):
        return len(self.nodes)

    def node(self, node_id: int) -> CategoryNode:
        try:
            return self.nodes[node_id]
        except (IndexError, TypeError):
            raise KeyError(f"unknown node id {node_id!r}") from None

    def parent(self, node_id: int) -> CategoryNode | None:
        pid = self.node(node_id).parent_id
        return None if pid is None else self.nodes[pid]

    def roots(self) -> list[CategoryNode]:
        return [self.nodes[i] for i in self.level_index.get(1, [])]

    def root_by_name(self, name: str) -> CategoryNode:
        for r in self.roots():
            if r.name == name:
                return r
        raise KeyError(f"unknown level-1 category {name!r}")

    def lookup(self, qualified_name: str) -> CategoryNode:
        try:
            return self.nodes[self._by_qualified[qualified_name]]
        except KeyError:
            raise KeyError(f"unknown category {qualified_name!r}") from None

    def ancestor_at(self, node_id: int, level: int) -> CategoryNode:
        node = self.node(node_id)
        while node.level > level:
            node = self.nodes[node.parent_id]
        if node.level != level:
            raise KeyError(f"node {node_id} has no ancestor at level {level}")
        return node

    def path(self, node_id: int) -> tuple[str, ...]:
        names = []
        node: CategoryNode | None = self.node(node_id)
        while node is not None:
            names.append(node.name)
            node = None if node.parent_id is None else self.nodes[node.parent_id]
        return tuple(reversed(names))

    def to_json(self) -> str:
        doc = [{"id": n.id, "name": n.name, "level": n.level, "parent_id": n.parent_id} for n in self.nodes]
        return json.dumps(doc, ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LabelTree":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"label tree JSON: {exc}") from None
        if not isinstance(doc, list):
            raise FormatError("label tree JSON must be an array of nodes")
        doc = sorted(doc, key=lambda d: d["id"])
        if [d["id"] for d in doc] != list(range(len(doc))):
            raise FormatError("label tree node ids must be dense 0..n-1")
        return _assemble([(d["name"], d["level"], d["parent_id"]) for d in doc])

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


def _assemble(rows: list[tuple[str, int, int | None]]) -> LabelTree:
    """Validate (name, level, parent_id) rows, indexed by id, and derive names and indices."""
    nodes: list[CategoryNode] = []
    children: dict[int, list[int]] = {i: [] for i in range(len(rows))}
    seen_qualified: dict[str, int] = {}
    seen_pairs: set[tuple[int | None, str]] = set()
    for i, (name, level, pid) in enumerate(rows):
        name = _check_name(name, f"node {i}")
        if not 1 <= level <= DEPTH:
            raise FormatError(f"node {i}: level {level} outside 1..{DEPTH}")
        if (level == 1) != (pid is None):
            raise FormatError(f"node {i}: level-1 nodes and only they have no parent")
        if pid is not None:
            if not 0 <= pid < i:
                raise FormatError(f"node {i}: parent {pid} must precede it")
            parent = nodes[pid]
            if parent.level != level - 1:
                raise FormatError(f"node {i}: level {level} under a level-{parent.level} parent")
            children[pid].append(i)
        qname = qualify(nodes[pid].name, name) if level >= 3 else name
        if (pid, name) in seen_pairs:
            raise FormatError(f"node {i}: duplicate child {name!r} under parent {pid}")
        if qname in seen_qualified:
            raise FormatError(f"node {i}: qualified name {qname!r} already used by node {seen_qualified[qname]}")
        seen_pairs.add((pid, name))
        seen_qualified[qname] = i
        nodes.append(CategoryNode(i, name, level, pid, qname))

    level_index: dict[int, list[int]] = {}
    for lvl in range(1, DEPTH + 1):
        ids = [n.id for n in nodes if n.level == lvl]
        level_index[lvl] = sorted(ids, key=lambda j: nodes[j].qualified_name)
    for ids in children.values():
        ids.sort(key=lambda j: nodes[j].qualified_name)
    return LabelTree(nodes, children, level_index)


def build_tree(records: Iterable[tuple[str, str, str]]) -> LabelTree:
    """Build the tree from ``(cat1, cat2, cat3)`` name triples.

    Nodes are keyed by their full path, so equal names under different parents stay
    distinct. Ids are assigned by (level, path), which makes the result independent of
    record order and duplication.
    """
    paths: set[tuple[str, ...]] = set()
    for lineno, rec in enumerate(records, start=1):
        if len(rec) != DEPTH:
            raise FormatError(f"record {lineno}: expected {DEPTH} category names, got {len(rec)}")
        names = tuple(_check_name(n, f"record {lineno}") for n in rec)
        for depth in range(1, DEPTH + 1):
            paths.add(names[:depth])

    ordered = sorted(paths, key=lambda p: (len(p), p))
    id_of = {p: i for i, p in enumerate(ordered)}
    rows = [(p[-1], len(p), id_of[p[:-1]] if len(p) > 1 else None) for p in ordered]
    return _assemble(rows)


def class_ids_at(tree: LabelTree, level: int, root: int | None = None) -> list[int]:
    if not 1 <= level <= DEPTH:
        raise ValueError(f"level must be in 1..{DEPTH}, got {level}")
    ids = tree.level_index.get(level, [])
    if root is None:
        return list(ids)
    root_node = tree.node(root)
    if root_node.level != 1:
        raise KeyError(f"node {root} is not a level-1 category")
    return [i for i in ids if tree.ancestor_at(i, 1).id == root]


def classes_at(tree: LabelTree, level: int, root: int | None = None) -> list[str]:
    """Qualified class names at ``level`` (optionally under one level-1 root), in class-index order."""
    return [tree.nodes[i].qualified_name for i in class_ids_at(tree, level, root)]
