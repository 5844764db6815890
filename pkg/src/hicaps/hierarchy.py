"""Class-label trees: parsing, validation, label expansion, consistency.

A label tree is an ordered list of levels (coarse first) where every class
at level n > 0 has exactly one parent at level n-1 and every parent class
has at least one child.  Multi-level labels are plain tuples of per-level
class ids ordered coarse to fine.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources

import numpy as np

FORMAT_TAG = "hicaps-hierarchy"
FORMAT_VERSION = 1

BUNDLED = ("mnist", "fashion_mnist", "cifar10", "cifar100")


class HierarchyError(ValueError):
    """Raised for malformed hierarchy files or out-of-range labels."""


@dataclass(frozen=True)
class Level:
    name: str
    num_classes: int


class LabelTree:
    """Immutable class hierarchy; share freely across threads."""

    def __init__(self, levels, parent_maps, class_names=None):
        self.levels = tuple(Level(l.name, l.num_classes) if isinstance(l, Level)
                            else Level(*l) for l in levels)
        self.parent_maps = tuple(
            np.asarray(m, dtype=np.int64).copy() for m in parent_maps
        )
        for m in self.parent_maps:
            m.setflags(write=False)
        if class_names is None:
            class_names = tuple(tuple("" for _ in range(l.num_classes))
                                for l in self.levels)
        self.class_names = tuple(tuple(names) for names in class_names)
        if len(self.parent_maps) != len(self.levels) - 1:
            raise HierarchyError(
                f"need {len(self.levels) - 1} parent maps for "
                f"{len(self.levels)} levels, got {len(self.parent_maps)}"
            )

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def class_counts(self):
        return tuple(l.num_classes for l in self.levels)

    @property
    def level_names(self):
        return tuple(l.name for l in self.levels)

    def parent_of(self, level: int, cls: int) -> int:
        """Parent class id at ``level - 1`` of class ``cls`` at ``level``."""
        if level < 1 or level >= self.num_levels:
            raise HierarchyError(f"level {level} has no parent level")
        return int(self.parent_maps[level - 1][cls])

    def expand(self, fine_label: int):
        """Full coarse-to-fine label tuple for a fine class id."""
        k_fine = self.levels[-1].num_classes
        if not 0 <= fine_label < k_fine:
            raise HierarchyError(
                f"fine label {fine_label} out of range [0, {k_fine})"
            )
        chain = [int(fine_label)]
        for level in range(self.num_levels - 1, 0, -1):
            chain.append(self.parent_of(level, chain[-1]))
        return tuple(reversed(chain))

    def expand_all(self, fine_labels) -> np.ndarray:
        """Vectorized expand: [M] fine ids -> [M, num_levels] id matrix."""
        fine = np.asarray(fine_labels, dtype=np.int64)
        k_fine = self.levels[-1].num_classes
        if fine.size and (fine.min() < 0 or fine.max() >= k_fine):
            bad = fine[(fine < 0) | (fine >= k_fine)][0]
            raise HierarchyError(f"fine label {bad} out of range [0, {k_fine})")
        out = np.empty((fine.shape[0], self.num_levels), dtype=np.int64)
        out[:, -1] = fine
        for level in range(self.num_levels - 1, 0, -1):
            out[:, level - 1] = self.parent_maps[level - 1][out[:, level]]
        return out


def validate(tree: LabelTree):
    """Structural check; returns a list of violation strings (empty == ok)."""
    violations = []
    if tree.num_levels < 2:
        violations.append(f"need at least 2 levels, have {tree.num_levels}")
    for i, level in enumerate(tree.levels):
        if level.num_classes < 1:
            violations.append(f"level {level.name!r} has no classes")
        if len(tree.class_names[i]) != level.num_classes:
            violations.append(
                f"level {level.name!r} declares {level.num_classes} classes but "
                f"names {len(tree.class_names[i])}"
            )
    for n in range(1, tree.num_levels):
        child, parent = tree.levels[n], tree.levels[n - 1]
        pmap = tree.parent_maps[n - 1]
        if pmap.shape != (child.num_classes,):
            violations.append(
                f"parent map {child.name!r}->{parent.name!r} covers "
                f"{pmap.shape[0]} of {child.num_classes} classes"
            )
            continue
        out_of_range = np.flatnonzero((pmap < 0) | (pmap >= parent.num_classes))
        for c in out_of_range:
            violations.append(
                f"class {c} at level {child.name!r} points to nonexistent "
                f"{parent.name!r} id {pmap[c]}"
            )
        childless = set(range(parent.num_classes)) - set(
            int(p) for p in pmap if 0 <= p < parent.num_classes
        )
        for p in sorted(childless):
            violations.append(
                f"class {p} at level {parent.name!r} has no children"
            )
    return violations


def consistency_rate(predictions, tree: LabelTree) -> float:
    """Fraction of multi-level predictions forming ancestor-consistent chains.

    ``predictions`` is an [M, num_levels] array of per-level class ids
    (typically per-level argmaxes, which need not be consistent).
    """
    preds = np.asarray(predictions, dtype=np.int64)
    if preds.ndim != 2 or preds.shape[1] != tree.num_levels:
        raise HierarchyError(
            f"predictions must be [M, {tree.num_levels}], got {preds.shape}"
        )
    if preds.shape[0] == 0:
        raise HierarchyError("consistency_rate of an empty prediction set")
    ok = np.ones(preds.shape[0], dtype=bool)
    for n in range(1, tree.num_levels):
        ok &= tree.parent_maps[n - 1][preds[:, n]] == preds[:, n - 1]
    return float(ok.mean())


# ---------------------------------------------------------------------------
# file format
#
#   hicaps-hierarchy v1
#   level <name> <num_classes>        (one per level, coarse first)
#   chain <id>:<name> ... <id>:<name> (one per fine class, coarse to fine)
#
# '#' starts a comment.  The parser rejects files whose chains violate the
# tree invariants (duplicate fine classes, inconsistent parents, childless
# parents, out-of-range ids).

_TOKEN = re.compile(r"^(\d+):([A-Za-z0-9_\-]+)$")


def parse_tree(text: str) -> LabelTree:
    levels = []
    chains = []
    saw_header = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if not saw_header:
            parts = line.split()
            if len(parts) != 2 or parts[0] != FORMAT_TAG or parts[1] != f"v{FORMAT_VERSION}":
                raise HierarchyError(
                    f"line {lineno}: expected header '{FORMAT_TAG} v{FORMAT_VERSION}'"
                )
            saw_header = True
            continue
        fields = line.split()
        if fields[0] == "level":
            if len(fields) != 3:
                raise HierarchyError(f"line {lineno}: 'level <name> <count>'")
            if chains:
                raise HierarchyError(f"line {lineno}: level after chain lines")
            try:
                count = int(fields[2])
            except ValueError:
                raise HierarchyError(f"line {lineno}: bad class count {fields[2]!r}")
            levels.append(Level(fields[1], count))
        elif fields[0] == "chain":
            entries = []
            for tok in fields[1:]:
                m = _TOKEN.match(tok)
                if not m:
                    raise HierarchyError(
                        f"line {lineno}: bad chain token {tok!r} (want id:name)"
                    )
                entries.append((int(m.group(1)), m.group(2)))
            if len(entries) != len(levels):
                raise HierarchyError(
                    f"line {lineno}: chain has {len(entries)} entries for "
                    f"{len(levels)} levels"
                )
            chains.append((lineno, entries))
        else:
            raise HierarchyError(f"line {lineno}: unknown directive {fields[0]!r}")
    if not saw_header:
        raise HierarchyError("empty hierarchy file")
    if len(levels) < 2:
        raise HierarchyError(f"need at least 2 levels, found {len(levels)}")
    if len(chains) != levels[-1].num_classes:
        raise HierarchyError(
            f"expected one chain per fine class ({levels[-1].num_classes}), "
            f"found {len(chains)}"
        )

    names = [[None] * l.num_classes for l in levels]
    parent_maps = [np.full(l.num_classes, -1, dtype=np.int64) for l in levels[1:]]
    seen_fine = set()
    for lineno, entries in chains:
        for depth, (cid, cname) in enumerate(entries):
            if not 0 <= cid < levels[depth].num_classes:
                raise HierarchyError(
                    f"line {lineno}: id {cid} out of range for level "
                    f"{levels[depth].name!r} ({levels[depth].num_classes} classes)"
                )
            if names[depth][cid] is None:
                names[depth][cid] = cname
            elif names[depth][cid] != cname:
                raise HierarchyError(
                    f"line {lineno}: class {cid} at level {levels[depth].name!r} "
                    f"named both {names[depth][cid]!r} and {cname!r}"
                )
        fine_id = entries[-1][0]
        if fine_id in seen_fine:
            raise HierarchyError(f"line {lineno}: duplicate fine class {fine_id}")
        seen_fine.add(fine_id)
        for depth in range(1, len(entries)):
            child_id, parent_id = entries[depth][0], entries[depth - 1][0]
            prev = parent_maps[depth - 1][child_id]
            if prev == -1:
                parent_maps[depth - 1][child_id] = parent_id
            elif prev != parent_id:
                raise HierarchyError(
                    f"line {lineno}: class {child_id} at level "
                    f"{levels[depth].name!r} has two parents ({prev} and {parent_id})"
                )
    for depth, level in enumerate(levels):
        missing = [i for i, n in enumerate(names[depth]) if n is None]
        if missing:
            raise HierarchyError(
                f"level {level.name!r}: classes {missing} never appear in a chain"
            )
    tree = LabelTree(levels, parent_maps, [tuple(n) for n in names])
    violations = validate(tree)
    if violations:
        raise HierarchyError("; ".join(violations))
    return tree


def format_tree(tree: LabelTree) -> str:
    """Serialize a tree to the text format (inverse of parse_tree)."""
    lines = [f"{FORMAT_TAG} v{FORMAT_VERSION}"]
    for level in tree.levels:
        lines.append(f"level {level.name} {level.num_classes}")
    for fine in range(tree.levels[-1].num_classes):
        chain = tree.expand(fine)
        toks = " ".join(
            f"{cid}:{tree.class_names[d][cid] or f'c{cid}'}"
            for d, cid in enumerate(chain)
        )
        lines.append(f"chain {toks}")
    return "\n".join(lines) + "\n"


def load_tree(path) -> LabelTree:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_tree(fh.read())


def bundled_tree(name: str) -> LabelTree:
    """Load one of the shipped hierarchies: mnist, fashion_mnist, cifar10, cifar100."""
    if name not in BUNDLED:
        raise HierarchyError(f"no bundled hierarchy {name!r}; have {BUNDLED}")
    text = (
        resources.files("hicaps").joinpath(f"hierarchies/{name}.txt").read_text("utf-8")
    )
    return parse_tree(text)
