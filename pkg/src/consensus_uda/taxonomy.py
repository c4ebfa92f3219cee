"""Label taxonomies, cross-taxonomy mappings and their text config.

Config grammar (line oriented, ``#`` comments, blank lines ignored)::

    [taxonomy greenhouse]
    0 Plant
    1 Artificial_object
    ...
    [mapping forest -> greenhouse]
    Grass -> Plant
    ...

Every source class must be mapped; a partial mapping block is an error.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, LabelError

IGNORE_ID = 255
MAX_CLASSES = 254

_NAME = r"[A-Za-z0-9_]+"
_TAXONOMY_HEADER = re.compile(rf"^\[taxonomy\s+({_NAME})\s*\]$")
_MAPPING_HEADER = re.compile(rf"^\[mapping\s+({_NAME})\s*->\s*({_NAME})\s*\]$")
_CLASS_LINE = re.compile(rf"^(\d+)\s+({_NAME})$")
_RULE_LINE = re.compile(rf"^({_NAME})\s+->\s+({_NAME})$")
_NAME_ONLY = re.compile(rf"^{_NAME}$")


@dataclass(frozen=True)
class Taxonomy:
    """Ordered class set; a class's id is its position in ``classes``."""

    name: str
    classes: tuple[str, ...]
    ignore_id = IGNORE_ID

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if not _NAME_ONLY.match(self.name):
            raise ConfigError(f"invalid taxonomy name {self.name!r}")
        if not self.classes:
            raise ConfigError(f"taxonomy {self.name} has no classes")
        if len(self.classes) > MAX_CLASSES:
            raise ConfigError(
                f"taxonomy {self.name} has {len(self.classes)} classes (max {MAX_CLASSES})"
            )
        seen = set()
        for cls in self.classes:
            if not _NAME_ONLY.match(cls):
                raise ConfigError(f"invalid class name {cls!r} in taxonomy {self.name}")
            if cls in seen:
                raise ConfigError(f"duplicate class name {cls!r} in taxonomy {self.name}")
            seen.add(cls)

    def __len__(self):
        return len(self.classes)

    def id_of(self, class_name: str) -> int:
        try:
            return self.classes.index(class_name)
        except ValueError:
            raise ConfigError(f"unknown class {class_name!r} in taxonomy {self.name}") from None

    def ids_named(self, class_name: str) -> list[int]:
        """Ids whose name matches case-insensitively (empty if none)."""
        key = class_name.lower()
        return [i for i, c in enumerate(self.classes) if c.lower() == key]


@dataclass(frozen=True)
class LabelMapping:
    """Table from source class ids to target class ids.

    ``table[s]`` is the target id for source id ``s``; ``None`` marks an
    unmapped source class (only reachable when built by hand, the config
    parser rejects it).
    """

    source: str
    target: str
    table: tuple

    def __post_init__(self):
        object.__setattr__(self, "table", tuple(self.table))

    @classmethod
    def identity(cls, taxonomy: Taxonomy) -> "LabelMapping":
        return cls(taxonomy.name, taxonomy.name, tuple(range(len(taxonomy))))

    def lookup(self) -> np.ndarray:
        """256-entry uint8 lookup table; 255 maps to 255, unmapped ids to 255."""
        if any(t is None for t in self.table):
            missing = [i for i, t in enumerate(self.table) if t is None]
            raise LabelError(f"mapping {self.source}->{self.target} is partial (ids {missing})")
        lut = np.full(256, IGNORE_ID, dtype=np.uint8)
        lut[: len(self.table)] = np.asarray(self.table, dtype=np.int64)
        return lut

    def then(self, other: "LabelMapping") -> "LabelMapping":
        """Composition: apply ``self`` first, then ``other``."""
        if other.source != self.target:
            raise ConfigError(f"cannot compose {self.source}->{self.target} with {other.source}->{other.target}")
        table = tuple(IGNORE_ID if t == IGNORE_ID else other.table[t] for t in self.table)
        return LabelMapping(self.source, other.target, table)


class MappingIssue(NamedTuple):
    kind: str  # "totality" or "range"
    message: str


def validate_mapping(mapping: LabelMapping, source: Taxonomy, target: Taxonomy) -> list[MappingIssue]:
    """Return every problem found with ``mapping``; an empty list means well-formed."""
    issues = []
    if mapping.source != source.name:
        issues.append(MappingIssue("totality", f"mapping source {mapping.source!r} != taxonomy {source.name!r}"))
    if mapping.target != target.name:
        issues.append(MappingIssue("range", f"mapping target {mapping.target!r} != taxonomy {target.name!r}"))
    for sid, cls in enumerate(source.classes):
        if sid >= len(mapping.table) or mapping.table[sid] is None:
            issues.append(MappingIssue("totality", f"unmapped source class {cls}"))
    for sid in range(len(source), len(mapping.table)):
        issues.append(MappingIssue("totality", f"table entry {sid} has no source class"))
    for sid, tid in enumerate(mapping.table[: len(source)]):
        if tid is None:
            continue
        if not isinstance(tid, (int, np.integer)) or not 0 <= tid < len(target):
            issues.append(
                MappingIssue("range", f"source class {source.classes[sid]} maps to invalid target id {tid}")
            )
    return issues


def apply_mapping(mapping: LabelMapping, labels: np.ndarray) -> np.ndarray:
    """Route every pixel through ``mapping``; 255 stays 255."""
    labels = np.asarray(labels)
    k = len(mapping.table)
    bad = (labels >= k) & (labels != IGNORE_ID)
    if bad.any():
        coord = tuple(int(c) for c in np.argwhere(bad)[0])
        raise LabelError(
            f"invalid label {int(labels[coord])} at pixel {coord} for source {mapping.source} (K={k})"
        )
    return mapping.lookup()[labels.astype(np.intp)]


def parse_config(text: str) -> tuple[list[Taxonomy], list[LabelMapping]]:
    """Parse taxonomy and mapping blocks; raise ConfigError with the line number."""
    blocks = []  # (kind, header_line, header_groups, [(line_no, groups)])
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            m = _TAXONOMY_HEADER.match(line)
            if m:
                blocks.append(("taxonomy", line_no, m.groups(), []))
                continue
            m = _MAPPING_HEADER.match(line)
            if m:
                blocks.append(("mapping", line_no, m.groups(), []))
                continue
            raise ConfigError(f"malformed block header {line!r}", line_no)
        if not blocks:
            raise ConfigError(f"entry outside any block: {line!r}", line_no)
        kind, _, _, entries = blocks[-1]
        pattern = _CLASS_LINE if kind == "taxonomy" else _RULE_LINE
        m = pattern.match(line)
        if not m:
            expected = "'<id> <name>'" if kind == "taxonomy" else "'<source> -> <target>'"
            raise ConfigError(f"syntax error, expected {expected}: {line!r}", line_no)
        entries.append((line_no, m.groups()))

    taxonomies: dict[str, Taxonomy] = {}
    mapping_blocks = []
    for kind, header_line, groups, entries in blocks:
        if not entries:
            raise ConfigError(f"empty {kind} block", header_line)
        if kind == "mapping":
            mapping_blocks.append((header_line, groups, entries))
            continue
        (name,) = groups
        if name in taxonomies:
            raise ConfigError(f"duplicate taxonomy name {name!r}", header_line)
        taxonomies[name] = _build_taxonomy(name, header_line, entries)

    mappings = []
    seen_pairs = set()
    for header_line, (src_name, tgt_name), entries in mapping_blocks:
        for n in (src_name, tgt_name):
            if n not in taxonomies:
                raise ConfigError(f"mapping references unknown taxonomy {n!r}", header_line)
        if (src_name, tgt_name) in seen_pairs:
            raise ConfigError(f"duplicate mapping {src_name} -> {tgt_name}", header_line)
        seen_pairs.add((src_name, tgt_name))
        src, tgt = taxonomies[src_name], taxonomies[tgt_name]
        table: list = [None] * len(src)
        for line_no, (s, t) in entries:
            if s not in src.classes:
                raise ConfigError(f"unknown class {s!r} in taxonomy {src_name}", line_no)
            if t not in tgt.classes:
                raise ConfigError(f"unknown class {t!r} in taxonomy {tgt_name}", line_no)
            sid = src.id_of(s)
            if table[sid] is not None:
                raise ConfigError(f"source class {s} mapped twice", line_no)
            table[sid] = tgt.id_of(t)
        mapping = LabelMapping(src_name, tgt_name, tuple(table))
        issues = validate_mapping(mapping, src, tgt)
        if issues:
            raise ConfigError("; ".join(i.message for i in issues), header_line)
        mappings.append(mapping)
    return list(taxonomies.values()), mappings


def _build_taxonomy(name, header_line, entries) -> Taxonomy:
    by_id: dict[int, str] = {}
    names = set()
    for line_no, (id_text, cls) in entries:
        cid = int(id_text)
        if cid in by_id:
            raise ConfigError(f"duplicate class id {cid} in taxonomy {name}", line_no)
        if cls in names:
            raise ConfigError(f"duplicate class name {cls!r} in taxonomy {name}", line_no)
        if cid == IGNORE_ID:
            raise ConfigError(f"class id {IGNORE_ID} is reserved for ignore", line_no)
        by_id[cid] = cls
        names.add(cls)
    k = len(by_id)
    if sorted(by_id) != list(range(k)):
        missing = sorted(set(range(k)) - set(by_id))
        raise ConfigError(f"non-contiguous class ids in taxonomy {name} (missing {missing})", header_line)
    if k > MAX_CLASSES:
        raise ConfigError(f"taxonomy {name} has {k} classes (max {MAX_CLASSES})", header_line)
    return Taxonomy(name, tuple(by_id[i] for i in range(k)))


def dump_config(taxonomies: Sequence[Taxonomy], mappings: Sequence[LabelMapping]) -> str:
    """Serialize back to the config grammar; ``parse_config`` inverts this."""
    by_name = {t.name: t for t in taxonomies}
    out = []
    for tax in taxonomies:
        out.append(f"[taxonomy {tax.name}]")
        out.extend(f"{i} {c}" for i, c in enumerate(tax.classes))
        out.append("")
    for m in mappings:
        src, tgt = by_name[m.source], by_name[m.target]
        out.append(f"[mapping {m.source} -> {m.target}]")
        out.extend(f"{src.classes[s]} -> {tgt.classes[t]}" for s, t in enumerate(m.table))
        out.append("")
    return "\n".join(out)


class Config(NamedTuple):
    taxonomies: dict[str, Taxonomy]
    mappings: dict[tuple[str, str], LabelMapping]

    def mapping(self, source: str, target: str) -> LabelMapping:
        try:
            return self.mappings[(source, target)]
        except KeyError:
            raise ConfigError(f"no mapping {source} -> {target} in config") from None

    def taxonomy(self, name: str) -> Taxonomy:
        try:
            return self.taxonomies[name]
        except KeyError:
            raise ConfigError(f"no taxonomy {name!r} in config") from None


def load_config(path=None) -> Config:
    """Load a config file, or the bundled label-mapping config when ``path`` is None."""
    if path is None:
        text = resources.files("consensus_uda").joinpath("data/label_mapping.cfg").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    taxonomies, mappings = parse_config(text)
    return Config({t.name: t for t in taxonomies}, {(m.source, m.target): m for m in mappings})
