"""Class vocabulary, coarse-category groups and the relatedness relation."""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Set

import yaml

TAXONOMY_FORMAT_VERSION = 1


class TaxonomyError(ValueError):
    pass


@dataclass(frozen=True)
class ClassTaxonomy:
    names: tuple
    ignore_id: int = 255
    coarse_groups: Mapping[str, FrozenSet[int]] = field(default_factory=dict)
    active_groups: FrozenSet[str] = frozenset()

    def __post_init__(self):
        n = len(self.names)
        if n == 0:
            raise TaxonomyError("taxonomy has no classes")
        if 0 <= self.ignore_id < n:
            raise TaxonomyError(f"ignore_id {self.ignore_id} collides with a class id")
        for group, members in self.coarse_groups.items():
            for c in members:
                if not 0 <= c < n:
                    raise TaxonomyError(f"coarse group {group!r} references unknown class id {c}")
        unknown = set(self.active_groups) - set(self.coarse_groups)
        if unknown:
            raise TaxonomyError(f"active groups not declared: {sorted(unknown)}")
        related: Dict[int, FrozenSet[int]] = {}
        for i in range(n):
            rel: Set[int] = set()
            for g in self.active_groups:
                if i in self.coarse_groups[g]:
                    rel |= self.coarse_groups[g]
            rel.discard(i)
            related[i] = frozenset(rel)
        object.__setattr__(self, "related", related)

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def class_id(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise TaxonomyError(f"unknown class name {name!r}") from None

    def with_active_groups(self, groups: Optional[Iterable[str]]) -> "ClassTaxonomy":
        """Copy of this taxonomy with a different set of groups enabled."""
        return ClassTaxonomy(
            names=self.names,
            ignore_id=self.ignore_id,
            coarse_groups=self.coarse_groups,
            active_groups=frozenset(groups or ()),
        )


def expand_with_related(classes: Iterable[int], taxonomy: ClassTaxonomy) -> Set[int]:
    """Add every class that shares an active coarse group with a member of ``classes``."""
    out = set()
    for c in classes:
        c = int(c)
        if not 0 <= c < taxonomy.num_classes:
            raise TaxonomyError(f"class id {c} out of range [0, {taxonomy.num_classes})")
        out.add(c)
        out |= taxonomy.related[c]
    return out


def taxonomy_from_dict(doc: Mapping) -> ClassTaxonomy:
    version = doc.get("format_version")
    if version != TAXONOMY_FORMAT_VERSION:
        raise TaxonomyError(f"unsupported taxonomy format_version {version!r}")
    names: List[str] = list(doc.get("names") or [])
    if "num_classes" in doc and doc["num_classes"] != len(names):
        raise TaxonomyError(
            f"num_classes={doc['num_classes']} but {len(names)} names listed")
    seen = set()
    for name in names:
        if name in seen:
            raise TaxonomyError(f"duplicate class name {name!r}")
        seen.add(name)

    groups: Dict[str, FrozenSet[int]] = {}
    for group, members in (doc.get("coarse_groups") or {}).items():
        ids = set()
        for m in members or []:
            if isinstance(m, int) and not isinstance(m, bool):
                if not 0 <= m < len(names):
                    raise TaxonomyError(f"coarse group {group!r} references unknown class id {m}")
                ids.add(m)
            elif m in seen:
                ids.add(names.index(m))
            else:
                raise TaxonomyError(f"coarse group {group!r} references unknown class {m!r}")
        groups[str(group)] = frozenset(ids)

    return ClassTaxonomy(
        names=tuple(names),
        ignore_id=int(doc.get("ignore_id", 255)),
        coarse_groups=groups,
        active_groups=frozenset(doc.get("default_active_groups") or ()),
    )


def load_taxonomy(path) -> ClassTaxonomy:
    """Read a taxonomy YAML file.

    Layout::

        format_version: 1
        num_classes: 6
        ignore_id: 255
        names: [road, sky, building, wall, vegetation, terrain]
        coarse_groups:
          construction: [building, wall]
          nature: [vegetation, terrain]
        default_active_groups: [construction, nature]

    Group members may be given as class names or integer ids.
    """
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise TaxonomyError(f"{path}: cannot parse taxonomy: {e}") from e
    if not isinstance(doc, dict):
        raise TaxonomyError(f"{path}: taxonomy must be a mapping")
    try:
        return taxonomy_from_dict(doc)
    except TaxonomyError as e:
        raise TaxonomyError(f"{path}: {e}") from e


def taxonomy_to_dict(taxonomy: ClassTaxonomy) -> dict:
    return {
        "format_version": TAXONOMY_FORMAT_VERSION,
        "num_classes": taxonomy.num_classes,
        "ignore_id": taxonomy.ignore_id,
        "names": list(taxonomy.names),
        "coarse_groups": {
            g: [taxonomy.names[i] for i in sorted(m)]
            for g, m in sorted(taxonomy.coarse_groups.items())
        },
        "default_active_groups": sorted(taxonomy.active_groups),
    }


def builtin_taxonomy_path(name: str) -> Path:
    return Path(__file__).parent / "resources" / "taxonomies" / f"{name}.yaml"


def resolve_taxonomy(ref) -> ClassTaxonomy:
    """Load ``ref`` as a file path, falling back to a shipped taxonomy name."""
    p = Path(ref)
    if p.exists():
        return load_taxonomy(p)
    builtin = builtin_taxonomy_path(str(ref))
    if builtin.exists():
        return load_taxonomy(builtin)
    raise TaxonomyError(f"no taxonomy file or builtin named {ref!r}")
