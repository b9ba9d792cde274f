"""Department taxonomy: a flat set of labels plus an ancestor map.

Hospital departments may be hierarchical (e.g. a respiratory clinic inside
internal medicine). Records are always tallied at the most specific label
they carry: a label path like ``internal_medicine/respiratory`` counts
toward ``respiratory``, never toward its ancestor. Leaves are the labels
that have no children.

The taxonomy is loaded from a YAML config file::

    departments:
      internal_medicine: {}
      respiratory: {parent: internal_medicine}
      surgery: {}
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import UnknownDepartmentError


@dataclass(frozen=True)
class DepartmentTaxonomy:
    parents: dict[str, str | None]
    _children: dict[str, set[str]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        children: dict[str, set[str]] = {label: set() for label in self.parents}
        for label, parent in self.parents.items():
            if parent is not None:
                if parent not in self.parents:
                    raise ValueError(f"department {label!r} names unknown parent {parent!r}")
                children[parent].add(label)
        object.__setattr__(self, "_children", children)

    @classmethod
    def from_file(cls, path: str | Path) -> "DepartmentTaxonomy":
        with Path(path).open("r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        departments = data.get("departments", {})
        if not departments:
            raise ValueError(f"{path}: taxonomy defines no departments")
        parents = {label: (spec or {}).get("parent") for label, spec in departments.items()}
        return cls(parents=parents)

    @classmethod
    def flat(cls, labels: list[str]) -> "DepartmentTaxonomy":
        """A taxonomy of independent leaves, no hierarchy."""
        return cls(parents={label: None for label in labels})

    def to_file(self, path: str | Path) -> None:
        departments = {
            label: ({"parent": parent} if parent else {})
            for label, parent in sorted(self.parents.items())
        }
        with Path(path).open("w", encoding="utf-8") as fh:
            yaml.safe_dump({"departments": departments}, fh, allow_unicode=True, sort_keys=False)

    def __contains__(self, label: str) -> bool:
        return label in self.parents

    def is_leaf(self, label: str) -> bool:
        return label in self.parents and not self._children[label]

    @property
    def leaves(self) -> list[str]:
        return sorted(label for label in self.parents if not self._children[label])

    def resolve_leaf(self, label: str) -> str:
        """Resolve a label or slash-separated label path to its leaf.

        The most specific (last) component wins. Unknown labels and paths
        that stop at an ancestor raise UnknownDepartmentError.
        """
        parts = [p for p in str(label).split("/") if p]
        if not parts:
            raise UnknownDepartmentError([label])
        most_specific = parts[-1]
        if most_specific not in self.parents:
            raise UnknownDepartmentError([label])
        if not self.is_leaf(most_specific):
            raise UnknownDepartmentError([label])
        return most_specific
