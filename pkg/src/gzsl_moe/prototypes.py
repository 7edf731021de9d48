"""Class prototype vectors: the semantic side information for each class."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Sequence

import numpy as np

from .seeding import rng_for

PROTO_MAGIC = "GZSL-PROTO v1"


class PrototypeError(ValueError):
    pass


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not n > 0:
        raise PrototypeError("prototype vector has zero norm")
    return v / n


@dataclass(frozen=True)
class ClassPrototypeTable:
    dim: int
    entries: Mapping[int, np.ndarray]
    names: Mapping[int, str]
    seen: frozenset
    unseen: frozenset

    def __post_init__(self):
        if self.seen & self.unseen:
            raise PrototypeError(f"seen and unseen sets overlap: {sorted(self.seen & self.unseen)}")
        missing = sorted((self.seen | self.unseen) - set(self.entries))
        if missing:
            raise PrototypeError(f"missing prototype for class id(s) {missing}")
        for c, v in self.entries.items():
            if v.shape != (self.dim,):
                raise PrototypeError(f"dimension mismatch for class {c}")

    def __getitem__(self, class_id) -> np.ndarray:
        try:
            return self.entries[int(class_id)]
        except KeyError:
            raise PrototypeError(f"missing prototype for class id {class_id}") from None

    def __contains__(self, class_id):
        return int(class_id) in self.entries

    def with_split(self, seen: Iterable[int], unseen: Iterable[int]) -> "ClassPrototypeTable":
        return ClassPrototypeTable(self.dim, self.entries, self.names,
                                   frozenset(int(c) for c in seen), frozenset(int(c) for c in unseen))


def load_prototypes(path, seen: Iterable[int], unseen: Iterable[int]) -> ClassPrototypeTable:
    """Read a ``GZSL-PROTO v1`` text file and L2-normalize every row."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != PROTO_MAGIC:
        raise PrototypeError(f"{path}: missing '{PROTO_MAGIC}' header")
    entries: Dict[int, np.ndarray] = {}
    names: Dict[int, str] = {}
    dim: Optional[int] = None
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 3:
            raise PrototypeError(f"{path}:{lineno}: expected '<id> <name> <values...>'")
        try:
            cid = int(parts[0])
            vec = np.array([float(t) for t in parts[2:]])
        except ValueError as exc:
            raise PrototypeError(f"{path}:{lineno}: {exc}") from None
        if dim is None:
            dim = vec.size
        elif vec.size != dim:
            raise PrototypeError(f"{path}:{lineno}: dimension mismatch ({vec.size} vs {dim})")
        if cid in entries:
            raise PrototypeError(f"{path}:{lineno}: duplicate class id {cid}")
        entries[cid] = _unit(vec)
        names[cid] = parts[1]
    if dim is None:
        raise PrototypeError(f"{path}: no prototype rows")
    return ClassPrototypeTable(dim, entries, names, frozenset(seen), frozenset(unseen))


def write_prototypes(table: ClassPrototypeTable, path) -> None:
    rows = [PROTO_MAGIC]
    for cid in sorted(table.entries):
        vals = " ".join(format(float(x), ".17g") for x in table.entries[cid])
        rows.append(f"{cid} {table.names.get(cid, str(cid))} {vals}")
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def synthesize_prototype(name: str, dim: int, seed: int) -> np.ndarray:
    return _unit(rng_for(seed, "prototype", name).standard_normal(dim))


def synthesize_prototypes(class_names: Mapping[int, str] | Sequence[str], dim: int, seed: int,
                          seen: Iterable[int] = (), unseen: Iterable[int] = ()) -> ClassPrototypeTable:
    """Seeded standard-normal prototypes keyed by class name, unit-normalized.

    ``class_names`` is either ``{class_id: name}`` or a list of names, in
    which case ids are positions starting at 0.
    """
    if dim < 2:
        raise PrototypeError("prototype dimension must be >= 2")
    if not isinstance(class_names, Mapping):
        class_names = dict(enumerate(class_names))
    if len(set(class_names.values())) != len(class_names):
        raise PrototypeError("duplicate class names")
    entries = {int(c): synthesize_prototype(n, dim, seed) for c, n in class_names.items()}
    return ClassPrototypeTable(dim, entries, {int(c): n for c, n in class_names.items()},
                               frozenset(seen), frozenset(unseen))
