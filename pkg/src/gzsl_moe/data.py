"""Point frames: synthetic scenes, file I/O, seen/unseen splitting, batching."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .seeding import rng_for

FLOOR, WALL, COBOT, HUMAN, AGV = 1, 2, 3, 4, 5
CLASS_NAMES = {FLOOR: "floor", WALL: "wall", COBOT: "cobot", HUMAN: "human", AGV: "agv"}
CLASS_IDS = tuple(sorted(CLASS_NAMES))
UNLABELED = 0
# per-frame point distribution of a reference frame of the target dataset
DEFAULT_COUNTS = {FLOOR: 10000, WALL: 13400, COBOT: 1800, HUMAN: 2800, AGV: 1200}
MAX_SCENE_POINTS = 10 ** 8
FRAME_MAGIC = "GZSL-PF"
FRAME_VERSION = "v1"


class FrameFormatError(ValueError):
    pass


@dataclass
class PointFrame:
    points: np.ndarray
    labels: np.ndarray
    frame_id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.shape[0] != self.points.shape[0]:
            raise ValueError("labels length must equal the number of points")

    def __len__(self):
        return self.points.shape[0]

    def subset(self, mask) -> "PointFrame":
        return PointFrame(self.points[mask], self.labels[mask], self.frame_id)

    def class_counts(self) -> Dict[int, int]:
        ids, counts = np.unique(self.labels, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}


@dataclass(frozen=True)
class SplitConfig:
    seen: frozenset = frozenset({WALL, COBOT, HUMAN})
    unseen: frozenset = frozenset({FLOOR, AGV})

    def __post_init__(self):
        object.__setattr__(self, "seen", frozenset(int(c) for c in self.seen))
        object.__setattr__(self, "unseen", frozenset(int(c) for c in self.unseen))
        if self.seen & self.unseen:
            raise ValueError(f"seen and unseen overlap: {sorted(self.seen & self.unseen)}")
        if not self.seen or not self.unseen:
            raise ValueError("split needs at least one seen and one unseen class")

    @property
    def classes(self) -> Tuple[int, ...]:
        return tuple(sorted(self.seen | self.unseen))


@dataclass
class SceneSpec:
    counts: Dict[int, int] = field(default_factory=lambda: dict(DEFAULT_COUNTS))
    extents: Tuple[float, float, float] = (6.0, 4.0, 3.0)
    sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.counts = {int(c): int(n) for c, n in self.counts.items()}
        self.extents = tuple(float(e) for e in self.extents)
        if any(n < 0 for n in self.counts.values()):
            raise ValueError("point counts must be >= 0")
        if len(self.extents) != 3 or any(e <= 0 for e in self.extents):
            raise ValueError("room extents must be three positive lengths")
        if self.sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        unknown = set(self.counts) - set(CLASS_IDS)
        if unknown:
            raise ValueError(f"unknown class ids in counts: {sorted(unknown)}")

    def scaled(self, factor: float) -> "SceneSpec":
        return replace(self, counts={c: int(round(n * factor)) for c, n in self.counts.items()})


# ---------------------------------------------------------------- geometry

def _box_surface(rng, n, lo, hi, skip_bottom=True):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    size = hi - lo
    faces = []  # (fixed axis, at value)
    for ax in range(3):
        for side in (0, 1):
            if skip_bottom and ax == 2 and side == 0:
                continue
            faces.append((ax, side))
    areas = np.array([np.prod(np.delete(size, ax)) for ax, _ in faces])
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    pts = lo + rng.uniform(size=(n, 3)) * size
    for f, (ax, side) in enumerate(faces):
        m = which == f
        pts[m, ax] = hi[ax] if side else lo[ax]
    return pts


def _boxes_surface(rng, n, boxes):
    areas = []
    for lo, hi in boxes:
        s = np.subtract(hi, lo)
        areas.append(2 * (s[0] * s[1] + s[0] * s[2] + s[1] * s[2]))
    areas = np.array(areas)
    per = rng.multinomial(n, areas / areas.sum())
    return np.concatenate([_box_surface(rng, k, lo, hi) for k, (lo, hi) in zip(per, boxes)]
                          or [np.empty((0, 3))])


def _ellipsoid_surface(rng, n, center, axes):
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.asarray(center) + d * np.asarray(axes)


def _floor(rng, n, ext):
    lx, ly, _ = ext
    return np.column_stack([rng.uniform(0, lx, n), rng.uniform(0, ly, n), np.zeros(n)])


def _walls(rng, n, ext):
    lx, ly, lz = ext
    t = rng.uniform(0, 2 * (lx + ly), n)
    z = rng.uniform(0, lz, n)
    x = np.empty(n)
    y = np.empty(n)
    a = t < lx
    b = (t >= lx) & (t < lx + ly)
    c = (t >= lx + ly) & (t < 2 * lx + ly)
    d = t >= 2 * lx + ly
    x[a], y[a] = t[a], 0.0
    x[b], y[b] = lx, t[b] - lx
    x[c], y[c] = 2 * lx + ly - t[c], ly
    x[d], y[d] = 0.0, 2 * (lx + ly) - t[d]
    return np.column_stack([x, y, z])


def _cobot(rng, n, ext):
    lx, ly, _ = ext
    cx = rng.uniform(0.2, 0.45) * lx
    cy = rng.uniform(0.2, 0.4) * ly
    boxes = [((cx - 0.2, cy - 0.2, 0.0), (cx + 0.2, cy + 0.2, 0.7))]
    z = 0.7
    dx = 0.0
    for seg in range(3):
        dx += rng.uniform(-0.08, 0.08)
        boxes.append(((cx + dx - 0.075, cy - 0.075, z), (cx + dx + 0.075, cy + 0.075, z + 0.3)))
        z += 0.3
    return _boxes_surface(rng, n, boxes)


def _human(rng, n, ext):
    lx, ly, _ = ext
    hx = rng.uniform(0.55, 0.8) * lx
    hy = rng.uniform(0.2, 0.4) * ly
    n_head = n // 5
    torso = _ellipsoid_surface(rng, n - n_head, (hx, hy, 1.15), (0.22, 0.14, 0.45))
    head = _ellipsoid_surface(rng, n_head, (hx, hy, 1.75), (0.1, 0.1, 0.12))
    return np.concatenate([torso, head])


def _agv(rng, n, ext):
    lx, ly, _ = ext
    ax = rng.uniform(0.2, 0.7) * lx
    ay = rng.uniform(0.6, 0.75) * ly
    return _box_surface(rng, n, (ax - 0.45, ay - 0.3, 0.0), (ax + 0.45, ay + 0.3, 0.35))


_SAMPLERS = {FLOOR: _floor, WALL: _walls, COBOT: _cobot, HUMAN: _human, AGV: _agv}


def generate_scene(spec: SceneSpec, frame_id: Optional[str] = None) -> PointFrame:
    """Synthetic collaborative-workcell scan with exact per-class counts.

    Floor on z=0, walls on the room boundary, a cobot as stacked boxes on a
    pedestal, a human as torso and head ellipsoids, an AGV as a low box.
    Every coordinate gets Gaussian jitter ``spec.sigma``.
    """
    total = sum(spec.counts.values())
    if total > MAX_SCENE_POINTS:
        raise ValueError(f"scene too large: {total} points")
    pts, labels = [], []
    for cid in CLASS_IDS:
        n = spec.counts.get(cid, 0)
        rng = rng_for(spec.seed, "scene", cid)
        p = _SAMPLERS[cid](rng, n, spec.extents) if n else np.empty((0, 3))
        pts.append(p)
        labels.append(np.full(n, cid, dtype=np.int64))
    points = np.concatenate(pts)
    labels = np.concatenate(labels)
    rng = rng_for(spec.seed, "scene", "jitter")
    if spec.sigma > 0 and total:
        points = points + rng.normal(0.0, spec.sigma, size=points.shape)
    order = rng.permutation(total)
    return PointFrame(points[order], labels[order], frame_id or f"scene-{spec.seed}")


# ---------------------------------------------------------------- file I/O

def write_frame(frame: PointFrame, path) -> None:
    """Native text format: ``GZSL-PF v1 <N>`` then ``x y z label`` rows."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(f"{FRAME_MAGIC} {FRAME_VERSION} {len(frame)}\n")
        for (x, y, z), lab in zip(frame.points.tolist(), frame.labels.tolist()):
            fh.write(f"{x:.17g} {y:.17g} {z:.17g} {lab}\n")


def write_pcd(frame: PointFrame, path) -> None:
    """ASCII PCD with fields ``x y z label``."""
    n = len(frame)
    header = [
        "# .PCD v0.7 - Point Cloud Data file format",
        "VERSION 0.7",
        "FIELDS x y z label",
        "SIZE 8 8 8 4",
        "TYPE F F F I",
        "COUNT 1 1 1 1",
        f"WIDTH {n}",
        "HEIGHT 1",
        "VIEWPOINT 0 0 0 1 0 0 0",
        f"POINTS {n}",
        "DATA ascii",
    ]
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("\n".join(header) + "\n")
        for (x, y, z), lab in zip(frame.points.tolist(), frame.labels.tolist()):
            fh.write(f"{x:.17g} {y:.17g} {z:.17g} {lab}\n")


def _parse_rows(lines, ncols, path, start_line):
    rows = []
    for i, line in enumerate(lines):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != ncols:
            raise FrameFormatError(f"{path}:{start_line + i}: expected {ncols} values, got {len(parts)}")
        try:
            rows.append([float(t) for t in parts])
        except ValueError:
            raise FrameFormatError(f"{path}:{start_line + i}: non-numeric token") from None
    return np.array(rows, dtype=np.float64).reshape(-1, ncols)


def _labels_from(col, path):
    if not np.all(col == np.round(col)):
        raise FrameFormatError(f"{path}: non-integer label")
    return col.astype(np.int64)


def _load_native(path, lines):
    head = lines[0].split() if lines else []
    if len(head) != 3 or head[0] != FRAME_MAGIC or head[1] != FRAME_VERSION:
        raise FrameFormatError(f"{path}: malformed header")
    try:
        n = int(head[2])
    except ValueError:
        raise FrameFormatError(f"{path}: malformed header") from None
    data = _parse_rows(lines[1:], 4, path, 2)
    if data.shape[0] != n:
        raise FrameFormatError(f"{path}: point count mismatch (header {n}, found {data.shape[0]})")
    return PointFrame(data[:, :3], _labels_from(data[:, 3], path), Path(path).stem)


def _load_pcd(path, lines):
    meta = {}
    body_start = None
    for i, line in enumerate(lines):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        key, _, rest = s.partition(" ")
        meta[key.upper()] = rest.split()
        if key.upper() == "DATA":
            body_start = i + 1
            break
    if body_start is None or "FIELDS" not in meta or "POINTS" not in meta:
        raise FrameFormatError(f"{path}: malformed PCD header")
    if [t.lower() for t in meta["DATA"]] != ["ascii"]:
        raise FrameFormatError(f"{path}: only DATA ascii is supported")
    fields = meta["FIELDS"]
    counts = [int(c) for c in meta.get("COUNT", ["1"] * len(fields))]
    if len(counts) != len(fields):
        raise FrameFormatError(f"{path}: COUNT does not match FIELDS")
    cols, pos = {}, 0
    for f, c in zip(fields, counts):
        cols[f.lower()] = pos
        pos += c
    label_key = "label" if "label" in cols else "class" if "class" in cols else None
    if label_key is None or not {"x", "y", "z"} <= set(cols):
        raise FrameFormatError(f"{path}: FIELDS must include x, y, z and label or class")
    try:
        n = int(meta["POINTS"][0])
    except (ValueError, IndexError):
        raise FrameFormatError(f"{path}: malformed POINTS") from None
    data = _parse_rows(lines[body_start:], pos, path, body_start + 1)
    if data.shape[0] != n:
        raise FrameFormatError(f"{path}: point count mismatch (header {n}, found {data.shape[0]})")
    xyz = data[:, [cols["x"], cols["y"], cols["z"]]]
    return PointFrame(xyz, _labels_from(data[:, cols[label_key]], path), Path(path).stem)


def load_frame(path) -> PointFrame:
    """Load a native ``GZSL-PF`` file, or an ASCII PCD when the suffix is ``.pcd``.

    Unlabeled (label 0) points are kept.
    """
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if path.suffix.lower() == ".pcd":
        return _load_pcd(path, lines)
    return _load_native(path, lines)


def load_frames(path) -> List[PointFrame]:
    """A single frame file, or every ``*.pf``/``*.txt``/``*.pcd`` file in a directory."""
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".pf", ".txt", ".pcd"))
        return [load_frame(p) for p in files]
    return [load_frame(path)]


# ---------------------------------------------------------------- splitting

BACKBONE_TRAINING = "backbone-training"
GZSL_EVAL = "gzsl-eval"


@dataclass
class PartitionedFrame:
    frame: PointFrame
    seen_mask: np.ndarray


def split_frames(frames: Iterable[PointFrame], split: SplitConfig, mode: str) -> List[PartitionedFrame]:
    """Backbone-training keeps only seen-class points; gzsl-eval keeps every
    labeled point and tags it seen or unseen. Label 0 is always dropped."""
    if mode not in (BACKBONE_TRAINING, GZSL_EVAL):
        raise ValueError(f"unknown split mode {mode!r}")
    seen = np.array(sorted(split.seen))
    known = np.array(sorted(split.seen | split.unseen))
    out = []
    for f in frames:
        keep = np.isin(f.labels, seen if mode == BACKBONE_TRAINING else known)
        sub = f.subset(keep)
        out.append(PartitionedFrame(sub, np.isin(sub.labels, seen)))
    return out


# ---------------------------------------------------------------- batching

def inverse_frequency_weights(labels_or_counts) -> Dict[int, float]:
    """Per-class weight proportional to 1/count, scaled to mean 1 per sample."""
    if isinstance(labels_or_counts, Mapping):
        counts = {int(c): int(n) for c, n in labels_or_counts.items() if n > 0}
    else:
        ids, n = np.unique(np.asarray(labels_or_counts), return_counts=True)
        counts = {int(c): int(k) for c, k in zip(ids, n)}
    total = sum(counts.values())
    return {c: total / (len(counts) * n) for c, n in counts.items()}


@dataclass
class Batch:
    index: np.ndarray
    X: np.ndarray
    y: np.ndarray
    weights: Optional[np.ndarray] = None


def make_batches(X, y, batch_size: int, seed: int, class_weights: bool = False) -> Iterator[Batch]:
    """Seeded shuffle into batches; the final short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    X = np.asarray(X)
    y = np.asarray(y)
    w_of = inverse_frequency_weights(y) if class_weights else None
    order = np.random.default_rng(seed).permutation(len(y))
    for s in range(0, len(y), batch_size):
        idx = order[s:s + batch_size]
        w = np.array([w_of[int(c)] for c in y[idx]]) if w_of is not None else None
        yield Batch(idx, X[idx], y[idx], w)
