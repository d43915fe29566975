"""Procedural part-segmented furniture shapes and the on-disk source database.

Shapes are assemblies of axis-aligned boxes (chair, table, cabinet), mirrored
about the x = 0 plane, with points sampled on the box surfaces. Axis
convention: x is width (W), y is height (H), z is length/depth (L).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .formats import FormatError, decode_labels, decode_pcf, encode_labels, encode_pcf
from .geometry import chamfer_distance, reflect_bilateral
from .rng import stream

CATEGORIES = ("chair", "table", "cabinet")
PART_COUNTS = {"chair": 6, "table": 5, "cabinet": 3}
BOX_SLACK = 1e-6
SYMMETRY_TOL = 5e-3
_TOUCH_TOL = 1e-9


@dataclass
class PartBox:
    center: np.ndarray  # C0
    extent: np.ndarray  # (W0, H0, L0)
    part_id: int

    @property
    def lo(self):
        return self.center - self.extent / 2

    @property
    def hi(self):
        return self.center + self.extent / 2

    def contains(self, pts, slack=BOX_SLACK):
        pts = np.atleast_2d(pts)
        return np.all((pts >= self.lo - slack) & (pts <= self.hi + slack), axis=1)

    def to_json(self):
        w, h, l = (float(v) for v in self.extent)
        return {"part_id": self.part_id, "C0": [float(v) for v in self.center],
                "W0": w, "H0": h, "L0": l}


@dataclass
class PartSegmentedShape:
    cloud: np.ndarray
    labels: np.ndarray
    parts: list
    connectivity: list
    category: str

    @property
    def n_parts(self) -> int:
        return len(self.parts)

    @property
    def centers(self) -> np.ndarray:
        return np.stack([p.center for p in self.parts])

    @property
    def extents(self) -> np.ndarray:
        return np.stack([p.extent for p in self.parts])

    def __eq__(self, other):
        if not isinstance(other, PartSegmentedShape):
            return NotImplemented
        return (self.category == other.category
                and np.array_equal(self.cloud, other.cloud)
                and np.array_equal(self.labels, other.labels)
                and self.connectivity == other.connectivity
                and len(self.parts) == len(other.parts)
                and all(a.part_id == b.part_id and np.array_equal(a.center, b.center)
                        and np.array_equal(a.extent, b.extent)
                        for a, b in zip(self.parts, other.parts)))


@dataclass
class SourceDatabase:
    shapes: list
    ids: list
    point_count: int
    checks: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.shapes)

    def __iter__(self):
        return iter(zip(self.ids, self.shapes))

    def get(self, shape_id: str) -> PartSegmentedShape:
        return self.shapes[self.ids.index(shape_id)]

    def by_category(self, category: str) -> list[int]:
        return [i for i, s in enumerate(self.shapes) if s.category == category]


# -- box layouts --------------------------------------------------------------

def _chair_boxes(rng):
    leg_h, leg_t = rng.uniform(0.8, 1.2), rng.uniform(0.06, 0.12)
    sw, sl, sh = rng.uniform(0.8, 1.2), rng.uniform(0.8, 1.2), rng.uniform(0.08, 0.15)
    bh, bt = rng.uniform(0.8, 1.4), rng.uniform(0.06, 0.12)
    bw = sw * rng.uniform(0.8, 1.0)
    boxes = [((0.0, leg_h + sh / 2, 0.0), (sw, sh, sl)),
             ((0.0, leg_h + sh + bh / 2, -sl / 2 + bt / 2), (bw, bh, bt))]
    lx, lz = sw / 2 - leg_t / 2, sl / 2 - leg_t / 2
    for sz in (1, -1):
        for sx in (1, -1):
            boxes.append(((sx * lx, leg_h / 2, sz * lz), (leg_t, leg_h, leg_t)))
    return boxes


def _table_boxes(rng):
    tw, tl, th = rng.uniform(1.2, 2.0), rng.uniform(0.8, 1.4), rng.uniform(0.06, 0.12)
    leg_h, leg_t = rng.uniform(1.0, 1.6), rng.uniform(0.08, 0.16)
    inset = rng.uniform(0.0, 0.1)
    boxes = [((0.0, leg_h + th / 2, 0.0), (tw, th, tl))]
    lx, lz = tw / 2 - leg_t / 2 - inset, tl / 2 - leg_t / 2 - inset
    for sz in (1, -1):
        for sx in (1, -1):
            boxes.append(((sx * lx, leg_h / 2, sz * lz), (leg_t, leg_h, leg_t)))
    return boxes


def _cabinet_boxes(rng):
    bw, bh, bl = rng.uniform(0.8, 1.4), rng.uniform(1.0, 2.0), rng.uniform(0.6, 1.0)
    base_h = rng.uniform(0.08, 0.2)
    base_w, base_l = bw * rng.uniform(0.9, 1.0), bl * rng.uniform(0.9, 1.0)
    top_h = rng.uniform(0.04, 0.1)
    top_w, top_l = bw * rng.uniform(1.0, 1.1), bl * rng.uniform(1.0, 1.1)
    return [((0.0, base_h + bh / 2, 0.0), (bw, bh, bl)),
            ((0.0, base_h / 2, 0.0), (base_w, base_h, base_l)),
            ((0.0, base_h + bh + top_h / 2, 0.0), (top_w, top_h, top_l))]


_LAYOUTS = {"chair": _chair_boxes, "table": _table_boxes, "cabinet": _cabinet_boxes}


def _normalize_boxes(boxes):
    """Centre the assembly bounding box and scale its largest half-extent to 1."""
    c = np.array([b[0] for b in boxes], float)
    e = np.array([b[1] for b in boxes], float)
    lo, hi = (c - e / 2).min(axis=0), (c + e / 2).max(axis=0)
    mid = (lo + hi) / 2
    mid[0] = 0.0  # already symmetric; keep the mirror plane exact
    s = ((hi - lo) / 2).max()
    return (c - mid) / s, e / s


def mirror_partners(centers: np.ndarray, extents: np.ndarray, tol: float = 1e-9) -> list[int]:
    """Index of each part's mirror image across x = 0 (itself if self-symmetric)."""
    out = []
    for i in range(len(centers)):
        target = centers[i] * np.array([-1.0, 1.0, 1.0])
        match = i
        for j in range(len(centers)):
            if np.allclose(centers[j], target, atol=tol) and np.allclose(extents[j], extents[i], atol=tol):
                match = j
                break
        out.append(match)
    return out


def _touching(a: PartBox, b: PartBox, tol=_TOUCH_TOL) -> bool:
    return bool(np.all(a.lo <= b.hi + tol) and np.all(b.lo <= a.hi + tol))


def _sample_box_surface(center, extent, n, rng):
    w, h, l = extent
    areas = np.array([h * l, h * l, w * l, w * l, w * h, w * h])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 3)) * extent
    axis = faces // 2
    sign = np.where(faces % 2 == 0, 0.5, -0.5)
    u[np.arange(n), axis] = sign * extent[axis]
    return center + u


def _box_area(extent):
    w, h, l = extent
    return 2 * (w * h + h * l + w * l)


def generate_shape(category: str, seed: int, m: int = 1024) -> PartSegmentedShape:
    """Deterministic shape of ``category`` with exactly ``m`` surface points.

    Mirrored parts receive mirrored point samples, so the cloud is closed
    under x-negation. Coordinates are rounded to float32 so that the PCF1
    file format stores them losslessly.
    """
    if category not in _LAYOUTS:
        raise ValueError(f"unknown category {category!r}")
    if m < 2 * PART_COUNTS[category] or m % 2:
        raise ValueError(f"point count must be even and >= {2 * PART_COUNTS[category]}, got {m}")
    rng = stream(seed, "shape", category)
    centers, extents = _normalize_boxes(_LAYOUTS[category](rng))
    parts = [PartBox(centers[i], extents[i], i) for i in range(len(centers))]
    partner = mirror_partners(centers, extents)

    # one sampling group per self-symmetric part or mirrored pair
    groups = []
    for i, j in enumerate(partner):
        if j == i:
            groups.append((i, None, _box_area(extents[i])))
        elif i < j:
            groups.append((i, j, 2 * _box_area(extents[i])))
    half = m // 2
    weights = np.array([g[2] for g in groups])
    k = np.ones(len(groups), dtype=int)
    share = weights / weights.sum() * (half - len(groups))
    k += np.floor(share).astype(int)
    rest = half - k.sum()
    k[np.argsort(-(share - np.floor(share)), kind="stable")[:rest]] += 1

    pts, labs = [], []
    flip = np.array([-1.0, 1.0, 1.0])
    for (i, j, _), n in zip(groups, k):
        p = _sample_box_surface(centers[i], extents[i], n, rng)
        pts += [p, p * flip]
        labs += [np.full(n, i), np.full(n, i if j is None else j)]
    cloud = np.vstack(pts).astype(np.float32).astype(np.float64)
    labels = np.concatenate(labs)
    order = rng.permutation(m)
    cloud, labels = cloud[order], labels[order]

    conn = [(a.part_id, b.part_id) for ai, a in enumerate(parts) for b in parts[ai + 1:] if _touching(a, b)]
    return PartSegmentedShape(cloud, labels.astype(np.int64), parts, conn, category)


def check_shape(shape: PartSegmentedShape) -> dict:
    """Evaluate the structural invariants; returns ``{name: bool}``."""
    n = shape.n_parts
    labels_ok = bool(np.all((shape.labels >= 0) & (shape.labels < n)))
    inside = labels_ok and all(
        bool(np.all(p.contains(shape.cloud[shape.labels == p.part_id]))) for p in shape.parts)
    return {
        "finite": bool(np.all(np.isfinite(shape.cloud))),
        "labels_valid": labels_ok,
        "parts_nonempty": labels_ok and all(np.any(shape.labels == i) for i in range(n)),
        "points_in_boxes": inside,
        "positive_extents": all(bool(np.all(p.extent > 0)) for p in shape.parts),
        "connectivity_valid": all(0 <= a < n and 0 <= b < n and a != b for a, b in shape.connectivity),
        "bilateral_symmetry": chamfer_distance(shape.cloud, reflect_bilateral(shape.cloud)) < SYMMETRY_TOL,
    }


def part_mean_pool(features, labels, n_parts: int | None = None):
    """Mean of the feature rows belonging to each part, as an ``(N_p, L)`` tensor."""
    labels = np.asarray(labels)
    n_parts = int(labels.max()) + 1 if n_parts is None else n_parts
    counts = np.bincount(labels, minlength=n_parts)[:n_parts]
    if np.any(counts == 0):
        raise ValueError(f"empty part {int(np.flatnonzero(counts == 0)[0])}")
    avg = np.zeros((n_parts, len(labels)))
    avg[labels, np.arange(len(labels))] = 1.0 / counts[labels]
    return ad.matmul(ad.Tensor(avg), features)


# -- database ---------------------------------------------------------------------

def build_database(n_per_category: int, seed: int, m: int = 1024,
                   categories=CATEGORIES, stream_name: str = "db", id_prefix: str = "") -> SourceDatabase:
    """``n_per_category`` shapes per category with ids ``<prefix><cat>_<k>``.

    ``stream_name`` selects the seed sub-stream, so a training-target set can
    be drawn from the same seed without overlapping the source database.
    """
    if n_per_category < 1:
        raise ValueError("n_per_category must be >= 1")
    entries = []
    for cat in categories:
        for k in range(n_per_category):
            shape = generate_shape(cat, int(stream(seed, stream_name, cat, k).integers(2**31)), m)
            entries.append((f"{id_prefix}{cat}_{k:03d}", shape))
    entries.sort(key=lambda e: e[0])
    checks = {}
    for sid, shape in entries:
        for name, ok in check_shape(shape).items():
            checks[name] = checks.get(name, True) and ok
    return SourceDatabase([s for _, s in entries], [i for i, _ in entries], m, checks)


def save_database(db: SourceDatabase, out_dir) -> Path:
    out = Path(out_dir)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    rows = []
    for sid, shape in db:
        cloud_rel, label_rel = f"clouds/{sid}.pcf", f"labels/{sid}.u16"
        (out / cloud_rel).write_bytes(encode_pcf(shape.cloud))
        (out / label_rel).write_bytes(encode_labels(shape.labels))
        rows.append({"id": sid, "category": shape.category, "cloud": cloud_rel, "labels": label_rel,
                     "parts": [p.to_json() for p in shape.parts],
                     "connectivity": [list(e) for e in shape.connectivity]})
    manifest = {"format": "SDB1", "point_count": db.point_count, "shapes": rows,
                "checks": dict(sorted(db.checks.items()))}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def _manifest_error(text, needle, section, message, path):
    pos = text.find(needle) if needle else -1
    return FormatError(section, max(pos, 0), message, path)


def load_database(db_dir) -> SourceDatabase:
    root = Path(db_dir)
    mpath = root / "manifest.json"
    try:
        text = mpath.read_text()
    except OSError as e:
        raise FormatError("manifest", 0, f"cannot read manifest: {e.strerror}", str(mpath)) from None
    try:
        man = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError("manifest", e.pos, e.msg, str(mpath)) from None
    if not isinstance(man, dict) or man.get("format") != "SDB1":
        raise FormatError("manifest", 0, "missing SDB1 format tag", str(mpath))
    m = man.get("point_count")
    if not isinstance(m, int) or m < 1:
        raise _manifest_error(text, '"point_count"', "manifest.point_count", "invalid point count", str(mpath))
    shapes, ids = [], []
    for n, row in enumerate(man.get("shapes", [])):
        section = f"manifest.shapes[{n}]"
        needle = f'"id": "{row.get("id")}"' if isinstance(row, dict) else None
        try:
            sid, cat = row["id"], row["category"]
            parts = [PartBox(np.array(p["C0"], float), np.array([p["W0"], p["H0"], p["L0"]], float),
                             int(p["part_id"])) for p in row["parts"]]
            conn = [tuple(int(v) for v in e) for e in row["connectivity"]]
            cloud_rel, label_rel = row["cloud"], row["labels"]
        except (KeyError, TypeError, ValueError) as e:
            raise _manifest_error(text, needle, section, f"missing or invalid field {e}", str(mpath)) from None
        cpath, lpath = root / cloud_rel, root / label_rel
        try:
            cloud = decode_pcf(cpath.read_bytes(), path=str(cpath))
            labels = decode_labels(lpath.read_bytes(), len(cloud), path=str(lpath))
        except OSError as e:
            raise _manifest_error(text, needle, section, f"cannot read shape data: {e}", str(mpath)) from None
        if len(cloud) != m:
            raise FormatError(f"{section}.cloud", 4, f"expected {m} points, found {len(cloud)}", str(cpath))
        if cat not in CATEGORIES:
            raise _manifest_error(text, needle, section, f"unknown category {cat!r}", str(mpath))
        shapes.append(PartSegmentedShape(cloud, labels, parts, conn, cat))
        ids.append(sid)
    if len(set(ids)) != len(ids):
        raise FormatError("manifest.shapes", 0, "duplicate shape ids", str(mpath))
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    return SourceDatabase([shapes[i] for i in order], [ids[i] for i in order], m,
                          dict(man.get("checks", {})))
