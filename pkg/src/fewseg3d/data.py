"""Synthetic indoor-style point cloud scenes and episodic samplers.

Scenes are built from parametric primitive families (plane, box, cylinder,
sphere, torus segment), one labeled class per family instance, plus unlabeled
clutter (label -1). Each point carries a 9-dim feature vector: xyz, rgb and
coordinates normalized by the scene bounding box. Scenes persist in the PCS1
binary format; a JSON manifest indexes a corpus and fixes the class splits
used for episodic meta-learning.

All sampling here is a pure function of (inputs, seed).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EpisodeSamplingError, FormatError, InvalidSpecError

MAGIC = b"PCS1"
FEATURE_DIM = 9
MANIFEST_VERSION = 1

PRIMITIVE_FAMILIES = ("plane", "box", "cylinder", "sphere", "torus")


# ---------------------------------------------------------------------------
# core containers
# ---------------------------------------------------------------------------

@dataclass
class PointCloud:
    """n labeled points: coordinates, colors in [0,1], normalized coordinates, labels.

    Arrays are float32/int32 so PCS1 round trips are bit exact. Label -1
    marks unlabeled clutter.
    """

    points: np.ndarray      # (n, 3) float32
    colors: np.ndarray      # (n, 3) float32
    norm_coords: np.ndarray  # (n, 3) float32 in [0, 1]
    labels: np.ndarray      # (n,) int32

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float32)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float32)
        self.norm_coords = np.ascontiguousarray(self.norm_coords, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int32)

    def __len__(self) -> int:
        return self.points.shape[0]

    def features(self) -> np.ndarray:
        """The 9-dim per-point feature matrix xyz | rgb | normalized xyz."""
        return np.concatenate([self.points, self.colors, self.norm_coords], axis=1)

    def class_counts(self) -> dict[int, int]:
        ids, counts = np.unique(self.labels, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}

    def validate(self, n_classes: int | None = None):
        n = len(self)
        for name, arr, width in (("points", self.points, 3), ("colors", self.colors, 3),
                                 ("norm_coords", self.norm_coords, 3)):
            if arr.shape != (n, width):
                raise FormatError(f"{name}: expected shape ({n}, {width}), got {arr.shape}")
            if not np.isfinite(arr).all():
                raise FormatError(f"{name}: non-finite entries")
        if self.norm_coords.min() < -1e-6 or self.norm_coords.max() > 1 + 1e-6:
            raise FormatError("norm_coords: values outside [0, 1]")
        if n_classes is not None:
            bad = (self.labels < -1) | (self.labels >= n_classes)
            if bad.any():
                raise FormatError(f"labels: value {int(self.labels[bad][0])} outside "
                                  f"{{-1, 0, .., {n_classes - 1}}}")


@dataclass(frozen=True)
class ClassSplit:
    """Disjoint class-id sets for meta-training vs meta-testing."""

    train_classes: frozenset[int]
    test_classes: frozenset[int]

    def __post_init__(self):
        if self.train_classes & self.test_classes:
            raise InvalidSpecError("class split overlaps: "
                                   f"{sorted(self.train_classes & self.test_classes)}")


@dataclass
class Episode:
    """One N-way K-shot task: annotated support blocks and a query block.

    support[c][k] is a (PointCloud, binary mask) pair for episode class c;
    query_labels remap the query ground truth to {0..n_way-1} with
    background = n_way. class_map sends episode index -> global class id.
    """

    n_way: int
    k_shot: int
    support: list  # [n_way][k_shot] of (PointCloud, np.ndarray bool)
    query: PointCloud
    query_labels: np.ndarray
    class_map: dict[int, int]
    support_refs: list = field(default_factory=list)  # (class_idx, shot, scene_idx, block_key)
    query_ref: tuple | None = None


# ---------------------------------------------------------------------------
# primitive samplers (unit-scale surfaces centered at the origin)
# ---------------------------------------------------------------------------

def _unit_sphere(rng, n, deform):
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = np.ones(n)
    if deform > 0:
        a, b, c, e = rng.uniform(-1, 1, 4)
        bump = a * d[:, 0] * d[:, 1] + b * d[:, 1] * d[:, 2] + c * d[:, 0] * d[:, 2] \
            + e * (d[:, 2] ** 2 - 1.0 / 3.0)
        r = 1.0 + deform * 0.3 * bump
    return d * r[:, None]


def _unit_plane(rng, n, deform):
    xy = rng.uniform(-0.5, 0.5, (n, 2))
    if deform > 0:
        a, b = rng.uniform(-1, 1, 2)
        p1, p2 = rng.uniform(0, 2 * np.pi, 2)
        z = deform * 0.08 * (a * np.sin(2 * np.pi * xy[:, 0] + p1)
                             + b * np.cos(2 * np.pi * xy[:, 1] + p2))
    else:
        z = np.zeros(n)
    return np.column_stack([xy, z])


def _unit_box(rng, n, deform):
    # faces of the unit cube, area-weighted (cube: all equal)
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-0.5, 0.5, (n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, -0.5, 0.5)
    for ax in range(3):
        m = axis == ax
        others = [a for a in range(3) if a != ax]
        pts[m, ax] = sign[m]
        pts[m, others[0]] = uv[m, 0]
        pts[m, others[1]] = uv[m, 1]
    if deform > 0:
        a = rng.uniform(-1, 1)
        p = rng.uniform(0, 2 * np.pi)
        bulge = 1.0 + deform * 0.15 * a * np.sin(2 * np.pi * pts[:, 2] + p)
        pts[:, :2] *= bulge[:, None]
    return pts


def _unit_cylinder(rng, n, deform):
    # lateral surface 70%, caps 30%
    n_side = int(round(0.7 * n))
    theta = rng.uniform(0, 2 * np.pi, n_side)
    z = rng.uniform(-0.5, 0.5, n_side)
    r = np.full(n_side, 0.5)
    if deform > 0:
        a = rng.uniform(-1, 1)
        p = rng.uniform(0, 2 * np.pi)
        r = r * (1.0 + deform * 0.2 * a * np.sin(3 * theta + p))
    side = np.column_stack([r * np.cos(theta), r * np.sin(theta), z])
    n_cap = n - n_side
    rho = 0.5 * np.sqrt(rng.uniform(0, 1, n_cap))
    phi = rng.uniform(0, 2 * np.pi, n_cap)
    zc = np.where(rng.uniform(size=n_cap) < 0.5, -0.5, 0.5)
    cap = np.column_stack([rho * np.cos(phi), rho * np.sin(phi), zc])
    return np.vstack([side, cap])


def _unit_torus(rng, n, deform):
    arc = 1.5 * np.pi  # torus segment, not the full ring
    u = rng.uniform(0, arc, n)
    v = rng.uniform(0, 2 * np.pi, n)
    minor = 0.18
    if deform > 0:
        a = rng.uniform(-1, 1)
        p = rng.uniform(0, 2 * np.pi)
        minor = minor * (1.0 + deform * 0.3 * a * np.sin(2 * u + p))
    ring = 0.4 + minor * np.cos(v)
    return np.column_stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)])


_SAMPLERS = {
    "sphere": _unit_sphere,
    "plane": _unit_plane,
    "box": _unit_box,
    "cylinder": _unit_cylinder,
    "torus": _unit_torus,
}

# vertical band each family occupies, in scene units
_Z_BAND = {"plane": (0.0, 0.25), "box": (0.3, 0.6), "cylinder": (0.4, 0.8),
           "sphere": (0.8, 1.6), "torus": (0.6, 1.2)}


@dataclass(frozen=True)
class ClassSpec:
    """One synthetic class: a primitive family plus size/color/diversity controls."""

    class_id: int
    family: str
    base_size: float = 0.55
    diversity: float = 1.0   # deformation amplitude knob
    color: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.family not in _SAMPLERS:
            raise InvalidSpecError(f"unknown primitive family '{self.family}'")


@dataclass(frozen=True)
class SceneSpec:
    """Shape-mix parameters for one scene generator call."""

    classes: tuple          # tuple[ClassSpec, ...]
    room_size: float = 4.0
    block_size: float = 2.0
    points_per_instance: int = 320
    instances_per_cell: int = 1
    clutter_fraction: float = 0.12
    min_points: int = 4096

    def __post_init__(self):
        if len(self.classes) == 0:
            raise InvalidSpecError("scene spec lists zero classes")
        if self.room_size < self.block_size:
            raise InvalidSpecError("room_size smaller than block_size")


def default_class_specs(n_classes: int, diversity: float = 1.0) -> tuple:
    """Deterministic family/size/color assignment for class ids 0..n_classes-1."""
    specs = []
    for cid in range(n_classes):
        fam = PRIMITIVE_FAMILIES[cid % len(PRIMITIVE_FAMILIES)]
        size = 0.45 + 0.12 * (cid // len(PRIMITIVE_FAMILIES)) + 0.05 * (cid % 3)
        hue = (cid * 0.61803398875) % 1.0
        color = (0.25 + 0.7 * hue, 0.25 + 0.7 * ((hue + 0.33) % 1.0),
                 0.25 + 0.7 * ((hue + 0.67) % 1.0))
        specs.append(ClassSpec(class_id=cid, family=fam, base_size=size,
                               diversity=diversity, color=color))
    return tuple(specs)


def _rot_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def generate_scene(spec: SceneSpec, seed: int) -> PointCloud:
    """Generate one labeled scene; deterministic for fixed (spec, seed).

    Every class is instantiated in every block cell of the room grid, so any
    block can serve as support or query for any class. Returns at least
    spec.min_points points with >= 100 points per requested class.
    """
    rng = np.random.default_rng(seed)
    cells = int(round(spec.room_size / spec.block_size))
    pts, cols, labs = [], [], []
    for ci in range(cells):
        for cj in range(cells):
            origin = np.array([ci * spec.block_size, cj * spec.block_size, 0.0])
            for cls in spec.classes:
                for _ in range(spec.instances_per_cell):
                    unit = _SAMPLERS[cls.family](rng, spec.points_per_instance,
                                                 cls.diversity)
                    scale = cls.base_size * rng.uniform(0.75, 1.25)
                    theta = rng.uniform(0, 2 * np.pi)
                    lo, hi = _Z_BAND[cls.family]
                    center = origin + np.array([
                        rng.uniform(0.25, 0.75) * spec.block_size,
                        rng.uniform(0.25, 0.75) * spec.block_size,
                        rng.uniform(lo, hi),
                    ])
                    p = unit * scale @ _rot_z(theta).T + center
                    c = np.clip(cls.color + rng.normal(0, 0.05, (len(p), 3)), 0, 1)
                    pts.append(p)
                    cols.append(c)
                    labs.append(np.full(len(p), cls.class_id, dtype=np.int32))
    placed = sum(len(p) for p in pts)
    n_clutter = max(int(round(spec.clutter_fraction * placed)),
                    spec.min_points - placed)
    if n_clutter > 0:
        p = np.column_stack([
            rng.uniform(0, spec.room_size, n_clutter),
            rng.uniform(0, spec.room_size, n_clutter),
            rng.uniform(0, 2.0, n_clutter),
        ])
        pts.append(p)
        cols.append(rng.uniform(0.2, 0.8, (n_clutter, 3)))
        labs.append(np.full(n_clutter, -1, dtype=np.int32))
    points = np.vstack(pts)
    colors = np.vstack(cols)
    labels = np.concatenate(labs)
    return PointCloud(points, colors, _normalize_coords(points), labels)


def _normalize_coords(points: np.ndarray) -> np.ndarray:
    lo = points.min(axis=0)
    span = points.max(axis=0) - lo
    span = np.where(span < 1e-9, 1.0, span)
    return np.clip((points - lo) / span, 0.0, 1.0)


# ---------------------------------------------------------------------------
# PCS1 binary format
# ---------------------------------------------------------------------------

def write_scene(pc: PointCloud, path):
    """Serialize a PointCloud: magic 'PCS1', u32 n, u32 d=9, f32 n*d, i32 n (little-endian)."""
    n = len(pc)
    feats = np.ascontiguousarray(pc.features(), dtype="<f4")
    labels = np.ascontiguousarray(pc.labels, dtype="<i4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", n, FEATURE_DIM))
        fh.write(feats.tobytes())
        fh.write(labels.tobytes())


def read_scene(path) -> PointCloud:
    """Parse a PCS1 file; raises FormatError naming the offending field."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise FormatError("header: file shorter than 12 bytes")
    if blob[:4] != MAGIC:
        raise FormatError(f"magic: expected {MAGIC!r}, got {blob[:4]!r}")
    n, d = struct.unpack_from("<II", blob, 4)
    if d != FEATURE_DIM:
        raise FormatError(f"feature dim: expected {FEATURE_DIM}, got {d}")
    need_feat = 12 + 4 * n * d
    need_total = need_feat + 4 * n
    if len(blob) < need_feat:
        raise FormatError(f"features: payload truncated, need {need_feat - 12} bytes, "
                          f"have {len(blob) - 12}")
    if len(blob) < need_total:
        raise FormatError(f"labels: payload truncated, need {4 * n} bytes, "
                          f"have {len(blob) - need_feat}")
    feats = np.frombuffer(blob, dtype="<f4", count=n * d, offset=12).reshape(n, d)
    labels = np.frombuffer(blob, dtype="<i4", count=n, offset=need_feat)
    return PointCloud(feats[:, 0:3], feats[:, 3:6], feats[:, 6:9], labels)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class SceneManifest:
    """Index of a generated corpus: scene files, class inventory, splits, seed."""

    root: Path
    scene_files: list
    classes: list            # [{"id", "name", "family"}]
    splits: dict             # {"S0": [...], "S1": [...]}
    seed: int
    block_size: float
    min_block_class_points: int = 40
    generator: dict = field(default_factory=dict)
    _scene_cache: dict = field(default_factory=dict, repr=False)
    _block_cache: dict = field(default_factory=dict, repr=False)
    _catalog_cache: list = field(default=None, repr=False)

    @property
    def n_scenes(self) -> int:
        return len(self.scene_files)

    @property
    def class_ids(self) -> list:
        return [c["id"] for c in self.classes]

    def scene(self, i: int) -> PointCloud:
        if i not in self._scene_cache:
            self._scene_cache[i] = read_scene(self.root / self.scene_files[i])
        return self._scene_cache[i]

    def split_classes(self, name: str) -> list:
        if name not in self.splits:
            raise InvalidSpecError(f"unknown split '{name}', have {sorted(self.splits)}")
        return sorted(self.splits[name])

    def class_split(self, test_split: str) -> ClassSplit:
        """Split named `test_split` holds the novel test classes; the other trains."""
        other = next(s for s in self.splits if s != test_split)
        return ClassSplit(train_classes=frozenset(self.splits[other]),
                          test_classes=frozenset(self.split_classes(test_split)))

    def blocks(self, scene_idx: int) -> dict:
        """Block key -> point index array for one scene (grid of block_size in xy)."""
        if scene_idx not in self._block_cache:
            pc = self.scene(scene_idx)
            ij = _block_indices(pc.points, self.block_size)
            out = {}
            for key in np.unique(ij, axis=0):
                mask = (ij[:, 0] == key[0]) & (ij[:, 1] == key[1])
                out[(int(key[0]), int(key[1]))] = np.nonzero(mask)[0]
            self._block_cache[scene_idx] = out
        return self._block_cache[scene_idx]

    def block_catalog(self) -> list:
        """All (scene_idx, block_key, class_counts) triples, cached after first use."""
        if self._catalog_cache is None:
            catalog = []
            for si in range(self.n_scenes):
                pc = self.scene(si)
                for key, idx in self.blocks(si).items():
                    ids, counts = np.unique(pc.labels[idx], return_counts=True)
                    catalog.append((si, key, {int(i): int(c) for i, c in zip(ids, counts)}))
            self._catalog_cache = catalog
        return self._catalog_cache

    def save(self, path=None):
        path = Path(path) if path else self.root / "manifest.json"
        doc = {
            "format_version": MANIFEST_VERSION,
            "seed": self.seed,
            "block_size": self.block_size,
            "min_block_class_points": self.min_block_class_points,
            "classes": self.classes,
            "splits": {k: sorted(v) for k, v in self.splits.items()},
            "scenes": self.scene_files,
            "generator": self.generator,
        }
        path.write_text(json.dumps(doc, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path, validate: bool = True) -> "SceneManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        if doc.get("format_version") != MANIFEST_VERSION:
            raise FormatError(f"format_version: expected {MANIFEST_VERSION}, "
                              f"got {doc.get('format_version')}")
        man = cls(root=path.parent, scene_files=doc["scenes"], classes=doc["classes"],
                  splits={k: set(v) for k, v in doc["splits"].items()},
                  seed=doc["seed"], block_size=doc["block_size"],
                  min_block_class_points=doc.get("min_block_class_points", 40),
                  generator=doc.get("generator", {}))
        if validate:
            ids = set(man.class_ids)
            for i, f in enumerate(man.scene_files):
                if not (man.root / f).exists():
                    raise FormatError(f"scenes[{i}]: missing file {f}")
            stray = set().union(*(set(v) for v in man.splits.values())) - ids
            if stray:
                raise FormatError(f"splits: unknown class ids {sorted(stray)}")
        return man

    def validate_labels(self):
        """Deep check: stored labels fall inside the declared class inventory."""
        valid = set(self.class_ids) | {-1}
        for si in range(self.n_scenes):
            seen = set(np.unique(self.scene(si).labels).tolist())
            if not seen <= valid:
                raise FormatError(f"scenes[{si}]: labels {sorted(seen - valid)} "
                                  "not in class inventory")


def build_corpus(out_dir, n_scenes: int = 8, n_classes: int = 4, diversity: float = 1.0,
                 seed: int = 0, room_size: float = 4.0, block_size: float = 2.0,
                 points_per_instance: int = 320) -> SceneManifest:
    """Generate a corpus of scenes plus its manifest; split S0 = even ids, S1 = odd."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    specs = default_class_specs(n_classes, diversity)
    spec = SceneSpec(classes=specs, room_size=room_size, block_size=block_size,
                     points_per_instance=points_per_instance)
    files = []
    for i in range(n_scenes):
        pc = generate_scene(spec, seed=seed + 1000 * i)
        name = f"scene_{i:03d}.pcs"
        write_scene(pc, out / name)
        files.append(name)
    man = SceneManifest(
        root=out,
        scene_files=files,
        classes=[{"id": s.class_id, "name": f"{s.family}_{s.class_id}", "family": s.family}
                 for s in specs],
        splits={"S0": {c for c in range(n_classes) if c % 2 == 0},
                "S1": {c for c in range(n_classes) if c % 2 == 1}},
        seed=seed,
        block_size=block_size,
        generator={"n_scenes": n_scenes, "n_classes": n_classes, "diversity": diversity,
                   "room_size": room_size, "points_per_instance": points_per_instance},
    )
    man.save()
    return man


# ---------------------------------------------------------------------------
# block and episode sampling
# ---------------------------------------------------------------------------

def _block_indices(points: np.ndarray, block_size: float) -> np.ndarray:
    """Grid cell (i, j) of every point, anchored at the scene xy minimum."""
    lo = points[:, :2].min(axis=0)
    return np.floor((points[:, :2].astype(np.float64) - lo) / block_size).astype(int)


def _extract(pc: PointCloud, idx: np.ndarray, n_points: int, rng,
             required: tuple = ()) -> PointCloud:
    """Sample n_points from the block point set `idx`, recenter xy, renormalize.

    Sampling is without replacement when the block holds enough points and
    with replacement otherwise (fixed tensor shapes downstream). Class ids in
    `required` are guaranteed to survive the subsampling: if one is missing,
    a non-required slot is deterministically replaced by one of its points.
    """
    m = len(idx)
    sel = rng.choice(m, size=n_points, replace=m < n_points)
    src = idx[sel]
    block_labels = pc.labels[idx]
    for cid in required:
        if (pc.labels[src] == cid).any():
            continue
        pool = idx[block_labels == cid]
        if len(pool) == 0:
            raise EpisodeSamplingError(f"class {cid} absent from the selected block")
        evictable = np.nonzero(~np.isin(pc.labels[src], required))[0]
        slot = evictable[rng.integers(len(evictable))]
        src[slot] = pool[rng.integers(len(pool))]
    pts = pc.points[src].astype(np.float64)
    center_xy = 0.5 * (pts[:, :2].min(axis=0) + pts[:, :2].max(axis=0))
    pts[:, :2] -= center_xy
    return PointCloud(pts, pc.colors[src], _normalize_coords(pts), pc.labels[src])


def sample_block(scene: PointCloud, block_size: float, n_points: int, seed: int) -> PointCloud:
    """Draw one axis-aligned block from the scene and sample exactly n_points."""
    if len(scene) == 0:
        raise InvalidSpecError("empty scene")
    rng = np.random.default_rng(seed)
    ij = _block_indices(scene.points, block_size)
    keys = np.unique(ij, axis=0)
    pick = keys[rng.integers(len(keys))]
    idx = np.nonzero((ij[:, 0] == pick[0]) & (ij[:, 1] == pick[1]))[0]
    return _extract(scene, idx, n_points, rng)


def sample_episode(manifest: SceneManifest, n_way: int, k_shot: int,
                   split_role: str, seed: int, n_points: int = 512,
                   test_split: str = "S0") -> Episode:
    """Draw an N-way K-shot episode from one class split.

    split_role is 'train' or 'test' relative to `test_split` (the split held
    out for meta-testing). Support shots and the query come from pairwise
    distinct (scene, block) regions, every support mask is nonempty and every
    episode class occurs in the query ground truth. Deterministic per seed.
    """
    split = manifest.class_split(test_split)
    classes = sorted(split.test_classes if split_role == "test" else split.train_classes)
    rng = np.random.default_rng(np.random.SeedSequence([seed, n_way, k_shot,
                                                        0 if split_role == "test" else 1]))
    catalog = manifest.block_catalog()
    minc = manifest.min_block_class_points

    by_class = {c: [e for e in catalog if e[2].get(c, 0) >= minc] for c in classes}
    eligible = [c for c in classes if len(by_class[c]) >= k_shot + 1]
    if len(eligible) < n_way:
        lacking = [c for c in classes if c not in eligible]
        raise EpisodeSamplingError(
            f"need {n_way} classes with >= {k_shot + 1} populated blocks; "
            f"deficient classes: {lacking}")
    chosen = [eligible[i] for i in rng.choice(len(eligible), size=n_way, replace=False)]

    # query block must host every chosen class
    q_cands = [e for e in catalog if all(e[2].get(c, 0) >= minc for c in chosen)]
    if not q_cands:
        raise EpisodeSamplingError(f"no block contains all of classes {sorted(chosen)}")
    used = set()
    q_scene, q_key, _ = q_cands[rng.integers(len(q_cands))]
    used.add((q_scene, q_key))

    support = []
    support_refs = []
    for eci, cid in enumerate(chosen):
        shots = []
        for k in range(k_shot):
            cands = [e for e in by_class[cid] if (e[0], e[1]) not in used]
            if not cands:
                raise EpisodeSamplingError(
                    f"class {cid}: ran out of distinct blocks for shot {k + 1}/{k_shot}")
            s_scene, s_key, _ = cands[rng.integers(len(cands))]
            used.add((s_scene, s_key))
            pc = manifest.scene(s_scene)
            block = _extract(pc, manifest.blocks(s_scene)[s_key], n_points, rng,
                             required=(cid,))
            shots.append((block, block.labels == cid))
            support_refs.append((eci, k, s_scene, s_key))
        support.append(shots)

    q_pc = manifest.scene(q_scene)
    q_block = _extract(q_pc, manifest.blocks(q_scene)[q_key], n_points, rng,
                       required=tuple(chosen))
    q_labels = np.full(n_points, n_way, dtype=np.int32)
    for eci, cid in enumerate(chosen):
        q_labels[q_block.labels == cid] = eci

    return Episode(n_way=n_way, k_shot=k_shot, support=support, query=q_block,
                   query_labels=q_labels, class_map={i: c for i, c in enumerate(chosen)},
                   support_refs=support_refs, query_ref=(q_scene, q_key))


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def augment(pc: PointCloud, seed: int, scale_range=(0.8, 1.2), shift: float = 0.1,
            rot_range=(0.0, 2 * np.pi), jitter_sigma: float = 0.01) -> PointCloud:
    """Random rigid-ish perturbation: z-rotation, uniform scale, shift, Gaussian jitter.

    Labels, colors and normalized coordinates are untouched; normalized
    coordinates keep describing the pre-augmentation block frame.
    """
    if len(pc) == 0:
        raise InvalidSpecError("empty point cloud")
    rng = np.random.default_rng(seed)
    theta = rng.uniform(*rot_range)
    scale = rng.uniform(*scale_range)
    delta = rng.uniform(-shift, shift, 3) if shift > 0 else np.zeros(3)
    pts = pc.points.astype(np.float64) @ _rot_z(theta).T * scale + delta
    if jitter_sigma > 0:
        pts = pts + rng.normal(0.0, jitter_sigma, pts.shape)
    return PointCloud(pts, pc.colors.copy(), pc.norm_coords.copy(), pc.labels.copy())
