"""Seeded synthetic shapes corpus with in-domain / out-of-domain appearance splits.

Twelve classes: {circle, square, triangle, cross} x {red, green, blue} hue
family. The out-of-domain split draws hue offsets and object scales from
ranges disjoint from the training ones.
"""
from __future__ import annotations

import colorsys
import hashlib
import json
import math
import os
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box, iou

FORMAT_VERSION = 1
SHAPES = ("circle", "square", "triangle", "cross")
HUE_FAMILIES = {"red": 0.0, "green": 120.0, "blue": 240.0}
IN, OOD = "in", "ood"
SUPERSAMPLE = 4
TARGET_SPLITS = ("train", "val_id", "val_ood")
SPLIT_DOMAIN = {"train": IN, "val_id": IN, "val_ood": OOD,
                "pool_train": IN, "pool_val_id": IN, "pool_val_ood": OOD}
POOL_FOR = {"train": "pool_train", "val_id": "pool_val_id", "val_ood": "pool_val_ood"}


class DatasetError(RuntimeError):
    pass


class VersionMismatch(DatasetError):
    pass


class SchemaError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


def class_name(class_id: int) -> str:
    fam = list(HUE_FAMILIES)
    return f"{fam[class_id % 3]}-{SHAPES[class_id // 3]}"


@dataclass
class DatasetSpec:
    image_size: int = 64
    num_classes: int = 12
    min_instances: int = 1
    max_instances: int = 6
    max_overlap_iou: float = 0.3
    # object size (px): side for squares/triangles/crosses, diameter for circles
    scale_in: tuple[float, float] = (11.0, 18.0)
    scale_ood: tuple[float, float] = (19.0, 24.0)
    rotation_deg: tuple[float, float] = (-45.0, 45.0)
    # in-domain hue: family center +- hue_jitter; OOD: center +- [ood_hue_offset]
    hue_jitter: float = 15.0
    ood_hue_offset: tuple[float, float] = (22.0, 38.0)
    saturation: tuple[float, float] = (0.55, 1.0)
    value: tuple[float, float] = (0.6, 1.0)
    background: tuple[float, float] = (0.1, 0.3)
    noise_amplitude: float = 0.08
    n_train: int = 2000
    n_val_id: int = 200
    n_val_ood: int = 200
    pool_min_per_class: int = 64
    train_pool_min_per_class: int = 128

    def __post_init__(self):
        self.scale_in = tuple(self.scale_in)
        self.scale_ood = tuple(self.scale_ood)
        self.rotation_deg = tuple(self.rotation_deg)
        self.ood_hue_offset = tuple(self.ood_hue_offset)
        self.saturation = tuple(self.saturation)
        self.value = tuple(self.value)
        self.background = tuple(self.background)

    def validate(self) -> "DatasetSpec":
        if self.num_classes != len(SHAPES) * len(HUE_FAMILIES):
            raise SchemaError(f"num_classes must be {len(SHAPES) * len(HUE_FAMILIES)}")
        if min(self.n_train, self.n_val_id, self.n_val_ood) <= 0:
            raise SchemaError("split counts must be positive")
        if not 1 <= self.min_instances <= self.max_instances:
            raise SchemaError("instance count range invalid")
        if self.scale_in[1] >= self.scale_ood[0] and self.scale_ood[1] >= self.scale_in[0]:
            raise SchemaError("OOD scale range must be disjoint from the in-domain range")
        if self.ood_hue_offset[0] <= self.hue_jitter:
            raise SchemaError("OOD hue offsets must lie outside the in-domain jitter")
        # smallest object must keep a token center inside its box (8 px grid)
        if min(self.scale_in[0], self.scale_ood[0]) * math.sqrt(3) / 2 <= self.image_size / 8:
            raise SchemaError("minimum object scale below token resolution")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SchemaError(f"unknown dataset spec fields: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class Instance:
    class_id: int
    box: Box

    def to_dict(self) -> dict:
        return {"class_id": self.class_id, "cx": self.box.cx, "cy": self.box.cy,
                "w": self.box.w, "h": self.box.h}

    @classmethod
    def from_dict(cls, d: dict) -> "Instance":
        return cls(int(d["class_id"]), Box(d["cx"], d["cy"], d["w"], d["h"]))


@dataclass
class Scene:
    scene_id: str
    seed: int
    domain: str
    rgb: np.ndarray  # (H, W, 3) uint8
    instances: list[Instance]
    # per-instance rendered coverage masks; only kept when requested
    masks: list[np.ndarray] | None = field(default=None, repr=False)
    appearance: list[dict] | None = field(default=None, repr=False)

    @property
    def pixels(self) -> np.ndarray:
        return self.rgb.astype(np.float32) / 255.0

    def crc32(self) -> int:
        return zlib.crc32(np.ascontiguousarray(self.rgb).tobytes())


@dataclass
class PromptPool:
    """Per class, the reference (scene index into ``scenes``, box) pairs."""

    scenes: list[Scene]
    entries: dict[int, list[tuple[int, Box]]]

    def sizes(self) -> dict[int, int]:
        return {c: len(v) for c, v in self.entries.items()}


# ---------------------------------------------------------------------------
# rendering


def _shape_polygons(shape: str, cx: float, cy: float, s: float, theta: float) -> list[np.ndarray]:
    """Convex pieces (vertices, counter-clockwise) whose union is the shape."""
    c, si = math.cos(theta), math.sin(theta)

    def place(pts):
        pts = np.asarray(pts, dtype=np.float64)
        x = pts[:, 0] * c - pts[:, 1] * si + cx
        y = pts[:, 0] * si + pts[:, 1] * c + cy
        return np.stack([x, y], axis=1)

    if shape == "square":
        h = s / 2
        return [place([(-h, -h), (h, -h), (h, h), (-h, h)])]
    if shape == "triangle":
        r = s / math.sqrt(3)
        angs = [math.pi / 2 + k * 2 * math.pi / 3 for k in range(3)]
        return [place([(r * math.cos(a), -r * math.sin(a)) for a in angs][::-1])]
    if shape == "cross":
        h, t = s / 2, s / 6
        return [place([(-h, -t), (h, -t), (h, t), (-h, t)]),
                place([(-t, -h), (t, -h), (t, h), (-t, h)])]
    raise ValueError(shape)


def _inside_convex(poly: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    area = 0.5 * np.sum(poly[:, 0] * np.roll(poly[:, 1], -1) - np.roll(poly[:, 0], -1) * poly[:, 1])
    sign = 1.0 if area > 0 else -1.0
    ok = np.ones(x.shape, dtype=bool)
    for k in range(len(poly)):
        x0, y0 = poly[k]
        x1, y1 = poly[(k + 1) % len(poly)]
        ok &= sign * ((x1 - x0) * (y - y0) - (y1 - y0) * (x - x0)) >= 0
    return ok


def shape_extent(shape: str, cx: float, cy: float, s: float, theta: float):
    """Exact pixel-space (x0, y0, x1, y1) of the shape."""
    if shape == "circle":
        r = s / 2
        return cx - r, cy - r, cx + r, cy + r
    pts = np.concatenate(_shape_polygons(shape, cx, cy, s, theta))
    return pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max()


def render_coverage(shape: str, cx: float, cy: float, s: float, theta: float,
                    size: int) -> np.ndarray:
    """Anti-aliased (size, size) coverage in [0, 1] via supersampling."""
    ss = SUPERSAMPLE
    cov = np.zeros((size, size), dtype=np.float64)
    x0, y0, x1, y1 = shape_extent(shape, cx, cy, s, theta)
    px0, py0 = max(int(math.floor(x0)), 0), max(int(math.floor(y0)), 0)
    px1, py1 = min(int(math.ceil(x1)), size), min(int(math.ceil(y1)), size)
    if px1 <= px0 or py1 <= py0:
        return cov
    offs = (np.arange(ss) + 0.5) / ss
    xs = (np.arange(px0, px1)[:, None] + offs[None]).reshape(-1)
    ys = (np.arange(py0, py1)[:, None] + offs[None]).reshape(-1)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    if shape == "circle":
        hit = (gx - cx) ** 2 + (gy - cy) ** 2 <= (s / 2) ** 2
    else:
        hit = np.zeros(gx.shape, dtype=bool)
        for poly in _shape_polygons(shape, cx, cy, s, theta):
            hit |= _inside_convex(poly, gx, gy)
    hit = hit.reshape(py1 - py0, ss, px1 - px0, ss).mean(axis=(1, 3))
    cov[py0:py1, px0:px1] = hit
    return cov


def _value_noise(rng: np.random.Generator, size: int, cells: int = 8) -> np.ndarray:
    grid = rng.uniform(-1, 1, size=(cells + 1, cells + 1))
    t = np.linspace(0, cells, size, endpoint=False) + cells / size / 2
    i = np.floor(t).astype(int)
    f = t - i
    f = f * f * (3 - 2 * f)
    a = grid[i][:, i] * (1 - f)[None, :] + grid[i][:, i + 1] * f[None, :]
    b = grid[i + 1][:, i] * (1 - f)[None, :] + grid[i + 1][:, i + 1] * f[None, :]
    return a * (1 - f)[:, None] + b * f[:, None]


def _draw_hue(rng, spec: DatasetSpec, family: float, domain: str) -> float:
    if domain == IN:
        off = rng.uniform(-spec.hue_jitter, spec.hue_jitter)
    else:
        off = rng.uniform(*spec.ood_hue_offset) * (1 if rng.random() < 0.5 else -1)
    return (family + off) % 360.0


def gen_scene(seed: int, spec: DatasetSpec | None = None, domain: str = IN,
              scene_id: str | None = None, keep_masks: bool = False) -> Scene:
    """Render one scene; a pure function of ``(seed, spec, domain)``."""
    spec = spec or DatasetSpec()
    if domain not in (IN, OOD):
        raise ValueError(f"domain must be {IN!r} or {OOD!r}")
    size = spec.image_size
    rng = np.random.default_rng(seed)
    fams = list(HUE_FAMILIES.values())

    base = rng.uniform(*spec.background)
    img = base + spec.noise_amplitude * np.stack(
        [_value_noise(rng, size) for _ in range(3)], axis=-1)

    n = int(rng.integers(spec.min_instances, spec.max_instances + 1))
    scale = spec.scale_in if domain == IN else spec.scale_ood
    instances, masks, looks = [], [], []
    for _ in range(n):
        cls = int(rng.integers(spec.num_classes))
        shape = SHAPES[cls // 3]
        for _attempt in range(50):
            s = rng.uniform(*scale)
            theta = math.radians(rng.uniform(*spec.rotation_deg)) if shape != "circle" else 0.0
            half = s  # generous margin for rotated extents
            cx = rng.uniform(half * 0.75, size - half * 0.75)
            cy = rng.uniform(half * 0.75, size - half * 0.75)
            x0, y0, x1, y1 = shape_extent(shape, cx, cy, s, theta)
            if x0 < 0.5 or y0 < 0.5 or x1 > size - 0.5 or y1 > size - 0.5:
                continue
            box = Box((x0 + x1) / 2 / size, (y0 + y1) / 2 / size, (x1 - x0) / size, (y1 - y0) / size)
            if all(iou(box, other.box) <= spec.max_overlap_iou for other in instances):
                break
        else:
            continue
        hue = _draw_hue(rng, spec, fams[cls % 3], domain)
        sat = rng.uniform(*spec.saturation)
        val = rng.uniform(*spec.value)
        color = np.array(colorsys.hsv_to_rgb(hue / 360.0, sat, val))
        cov = render_coverage(shape, cx, cy, s, theta, size)
        img = img * (1 - cov[..., None]) + color[None, None, :] * cov[..., None]
        instances.append(Instance(cls, box))
        if keep_masks:
            masks.append(cov)
        looks.append({"hue": hue, "scale": s, "theta": theta, "sat": sat, "val": val})
    rgb = np.clip(np.rint(np.clip(img, 0, 1) * 255), 0, 255).astype(np.uint8)
    return Scene(scene_id or f"scene-{seed}", int(seed), domain, rgb, instances,
                 masks if keep_masks else None, looks)


# ---------------------------------------------------------------------------
# splits


def _scene_seed(master_seed: int, split: str, i: int) -> int:
    code = list(SPLIT_DOMAIN).index(split)
    return int(np.random.SeedSequence([master_seed, code, i]).generate_state(1, dtype=np.uint32)[0])


def _gen_split(spec: DatasetSpec, master_seed: int, split: str, n: int) -> list[Scene]:
    dom = SPLIT_DOMAIN[split]
    return [gen_scene(_scene_seed(master_seed, split, i), spec, dom, f"{split}-{i:05d}")
            for i in range(n)]


def pool_from_scenes(scenes: list[Scene]) -> PromptPool:
    entries: dict[int, list[tuple[int, Box]]] = {}
    for si, sc in enumerate(scenes):
        for inst in sc.instances:
            entries.setdefault(inst.class_id, []).append((si, inst.box))
    return PromptPool(scenes, entries)


def _gen_pool(spec: DatasetSpec, master_seed: int, split: str, min_per_class: int) -> list[Scene]:
    dom = SPLIT_DOMAIN[split]
    counts = np.zeros(spec.num_classes, dtype=int)
    scenes = []
    i = 0
    while counts.min() < min_per_class:
        sc = gen_scene(_scene_seed(master_seed, split, i), spec, dom, f"{split}-{i:05d}")
        for inst in sc.instances:
            counts[inst.class_id] += 1
        scenes.append(sc)
        i += 1
    return scenes


def build_splits(spec: DatasetSpec | None = None, master_seed: int = 0) -> dict[str, list[Scene]]:
    """Generate target splits and their reference-scene pools.

    Returns a mapping with ``train``, ``val_id``, ``val_ood`` and the pool
    splits ``pool_train``, ``pool_val_id``, ``pool_val_ood``.
    """
    spec = (spec or DatasetSpec()).validate()
    out = {
        "train": _gen_split(spec, master_seed, "train", spec.n_train),
        "val_id": _gen_split(spec, master_seed, "val_id", spec.n_val_id),
        "val_ood": _gen_split(spec, master_seed, "val_ood", spec.n_val_ood),
        "pool_train": _gen_pool(spec, master_seed, "pool_train", spec.train_pool_min_per_class),
        "pool_val_id": _gen_pool(spec, master_seed, "pool_val_id", spec.pool_min_per_class),
        "pool_val_ood": _gen_pool(spec, master_seed, "pool_val_ood", spec.pool_min_per_class),
    }
    seeds = [sc.seed for split in out.values() for sc in split]
    if len(set(seeds)) != len(seeds):
        raise DatasetError("scene seed collision; choose another master seed")
    return out


@dataclass
class Dataset:
    spec: DatasetSpec
    master_seed: int
    splits: dict[str, list[Scene]]
    checksum: str = ""

    def pool(self, split: str) -> PromptPool:
        return pool_from_scenes(self.splits[POOL_FOR.get(split, split)])


def make_dataset(spec: DatasetSpec | None = None, master_seed: int = 0) -> Dataset:
    spec = (spec or DatasetSpec()).validate()
    return Dataset(spec, master_seed, build_splits(spec, master_seed))


# ---------------------------------------------------------------------------
# on-disk format


def _manifest(ds: Dataset) -> dict:
    splits = {}
    for name, scenes in ds.splits.items():
        splits[name] = {
            "domain": SPLIT_DOMAIN.get(name, scenes[0].domain if scenes else IN),
            "seeds": [sc.seed for sc in scenes],
            "scenes": [{"scene_id": sc.scene_id, "seed": sc.seed, "domain": sc.domain,
                        "instances": [i.to_dict() for i in sc.instances],
                        "crc32": sc.crc32()} for sc in scenes],
        }
    return {"format": "grqodet-shapes", "version": FORMAT_VERSION, "master_seed": ds.master_seed,
            "spec": asdict(ds.spec), "splits": splits}


def save_dataset(directory: str | os.PathLike, ds: Dataset) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, scenes in ds.splits.items():
        with open(d / f"scenes_{name}.bin", "wb") as fh:
            for sc in scenes:
                fh.write(np.ascontiguousarray(sc.rgb, dtype=np.uint8).tobytes())
    text = json.dumps(_manifest(ds), indent=1)
    (d / "manifest.json").write_text(text)
    ds.checksum = hashlib.sha256(text.encode()).hexdigest()
    return d


def dataset_checksum(directory: str | os.PathLike) -> str:
    return hashlib.sha256((Path(directory) / "manifest.json").read_bytes()).hexdigest()


def load_dataset(directory: str | os.PathLike) -> Dataset:
    d = Path(directory)
    path = d / "manifest.json"
    if not path.exists():
        raise SchemaError(f"no manifest.json in {d}")
    raw = path.read_bytes()
    try:
        man = json.loads(raw)
    except json.JSONDecodeError as e:
        raise SchemaError(f"malformed manifest: {e}") from None
    if not isinstance(man, dict) or "version" not in man:
        raise SchemaError("manifest lacks a version")
    if man["version"] != FORMAT_VERSION:
        raise VersionMismatch(f"dataset version {man['version']} != supported {FORMAT_VERSION}")
    try:
        spec = DatasetSpec.from_dict(man["spec"])
        split_defs = man["splits"]
    except (KeyError, TypeError) as e:
        raise SchemaError(f"malformed manifest: {e}") from None
    size = spec.image_size
    nbytes = size * size * 3
    splits = {}
    for name, sdef in split_defs.items():
        blob = (d / f"scenes_{name}.bin").read_bytes()
        recs = sdef["scenes"]
        if len(blob) != nbytes * len(recs):
            raise ChecksumError(f"scenes_{name}.bin has {len(blob)} bytes, "
                                f"expected {nbytes * len(recs)}")
        scenes = []
        for k, rec in enumerate(recs):
            chunk = blob[k * nbytes:(k + 1) * nbytes]
            if zlib.crc32(chunk) != rec["crc32"]:
                raise ChecksumError(f"CRC mismatch for scene {rec['scene_id']}")
            insts = [Instance.from_dict(i) for i in rec["instances"]]
            for inst in insts:
                if not 0 <= inst.class_id < spec.num_classes:
                    raise SchemaError(f"class id {inst.class_id} outside [0, {spec.num_classes})")
            rgb = np.frombuffer(chunk, dtype=np.uint8).reshape(size, size, 3).copy()
            scenes.append(Scene(rec["scene_id"], int(rec["seed"]), rec["domain"], rgb, insts))
        splits[name] = scenes
    return Dataset(spec, int(man.get("master_seed", 0)), splits, hashlib.sha256(raw).hexdigest())
