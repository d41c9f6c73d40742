"""Synthetic climate-conditioned segmentation scenes and their on-disk format.

Scenes are Voronoi partitions of a coarse parcel lattice, each region given
one class. Built classes (building, road) and water render identically in
every climate; the hues of the two vegetation classes depend on the climate
code, and in paired climates the tree and cropland hues are swapped, so the
image alone does not say which vegetation class a green region is.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .prompts import ClimateGrid, ClimateZone, ImageMetadata, default_grid

ALL_CLASSES = ("background", "building", "tree", "agriculture", "road", "water")
VEGETATION = ("tree", "agriculture")

BASE_COLORS = {
    "background": (0.70, 0.63, 0.52),
    "building": (0.74, 0.42, 0.38),
    "road": (0.38, 0.38, 0.40),
    "water": (0.14, 0.30, 0.52),
}

_DARK_GREEN = (0.16, 0.36, 0.17)
_YELLOW_GREEN = (0.50, 0.60, 0.26)
_MID_GREEN = (0.28, 0.47, 0.22)
_KHAKI = (0.55, 0.53, 0.30)
_GREY_OLIVE = (0.40, 0.43, 0.30)
_STRAW = (0.68, 0.60, 0.36)


@dataclass(frozen=True)
class ClimateLook:
    tree: tuple
    agriculture: tuple
    noise: float


CLIMATE_LOOKS = {
    "Dfb": ClimateLook(_DARK_GREEN, _YELLOW_GREEN, 0.045),
    "Cwa": ClimateLook(_YELLOW_GREEN, _DARK_GREEN, 0.055),
    "Cfb": ClimateLook(_MID_GREEN, _KHAKI, 0.045),
    "Aw": ClimateLook(_KHAKI, _MID_GREEN, 0.055),
    "Csa": ClimateLook(_GREY_OLIVE, _STRAW, 0.05),
    "BSh": ClimateLook(_STRAW, _GREY_OLIVE, 0.05),
}


class DatasetError(ValueError):
    pass


class ClassOrderError(DatasetError):
    pass


@dataclass
class LabeledScene:
    image: np.ndarray  # float [3, H, W] in [0, 1]
    labels: np.ndarray  # uint8 [H, W]
    metadata: ImageMetadata
    class_names: list
    scene_id: str = ""
    climate: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.image.shape[1:] != self.labels.shape:
            raise DatasetError(f"image {self.image.shape} and labels {self.labels.shape} differ")
        if self.labels.size and self.labels.max() >= len(self.class_names):
            raise DatasetError("label id >= number of classes")

    @property
    def K(self) -> int:
        return len(self.class_names)


def default_classes(K: int) -> list[str]:
    if not 3 <= K <= len(ALL_CLASSES):
        raise ValueError(f"K must be in [3, {len(ALL_CLASSES)}], got {K}")
    return list(ALL_CLASSES[:K])


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in keys])


def _code_key(code: str) -> int:
    return zlib.crc32(code.encode())


def _blocky(rng, H, W, cell):
    low = rng.standard_normal((H // cell + 1, W // cell + 1))
    return np.kron(low, np.ones((cell, cell)))[:H, :W]


def voronoi_parcels(rng, n_parcels: int, n_regions: int) -> np.ndarray:
    pts = rng.random((n_regions, 2)) * n_parcels
    c = np.arange(n_parcels) + 0.5
    yy, xx = np.meshgrid(c, c, indexing="ij")
    d = (yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2
    return d.argmin(axis=-1)


def _metadata_for(seed: int, code: str, grid: ClimateGrid) -> ImageMetadata:
    cells = grid.cells_for(code)
    if not cells:
        return ImageMetadata(0.0, 0.0, region_name=f"synthetic-{code}")
    rng = _rng(seed, 7, _code_key(code))
    lat, lon = cells[int(rng.integers(len(cells)))]
    jit = rng.uniform(-0.2, 0.2, 2)
    return ImageMetadata(round(float(lat + jit[0]), 4), round(float(lon + jit[1]), 4),
                         region_name=f"synthetic-{code}", resolution_m=0.5)


def generate_scene(seed: int, climate, size: int = 64, K: int | None = 5, class_names=None,
                   parcel: int = 8, grid: ClimateGrid | None = None) -> LabeledScene:
    """Procedural scene for one climate.

    The layout and the built/water textures depend on ``seed`` only; the
    vegetation textures also depend on the climate.
    """
    code = climate.code if isinstance(climate, ClimateZone) else str(climate)
    if code not in CLIMATE_LOOKS:
        raise ValueError(f"no synthetic appearance defined for climate {code!r}")
    if size % 8 or size <= 0 or size % parcel:
        raise ValueError(f"size {size} must be a positive multiple of 8 and of parcel {parcel}")
    classes = list(class_names) if class_names is not None else default_classes(K)
    if any(c not in ALL_CLASSES for c in classes) or len(set(classes)) != len(classes):
        raise ValueError(f"class names must be distinct members of {ALL_CLASSES}")
    look = CLIMATE_LOOKS[code]
    rng = _rng(seed, 1)
    n = size // parcel
    n_regions = int(rng.integers(4, 8)) * max(1, (size // 64) ** 2)
    regions = voronoi_parcels(rng, n, n_regions)
    region_cls = rng.integers(0, len(classes), n_regions)
    labels = np.kron(region_cls[regions], np.ones((parcel, parcel), dtype=int)).astype(np.uint8)

    H = W = size
    img = np.zeros((3, H, W))
    for k, name in enumerate(classes):
        m = labels == k
        if not m.any():
            continue
        ci = ALL_CLASSES.index(name)
        if name in VEGETATION:
            trng = _rng(seed, 2, ci, _code_key(code))
            base = np.array(getattr(look, name))[:, None, None]
            tex = base * (1.0 + 0.12 * _blocky(trng, H, W, 4)) \
                + trng.normal(0.0, look.noise, (3, H, W))
        else:
            trng = _rng(seed, 2, ci)
            base = np.array(BASE_COLORS[name])[:, None, None]
            if name == "background":
                tex = base + trng.normal(0.0, 0.04, (3, H, W))
            elif name == "building":
                roof = np.kron(trng.uniform(-0.06, 0.06, (n, n)), np.ones((parcel, parcel)))
                tex = base + roof + trng.normal(0.0, 0.03, (3, H, W))
            else:
                tex = base + trng.normal(0.0, 0.02, (3, H, W))
        img[:, m] = tex[:, m]
    meta = _metadata_for(seed, code, grid or default_grid())
    return LabeledScene(np.clip(img, 0.0, 1.0), labels, meta, classes,
                        scene_id=f"s{seed}", climate=code, seed=seed)


def tile_patches(scene: LabeledScene, patch: int = 64) -> list[LabeledScene]:
    H, W = scene.labels.shape
    if H % patch or W % patch:
        raise ValueError(f"scene {H}x{W} not divisible by patch {patch}")
    out = []
    for i in range(H // patch):
        for j in range(W // patch):
            sl = (slice(i * patch, (i + 1) * patch), slice(j * patch, (j + 1) * patch))
            sid = scene.scene_id if (H, W) == (patch, patch) else f"{scene.scene_id}_r{i}c{j}"
            out.append(LabeledScene(scene.image[(slice(None),) + sl].copy(), scene.labels[sl].copy(),
                                    scene.metadata, list(scene.class_names), sid,
                                    scene.climate, scene.seed))
    return out


def untile(tiles: list[LabeledScene], rows: int, cols: int) -> np.ndarray:
    return np.block([[tiles[i * cols + j].labels for j in range(cols)] for i in range(rows)])


FLIPS = ("none", "h", "v", "hv")


def flip_arrays(image, labels, mode: str):
    if mode in ("h", "hv"):
        image, labels = image[..., ::-1], labels[..., ::-1]
    if mode in ("v", "hv"):
        image, labels = image[..., ::-1, :], labels[..., ::-1, :]
    return np.ascontiguousarray(image), np.ascontiguousarray(labels)


def augment_flip(scene: LabeledScene, rng: np.random.Generator, mode: str | None = None) -> LabeledScene:
    """Apply one of none/h/v/hv (drawn uniformly unless given) to image and labels."""
    mode = mode or FLIPS[int(rng.integers(4))]
    img, lab = flip_arrays(scene.image, scene.labels, mode)
    return LabeledScene(img, lab, scene.metadata, list(scene.class_names), scene.scene_id,
                        scene.climate, scene.seed)


# --------------------------------------------------------------------------
# on-disk format
#
#   <root>/manifest.json           DatasetManifest
#   <root>/images/<id>.png         8-bit RGB
#   <root>/labels/<id>.png         8-bit single channel, value = class id
#   <root>/meta/<id>.json          ImageMetadata + climate + seed
#   <root>/vocab.txt               prompt vocabulary, one token per line


@dataclass
class DatasetManifest:
    class_names: list
    splits: dict = field(default_factory=dict)  # split -> list of record dicts
    format_version: int = 1
    config: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.class_names)

    def validate(self) -> None:
        seen = {}
        for split, recs in self.splits.items():
            for r in recs:
                if r["id"] in seen and seen[r["id"]] != split:
                    raise DatasetError(f"scene {r['id']} appears in splits {seen[r['id']]} and {split}")
                seen[r["id"]] = split

    def to_json(self) -> str:
        d = asdict(self)
        d["K"] = self.K
        return json.dumps(d, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        m = cls(d["class_names"], d["splits"], d.get("format_version", 1), d.get("config", {}))
        if d.get("K", m.K) != m.K:
            raise DatasetError("manifest K disagrees with class_names")
        return m


def _record(s: LabeledScene) -> dict:
    return {"id": s.scene_id, "seed": s.seed, "climate": s.climate,
            "image": f"images/{s.scene_id}.png", "label": f"labels/{s.scene_id}.png",
            "meta": f"meta/{s.scene_id}.json"}


def write_dataset(scenes_by_split: dict, root, config: dict | None = None, vocab=None) -> DatasetManifest:
    from PIL import Image

    root = Path(root)
    names = None
    for scenes in scenes_by_split.values():
        for s in scenes:
            if names is None:
                names = list(s.class_names)
            elif list(s.class_names) != names:
                raise ClassOrderError("scenes disagree on class order")
    manifest = DatasetManifest(names or [], {k: [_record(s) for s in v] for k, v in scenes_by_split.items()},
                               config=config or {})
    manifest.validate()
    for sub in ("images", "labels", "meta"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for scenes in scenes_by_split.values():
        for s in scenes:
            rgb = np.round(s.image.transpose(1, 2, 0) * 255.0).astype(np.uint8)
            Image.fromarray(rgb, "RGB").save(root / "images" / f"{s.scene_id}.png")
            Image.fromarray(s.labels.astype(np.uint8), "L").save(root / "labels" / f"{s.scene_id}.png")
            meta = {**asdict(s.metadata), "climate": s.climate, "seed": s.seed,
                    "class_names": list(s.class_names)}
            (root / "meta" / f"{s.scene_id}.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")
    (root / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    if vocab is not None:
        vocab.save(root / "vocab.txt")
    return manifest


def read_manifest(root) -> DatasetManifest:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DatasetError(f"no manifest at {path}")
    m = DatasetManifest.from_json(path.read_text(encoding="utf-8"))
    m.validate()
    return m


def read_dataset(root, split: str, class_names=None) -> list[LabeledScene]:
    from PIL import Image

    root = Path(root)
    m = read_manifest(root)
    if class_names is not None and list(class_names) != list(m.class_names):
        raise ClassOrderError(f"expected class order {list(class_names)}, dataset has {m.class_names}")
    if split not in m.splits:
        raise DatasetError(f"split {split!r} not in manifest (have {sorted(m.splits)})")
    out = []
    for r in m.splits[split]:
        for key in ("image", "label", "meta"):
            if not (root / r[key]).exists():
                raise DatasetError(f"missing file {root / r[key]}")
        img = np.asarray(Image.open(root / r["image"]).convert("RGB"), dtype=np.float64) / 255.0
        lab = np.asarray(Image.open(root / r["label"]), dtype=np.uint8)
        meta = json.loads((root / r["meta"]).read_text(encoding="utf-8"))
        if meta.pop("class_names") != m.class_names:
            raise ClassOrderError(f"{r['meta']} class order differs from manifest")
        climate, seed = meta.pop("climate"), meta.pop("seed")
        out.append(LabeledScene(img.transpose(2, 0, 1).copy(), lab.copy(), ImageMetadata(**meta),
                                list(m.class_names), r["id"], climate, seed))
    return out


# --------------------------------------------------------------------------
# dataset recipes


@dataclass
class DataConfig:
    seed: int = 0
    climates: list = field(default_factory=lambda: ["Dfb", "Cwa"])
    splits: dict = field(default_factory=lambda: {"train": 8, "val": 2, "test": 4})
    scene_size: int = 128
    patch: int = 64
    K: int = 5
    class_names: list | None = None
    parcel: int = 8

    def classes(self) -> list[str]:
        return list(self.class_names) if self.class_names else default_classes(self.K)


_SPLIT_OFFSET = {"train": 0, "val": 100_000, "test": 200_000}


def generate_split(cfg: DataConfig, split: str) -> list[LabeledScene]:
    offset = _SPLIT_OFFSET.get(split, 300_000 + zlib.crc32(split.encode()) % 100_000)
    tiles = []
    for i in range(cfg.splits[split]):
        seed = cfg.seed * 1_000_000 + offset + i
        climate = cfg.climates[i % len(cfg.climates)]
        scene = generate_scene(seed, climate, cfg.scene_size, class_names=cfg.classes(),
                               parcel=cfg.parcel)
        tiles.extend(tile_patches(scene, cfg.patch))
    return tiles


def make_dataset(cfg: DataConfig, root=None, vocab=None) -> dict:
    """Generate every split; write to ``root`` when given."""
    out = {split: generate_split(cfg, split) for split in cfg.splits}
    if root is not None:
        if vocab is None:
            from .prompts import build_vocabulary
            vocab = build_vocabulary()
        write_dataset(out, root, config=asdict(cfg), vocab=vocab)
    return out
