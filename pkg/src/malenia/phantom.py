"""Procedural 3D phantom volumes with parameterized lesions.

Each lesion is an analytic solid (sphere, ellipsoid, blob, shell, punctate)
rasterized into a binary mask; the image is a textured background plus the
lesion contrast pattern.  Geometry, contrast sign, texture, margin, and region
deterministically fix the lesion's eight attribute labels, so the ground truth
is exact by construction.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, asdict, field

import numpy as np
from scipy.ndimage import binary_dilation, gaussian_filter

from .attributes import ASPECTS
from .errors import BoundsError, ConfigError, FormatError, OverlapError, ShapeError

_VOLUME_MAGIC = b"MLNA"
_VOLUME_VERSION = 1

GEOMETRIES = ("sphere", "ellipsoid", "blob", "shell", "punctate")

# Octant regions, indexed by (x_half << 2) | (y_half << 1) | z_half.
REGION_NAMES = (
    "Liver",
    "Kidney",
    "Gallbladder",
    "Pancreas",
    "Colon",
    "Right Lung",
    "Left Lung",
    "Hepatic Vessel",
)

_BG_LEVEL_ENHANCED = 0.55
_BG_LEVEL_PLAIN = 0.2
_RIM_ENHANCEMENT = 0.35
_BG_TEXTURE_STD = 0.05


@dataclass(frozen=True)
class LesionSpec:
    class_name: str
    geometry: str
    center: tuple[int, int, int]
    size_voxels: float
    density_offset: float
    density_variation: str  # homogeneous | heterogeneous
    margin: str  # well-defined | ill-defined
    organ_region: str
    touching_neighbor: bool = False

    def __post_init__(self):
        if self.geometry not in GEOMETRIES:
            raise ConfigError(f"unknown geometry {self.geometry!r}")
        if self.size_voxels <= 0:
            raise ConfigError("size_voxels must be positive")
        if self.density_variation not in ("homogeneous", "heterogeneous"):
            raise ConfigError(f"bad density_variation {self.density_variation!r}")
        if self.margin not in ("well-defined", "ill-defined"):
            raise ConfigError(f"bad margin {self.margin!r}")
        if self.density_offset == 0.0:
            raise ConfigError("density_offset must be nonzero")


@dataclass
class Volume:
    data: np.ndarray  # (H, W, D) float32
    spacing: tuple[float, float, float]
    enhancement_flag: bool

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError("volume data must be 3D")
        if any(s % 32 for s in self.data.shape):
            raise ShapeError(f"shape {self.data.shape} not divisible by 32")
        if not np.all(np.isfinite(self.data)):
            raise ShapeError("volume contains non-finite values")
        if any(s <= 0 for s in self.spacing):
            raise ConfigError("spacing must be positive")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class Sample:
    volume: Volume
    lesions: list[tuple[LesionSpec, np.ndarray]]
    attribute_labels: list[dict[str, str]]

    @property
    def classes(self) -> set[str]:
        return {spec.class_name for spec, _ in self.lesions}


def region_of(center, shape) -> str:
    idx = (
        (int(center[0]) >= shape[0] // 2) << 2
        | (int(center[1]) >= shape[1] // 2) << 1
        | (int(center[2]) >= shape[2] // 2)
    )
    return REGION_NAMES[idx]


def region_box(name: str, shape) -> tuple[tuple[int, int], ...]:
    """Inclusive-exclusive coordinate bounds of a named octant."""
    idx = REGION_NAMES.index(name)
    bits = ((idx >> 2) & 1, (idx >> 1) & 1, idx & 1)
    return tuple(
        (shape[d] // 2 * bits[d], shape[d] // 2 * (bits[d] + 1)) for d in range(3)
    )


def _spec_rng(spec: LesionSpec) -> np.random.Generator:
    # geometry details (blob lobes, texture) must be a pure function of the spec
    digest = hashlib.blake2b(
        json.dumps(asdict(spec), sort_keys=True).encode(), digest_size=8
    ).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def lesion_extent(spec: LesionSpec) -> float:
    """Upper bound on the lesion's reach from its center, in voxels."""
    r = spec.size_voxels
    return {
        "sphere": r,
        "ellipsoid": 1.25 * r,
        "blob": 1.4 * r,
        "shell": r,
        "punctate": min(r, 2.0),
    }[spec.geometry]


def rasterize_lesion(spec: LesionSpec, shape) -> np.ndarray:
    """Exact binary mask of the analytic lesion solid."""
    grids = np.ogrid[: shape[0], : shape[1], : shape[2]]
    cx, cy, cz = spec.center
    dx, dy, dz = grids[0] - cx, grids[1] - cy, grids[2] - cz
    r = spec.size_voxels
    if spec.geometry == "sphere":
        mask = dx * dx + dy * dy + dz * dz <= r * r
    elif spec.geometry == "punctate":
        rp = min(r, 2.0)
        mask = dx * dx + dy * dy + dz * dz <= rp * rp
    elif spec.geometry == "ellipsoid":
        rx, ry, rz = r, 0.75 * r, 1.25 * r
        mask = (dx / rx) ** 2 + (dy / ry) ** 2 + (dz / rz) ** 2 <= 1.0
    elif spec.geometry == "shell":
        d2 = dx * dx + dy * dy + dz * dz
        mask = (d2 <= r * r) & (d2 >= (0.6 * r) ** 2)
    elif spec.geometry == "blob":
        rng = _spec_rng(spec)
        mask = dx * dx + dy * dy + dz * dz <= (0.7 * r) ** 2
        for _ in range(3):
            off = rng.uniform(-0.6 * r, 0.6 * r, size=3)
            rr = rng.uniform(0.5 * r, 0.8 * r)
            mask = mask | (
                (dx - off[0]) ** 2 + (dy - off[1]) ** 2 + (dz - off[2]) ** 2
                <= rr * rr
            )
    else:  # pragma: no cover - guarded by LesionSpec
        raise ConfigError(f"unknown geometry {spec.geometry!r}")
    return np.ascontiguousarray(mask)


def attribute_labels_for(spec: LesionSpec, enhancement_flag: bool) -> dict[str, str]:
    """Total, deterministic map from lesion parameters to the 8 aspect values."""
    offset = spec.density_offset
    if spec.geometry == "sphere":
        shape_value = "Cystic" if offset <= -0.5 else "Round-like"
    elif spec.geometry == "ellipsoid":
        shape_value = "Nodular"
    elif spec.geometry == "blob":
        shape_value = "Irregular"
    elif spec.geometry == "shell":
        shape_value = "Wall thickening"
    else:
        shape_value = "Punctate"

    if offset <= -0.5:
        density = "Hypodense fluid-like lesion"
    elif offset < 0:
        density = "Hypodense lesion"
    elif offset < 0.5:
        density = "Isodense lesion"
    else:
        density = "Hyperdense lesion"

    if spec.geometry in ("sphere", "ellipsoid") and offset <= -0.5:
        specific = "Cyst"
    elif (
        spec.geometry in ("sphere", "ellipsoid", "punctate")
        and offset >= 0.5
        and spec.density_variation == "homogeneous"
    ):
        specific = "Stone"
    elif spec.geometry == "blob":
        specific = (
            "Presence of decreased density areas"
            if offset < 0
            else "Presence of increased density areas"
        )
    elif spec.geometry == "shell":
        specific = "Wall calcification"
    else:
        specific = "No specific features"

    return {
        "Location": spec.organ_region,
        "Shape": shape_value,
        "Density": density,
        "Density Variations": (
            "Homogeneous"
            if spec.density_variation == "homogeneous"
            else "Heterogeneous"
        ),
        "Surface Characteristics": (
            "Well-defined margin"
            if spec.margin == "well-defined"
            else "Ill-defined margin"
        ),
        "Enhancement Status": "Enhanced CT" if enhancement_flag else "Non-contrast CT",
        "Relationship with Surrounding Organs": (
            "Close relationship with adjacent organs"
            if spec.touching_neighbor
            else "No close relationship with surrounding organs"
        ),
        "Specific Features": specific,
    }


def generate_phantom(
    spec_list: list[LesionSpec],
    background_texture_seed: int,
    shape: tuple[int, int, int] = (32, 32, 32),
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    enhancement_flag: bool | None = None,
) -> Sample:
    """Rasterize lesions into a textured volume with exact ground truth."""
    if any(s % 32 for s in shape):
        raise ShapeError(f"shape {shape} not divisible by 32")
    rng = np.random.default_rng(background_texture_seed)
    if enhancement_flag is None:
        enhancement_flag = bool(rng.random() < 0.5)

    masks = []
    for spec in spec_list:
        ext = lesion_extent(spec)
        for d in range(3):
            if spec.center[d] - ext < 0 or spec.center[d] + ext > shape[d] - 1:
                raise BoundsError(
                    f"lesion {spec.class_name!r} at {spec.center} with extent "
                    f"{ext:.1f} exceeds volume shape {shape}"
                )
        if region_of(spec.center, shape) != spec.organ_region:
            raise ConfigError(
                f"center {spec.center} lies in region "
                f"{region_of(spec.center, shape)!r}, spec says {spec.organ_region!r}"
            )
        mask = rasterize_lesion(spec, shape)
        if not mask.any():
            raise BoundsError(f"lesion {spec.class_name!r} rasterized to empty mask")
        masks.append(mask)

    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            if np.any(masks[i] & masks[j]):
                raise OverlapError(
                    f"lesions {spec_list[i].class_name!r} and "
                    f"{spec_list[j].class_name!r} intersect"
                )

    level = _BG_LEVEL_ENHANCED if enhancement_flag else _BG_LEVEL_PLAIN
    texture = gaussian_filter(rng.standard_normal(shape), sigma=1.5)
    std = texture.std()
    if std > 0:
        texture *= _BG_TEXTURE_STD / std
    image = level + texture

    for spec, mask in zip(spec_list, masks):
        soft = mask.astype(np.float64)
        if spec.margin == "ill-defined":
            soft = gaussian_filter(soft, sigma=1.0)
        pattern = np.full(shape, spec.density_offset)
        srng = _spec_rng(spec)
        if spec.density_variation == "heterogeneous":
            bumps = gaussian_filter(srng.standard_normal(shape), sigma=1.0)
            bstd = bumps.std()
            if bstd > 0:
                bumps /= bstd
            pattern *= 1.0 + 0.5 * bumps
        image += soft * pattern
        if enhancement_flag:
            # contrast uptake shows as a bright rim around the lesion, so the
            # enhancement status is readable from the lesion itself, not just
            # the global background level
            rim = binary_dilation(mask, iterations=1) & ~mask
            image += rim * _RIM_ENHANCEMENT
        if spec.touching_neighbor:
            # adjacent structure touching the lesion surface; image-only, not labeled
            ext = lesion_extent(spec)
            direction = srng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            ncenter = np.asarray(spec.center) + direction * (ext + 2.0)
            grids = np.ogrid[: shape[0], : shape[1], : shape[2]]
            d2 = sum((grids[d] - ncenter[d]) ** 2 for d in range(3))
            image += (d2 <= 4.0) * 0.15

    volume = Volume(
        data=image.astype(np.float32),
        spacing=tuple(float(s) for s in spacing),
        enhancement_flag=enhancement_flag,
    )
    labels = [attribute_labels_for(spec, enhancement_flag) for spec in spec_list]
    lesions = [(spec, mask.astype(np.uint8)) for spec, mask in zip(spec_list, masks)]
    return Sample(volume=volume, lesions=lesions, attribute_labels=labels)


# --- synthetic lesion classes -------------------------------------------------

@dataclass(frozen=True)
class LesionClass:
    name: str
    geometry: str
    density_offset: float
    density_variation: str
    margin: str
    organ_region: str
    touching_neighbor: bool
    size_range: tuple[float, float]


LESION_CLASSES = {
    c.name: c
    for c in (
        LesionClass("liver_cyst", "sphere", -0.8, "homogeneous", "well-defined",
                    "Liver", False, (3.5, 5.5)),
        LesionClass("kidney_stone", "ellipsoid", 0.9, "homogeneous", "well-defined",
                    "Kidney", False, (2.8, 4.2)),
        LesionClass("hepatic_vessel_tumor", "blob", 0.6, "heterogeneous",
                    "ill-defined", "Liver", True, (3.2, 4.8)),
        LesionClass("gallbladder_tumor", "blob", -0.4, "heterogeneous",
                    "ill-defined", "Gallbladder", True, (3.2, 4.8)),
        # held-out combinations: every attribute value also occurs in a class above
        LesionClass("kidney_cyst", "sphere", -0.8, "homogeneous", "well-defined",
                    "Kidney", False, (3.5, 5.5)),
        LesionClass("gallstone", "ellipsoid", 0.9, "homogeneous", "well-defined",
                    "Gallbladder", False, (2.8, 4.2)),
    )
}

SEEN_CLASSES = ("liver_cyst", "kidney_stone", "hepatic_vessel_tumor",
                "gallbladder_tumor")
UNSEEN_CLASSES = ("kidney_cyst", "gallstone")


def sample_lesion_spec(
    class_name: str, rng: np.random.Generator, shape=(32, 32, 32)
) -> LesionSpec:
    """Draw a random lesion of the named class that fits inside its region."""
    cls = LESION_CLASSES[class_name]
    size = float(rng.uniform(*cls.size_range))
    probe = LesionSpec(
        class_name=class_name, geometry=cls.geometry, center=(0, 0, 0),
        size_voxels=size, density_offset=cls.density_offset,
        density_variation=cls.density_variation, margin=cls.margin,
        organ_region=cls.organ_region, touching_neighbor=cls.touching_neighbor,
    )
    margin = int(np.ceil(lesion_extent(probe))) + 1
    box = region_box(cls.organ_region, shape)
    center = []
    for d in range(3):
        lo = max(box[d][0], margin)
        hi = min(box[d][1], shape[d] - margin)
        if lo >= hi:
            raise ConfigError(
                f"class {class_name!r} (size {size:.1f}) cannot fit inside "
                f"region {cls.organ_region!r} of shape {shape}"
            )
        center.append(int(rng.integers(lo, hi)))
    return LesionSpec(
        class_name=class_name, geometry=cls.geometry, center=tuple(center),
        size_voxels=size, density_offset=cls.density_offset,
        density_variation=cls.density_variation, margin=cls.margin,
        organ_region=cls.organ_region, touching_neighbor=cls.touching_neighbor,
    )


def generate_dataset(
    class_names: list[str],
    samples_per_class: int,
    seed: int,
    shape=(32, 32, 32),
) -> list[Sample]:
    """One single-lesion sample per draw, round-robin over classes."""
    rng = np.random.default_rng(seed)
    samples = []
    for k in range(samples_per_class):
        for name in class_names:
            spec = sample_lesion_spec(name, rng, shape)
            sub_seed = int(rng.integers(0, 2**31 - 1))
            samples.append(generate_phantom([spec], sub_seed, shape=shape))
    return samples


# --- volume container I/O -----------------------------------------------------

def _spec_to_json(spec: LesionSpec) -> dict:
    d = asdict(spec)
    d["center"] = list(d["center"])
    return d


def _spec_from_json(d: dict) -> LesionSpec:
    d = dict(d)
    d["center"] = tuple(int(c) for c in d["center"])
    return LesionSpec(**d)


def write_volume(sample: Sample, path) -> None:
    shape = sample.volume.shape
    meta = {
        "shape": list(shape),
        "spacing": list(sample.volume.spacing),
        "enhancement_flag": sample.volume.enhancement_flag,
        "lesions": [_spec_to_json(spec) for spec, _ in sample.lesions],
        "attribute_labels": sample.attribute_labels,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_VOLUME_MAGIC)
        fh.write(struct.pack("<I", _VOLUME_VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(np.ascontiguousarray(sample.volume.data, dtype="<f4").tobytes())
        for _, mask in sample.lesions:
            fh.write(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())


def read_volume(path) -> Sample:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _VOLUME_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    try:
        version = struct.unpack_from("<I", blob, 4)[0]
        if version != _VOLUME_VERSION:
            raise FormatError(f"{path}: unsupported volume version {version}")
        meta_len = struct.unpack_from("<I", blob, 8)[0]
        meta = json.loads(blob[12 : 12 + meta_len])
        shape = tuple(meta["shape"])
        n_vox = int(np.prod(shape))
        offset = 12 + meta_len
        data = np.frombuffer(blob, dtype="<f4", count=n_vox, offset=offset)
        data = data.reshape(shape).copy()
        offset += 4 * n_vox
        specs = [_spec_from_json(d) for d in meta["lesions"]]
        masks = []
        for _ in specs:
            mask = np.frombuffer(blob, dtype=np.uint8, count=n_vox, offset=offset)
            masks.append(mask.reshape(shape).copy())
            offset += n_vox
        if offset > len(blob):
            raise ValueError("short read")
    except (struct.error, ValueError, KeyError, IndexError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: truncated or corrupt volume file") from exc
    volume = Volume(
        data=data,
        spacing=tuple(meta["spacing"]),
        enhancement_flag=bool(meta["enhancement_flag"]),
    )
    return Sample(
        volume=volume,
        lesions=list(zip(specs, masks)),
        attribute_labels=meta["attribute_labels"],
    )


def split_dataset(
    samples: list[Sample], seen_classes: set[str], unseen_classes: set[str]
) -> tuple[list[Sample], list[Sample]]:
    """Train set: only seen-class lesions.  Test set: >=1 unseen-class lesion."""
    seen, unseen = set(seen_classes), set(unseen_classes)
    if seen & unseen:
        raise ConfigError(f"seen/unseen classes overlap: {sorted(seen & unseen)}")
    train, test = [], []
    for sample in samples:
        classes = sample.classes
        unknown = classes - seen - unseen
        if unknown:
            raise ConfigError(f"sample has classes in neither set: {sorted(unknown)}")
        if classes & unseen:
            test.append(sample)
        else:
            train.append(sample)
    return train, test


def write_manifest(entries: list[dict], path) -> None:
    with open(path, "w") as fh:
        json.dump({"version": 1, "samples": entries}, fh, indent=2, sort_keys=True)


def read_manifest(path) -> list[dict]:
    with open(path, "r") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or doc.get("version") != 1 or "samples" not in doc:
        raise FormatError(f"{path}: not a version-1 dataset manifest")
    return doc["samples"]
