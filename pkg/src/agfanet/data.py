"""Volumes, masks, the on-disk container, augmentation, phantoms and fold splits.

Container layout (``.agv``)::

    AGVOL 1
    kind: volume            # or mask
    dtype: float64          # float64 for volumes, uint8 for masks
    extents: D H W
    spacing: sd sh sw       # mm, repr() floats so they round-trip exactly
    origin: od oh ow        # mm
                            # blank line ends the header
    <D*H*W little-endian values, C order (W fastest)>
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

FORMAT_VERSION = 1
MAX_ROTATION_DEG = 20.0
_BRANCH_ATTEMPTS = 25
_DTYPES = {"float64": "<f8", "float32": "<f4", "uint8": "u1", "int16": "<i2"}


class VolumeFormatError(ValueError):
    """Base class for unreadable volume files."""


class MalformedHeaderError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class UnsupportedVersionError(VolumeFormatError):
    pass


class GeometryError(ValueError):
    """Volume and mask (or two masks) do not share a grid."""


def _triple(v, name) -> Tuple[float, float, float]:
    t = tuple(float(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"{name} needs three values, got {v}")
    return t


@dataclass
class Volume:
    intensities: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=np.float64)
        if self.intensities.ndim != 3 or min(self.intensities.shape) <= 0:
            raise ValueError(f"volume must be a non-empty 3D grid, got shape {self.intensities.shape}")
        self.spacing = _triple(self.spacing, "spacing")
        self.origin = _triple(self.origin, "origin")
        if any(not 0.0 < s <= 10.0 for s in self.spacing):
            raise ValueError(f"spacing must lie in (0, 10] mm, got {self.spacing}")

    @property
    def extents(self) -> Tuple[int, int, int]:
        return tuple(self.intensities.shape)

    def same_geometry(self, other) -> bool:
        return self.extents == other.extents and self.spacing == other.spacing and self.origin == other.origin


@dataclass
class LabelMask:
    values: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if not np.isin(arr, (0, 1)).all():
                raise ValueError("mask values must be 0 or 1")
            arr = arr.astype(np.uint8)
        self.values = arr
        self.spacing = _triple(self.spacing, "spacing")
        self.origin = _triple(self.origin, "origin")

    @property
    def extents(self) -> Tuple[int, int, int]:
        return tuple(self.values.shape)

    def same_geometry(self, other) -> bool:
        return self.extents == other.extents and self.spacing == other.spacing and self.origin == other.origin


@dataclass
class Sample:
    volume: Volume
    mask: LabelMask
    id: str = "sample"

    def __post_init__(self):
        if not self.volume.same_geometry(self.mask):
            raise GeometryError(f"sample {self.id}: volume and mask geometry differ")


# -- container I/O ----------------------------------------------------------------

def _header(kind: str, dtype: str, extents, spacing, origin) -> bytes:
    lines = [
        f"AGVOL {FORMAT_VERSION}",
        f"kind: {kind}",
        f"dtype: {dtype}",
        "extents: " + " ".join(str(int(e)) for e in extents),
        "spacing: " + " ".join(repr(float(s)) for s in spacing),
        "origin: " + " ".join(repr(float(o)) for o in origin),
        "",
        "",
    ]
    return "\n".join(lines).encode("ascii")


def save_volume(obj, path) -> None:
    """Write a Volume (float64) or LabelMask (uint8)."""
    if isinstance(obj, LabelMask):
        kind, dtype, arr = "mask", "uint8", obj.values
    elif isinstance(obj, Volume):
        kind, dtype, arr = "volume", "float64", obj.intensities
    else:
        raise TypeError(f"cannot save {type(obj).__name__}")
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
    with open(path, "wb") as fh:
        fh.write(_header(kind, dtype, arr.shape, obj.spacing, obj.origin))
        fh.write(payload)


def _parse_header(raw: bytes, path) -> tuple:
    end = raw.find(b"\n\n")
    if end < 0:
        raise MalformedHeaderError(f"{path}: header terminator not found")
    try:
        lines = raw[:end].decode("ascii").split("\n")
    except UnicodeDecodeError:
        raise MalformedHeaderError(f"{path}: header is not ASCII") from None
    magic = lines[0].split()
    if len(magic) != 2 or magic[0] != "AGVOL":
        raise MalformedHeaderError(f"{path}: missing AGVOL signature")
    try:
        version = int(magic[1])
    except ValueError:
        raise MalformedHeaderError(f"{path}: bad version field {magic[1]!r}") from None
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported format version {version}")
    fields_ = {}
    for line in lines[1:]:
        if ":" not in line:
            raise MalformedHeaderError(f"{path}: bad header line {line!r}")
        k, v = line.split(":", 1)
        fields_[k.strip()] = v.strip()
    for key in ("kind", "dtype", "extents", "spacing", "origin"):
        if key not in fields_:
            raise MalformedHeaderError(f"{path}: header lacks {key!r}")
    try:
        extents = tuple(int(x) for x in fields_["extents"].split())
        spacing = tuple(float(x) for x in fields_["spacing"].split())
        origin = tuple(float(x) for x in fields_["origin"].split())
    except ValueError as exc:
        raise MalformedHeaderError(f"{path}: {exc}") from None
    if len(extents) != 3 or len(spacing) != 3 or len(origin) != 3 or min(extents) <= 0:
        raise MalformedHeaderError(f"{path}: geometry fields need three positive values")
    if fields_["dtype"] not in _DTYPES:
        raise MalformedHeaderError(f"{path}: unknown dtype {fields_['dtype']!r}")
    return fields_["kind"], fields_["dtype"], extents, spacing, origin, end + 2


def load_volume(path):
    """Read a container written by :func:`save_volume`; returns Volume or LabelMask."""
    raw = Path(path).read_bytes()
    kind, dtype, extents, spacing, origin, start = _parse_header(raw, path)
    count = int(np.prod(extents))
    want = count * np.dtype(_DTYPES[dtype]).itemsize
    if len(raw) - start < want:
        raise TruncatedPayloadError(f"{path}: truncated payload ({len(raw) - start} of {want} bytes)")
    if len(raw) - start > want:
        raise MalformedHeaderError(f"{path}: {len(raw) - start - want} trailing bytes after payload")
    arr = np.frombuffer(raw, dtype=_DTYPES[dtype], count=count, offset=start).reshape(extents)
    try:
        if kind == "mask":
            return LabelMask(arr.astype(np.uint8), spacing, origin)
        if kind == "volume":
            return Volume(arr.astype(np.float64), spacing, origin)
    except ValueError as exc:
        raise MalformedHeaderError(f"{path}: {exc}") from None
    raise MalformedHeaderError(f"{path}: unknown kind {kind!r}")


_NRRD_TYPES = {
    "float": "f4", "double": "f8", "uchar": "u1", "unsigned char": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2", "int": "i4", "int32": "i4",
}


def load_nrrd(path) -> Volume:
    """Import a minimal NRRD: 3D, raw encoding, header fields type/dimension/sizes/spacings."""
    raw = Path(path).read_bytes()
    end = raw.find(b"\n\n")
    if not raw.startswith(b"NRRD") or end < 0:
        raise MalformedHeaderError(f"{path}: not an attached-header NRRD file")
    header = {}
    for line in raw[:end].decode("ascii", "replace").split("\n")[1:]:
        if not line or line.startswith("#") or ":=" in line:
            continue
        if ":" not in line:
            raise MalformedHeaderError(f"{path}: bad NRRD line {line!r}")
        k, v = line.split(":", 1)
        header[k.strip().lower()] = v.strip()
    try:
        if int(header.get("dimension", "0")) != 3:
            raise MalformedHeaderError(f"{path}: only 3D NRRD is supported")
        sizes = [int(s) for s in header["sizes"].split()]
        dt = _NRRD_TYPES[header["type"].lower()]
    except KeyError as exc:
        raise MalformedHeaderError(f"{path}: missing or unsupported NRRD field {exc}") from None
    if header.get("encoding", "raw") != "raw":
        raise MalformedHeaderError(f"{path}: only raw NRRD encoding is supported")
    spacings = [float(s) for s in header.get("spacings", "1 1 1").split()]
    endian = "<" if header.get("endian", "little") == "little" else ">"
    dtype = np.dtype(endian + dt)
    count = int(np.prod(sizes))
    start = end + 2
    if len(raw) - start < count * dtype.itemsize:
        raise TruncatedPayloadError(f"{path}: truncated NRRD payload")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    # NRRD lists the fastest axis first
    arr = arr.reshape(sizes[::-1]).astype(np.float64)
    return Volume(arr, tuple(spacings[::-1]))


# -- normalization ------------------------------------------------------------------

def normalize(v: Volume, window: Optional[Tuple[float, float]] = None) -> Volume:
    """Clamp to ``window`` (default: the data range) and rescale to [0, 1].

    A degenerate window (constant volume) maps everything to 0.
    """
    x = v.intensities
    lo, hi = (float(x.min()), float(x.max())) if window is None else (float(window[0]), float(window[1]))
    if hi <= lo:
        out = np.zeros_like(x)
    else:
        out = (np.clip(x, lo, hi) - lo) / (hi - lo)
    return Volume(out, v.spacing, v.origin)


# -- augmentation ----------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    rotate_prob: float = 0.5
    flip_prob: float = 0.5
    max_angle_deg: float = MAX_ROTATION_DEG
    crop: Tuple[int, int, int] = (32, 32, 32)

    def __post_init__(self):
        if not 0.0 <= self.max_angle_deg <= MAX_ROTATION_DEG:
            raise ValueError(f"max_angle_deg must be within [0, {MAX_ROTATION_DEG}]")
        object.__setattr__(self, "crop", tuple(int(c) for c in self.crop))


def rotate_axial(arr: np.ndarray, angle_deg: float, order: int) -> np.ndarray:
    """Rotate every axial slice (H-W plane) about the grid centre, same extents."""
    if angle_deg == 0.0:
        return arr.copy()
    return ndimage.rotate(arr, angle_deg, axes=(1, 2), reshape=False, order=order, mode="nearest")


def apply_transform(s: Sample, angle_deg: float = 0.0, flip: bool = False,
                    crop_start: Sequence[int] = (0, 0, 0), crop: Optional[Sequence[int]] = None) -> Sample:
    """Rotate (trilinear / nearest), flip the width axis, then crop; identical for volume and mask."""
    if abs(angle_deg) > MAX_ROTATION_DEG:
        raise ValueError(f"rotation {angle_deg} deg outside +/-{MAX_ROTATION_DEG}")
    crop = tuple(s.volume.extents if crop is None else crop)
    ext = s.volume.extents
    if any(c > e for c, e in zip(crop, ext)):
        raise ValueError(f"crop {crop} larger than volume {ext}")
    start = tuple(int(c) for c in crop_start)
    if any(st < 0 or st + c > e for st, c, e in zip(start, crop, ext)):
        raise ValueError(f"crop window {start}+{crop} leaves the volume {ext}")
    vol = rotate_axial(s.volume.intensities, angle_deg, order=1)
    msk = rotate_axial(s.mask.values, angle_deg, order=0)
    if flip:
        vol, msk = vol[:, :, ::-1], msk[:, :, ::-1]
    sl = tuple(slice(st, st + c) for st, c in zip(start, crop))
    origin = tuple(o + st * sp for o, st, sp in zip(s.volume.origin, start, s.volume.spacing))
    return Sample(
        Volume(np.ascontiguousarray(vol[sl]), s.volume.spacing, origin),
        LabelMask(np.ascontiguousarray(msk[sl]), s.mask.spacing, origin),
        s.id,
    )


def draw_transform(rng: np.random.Generator, extents: Sequence[int], cfg: AugmentConfig) -> dict:
    """Sample transform parameters; always consumes the same number of draws."""
    if any(c > e for c, e in zip(cfg.crop, extents)):
        raise ValueError(f"crop {cfg.crop} larger than volume {tuple(extents)}")
    u_rot, angle, u_flip = rng.random(), rng.uniform(-cfg.max_angle_deg, cfg.max_angle_deg), rng.random()
    start = tuple(int(rng.integers(0, e - c + 1)) for e, c in zip(extents, cfg.crop))
    return {
        "angle_deg": float(angle) if u_rot < cfg.rotate_prob else 0.0,
        "flip": bool(u_flip < cfg.flip_prob),
        "crop_start": start,
        "crop": cfg.crop,
    }


def augment(s: Sample, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> Sample:
    return apply_transform(s, **draw_transform(rng, s.volume.extents, cfg))


# -- synthetic phantoms ------------------------------------------------------------------

@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    extents: Tuple[int, int, int] = (32, 32, 32)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    branch_count: int = 3
    radius_range: Tuple[float, float] = (1.2, 2.4)
    curvature: float = 0.25
    vessel_intensity: float = 1.0
    background_intensity: float = 0.0
    noise_sigma: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "extents", tuple(int(e) for e in self.extents))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "radius_range", tuple(float(r) for r in self.radius_range))
        if self.branch_count < 1:
            raise ValueError("branch_count must be positive")
        lo, hi = self.radius_range
        if lo > hi:
            raise ValueError("radius_range must be (min, max)")
        if lo < max(self.spacing):
            raise ValueError(f"minimum radius {lo} mm is below one voxel ({max(self.spacing)} mm)")
        if min(self.extents) < 8:
            raise ValueError("phantom extents must be at least 8 voxels")


def phantom_centerlines(spec: PhantomSpec) -> List[dict]:
    """Random branching centerlines in voxel coordinates.

    Segment 0 is the trunk; every later segment starts at an interior point
    of an earlier one. Each entry holds ``points`` (K x 3) and ``radii`` (K, mm).
    """
    rng = np.random.default_rng(spec.seed)
    ext = np.array(spec.extents, dtype=np.float64)
    sp = np.array(spec.spacing)
    r_lo, r_hi = spec.radius_range
    margin = r_hi / sp + 1.0
    lo_box, hi_box = margin, ext - 1.0 - margin
    if np.any(hi_box <= lo_box):
        raise ValueError("volume too small for the requested radii")
    step = 0.5

    def walk(start, direction, length, r0, r1):
        pts, d = [np.array(start)], direction / np.linalg.norm(direction)
        n = max(2, int(length / step))
        for _ in range(n):
            d = d + spec.curvature * step * rng.normal(size=3)
            d /= np.linalg.norm(d)
            nxt = pts[-1] + step * d
            for ax in range(3):
                if nxt[ax] < lo_box[ax] or nxt[ax] > hi_box[ax]:
                    d[ax] = -d[ax]
                    nxt[ax] = np.clip(nxt[ax], lo_box[ax], hi_box[ax])
            pts.append(nxt)
        pts = np.array(pts)
        radii = np.linspace(r0, r1, len(pts))
        return {"points": pts, "radii": radii}

    segments = []
    start = lo_box + rng.random(3) * (hi_box - lo_box) * 0.25
    direction = (lo_box + hi_box) / 2 - start + rng.normal(size=3)
    segments.append(walk(start, direction, float(ext.mean()) * 1.1, r_hi, r_lo + 0.5 * (r_hi - r_lo)))
    trunk_len = len(segments[0]["points"])
    for b in range(spec.branch_count - 1):
        # early children hang off the trunk at spread-out positions, later ones off any segment
        parent = segments[0] if b < 2 else segments[int(rng.integers(0, len(segments)))]
        k = len(parent["points"])
        if parent is segments[0]:
            lo_f = 0.2 + 0.4 * b
            at = int(k * (lo_f + 0.2 * rng.random()))
        else:
            at = int(rng.integers(int(0.25 * k), max(int(0.25 * k) + 1, int(0.75 * k))))
        at = min(max(at, 1), k - 2)
        p0 = parent["points"][at]
        tangent = parent["points"][at + 1] - parent["points"][at - 1]
        side = rng.normal(size=3)
        side -= side.dot(tangent) / max(tangent.dot(tangent), 1e-12) * tangent
        direction = 0.3 * tangent / max(np.linalg.norm(tangent), 1e-12) + side / max(np.linalg.norm(side), 1e-12)
        r0 = min(parent["radii"][at], r_lo + rng.random() * (r_hi - r_lo))
        # redraw children whose tip curls back into existing vessels, so every branch keeps a free end
        others = np.concatenate([seg["points"] for seg in segments])
        for _attempt in range(_BRANCH_ATTEMPTS):
            child = walk(p0, direction, float(ext.mean()) * 0.6, r0, r_lo)
            tip_gap = np.min(np.linalg.norm((others - child["points"][-1]) * sp, axis=1))
            if tip_gap >= 2.0 * r_hi + 2.0:
                break
            direction = rng.normal(size=3)
        segments.append(child)
    return segments


def rasterize_tubes(segments: List[dict], extents: Sequence[int], spacing: Sequence[float]) -> np.ndarray:
    """Mark voxels whose centre lies within the local radius (mm) of a centerline point."""
    mask = np.zeros(tuple(extents), dtype=bool)
    sp = np.asarray(spacing, dtype=np.float64)
    for seg in segments:
        for p, r in zip(seg["points"], seg["radii"]):
            reach = np.ceil(r / sp).astype(int)
            lo = np.maximum(np.floor(p).astype(int) - reach, 0)
            hi = np.minimum(np.ceil(p).astype(int) + reach + 1, extents)
            grids = np.ogrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
            d2 = sum(((g - c) * s) ** 2 for g, c, s in zip(grids, p, sp))
            mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= d2 <= r * r
    return mask


def generate_phantom(spec: PhantomSpec, sample_id: Optional[str] = None) -> Sample:
    """Deterministic tube-tree phantom; the mask is one 26-connected component."""
    segments = phantom_centerlines(spec)
    mask = rasterize_tubes(segments, spec.extents, spec.spacing)
    labels, n = ndimage.label(mask, structure=np.ones((3, 3, 3)))
    if n > 1:
        sizes = np.bincount(labels.ravel())
        sizes[0] = 0
        mask = labels == int(np.argmax(sizes))
    # noise draws come after all geometry draws so geometry is independent of noise_sigma
    rng = np.random.default_rng([spec.seed, 1])
    img = np.where(mask, spec.vessel_intensity, spec.background_intensity).astype(np.float64)
    if spec.noise_sigma > 0:
        img = img + spec.noise_sigma * rng.normal(size=img.shape)
    sid = sample_id if sample_id is not None else f"phantom_{spec.seed}"
    return Sample(Volume(img, spec.spacing), LabelMask(mask.astype(np.uint8), spec.spacing), sid)


# -- folds ---------------------------------------------------------------------------------

@dataclass
class Fold:
    train: List[str]
    val: List[str]
    test: List[str]


def kfold_split(ids: Sequence[str], k: int = 5, seed: int = 0, val_fraction: float = 0.15) -> List[Fold]:
    """k test folds covering ``ids`` exactly once; ``val_fraction`` of the rest is validation."""
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    if k < 2 or len(ids) < k:
        raise ValueError(f"need k >= 2 and at least k ids (k={k}, got {len(ids)})")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    folds = []
    for i, chunk in enumerate(np.array_split(np.arange(len(order)), k)):
        test = [order[j] for j in chunk]
        held = set(test)
        rest = [x for x in order if x not in held]
        perm = np.random.default_rng([seed, i]).permutation(len(rest))
        rest = [rest[j] for j in perm]
        n_val = int(round(val_fraction * len(rest)))
        folds.append(Fold(train=rest[n_val:], val=rest[:n_val], test=test))
    return folds


# -- manifests ----------------------------------------------------------------------------

def write_manifest(path, entries: Sequence[dict], extra: Optional[dict] = None) -> None:
    """JSON manifest: ``{"samples": [{"id", "volume", "mask"}, ...], ...extra}``; paths relative to it."""
    doc = {"format": "agfanet-manifest", "version": 1, "samples": list(entries)}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> List[dict]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        samples = doc["samples"]
        for s in samples:
            for key in ("id", "volume", "mask"):
                if key not in s:
                    raise KeyError(key)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise VolumeFormatError(f"{path}: malformed manifest ({exc})") from None
    base = path.parent
    return [{"id": s["id"], "volume": base / s["volume"], "mask": base / s["mask"]} for s in samples]


def load_dataset(manifest_path) -> List[Sample]:
    out = []
    for entry in read_manifest(manifest_path):
        vol, msk = load_volume(entry["volume"]), load_volume(entry["mask"])
        if not isinstance(vol, Volume) or not isinstance(msk, LabelMask):
            raise VolumeFormatError(f"{entry['id']}: expected a volume and a mask file")
        out.append(Sample(vol, msk, entry["id"]))
    return out
