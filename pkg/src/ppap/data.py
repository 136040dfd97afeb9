"""Synthetic species, COCO keypoint I/O, instance cropping and augmentation.

Pixel coordinates follow OpenCV: pixel ``(r, c)`` is centred at ``(x=c, y=r)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from ppap.errors import FormatError, InvalidArgument
from ppap.prompt_bank import KeypointVocab

QUAD_NAMES = ["nose", "left front paw", "right front paw", "left hind paw", "right hind paw"]
QUAD_FLIP_PAIRS = [(1, 2), (3, 4)]
QUAD_LIMBS = [(0, 1), (0, 2), (1, 3), (2, 4), (1, 2), (3, 4)]


@dataclass
class InstanceRecord:
    image: np.ndarray | str  # (3, H, W) float32 in [0, 1], or a file path
    bbox: tuple[float, float, float, float]
    keypoints: np.ndarray  # (K, 3): x, y, visibility in {0, 1, 2}
    species: str
    id: int
    image_id: int | None = None
    file_name: str | None = None

    def __post_init__(self):
        self.bbox = tuple(float(v) for v in self.bbox)
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 3)
        if self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise InvalidArgument(f"degenerate bbox {self.bbox}")

    def load_image(self) -> np.ndarray:
        if isinstance(self.image, np.ndarray):
            return self.image
        return read_image(self.image)

    def __eq__(self, other):
        if not isinstance(other, InstanceRecord):
            return NotImplemented
        same_image = (
            np.array_equal(self.image, other.image)
            if isinstance(self.image, np.ndarray) and isinstance(other.image, np.ndarray)
            else self.image == other.image
        )
        return (same_image and self.bbox == other.bbox and np.array_equal(self.keypoints, other.keypoints)
                and self.species == other.species and self.id == other.id
                and self.image_id == other.image_id and self.file_name == other.file_name)


@dataclass
class SynthSpecies:
    name: str
    skeleton: np.ndarray  # (K, 2) in [0, 1]^2
    colors: np.ndarray  # (K, 3) RGB in [0, 1]
    radii: np.ndarray  # (K,) marker std in pixels at a 64 px image
    limbs: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.skeleton = np.asarray(self.skeleton, dtype=np.float64)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        self.radii = np.asarray(self.radii, dtype=np.float64)
        k = len(self.skeleton)
        if self.colors.shape != (k, 3) or self.radii.shape != (k,):
            raise InvalidArgument(f"species {self.name}: colors/radii do not match K={k}")
        if len({tuple(c) for c in self.colors}) != k:
            raise InvalidArgument(f"species {self.name}: marker colors must be distinct")

    @property
    def num_keypoints(self) -> int:
        return len(self.skeleton)


def default_species() -> dict[str, SynthSpecies]:
    quad_a = SynthSpecies(
        name="quad-A",
        skeleton=[[0.10, 0.30], [0.30, 0.90], [0.42, 0.80], [0.72, 0.90], [0.86, 0.80]],
        colors=[[1.0, 0.1, 0.1], [0.1, 0.9, 0.1], [0.2, 0.3, 1.0], [1.0, 0.95, 0.1], [0.95, 0.1, 0.95]],
        radii=[2.0, 1.6, 1.6, 1.6, 1.6],
        limbs=QUAD_LIMBS,
    )
    quad_b = SynthSpecies(
        name="quad-B",
        skeleton=[[0.05, 0.55], [0.22, 0.95], [0.36, 0.88], [0.80, 0.95], [0.95, 0.88]],
        colors=[[0.1, 0.95, 0.95], [1.0, 0.55, 0.0], [0.55, 0.1, 0.9], [0.95, 0.95, 0.95], [0.6, 1.0, 0.3]],
        radii=[1.8, 1.4, 1.4, 1.4, 1.4],
        limbs=QUAD_LIMBS,
    )
    return {s.name: s for s in (quad_a, quad_b)}


def default_vocab() -> KeypointVocab:
    return KeypointVocab(names=list(QUAD_NAMES), flip_pairs=list(QUAD_FLIP_PAIRS))


def _segment_distance(px, py, a, b):
    ab = b - a
    denom = float(ab @ ab) or 1.0
    t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def render_instance(species: SynthSpecies, keypoints: np.ndarray, image_size: int,
                    background: np.ndarray, noise_level: float, rng: np.random.Generator) -> np.ndarray:
    """Draw limbs and Gaussian colour markers; returns ``(3, S, S)`` float32 quantized to 1/255."""
    s = image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    img = np.broadcast_to(background[:, None, None], (3, s, s)).copy()
    scale = s / 64.0
    limb_rgb = np.full(3, 0.55)
    for a, b in species.limbs:
        d = _segment_distance(xx, yy, keypoints[a, :2], keypoints[b, :2])
        alpha = np.clip(1.5 * scale - d, 0.0, 1.0) * 0.8
        img = img * (1 - alpha) + alpha * limb_rgb[:, None, None]
    for k in range(len(keypoints)):
        r = species.radii[k] * scale
        d2 = (xx - keypoints[k, 0]) ** 2 + (yy - keypoints[k, 1]) ** 2
        alpha = np.exp(-d2 / (2 * r * r))
        img = img * (1 - alpha) + alpha * species.colors[k][:, None, None]
    if noise_level > 0:
        img = img + noise_level * rng.standard_normal(img.shape)
    img = np.clip(img, 0.0, 1.0)
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def _placement(species: SynthSpecies, image_size: int, rng: np.random.Generator):
    s = image_size
    margin = 4.0 * s / 64.0
    centred = species.skeleton - 0.5
    for _ in range(100):
        size = rng.uniform(0.55, 0.85) * s
        theta = math.radians(rng.uniform(-25.0, 25.0))
        rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        lin = size * rot
        pts = centred @ lin.T
        lo = margin - pts.min(axis=0)
        hi = (s - 1 - margin) - pts.max(axis=0)
        if np.all(hi >= lo):
            shift = rng.uniform(lo, hi)
            return np.concatenate([lin, shift[:, None]], axis=1)
    raise InvalidArgument(f"species {species.name} does not fit in {s}px")


def skeleton_transform(species: SynthSpecies, matrix: np.ndarray) -> np.ndarray:
    """Affine image ``matrix @ [q - 0.5, 1]`` of the canonical points."""
    centred = species.skeleton - 0.5
    return centred @ matrix[:, :2].T + matrix[:, 2]


def generate_synthetic(species: Sequence[SynthSpecies], n_per_species: int, image_size: int = 64,
                       noise_level: float = 0.03, seed: int = 0, num_keypoints: int | None = None
                       ) -> list[InstanceRecord]:
    """Render ``n_per_species`` instances of every species with exact ground truth."""
    if n_per_species < 1:
        raise InvalidArgument("n_per_species must be >= 1")
    species = list(species)
    k = num_keypoints if num_keypoints is not None else species[0].num_keypoints
    for sp in species:
        if sp.num_keypoints != k:
            raise InvalidArgument(f"species {sp.name} has K={sp.num_keypoints}, expected {k}")
    rng = np.random.default_rng(seed)
    records = []
    for sp in species:
        for _ in range(n_per_species):
            matrix = _placement(sp, image_size, rng)
            pts = skeleton_transform(sp, matrix)
            kps = np.concatenate([pts, np.full((k, 1), 2.0)], axis=1)
            background = rng.uniform(0.05, 0.35, size=3)
            img = render_instance(sp, kps, image_size, background, noise_level, rng)
            pad = 2.0 * sp.radii.max() * image_size / 64.0
            x0, y0 = np.maximum(pts.min(axis=0) - pad, 0.0)
            x1, y1 = np.minimum(pts.max(axis=0) + pad, image_size)
            rid = len(records)
            records.append(InstanceRecord(
                image=img, bbox=(x0, y0, x1 - x0, y1 - y0), keypoints=kps, species=sp.name,
                id=rid, image_id=rid, file_name=f"{rid:06d}.png",
            ))
    return records


def visibility_weight(v) -> np.ndarray:
    """COCO flags ``{0, 1, 2}`` -> supervision weight ``{0, 1, 1}``."""
    return (np.asarray(v) > 0).astype(np.float64)


def read_image(path) -> np.ndarray:
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise FileNotFoundError(f"cannot read image {path}")
    return (cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).transpose(2, 0, 1) / 255.0).astype(np.float32)


def write_image(path, img: np.ndarray) -> None:
    rgb = np.round(np.clip(img, 0, 1) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    if not cv2.imwrite(str(path), cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR)):
        raise OSError(f"failed to write {path}")


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise FormatError(f"missing required field '{key}' in {where}")
    return obj[key]


def load_coco(path, vocab: KeypointVocab | None = None) -> list[InstanceRecord]:
    """One record per annotation; image fields hold paths resolved next to the JSON."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: {e}") from e
    images = {im["id"]: im for im in _require(data, "images", "file")}
    categories = {c["id"]: c for c in _require(data, "categories", "file")}
    anns = _require(data, "annotations", "file")
    records = []
    for ann in anns:
        for key in ("bbox", "keypoints", "category_id", "image_id", "id"):
            _require(ann, key, f"annotation {ann.get('id', '?')}")
        cat = categories.get(ann["category_id"])
        if cat is None:
            raise FormatError(f"annotation {ann['id']} refers to unknown category {ann['category_id']}")
        k = vocab.num_keypoints if vocab is not None else len(_require(cat, "keypoints", "category"))
        if vocab is not None and "keypoints" in cat and len(cat["keypoints"]) != k:
            raise InvalidArgument(f"category {cat.get('name')} has {len(cat['keypoints'])} keypoints, vocab has {k}")
        flat = ann["keypoints"]
        if len(flat) != 3 * k:
            raise FormatError(f"annotation {ann['id']}: keypoints length {len(flat)} != 3*{k}")
        im = images.get(ann["image_id"])
        if im is None:
            raise FormatError(f"annotation {ann['id']} refers to unknown image {ann['image_id']}")
        file_name = _require(im, "file_name", f"image {ann['image_id']}")
        records.append(InstanceRecord(
            image=str(path.parent / file_name), bbox=tuple(ann["bbox"]),
            keypoints=np.asarray(flat, dtype=np.float64).reshape(k, 3),
            species=cat.get("name", str(cat["id"])), id=ann["id"], image_id=ann["image_id"],
            file_name=file_name,
        ))
    return records


def save_coco(records: Sequence[InstanceRecord], path, vocab: KeypointVocab,
              skeleton: Sequence[tuple[int, int]] = ()) -> None:
    species = list(dict.fromkeys(r.species for r in records))
    cat_ids = {name: i + 1 for i, name in enumerate(species)}
    images, seen = [], set()
    for r in records:
        if r.image_id in seen:
            continue
        seen.add(r.image_id)
        img = r.load_image() if isinstance(r.image, np.ndarray) else None
        entry = {"id": r.image_id, "file_name": r.file_name}
        if img is not None:
            entry.update(height=int(img.shape[1]), width=int(img.shape[2]))
        images.append(entry)
    anns = [{
        "id": r.id, "image_id": r.image_id, "category_id": cat_ids[r.species],
        "bbox": [float(v) for v in r.bbox], "area": float(r.bbox[2] * r.bbox[3]),
        "keypoints": [float(v) for v in r.keypoints.reshape(-1)],
        "num_keypoints": int((r.keypoints[:, 2] > 0).sum()), "iscrowd": 0,
    } for r in records]
    cats = [{"id": cat_ids[n], "name": n, "supercategory": "synthetic", "keypoints": list(vocab.names),
             "skeleton": [[a + 1, b + 1] for a, b in skeleton]} for n in species]
    Path(path).write_text(json.dumps({"images": images, "annotations": anns, "categories": cats}))


def write_dataset(records: Sequence[InstanceRecord], out_dir, vocab: KeypointVocab,
                  skeleton: Sequence[tuple[int, int]] = (), extra: dict | None = None) -> Path:
    """Write PNGs, a COCO annotation file, the vocabulary and a manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    written = []
    for r in records:
        name = f"images/{r.file_name or f'{r.image_id:06d}.png'}"
        write_image(out / name, r.load_image())
        written.append(InstanceRecord(r.image, r.bbox, r.keypoints, r.species, r.id, r.image_id, name))
    save_coco(written, out / "annotations.json", vocab, skeleton)
    vocab.save(out / "vocab.json")
    manifest = {
        "annotations": "annotations.json", "vocab": "vocab.json",
        "images": [r.file_name for r in written],
        "species": sorted({r.species for r in records}),
        **(extra or {}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out / "manifest.json"


def load_dataset(path) -> tuple[list[InstanceRecord], KeypointVocab]:
    """Load a dataset directory (or its manifest) written by :func:`write_dataset`."""
    path = Path(path)
    root = path.parent if path.is_file() else path
    manifest = json.loads((root / "manifest.json").read_text())
    vocab = KeypointVocab.load(root / manifest["vocab"])
    return load_coco(root / manifest["annotations"], vocab), vocab


def crop_affine(bbox, out_size: int, padding: float = 1.25) -> np.ndarray:
    """2x3 matrix sending the padded square around ``bbox`` onto ``out_size`` pixels."""
    x, y, w, h = (float(v) for v in bbox)
    if w <= 0 or h <= 0 or padding <= 0:
        raise InvalidArgument(f"degenerate bbox {bbox}")
    side = max(w, h) * padding
    s = out_size / side
    cx, cy = x + w / 2.0, y + h / 2.0
    return np.array([[s, 0.0, out_size / 2.0 - s * cx], [0.0, s, out_size / 2.0 - s * cy]])


def apply_affine(matrix: np.ndarray, keypoints: np.ndarray, size: int | None = None) -> np.ndarray:
    """Map ``(K, 3)`` keypoints; with ``size`` given, points leaving the frame get visibility 0."""
    kp = np.array(keypoints, dtype=np.float64, copy=True)
    kp[:, :2] = kp[:, :2] @ matrix[:, :2].T + matrix[:, 2]
    if size is not None:
        out = (kp[:, 0] < 0) | (kp[:, 0] > size - 1) | (kp[:, 1] < 0) | (kp[:, 1] > size - 1)
        kp[out, 2] = 0.0
    return kp


def invert_affine(matrix: np.ndarray) -> np.ndarray:
    return cv2.invertAffineTransform(np.asarray(matrix, dtype=np.float64))


def warp_image(img: np.ndarray, matrix: np.ndarray, out_size: int) -> np.ndarray:
    hwc = np.ascontiguousarray(img.transpose(1, 2, 0))
    out = cv2.warpAffine(hwc, matrix.astype(np.float64), (out_size, out_size), flags=cv2.INTER_LINEAR,
                         borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    return out.reshape(out_size, out_size, -1).transpose(2, 0, 1).astype(np.float32)


def crop_and_resize(rec: InstanceRecord, out_size: int, padding: float = 1.25):
    """Crop the instance's padded bbox to ``out_size``; returns ``(image, keypoints)``."""
    matrix = crop_affine(rec.bbox, out_size, padding)
    return warp_image(rec.load_image(), matrix, out_size), apply_affine(matrix, rec.keypoints, out_size)


@dataclass
class AugmentConfig:
    rotation_max_deg: float = 40.0
    scale_range: tuple[float, float] = (0.5, 1.5)
    flip_prob: float = 0.5

    def __post_init__(self):
        self.scale_range = tuple(self.scale_range)
        if min(self.scale_range) <= 0 or self.scale_range[0] > self.scale_range[1]:
            raise InvalidArgument(f"invalid scale_range {self.scale_range}")


@dataclass
class AugmentParams:
    angle_deg: float = 0.0
    scale: float = 1.0
    flip: bool = False


def sample_augment(cfg: AugmentConfig, rng: np.random.Generator) -> AugmentParams:
    angle = rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg)
    scale = rng.uniform(*cfg.scale_range)
    flip = bool(rng.random() < cfg.flip_prob)
    return AugmentParams(angle, scale, flip)


def augment_matrix(params: AugmentParams, size: int) -> np.ndarray:
    """Horizontal flip first, then rotation and scaling about the image centre."""
    c = (size - 1) / 2.0
    flip = np.array([[-1.0, 0.0, size - 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]) if params.flip else np.eye(3)
    t = math.radians(params.angle_deg)
    rs = params.scale * np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    about = np.eye(3)
    about[:2, :2] = rs
    about[:2, 2] = np.array([c, c]) - rs @ np.array([c, c])
    return (about @ flip)[:2]


def augment(img: np.ndarray, keypoints: np.ndarray, vocab: KeypointVocab, cfg: AugmentConfig,
            rng: np.random.Generator, params: AugmentParams | None = None):
    """Random rotation/scale/flip applied identically to pixels and keypoints."""
    if params is None:
        if cfg.flip_prob > 0 and not vocab.flip_pairs:
            raise InvalidArgument("flip augmentation requires flip_pairs in the vocabulary")
        params = sample_augment(cfg, rng)
    size = img.shape[-1]
    matrix = augment_matrix(params, size)
    out_img = warp_image(img, matrix, size)
    kps = apply_affine(matrix, keypoints, size)
    if params.flip:
        kps = kps[vocab.flip_permutation()]
    return out_img, kps
