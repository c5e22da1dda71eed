"""Dataset indexing, augmentation, PK batch sampling and a synthetic re-ID set.

Images live as ``uint8`` arrays of shape ``(H, W, 3)``. :func:`to_tensor`
turns them into normalized ``(3, H, W)`` float arrays; "zero" in the
normalized space is the mean color, which is what erasing writes.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyDataset, MalformedFilename, TooFewIdentities

SPLITS = ("train", "query", "gallery")
# Market-1501 style folder names are accepted as aliases
SPLIT_DIRS = {
    "train": ("train", "bounding_box_train"),
    "query": ("query",),
    "gallery": ("gallery", "bounding_box_test"),
}
FILENAME_RE = re.compile(r"^(-?\d+)_c(\d+)(?:s\d+)?_([0-9A-Za-z_]+)\.(jpg|jpeg|png|bmp)$", re.IGNORECASE)
IMAGE_EXTS = {".jpg", ".jpeg", ".png", ".bmp"}

MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass
class Record:
    pid: int
    camid: int
    split: str
    path: str | None = None
    image: np.ndarray | None = field(default=None, repr=False)


@dataclass
class DatasetIndex:
    records: list[Record]
    id_map: dict = field(default_factory=dict)  # original train id -> contiguous id

    def __post_init__(self):
        if not self.records:
            raise EmptyDataset("dataset has no images")

    def split(self, name: str) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.split == name]

    @property
    def num_train_ids(self) -> int:
        return len({self.records[i].pid for i in self.split("train")})

    def image(self, i: int) -> np.ndarray:
        rec = self.records[i]
        if rec.image is None:
            from PIL import Image

            with Image.open(rec.path) as im:
                rec.image = np.asarray(im.convert("RGB"))
        return rec.image

    def labels(self, indices) -> np.ndarray:
        return np.array([self.records[i].pid for i in indices], dtype=np.int64)

    def cameras(self, indices) -> np.ndarray:
        return np.array([self.records[i].camid for i in indices], dtype=np.int64)

    def save_id_map(self, path) -> None:
        Path(path).write_text(json.dumps({str(k): v for k, v in self.id_map.items()}, indent=1))


def parse_filename(name: str) -> tuple[int, int]:
    m = FILENAME_RE.match(name)
    if m is None:
        raise MalformedFilename(name)
    return int(m.group(1)), int(m.group(2))


def remap_train_ids(records: list[Record]) -> dict:
    ids = sorted({r.pid for r in records if r.split == "train"})
    mapping = {pid: i for i, pid in enumerate(ids)}
    for r in records:
        if r.split == "train":
            r.pid = mapping[r.pid]
    return mapping


def load_directory(root) -> DatasetIndex:
    """Index ``root/{train,query,gallery}/<id>_c<cam>_<seq>.<ext>``.

    A root without split folders is indexed as one training split. Train
    identities are remapped to ``0..N-1`` in sorted order; query and gallery
    keep their original ids.
    """
    root = Path(root)
    if not root.is_dir():
        raise EmptyDataset(f"not a directory: {root}")
    folders = []
    for split, names in SPLIT_DIRS.items():
        folders += [(split, root / n) for n in names if (root / n).is_dir()]
    if not folders:
        folders = [("train", root)]
    records = []
    for split, folder in folders:
        for path in sorted(folder.iterdir()):
            if path.suffix.lower() not in IMAGE_EXTS:
                continue
            pid, cam = parse_filename(path.name)
            records.append(Record(pid, cam, split, str(path)))
    if not records:
        raise EmptyDataset(f"no images found under {root}")
    mapping = remap_train_ids(records)
    return DatasetIndex(records, mapping)


def write_directory(index: DatasetIndex, root) -> None:
    """Write an in-memory index to disk using the same filename scheme."""
    from PIL import Image

    inverse = {v: k for k, v in index.id_map.items()}
    root = Path(root)
    counters: dict = {}
    for i, rec in enumerate(index.records):
        folder = root / rec.split
        folder.mkdir(parents=True, exist_ok=True)
        pid = inverse.get(rec.pid, rec.pid) if rec.split == "train" else rec.pid
        key = (rec.split, pid, rec.camid)
        seq = counters.get(key, 0)
        counters[key] = seq + 1
        Image.fromarray(index.image(i)).save(folder / f"{pid:04d}_c{rec.camid}_{seq:06d}.png")
    index.save_id_map(root / "id_map.json")


# ---------------------------------------------------------------- sampling

def pk_sample(rng: np.random.Generator, index: DatasetIndex, p: int, k: int, split: str = "train") -> list[int]:
    """P distinct identities, K images each (with replacement only when short)."""
    by_id = _group_by_identity(index, split)
    return _pk_batch(rng, by_id, p, k)


def _group_by_identity(index: DatasetIndex, split: str = "train") -> dict:
    by_id: dict = {}
    for i in index.split(split):
        by_id.setdefault(index.records[i].pid, []).append(i)
    return by_id


def _pk_batch(rng, by_id: dict, p: int, k: int) -> list[int]:
    pids = sorted(by_id)
    if len(pids) < p:
        raise TooFewIdentities(f"need {p} identities per batch, split has {len(pids)}")
    chosen = rng.choice(len(pids), size=p, replace=False)
    batch = []
    for j in chosen:
        pool = by_id[pids[j]]
        picks = rng.choice(len(pool), size=k, replace=len(pool) < k)
        batch += [pool[t] for t in picks]
    return batch


def epoch_batches(rng: np.random.Generator, index: DatasetIndex, p: int, k: int) -> list[list[int]]:
    """One epoch: ceil(num_train_images / (P*K)) independent PK batches."""
    by_id = _group_by_identity(index)
    n = sum(len(v) for v in by_id.values())
    return [_pk_batch(rng, by_id, p, k) for _ in range(math.ceil(n / (p * k)))]


# ------------------------------------------------------------ augmentation

@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    padding: int | None = None  # None: 10 px at 256 rows, scaled with image height
    erase_prob: float = 0.5
    erase_area: tuple = (0.02, 0.4)
    erase_aspect: tuple = (0.3, 1 / 0.3)


def resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    if image.shape[:2] == (height, width):
        return image
    from PIL import Image

    return np.asarray(Image.fromarray(image).resize((width, height), Image.BILINEAR))


def to_tensor(image: np.ndarray) -> np.ndarray:
    x = image.astype(np.float32) / 255.0
    return ((x - MEAN) / STD).transpose(2, 0, 1).copy()


def hflip(x: np.ndarray) -> np.ndarray:
    return x[..., ::-1].copy()


def random_erase(x: np.ndarray, rng: np.random.Generator, area=(0.02, 0.4), aspect=(0.3, 1 / 0.3),
                 attempts: int = 100) -> np.ndarray:
    """Zero one random rectangle of a ``(3, H, W)`` array (classic random erasing)."""
    _, h, w = x.shape
    for _ in range(attempts):
        target = rng.uniform(*area) * h * w
        ratio = rng.uniform(*aspect)
        eh = int(round(math.sqrt(target * ratio)))
        ew = int(round(math.sqrt(target / ratio)))
        if 0 < eh < h and 0 < ew < w:
            y0 = int(rng.integers(0, h - eh + 1))
            x0 = int(rng.integers(0, w - ew + 1))
            x = x.copy()
            x[:, y0:y0 + eh, x0:x0 + ew] = 0
            return x
    return x


def augment(image: np.ndarray, rng: np.random.Generator | None, train_mode: bool, size: tuple[int, int],
            cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Uint8 image -> normalized ``(3, H, W)`` float array."""
    x = to_tensor(resize(image, *size))
    if not train_mode:
        return x
    if rng.random() < cfg.flip_prob:
        x = hflip(x)
    pad = cfg.padding if cfg.padding is not None else int(10 * size[0] / 256 + 0.5)
    if pad:
        padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
        dy, dx = (int(v) for v in rng.integers(0, 2 * pad + 1, size=2))
        x = padded[:, dy:dy + size[0], dx:dx + size[1]].copy()
    if rng.random() < cfg.erase_prob:
        x = random_erase(x, rng, cfg.erase_area, cfg.erase_aspect)
    return x


def load_batch(index: DatasetIndex, indices, size, rng=None, train_mode=False,
               cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    return np.stack([augment(index.image(i), rng, train_mode, size, cfg) for i in indices])


# --------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SynthSpec:
    num_identities: int = 50         # training identities
    num_test_identities: int = 50    # disjoint query/gallery identities
    images_per_identity: int = 8
    query_per_identity: int = 2
    gallery_per_identity: int = 4
    image_h: int = 128
    image_w: int = 64
    occlusion_prob: float = 1.0      # applied to query images only
    occlusion_area: tuple = (0.2, 0.4)
    occluder: str = "texture"
    seed: int = 0

    def __post_init__(self):
        for name in ("num_identities", "num_test_identities", "images_per_identity",
                     "query_per_identity", "gallery_per_identity", "image_h", "image_w"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.occlusion_prob <= 1:
            raise ValueError("occlusion_prob must lie in [0, 1]")
        lo, hi = self.occlusion_area
        if not 0 < lo <= hi < 1:
            raise ValueError("occlusion_area must satisfy 0 < lo <= hi < 1")
        if self.occluder not in OCCLUDER_STYLES:
            raise ValueError(f"occluder must be one of {OCCLUDER_STYLES}, got {self.occluder!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["occlusion_area"] = list(self.occlusion_area)
        return d


PATCH_ROWS, PATCH_COLS = 6, 2
DISTRACTOR_BASE = 1_000_000  # identity ids used only for occluding pedestrians
TEXTURES = 4  # solid, horizontal stripes, vertical stripes, checker


def _identity_signature(seed: int, pid: int) -> dict:
    rng = np.random.default_rng([seed, 0, pid])
    n = PATCH_ROWS * PATCH_COLS
    return {
        "fg": rng.integers(0, 256, size=(n, 3)),
        "bg": rng.integers(0, 256, size=(n, 3)),
        "texture": rng.integers(0, TEXTURES, size=n),
        "period": rng.integers(2, 6, size=n),
    }


def _texture_mask(kind: int, period: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == 1:
        return (yy // period) % 2 == 0
    if kind == 2:
        return (xx // period) % 2 == 0
    if kind == 3:
        return ((yy // period) + (xx // period)) % 2 == 0
    return np.ones((h, w), dtype=bool)


def _render(sig: dict, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Identity pattern on a noisy background, with integer-only jitter."""
    img = rng.integers(40, 120, size=(h, w, 3)).astype(np.int32)
    body_h, body_w = (h * 7) // 8, (w * 5) // 8
    dy = int(rng.integers(-(h // 32), h // 32 + 1))
    dx = int(rng.integers(-(w // 16), w // 16 + 1))
    top, left = (h - body_h) // 2 + dy, (w - body_w) // 2 + dx
    brightness = int(rng.integers(-24, 25))
    for k in range(PATCH_ROWS * PATCH_COLS):
        r, c = divmod(k, PATCH_COLS)
        y0, y1 = top + r * body_h // PATCH_ROWS, top + (r + 1) * body_h // PATCH_ROWS
        x0, x1 = left + c * body_w // PATCH_COLS, left + (c + 1) * body_w // PATCH_COLS
        mask = _texture_mask(int(sig["texture"][k]), int(sig["period"][k]), y1 - y0, x1 - x0)
        patch = np.where(mask[..., None], sig["fg"][k], sig["bg"][k])
        img[y0:y1, x0:x1] = patch
    img += brightness
    return np.clip(img, 0, 255).astype(np.uint8)


OCCLUDER_STYLES = ("texture", "background", "pedestrian", "mixed")


def _occlude(img: np.ndarray, rng: np.random.Generator, area: tuple, style: str = "texture",
             seed: int = 0) -> np.ndarray:
    """Paste an opaque rectangle; sizes in integer pixels.

    ``texture`` is a random two-color pattern, ``background`` is clutter
    drawn like the scene background, ``pedestrian`` is the matching crop of
    a rendered non-target person, ``mixed`` picks one of the last two.
    """
    h, w = img.shape[:2]
    lo, hi = (int(a * 1000) for a in area)
    target = int(rng.integers(lo, hi + 1)) * h * w // 1000
    oh = int(rng.integers(max(1, target // w), min(h, max(1, target // (w // 3))) + 1))
    ow = min(w, max(1, target // oh))
    y0 = int(rng.integers(0, h - oh + 1))
    x0 = int(rng.integers(0, w - ow + 1))
    if style == "mixed":
        style = ("background", "pedestrian")[int(rng.integers(0, 2))]
    if style == "texture":
        color = rng.integers(0, 256, size=(2, 3))
        mask = _texture_mask(int(rng.integers(0, TEXTURES)), int(rng.integers(2, 6)), oh, ow)
        fill = np.where(mask[..., None], color[0], color[1])
    elif style == "background":
        fill = rng.integers(40, 120, size=(oh, ow, 3))
    elif style == "pedestrian":
        other = _identity_signature(seed, DISTRACTOR_BASE + int(rng.integers(0, 10_000)))
        fill = _render(other, rng, h, w)[y0:y0 + oh, x0:x0 + ow]
    else:
        raise ValueError(f"occluder style must be one of {OCCLUDER_STYLES}, got {style!r}")
    out = img.copy()
    out[y0:y0 + oh, x0:x0 + ow] = fill.astype(np.uint8)
    return out


def synth_generate(spec: SynthSpec = SynthSpec()) -> DatasetIndex:
    """Render train / occluded query / holistic gallery splits.

    Every draw comes from a generator keyed by (seed, stream, identity,
    image), so changing ``occlusion_prob`` leaves the underlying person
    images untouched.
    """
    h, w, seed = spec.image_h, spec.image_w, spec.seed
    records = []
    for pid in range(spec.num_identities):
        sig = _identity_signature(seed, pid)
        for j in range(spec.images_per_identity):
            rng = np.random.default_rng([seed, 1, pid, j])
            records.append(Record(pid, 2 + j % 2, "train", image=_render(sig, rng, h, w)))
    for t in range(spec.num_test_identities):
        pid = spec.num_identities + t
        sig = _identity_signature(seed, pid)
        for j in range(spec.query_per_identity):
            img = _render(sig, np.random.default_rng([seed, 2, pid, j]), h, w)
            occ_rng = np.random.default_rng([seed, 3, pid, j])
            if occ_rng.random() < spec.occlusion_prob:
                img = _occlude(img, occ_rng, spec.occlusion_area, spec.occluder, seed)
            records.append(Record(pid, 0, "query", image=img))
        for j in range(spec.gallery_per_identity):
            img = _render(sig, np.random.default_rng([seed, 4, pid, j]), h, w)
            records.append(Record(pid, 1, "gallery", image=img))
    mapping = {pid: pid for pid in range(spec.num_identities)}
    return DatasetIndex(records, mapping)


def dataset_digest(index: DatasetIndex) -> str:
    import hashlib

    h = hashlib.sha256()
    for i, rec in enumerate(index.records):
        h.update(f"{rec.pid},{rec.camid},{rec.split};".encode())
        h.update(np.ascontiguousarray(index.image(i)).tobytes())
    return h.hexdigest()
