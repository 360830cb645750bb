#!/usr/bin/env python3
"""
Synthetic paired-domain scenes - a clear "source" view and an adverse
"target" view of the same layout, with a small camera shift, independently
displaced moving objects, the exact warp back to the source frame and a
warp confidence map.
"""

import hashlib
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from utils.config import SceneSpec, fingerprint
from utils.errors import DatasetIOError
from utils.logger import setup_logger

MANIFEST = "manifest.json"
FILES = ("source.png", "target.png", "labels.png", "target_labels.png", "warp.f32", "conf.f32")
LOW_CONFIDENCE = 0.1
FOG_VEIL = 0.8


@dataclass
class PairedSample:
    index: int
    source: np.ndarray                  # (3, h, w) uint8
    target: np.ndarray                  # (3, h, w) uint8
    source_labels: np.ndarray           # (h, w) uint8
    warp: np.ndarray                    # (h, w, 2) float32, target positions per source pixel
    confidence: np.ndarray              # (h, w) float32
    adverse_labels_heldout: np.ndarray  # (h, w) uint8, evaluation only

    def source_float(self):
        return self.source.astype(np.float64) / 255.0

    def target_float(self):
        return self.target.astype(np.float64) / 255.0


def _palette(c):
    return np.random.default_rng([7919, c]).uniform(0.1, 0.9, size=3)


def _static_layout(spec, rng, H, W):
    """Wavy horizontal bands of static classes plus a few static blocks"""
    static = list(spec.static_class_ids)[::-1]
    k = len(static)
    # band weights within a factor of 3 keep every band at least ~1/(3k) of the height
    weights = rng.uniform(0.5, 1.5, size=k)
    cuts = np.cumsum(weights)[:-1] / weights.sum()
    rows = np.arange(H)[:, None] / max(H - 1, 1)
    cols = np.arange(W)[None, :]
    labels = np.full((H, W), static[-1], dtype=np.int64)
    for b in range(k - 2, -1, -1):
        amp = rng.uniform(0.0, 0.04)
        phase = rng.uniform(0, 2 * np.pi)
        boundary = cuts[b] + amp * np.sin(2 * np.pi * cols / max(W, 1) * 2 + phase)
        labels = np.where(rows < boundary, static[b], labels)
    for _ in range(int(rng.integers(1, 4))):
        c = static[int(rng.integers(0, k))]
        bh = int(rng.integers(max(2, H // 10), max(3, H // 4)))
        bw = int(rng.integers(max(2, W // 10), max(3, W // 4)))
        top = int(rng.integers(0, H - bh))
        left = int(rng.integers(0, W - bw))
        labels[top:top + bh, left:left + bw] = c
    return labels


def _static_texture(spec, rng, labels):
    H, W = labels.shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    image = np.zeros((3, H, W))
    noise = rng.normal(0.0, 0.03, size=(H, W))
    for c in spec.static_class_ids:
        region = labels == c
        if not region.any():
            continue
        crng = np.random.default_rng([7919, 1000 + c])
        if c in spec.textureless_class_ids:
            pattern = 0.3 * noise
        else:
            fx, fy = crng.uniform(0.1, 0.6, size=2)
            pattern = 0.12 * np.sin(fx * xx + fy * yy + crng.uniform(0, 2 * np.pi)) + noise
        for ch, base in enumerate(_palette(c)):
            image[ch][region] = (base + pattern)[region]
    return image


def _mobile_objects(spec, rng, h, w, M):
    objects = []
    mobile = list(spec.mobile_class_ids)
    if not mobile:
        return objects
    for i in range(spec.mobile_object_count):
        c = mobile[i % len(mobile)]
        tall = i % len(mobile) == 1
        oh = max(2, int(round(h * rng.uniform(0.12, 0.2 if tall else 0.14))))
        ow = max(2, int(round(w * rng.uniform(0.04, 0.07) if tall else w * rng.uniform(0.12, 0.22))))
        top = M + int(rng.integers(int(h * 0.4), h - oh + 1))
        left = M + int(rng.integers(0, w - ow + 1))
        shift = rng.integers(-M, M + 1, size=2) if M > 0 else np.zeros(2, dtype=np.int64)
        if i == 0 and M > 0 and not shift.any():
            shift[int(rng.integers(0, 2))] = 1
        objects.append({
            "class": c,
            "box": (top, left, oh, ow),
            "shift": (int(shift[0]), int(shift[1])),
            "mobile": M > 0,
            "color": np.clip(_palette(c) + rng.uniform(-0.1, 0.1, size=3), 0, 1),
        })
    return objects


def _paint(labels, image, objects, displaced, mobile_map):
    H, W = labels.shape
    for obj in objects:
        top, left, oh, ow = obj["box"]
        if displaced:
            top, left = top + obj["shift"][0], left + obj["shift"][1]
        t0, l0 = max(top, 0), max(left, 0)
        t1, l1 = min(top + oh, H), min(left + ow, W)
        if t0 >= t1 or l0 >= l1:
            continue
        labels[t0:t1, l0:l1] = obj["class"]
        image[:, t0:t1, l0:l1] = obj["color"][:, None, None]
        # zero shift draws count too; only a scene with no shift budget is frozen
        mobile_map[t0:t1, l0:l1] = obj["mobile"]


def corrupt(image, kind, strength, rng):
    """Appearance-only domain shift on a (3, h, w) float image in [0, 1]"""
    s = float(strength)
    if kind == "darken":
        out = np.power(image, 1.0 + 1.5 * s) * (1.0 - 0.6 * s)
    elif kind == "fog_blend":
        h = image.shape[1]
        # far rows (top of the image) get a denser veil
        depth = 1.0 - np.arange(h, dtype=np.float64) / max(h - 1, 1)
        t = s * (0.35 + 0.65 * depth)[None, :, None]
        out = image * (1.0 - t) + FOG_VEIL * t
    elif kind == "noise":
        out = image + rng.normal(0.0, 0.25 * s, size=image.shape)
    elif kind == "desaturate":
        gray = 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]
        out = image * (1.0 - s) + gray[None] * s
    else:
        raise ValueError(f"unknown corruption '{kind}'")
    return np.clip(out, 0.0, 1.0)


def _to_uint8(image):
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_pair(spec, index):
    """Deterministic function of (spec.seed, index)"""
    rng = np.random.default_rng([spec.seed, index])
    h, w = spec.image_size
    M = spec.max_shift_px
    H, W = h + 2 * M, w + 2 * M

    world_labels = _static_layout(spec, rng, H, W)
    world_image = _static_texture(spec, rng, world_labels)
    objects = _mobile_objects(spec, rng, h, w, M)
    dy, dx = (int(v) for v in rng.integers(-M, M + 1, size=2)) if M > 0 else (0, 0)

    src_labels, src_image = world_labels.copy(), world_image.copy()
    src_mobile = np.zeros((H, W), dtype=bool)
    _paint(src_labels, src_image, objects, False, src_mobile)
    tgt_labels, tgt_image = world_labels.copy(), world_image.copy()
    tgt_mobile = np.zeros((H, W), dtype=bool)
    _paint(tgt_labels, tgt_image, objects, True, tgt_mobile)

    src_rows, src_cols = slice(M, M + h), slice(M, M + w)
    tgt_rows, tgt_cols = slice(M + dy, M + dy + h), slice(M + dx, M + dx + w)
    source_labels = src_labels[src_rows, src_cols]
    target_labels = tgt_labels[tgt_rows, tgt_cols]
    source = _to_uint8(src_image[:, src_rows, src_cols])
    target = _to_uint8(corrupt(tgt_image[:, tgt_rows, tgt_cols], spec.corruption, spec.strength, rng))

    # source pixel (i, j) sees the same world point as target pixel (i - dy, j - dx)
    ii, jj = np.mgrid[0:h, 0:w]
    x, y = jj - dx, ii - dy
    valid = (x >= 0) & (x < w) & (y >= 0) & (y < h)
    # a genuine (0, 0) sample reads as the invalid sentinel
    valid &= (x != 0) | (y != 0)
    warp = np.where(valid[..., None], np.stack([x, y], axis=-1), 0).astype(np.float32)

    xs, ys = np.clip(x, 0, w - 1), np.clip(y, 0, h - 1)
    mapped_labels = target_labels[ys, xs]
    mobile = src_mobile[src_rows, src_cols] | tgt_mobile[tgt_rows, tgt_cols][ys, xs]
    agree = (mapped_labels == source_labels) & ~mobile
    base = np.where(np.isin(source_labels, spec.textureless_class_ids), spec.textureless_confidence, 1.0)
    confidence = np.where(valid, np.where(agree, base, LOW_CONFIDENCE), 0.0).astype(np.float32)

    return PairedSample(
        index=index,
        source=source,
        target=target,
        source_labels=source_labels.astype(np.uint8),
        warp=warp,
        confidence=confidence,
        adverse_labels_heldout=target_labels.astype(np.uint8),
    )


def split_counts(count, train_fraction):
    n_train = int(np.floor(count * train_fraction + 0.5))
    return n_train, count - n_train


def _encode(sample):
    return {
        "source.png": _png_bytes(sample.source.transpose(1, 2, 0)),
        "target.png": _png_bytes(sample.target.transpose(1, 2, 0)),
        "labels.png": _png_bytes(sample.source_labels),
        "target_labels.png": _png_bytes(sample.adverse_labels_heldout),
        "warp.f32": sample.warp.astype("<f4").tobytes(),
        "conf.f32": sample.confidence.astype("<f4").tobytes(),
    }


def _png_bytes(array):
    buffer = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(array)).save(buffer, format="PNG", compress_level=6)
    return buffer.getvalue()


def write_dataset(spec, count, path, train_fraction=0.75):
    """Write ``count`` pairs under ``path`` plus a manifest; returns the manifest"""
    logger = setup_logger()
    root = Path(path)
    n_train, _ = split_counts(count, train_fraction)
    entries = []
    try:
        root.mkdir(parents=True, exist_ok=True)
        for index in range(count):
            split = "train" if index < n_train else "val"
            sample_dir = root / split / str(index)
            sample_dir.mkdir(parents=True, exist_ok=True)
            checksums = {}
            for name, data in _encode(generate_pair(spec, index)).items():
                target = sample_dir / name
                try:
                    target.write_bytes(data)
                except OSError as e:
                    raise DatasetIOError(f"could not write sample file: {e}", target) from e
                checksums[name] = hashlib.sha256(data).hexdigest()
            entries.append({"index": index, "split": split, "path": f"{split}/{index}", "files": checksums})
        manifest = {
            "format": 1,
            "scene": asdict(spec),
            "fingerprint": fingerprint(spec),
            "count": count,
            "train_fraction": train_fraction,
            "eval_only": ["target_labels.png"],
            "samples": entries,
        }
        manifest_path = root / MANIFEST
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except DatasetIOError:
        raise
    except OSError as e:
        raise DatasetIOError(f"could not write dataset: {e}", root) from e
    logger.info(f"Wrote {count} pairs ({n_train} train / {count - n_train} val) to {root}")
    return manifest


def read_manifest(path):
    manifest_path = Path(path) / MANIFEST
    try:
        return json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise DatasetIOError("dataset manifest not found", manifest_path) from e
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetIOError(f"could not read manifest: {e}", manifest_path) from e


def scene_from_manifest(manifest):
    scene = dict(manifest["scene"])
    for key, value in scene.items():
        if isinstance(value, list):
            scene[key] = tuple(value)
    return SceneSpec(**scene)


class SyntheticPairs:
    """In-memory dataset generated on demand"""

    def __init__(self, scene, indices):
        self.scene = scene
        self.indices = list(indices)
        self._cache = {}

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, i):
        index = self.indices[i]
        if index not in self._cache:
            self._cache[index] = generate_pair(self.scene, index)
        return self._cache[index]


class PairedDataset:
    """One split of a dataset directory written by write_dataset"""

    def __init__(self, root, split="train", verify=False):
        self.root = Path(root)
        if not self.root.is_dir():
            raise DatasetIOError("dataset directory not found", self.root)
        self.manifest = read_manifest(self.root)
        self.scene = scene_from_manifest(self.manifest)
        self.split = split
        self.entries = [e for e in self.manifest["samples"] if e["split"] == split]
        self.verify = verify

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        entry = self.entries[i]
        sample_dir = self.root / entry["path"]
        h, w = self.scene.image_size
        raw = {}
        for name in FILES:
            file_path = sample_dir / name
            try:
                raw[name] = file_path.read_bytes()
            except OSError as e:
                raise DatasetIOError(f"could not read sample file: {e}", file_path) from e
            if self.verify and hashlib.sha256(raw[name]).hexdigest() != entry["files"][name]:
                raise DatasetIOError("checksum mismatch", file_path)
        return PairedSample(
            index=entry["index"],
            source=_png_array(raw["source.png"]).transpose(2, 0, 1).copy(),
            target=_png_array(raw["target.png"]).transpose(2, 0, 1).copy(),
            source_labels=_png_array(raw["labels.png"]),
            warp=np.frombuffer(raw["warp.f32"], dtype="<f4").reshape(h, w, 2).astype(np.float32),
            confidence=np.frombuffer(raw["conf.f32"], dtype="<f4").reshape(h, w).astype(np.float32),
            adverse_labels_heldout=_png_array(raw["target_labels.png"]),
        )


def _png_array(data):
    with Image.open(io.BytesIO(data)) as img:
        return np.array(img)
