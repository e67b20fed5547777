"""Unpaired shape/image collections, paired subsets and batch sampling."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom3d import VoxelGrid

log = logging.getLogger(__name__)

RAW_MAGIC = b"SISTVOX1"
RAW_HEADER = struct.Struct("<8sII")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class VoxelParseError(ValueError):
    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{self.path}: byte {offset}: {message}")


@dataclass
class ShapeDataset:
    grids: list[VoxelGrid]
    ids: list[str]
    source_format: str = "raw"

    def __post_init__(self):
        if len(self.grids) != len(self.ids):
            raise ValueError("grids and ids must have the same length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("shape IDs must be unique")
        res = {g.resolution for g in self.grids}
        if len(res) > 1:
            raise ValueError(f"mixed resolutions in shape dataset: {sorted(res)}")
        self._index = {k: i for i, k in enumerate(self.ids)}

    def __len__(self):
        return len(self.grids)

    @property
    def resolution(self) -> int | None:
        return self.grids[0].resolution if self.grids else None

    def occupancy_array(self) -> np.ndarray:
        return np.stack([g.occupancy for g in self.grids])

    def by_id(self, shape_id: str) -> VoxelGrid:
        return self.grids[self._index[shape_id]]


@dataclass
class ImageDataset:
    """RGB images as float arrays (N, H, W, 3) in [-1, 1]."""

    images: np.ndarray
    ids: list[str]
    split: str = "train"
    skipped: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            if len(self.ids) == 0:
                self.images = self.images.reshape(0, 0, 0, 3)
            else:
                raise ValueError(f"expected (N, H, W, 3) images, got {self.images.shape}")
        if len(self.images) != len(self.ids):
            raise ValueError("images and ids must have the same length")
        self._index = {k: i for i, k in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def by_id(self, image_id: str) -> np.ndarray:
        return self.images[self._index[image_id]]


@dataclass
class PairedSubset:
    pairs: list[tuple[str, str]]
    supervision_rate: float
    images: ImageDataset
    shapes: ShapeDataset

    def __post_init__(self):
        if not 0.0 <= self.supervision_rate <= 1.0:
            raise ValueError("supervision_rate must lie in [0, 1]")
        for img_id, shape_id in self.pairs:
            if img_id not in self.images._index:
                raise KeyError(f"paired image ID {img_id!r} not in image dataset")
            if shape_id not in self.shapes._index:
                raise KeyError(f"paired shape ID {shape_id!r} not in shape dataset")

    def __len__(self):
        return len(self.pairs)


# ---------------------------------------------------------------- voxel files


def write_raw_occupancy(grid: VoxelGrid | np.ndarray, path) -> None:
    """Write the bit-packed ``SISTVOX1`` format (x-fastest, little bit order)."""
    occ = grid.occupancy if isinstance(grid, VoxelGrid) else np.asarray(grid, bool)
    r = occ.shape[0]
    # x-fastest means flat index x + R*(y + R*z): Fortran order over [x, y, z]
    bits = np.packbits(occ.ravel(order="F"), bitorder="little")
    Path(path).write_bytes(RAW_HEADER.pack(RAW_MAGIC, r, 0) + bits.tobytes())


def read_raw_occupancy(path) -> VoxelGrid:
    data = Path(path).read_bytes()
    if len(data) < RAW_HEADER.size:
        raise VoxelParseError(path, len(data), f"truncated header ({len(data)} of {RAW_HEADER.size} bytes)")
    magic, r, reserved = RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise VoxelParseError(path, 0, f"bad magic {magic!r}")
    if reserved != 0:
        raise VoxelParseError(path, 12, f"reserved field must be 0, got {reserved}")
    if r < 2:
        raise VoxelParseError(path, 8, f"resolution {r} < 2")
    n = r**3
    expected = (n + 7) // 8
    payload = data[RAW_HEADER.size :]
    if len(payload) != expected:
        raise VoxelParseError(
            path,
            RAW_HEADER.size + min(len(payload), expected),
            f"payload is {len(payload)} bytes, header resolution {r} requires {expected}",
        )
    bits = np.unpackbits(np.frombuffer(payload, np.uint8), bitorder="little")
    if bits[n:].any():
        raise VoxelParseError(path, len(data) - 1, "non-zero padding bits")
    return VoxelGrid(bits[:n].astype(bool).reshape((r, r, r), order="F"))


def read_binvox(path) -> VoxelGrid:
    """Read a run-length encoded binvox file into x, y, z index order."""
    data = Path(path).read_bytes()
    pos = 0
    dims = None

    def line():
        nonlocal pos
        end = data.find(b"\n", pos)
        if end < 0:
            raise VoxelParseError(path, pos, "unterminated header line")
        out = data[pos:end].strip()
        start, pos = pos, end + 1
        return out, start

    head, _ = line()
    if not head.startswith(b"#binvox"):
        raise VoxelParseError(path, 0, "not a binvox file")
    while True:
        text, at = line()
        if text.startswith(b"dim"):
            try:
                dims = [int(t) for t in text.split()[1:]]
            except ValueError:
                raise VoxelParseError(path, at, f"bad dim line {text!r}") from None
        elif text == b"data":
            break
        elif not (text.startswith(b"translate") or text.startswith(b"scale") or not text):
            raise VoxelParseError(path, at, f"unexpected header line {text!r}")
    if dims is None or len(dims) != 3:
        raise VoxelParseError(path, pos, "missing dim line")
    raw = np.frombuffer(data, np.uint8, offset=pos)
    if len(raw) % 2:
        raise VoxelParseError(path, len(data) - 1, "odd-length run-length payload")
    values, counts = raw[::2], raw[1::2]
    total = int(counts.sum(dtype=np.int64))
    n = dims[0] * dims[1] * dims[2]
    if total != n:
        raise VoxelParseError(path, pos, f"run lengths cover {total} voxels, dims require {n}")
    flat = np.repeat(values.astype(bool), counts)
    # binvox stores x slowest, then z, then y fastest
    return VoxelGrid(flat.reshape(dims).transpose(0, 2, 1))


def write_binvox(grid: VoxelGrid | np.ndarray, path) -> None:
    occ = grid.occupancy if isinstance(grid, VoxelGrid) else np.asarray(grid, bool)
    r = occ.shape[0]
    flat = occ.transpose(0, 2, 1).ravel().astype(np.uint8)
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], change])
    lengths = np.diff(np.concatenate([starts, [len(flat)]]))
    body = bytearray()
    for s, length in zip(starts, lengths):
        v = flat[s]
        while length > 0:
            chunk = min(int(length), 255)
            body += bytes((v, chunk))
            length -= chunk
    header = f"#binvox 1\ndim {r} {r} {r}\ntranslate 0 0 0\nscale 1\ndata\n".encode()
    Path(path).write_bytes(header + bytes(body))


VOXEL_READERS = {"binvox": (read_binvox, (".binvox",)), "raw-occupancy": (read_raw_occupancy, (".svox", ".raw"))}


def read_voxel_file(path, format: str | None = None) -> VoxelGrid:
    path = Path(path)
    if format is None:
        format = "binvox" if path.suffix == ".binvox" else "raw-occupancy"
    if format not in VOXEL_READERS:
        raise ValueError(f"unknown voxel format {format!r}")
    return VOXEL_READERS[format][0](path)


def load_voxels(path, format: str = "raw-occupancy") -> ShapeDataset:
    """Load a voxel file or a directory of voxel files of one format."""
    if format not in VOXEL_READERS:
        raise ValueError(f"unknown voxel format {format!r}; expected one of {sorted(VOXEL_READERS)}")
    reader, suffixes = VOXEL_READERS[format]
    path = Path(path)
    files = [path] if path.is_file() else sorted(p for p in path.iterdir() if p.suffix in suffixes)
    if not files:
        log.warning("no %s files found under %s", format, path)
        return ShapeDataset([], [], format)
    grids = [reader(f) for f in files]
    by_res: dict[int, list[str]] = {}
    for f, g in zip(files, grids):
        by_res.setdefault(g.resolution, []).append(f.name)
    if len(by_res) > 1:
        common = max(by_res, key=lambda k: len(by_res[k]))
        offenders = [name for res, names in by_res.items() if res != common for name in names]
        raise ValueError(f"mixed resolutions (majority {common}); offenders: {', '.join(offenders)}")
    for f, g in zip(files, grids):
        if g.centroid_offset() > 0.25:
            log.warning("%s: occupied centroid is off-centre by %.2f of the extent", f.name, g.centroid_offset())
    return ShapeDataset(grids, [f.stem for f in files], format)


# ---------------------------------------------------------------- images


def read_image(path, size: int | None = None, composite_white: bool = True) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode in ("RGBA", "LA", "P"):
            im = im.convert("RGBA")
            if composite_white:
                bg = Image.new("RGBA", im.size, (255, 255, 255, 255))
                im = Image.alpha_composite(bg, im)
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32)
    return arr / 127.5 - 1.0


def write_image(rgb: np.ndarray, path) -> None:
    from PIL import Image

    q = np.clip(np.round((np.asarray(rgb) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    Image.fromarray(q).save(path)


def split_counts(n: int, fraction: float) -> int:
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("split_fraction must lie in [0, 1]")
    return int(round(n * fraction))


def load_images(
    path, split_fraction: float = 0.75, seed: int = 0, size: int = 128
) -> tuple[ImageDataset, ImageDataset]:
    """Load a directory of PNG/JPEG images and split it into train/test deterministically."""
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    images, ids, skipped = [], [], 0
    for f in files:
        try:
            images.append(read_image(f, size))
        except Exception as exc:  # PIL raises a zoo of types on corrupt input
            log.warning("skipping unreadable image %s: %s", f.name, exc)
            skipped += 1
            continue
        ids.append(f.stem)
    n_train = split_counts(len(ids), split_fraction)
    order = np.random.default_rng(seed).permutation(len(ids))
    tr, te = np.sort(order[:n_train]), np.sort(order[n_train:])
    arr = np.stack(images) if images else np.zeros((0, size, size, 3), np.float32)
    train = ImageDataset(arr[tr], [ids[i] for i in tr], "train", skipped)
    test = ImageDataset(arr[te], [ids[i] for i in te], "test", skipped)
    return train, test


def make_paired_subset(
    images: ImageDataset,
    shapes: ShapeDataset,
    ground_truth: dict[str, str],
    rate: float,
    seed: int = 0,
) -> PairedSubset:
    """Randomly select ``round(rate * N)`` images with known ground-truth shapes."""
    candidates = [i for i in images.ids if i in ground_truth]
    n = split_counts(len(candidates), rate)
    chosen = np.random.default_rng(seed).choice(len(candidates), size=n, replace=False)
    pairs = [(candidates[i], ground_truth[candidates[i]]) for i in sorted(chosen)]
    return PairedSubset(pairs, rate, images, shapes)


def load_manifest(path, image_size: int = 128, split_fraction: float = 0.75, seed: int = 0):
    """Read a JSON dataset manifest.

    Schema::

        {"shapes": [{"id": str, "path": str, "format": "binvox" | "raw-occupancy"}],
         "images": [{"id": str, "path": str, "shape_id": str (optional),
                     "split": "train" | "test" (optional)}]}

    Relative paths resolve against the manifest's directory. Returns
    ``(shapes, train_images, test_images, ground_truth)`` where ``ground_truth``
    maps image IDs to shape IDs for images that declare one.
    """
    path = Path(path)
    spec = json.loads(path.read_text())
    root = path.parent
    shape_entries = spec.get("shapes", [])
    grids = [read_voxel_file(root / e["path"], e.get("format")) for e in shape_entries]
    fmt = shape_entries[0].get("format", "raw-occupancy") if shape_entries else "raw-occupancy"
    shapes = ShapeDataset(grids, [e["id"] for e in shape_entries], fmt)

    entries = spec.get("images", [])
    arrs, ids, splits, skipped = [], [], [], 0
    for e in entries:
        try:
            arrs.append(read_image(root / e["path"], image_size))
        except Exception as exc:
            log.warning("skipping unreadable image %s: %s", e["path"], exc)
            skipped += 1
            continue
        ids.append(e["id"])
        splits.append(e.get("split"))
    if all(s is None for s in splits):
        n_train = split_counts(len(ids), split_fraction)
        order = np.random.default_rng(seed).permutation(len(ids))
        train_idx = set(order[:n_train].tolist())
        splits = ["train" if i in train_idx else "test" for i in range(len(ids))]
    arr = np.stack(arrs) if arrs else np.zeros((0, image_size, image_size, 3), np.float32)
    sel = {s: [i for i, t in enumerate(splits) if t == s] for s in ("train", "test")}
    train = ImageDataset(arr[sel["train"]], [ids[i] for i in sel["train"]], "train", skipped)
    test = ImageDataset(arr[sel["test"]], [ids[i] for i in sel["test"]], "test", skipped)
    gt = {e["id"]: e["shape_id"] for e in entries if "shape_id" in e and e["id"] in ids}
    return shapes, train, test, gt


# ---------------------------------------------------------------- batching


@dataclass
class UnpairedBatch:
    """Independently drawn shapes and real images; no correspondence between them."""

    shapes: np.ndarray  # (B, R, R, R) bool
    images: np.ndarray  # (B, H, W, 3) float32
    shape_ids: np.ndarray | None = None  # indices into the shape dataset


@dataclass
class PairedBatch:
    images: np.ndarray
    shapes: np.ndarray
    pairs: list[tuple[str, str]] = field(default_factory=list)


class _EpochSampler:
    """Draws indices without replacement, reshuffling at each epoch boundary."""

    def __init__(self, n: int):
        self.n = n
        self.order = np.empty(0, np.int64)
        self.cursor = 0
        self.epoch = 0
        self.started = False

    def draw(self, k: int, rng: np.random.Generator) -> np.ndarray:
        out = []
        while k > 0:
            if self.cursor >= len(self.order):
                if self.started:
                    self.epoch += 1
                self.started = True
                self.order = rng.permutation(self.n)
                self.cursor = 0
            take = min(k, len(self.order) - self.cursor)
            out.append(self.order[self.cursor : self.cursor + take])
            self.cursor += take
            k -= take
        return np.concatenate(out)

    def state_dict(self):
        return {"order": self.order.tolist(), "cursor": self.cursor, "epoch": self.epoch, "started": self.started}

    def load_state_dict(self, s):
        self.order = np.asarray(s["order"], np.int64)
        self.cursor, self.epoch, self.started = s["cursor"], s["epoch"], s["started"]


class UnpairedBatcher:
    """Single-consumer iterator over independent shape and image streams."""

    def __init__(self, shapes: ShapeDataset, images: ImageDataset, batch_size: int = 16):
        if len(shapes) == 0 or len(images) == 0:
            raise ValueError("unpaired batching needs non-empty shape and image datasets")
        self.shapes = shapes
        self.images = images
        self.batch_size = batch_size
        self._occ = shapes.occupancy_array()
        self._shape_sampler = _EpochSampler(len(shapes))
        self._image_sampler = _EpochSampler(len(images))
        self._warned = False

    @property
    def epoch(self) -> int:
        """Completed passes over the image dataset."""
        return self._image_sampler.epoch

    @property
    def batches_per_epoch(self) -> int:
        return max(1, -(-len(self.images) // self.batch_size))

    def next(self, rng: np.random.Generator) -> UnpairedBatch:
        b = self.batch_size
        if not self._warned and (b > len(self.shapes) or b > len(self.images)):
            log.warning("batch size %d exceeds a dataset size; batches will repeat samples", b)
            self._warned = True
        si = self._shape_sampler.draw(b, rng)
        ii = self._image_sampler.draw(b, rng)
        return UnpairedBatch(self._occ[si], self.images.images[ii], si)

    def state_dict(self):
        return {"shapes": self._shape_sampler.state_dict(), "images": self._image_sampler.state_dict()}

    def load_state_dict(self, s):
        self._shape_sampler.load_state_dict(s["shapes"])
        self._image_sampler.load_state_dict(s["images"])


def next_unpaired_batch(shapes: ShapeDataset, images: ImageDataset, batch_size: int, rng) -> UnpairedBatch:
    """One-shot unpaired batch; use :class:`UnpairedBatcher` for epoch-aware streaming."""
    return UnpairedBatcher(shapes, images, batch_size).next(rng)


def next_paired_batch(pairs: PairedSubset, batch_size: int, rng: np.random.Generator) -> PairedBatch:
    if pairs is None or len(pairs) == 0:
        raise ValueError("paired subset is empty; weak supervision requires supervision_rate > 0")
    idx = rng.integers(0, len(pairs), size=batch_size)
    chosen = [pairs.pairs[i] for i in idx]
    imgs = np.stack([pairs.images.by_id(a) for a, _ in chosen])
    occ = np.stack([pairs.shapes.by_id(b).occupancy for _, b in chosen])
    return PairedBatch(imgs, occ, chosen)
