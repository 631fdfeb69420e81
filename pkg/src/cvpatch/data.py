"""Patch datasets: Photo-Tour and HPatches ingestion, sampling, synthetic patches."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .ctensor import read_bundle, write_bundle

PATCH_SIZE = 32
PHOTOTOUR_CELL = 64
PHOTOTOUR_GRID = 16
HPATCHES_CELL = 65
HPATCHES_IMAGES = ("ref", "e1", "e2", "e3", "e4", "e5")
IMAGE_EXTS = (".bmp", ".png", ".jpg", ".jpeg", ".tif", ".tiff")


class IngestionError(ValueError):
    """A dataset file is missing or malformed."""


class SamplingError(ValueError):
    """The store cannot support the requested sampling."""


class PatchPair(NamedTuple):
    a: int
    b: int
    label: int


class PatchTriplet(NamedTuple):
    p1: int
    p2: int
    n: int


@dataclass(frozen=True)
class PatchStore:
    """Grayscale patches (P, 1, S, S) in [0, 1] with per-patch point ids."""

    patches: np.ndarray
    point_ids: np.ndarray
    source: str = ""

    def __post_init__(self):
        p = np.asarray(self.patches)
        ids = np.asarray(self.point_ids, dtype=np.int64)
        if p.ndim != 4 or p.shape[1] != 1 or p.shape[2] != p.shape[3]:
            raise IngestionError(f"patches must be (P, 1, S, S), got {p.shape}")
        if ids.shape != (p.shape[0],):
            raise IngestionError(f"{p.shape[0]} patches but {ids.size} point ids")
        if p.size and (p.min() < 0 or p.max() > 1):
            raise IngestionError("patch values must lie in [0, 1]")
        p.setflags(write=False)
        ids.setflags(write=False)
        object.__setattr__(self, "patches", p)
        object.__setattr__(self, "point_ids", ids)

    def __len__(self):
        return self.patches.shape[0]

    @property
    def patch_size(self) -> int:
        return self.patches.shape[-1]

    def groups(self) -> dict[int, np.ndarray]:
        """point id -> indices of its patches, ascending."""
        order = np.argsort(self.point_ids, kind="stable")
        ids, starts = np.unique(self.point_ids[order], return_index=True)
        return {int(i): g for i, g in zip(ids, np.split(order, starts[1:]))}

    def subset(self, indices) -> "PatchStore":
        idx = np.asarray(indices, dtype=np.int64)
        return PatchStore(self.patches[idx], self.point_ids[idx], self.source)

    def pair_batch(self, pairs):
        """Stack pairs into an (N, 2, S, S) array and a label vector."""
        a, b, labels = _columns(pairs, 3)
        return np.concatenate([self.patches[a], self.patches[b]], axis=1), labels.astype(float)

    def triplet_batch(self, triplets):
        p1, p2, n = _columns(triplets, 3)
        return self.patches[p1], self.patches[p2], self.patches[n]

    def to_tensors(self) -> dict:
        src = np.frombuffer(self.source.encode("utf-8"), dtype=np.uint8).astype(np.int64)
        return {"patches": self.patches, "point_ids": self.point_ids, "source": src}

    @classmethod
    def from_tensors(cls, t: dict) -> "PatchStore":
        try:
            source = bytes(np.asarray(t["source"], dtype=np.uint8)).decode("utf-8")
            return cls(t["patches"], t["point_ids"], source)
        except KeyError as e:
            raise IngestionError(f"patch store is missing tensor {e}") from None

    def save(self, path) -> None:
        with open(path, "wb") as f:
            write_bundle(f, self.to_tensors())

    @classmethod
    def load(cls, path) -> "PatchStore":
        with open(path, "rb") as f:
            return cls.from_tensors(read_bundle(f))


def _columns(rows, width):
    arr = np.asarray(rows, dtype=np.int64).reshape(-1, width)
    return tuple(arr[:, k] for k in range(width))


def mean_pool2(x: np.ndarray) -> np.ndarray:
    """2x2 mean pooling over the last two axes (even sizes)."""
    h, w = x.shape[-2:]
    return x.reshape(*x.shape[:-2], h // 2, 2, w // 2, 2).mean(axis=(-3, -1))


def _read_gray(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.float64)
    except OSError as e:
        raise IngestionError(f"{path}: cannot read image ({e})") from None


# -- Photo-Tour ------------------------------------------------------------------


def _mosaic_files(directory):
    names = sorted(n for n in os.listdir(directory)
                   if n.lower().endswith(IMAGE_EXTS) and not n.startswith("."))
    return [os.path.join(directory, n) for n in names]


def read_info(path) -> np.ndarray:
    """First field of each non-empty line of info.txt, as point ids."""
    if not os.path.isfile(path):
        raise IngestionError(f"{path}: info file not found")
    ids = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            fields = line.split()
            if not fields:
                continue
            try:
                ids.append(int(fields[0]))
            except ValueError:
                raise IngestionError(f"{path}:{lineno}: bad point id {fields[0]!r}") from None
    return np.asarray(ids, dtype=np.int64)


def load_phototour(directory) -> PatchStore:
    """Read mosaics of 16x16 cells of 64x64 pixels, in file-name order.

    Patch k is cell (k mod 256) of mosaic k // 256, row-major. Cells are
    mean-pooled to 32x32 and scaled to [0, 1].
    """
    ids = read_info(os.path.join(directory, "info.txt"))
    files = _mosaic_files(directory)
    per = PHOTOTOUR_GRID * PHOTOTOUR_GRID
    need = -(-ids.size // per)
    if len(files) < need:
        raise IngestionError(f"{directory}: info.txt lists {ids.size} patches, "
                             f"{len(files)} mosaics hold at most {len(files) * per}")
    side = PHOTOTOUR_GRID * PHOTOTOUR_CELL
    out = np.empty((ids.size, 1, PATCH_SIZE, PATCH_SIZE), dtype=np.float32)
    for m, path in enumerate(files[:need]):
        img = _read_gray(path)
        if img.shape != (side, side):
            raise IngestionError(f"{path}: mosaic is {img.shape[1]}x{img.shape[0]}, "
                                 f"expected {side}x{side}")
        cells = img.reshape(PHOTOTOUR_GRID, PHOTOTOUR_CELL, PHOTOTOUR_GRID, PHOTOTOUR_CELL)
        cells = cells.transpose(0, 2, 1, 3).reshape(per, PHOTOTOUR_CELL, PHOTOTOUR_CELL)
        lo, hi = m * per, min((m + 1) * per, ids.size)
        pooled = mean_pool2(cells[:hi - lo]) / 255.0
        out[lo:hi, 0] = pooled.reshape(hi - lo, PATCH_SIZE, PATCH_SIZE)
    return PatchStore(out, ids, f"phototour:{os.path.basename(os.path.normpath(directory))}")


def load_match_file(path, store: PatchStore) -> list[PatchPair]:
    """Pairs from lines 'patch1 point1 _ patch2 point2 _'; match iff point ids agree."""
    pairs = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) < 6:
                raise IngestionError(f"{path}:{lineno}: expected 6 fields, got {len(fields)}")
            try:
                a, pa, b, pb = (int(fields[k]) for k in (0, 1, 3, 4))
            except ValueError:
                raise IngestionError(f"{path}:{lineno}: non-integer field") from None
            for k in (a, b):
                if not 0 <= k < len(store):
                    raise IngestionError(f"{path}:{lineno}: patch id {k} outside store "
                                         f"of {len(store)} patches")
            pairs.append(PatchPair(a, b, int(pa == pb)))
    return pairs


# -- HPatches --------------------------------------------------------------------


def read_splits(split_file) -> dict[str, list[str]]:
    """Split name -> sequence names, from a JSON object.

    Values may be plain lists or objects with a "train" list.
    """
    try:
        with open(split_file) as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise IngestionError(f"{split_file}: cannot read split file ({e})") from None
    if not isinstance(raw, dict):
        raise IngestionError(f"{split_file}: expected a name -> sequences mapping")
    out = {}
    for name, seqs in raw.items():
        if isinstance(seqs, dict):
            seqs = seqs.get("train", [])
        if not isinstance(seqs, list):
            raise IngestionError(f"{split_file}: split {name!r} is not a list")
        out[str(name)] = [str(s) for s in seqs]
    return out


def _hpatches_column(path) -> np.ndarray:
    img = _read_gray(path)
    h, w = img.shape
    if w != HPATCHES_CELL or h % HPATCHES_CELL:
        raise IngestionError(f"{path}: {w}x{h} is not a column of "
                             f"{HPATCHES_CELL}x{HPATCHES_CELL} patches")
    cells = img.reshape(h // HPATCHES_CELL, HPATCHES_CELL, HPATCHES_CELL)
    off = (HPATCHES_CELL - 64) // 2
    return mean_pool2(cells[:, off:off + 64, off:off + 64]) / 255.0


def load_hpatches(directory, split_file, split_names, images=HPATCHES_IMAGES) -> PatchStore:
    """Patches of the sequences listed under ``split_names``.

    Every image row is one point: point ids number the (sequence, row) keys
    in sequence-name order.
    """
    splits = read_splits(split_file)
    seqs = set()
    for name in split_names:
        if name not in splits:
            raise IngestionError(f"{split_file}: unknown split {name!r} "
                                 f"(have {sorted(splits)})")
        seqs.update(splits[name])
    patches, ids = [], []
    next_id = 0
    for seq in sorted(seqs):
        folder = os.path.join(directory, seq)
        if not os.path.isdir(folder):
            raise IngestionError(f"{folder}: sequence folder not found")
        rows = None
        for image in images:
            path = next((os.path.join(folder, image + ext) for ext in IMAGE_EXTS
                         if os.path.isfile(os.path.join(folder, image + ext))), None)
            if path is None:
                raise IngestionError(f"{folder}: missing image {image!r}")
            col = _hpatches_column(path)
            if rows is None:
                rows = col.shape[0]
            elif col.shape[0] != rows:
                raise IngestionError(f"{path}: {col.shape[0]} patches, {images[0]} has {rows}")
            patches.append(col)
            ids.append(np.arange(next_id, next_id + rows))
        next_id += rows
    if not patches:
        return PatchStore(np.zeros((0, 1, PATCH_SIZE, PATCH_SIZE), np.float32),
                          np.zeros(0, np.int64), "hpatches")
    arr = np.concatenate(patches)[:, None].astype(np.float32)
    return PatchStore(arr, np.concatenate(ids), "hpatches:" + ",".join(split_names))


# -- sampling --------------------------------------------------------------------


class _Index:
    """Patches sorted by point id, with each id's start and count."""

    def __init__(self, store: PatchStore):
        self.order = np.argsort(store.point_ids, kind="stable")
        _, self.start, self.count = np.unique(store.point_ids[self.order], return_index=True,
                                              return_counts=True)
        self.total = len(store)

    def pick_within(self, group, rng, distinct_from=None):
        """One patch of each group; optionally distinct from given in-group offsets."""
        if distinct_from is None:
            off = rng.integers(0, self.count[group])
        else:
            off = rng.integers(0, self.count[group] - 1)
            off = off + (off >= distinct_from)
        return off

    def pick_outside(self, group, rng):
        """A patch uniformly among all patches whose id differs from the group's."""
        r = rng.integers(0, self.total - self.count[group])
        r = r + (r >= self.start[group]) * self.count[group]
        return self.order[r]

    def positives(self, count, rng):
        multi = np.flatnonzero(self.count >= 2)
        g = multi[rng.integers(0, multi.size, size=count)]
        i = self.pick_within(g, rng)
        j = self.pick_within(g, rng, distinct_from=i)
        return g, self.order[self.start[g] + i], self.order[self.start[g] + j]


def _check_sampling(idx: _Index, need_positive: bool):
    if idx.count.size < 2:
        raise SamplingError(f"need at least 2 point ids, store has {idx.count.size}")
    if need_positive and not (idx.count >= 2).any():
        raise SamplingError("no point id has 2 or more patches")


def sample_triplets(store: PatchStore, count: int, rng: np.random.Generator) -> list[PatchTriplet]:
    """Id uniform among ids with >= 2 patches, two distinct patches of it, and a
    negative uniform over all patches of other ids."""
    idx = _Index(store)
    _check_sampling(idx, True)
    g, p1, p2 = idx.positives(int(count), rng)
    n = idx.pick_outside(g, rng)
    return [PatchTriplet(*t) for t in zip(p1.tolist(), p2.tolist(), n.tolist())]


def sample_pairs(store: PatchStore, count: int, pos_fraction: float = 0.5,
                 rng: np.random.Generator | None = None) -> list[PatchPair]:
    """round(count * pos_fraction) matching pairs, the rest non-matching, shuffled."""
    if not 0.0 <= pos_fraction <= 1.0:
        raise SamplingError(f"pos_fraction must lie in [0, 1], got {pos_fraction}")
    rng = np.random.default_rng() if rng is None else rng
    n_pos = int(round(count * pos_fraction))
    n_neg = int(count) - n_pos
    idx = _Index(store)
    _check_sampling(idx, n_pos > 0)
    _, a_pos, b_pos = idx.positives(n_pos, rng)
    a_neg = rng.integers(0, idx.total, size=n_neg)
    inv = np.empty(idx.total, dtype=np.int64)
    inv[idx.order] = np.arange(idx.total)
    group_of = np.repeat(np.arange(idx.count.size), idx.count)
    b_neg = idx.pick_outside(group_of[inv[a_neg]], rng)
    a = np.concatenate([a_pos, a_neg])
    b = np.concatenate([b_pos, b_neg])
    labels = np.r_[np.ones(n_pos, np.int64), np.zeros(n_neg, np.int64)]
    perm = rng.permutation(a.size)
    return [PatchPair(*t) for t in zip(a[perm].tolist(), b[perm].tolist(), labels[perm].tolist())]


# -- synthetic patches -------------------------------------------------------------

TEMPLATE_SMOOTHING = 4.0


def synth_template(size: int, rng: np.random.Generator, margin: int = 2) -> np.ndarray:
    """Low-frequency random field on a (size + 2 margin)^2 canvas, spread to [0.1, 0.9]."""
    side = size + 2 * margin
    field = gaussian_filter(rng.standard_normal((side, side)), TEMPLATE_SMOOTHING, mode="wrap")
    lo, hi = field.min(), field.max()
    return 0.1 + 0.8 * (field - lo) / (hi - lo)


def synth_generate(num_ids: int, patches_per_id: int, noise_sigma: float, size: int = PATCH_SIZE,
                   rng: np.random.Generator | None = None, max_shift: int = 2,
                   first_id: int = 0) -> PatchStore:
    """Each id: a smooth random template; each patch: a crop shifted by up to
    ``max_shift`` pixels per axis, plus Gaussian noise, clamped to [0, 1]."""
    if num_ids < 2:
        raise SamplingError("synth_generate needs num_ids >= 2")
    rng = np.random.default_rng() if rng is None else rng
    out = np.empty((num_ids * patches_per_id, 1, size, size), dtype=np.float32)
    k = 0
    for _ in range(num_ids):
        tmpl = synth_template(size, rng, max_shift)
        for _ in range(patches_per_id):
            dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
            crop = tmpl[max_shift + dy:max_shift + dy + size, max_shift + dx:max_shift + dx + size]
            noisy = crop + noise_sigma * rng.standard_normal((size, size))
            out[k, 0] = np.clip(noisy, 0.0, 1.0)
            k += 1
    ids = np.repeat(np.arange(first_id, first_id + num_ids, dtype=np.int64), patches_per_id)
    return PatchStore(out, ids, f"synthetic:{num_ids}x{patches_per_id}:sigma={noise_sigma:g}")


HELDOUT_SEED_OFFSET = 1_000_003


def synth_splits(num_ids: int, patches_per_id: int, noise_sigma: float, seed: int,
                 size: int = PATCH_SIZE, heldout_ids: int | None = None):
    """Train and held-out stores with disjoint ids and independent templates.

    The held-out generator is seeded with ``seed + HELDOUT_SEED_OFFSET``.
    """
    train = synth_generate(num_ids, patches_per_id, noise_sigma, size,
                           np.random.default_rng(seed))
    held = synth_generate(heldout_ids or num_ids, patches_per_id, noise_sigma, size,
                          np.random.default_rng(seed + HELDOUT_SEED_OFFSET), first_id=num_ids)
    return train, held
