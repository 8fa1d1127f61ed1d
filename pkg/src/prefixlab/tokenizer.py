"""Toy multi-scale residual tokenizer.

Images live on the finest grid as per-site vectors. Encoding peels off one
residual token map per scale, coarse to fine; decoding de-quantizes each map,
upsamples it to the finest grid with nearest-neighbour replication and sums.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, InvalidScheduleError, InvalidTokenError


@dataclass(frozen=True)
class ScaleSchedule:
    """Coarse-to-fine grid dimensions (h_k, w_k), k = 1..K (1-based)."""

    dims: tuple[tuple[int, int], ...]

    def __post_init__(self):
        dims = tuple((int(h), int(w)) for h, w in self.dims)
        object.__setattr__(self, "dims", dims)
        if len(dims) < 1:
            raise InvalidScheduleError("schedule needs at least one scale")
        if any(h < 1 or w < 1 for h, w in dims):
            raise InvalidScheduleError("all grid dimensions must be >= 1")
        areas = [h * w for h, w in dims]
        if any(a > b for a, b in zip(areas, areas[1:])):
            raise InvalidScheduleError("site counts must be non-decreasing")

    @property
    def num_scales(self) -> int:
        return len(self.dims)

    @property
    def final_dims(self) -> tuple[int, int]:
        return self.dims[-1]

    def grid(self, k: int) -> tuple[int, int]:
        if not 1 <= k <= self.num_scales:
            raise InvalidScheduleError(f"scale {k} outside 1..{self.num_scales}")
        return self.dims[k - 1]

    def sites(self, k: int) -> int:
        h, w = self.grid(k)
        return h * w

    def prefix_sites(self, k: int) -> int:
        """Total site count over scales 1..k-1."""
        return sum(self.sites(j) for j in range(1, k))


@dataclass(frozen=True)
class Codebook:
    """Per-scale tables of code vectors, shape (K, V, d)."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=float)
        if v.ndim != 3:
            raise InvalidInputError("codebook must have shape (K, V, d)")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("codebook vectors must be finite")
        object.__setattr__(self, "vectors", v)

    @property
    def num_scales(self) -> int:
        return self.vectors.shape[0]

    @property
    def vocab(self) -> int:
        return self.vectors.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.vectors.shape[2]

    def table(self, k: int) -> np.ndarray:
        return self.vectors[k - 1]

    @classmethod
    def seeded(cls, num_scales: int, vocab: int, latent_dim: int, seed: int) -> "Codebook":
        """Unit-norm vectors drawn uniformly on the sphere, fixed per seed."""
        rng = np.random.default_rng(seed)
        v = rng.normal(size=(num_scales, vocab, latent_dim))
        v /= np.linalg.norm(v, axis=-1, keepdims=True)
        return cls(v)


@dataclass(frozen=True)
class TokenMap:
    """Token ids for one scale, shape (h_k, w_k)."""

    k: int
    ids: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        if ids.ndim != 2:
            raise InvalidInputError("token map must be a 2-d id grid")
        object.__setattr__(self, "ids", ids)

    def key(self) -> tuple[int, ...]:
        return tuple(int(x) for x in self.ids.ravel())


def nn_index_map(source: int, target: int) -> np.ndarray:
    """Target index i reads source index floor(i * source / target)."""
    return (np.arange(target) * source) // target


def dequantize(token_map: TokenMap, book: Codebook) -> np.ndarray:
    """Look up each site's code vector; returns (h_k, w_k, d)."""
    ids = token_map.ids
    if ids.min() < 0 or ids.max() >= book.vocab:
        raise InvalidTokenError(
            f"token ids must lie in [0, {book.vocab}) at scale {token_map.k}"
        )
    return book.table(token_map.k)[ids]


def upsample(grid: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour replication of (h, w, d) onto the target grid."""
    h, w = grid.shape[:2]
    th, tw = target
    if th < h or tw < w:
        raise InvalidScheduleError(f"cannot upsample {(h, w)} to smaller {target}")
    return grid[np.ix_(nn_index_map(h, th), nn_index_map(w, tw))]


def pool(grid: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Mean over the blocks induced by the nearest-neighbour index map.

    Adjoint of :func:`upsample`: each source site contributes to the pooled
    site it would have been replicated from.
    """
    h, w = grid.shape[:2]
    th, tw = target
    if th > h or tw > w:
        raise InvalidScheduleError(f"cannot pool {(h, w)} to larger {target}")
    rows = nn_index_map(th, h)
    cols = nn_index_map(tw, w)
    out = np.zeros((th, tw) + grid.shape[2:])
    counts = np.zeros((th, tw))
    np.add.at(out, (rows[:, None], cols[None, :]), grid)
    np.add.at(counts, (rows[:, None], cols[None, :]), 1.0)
    return out / counts[..., None]


def accumulate_latent(prev: np.ndarray, token_map: TokenMap, book: Codebook) -> np.ndarray:
    """prev + upsample(dequantize(map)); pure, prev untouched."""
    residual = dequantize(token_map, book)
    return prev + upsample(residual, prev.shape[:2])


def quantize_sites(grid: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Nearest codebook vector (Euclidean) per site; ties to the lower id."""
    dist = np.linalg.norm(grid[..., None, :] - table, axis=-1)
    return np.argmin(dist, axis=-1)


def encode_multiscale(image: np.ndarray, schedule: ScaleSchedule, book: Codebook) -> list[TokenMap]:
    """Greedy residual quantization into K coarse-to-fine token maps."""
    fh, fw = schedule.final_dims
    if image.shape != (fh, fw, book.latent_dim):
        raise InvalidInputError(
            f"image shape {image.shape} != {(fh, fw, book.latent_dim)}"
        )
    residual = image.astype(float).copy()
    maps = []
    for k in range(1, schedule.num_scales + 1):
        pooled = pool(residual, schedule.grid(k))
        ids = quantize_sites(pooled, book.table(k))
        tmap = TokenMap(k, ids)
        residual -= upsample(dequantize(tmap, book), (fh, fw))
        maps.append(tmap)
    return maps


def decode_maps(maps: list[TokenMap], schedule: ScaleSchedule, book: Codebook) -> np.ndarray:
    """Accumulate all scales into the finest-resolution latent."""
    fh, fw = schedule.final_dims
    latent = np.zeros((fh, fw, book.latent_dim))
    for tmap in maps:
        latent = accumulate_latent(latent, tmap, book)
    return latent


@dataclass(frozen=True)
class AffineDecoder:
    """Sitewise map f -> A f + b; seeded stand-in for a learned decoder."""

    matrix: np.ndarray
    offset: np.ndarray

    @classmethod
    def seeded(cls, latent_dim: int, seed: int) -> "AffineDecoder":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(size=(latent_dim, latent_dim)), rng.normal(size=latent_dim))

    def __call__(self, latent: np.ndarray) -> np.ndarray:
        return latent @ self.matrix.T + self.offset


def decode(latent: np.ndarray, decoder: AffineDecoder | None = None) -> np.ndarray:
    """Apply the fixed decoder (identity when none is given)."""
    if decoder is None:
        return latent.copy()
    return decoder(latent)


def synthetic_images(
    schedule: ScaleSchedule, latent_dim: int, seed: int, count: int, bumps: int = 3
) -> list[np.ndarray]:
    """Seeded mixtures of axis-aligned Gaussian bumps on the finest grid.

    Each image sums `bumps` bumps with random centre, per-axis width in
    [0.5, 2.0] grid units, and a random d-vector amplitude; bit-for-bit
    reproducible given the seed.
    """
    rng = np.random.default_rng(seed)
    h, w = schedule.final_dims
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    images = []
    for _ in range(count):
        img = np.zeros((h, w, latent_dim))
        for _ in range(bumps):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            sy, sx = rng.uniform(0.5, 2.0, size=2)
            amp = rng.normal(size=latent_dim)
            bump = np.exp(-(((ys - cy) / sy) ** 2 + ((xs - cx) / sx) ** 2) / 2.0)
            img += bump[..., None] * amp
        images.append(img)
    return images


def write_ppm(image: np.ndarray, path) -> None:
    """Dump an image with d <= 3 as plain-text PPM, channels padded to 3.

    Values are min-max scaled to 0..255 per image.
    """
    if image.shape[-1] > 3:
        raise InvalidInputError("PPM output requires latent dimension <= 3")
    h, w, d = image.shape
    rgb = np.zeros((h, w, 3))
    rgb[..., :d] = image
    lo, hi = rgb.min(), rgb.max()
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pixels = np.round((rgb - lo) * scale).astype(int)
    with open(path, "w") as fh:
        fh.write(f"P3\n{w} {h}\n255\n")
        for row in pixels:
            fh.write(" ".join(str(v) for v in row.reshape(-1)) + "\n")


def write_image_csv(image: np.ndarray, path) -> None:
    """Dump per-site vectors as CSV rows (row, col, v_0..v_{d-1})."""
    h, w, d = image.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col"] + [f"v{i}" for i in range(d)])
        for i in range(h):
            for j in range(w):
                writer.writerow([i, j] + [repr(float(x)) for x in image[i, j]])
