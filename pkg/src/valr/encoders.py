"""Frozen patch-feature encoders used as alignment targets.

Three analytic encoders give targets with different patch counts, widths and
statistics:

* ``dct``      - low-frequency DCT coefficients of grayscale patches
* ``hist``     - per-channel colour histograms
* ``randproj`` - a fixed seeded Gaussian projection of raw patch pixels

plus :class:`FileEncoder`, which serves features exported elsewhere through a
binary feature store. None of these hold trainable state.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft

from .errors import ConfigError, FeatureLookupError, FeatureStoreError, InvariantError
from .images import Image, grid_side, image_patches, patchify, upscale_nearest
from .seeding import philox_normal

STORE_MAGIC = b"VALRFEAT"
STORE_VERSION = 1
LUMA = np.array([0.299, 0.587, 0.114])
# added before the DCT so the DC term of every patch is strictly positive
DCT_PEDESTAL = 1.0


def is_square(n: int) -> bool:
    return n > 0 and math.isqrt(n) ** 2 == n


@dataclass
class EncoderFeatures:
    encoder_name: str
    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise InvariantError(f"{self.encoder_name}: features must be P x D, got {self.features.shape}")
        if not is_square(self.P):
            raise InvariantError(f"{self.encoder_name}: patch count {self.P} is not a perfect square")

    @property
    def P(self) -> int:
        return self.features.shape[0]

    @property
    def D(self) -> int:
        return self.features.shape[1]

    def check_rows(self) -> None:
        if (np.linalg.norm(self.features, axis=1) == 0).any():
            raise InvariantError(f"{self.encoder_name}: zero feature row")


def zigzag_order(n: int) -> list[tuple[int, int]]:
    """JPEG-style zigzag traversal of an ``n x n`` block."""
    cells = [(i, j) for i in range(n) for j in range(n)]
    return sorted(cells, key=lambda ij: (ij[0] + ij[1], ij[0] if (ij[0] + ij[1]) % 2 else ij[1]))


class DCTEncoder:
    name = "dct"

    def __init__(self, patch: int = 4, dim: int = 8, upscale: int = 2):
        if dim > patch * patch:
            raise ConfigError(f"dct dim {dim} exceeds {patch}x{patch} coefficients")
        self.patch, self.dim, self.upscale = patch, dim, upscale
        zz = zigzag_order(patch)[:dim]
        self._rows = np.array([i for i, _ in zz])
        self._cols = np.array([j for _, j in zz])

    def output_shape(self, side: int) -> tuple[int, int]:
        return grid_side(side * self.upscale, self.patch) ** 2, self.dim

    def encode(self, img: Image) -> EncoderFeatures:
        gray = img.pixels @ LUMA + DCT_PEDESTAL
        gray = upscale_nearest(gray[:, :, None], self.upscale)
        blocks = patchify(gray, self.patch)[..., 0]
        coeffs = scipy.fft.dctn(blocks, axes=(1, 2), norm="ortho")
        return EncoderFeatures(self.name, coeffs[:, self._rows, self._cols])


class HistEncoder:
    name = "hist"

    def __init__(self, patch: int = 4, bins: int = 4):
        if bins < 2:
            raise ConfigError("hist encoder needs at least 2 bins")
        self.patch, self.bins = patch, bins

    def output_shape(self, side: int) -> tuple[int, int]:
        return grid_side(side, self.patch) ** 2, 3 * self.bins

    def encode(self, img: Image) -> EncoderFeatures:
        blocks = patchify(img.pixels, self.patch)
        n_pix = self.patch * self.patch
        idx = np.clip(np.floor(blocks * self.bins).astype(np.int64), 0, self.bins - 1)
        idx = idx.reshape(blocks.shape[0], n_pix, 3)
        feats = np.zeros((blocks.shape[0], 3, self.bins))
        for c in range(3):
            for b in range(self.bins):
                feats[:, c, b] = (idx[:, :, c] == b).sum(axis=1)
        return EncoderFeatures(self.name, feats.reshape(blocks.shape[0], -1) / n_pix)


class RandProjEncoder:
    name = "randproj"

    def __init__(self, patch: int = 4, dim: int = 16, seed: int = 0):
        self.patch, self.dim, self.seed = patch, dim, seed
        fan_in = patch * patch * 3
        self.weight = philox_normal(seed, (fan_in, dim)) / math.sqrt(fan_in)
        self.bias = philox_normal(seed + 1, (dim,))
        self.weight.setflags(write=False)
        self.bias.setflags(write=False)

    def output_shape(self, side: int) -> tuple[int, int]:
        return grid_side(side, self.patch) ** 2, self.dim

    def encode(self, img: Image) -> EncoderFeatures:
        return EncoderFeatures(self.name, image_patches(img, self.patch) @ self.weight + self.bias)


class FileEncoder:
    """Serves precomputed features keyed by ``(image.sample_id, image.image_id)``."""

    def __init__(self, name: str, path):
        self.name = name
        self.path = Path(path)
        self._entries = read_feature_store(self.path)
        shapes = {a.shape for a in self._entries.values()}
        self._shape = shapes.pop() if len(shapes) == 1 else None

    def output_shape(self, side: int) -> tuple[int, int]:
        if self._shape is None:
            raise FeatureStoreError(f"{self.path}: entries do not share one P x D shape")
        return self._shape

    def __contains__(self, key) -> bool:
        return key in self._entries

    def encode(self, img: Image) -> EncoderFeatures:
        key = (img.sample_id, int(img.image_id))
        if key not in self._entries:
            raise FeatureLookupError(f"{self.path}: no features for sample {key[0]!r} image {key[1]}")
        return EncoderFeatures(self.name, self._entries[key])


def encode_dct(img: Image, patch: int = 4, dim: int = 8, upscale: int = 2) -> EncoderFeatures:
    return DCTEncoder(patch, dim, upscale).encode(img)


def encode_hist(img: Image, patch: int = 4, bins: int = 4) -> EncoderFeatures:
    return HistEncoder(patch, bins).encode(img)


def encode_randproj(img: Image, patch: int = 4, dim: int = 16, seed: int = 0) -> EncoderFeatures:
    return RandProjEncoder(patch, dim, seed).encode(img)


def encode_from_file(img: Image, feature_store, name: str = "file") -> EncoderFeatures:
    return FileEncoder(name, feature_store).encode(img)


# ---------------------------------------------------------------- feature store


def write_feature_store(path, entries: dict) -> None:
    """Write ``{(sample_id, image_id): P x D array}`` as float32, little-endian."""
    parts = [STORE_MAGIC, struct.pack("<II", STORE_VERSION, len(entries))]
    for (sample_id, image_id), feats in entries.items():
        feats = np.asarray(feats)
        sid = sample_id.encode("utf-8")
        parts.append(struct.pack("<H", len(sid)) + sid)
        parts.append(struct.pack("<III", int(image_id), feats.shape[0], feats.shape[1]))
        parts.append(feats.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_feature_store(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:8] != STORE_MAGIC:
        raise FeatureStoreError(f"{path}: bad magic {buf[:8]!r}")
    try:
        version, count = struct.unpack_from("<II", buf, 8)
        if version != STORE_VERSION:
            raise FeatureStoreError(f"{path}: unsupported version {version}")
        off = 16
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            sid = buf[off:off + n].decode("utf-8")
            off += n
            image_id, p, d = struct.unpack_from("<III", buf, off)
            off += 12
            if not is_square(p):
                raise InvariantError(f"{path}: entry ({sid}, {image_id}) has non-square patch count {p}")
            nbytes = 4 * p * d
            if off + nbytes > len(buf):
                raise FeatureStoreError(f"{path}: truncated payload")
            out[(sid, image_id)] = np.frombuffer(buf, dtype="<f4", count=p * d, offset=off).reshape(p, d).astype(np.float64)
            off += nbytes
    except struct.error as e:
        raise FeatureStoreError(f"{path}: truncated header ({e})") from None
    if off != len(buf):
        raise FeatureStoreError(f"{path}: {len(buf) - off} trailing bytes")
    return out


# ---------------------------------------------------------------- registry


class EncoderRegistry:
    """Ordered, uniquely named encoders; the order fixes projection-head pairing."""

    def __init__(self, encoders, image_side: int = 16):
        names = [e.name for e in encoders]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate encoder names: {names}")
        self.encoders = list(encoders)
        self.image_side = image_side
        self.entries = [(e.name, e, *e.output_shape(image_side)) for e in self.encoders]

    def __len__(self):
        return len(self.encoders)

    def __iter__(self):
        return iter(self.entries)

    @property
    def names(self) -> list[str]:
        return [n for n, *_ in self.entries]

    def shapes(self) -> dict:
        return {n: (p, d) for n, _, p, d in self.entries}

    def encode_all(self, img: Image) -> dict:
        out = {}
        for name, enc, p, d in self.entries:
            f = enc.encode(img)
            if f.features.shape != (p, d):
                raise InvariantError(f"{name}: expected {(p, d)}, got {f.features.shape}")
            f.check_rows()
            out[name] = f
        return out


BUILTIN = {"dct": DCTEncoder, "hist": HistEncoder, "randproj": RandProjEncoder}


def build_registry(names, image_side: int = 16, seed: int = 0) -> EncoderRegistry:
    encs = []
    for name in names:
        if name not in BUILTIN:
            raise ConfigError(f"unknown encoder {name!r}; choose from {sorted(BUILTIN)}")
        encs.append(RandProjEncoder(seed=seed) if name == "randproj" else BUILTIN[name]())
    return EncoderRegistry(encs, image_side)


def file_registry(feature_dir, names, image_side: int = 16) -> EncoderRegistry:
    feature_dir = Path(feature_dir)
    encs = []
    for name in names:
        path = feature_dir / f"{name}.valrfeat"
        if not path.exists():
            raise ConfigError(f"missing feature store {path}")
        encs.append(FileEncoder(name, path))
    return EncoderRegistry(encs, image_side)
