"""Volume, projection and image file handling.

Axis convention used throughout the package: a volume is indexed ``(z, y, x)``.
``z`` is A-scan depth (growing downward, away from the vitreous), ``x`` is the
lateral position inside a B-scan and ``y`` is the B-scan index.  A B-scan is
therefore the x-z plane ``volume[:, y, :]``.

Raw volume files store samples with z varying fastest (each A-scan is
contiguous), i.e. the file is a C-ordered ``(ny, nx, nz)`` array.  The geometry
is declared by a JSON sidecar ``{"dims": [nz, ny, nx], "bit_depth": 8|16,
"byte_order": "little"|"big"}``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class VolumeFormatError(ValueError):
    """Raised when a raw volume does not match its declared geometry."""


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    voxel_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise VolumeFormatError(f"volume must be 3D with dims >= 1, got {data.shape}")
        if data.dtype not in (np.uint8, np.uint16):
            raise VolumeFormatError(f"unsupported sample type {data.dtype}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def bit_depth(self) -> int:
        return 8 * self.data.dtype.itemsize


def _dtype_for(bit_depth: int, byte_order: str) -> np.dtype:
    if bit_depth == 8:
        return np.dtype(np.uint8)
    if bit_depth == 16:
        if byte_order not in ("little", "big"):
            raise VolumeFormatError(f"unknown byte order {byte_order!r}")
        return np.dtype("<u2" if byte_order == "little" else ">u2")
    raise VolumeFormatError(f"unsupported bit depth {bit_depth}")


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def read_sidecar(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def load_volume(path, meta: dict | None = None) -> Volume:
    """Load a raw volume.  ``meta`` defaults to the ``<path>.json`` sidecar."""
    if meta is None:
        meta = read_sidecar(sidecar_path(path))
    try:
        nz, ny, nx = (int(d) for d in meta["dims"])
        bit_depth = int(meta["bit_depth"])
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"incomplete sidecar metadata: {meta}") from exc
    if min(nz, ny, nx) < 1:
        raise VolumeFormatError(f"invalid dims {meta['dims']}")
    dtype = _dtype_for(bit_depth, meta.get("byte_order", "little"))
    raw = Path(path).read_bytes()
    expected = nz * ny * nx * dtype.itemsize
    if len(raw) != expected:
        raise VolumeFormatError(
            f"size mismatch: {path} has {len(raw)} bytes, dims {(nz, ny, nx)} "
            f"at {bit_depth} bit need {expected}")
    arr = np.frombuffer(raw, dtype=dtype).reshape(ny, nx, nz)
    data = np.ascontiguousarray(arr.transpose(2, 0, 1)).astype(dtype.newbyteorder("="))
    spacing = tuple(float(s) for s in meta.get("voxel_spacing", (1, 1, 1)))
    return Volume(data, spacing)


def save_volume(vol: Volume, path, byte_order: str = "little") -> None:
    """Write the raw samples (z fastest) and the JSON sidecar."""
    dtype = _dtype_for(vol.bit_depth, byte_order)
    arr = np.ascontiguousarray(vol.data.transpose(1, 2, 0)).astype(dtype)
    Path(path).write_bytes(arr.tobytes())
    meta = {"dims": list(vol.dims), "bit_depth": vol.bit_depth,
            "byte_order": byte_order, "voxel_spacing": list(vol.voxel_spacing)}
    sidecar_path(path).write_text(json.dumps(meta), encoding="utf-8")


def project_volume(vol: Volume, normalize: bool = True, reduce: str = "sum") -> np.ndarray:
    """Fundus-like x-y projection: sum (or mean) along z, then min-max to [0, 1].

    A constant projection maps to all zeros.
    """
    data = vol.data.astype(np.float64)
    proj = data.sum(axis=0) if reduce == "sum" else data.mean(axis=0)
    if not normalize:
        return proj
    return minmax(proj)


def minmax(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi <= lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


# --------------------------------------------------------------------------
# Netpbm images

def _to_u8(image) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype == np.bool_:
        return img.astype(np.uint8) * 255
    if img.dtype == np.uint8:
        return img
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, image) -> None:
    """Binary P5 grey map, maxval 255.  Float input is expected in [0, 1]."""
    img = _to_u8(image)
    if img.ndim != 2:
        raise ValueError("PGM needs a 2D image")
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(np.ascontiguousarray(img).tobytes())


def write_ppm(path, rgb) -> None:
    img = _to_u8(rgb)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM needs an (h, w, 3) image")
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pnm(path) -> np.ndarray:
    """Read a binary P5/P6 file written by :func:`write_pgm`/:func:`write_ppm`."""
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported netpbm header in {path}")
    ch = 1 if magic == b"P5" else 3
    arr = np.frombuffer(buf, dtype=np.uint8, count=w * h * ch, offset=pos)
    return arr.reshape(h, w) if ch == 1 else arr.reshape(h, w, 3)


def save_projection(image, path) -> None:
    write_pgm(path, image)


def save_mask(mask, path) -> None:
    write_pgm(path, np.asarray(mask, dtype=bool))


def checkerboard(a, b, tile: int = 32) -> np.ndarray:
    """Alternate ``tile``-pixel squares of ``a`` and ``b``."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("checkerboard inputs differ in shape")
    yy, xx = np.indices(a.shape[:2])
    pick = ((yy // tile + xx // tile) % 2).astype(bool)
    if a.ndim == 3:
        pick = pick[..., None]
    return np.where(pick, b, a)


def overlay(a, b) -> np.ndarray:
    """Colour overlay: red = a, green = b, blue = mean.

    Identical inputs give a pure grey image (no colour disparity).
    """
    a = _to_u8(a).astype(np.uint16)
    b = _to_u8(b).astype(np.uint16)
    return np.stack([a, b, (a + b) // 2], axis=-1).astype(np.uint8)


def save_overlay(a, b, path, mode: str = "overlay", tile: int = 32) -> None:
    if mode == "checkerboard":
        g = _to_u8(checkerboard(_to_u8(a), _to_u8(b), tile))
        write_ppm(path, np.stack([g, g, g], axis=-1))
    else:
        write_ppm(path, overlay(a, b))


# --------------------------------------------------------------------------
# flat key-value text

def write_kv(path, items: dict) -> None:
    lines = []
    for key, value in items.items():
        if isinstance(value, (list, tuple, np.ndarray)):
            value = " ".join(_fmt(v) for v in np.asarray(value).ravel().tolist())
        else:
            value = _fmt(value)
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_kv(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def ensure_parent(path) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)


@dataclass(frozen=True)
class SyntheticTruth:
    """Ground truth of a synthetic pair.

    ``coefficients`` parameterize the reference -> moving x-y map (see
    :mod:`octreg.transform`); ``z_shift`` is the depth shift that re-aligns the
    moving volume (reference apex depth minus moving apex depth) and
    ``z_ramp[y]`` is an extra per-slice offset added to the moving ILM depth,
    so the correcting shift of slice ``y`` is ``z_shift - z_ramp[y]``.  ``node_truth`` pairs phantom
    key-point ids (junctions and endpoints) of the reference tree with the ids
    of the same points in the moving tree; ``ref_points``/``mov_points`` hold
    their ``(y, x)`` positions.
    """
    model_kind: str
    coefficients: tuple
    z_shift: int
    z_ramp: tuple = ()
    node_truth: tuple = ()
    ref_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    mov_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    hr_apex: tuple = (0, 0, 0)

    def __post_init__(self):
        ids = [m for _, m in self.node_truth]
        if len(set(ids)) != len(ids):
            raise ValueError("node_truth must be injective")

    def expected_z_shift(self, ny: int) -> np.ndarray:
        ramp = np.asarray(self.z_ramp, dtype=int) if len(self.z_ramp) else np.zeros(ny, int)
        return self.z_shift - ramp

    def save(self, path) -> None:
        items = {
            "model_kind": self.model_kind,
            "coefficients": list(self.coefficients),
            "z_shift": self.z_shift,
            "z_ramp": list(self.z_ramp),
            "hr_apex": list(self.hr_apex),
            "node_truth": [v for pair in self.node_truth for v in pair],
            "ref_points": np.asarray(self.ref_points).ravel(),
            "mov_points": np.asarray(self.mov_points).ravel(),
        }
        write_kv(path, items)

    @classmethod
    def load(cls, path) -> "SyntheticTruth":
        kv = read_kv(path)

        def nums(key, conv=float):
            return [conv(t) for t in kv.get(key, "").split()]

        nt = nums("node_truth", int)
        return cls(
            model_kind=kv["model_kind"],
            coefficients=tuple(nums("coefficients")),
            z_shift=int(kv["z_shift"]),
            z_ramp=tuple(nums("z_ramp", int)),
            node_truth=tuple(zip(nt[0::2], nt[1::2])),
            ref_points=np.asarray(nums("ref_points")).reshape(-1, 2),
            mov_points=np.asarray(nums("mov_points")).reshape(-1, 2),
            hr_apex=tuple(nums("hr_apex", int)),
        )
