"""Synthetic ventricle-like voxel shapes, alignment crop and volume metrics.

Each sample is a truncated ellipsoidal shell (myocardium analog) around an
ellipsoidal cavity, seen at two phases. Class 1 ("hypertrophic") draws a
thicker wall with stronger septal asymmetry, which also leaves a smaller
cavity. The ES phase contracts the cavity while roughly conserving wall
volume.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

VXG_MAGIC = b"VXG1"
DTYPE_U8 = 0
DTYPE_F32 = 1
MAX_REDRAWS = 50

# sampling ranges expressed at a 32-voxel grid; scaled linearly with grid size
BASE_SIZE = 32
RADIAL_RANGE = (9.0, 10.5)
LONG_RANGE = (12.5, 14.0)
THICKNESS_RANGE = {0: (2.2, 3.0), 1: (3.6, 4.6)}
ASYMMETRY_RANGE = {0: (0.0, 0.15), 1: (0.25, 0.5)}
CONTRACTION_RANGE = (0.6, 0.75)
MAX_ROTATION_DEG = 10.0
MAX_SHIFT = 2.0


@dataclass
class ShapeParams:
    semi_axes: tuple
    thickness: float
    asymmetry: float
    contraction: float
    rotation_deg: tuple = (0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)

    def validate(self) -> None:
        if self.thickness < 1.0:
            raise ValueError(f"wall thickness {self.thickness} < 1 voxel")
        max_t = self.thickness * (1.0 + self.asymmetry)
        if min(self.semi_axes) - max_t <= 0:
            raise ValueError("inner semi-axes must stay positive")
        if not 0.0 < self.contraction < 1.0:
            raise ValueError("contraction factor must lie in (0, 1)")
        if not 0.0 <= self.asymmetry <= 1.0:
            raise ValueError("asymmetry must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "semi_axes": [float(v) for v in self.semi_axes],
            "thickness": float(self.thickness),
            "asymmetry": float(self.asymmetry),
            "contraction": float(self.contraction),
            "rotation_deg": [float(v) for v in self.rotation_deg],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeParams":
        return cls(
            semi_axes=tuple(d["semi_axes"]),
            thickness=d["thickness"],
            asymmetry=d["asymmetry"],
            contraction=d["contraction"],
            rotation_deg=tuple(d["rotation_deg"]),
            translation=tuple(d["translation"]),
        )


@dataclass
class VoxelSample:
    ed: np.ndarray
    es: np.ndarray
    cavity_ed: np.ndarray
    cavity_es: np.ndarray
    label: int
    params: ShapeParams
    seed: int = 0
    voxel_spacing: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.ed.shape[0]

    def network_input(self) -> np.ndarray:
        """The two-channel (ED, ES) float64 array fed to the model."""
        return np.stack([self.ed, self.es]).astype(np.float64)

    def channels(self) -> np.ndarray:
        return np.stack([self.ed, self.es, self.cavity_ed, self.cavity_es])


def _rotation(deg) -> np.ndarray:
    ax, ay, az = np.deg2rad(deg)
    rx = np.array([[1, 0, 0], [0, math.cos(ax), -math.sin(ax)], [0, math.sin(ax), math.cos(ax)]])
    ry = np.array([[math.cos(ay), 0, math.sin(ay)], [0, 1, 0], [-math.sin(ay), 0, math.cos(ay)]])
    rz = np.array([[math.cos(az), -math.sin(az), 0], [math.sin(az), math.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def _local_coords(size: int, params: ShapeParams):
    """Voxel-center coordinates in the shape frame (long axis = z, base at z = 0)."""
    mid = (size - 1) / 2.0
    # lift the ellipsoid center so the truncated shell sits near the grid center
    center = np.array([mid, mid, mid + params.semi_axes[2] / 2.0]) + np.asarray(params.translation)
    idx = np.indices((size, size, size), dtype=np.float64).reshape(3, -1)
    rot = _rotation(params.rotation_deg)
    local = rot.T @ (idx - center[:, None])
    return [c.reshape(size, size, size) for c in local]


def rasterize(params: ShapeParams, size: int):
    """Return (ed, es, cavity_ed, cavity_es) uint8 masks on a ``size``^3 grid."""
    params.validate()
    x, y, z = _local_coords(size, params)
    a, b, c = params.semi_axes
    phi = np.arctan2(y, x)
    # septum sits on the +x side of the shape frame
    t = params.thickness * (1.0 + params.asymmetry * np.cos(phi))
    below_base = z <= 0.0

    def ellipsoid(ax, bx, cx):
        return (x / ax) ** 2 + (y / bx) ** 2 + (z / cx) ** 2 <= 1.0

    outer_ed = ellipsoid(a, b, c)
    inner_ed = ellipsoid(a - t, b - t, c - t)

    kappa = params.contraction
    w = params.thickness
    inner_ratio = ((a - w) * (b - w) * (c - w)) / (a * b * c)
    # keep wall volume roughly constant while the cavity shrinks by kappa^3
    grow = (1.0 - (1.0 - kappa**3) * inner_ratio) ** (1.0 / 3.0)
    outer_es = ellipsoid(a * grow, b * grow, c * grow)
    inner_es = ellipsoid(kappa * (a - t), kappa * (b - t), kappa * (c - t))

    cav_ed = inner_ed & below_base
    cav_es = inner_es & below_base
    ed = outer_ed & ~inner_ed & below_base
    es = outer_es & ~inner_es & below_base
    return tuple(m.astype(np.uint8) for m in (ed, es, cav_ed, cav_es))


def sample_params(label: int, rng: np.random.Generator, size: int = BASE_SIZE, pose: bool = True) -> ShapeParams:
    if label not in (0, 1):
        raise ValueError(f"class must be 0 or 1, got {label}")
    f = size / BASE_SIZE
    for _ in range(MAX_REDRAWS):
        radial = rng.uniform(*RADIAL_RANGE, size=2) * f
        long_axis = rng.uniform(*LONG_RANGE) * f
        params = ShapeParams(
            semi_axes=(float(radial[0]), float(radial[1]), float(long_axis)),
            thickness=float(rng.uniform(*THICKNESS_RANGE[label]) * f),
            asymmetry=float(rng.uniform(*ASYMMETRY_RANGE[label])),
            contraction=float(rng.uniform(*CONTRACTION_RANGE)),
            rotation_deg=tuple(float(v) for v in rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG, 3))
            if pose
            else (0.0, 0.0, 0.0),
            translation=tuple(float(v) for v in rng.uniform(-MAX_SHIFT, MAX_SHIFT, 3) * f)
            if pose
            else (0.0, 0.0, 0.0),
        )
        try:
            params.validate()
        except ValueError:
            continue
        return params
    raise RuntimeError(f"could not draw valid shape parameters in {MAX_REDRAWS} attempts")


def generate_sample(label: int, rng: np.random.Generator, size: int = BASE_SIZE, params: ShapeParams = None) -> VoxelSample:
    """Draw one sample of class ``label``; deterministic for a given rng state."""
    for _ in range(MAX_REDRAWS):
        p = params if params is not None else sample_params(label, rng, size)
        ed, es, cav_ed, cav_es = rasterize(p, size)
        if all(m.any() for m in (ed, es, cav_ed, cav_es)):
            return VoxelSample(ed, es, cav_ed, cav_es, label=label, params=p)
        if params is not None:
            break
    raise RuntimeError("generated sample has an empty channel")


def _centroid(mask: np.ndarray) -> np.ndarray:
    return np.argwhere(mask > 0).mean(axis=0)


def crop_pad_center(sample: VoxelSample, out_size: int) -> VoxelSample:
    """Crop/zero-pad every channel to ``out_size``^3 around the ED myocardium centroid.

    All channels share one box, so ED/ES alignment is preserved.
    """
    if not sample.ed.any():
        raise ValueError("ED myocardium is empty; cannot center")
    src = np.stack([sample.ed, sample.es, sample.cavity_ed, sample.cavity_es])
    center = np.floor(_centroid(sample.ed) + 0.5).astype(int)
    shift = out_size // 2 - center

    nz = np.argwhere(src.any(axis=0))
    lo = nz.min(axis=0) + shift
    hi = nz.max(axis=0) + shift
    if (lo < 0).any() or (hi >= out_size).any():
        under = np.maximum(-lo, 0)
        over = np.maximum(hi - (out_size - 1), 0)
        raise ValueError(
            f"foreground does not fit in {out_size}^3 after centering: "
            f"overflow below {under.tolist()}, above {over.tolist()} voxels"
        )

    out = np.zeros((4, out_size, out_size, out_size), dtype=src.dtype)
    src_sl, dst_sl = [], []
    for axis in range(3):
        n = src.shape[axis + 1]
        s0 = max(0, -shift[axis])
        s1 = min(n, out_size - shift[axis])
        src_sl.append(slice(s0, s1))
        dst_sl.append(slice(s0 + shift[axis], s1 + shift[axis]))
    out[(slice(None), *dst_sl)] = src[(slice(None), *src_sl)]
    return VoxelSample(
        out[0], out[1], out[2], out[3],
        label=sample.label, params=sample.params, seed=sample.seed,
        voxel_spacing=sample.voxel_spacing, meta=dict(sample.meta),
    )


# ------------------------------------------------------------------ volumes


@dataclass
class VolumeMetrics:
    lvm_ed: float
    lvm_es: float
    lvcv_ed: float
    lvcv_es: float
    empty: tuple = ()

    def as_tuple(self) -> tuple:
        return (self.lvm_ed, self.lvm_es, self.lvcv_ed, self.lvcv_es)


def enclosed_cavity(mask: np.ndarray) -> np.ndarray:
    """Background enclosed by ``mask`` within each short-axis (z) slice.

    Slices are filled independently because the shell is open at its base.
    """
    mask = mask.astype(bool)
    cavity = np.zeros_like(mask)
    for z in range(mask.shape[2]):
        sl = mask[:, :, z]
        if sl.any():
            cavity[:, :, z] = ndimage.binary_fill_holes(sl) & ~sl
    return cavity


def volume_metrics(grid, threshold: float = 0.5, voxel_volume: float = 1.0) -> VolumeMetrics:
    """Myocardial and cavity volumes (voxel-units) at ED and ES.

    ``grid`` is a VoxelSample, or an array with 2 (ED, ES) or 4 (plus cavities)
    channels. Soft values are thresholded; missing cavity channels are derived
    with :func:`enclosed_cavity`.
    """
    if isinstance(grid, VoxelSample):
        chans = grid.channels()
        voxel_volume = grid.voxel_spacing**3
    else:
        chans = np.asarray(grid)
    if chans.ndim != 4 or chans.shape[0] not in (2, 4):
        raise ValueError(f"expected [2 or 4, X, Y, Z] channels, got shape {chans.shape}")
    myo = chans[:2] >= threshold
    if chans.shape[0] == 4:
        cav = chans[2:] >= threshold
    else:
        cav = np.stack([enclosed_cavity(m) for m in myo])
    values = [float(m.sum()) * voxel_volume for m in (myo[0], myo[1], cav[0], cav[1])]
    names = ("lvm_ed", "lvm_es", "lvcv_ed", "lvcv_es")
    empty = tuple(n for n, v in zip(names, values) if v == 0.0)
    if empty:
        logger.warning("empty mask after thresholding: %s", ", ".join(empty))
    return VolumeMetrics(*values, empty=empty)


# ------------------------------------------------------------------ VXG1 files


def write_vxg(path, array: np.ndarray, dtype: int = DTYPE_U8) -> None:
    """Write a ``[C, X, Y, Z]`` array as a VXG1 file."""
    arr = np.asarray(array)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected [C, X, Y, Z], got shape {arr.shape}")
    if dtype == DTYPE_U8:
        payload = np.ascontiguousarray(arr, dtype=np.uint8).tobytes()
    elif dtype == DTYPE_F32:
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    else:
        raise ValueError(f"unknown VXG1 dtype tag {dtype}")
    header = VXG_MAGIC + struct.pack("<IIIIB", arr.shape[0], *arr.shape[1:], dtype)
    Path(path).write_bytes(header + payload)


def read_vxg(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != VXG_MAGIC:
        raise ValueError(f"{path}: not a VXG1 file")
    c, dx, dy, dz, tag = struct.unpack_from("<IIIIB", raw, 4)
    body = raw[4 + struct.calcsize("<IIIIB"):]
    if tag == DTYPE_U8:
        arr = np.frombuffer(body, dtype=np.uint8)
    elif tag == DTYPE_F32:
        arr = np.frombuffer(body, dtype="<f4")
    else:
        raise ValueError(f"{path}: unknown dtype tag {tag}")
    if arr.size != c * dx * dy * dz:
        raise ValueError(f"{path}: payload holds {arr.size} values, header says {c * dx * dy * dz}")
    return arr.reshape(c, dx, dy, dz)


# ------------------------------------------------------------------ datasets

SPLITS = ("train", "val", "test")


def split_counts(n: int, fracs) -> list:
    counts = [int(math.floor(f * n + 0.5)) for f in fracs[:-1]]
    counts.append(n - sum(counts))
    if min(counts) < 0:
        raise ValueError(f"split fractions {fracs} do not fit {n} samples")
    return counts


def sample_seed(seed: int, label: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, label, index]).generate_state(1, dtype=np.uint64)[0])


def build_sample(label: int, seed: int, size: int) -> VoxelSample:
    """Generate on a padded canvas and center-crop to ``size``; redraws on overflow."""
    rng = np.random.default_rng(seed)
    canvas = size + size // 4
    for _ in range(MAX_REDRAWS):
        raw = generate_sample(label, rng, size=canvas, params=sample_params(label, rng, size))
        try:
            out = crop_pad_center(raw, size)
        except ValueError:
            continue
        out.seed = seed
        return out
    raise RuntimeError("could not generate a sample that fits the grid")


def make_dataset(out_dir, n_per_class: int = 160, split_fracs=(0.625, 0.1875, 0.1875), seed: int = 42, size: int = BASE_SIZE) -> list:
    """Generate a stratified dataset of VXG1 files plus JSON-lines manifests.

    Writes ``samples/*.vxg``, ``manifest.jsonl`` and one ``<split>.jsonl`` per
    split. Returns the manifest records.
    """
    if len(split_fracs) != 3 or abs(sum(split_fracs) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three values summing to 1, got {split_fracs}")
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    counts = split_counts(n_per_class, split_fracs)
    records = []
    for label in (0, 1):
        splits = [s for s, n in zip(SPLITS, counts) for _ in range(n)]
        for i, split in enumerate(splits):
            sid = f"c{label}_{i:04d}"
            s_seed = sample_seed(seed, label, i)
            sample = build_sample(label, s_seed, size)
            rel = f"samples/{sid}.vxg"
            write_vxg(out / rel, sample.channels(), DTYPE_U8)
            records.append({
                "id": sid,
                "file": rel,
                "label": label,
                "split": split,
                "params": sample.params.to_dict(),
                "seed": s_seed,
            })
    _write_jsonl(out / "manifest.jsonl", records)
    for split in SPLITS:
        _write_jsonl(out / f"{split}.jsonl", [r for r in records if r["split"] == split])
    return records


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_manifest(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_sample(root, record: dict) -> VoxelSample:
    arr = read_vxg(Path(root) / record["file"])
    return VoxelSample(
        arr[0], arr[1], arr[2], arr[3],
        label=int(record["label"]), params=ShapeParams.from_dict(record["params"]),
        seed=int(record["seed"]), meta={"id": record["id"], "split": record["split"]},
    )


def load_split(root, split: str):
    """Return ``(X, y, records)`` for one split; X is ``[N, 2, S, S, S]`` float64."""
    records = read_manifest(Path(root) / f"{split}.jsonl")
    if not records:
        raise ValueError(f"split {split!r} in {root} is empty")
    samples = [load_sample(root, r) for r in records]
    X = np.stack([s.network_input() for s in samples])
    y = np.array([s.label for s in samples], dtype=int)
    return X, y, records
