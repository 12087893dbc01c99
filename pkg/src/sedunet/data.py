"""Tensor files, day-file windows and a synthetic toy city.

HXT1 layout (little-endian)::

    0..3   b"HXT1"
    4      dtype code: 0 = uint8, 1 = float32
    5      rank
    6..7   zero
    8..    rank x uint64 dims, then the row-major payload
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from sedunet.tensor import Prng

MAGIC = b"HXT1"
DTYPE_CODES = {0: np.dtype("<u1"), 1: np.dtype("<f4")}
_CODE_OF = {np.dtype(np.uint8): 0, np.dtype(np.float32): 1}
_MAX_PAYLOAD = 1 << 40

FRAMES_PER_DAY = 288
FRAMES_IN = 12
# frames after the last input frame: +5, +10, +15, +30, +45, +60 minutes
OUTPUT_OFFSETS = (1, 2, 3, 6, 9, 12)
HORIZON_NAMES = ("h5", "h10", "h15", "h30", "h45", "h60")
DYNAMIC_CHANNELS = 9
TARGET_CHANNELS = 8
STATIC_CHANNELS = 7


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- HXT1

def write_tensor(f, tensor: np.ndarray):
    tensor = np.asarray(tensor)
    code = _CODE_OF.get(tensor.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {tensor.dtype}; HXT1 stores uint8 or float32")
    if tensor.ndim > 255:
        raise FormatError("rank too large")
    f.write(MAGIC + struct.pack("<BBH", code, tensor.ndim, 0))
    f.write(struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
    f.write(np.ascontiguousarray(tensor, dtype=DTYPE_CODES[code]).tobytes())


def read_tensor(f) -> np.ndarray:
    head = f.read(8)
    if len(head) < 8:
        raise FormatError("truncated header")
    if head[:4] != MAGIC:
        raise FormatError("bad magic")
    code, rank, _ = struct.unpack("<BBH", head[4:])
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}")
    raw_dims = f.read(8 * rank)
    if len(raw_dims) < 8 * rank:
        raise FormatError("truncated dims")
    dims = struct.unpack(f"<{rank}Q", raw_dims)
    dtype = DTYPE_CODES[code]
    nbytes = dtype.itemsize
    for d in dims:
        nbytes *= d
        if nbytes > _MAX_PAYLOAD:
            raise FormatError(f"dims overflow: {dims}")
    payload = f.read(nbytes)
    if len(payload) < nbytes:
        raise FormatError(f"truncated payload: expected {nbytes} bytes, got {len(payload)}")
    out = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return out.astype(dtype.newbyteorder("="), copy=True)


def save_tensor(path, tensor: np.ndarray):
    with open(path, "wb") as f:
        write_tensor(f, tensor)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        out = read_tensor(f)
        if f.read(1):
            raise FormatError("trailing bytes after payload")
    return out


def tensor_bytes(tensor: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, tensor)
    return buf.getvalue()


# ---------------------------------------------------------------- windows

@dataclass(frozen=True)
class WindowSpec:
    t: int
    offsets: tuple = OUTPUT_OFFSETS

    @property
    def input_indices(self) -> list[int]:
        return list(range(self.t, self.t + FRAMES_IN))

    @property
    def output_indices(self) -> list[int]:
        last = self.t + FRAMES_IN - 1
        return [last + k for k in self.offsets]

    @property
    def span(self) -> int:
        return FRAMES_IN - 1 + max(self.offsets)


def window_indices(num_frames: int, offsets=OUTPUT_OFFSETS) -> list[WindowSpec]:
    """Every window whose last output frame fits in ``num_frames``, by start index."""
    span = FRAMES_IN - 1 + max(offsets)
    return [WindowSpec(t, tuple(offsets)) for t in range(max(0, num_frames - span))]


def extract_window(day: np.ndarray, spec: WindowSpec):
    """Returns ``inputs [12, 9, H, W]`` and ``target [6, 8, H, W]`` as float32 in [0, 1]."""
    if day.ndim != 4 or day.shape[-1] != DYNAMIC_CHANNELS:
        raise ValueError(f"day must be [T, H, W, {DYNAMIC_CHANNELS}], got {day.shape}")
    if spec.t < 0 or spec.output_indices[-1] >= day.shape[0]:
        raise IndexError(f"window t={spec.t} does not fit a day of {day.shape[0]} frames")
    scale = np.float32(1 / 255)
    inputs = day[spec.input_indices].transpose(0, 3, 1, 2).astype(np.float32) * scale
    target = day[spec.output_indices][..., :TARGET_CHANNELS].transpose(0, 3, 1, 2).astype(np.float32) * scale
    return inputs, target


def normalize(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32) * np.float32(1 / 255)


def denormalize_and_quantize(pred: np.ndarray) -> np.ndarray:
    """``clamp(round(255 x), 0, 255)`` with halves rounded away from zero."""
    pred = np.asarray(pred, dtype=np.float64)
    if np.isnan(pred).any():
        raise ValueError("prediction contains NaN")
    scaled = 255.0 * pred
    rounded = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return np.clip(rounded, 0, 255).astype(np.uint8)


def persistence_forecast(inputs: np.ndarray, n_out: int = len(OUTPUT_OFFSETS)) -> np.ndarray:
    """Repeat the last input frame (first 8 channels) at every horizon.

    ``inputs`` is ``[..., 12, 9, H, W]``; returns ``[..., n_out, 8, H, W]``.
    """
    last = inputs[..., -1:, :TARGET_CHANNELS, :, :]
    reps = [1] * last.ndim
    reps[-4] = n_out
    return np.tile(last, reps)


# ---------------------------------------------------------------- toy city

@dataclass
class GeneratorConfig:
    height: int = 16
    width: int = 16
    num_days: int = 3
    seed: int = 0
    num_lanes: int = 6
    incident_rate: float = 0.002
    period: int = 48          # frames; must divide 288 so every day repeats
    val_days: int = 1

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValueError(f"toy city needs at least 8x8 pixels, got {self.height}x{self.width}")
        if self.num_days < 1 or self.num_lanes < 1:
            raise ValueError("need at least one day and one lane")
        if FRAMES_PER_DAY % self.period:
            raise ValueError(f"period {self.period} does not divide {FRAMES_PER_DAY}")
        if not 0 <= self.incident_rate <= 1:
            raise ValueError("incident_rate must be in [0, 1]")


@dataclass
class _Lane:
    vertical: bool
    pos: int
    heading: int
    amplitude: float
    phase: float
    lag: float
    forward: bool


def _make_lanes(cfg: GeneratorConfig, rng: Prng) -> list[_Lane]:
    lanes, used = [], set()
    while len(lanes) < cfg.num_lanes:
        vertical = bool(rng.integers(0, 2))
        pos = int(rng.integers(1, (cfg.width if vertical else cfg.height) - 1))
        if (vertical, pos) in used and len(used) < cfg.height + cfg.width - 4:
            continue
        used.add((vertical, pos))
        lanes.append(_Lane(vertical, pos,
                           heading=int(rng.integers(0, 4)),
                           amplitude=float(rng.uniform(0.4, 0.9)),
                           phase=float(rng.uniform(0, 2 * np.pi)),
                           lag=float(rng.uniform(0.5, 2.0)),
                           forward=bool(rng.integers(0, 2))))
    return lanes


def _lane_pixels(lane: _Lane, h: int, w: int):
    n = h if lane.vertical else w
    along = np.arange(n)
    s = along if lane.forward else n - 1 - along
    rows = along if lane.vertical else np.full(n, lane.pos)
    cols = np.full(n, lane.pos) if lane.vertical else along
    return rows, cols, s


def generate_toy_city(cfg: GeneratorConfig):
    """Synthetic city: straight lanes carrying travelling daily waves.

    Volume on a lane pixel at along-lane position ``s`` is
    ``a * (0.5 + 0.5 sin(2 pi (t - lag*s) / period + phase))`` and speed is
    an affine function of volume, so every future frame is a fixed linear
    combination of recent ones. Returns ``(days, static)`` as uint8 arrays
    ``[288, H, W, 9]`` and ``[H, W, 7]``.
    """
    rng = Prng(cfg.seed)
    h, w = cfg.height, cfg.width
    lanes = _make_lanes(cfg, rng)

    static = np.zeros((h, w, STATIC_CHANNELS), dtype=np.float64)
    mask = np.zeros((h, w), dtype=bool)
    for lane in lanes:
        rows, cols, _ = _lane_pixels(lane, h, w)
        mask[rows, cols] = True
        static[rows, cols, 1 + lane.heading] = 1.0
        static[rows, cols, 6] = np.maximum(static[rows, cols, 6], lane.amplitude)
    static[..., 0] = mask
    lane_r, lane_c = np.nonzero(mask)
    rr, cc = np.mgrid[0:h, 0:w]
    dist = np.min(np.maximum(np.abs(rr[..., None] - lane_r), np.abs(cc[..., None] - lane_c)), axis=-1)
    static[..., 5] = np.minimum(dist, 8) / 8.0
    static_u8 = np.round(static * 255).astype(np.uint8)

    t = np.arange(FRAMES_PER_DAY)[:, None]
    days = []
    for d in range(cfg.num_days):
        day_rng = rng.spawn(d)
        day = np.zeros((FRAMES_PER_DAY, h, w, 9), dtype=np.float64)
        for lane in lanes:
            rows, cols, s = _lane_pixels(lane, h, w)
            amp = lane.amplitude * day_rng.uniform(0.85, 1.0)
            wave = 0.5 + 0.5 * np.sin(2 * np.pi * (t - lane.lag * s[None]) / cfg.period + lane.phase)
            vol = amp * wave
            speed = 0.9 - 0.6 * vol
            ch = 2 * lane.heading
            day[:, rows, cols, ch] = np.maximum(day[:, rows, cols, ch], vol)
            day[:, rows, cols, ch + 1] = np.maximum(day[:, rows, cols, ch + 1], speed)
        incidents = (day_rng.random((FRAMES_PER_DAY, h, w)) < cfg.incident_rate) & mask
        day[..., 8] = incidents
        days.append(np.round(day * 255).astype(np.uint8))
    return days, static_u8


# ---------------------------------------------------------------- dataset directory

def day_filename(k: int) -> str:
    return f"day_{k:04d}.hxt"


def write_dataset(out_dir, cfg: GeneratorConfig, force=False) -> dict:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} exists and is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    days, static = generate_toy_city(cfg)
    save_tensor(out / "static.hxt", static)
    for k, day in enumerate(days):
        save_tensor(out / day_filename(k), day)
    n_val = min(cfg.val_days, cfg.num_days - 1)
    manifest = {
        "height": cfg.height,
        "width": cfg.width,
        "num_days": cfg.num_days,
        "seed": cfg.seed,
        "train": list(range(cfg.num_days - n_val)),
        "val": list(range(cfg.num_days - n_val, cfg.num_days)),
        "generator": asdict(cfg),
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def evenly_spaced(items: list, limit: int | None) -> list:
    if limit is None or limit >= len(items):
        return list(items)
    idx = np.linspace(0, len(items) - 1, limit).round().astype(int)
    return [items[i] for i in idx]


class Dataset:
    """A dataset directory: ``static.hxt``, ``day_NNNN.hxt`` files and ``manifest.json``."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no manifest.json in {self.root}")
        with open(manifest_path) as f:
            self.manifest = json.load(f)
        for key in ("height", "width", "num_days", "train", "val"):
            if key not in self.manifest:
                raise ValueError(f"manifest is missing {key!r}")
        self.static_u8 = load_tensor(self.root / "static.hxt")
        if self.static_u8.shape != (self.height, self.width, STATIC_CHANNELS):
            raise ValueError(f"static.hxt has shape {self.static_u8.shape}")
        self.static = normalize(self.static_u8).transpose(2, 0, 1).copy()
        self._days: dict[int, np.ndarray] = {}

    @property
    def height(self) -> int:
        return int(self.manifest["height"])

    @property
    def width(self) -> int:
        return int(self.manifest["width"])

    def split(self, name: str) -> list[int]:
        if name not in ("train", "val"):
            raise ValueError(f"unknown split {name!r}")
        return list(self.manifest[name])

    def day(self, k: int) -> np.ndarray:
        if k not in self._days:
            day = load_tensor(self.root / day_filename(k))
            if day.shape != (FRAMES_PER_DAY, self.height, self.width, DYNAMIC_CHANNELS):
                raise ValueError(f"day {k} has shape {day.shape}")
            self._days[k] = day
        return self._days[k]

    def windows(self, split: str, limit: int | None = None) -> list[tuple[int, WindowSpec]]:
        items = [(k, spec) for k in self.split(split) for spec in window_indices(FRAMES_PER_DAY)]
        return evenly_spaced(items, limit)

    def batch(self, items):
        """``static [N,7,H,W]``, ``dynamic [N,12,9,H,W]``, ``target [N,6,8,H,W]``."""
        ins, tgts = zip(*(extract_window(self.day(k), spec) for k, spec in items))
        static = np.broadcast_to(self.static, (len(items),) + self.static.shape).copy()
        return static, np.stack(ins), np.stack(tgts)
