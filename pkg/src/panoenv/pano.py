"""Panorama geometry: 36-way sub-view partition, masks, outpainting windows, generation."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import FormatError
from .diffusion import Generator, inpaint_sample, sample

N_HEADINGS = 12
N_ELEVATIONS = 3
N_VIEWS = N_HEADINGS * N_ELEVATIONS
HEADING_STEP_DEG = 30.0
ELEVATIONS_DEG = (-30.0, 0.0, 30.0)


@dataclass
class Panorama:
    """Cylindrical panorama, ``pixels`` shaped (height, width, channels), values in [0, 1].

    Columns wrap: column 0 is adjacent to column ``width - 1``. The top third of
    the rows is the +30 degree elevation band, the bottom third -30 degrees.
    """

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3:
            raise ValueError("panorama pixels must be (height, width, channels)")
        h, w, _ = self.pixels.shape
        if w % N_HEADINGS or h % N_ELEVATIONS:
            raise ValueError(f"panorama {w}x{h} not divisible into {N_HEADINGS}x{N_ELEVATIONS} views")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def view_shape(self) -> tuple[int, int]:
        return self.height // N_ELEVATIONS, self.width // N_HEADINGS


@dataclass
class SubView:
    heading_index: int
    elevation_index: int
    pixels: np.ndarray

    @property
    def heading_deg(self) -> float:
        return HEADING_STEP_DEG * self.heading_index

    @property
    def elevation_deg(self) -> float:
        return ELEVATIONS_DEG[self.elevation_index]

    @property
    def index(self) -> int:
        return view_index(self.heading_index, self.elevation_index)


def view_index(heading_index: int, elevation_index: int) -> int:
    return elevation_index * N_HEADINGS + heading_index


def view_slices(pano_shape: tuple[int, int], heading_index: int, elevation_index: int) -> tuple[slice, slice]:
    h, w = pano_shape
    vh, vw = h // N_ELEVATIONS, w // N_HEADINGS
    band = N_ELEVATIONS - 1 - elevation_index
    return slice(band * vh, (band + 1) * vh), slice(heading_index * vw, (heading_index + 1) * vw)


def partition(p: Panorama) -> list[SubView]:
    """36 non-overlapping crops ordered by (elevation, heading)."""
    views = []
    for e in range(N_ELEVATIONS):
        for hd in range(N_HEADINGS):
            rs, cs = view_slices(p.pixels.shape[:2], hd, e)
            views.append(SubView(hd, e, p.pixels[rs, cs].copy()))
    return views


def stitch(views: Sequence[SubView]) -> Panorama:
    if len(views) != N_VIEWS:
        raise ValueError(f"need {N_VIEWS} views, got {len(views)}")
    vh, vw, c = views[0].pixels.shape
    out = np.zeros((vh * N_ELEVATIONS, vw * N_HEADINGS, c))
    seen = set()
    for v in views:
        if v.pixels.shape != (vh, vw, c):
            raise ValueError("sub-views differ in shape")
        rs, cs = view_slices(out.shape[:2], v.heading_index, v.elevation_index)
        out[rs, cs] = v.pixels
        seen.add(v.index)
    if len(seen) != N_VIEWS:
        raise ValueError("sub-views do not cover every heading/elevation pair")
    return Panorama(out)


# ---------------------------------------------------------------------------
# masks (1 = regenerate, 0 = keep)

MASK_BOUNDS = {"SRM": (0.10, 0.50), "ERM": (0.50, 0.90), "HIM": (0.5, 0.5)}
STRATEGIES = ("SRM", "ERM", "HIM", "PRM")


@dataclass(frozen=True)
class MaskSpec:
    strategy: str = "PRM"
    seed: int = 0
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.strategy.upper() not in STRATEGIES:
            raise ValueError(f"unknown masking strategy {self.strategy!r}")
        object.__setattr__(self, "strategy", self.strategy.upper())

    def bounds(self, shape: tuple[int, int]) -> tuple[float, float]:
        if self.strategy == "PRM":
            side = prm_crop_side(shape, self.params.get("crop"))
            frac = 1.0 - side * side / (shape[0] * shape[1])
            return frac, frac
        return MASK_BOUNDS[self.strategy]


def prm_crop_side(shape: tuple[int, int], crop=None) -> int:
    side = max(1, min(shape) // 4) if crop is None else int(crop)
    if side < 1 or side > min(shape):
        raise ValueError(f"center crop {side} does not fit a {shape[0]}x{shape[1]} image")
    return side


def _rect_mask(shape, lo: float, hi: float, rng: np.random.Generator, max_side: float) -> np.ndarray:
    h, w = shape
    n = h * w
    lo_px, hi_px = int(np.ceil(lo * n - 1e-9)), int(np.floor(hi * n + 1e-9))
    if lo_px > hi_px or hi_px == 0:
        raise ValueError(f"a {h}x{w} mask cannot cover a fraction in [{lo}, {hi}]")
    target = int(np.clip(round(rng.uniform(lo, hi) * n), max(lo_px, 1), hi_px))
    mask = np.zeros(shape, dtype=np.uint8)
    misses = 0
    while mask.sum() < target:
        if misses < 20:
            rh = int(rng.integers(1, max(1, int(h * max_side)) + 1))
            rw = int(rng.integers(1, max(1, int(w * max_side)) + 1))
            r0 = int(rng.integers(0, h - rh + 1))
            c0 = int(rng.integers(0, w - rw + 1))
            trial = mask.copy()
            trial[r0 : r0 + rh, c0 : c0 + rw] = 1
            if trial.sum() <= hi_px:
                mask = trial
            else:
                misses += 1
        else:
            free = np.flatnonzero(mask.reshape(-1) == 0)
            mask.reshape(-1)[free[rng.integers(0, len(free))]] = 1
    return mask


def make_mask(shape: tuple[int, int], spec: MaskSpec) -> np.ndarray:
    """Binary (height, width) mask where 1 marks pixels to regenerate."""
    h, w = int(shape[0]), int(shape[1])
    rng = np.random.default_rng(spec.seed)
    if spec.strategy in ("SRM", "ERM"):
        lo, hi = MASK_BOUNDS[spec.strategy]
        return _rect_mask((h, w), lo, hi, rng, float(spec.params.get("max_side", 0.5)))
    if spec.strategy == "HIM":
        if w % 2:
            raise ValueError("half-image masking needs an even width")
        mask = np.zeros((h, w), dtype=np.uint8)
        if rng.integers(0, 2) == 0:
            mask[:, : w // 2] = 1
        else:
            mask[:, w // 2 :] = 1
        return mask
    side = prm_crop_side((h, w), spec.params.get("crop"))
    mask = np.ones((h, w), dtype=np.uint8)
    r0, c0 = (h - side) // 2, (w - side) // 2
    mask[r0 : r0 + side, c0 : c0 + side] = 0
    return mask


# ---------------------------------------------------------------------------
# recursive outpainting


@dataclass(frozen=True)
class Placement:
    row: int
    col: int
    direction: str  # seed | right | down | up
    parent: int  # index of the window this one was shifted from; -1 for the seed


@dataclass(frozen=True)
class WindowSchedule:
    width: int
    height: int
    window_size: int
    placements: tuple[Placement, ...]

    @property
    def stride(self) -> int:
        return self.window_size // 2

    def __len__(self) -> int:
        return len(self.placements)

    def footprint(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Row and (wrapped) column indices covered by window ``k``."""
        p = self.placements[k]
        S = self.window_size
        return np.arange(p.row, p.row + S), (p.col + np.arange(S)) % self.width

    def coverage(self) -> np.ndarray:
        counts = np.zeros((self.height, self.width), dtype=np.int64)
        for k in range(len(self)):
            rows, cols = self.footprint(k)
            counts[np.ix_(rows, cols)] += 1
        return counts

    def overlap(self, i: int, j: int) -> int:
        a = np.zeros((self.height, self.width), dtype=bool)
        b = np.zeros_like(a)
        a[np.ix_(*self.footprint(i))] = True
        b[np.ix_(*self.footprint(j))] = True
        return int((a & b).sum())


def outpaint_schedule(p_width: int, p_height: int, S: int, seed_row: int | None = None) -> WindowSchedule:
    """Seed window, then rightward half-window shifts around the cylinder, then rows below, then rows above.

    Each row visits every column position once; the last window of a row wraps
    onto the left half of the row's first window. A new row starts directly
    below (or above) an existing window, so every window overlaps its parent by
    exactly half. ``seed_row`` defaults to the middle row position (the horizon
    band); pass 0 to seed in the top-left corner.
    """
    if S < 2 or S % 2:
        raise ValueError("window size must be a positive even number")
    half = S // 2
    if S > p_height or S >= p_width:
        raise ValueError("window must fit the panorama height and be narrower than its width")
    if p_width % half or (p_height - S) % half:
        raise ValueError("panorama size must be a multiple of half the window size")
    rows = list(range(0, p_height - S + 1, half))
    cols = list(range(0, p_width, half))
    if seed_row is None:
        seed_row = rows[(len(rows) - 1) // 2]
    if seed_row not in rows:
        raise ValueError(f"seed row {seed_row} is not on the half-window grid")
    placements: list[Placement] = []

    def sweep_row(row: int, start_ci: int, direction: str, parent: int) -> None:
        placements.append(Placement(row, cols[start_ci], direction, parent))
        for step in range(1, len(cols)):
            placements.append(Placement(row, cols[(start_ci + step) % len(cols)], "right", len(placements) - 1))

    sweep_row(seed_row, 0, "seed", -1)
    ri = rows.index(seed_row)
    for row in rows[ri + 1 :]:
        last = placements[-1]
        sweep_row(row, cols.index(last.col), "down", len(placements) - 1)
    up_parent = 0
    for row in reversed(rows[:ri]):
        anchor = placements[up_parent]
        sweep_row(row, cols.index(anchor.col), "up", up_parent)
        up_parent = len(placements) - 1
    return WindowSchedule(p_width, p_height, S, tuple(placements))


def check_schedule(schedule: WindowSchedule) -> None:
    """Raise ValueError unless every pixel is covered and every window overlaps its parent by half."""
    S = schedule.window_size
    if not schedule.placements or schedule.placements[0].parent != -1:
        raise ValueError("schedule must start with a seed window")
    cov = schedule.coverage()
    if cov.min() < 1:
        raise ValueError(f"{int((cov == 0).sum())} pixels never covered")
    for k, p in enumerate(schedule.placements[1:], 1):
        if not 0 <= p.parent < k:
            raise ValueError(f"window {k} has invalid parent {p.parent}")
        if schedule.overlap(k, p.parent) != S * S // 2:
            raise ValueError(f"window {k} overlaps its parent by {schedule.overlap(k, p.parent)} pixels, not {S * S // 2}")


def schedule_to_json(schedule: WindowSchedule) -> dict:
    return {
        "width": schedule.width,
        "height": schedule.height,
        "window": schedule.window_size,
        "placements": [[p.row, p.col, p.direction, p.parent] for p in schedule.placements],
    }


def schedule_from_json(obj: Mapping) -> WindowSchedule:
    try:
        placements = tuple(Placement(int(r), int(c), str(d), int(par)) for r, c, d, par in obj["placements"])
        return WindowSchedule(int(obj["width"]), int(obj["height"]), int(obj["window"]), placements)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad window schedule ({exc})") from exc


def window_caption_index(schedule: WindowSchedule, k: int, written: np.ndarray) -> int:
    """Sub-view index (elevation*12 + heading) holding the centre of window ``k``'s new region."""
    rows, cols = schedule.footprint(k)
    block = ~written[np.ix_(rows, cols)]
    rr, cc = np.nonzero(block) if block.any() else np.nonzero(np.ones_like(block))
    r = rows[int(round(rr.mean()))]
    c = cols[int(round(cc.mean()))]
    vh, vw = schedule.height // N_ELEVATIONS, schedule.width // N_HEADINGS
    return view_index(c // vw, N_ELEVATIONS - 1 - r // vh)


def schedule_captions(schedule: WindowSchedule, view_captions: Sequence[Sequence[str]]) -> list[list[str]]:
    """Caption per window taken from the sub-view its new region falls in."""
    written = np.zeros((schedule.height, schedule.width), dtype=bool)
    out = []
    for k in range(len(schedule)):
        out.append(list(view_captions[window_caption_index(schedule, k, written)]))
        rows, cols = schedule.footprint(k)
        written[np.ix_(rows, cols)] = True
    return out


def generate_panorama(
    gen: Generator,
    schedule: WindowSchedule,
    captions: Sequence[Sequence[str]],
    rng: np.random.Generator,
    channels: int | None = None,
    snapshots: list | None = None,
) -> Panorama:
    """Recursive outpainting: sample the seed window, inpaint every later window's unwritten pixels.

    Pixels are written once; later windows only fill positions no earlier
    window produced. ``snapshots`` (if given) receives a canvas copy after each window.
    """
    if len(captions) != len(schedule):
        raise ValueError("need one caption per window")
    S = schedule.window_size
    den = gen.denoiser
    if den.image_size != S:
        raise ValueError(f"window size {S} != generator image size {den.image_size}")
    c = channels or den.channels
    canvas = np.zeros((schedule.height, schedule.width, c))
    written = np.zeros((schedule.height, schedule.width), dtype=bool)
    for k in range(len(schedule)):
        rows, cols = schedule.footprint(k)
        idx = np.ix_(rows, cols)
        cond = gen.condition([list(captions[k])]).data
        if k == 0:
            patch = sample(den, gen.schedule, (S, S, c), cond, rng)
        else:
            mask = (~written[idx]).astype(np.uint8)
            patch = inpaint_sample(den, gen.schedule, canvas[idx], mask, cond, rng)
        fresh = ~written[idx]
        block = canvas[idx]
        block[fresh] = np.clip(patch[fresh], 0.0, 1.0)
        canvas[idx] = block
        written[idx] = True
        if snapshots is not None:
            snapshots.append(canvas.copy())
    return Panorama(canvas)


def augment_view(gen: Generator, view: SubView, spec: MaskSpec, caption: Sequence[str], rng: np.random.Generator) -> SubView:
    """Inpaint the masked part of a sub-view; unmasked pixels are returned unchanged."""
    mask = make_mask(view.pixels.shape[:2], spec)
    cond = gen.condition([list(caption)]).data
    out = inpaint_sample(gen.denoiser, gen.schedule, view.pixels, mask, cond, rng)
    keep = mask == 0
    pixels = np.where(keep[..., None], view.pixels, np.clip(out, 0.0, 1.0))
    return SubView(view.heading_index, view.elevation_index, pixels)


def augment_panorama(
    gen: Generator,
    pano: Panorama,
    view_captions: Sequence[Sequence[str]],
    spec: MaskSpec,
    rng: np.random.Generator,
) -> Panorama:
    """Inpaint all 36 sub-views in one batched pass; view ``i`` uses mask seed ``spec.seed + i``."""
    views = partition(pano)
    masks = np.stack(
        [make_mask(v.pixels.shape[:2], MaskSpec(spec.strategy, spec.seed + i, spec.params)) for i, v in enumerate(views)]
    )
    src = np.stack([v.pixels for v in views])
    cond = gen.condition([list(c) for c in view_captions]).data
    out = inpaint_sample(gen.denoiser, gen.schedule, src, masks, cond, rng)
    keep = (masks == 0)[..., None]
    pixels = np.where(keep, src, np.clip(out, 0.0, 1.0))
    return stitch([SubView(v.heading_index, v.elevation_index, px) for v, px in zip(views, pixels)])


# ---------------------------------------------------------------------------
# file format

PAN_MAGIC = b"PAN1"


def dumps_panorama(p: Panorama) -> bytes:
    header = PAN_MAGIC + struct.pack("<III", p.width, p.height, p.channels)
    return header + np.clip(p.pixels, 0.0, 1.0).astype("<f4").tobytes(order="C")


def loads_panorama(data: bytes) -> Panorama:
    if len(data) < 16 or data[:4] != PAN_MAGIC:
        raise FormatError("not a PAN1 panorama")
    w, h, c = struct.unpack("<III", data[4:16])
    body = data[16:]
    if len(body) != 4 * w * h * c:
        raise FormatError("panorama payload size does not match header")
    pixels = np.frombuffer(body, dtype="<f4").reshape(h, w, c).astype(np.float64)
    try:
        return Panorama(pixels)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def save_panorama(path: str | os.PathLike, p: Panorama) -> None:
    Path(path).write_bytes(dumps_panorama(p))


def load_panorama(path: str | os.PathLike) -> Panorama:
    return loads_panorama(Path(path).read_bytes())
