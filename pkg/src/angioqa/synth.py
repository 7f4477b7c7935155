"""Synthetic Mask/Contrast/Generated triplets with programmatic ground truth.

Each triplet shares one vessel tree (a smooth trunk plus random branches,
rendered as Gaussian-profile ridges that darken a low-frequency background):

  mask      = background only, no vessel pixels
  contrast  = background + the full tree, slightly warped by a smooth
              displacement field (the reference frame is captured at a
              different cardiac phase)
  generated = background + the tree with a fraction of trunk arclength
              erased, some true branches dropped, spurious branches added,
              and artifact noise mixed in

Ground-truth scores are declared functions of the defect parameters:
  vmc = 100 * (1 - break_fraction)
  vbd = 100 * max(0, B - k - 0.5 * s) / B
  oq  = 0.35 * vmc + 0.35 * vbd + 30 * (1 - artifact_amplitude)

The dataset planner draws defect parameters so that all five quality levels
are roughly uniformly covered per metric.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DataError, DefectSpecError, UsageError
from .heads import level_index_of_score

__all__ = [
    "SynthConfig",
    "DefectSpec",
    "Triplet",
    "TripletPlan",
    "ManifestRow",
    "gt_scores",
    "generate_triplet",
    "build_dataset",
    "write_dataset",
    "read_manifest",
    "load_triplet",
    "save_png",
    "load_png",
    "MANIFEST_HEADER",
]

MANIFEST_HEADER = "id,mask_path,contrast_path,generated_path,gt_vmc,gt_vbd,gt_oq,split"


@dataclass(frozen=True)
class SynthConfig:
    # trunk and branches are deliberately distinct ridge classes (deep wide
    # vs shallow thin) so trunk continuity and branch count are separable
    size: int = 64
    trunk_sigma: float = 2.2
    trunk_amp: float = 0.62
    branch_sigma: float = 1.1
    branch_amp: float = 0.40
    spurious_sigma: float = 0.9
    spurious_amp: float = 0.72
    # a dropped branch leaves a faint wide shadow where the generator failed
    # to synthesize it (mode-dropping residue)
    ghost_sigma: float = 4.5
    ghost_amp: float = 0.22
    warp_amplitude: float = 1.0


@dataclass(frozen=True)
class DefectSpec:
    """Controllable degradations of the generated image.

    branch_count is the number of true branches B in the tree; it bounds
    branch_drop_count.
    """

    break_fraction: float = 0.0
    branch_drop_count: int = 0
    spurious_branch_count: int = 0
    artifact_amplitude: float = 0.0
    seed: int = 0
    branch_count: int = 5

    def __post_init__(self):
        if not 0.0 <= self.break_fraction <= 1.0:
            raise DefectSpecError(f"break_fraction {self.break_fraction} outside [0, 1]")
        if self.branch_drop_count < 0:
            raise DefectSpecError("branch_drop_count must be >= 0")
        if self.spurious_branch_count < 0:
            raise DefectSpecError("spurious_branch_count must be >= 0")
        if not 0.0 <= self.artifact_amplitude <= 1.0:
            raise DefectSpecError(
                f"artifact_amplitude {self.artifact_amplitude} outside [0, 1]")
        if self.branch_count < 1:
            raise DefectSpecError("branch_count must be >= 1")
        if self.branch_drop_count > self.branch_count:
            raise DefectSpecError(
                f"cannot drop {self.branch_drop_count} of {self.branch_count} branches")


@dataclass
class Triplet:
    id: str
    mask: np.ndarray
    contrast: np.ndarray
    generated: np.ndarray
    gt: tuple[float, float, float] | None
    split: str = "train"


@dataclass(frozen=True)
class TripletPlan:
    id: str
    spec: DefectSpec
    split: str

    @property
    def gt(self) -> tuple[float, float, float]:
        return gt_scores(self.spec)


def gt_scores(spec: DefectSpec) -> tuple[float, float, float]:
    """Ground-truth (vmc, vbd, oq), each in [0, 100]."""
    vmc = 100.0 * (1.0 - spec.break_fraction)
    b = spec.branch_count
    vbd = 100.0 * max(0.0, b - spec.branch_drop_count
                      - 0.5 * spec.spurious_branch_count) / b
    oq = 0.35 * vmc + 0.35 * vbd + 30.0 * (1.0 - spec.artifact_amplitude)
    return vmc, vbd, oq


# ---------------------------------------------------------------------------
# geometry + rendering
# ---------------------------------------------------------------------------

def _trunk_points(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth top-to-bottom curve, densely sampled; shape (M, 2) as (y, x)."""
    cx = rng.uniform(0.38, 0.62) * size
    a1 = rng.uniform(0.02, 0.06) * size
    a2 = rng.uniform(0.01, 0.03) * size
    f1 = rng.uniform(0.6, 1.1)
    f2 = rng.uniform(1.6, 2.6)
    p1, p2 = rng.uniform(0.0, 2 * math.pi, size=2)
    tilt = rng.uniform(-0.08, 0.08) * size
    t = np.linspace(0.0, 1.0, 256)
    y = 2.0 + t * (size - 5.0)
    x = (cx + tilt * (t - 0.5)
         + a1 * np.sin(2 * math.pi * f1 * t + p1)
         + a2 * np.sin(2 * math.pi * f2 * t + p2))
    return np.stack([y, np.clip(x, 2.0, size - 3.0)], axis=1)


def _branch_points(rng: np.random.Generator, trunk: np.ndarray, size: int,
                   sector: tuple[float, float]) -> np.ndarray:
    """One branch leaving the trunk at a random station.

    Each branch draws its direction from its own angular sector, so the B
    branches of a tree are orientation-distinguishable. Geometry is
    resampled until the whole branch lies in-frame, keeping per-branch
    pixel mass near constant.
    """
    length = rng.uniform(0.28, 0.32) * size
    for _ in range(40):
        i0 = int(rng.uniform(0.12, 0.88) * (len(trunk) - 1))
        p0 = trunk[i0]
        angle = rng.uniform(sector[0] + 0.12, sector[1] - 0.12)
        direction = np.array([math.sin(angle), math.cos(angle)])
        normal = np.array([-direction[1], direction[0]])
        curve = rng.uniform(-0.08, 0.08) * size
        u = np.linspace(0.0, 1.0, 64)[:, None]
        # start slightly off the trunk centerline so the thin ridge is not
        # swallowed by the trunk's wide profile near the attachment
        pts = (p0 + 2.5 * direction) + u * length * direction + (u ** 2) * curve * normal
        if (pts.min() >= 2.0 and pts.max() <= size - 3.0):
            return pts
    return np.clip(pts, 1.0, size - 2.0)


def _spurious_points(rng: np.random.Generator, size: int) -> np.ndarray:
    """A free-floating, anatomically implausible branch segment."""
    p0 = rng.uniform(0.12, 0.88, size=2) * size
    angle = rng.uniform(0.0, 2 * math.pi)
    direction = np.array([math.sin(angle), math.cos(angle)])
    normal = np.array([-direction[1], direction[0]])
    length = rng.uniform(0.26, 0.34) * size
    curve = rng.uniform(-0.1, 0.1) * size
    u = np.linspace(0.0, 1.0, 48)[:, None]
    pts = p0 + u * length * direction + (u ** 2) * curve * normal
    return np.clip(pts, 1.0, size - 2.0)


def _render_polyline(canvas: np.ndarray, points: np.ndarray,
                     sigma: float, amp: float) -> None:
    """Max-composite a Gaussian-profile ridge along the sampled points.

    The 2-D profile is separable, so each splat is an outer product of two
    1-D Gaussians over the local window.
    """
    size = canvas.shape[0]
    r = int(math.ceil(3.0 * sigma))
    inv = 1.0 / (2.0 * sigma * sigma)
    offsets = np.arange(-r, r + 1, dtype=np.float64)
    for py, px in points:
        iy, ix = int(py), int(px)
        y0 = max(0, iy - r)
        y1 = min(size, iy + r + 1)
        x0 = max(0, ix - r)
        x1 = min(size, ix + r + 1)
        if y0 >= y1 or x0 >= x1:
            continue
        gy = np.exp(-((offsets[y0 - iy + r:y1 - iy + r] + iy - py) ** 2) * inv)
        gx = np.exp(-((offsets[x0 - ix + r:x1 - ix + r] + ix - px) ** 2) * inv)
        np.maximum(canvas[y0:y1, x0:x1], amp * gy[:, None] * gx[None, :],
                   out=canvas[y0:y1, x0:x1])


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.64, 0.74)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    field = np.full((size, size), base)
    for _ in range(3):
        amp = rng.uniform(0.008, 0.02)
        fy = rng.uniform(0.4, 1.8)
        fx = rng.uniform(0.4, 1.8)
        phase = rng.uniform(0.0, 2 * math.pi)
        field += amp * np.cos(2 * math.pi * (fy * yy + fx * xx) / size + phase)
    return np.clip(field, 0.5, 0.9)


def _make_warp(rng: np.random.Generator, size: int, amplitude: float):
    """One smooth random displacement field, shared by every polyline of a
    frame so the warped tree stays connected."""
    params = [(rng.uniform(0.3, 1.2), rng.uniform(0.3, 1.2),
               rng.uniform(0.0, 2 * math.pi)) for _ in range(4)]

    def warp(points: np.ndarray) -> np.ndarray:
        y, x = points[:, 0], points[:, 1]
        dy = (np.sin(2 * math.pi * (params[0][0] * y + params[0][1] * x) / size + params[0][2])
              + 0.5 * np.sin(2 * math.pi * (params[1][0] * y - params[1][1] * x) / size + params[1][2]))
        dx = (np.sin(2 * math.pi * (params[2][0] * x + params[2][1] * y) / size + params[2][2])
              + 0.5 * np.sin(2 * math.pi * (params[3][0] * x - params[3][1] * y) / size + params[3][2]))
        disp = np.stack([dy, dx], axis=1) * (amplitude / 1.5)
        return np.clip(points + disp, 1.0, size - 2.0)

    return warp


def _break_trunk(rng: np.random.Generator, trunk: np.ndarray,
                 fraction: float) -> np.ndarray:
    """Erase a contiguous window covering `fraction` of the trunk arclength."""
    if fraction <= 0.0:
        return trunk
    m = len(trunk)
    n_erase = int(round(fraction * m))
    if n_erase >= m:
        return trunk[:0]
    margin = max(1, int(0.04 * m))
    hi = max(margin + 1, m - n_erase - margin)
    start = min(int(rng.integers(margin, hi)), m - n_erase)
    return np.concatenate([trunk[:start], trunk[start + n_erase:]], axis=0)


def generate_triplet(spec: DefectSpec, config: SynthConfig | None = None,
                     triplet_id: str = "", split: str = "train") -> Triplet:
    """Deterministic given ``spec`` (geometry, warp and defect placement all
    derive from spec.seed)."""
    cfg = config or SynthConfig()
    size = cfg.size
    geom_rng, warp_rng, defect_rng, artifact_rng = [
        np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(4)]

    trunk = _trunk_points(geom_rng, size)
    sector_width = 2.0 * math.pi / spec.branch_count
    branches = [_branch_points(geom_rng, trunk, size,
                               (j * sector_width, (j + 1) * sector_width))
                for j in range(spec.branch_count)]

    background = _background(geom_rng, size)
    mask = background.copy()

    # reference frame: full tree, smoothly deformed by one shared field
    warp = _make_warp(warp_rng, size, cfg.warp_amplitude)
    contrast_tree = np.zeros((size, size))
    _render_polyline(contrast_tree, warp(trunk), cfg.trunk_sigma, cfg.trunk_amp)
    for br in branches:
        _render_polyline(contrast_tree, warp(br), cfg.branch_sigma, cfg.branch_amp)
    contrast = np.clip(background - contrast_tree, 0.0, 1.0)

    # generated frame: defective tree plus artifacts
    keep = np.ones(spec.branch_count, dtype=bool)
    if spec.branch_drop_count:
        drop = defect_rng.choice(spec.branch_count, size=spec.branch_drop_count,
                                 replace=False)
        keep[drop] = False
    gen_tree = np.zeros((size, size))
    broken = _break_trunk(defect_rng, trunk, spec.break_fraction)
    if len(broken):
        _render_polyline(gen_tree, broken, cfg.trunk_sigma, cfg.trunk_amp)
    for br, kept in zip(branches, keep):
        if kept:
            _render_polyline(gen_tree, br, cfg.branch_sigma, cfg.branch_amp)
        else:
            _render_polyline(gen_tree, br, cfg.ghost_sigma, cfg.ghost_amp)
    for _ in range(spec.spurious_branch_count):
        _render_polyline(gen_tree, _spurious_points(defect_rng, size),
                         cfg.spurious_sigma, cfg.spurious_amp)

    a = spec.artifact_amplitude
    artifact = np.zeros((size, size))
    if a > 0.0:
        yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        for _ in range(2):
            fy = artifact_rng.uniform(0.8, 2.6)
            fx = artifact_rng.uniform(0.8, 2.6)
            phase = artifact_rng.uniform(0.0, 2 * math.pi)
            artifact += np.cos(2 * math.pi * (fy * yy + fx * xx) / size + phase)
        artifact = a * (0.03 * artifact + 0.06 * artifact_rng.standard_normal((size, size)))
    generated = np.clip(background - gen_tree + artifact, 0.0, 1.0)

    return Triplet(triplet_id, mask, contrast, generated, gt_scores(spec), split)


# ---------------------------------------------------------------------------
# dataset planning: cover all five levels per metric
# ---------------------------------------------------------------------------

_BIN_EDGES = [(0.0, 20.0), (20.0, 40.0), (40.0, 60.0), (60.0, 80.0), (80.0, 100.0)]


def _vbd_options(branch_count: int, max_spurious: int = 3):
    """All reachable (k, s, vbd) combinations for a tree of B branches."""
    options = []
    for k in range(branch_count + 1):
        for s in range(max_spurious + 1):
            vbd = 100.0 * max(0.0, branch_count - k - 0.5 * s) / branch_count
            options.append((k, s, vbd))
    return options


def _pick_vbd_in_bin(rng: np.random.Generator, branch_count: int, level: int):
    lo, hi = _BIN_EDGES[level]
    top_closed = level == 4
    options = [(k, s, v) for k, s, v in _vbd_options(branch_count)
               if (lo <= v < hi) or (top_closed and lo <= v <= hi)]
    if not options:  # cannot happen for branch_count in 4..7, kept defensive
        options = _vbd_options(branch_count)
        options.sort(key=lambda o: abs(o[2] - (lo + hi) / 2))
        options = options[:1]
    k, s, v = options[int(rng.integers(len(options)))]
    return k, s, v


def build_dataset(n_triplets: int, seed: int, split_ratio: float = 0.8) -> list[TripletPlan]:
    """Plan a dataset of defect specs whose gt scores cover every quality
    level with at least ~10% occupancy per metric.

    Half the triplets follow "diagonal" profiles (all three metrics targeted
    at the same level, cycled 0..4, which is always geometrically feasible);
    the other half draw levels independently, which decorrelates the metrics.
    """
    if n_triplets < 10:
        raise UsageError(f"dataset needs at least 10 triplets, got {n_triplets}")
    if not 0.0 < split_ratio < 1.0:
        raise UsageError("split_ratio must be in (0, 1)")
    rng = np.random.default_rng(seed)
    n_train = int(round(n_triplets * split_ratio))
    plans = []
    diagonal_counter = 0
    for i in range(n_triplets):
        branch_count = 5  # fixed reference count keeps the vbd scale uniform
        if i % 2 == 0:
            level = diagonal_counter % 5
            diagonal_counter += 1
            vmc = rng.uniform(_BIN_EDGES[level][0] + 0.5, _BIN_EDGES[level][1] - 0.5)
            k, s, vbd = _pick_vbd_in_bin(rng, branch_count, level)
            base = 0.35 * (vmc + vbd)
            lo = max(_BIN_EDGES[level][0], base)
            hi = min(_BIN_EDGES[level][1], base + 30.0)
            oq = rng.uniform(lo + 1e-6, hi - 1e-6)
        else:
            vmc = rng.uniform(0.5, 99.5)
            k, s, vbd = _pick_vbd_in_bin(rng, branch_count, int(rng.integers(5)))
            base = 0.35 * (vmc + vbd)
            oq = rng.uniform(base, base + 30.0)
        b = 1.0 - vmc / 100.0
        a = float(np.clip(1.0 - (oq - base) / 30.0, 0.0, 1.0))
        spec = DefectSpec(
            break_fraction=b,
            branch_drop_count=k,
            spurious_branch_count=s,
            artifact_amplitude=a,
            seed=int(rng.integers(0, 2 ** 62)),
            branch_count=branch_count,
        )
        split = "train" if i < n_train else "test"
        plans.append(TripletPlan(f"t{i:05d}", spec, split))
    return plans


def level_census(plans: list[TripletPlan]) -> dict[str, list[int]]:
    """Per-metric histogram of gt quality levels (sampler coverage check)."""
    census = {"vmc": [0] * 5, "vbd": [0] * 5, "oq": [0] * 5}
    for plan in plans:
        vmc, vbd, oq = plan.gt
        census["vmc"][level_index_of_score(vmc)] += 1
        census["vbd"][level_index_of_score(vbd)] += 1
        census["oq"][level_index_of_score(oq)] += 1
    return census


# ---------------------------------------------------------------------------
# PNG + manifest I/O
# ---------------------------------------------------------------------------

@dataclass
class ManifestRow:
    id: str
    mask_path: str
    contrast_path: str
    generated_path: str
    gt: tuple[float, float, float] | None
    split: str


def save_png(path, image: np.ndarray) -> None:
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.float64) / 255.0


def write_dataset(plans: list[TripletPlan], out_dir,
                  config: SynthConfig | None = None) -> str:
    """Render all planned triplets to 8-bit PNGs plus a manifest CSV."""
    cfg = config or SynthConfig()
    out_dir = str(out_dir)
    image_dir = os.path.join(out_dir, "images")
    os.makedirs(image_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.csv")
    with open(manifest_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(MANIFEST_HEADER + "\n")
        for plan in plans:
            triplet = generate_triplet(plan.spec, cfg, plan.id, plan.split)
            paths = {}
            for role in ("mask", "contrast", "generated"):
                rel = f"images/{plan.id}_{role}.png"
                save_png(os.path.join(out_dir, rel), getattr(triplet, role))
                paths[role] = rel
            vmc, vbd, oq = plan.gt
            fh.write(f"{plan.id},{paths['mask']},{paths['contrast']},"
                     f"{paths['generated']},{vmc!r},{vbd!r},{oq!r},{plan.split}\n")
    return manifest_path


def read_manifest(path) -> list[ManifestRow]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != MANIFEST_HEADER:
            raise DataError(f"unexpected manifest header: {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 8:
                raise DataError(f"line {lineno}: expected 8 fields, got {len(parts)}")
            gt = None
            if parts[4] or parts[5] or parts[6]:
                try:
                    gt = (float(parts[4]), float(parts[5]), float(parts[6]))
                except ValueError:
                    raise DataError(f"line {lineno}: bad gt scores") from None
            if parts[7] not in ("train", "test"):
                raise DataError(f"line {lineno}: bad split {parts[7]!r}")
            rows.append(ManifestRow(parts[0], parts[1], parts[2], parts[3], gt, parts[7]))
    return rows


def load_triplet(row: ManifestRow, base_dir) -> Triplet:
    base = str(base_dir)
    return Triplet(
        id=row.id,
        mask=load_png(os.path.join(base, row.mask_path)),
        contrast=load_png(os.path.join(base, row.contrast_path)),
        generated=load_png(os.path.join(base, row.generated_path)),
        gt=row.gt,
        split=row.split,
    )
