"""Procedural SAR-like coastline scenes.

A scene is built in four steps:

1. a fractal height field (diamond-square) plus a linear trend is
   thresholded at the quantile that yields the requested land fraction;
2. per-class mean backscatter (dB) is assigned, with a smooth texture field
   and a per-scene calibration offset shared by both classes;
3. icebergs with land-like brightness are stamped into open water (the mask
   keeps labelling them sea);
4. intensities receive multiplicative Gamma(L, 1/L) speckle and are
   converted back to dB.

All randomness comes from a Philox counter-based generator keyed by the
scene seed, so scenes are reproducible bit for bit.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt

from .masks import derive_edges
from .raster import read_raster, write_pgm, write_raster

DB_FLOOR = 1e-6
DEM_FACTOR = 16


@dataclass
class GenParams:
    size: int = 96
    land_fraction_range: tuple[float, float] = (0.2, 0.8)
    roughness: float = 0.8
    trend: float = 2.5
    looks: float = 3.0
    land_db: tuple[float, float] = (-8.0, -17.0)
    sea_db: tuple[float, float] = (-16.0, -25.0)
    calibration_spread_db: float = 1.5
    texture_db: float = 1.5
    iceberg_count_range: tuple[int, int] = (0, 6)
    iceberg_radius_range: tuple[float, float] = (1.5, 4.0)
    with_dem: bool = False
    dem_scale_m: float = 60.0
    dem_noise_m: float = 5.0
    pixel_size_m: float = 40.0

    def validate(self) -> None:
        if self.size <= 0 or self.size % 32:
            raise ValueError(f"scene size must be a positive multiple of 32, got {self.size}")
        lo, hi = self.land_fraction_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("land_fraction_range must satisfy 0 <= lo <= hi <= 1")
        clo, chi = self.iceberg_count_range
        if not 0 <= clo <= chi:
            raise ValueError("iceberg_count_range must be well ordered and non-negative")
        rlo, rhi = self.iceberg_radius_range
        if not 0 < rlo <= rhi:
            raise ValueError("iceberg_radius_range must be well ordered and positive")
        if self.looks < 1:
            raise ValueError("speckle looks must be >= 1")
        if self.roughness <= 0:
            raise ValueError("roughness must be positive")
        if len(self.land_db) != 2 or len(self.sea_db) != 2:
            raise ValueError("land_db and sea_db need one value per channel (HH, HV)")

    @classmethod
    def from_dict(cls, d: dict) -> GenParams:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generator keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        p = cls(**d)
        p.validate()
        return p

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class Scene:
    sar: np.ndarray  # 2 x H x W, dB
    mask: np.ndarray  # H x W uint8, 1 = land
    edge: np.ndarray  # H x W uint8
    dem: np.ndarray | None  # 1 x H/16 x W/16, metres
    seed: int
    pixel_size_m: float = 40.0
    icebergs: np.ndarray | None = None  # H x W bool footprint, sea-labelled
    meta: dict = field(default_factory=dict)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed))


def diamond_square(n: int, roughness: float, rng: np.random.Generator) -> np.ndarray:
    """(n+1) x (n+1) midpoint-displacement surface, n a power of two.

    Displacement amplitude is multiplied by 2**-roughness at every halving of
    the step, so larger roughness gives smoother fields.
    """
    if n < 1 or n & (n - 1):
        raise ValueError("n must be a power of two")
    g = np.zeros((n + 1, n + 1))
    g[0 :: n, 0 :: n] = rng.standard_normal((2, 2))
    step, scale = n, 1.0
    while step > 1:
        half = step // 2
        # diamond: square centres from their four corners
        c = g[0:-1:step, 0:-1:step] + g[step::step, 0:-1:step] + g[0:-1:step, step::step] + g[step::step, step::step]
        m = c.shape[0]
        g[half::step, half::step] = c / 4 + scale * rng.standard_normal((m, m))
        # square: edge midpoints from their (up to four) neighbours
        pad = np.pad(g, half, constant_values=np.nan)
        for r0, c0 in ((0, half), (half, 0)):
            rows = np.arange(r0, n + 1, step)
            cols = np.arange(c0, n + 1, step)
            rr, cc = np.meshgrid(rows + half, cols + half, indexing="ij")
            nb = np.stack([pad[rr - half, cc], pad[rr + half, cc], pad[rr, cc - half], pad[rr, cc + half]])
            g[np.ix_(rows, cols)] = np.nanmean(nb, axis=0) + scale * rng.standard_normal(rr.shape)
        scale *= 2.0 ** -roughness
        step = half
    return g


def _smooth_field(size: int, roughness: float, rng: np.random.Generator) -> np.ndarray:
    n = 1 << (size - 1).bit_length()
    f = diamond_square(n, roughness, rng)[:size, :size]
    f = f - f.mean()
    sd = f.std()
    return f / sd if sd > 0 else f


def land_mask(params: GenParams, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    s = params.size
    field_ = _smooth_field(s, params.roughness, rng)
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:s, 0:s] / (s - 1) * 2 - 1
    ramp = xx * np.cos(theta) + yy * np.sin(theta)
    field_ = field_ + params.trend * ramp
    frac = rng.uniform(*params.land_fraction_range)
    if frac >= 1.0:
        return np.ones((s, s), np.uint8), frac
    if frac <= 0.0:
        return np.zeros((s, s), np.uint8), frac
    thr = np.quantile(field_, 1.0 - frac)
    mask = (field_ > thr).astype(np.uint8)
    return mask, frac


def _stamp_icebergs(mask: np.ndarray, params: GenParams, rng: np.random.Generator) -> np.ndarray:
    s = mask.shape[0]
    bergs = np.zeros_like(mask, dtype=bool)
    count = int(rng.integers(params.iceberg_count_range[0], params.iceberg_count_range[1] + 1))
    if count == 0 or mask.all():
        return bergs
    dist_to_land = distance_transform_edt(mask == 0)
    yy, xx = np.mgrid[0:s, 0:s]
    for _ in range(count):
        r = rng.uniform(*params.iceberg_radius_range)
        aspect = rng.uniform(0.6, 1.0)
        ok = np.flatnonzero(dist_to_land.ravel() > r + 2)
        if ok.size == 0:
            break
        ci, cj = divmod(int(ok[rng.integers(ok.size)]), s)
        foot = ((yy - ci) / (r * aspect)) ** 2 + ((xx - cj) / r) ** 2 <= 1.0
        bergs |= foot & (mask == 0)
    return bergs


def generate_scene(params: GenParams, seed: int) -> Scene:
    params.validate()
    rng = make_rng(seed)
    s = params.size
    mask, frac = land_mask(params, rng)
    bergs = _stamp_icebergs(mask, params, rng)

    offset = rng.normal(0.0, params.calibration_spread_db)
    sar = np.empty((2, s, s), np.float32)
    for ch in range(2):
        texture = params.texture_db * _smooth_field(s, 1.0, rng)
        db = np.where(mask == 1, params.land_db[ch], params.sea_db[ch]) + offset + texture
        db = np.where(bergs, params.land_db[ch] + offset + texture, db)
        speckle = rng.gamma(params.looks, 1.0 / params.looks, size=(s, s))
        intensity = 10.0 ** (db / 10.0) * speckle
        sar[ch] = 10.0 * np.log10(np.maximum(intensity, DB_FLOOR))

    dem = None
    if params.with_dem:
        dem = _coarse_dem(mask, params, rng)
    return Scene(
        sar=sar,
        mask=mask,
        edge=derive_edges(mask),
        dem=dem,
        seed=seed,
        pixel_size_m=params.pixel_size_m,
        icebergs=bergs,
        meta={"land_fraction": float(frac), "calibration_offset_db": float(offset)},
    )


def _coarse_dem(mask: np.ndarray, params: GenParams, rng: np.random.Generator) -> np.ndarray:
    s = mask.shape[0]
    elev = params.dem_scale_m * np.sqrt(distance_transform_edt(mask)) * (mask == 1)
    f = DEM_FACTOR
    coarse = elev.reshape(s // f, f, s // f, f).mean(axis=(1, 3))
    noisy = coarse + rng.normal(0.0, params.dem_noise_m, coarse.shape)
    coarse = np.where(coarse > 0, np.maximum(noisy, 0.0), 0.0)
    return coarse[None].astype(np.float32)


@dataclass
class Tile:
    sar: np.ndarray
    mask: np.ndarray
    edge: np.ndarray
    dem: np.ndarray | None
    y: int
    x: int


def tile_offsets(extent: int, tile_size: int, overlap: float) -> list[int]:
    if tile_size > extent:
        raise ValueError(f"tile size {tile_size} exceeds extent {extent}")
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap must be in [0, 1)")
    stride = max(1, int(round(tile_size * (1.0 - overlap))))
    offs = []
    o = 0
    while o + tile_size < extent:
        offs.append(o)
        o += stride
    offs.append(extent - tile_size)
    return offs


def tile(scene: Scene, tile_size: int, overlap: float) -> list[Tile]:
    """Cut a scene into overlapping square tiles, anchoring the last row and
    column to the image edge so every pixel is covered."""
    _, h, w = scene.sar.shape
    tiles = []
    for y in tile_offsets(h, tile_size, overlap):
        for x in tile_offsets(w, tile_size, overlap):
            dem = None
            if scene.dem is not None:
                if y % DEM_FACTOR or x % DEM_FACTOR or tile_size % DEM_FACTOR:
                    raise ValueError("tile grid must align with the 1/16 DEM grid")
                f = DEM_FACTOR
                dem = scene.dem[:, y // f : (y + tile_size) // f, x // f : (x + tile_size) // f]
            tiles.append(Tile(
                scene.sar[:, y : y + tile_size, x : x + tile_size],
                scene.mask[y : y + tile_size, x : x + tile_size],
                scene.edge[y : y + tile_size, x : x + tile_size],
                dem, y, x,
            ))
    return tiles


# ---------------------------------------------------------------------------
# on-disk dataset
# ---------------------------------------------------------------------------

MANIFEST = "manifest.json"


def write_dataset(
    out_dir,
    params: GenParams,
    n_train: int,
    n_val: int,
    seed: int,
    previews: bool = True,
    workers: int = 1,
) -> Path:
    """Generate ``n_train + n_val`` scenes under ``out_dir`` and write the manifest.

    Scene ``i`` uses seed ``seed * 1_000_003 + i`` so splits never share scenes.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [(seed * 1_000_003 + i) % 2**63 for i in range(n_train + n_val)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            scenes = list(pool.map(generate_scene, [params] * len(seeds), seeds))
    else:
        scenes = [generate_scene(params, s) for s in seeds]

    entries = []
    for i, (sc, sd) in enumerate(zip(scenes, seeds)):
        split = "train" if i < n_train else "val"
        name = f"scene_{i:03d}"
        files = {"sar": sc.sar, "mask": sc.mask, "edge": sc.edge}
        if sc.dem is not None:
            files["dem"] = sc.dem
        for role, arr in files.items():
            rel = f"{name}_{role}.ras"
            write_raster(out / rel, arr)
            entries.append({"scene": name, "split": split, "role": role, "seed": sd, "path": rel})
        if previews:
            write_pgm(out / f"{name}_hh.pgm", sc.sar[0])
            write_pgm(out / f"{name}_mask.pgm", sc.mask)
    manifest = {
        "format": "hedunet-dataset/1",
        "pixel_size_m": params.pixel_size_m,
        "generator": params.to_dict(),
        "entries": entries,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out / MANIFEST


def load_dataset(data_dir, split: str | None = None) -> list[Scene]:
    root = Path(data_dir)
    manifest = json.loads((root / MANIFEST).read_text())
    grouped: dict[str, dict] = {}
    for e in manifest["entries"]:
        if split is not None and e["split"] != split:
            continue
        g = grouped.setdefault(e["scene"], {"seed": e["seed"], "split": e["split"]})
        g[e["role"]] = read_raster(root / e["path"])
    scenes = []
    for name in sorted(grouped):
        g = grouped[name]
        mask = g["mask"][0]
        scenes.append(Scene(
            sar=g["sar"], mask=mask, edge=g["edge"][0], dem=g.get("dem"),
            seed=g["seed"], pixel_size_m=manifest["pixel_size_m"], meta={"name": name, "split": g["split"]},
        ))
    return scenes
