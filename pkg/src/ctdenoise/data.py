"""Paired low-dose / normal-dose slice handling.

Slices live on disk as header-less little-endian float32 rasters, row-major,
described by a JSON manifest.  Pixel values on disk may be raw HU or already
display-normalized; loading always applies the manifest's window so that
everything downstream sees values in [0, 1].
"""

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_HU_WINDOW = (-300.0, 300.0)
DEFAULT_AIR_THRESHOLD = 0.85

# Give up on patch sampling after this many draws per requested patch.
MAX_ATTEMPTS_PER_PATCH = 1000


class ManifestError(ValueError):
    """A slice manifest failed validation."""


class PatchShortfallWarning(UserWarning):
    """Patch extraction could not fill the requested count."""


@dataclass
class SliceEntry:
    ldct_path: Path
    ndct_path: Path
    width: int
    height: int


@dataclass
class SliceManifest:
    entries: list
    hu_window: tuple

    def __len__(self):
        return len(self.entries)

    def load_pair(self, index):
        """Read one LDCT/NDCT pair and window-normalize both to [0, 1]."""
        entry = self.entries[index]
        ld = read_raster(entry.ldct_path, entry.width, entry.height)
        nd = read_raster(entry.ndct_path, entry.width, entry.height)
        return (
            window_normalize(ld, self.hu_window),
            window_normalize(nd, self.hu_window),
        )


def read_raster(path, width, height):
    """Read a header-less little-endian float32 raster of the given size."""
    data = np.fromfile(path, dtype="<f4")
    if data.size != width * height:
        raise ManifestError(
            f"{path}: file holds {data.size} float32 values, "
            f"expected {width}x{height} = {width * height}"
        )
    return data.reshape(height, width)


def write_raster(path, values):
    values = np.ascontiguousarray(values, dtype="<f4")
    values.tofile(path)


def load_manifest(path):
    """Load and validate a JSON slice manifest.

    Every referenced raster file must exist and decode to its declared
    dimensions.  Errors name the offending entry index.
    """
    path = Path(path)
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}")
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: malformed JSON ({exc})")

    if "hu_window" not in raw or "entries" not in raw:
        raise ManifestError(f"{path}: manifest must have 'hu_window' and 'entries'")
    low, high = (float(v) for v in raw["hu_window"])
    if not low < high:
        raise ManifestError(f"{path}: hu_window low ({low}) must be < high ({high})")
    if not raw["entries"]:
        raise ManifestError(f"{path}: manifest lists no slice pairs")

    root = path.parent
    entries = []
    for i, item in enumerate(raw["entries"]):
        try:
            width, height = int(item["width"]), int(item["height"])
            ld_path = root / item["ldct"]
            nd_path = root / item["ndct"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{path}: entry {i} malformed ({exc})")
        if width < 64 or height < 64:
            raise ManifestError(f"{path}: entry {i} smaller than 64x64")
        for name, p in (("ldct", ld_path), ("ndct", nd_path)):
            if not p.is_file():
                raise ManifestError(f"{path}: entry {i} {name} file missing: {p}")
            n_vals = p.stat().st_size // 4
            if p.stat().st_size % 4 or n_vals != width * height:
                raise ManifestError(
                    f"{path}: entry {i} {name} file {p} holds {n_vals} values, "
                    f"expected {width}x{height}"
                )
        entries.append(SliceEntry(ld_path, nd_path, width, height))
    return SliceManifest(entries=entries, hu_window=(low, high))


def save_manifest(path, entries, hu_window):
    """Write a manifest JSON; paths are stored relative to the manifest."""
    path = Path(path)
    root = path.parent
    items = [
        {
            "ldct": str(Path(e.ldct_path).relative_to(root)),
            "ndct": str(Path(e.ndct_path).relative_to(root)),
            "width": e.width,
            "height": e.height,
        }
        for e in entries
    ]
    with open(path, "w") as fh:
        json.dump({"hu_window": list(hu_window), "entries": items}, fh, indent=1)


def window_normalize(raw, window):
    """Map raw values through a display window onto [0, 1] with clamping."""
    raw = np.asarray(raw, dtype=np.float32)
    if not np.isfinite(raw).all():
        raise ValueError("window_normalize: input contains non-finite values")
    low, high = (float(v) for v in window)
    if not low < high:
        raise ValueError(f"window low ({low}) must be < high ({high})")
    out = (raw - low) / (high - low)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


@dataclass
class PatchPair:
    ldct: np.ndarray
    ndct: np.ndarray
    source_index: int
    origin: tuple


def extract_patches(slice_pair, patch_size, count, air_threshold=DEFAULT_AIR_THRESHOLD,
                    rng_seed=0, source_index=0):
    """Draw square training patches at uniform origins, rejecting air.

    A candidate is discarded when the fraction of NDCT pixels that windowed
    to exactly 0 exceeds ``air_threshold``.  Deterministic for a fixed seed.
    If no acceptable patch can be found within a bounded number of draws,
    the patches found so far are returned with a PatchShortfallWarning.
    """
    ld, nd = slice_pair
    height, width = nd.shape
    if patch_size > min(height, width):
        raise ValueError(f"patch_size {patch_size} exceeds slice side {min(height, width)}")
    if not 0.0 <= air_threshold <= 1.0:
        raise ValueError("air_threshold must be in [0, 1]")

    rng = np.random.default_rng(rng_seed)
    patches = []
    attempts = 0
    max_attempts = MAX_ATTEMPTS_PER_PATCH * count
    while len(patches) < count and attempts < max_attempts:
        attempts += 1
        r = int(rng.integers(0, height - patch_size + 1))
        c = int(rng.integers(0, width - patch_size + 1))
        nd_patch = nd[r:r + patch_size, c:c + patch_size]
        if (nd_patch == 0.0).mean() > air_threshold:
            continue
        ld_patch = ld[r:r + patch_size, c:c + patch_size]
        patches.append(PatchPair(ld_patch.copy(), nd_patch.copy(), source_index, (r, c)))
    if len(patches) < count:
        warnings.warn(
            f"extract_patches: found {len(patches)}/{count} patches after "
            f"{attempts} attempts (air_threshold={air_threshold})",
            PatchShortfallWarning,
        )
    return patches


def _ellipse_mask(rows, cols, cy, cx, ry, rx, theta):
    dy = rows - cy
    dx = cols - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = dx * ct + dy * st
    v = -dx * st + dy * ct
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def synthesize_phantom_pair(width, height, rng_seed, noise_level=0.1, streak_count=4,
                            return_streak_mask=False):
    """Generate a paired (low-dose, normal-dose) phantom slice.

    The normal-dose image is a piecewise-smooth random ellipse phantom in
    [0, 1] with zero (air) background.  The low-dose image adds zero-mean
    Gaussian noise with signal-dependent std noise_level*sqrt(max(nd, 0.05))
    plus ``streak_count`` straight bright/dark lines of amplitude <= 0.3,
    then clamps back to [0, 1].  Bit-reproducible per seed.

    With return_streak_mask=True, also returns the boolean mask of pixels a
    streak materially touched (used by gradient-domain diagnostics).
    """
    if width < 64 or height < 64:
        raise ValueError("phantom must be at least 64x64")
    if noise_level < 0:
        raise ValueError("noise_level must be >= 0")

    rng = np.random.default_rng(rng_seed)
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)

    # Body ellipse on an air background.
    cy = height * (0.5 + rng.uniform(-0.04, 0.04))
    cx = width * (0.5 + rng.uniform(-0.04, 0.04))
    ry = height * rng.uniform(0.30, 0.42)
    rx = width * rng.uniform(0.30, 0.42)
    body = _ellipse_mask(rows, cols, cy, cx, ry, rx, rng.uniform(0, np.pi))
    nd = np.zeros((height, width), dtype=np.float64)
    nd[body] = rng.uniform(0.35, 0.55)

    # Gentle interior shading keeps the piece smooth rather than flat.
    shade = (rng.uniform(-0.05, 0.05) * (cols - cx) / width
             + rng.uniform(-0.05, 0.05) * (rows - cy) / height)
    nd[body] += shade[body]

    # Internal structures: overlapping constant-intensity ellipses.
    for _ in range(int(rng.integers(4, 9))):
        ang = rng.uniform(0, 2 * np.pi)
        rad = rng.uniform(0, 0.55)
        ecy = cy + rad * ry * np.sin(ang)
        ecx = cx + rad * rx * np.cos(ang)
        ery = height * rng.uniform(0.03, 0.16)
        erx = width * rng.uniform(0.03, 0.16)
        blob = _ellipse_mask(rows, cols, ecy, ecx, ery, erx, rng.uniform(0, np.pi))
        nd[blob & body] += rng.uniform(-0.30, 0.35)

    nd = np.clip(nd, 0.0, 1.0)

    noise = rng.standard_normal((height, width)) * noise_level * np.sqrt(np.maximum(nd, 0.05))

    streaks = np.zeros((height, width), dtype=np.float64)
    for _ in range(streak_count):
        theta = rng.uniform(0, np.pi)
        py = rng.uniform(0, height)
        px = rng.uniform(0, width)
        # Perpendicular distance to a full-length line through (py, px).
        dist = (cols - px) * np.cos(theta) + (rows - py) * np.sin(theta)
        sigma = rng.uniform(0.6, 1.6)
        amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.1, 0.3)
        streaks += amp * np.exp(-0.5 * (dist / sigma) ** 2)

    ld = np.clip(nd + noise + streaks, 0.0, 1.0)
    ld32 = ld.astype(np.float32)
    nd32 = nd.astype(np.float32)
    if return_streak_mask:
        return ld32, nd32, np.abs(streaks) >= 0.02
    return ld32, nd32


def write_phantom_dataset(out_dir, count, size, seed, noise_level=0.1, streak_count=4):
    """Materialize a phantom dataset on disk and return the manifest path.

    Raster pairs go to ``out_dir`` with a manifest using the identity window
    (0, 1), since phantoms are already in display units.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pair_seeds = np.random.SeedSequence(seed).generate_state(count)
    entries = []
    for i in range(count):
        ld, nd = synthesize_phantom_pair(size, size, int(pair_seeds[i]),
                                         noise_level, streak_count)
        ld_path = out_dir / f"ld_{i:05d}.raw"
        nd_path = out_dir / f"nd_{i:05d}.raw"
        write_raster(ld_path, ld)
        write_raster(nd_path, nd)
        entries.append(SliceEntry(ld_path, nd_path, size, size))
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest_path, entries, (0.0, 1.0))
    return manifest_path
