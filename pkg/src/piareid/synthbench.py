"""Synthetic cross-modality person benchmark.

Identity is geometry: three fixed-anchor rectangles (head, torso, legs)
whose per-identity heights and widths are the only stable cue.  Clothing is
appearance: each (identity, outfit) pair owns a color triple and stripe
period painted over the torso and leg regions.  Visible renders show the
colors; infrared renders collapse to a bright body intensity with clothing
contrast compressed toward it, stored as three identical channels.  The
result: clothing is a strong shortcut in the visible domain and nearly
absent in infrared, while shape transfers across both.

All randomness flows through ``numpy.random.default_rng`` seeded from the
config seed plus stream tags, so byte-identical datasets come from equal
configs.
"""

from __future__ import annotations

import csv
import hashlib
import io
import os
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import pnm

VISIBLE = "V"
INFRARED = "I"
MODALITIES = (VISIBLE, INFRARED)
SPLIT_TRAIN = "train"
SPLIT_TEST = "test"

COUPLING_COUPLED = "coupled"
COUPLING_DECOUPLED = "decoupled"

MANIFEST_NAME = "manifest.csv"
MANIFEST_HEADER = ["path", "identity", "clothing", "modality", "split"]

# rendering constants (fractions of canvas height/width)
#
# The size ranges are deliberately narrow: identities must overlap enough
# that body geometry is a subtle cue, while outfit color stays a glaring
# one.  A model that leans on color fails across the modality gap; one
# that reads geometry transfers.
_HEAD_TOP, _TORSO_TOP, _LEGS_TOP = 0.08, 0.30, 0.66
_HEAD_H, _HEAD_W = (0.10, 0.18), (0.22, 0.42)
_TORSO_H, _TORSO_W = (0.23, 0.33), (0.44, 0.80)
_LEGS_H, _LEGS_W = (0.21, 0.29), (0.30, 0.58)

# every image re-draws each region at a slightly different scale (aspect
# ratio preserved), so no identity is a fixed pixel template
_JITTER_SCALE = 0.15

_BACKGROUND = np.array([0.09, 0.10, 0.11])
_SKIN = np.array([0.82, 0.66, 0.52])
# every identity wears the same neutral trouser tone: the legs region carries
# body geometry only, so clothing stays confined to the torso and a spatial
# mask can separate the two signals
_LEGS_V = np.array([0.26, 0.27, 0.30])
_COLOR_LOW, _COLOR_HIGH = 0.40, 0.95
_DARK_BAND = 0.2            # dark stripe = this fraction of the outfit color
_STRIPE_PERIODS = (2, 3, 4)
# Outfits draw their color from a small shared palette instead of a fresh
# random color, so several identities collide on every color.  Outfit color
# alone therefore cannot identify a person, only narrow the field — which
# keeps it a tempting shortcut without making it a per-identity code.
_PALETTE_SIZE = 6
_IR_BODY = 0.85
_IR_CLOTHING_CONTRAST = 0.15  # infrared keeps this fraction of clothing contrast

_STREAM_IDENTITY = 101
_STREAM_OUTFIT = 202
_STREAM_IMAGE = 303
_STREAM_PROBE = 404


class GenConfigError(ValueError):
    """Raised for unusable generator settings."""


class ManifestError(ValueError):
    """Raised when a manifest file fails validation."""


@dataclass(frozen=True)
class GenConfig:
    n_identities: int = 48
    images_per_identity_per_modality: int = 12
    image_height: int = 64
    image_width: int = 32
    outfits_per_identity: int = 2
    clothing_modality_coupling: str = COUPLING_COUPLED
    noise_level: float = 0.02
    split_ratio: str = "2:1"
    seed: int = 0

    def validate(self) -> None:
        if self.n_identities < 2:
            raise GenConfigError(
                f"need at least 2 identities to split, got {self.n_identities}"
            )
        if self.images_per_identity_per_modality < 1:
            raise GenConfigError("need at least one image per identity per modality")
        if self.image_height < 16 or self.image_width < 8:
            raise GenConfigError(
                f"canvas {self.image_height}x{self.image_width} is too small to render"
            )
        if self.outfits_per_identity < 2:
            raise GenConfigError(
                f"need at least 2 outfits per identity, got {self.outfits_per_identity}"
            )
        if self.outfits_per_identity > _PALETTE_SIZE:
            raise GenConfigError(
                f"an identity cannot wear more outfits than the palette has "
                f"colors ({self.outfits_per_identity} > {_PALETTE_SIZE})"
            )
        if self.clothing_modality_coupling not in (COUPLING_COUPLED, COUPLING_DECOUPLED):
            raise GenConfigError(
                f"coupling must be '{COUPLING_COUPLED}' or '{COUPLING_DECOUPLED}', "
                f"got {self.clothing_modality_coupling!r}"
            )
        if not 0.0 <= self.noise_level < 0.2:
            raise GenConfigError(f"noise level {self.noise_level} outside [0, 0.2)")
        self.split_counts()

    def split_counts(self) -> tuple[int, int]:
        """(train identities, test identities) from the a:b ratio."""
        parts = self.split_ratio.split(":")
        if len(parts) != 2:
            raise GenConfigError(f"split ratio must look like '2:1', got {self.split_ratio!r}")
        try:
            a, b = int(parts[0]), int(parts[1])
        except ValueError as exc:
            raise GenConfigError(f"split ratio must be integral, got {self.split_ratio!r}") from exc
        if a < 1 or b < 1:
            raise GenConfigError(f"split ratio parts must be positive, got {self.split_ratio!r}")
        n_train = (self.n_identities * a) // (a + b)
        n_train = min(max(n_train, 1), self.n_identities - 1)
        return n_train, self.n_identities - n_train

    def canonical_text(self) -> str:
        lines = [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"


def config_fingerprint(cfg: GenConfig) -> str:
    return hashlib.sha256(cfg.canonical_text().encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# latent factors and rendering


def identity_factors(cfg: GenConfig, identity: int) -> dict:
    """Per-identity body geometry in pixels."""
    rng = np.random.default_rng([cfg.seed, _STREAM_IDENTITY, identity])
    h, w = cfg.image_height, cfg.image_width

    def region(top_frac, h_range, w_range):
        height = max(1, round(rng.uniform(*h_range) * h))
        width = max(1, round(rng.uniform(*w_range) * w))
        top = round(top_frac * h)
        left = (w - width) // 2
        return {"top": top, "left": left, "height": height, "width": width}

    return {
        "head": region(_HEAD_TOP, _HEAD_H, _HEAD_W),
        "torso": region(_TORSO_TOP, _TORSO_H, _TORSO_W),
        "legs": region(_LEGS_TOP, _LEGS_H, _LEGS_W),
    }


def color_palette(cfg: GenConfig) -> np.ndarray:
    """The dataset-wide outfit colors, shape [_PALETTE_SIZE, 3]."""
    rng = np.random.default_rng([cfg.seed, _STREAM_OUTFIT])
    return rng.uniform(_COLOR_LOW, _COLOR_HIGH, size=(_PALETTE_SIZE, 3))


def _outfit_color_index(cfg: GenConfig, identity: int, outfit: int) -> int:
    # an identity never repeats a palette color across its outfits, so each
    # draw rotates past the colors its earlier outfits settled on
    taken: set[int] = set()
    index = 0
    for k in range(outfit + 1):
        rng = np.random.default_rng([cfg.seed, _STREAM_OUTFIT, identity, k])
        index = int(rng.integers(_PALETTE_SIZE))
        while index in taken:
            index = (index + 1) % _PALETTE_SIZE
        taken.add(index)
    return index


def outfit_factors(cfg: GenConfig, identity: int, outfit: int) -> dict:
    """Per-(identity, outfit) clothing appearance."""
    rng = np.random.default_rng([cfg.seed, _STREAM_OUTFIT, identity, outfit])
    rng.integers(_PALETTE_SIZE)  # keep this stream aligned with the color draw
    color = color_palette(cfg)[_outfit_color_index(cfg, identity, outfit)]
    period = int(rng.choice(_STRIPE_PERIODS))
    return {"color": color, "stripe_period": period}


def _jittered_geometry(cfg: GenConfig, geometry: dict,
                       rng: np.random.Generator) -> dict:
    """Rescale each region by one per-image factor, keeping its aspect ratio."""
    h, w = cfg.image_height, cfg.image_width
    out = {}
    for name in ("head", "torso", "legs"):
        region = geometry[name]
        factor = 1.0 + rng.uniform(-_JITTER_SCALE, _JITTER_SCALE)
        height = max(1, min(h, round(region["height"] * factor)))
        width = max(1, min(w, round(region["width"] * factor)))
        top = min(max(region["top"], 0), h - height)
        left = (w - width) // 2
        out[name] = {"top": top, "left": left, "height": height, "width": width}
    return out


def _paint_stripes(canvas: np.ndarray, region: dict, bright, dark, period: int) -> None:
    top, left = region["top"], region["left"]
    height, width = region["height"], region["width"]
    rows = np.arange(height)
    banded = (rows // period) % 2 == 1
    block = np.where(
        banded[None, :, None],
        np.asarray(dark)[:, None, None],
        np.asarray(bright)[:, None, None],
    )
    canvas[:, top : top + height, left : left + width] = block


def render_sample(cfg: GenConfig, identity: int, outfit: int, modality: str,
                  image_index: int) -> np.ndarray:
    """One [3, H, W] float64 render in [0, 1]."""
    if modality not in MODALITIES:
        raise ValueError(f"modality must be one of {MODALITIES}, got {modality!r}")
    rng = np.random.default_rng(
        [cfg.seed, _STREAM_IMAGE, identity, MODALITIES.index(modality), image_index]
    )
    geometry = _jittered_geometry(cfg, identity_factors(cfg, identity), rng)
    outfit_f = outfit_factors(cfg, identity, outfit)
    h, w = cfg.image_height, cfg.image_width
    canvas = np.empty((3, h, w))
    color = outfit_f["color"]
    dark = _DARK_BAND * color
    def fill(region: dict, value: np.ndarray) -> None:
        canvas[
            :, region["top"] : region["top"] + region["height"],
            region["left"] : region["left"] + region["width"],
        ] = value[:, None, None]

    if modality == VISIBLE:
        canvas[:] = _BACKGROUND[:, None, None]
        fill(geometry["head"], _SKIN)
        fill(geometry["legs"], _LEGS_V)
        _paint_stripes(canvas, geometry["torso"], color, dark, outfit_f["stripe_period"])
    else:
        # infrared: body glows, clothing contrast compresses toward body heat
        bg = float(_BACKGROUND.mean())
        canvas[:] = bg
        fill(geometry["head"], np.full(3, _IR_BODY))
        fill(geometry["legs"], np.full(3, _IR_BODY))
        bright_ir = _IR_BODY + _IR_CLOTHING_CONTRAST * (float(color.mean()) - _IR_BODY)
        dark_ir = _IR_BODY + _IR_CLOTHING_CONTRAST * (float(dark.mean()) - _IR_BODY)
        _paint_stripes(
            canvas, geometry["torso"],
            np.full(3, bright_ir), np.full(3, dark_ir),
            outfit_f["stripe_period"],
        )
    if modality == VISIBLE:
        canvas += rng.normal(0.0, cfg.noise_level, size=(3, h, w))
    else:
        canvas += rng.normal(0.0, cfg.noise_level, size=(h, w))[None, :, :]
    return np.clip(canvas, 0.0, 1.0)


def quantize(image: np.ndarray) -> np.ndarray:
    """[3, H, W] floats in [0, 1] to [H, W, 3] uint8."""
    return np.round(image * 255.0).astype(np.uint8).transpose(1, 2, 0)


def clothing_contrast_ratio(cfg: GenConfig, identity: int, outfit: int = 0) -> float:
    """Torso-pixel std in visible over infrared, same identity and outfit."""

    def torso_slices(modality: str) -> tuple[slice, slice]:
        # reproduce the probe image's own jitter draws to find its torso
        rng = np.random.default_rng(
            [cfg.seed, _STREAM_IMAGE, identity, MODALITIES.index(modality), _STREAM_PROBE]
        )
        torso = _jittered_geometry(cfg, identity_factors(cfg, identity), rng)["torso"]
        return (
            slice(torso["top"], torso["top"] + torso["height"]),
            slice(torso["left"], torso["left"] + torso["width"]),
        )

    vis = render_sample(cfg, identity, outfit, VISIBLE, _STREAM_PROBE)
    ir = render_sample(cfg, identity, outfit, INFRARED, _STREAM_PROBE)
    vis_rows, vis_cols = torso_slices(VISIBLE)
    ir_rows, ir_cols = torso_slices(INFRARED)
    vis_std = float(vis[:, vis_rows, vis_cols].std())
    ir_std = float(ir[0, ir_rows, ir_cols].std())
    return vis_std / max(ir_std, 1e-12)


def _outfit_for(cfg: GenConfig, modality: str, image_index: int) -> int:
    if cfg.clothing_modality_coupling == COUPLING_COUPLED:
        return 0 if modality == VISIBLE else 1
    return image_index % cfg.outfits_per_identity


# ---------------------------------------------------------------------------
# dataset and manifest


@dataclass(frozen=True)
class ManifestRow:
    path: str
    identity: int
    clothing: int
    modality: str
    split: str


@dataclass
class Sample:
    pixels: np.ndarray  # [3, H, W] float64 in [0, 1]
    identity: int
    clothing: int
    modality: str
    split: str
    path: str


class Manifest:
    def __init__(self, base_dir: Path, rows: list[ManifestRow], fingerprint: str):
        self.base_dir = Path(base_dir)
        self.rows = rows
        self.fingerprint = fingerprint
        self._pixel_cache: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.rows)

    def rows_for_split(self, split: str) -> list[int]:
        return [i for i, row in enumerate(self.rows) if row.split == split]

    def identities(self, split: str | None = None) -> np.ndarray:
        picked = [
            row.identity for row in self.rows if split is None or row.split == split
        ]
        return np.unique(picked)

    def load_pixels(self, index: int) -> np.ndarray:
        cached = self._pixel_cache.get(index)
        if cached is None:
            row = self.rows[index]
            raw = pnm.read_ppm(self.base_dir / row.path)
            cached = raw.astype(np.float64).transpose(2, 0, 1) / 255.0
            self._pixel_cache[index] = cached
        return cached

    def sample(self, index: int) -> Sample:
        row = self.rows[index]
        return Sample(
            pixels=self.load_pixels(index),
            identity=row.identity,
            clothing=row.clothing,
            modality=row.modality,
            split=row.split,
            path=row.path,
        )


def generate_dataset(cfg: GenConfig, out_dir, *, overwrite: bool = False) -> Manifest:
    """Render every sample, write images plus manifest, return the manifest."""
    cfg.validate()
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise FileExistsError(
            f"output directory {out} is not empty; pass overwrite to reuse it"
        )
    out.mkdir(parents=True, exist_ok=True)

    n_train, _ = cfg.split_counts()
    rows: list[ManifestRow] = []
    for identity in range(cfg.n_identities):
        split = SPLIT_TRAIN if identity < n_train else SPLIT_TEST
        for modality in MODALITIES:
            folder = out / "images" / modality / f"{identity:04d}"
            folder.mkdir(parents=True, exist_ok=True)
            for idx in range(cfg.images_per_identity_per_modality):
                outfit = _outfit_for(cfg, modality, idx)
                image = render_sample(cfg, identity, outfit, modality, idx)
                rel = f"images/{modality}/{identity:04d}/{idx:03d}.ppm"
                pnm.write_ppm(out / rel, quantize(image))
                rows.append(ManifestRow(
                    path=rel,
                    identity=identity,
                    clothing=identity * cfg.outfits_per_identity + outfit,
                    modality=modality,
                    split=split,
                ))

    fingerprint = config_fingerprint(cfg)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for row in rows:
        writer.writerow([row.path, row.identity, row.clothing, row.modality, row.split])
    buffer.write(f"# fingerprint={fingerprint}\n")
    tmp_path = out / (MANIFEST_NAME + ".tmp")
    tmp_path.write_text(buffer.getvalue(), encoding="utf-8", newline="")
    os.replace(tmp_path, out / MANIFEST_NAME)
    return Manifest(out, rows, fingerprint)


def load_manifest(path) -> Manifest:
    """Read and validate a manifest; ``path`` is the csv or its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"no manifest at {path}")
    base_dir = path.parent
    rows: list[ManifestRow] = []
    fingerprint = ""
    with open(path, "r", encoding="utf-8", newline="") as handle:
        lines = handle.read().splitlines()
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    data_lines: list[tuple[int, str]] = []
    for number, line in enumerate(lines, start=1):
        if line.startswith("#"):
            if line.startswith("# fingerprint="):
                fingerprint = line.split("=", 1)[1].strip()
            continue
        if line.strip():
            data_lines.append((number, line))
    header = next(csv.reader([data_lines[0][1]]))
    if header != MANIFEST_HEADER:
        raise ManifestError(
            f"{path}:{data_lines[0][0]}: header {header} != {MANIFEST_HEADER}"
        )
    for number, line in data_lines[1:]:
        record = next(csv.reader([line]))
        if len(record) != 5:
            raise ManifestError(f"{path}:{number}: expected 5 columns, got {len(record)}")
        rel, identity_s, clothing_s, modality, split = record
        try:
            identity, clothing = int(identity_s), int(clothing_s)
        except ValueError as exc:
            raise ManifestError(f"{path}:{number}: non-integer label") from exc
        if modality not in MODALITIES:
            raise ManifestError(f"{path}:{number}: bad modality {modality!r}")
        if split not in (SPLIT_TRAIN, SPLIT_TEST):
            raise ManifestError(f"{path}:{number}: bad split {split!r}")
        if identity < 0 or clothing < 0:
            raise ManifestError(f"{path}:{number}: negative label")
        if not (base_dir / rel).is_file():
            raise ManifestError(f"{path}:{number}: missing image {rel}")
        rows.append(ManifestRow(rel, identity, clothing, modality, split))
    if not rows:
        raise ManifestError(f"{path}: no data rows")
    identities = np.unique([row.identity for row in rows])
    if not np.array_equal(identities, np.arange(identities.size)):
        raise ManifestError(f"{path}: identity labels are not dense from 0")
    for split in (SPLIT_TRAIN, SPLIT_TEST):
        if not any(row.split == split for row in rows):
            raise ManifestError(f"{path}: split {split!r} is empty")
    return Manifest(base_dir, rows, fingerprint)
