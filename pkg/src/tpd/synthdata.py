"""Procedural person/garment pairs with exact annotations.

A person is a flat-colour figure (trunk, head, arms) wearing a shirt whose
texture is an affine, nearest-neighbour warp of a separate garment image.
Person geometry and garment appearance are drawn from independent seed
streams, so any person can be re-rendered wearing any garment; that gives
ground truth for unpaired evaluation as well as paired.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

PLANES = ("person", "garment", "parse", "bbox", "pose", "dense", "silhouette")
RGB_PLANES = ("person", "garment", "pose", "dense")
SCHEMA_VERSION = 1

TEXTURE_FAMILIES = ("stripes", "checker", "glyph")
NUM_HUES = 16
GARMENT_BG = (236, 236, 236)

# body-part colours for the dense-pose surrogate
DENSE_COLORS = {"head": (230, 70, 70), "trunk": (70, 200, 90), "arms": (70, 90, 230)}
# one colour per skeleton segment
POSE_COLORS = ((255, 40, 40), (40, 255, 40), (40, 120, 255), (255, 220, 40), (40, 230, 230))

_GLYPHS = (
    ["10001", "01010", "00100", "01010", "10001"],
    ["01110", "10001", "10001", "10001", "01110"],
    ["00100", "00100", "11111", "00100", "00100"],
    ["11111", "00100", "00100", "00100", "00100"],
)


class DatasetError(RuntimeError):
    pass


class MissingFileError(DatasetError):
    pass


class HashMismatchError(DatasetError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    height: int = 32
    width: int = 24
    bbox_margin: int = 1

    def validate(self) -> None:
        if self.height < 16 or self.width < 16:
            raise ValueError(f"image must be at least 16x16, got {self.height}x{self.width}")
        if self.bbox_margin < 0:
            raise ValueError("bbox_margin must be >= 0")

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class TryOnSample:
    person: np.ndarray  # (3,H,W) in [0,1]
    garment: np.ndarray  # (3,H,W)
    parse_mask: np.ndarray  # (1,H,W) {0,1}, worn-garment area
    bbox: np.ndarray  # (1,H,W) {0,1}, expanded torso box
    pose: np.ndarray  # (3,H,W)
    dense: np.ndarray  # (3,H,W)
    garment_silhouette: np.ndarray  # (1,H,W)
    seed: int
    garment_seed: int
    affine: np.ndarray = field(default_factory=lambda: np.eye(2, 3))  # garment frame -> person frame

    @property
    def size(self) -> tuple[int, int]:
        return self.person.shape[1], self.person.shape[2]

    def planes(self) -> dict[str, np.ndarray]:
        return {
            "person": self.person,
            "garment": self.garment,
            "parse": self.parse_mask,
            "bbox": self.bbox,
            "pose": self.pose,
            "dense": self.dense,
            "silhouette": self.garment_silhouette,
        }


# ---- rasterisation --------------------------------------------------------

def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:h, 0:w]
    return xs + 0.5, ys + 0.5


def polygon_mask(vertices: np.ndarray, h: int, w: int) -> np.ndarray:
    """Pixels whose centres lie inside the polygon (even-odd rule)."""
    px, py = _grid(h, w)
    inside = np.zeros((h, w), dtype=bool)
    v = np.asarray(vertices, dtype=np.float64)
    for (x0, y0), (x1, y1) in zip(v, np.roll(v, -1, axis=0)):
        if y0 == y1:
            continue
        crosses = (py >= min(y0, y1)) & (py < max(y0, y1))
        xint = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (px < xint)
    return inside


def disk_mask(center, radius: float, h: int, w: int) -> np.ndarray:
    px, py = _grid(h, w)
    return (px - center[0]) ** 2 + (py - center[1]) ** 2 <= radius**2


def capsule_mask(a, b, radius: float, h: int, w: int) -> np.ndarray:
    """Pixels within ``radius`` of segment ab."""
    px, py = _grid(h, w)
    a = np.asarray(a, dtype=np.float64)
    d = np.asarray(b, dtype=np.float64) - a
    denom = max(float(d @ d), 1e-12)
    s = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / denom, 0.0, 1.0)
    return (px - a[0] - s * d[0]) ** 2 + (py - a[1] - s * d[1]) ** 2 <= radius**2


def _apply_affine(A: np.ndarray, pts) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    return pts @ A[:, :2].T + A[:, 2]


def warp_garment(garment: np.ndarray, silhouette: np.ndarray, affine: np.ndarray, h: int, w: int):
    """Nearest-neighbour warp of the garment into the person frame.

    Returns (warped RGB, covered region). Each covered person pixel copies
    one garment pixel verbatim.
    """
    inv = np.linalg.inv(np.vstack([affine, [0.0, 0.0, 1.0]]))[:2]
    px, py = _grid(h, w)
    q = np.stack([px.ravel(), py.ravel()], axis=1) @ inv[:, :2].T + inv[:, 2]
    gh, gw = silhouette.shape[-2:]
    qx = np.floor(q[:, 0]).astype(np.int64)
    qy = np.floor(q[:, 1]).astype(np.int64)
    valid = (qx >= 0) & (qx < gw) & (qy >= 0) & (qy < gh)
    region = np.zeros(h * w, dtype=bool)
    region[valid] = silhouette[0, qy[valid], qx[valid]] > 0
    warped = np.zeros((3, h * w), dtype=garment.dtype)
    idx = np.flatnonzero(region)
    warped[:, idx] = garment[:, qy[idx], qx[idx]]
    return warped.reshape(3, h, w), region.reshape(h, w)


# ---- garment --------------------------------------------------------------

def _hsv_u8(h: float, s: float, v: float) -> tuple[int, int, int]:
    r, g, b = colorsys.hsv_to_rgb(h, s, v)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def _shirt_polygon(h: int, w: int, hw: float, se: float, sl: float, hem: float, nd: float) -> np.ndarray:
    cx, ys = w / 2.0, 0.18 * h
    nw = 0.1 * w
    return np.array([
        (cx - nw, ys), (cx - hw - se, ys + 0.05 * h), (cx - hw - se, ys + sl), (cx - hw, ys + sl),
        (cx - hw, hem), (cx + hw, hem), (cx + hw, ys + sl), (cx + hw + se, ys + sl),
        (cx + hw + se, ys + 0.05 * h), (cx + nw, ys), (cx, ys + nd),
    ])


def _envelope(h: int, w: int) -> np.ndarray:
    """Rectangle containing every shirt the generator can produce."""
    cx, ys = w / 2.0, 0.18 * h
    half = 0.30 * w + 0.16 * w
    return np.array([(cx - half, ys), (cx + half, ys), (cx + half, 0.92 * h), (cx - half, 0.92 * h)])


def make_garment(garment_seed: int, cfg: GeneratorConfig):
    """Render the garment image; returns (rgb float (3,H,W), silhouette (1,H,W), info)."""
    h, w = cfg.height, cfg.width
    rng = np.random.default_rng([garment_seed, 1])
    hw = rng.uniform(0.24, 0.30) * w
    se = rng.uniform(0.10, 0.16) * w
    sl = rng.uniform(0.12, 0.28) * h
    hem = rng.uniform(0.74, 0.92) * h
    nd = rng.uniform(0.04, 0.10) * h
    sil = polygon_mask(_shirt_polygon(h, w, hw, se, sl, hem, nd), h, w)

    family = TEXTURE_FAMILIES[int(rng.integers(len(TEXTURE_FAMILIES)))]
    hue_idx = int(rng.integers(NUM_HUES))
    c1 = _hsv_u8(hue_idx / NUM_HUES, rng.uniform(0.55, 0.85), rng.uniform(0.6, 0.9))
    second = int(rng.integers(3))
    if second == 0:
        c2 = (245, 245, 245)
    elif second == 1:
        c2 = (35, 35, 40)
    else:
        c2 = _hsv_u8(((hue_idx + NUM_HUES // 2) % NUM_HUES) / NUM_HUES, 0.7, 0.85)

    ys, xs = np.mgrid[0:h, 0:w]
    if family == "stripes":
        period = int(rng.integers(2, 4))
        axis = ys if rng.random() < 0.5 else xs
        pattern = (axis // period) % 2 == 1
    elif family == "checker":
        cell = int(rng.integers(2, 4))
        pattern = ((ys // cell) + (xs // cell)) % 2 == 1
    else:
        glyph = np.array([[ch == "1" for ch in row] for row in _GLYPHS[int(rng.integers(len(_GLYPHS)))]])
        pattern = np.zeros((h, w), dtype=bool)
        gy = int(round(0.18 * h + sl * 0.5 + 1))
        gx = int(round(w / 2.0 - 2.5))
        pattern[gy:gy + 5, gx:gx + 5] = glyph[: max(0, min(5, h - gy)), : max(0, min(5, w - gx))]

    img = np.empty((h, w, 3), dtype=np.uint8)
    img[:] = GARMENT_BG
    img[sil & ~pattern] = c1
    img[sil & pattern] = c2
    rgb = img.transpose(2, 0, 1).astype(np.float32) / 255.0
    info = {"family": family, "hue": hue_idx, "palette": [c1, c2]}
    return rgb, sil[None].astype(np.float32), info


# ---- person ---------------------------------------------------------------

def _person_geometry(seed: int, cfg: GeneratorConfig) -> dict:
    h, w = cfg.height, cfg.width
    rng = np.random.default_rng([seed, 0])
    scale = rng.uniform(0.62, 0.82)
    theta = math.radians(rng.uniform(-10, 10))
    shoulder = np.array([w / 2.0 + rng.uniform(-2.5, 2.5), rng.uniform(0.27, 0.36) * h])
    c, s = math.cos(theta), math.sin(theta)
    lin = scale * np.array([[c, -s], [s, c]])
    origin = np.array([w / 2.0, 0.18 * h])
    affine = np.hstack([lin, (shoulder - lin @ origin)[:, None]])

    def hue_rgb(lo, hi, sat, val):
        return _hsv_u8(rng.uniform(lo, hi), sat, val)

    skin = hue_rgb(0.04, 0.10, rng.uniform(0.3, 0.6), rng.uniform(0.55, 0.95))
    background = hue_rgb(0.0, 1.0, rng.uniform(0.1, 0.35), rng.uniform(0.35, 0.75))
    # forearm angles from vertical; positive swings the hand across the torso
    arm_angles = (math.radians(rng.uniform(-25, 55)), math.radians(rng.uniform(-25, 55)))
    arm_len = rng.uniform(0.28, 0.38) * h
    return {"affine": affine, "skin": skin, "background": background,
            "arm_angles": arm_angles, "arm_len": arm_len, "theta": theta, "scale": scale}


def _body_parts(geo: dict, cfg: GeneratorConfig) -> dict:
    h, w = cfg.height, cfg.width
    A = geo["affine"]
    cx, ys = w / 2.0, 0.18 * h
    trunk = _apply_affine(A, [(cx - 0.28 * w, ys), (cx + 0.28 * w, ys), (cx + 0.25 * w, 1.4 * h), (cx - 0.25 * w, 1.4 * h)])
    neck = _apply_affine(A, [(cx - 0.07 * w, ys - 0.1 * h), (cx + 0.07 * w, ys - 0.1 * h), (cx + 0.07 * w, ys + 0.02 * h), (cx - 0.07 * w, ys + 0.02 * h)])
    head_c = _apply_affine(A, [(cx, ys - 0.2 * h)])[0]
    head_r = 0.16 * h * geo["scale"]
    neck_base = _apply_affine(A, [(cx, ys)])[0]
    hip = _apply_affine(A, [(cx, 0.9 * h)])[0]
    shoulders = _apply_affine(A, [(cx - 0.3 * w, ys + 0.03 * h), (cx + 0.3 * w, ys + 0.03 * h)])
    elbows = _apply_affine(A, [(cx - 0.38 * w, ys + 0.24 * h), (cx + 0.38 * w, ys + 0.24 * h)])
    hands = []
    for inward, elbow, ang in zip((1.0, -1.0), elbows, geo["arm_angles"]):
        hands.append(elbow + geo["arm_len"] * np.array([inward * math.sin(ang), math.cos(ang)]))
    arm_r = 0.055 * w
    return {"trunk": trunk, "neck": neck, "head_c": head_c, "head_r": head_r, "neck_base": neck_base,
            "hip": hip, "shoulders": shoulders, "elbows": elbows, "hands": np.array(hands), "arm_r": arm_r}


def render(person_seed: int, garment_seed: int, cfg: GeneratorConfig) -> TryOnSample:
    """Render person ``person_seed`` wearing the garment of ``garment_seed``."""
    cfg.validate()
    h, w = cfg.height, cfg.width
    geo = _person_geometry(person_seed, cfg)
    parts = _body_parts(geo, cfg)
    garment, sil, _ = make_garment(garment_seed, cfg)
    A = geo["affine"]

    trunk = polygon_mask(parts["trunk"], h, w) | polygon_mask(parts["neck"], h, w)
    upper_arms = np.zeros((h, w), dtype=bool)
    fore_arms = np.zeros((h, w), dtype=bool)
    for sh, el, ha in zip(parts["shoulders"], parts["elbows"], parts["hands"]):
        upper_arms |= capsule_mask(sh, el, parts["arm_r"], h, w)
        fore_arms |= capsule_mask(el, ha, parts["arm_r"], h, w)
    head = disk_mask(parts["head_c"], parts["head_r"], h, w)
    warped, cloth = warp_garment(garment, sil, A, h, w)

    img = np.empty((h, w, 3), dtype=np.uint8)
    img[:] = geo["background"]
    img[trunk | upper_arms] = geo["skin"]
    person = img.transpose(2, 0, 1).astype(np.float32) / 255.0
    person[:, cloth] = warped[:, cloth]
    occluders = head | fore_arms
    person[:, occluders] = (np.array(geo["skin"], dtype=np.float32) / 255.0)[:, None]
    parse = cloth & ~occluders

    _, env = warp_garment(np.ones((3, h, w), np.float32), polygon_mask(_envelope(h, w), h, w)[None], A, h, w)
    bbox = np.zeros((h, w), dtype=bool)
    rows, cols = np.nonzero(env | parse)
    m = cfg.bbox_margin
    bbox[max(rows.min() - m, 0):rows.max() + m + 1, max(cols.min() - m, 0):cols.max() + m + 1] = True

    pose = np.zeros((h, w, 3), dtype=np.uint8)
    segments = [
        [(parts["head_c"], parts["neck_base"])],
        [(parts["neck_base"], parts["hip"])],
        [(parts["shoulders"][0], parts["shoulders"][1])],
        [(parts["shoulders"][0], parts["elbows"][0]), (parts["elbows"][0], parts["hands"][0])],
        [(parts["shoulders"][1], parts["elbows"][1]), (parts["elbows"][1], parts["hands"][1])],
    ]
    for color, segs in zip(POSE_COLORS, segments):
        for a, b in segs:
            pose[capsule_mask(a, b, 0.6, h, w)] = color

    dense = np.zeros((h, w, 3), dtype=np.uint8)
    dense[trunk] = DENSE_COLORS["trunk"]
    dense[upper_arms] = DENSE_COLORS["arms"]
    dense[head] = DENSE_COLORS["head"]
    dense[fore_arms] = DENSE_COLORS["arms"]

    return TryOnSample(
        person=person,
        garment=garment,
        parse_mask=parse[None].astype(np.float32),
        bbox=bbox[None].astype(np.float32),
        pose=pose.transpose(2, 0, 1).astype(np.float32) / 255.0,
        dense=dense.transpose(2, 0, 1).astype(np.float32) / 255.0,
        garment_silhouette=sil,
        seed=int(person_seed),
        garment_seed=int(garment_seed),
        affine=A,
    )


def gen_sample(seed: int, cfg: GeneratorConfig = GeneratorConfig()) -> TryOnSample:
    """Paired sample: the person wears its own garment."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    sample = render(seed, seed, cfg)
    if sample.parse_mask.sum() == 0:
        raise ValueError(f"seed {seed} produced an empty garment area")
    return sample


# ---- disk format ----------------------------------------------------------

def _to_png(arr: np.ndarray, path: Path) -> None:
    u8 = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.shape[0] == 3:
        Image.fromarray(u8.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")
    else:
        Image.fromarray(u8[0], mode="L").save(path, format="PNG")


def _from_png(path: Path, channels: int) -> np.ndarray:
    with Image.open(path) as im:
        u8 = np.asarray(im.convert("RGB" if channels == 3 else "L"))
    if channels == 3:
        return u8.transpose(2, 0, 1).astype(np.float32) / 255.0
    return (u8[None] > 127).astype(np.float32)


def write_dataset(
    samples: Sequence[TryOnSample],
    out_dir,
    cfg: GeneratorConfig,
    splits: Optional[Sequence[str]] = None,
) -> dict:
    """Write PNG planes plus ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = list(splits) if splits is not None else ["train"] * len(samples)
    entries = []
    for i, (sample, split) in enumerate(zip(samples, splits)):
        files = {}
        for plane, arr in sample.planes().items():
            name = f"{i:05d}_{plane}.png"
            _to_png(arr, out / name)
            files[plane] = name
        entries.append({
            "index": i,
            "seed": sample.seed,
            "garment_seed": sample.garment_seed,
            "split": split,
            "affine": [[float(v) for v in row] for row in sample.affine],
            "files": files,
        })
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "image_size": [cfg.height, cfg.width],
        "count": len(samples),
        "generator": asdict(cfg),
        "config_hash": cfg.config_hash(),
        "samples": entries,
    }
    text = json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    (out / "manifest.json").write_text(text, encoding="utf-8")
    return manifest


def read_dataset(data_dir, cfg: Optional[GeneratorConfig] = None):
    """Load every sample listed in the manifest; returns (samples, manifest)."""
    root = Path(data_dir)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise MissingFileError(f"missing manifest file: {mpath}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(f"unsupported manifest schema {manifest.get('schema_version')}")
    stored = GeneratorConfig(**manifest["generator"])
    if stored.config_hash() != manifest["config_hash"]:
        raise HashMismatchError("manifest config_hash does not match its generator block")
    if cfg is not None and cfg.config_hash() != manifest["config_hash"]:
        raise HashMismatchError(f"dataset was generated with config {manifest['config_hash'][:12]}, expected {cfg.config_hash()[:12]}")
    for entry in manifest["samples"]:
        for name in entry["files"].values():
            if not (root / name).is_file():
                raise MissingFileError(f"missing dataset file: {name}")
    samples = []
    for entry in manifest["samples"]:
        planes = {p: _from_png(root / n, 3 if p in RGB_PLANES else 1) for p, n in entry["files"].items()}
        samples.append(TryOnSample(
            person=planes["person"], garment=planes["garment"], parse_mask=planes["parse"],
            bbox=planes["bbox"], pose=planes["pose"], dense=planes["dense"],
            garment_silhouette=planes["silhouette"], seed=entry["seed"],
            garment_seed=entry["garment_seed"], affine=np.array(entry["affine"], dtype=np.float64),
        ))
    if len(samples) != manifest["count"]:
        raise DatasetError(f"manifest count {manifest['count']} != {len(samples)} entries")
    return samples, manifest
