"""Image/mask I/O (binary netpbm), synthetic ellipse datasets and augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError
from .losses import derive_boundary, derive_distance
from .tensor import Tensor, no_grad, resample_bilinear, resample_nearest

SPLITS = ("train", "valid", "test")
MULTISCALE_FACTORS = (0.75, 1.0, 1.25)


# ---------------------------------------------------------------------------
# netpbm


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ParseError("unexpected end of header", start)
    return buf[start:pos], pos


def parse_netpbm(buf: bytes) -> np.ndarray:
    """Decode binary P5 (H,W) or P6 (H,W,3) with maxval 255 into uint8."""
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"unsupported magic {magic!r}; need P5 or P6", 0)
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        start = pos - len(tok)
        if not tok.isdigit():
            raise ParseError(f"expected an integer header field, got {tok!r}", start)
        fields.append((int(tok), start))
    (w, w_at), (h, h_at), (maxval, mv_at) = fields
    if w == 0 or h == 0:
        raise ParseError(f"zero image size {w}x{h}", w_at if w == 0 else h_at)
    if maxval != 255:
        raise ParseError(f"only maxval 255 is supported, got {maxval}", mv_at)
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ParseError("missing whitespace after header", pos)
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    if len(buf) - pos < need:
        raise ParseError(f"truncated raster: need {need} bytes, have {len(buf) - pos}", pos)
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


def read_netpbm(path: str | Path) -> np.ndarray:
    return parse_netpbm(Path(path).read_bytes())


def encode_netpbm(arr: np.ndarray) -> bytes:
    a = np.asarray(arr)
    if a.dtype != np.uint8:
        raise ContractError(f"netpbm writer expects uint8, got {a.dtype}")
    if a.ndim == 2:
        magic = b"P5"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    else:
        raise ContractError(f"cannot store array of shape {a.shape} as P5/P6")
    h, w = a.shape[:2]
    return magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(a).tobytes()


def write_netpbm(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_netpbm(arr))


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# samples and manifests


@dataclass
class SampleRecord:
    image: np.ndarray  # (3, H, W) in [0, 1]
    region: np.ndarray  # (H, W) in {0, 1}
    boundary: np.ndarray
    distance: np.ndarray
    sample_id: str = ""

    @classmethod
    def from_arrays(cls, image: np.ndarray, region: np.ndarray, sample_id: str = "") -> "SampleRecord":
        region = (np.asarray(region) > 0).astype(np.float64)
        return cls(np.asarray(image, dtype=np.float64), region,
                   derive_boundary(region), derive_distance(region), sample_id)

    def image_tensor(self) -> Tensor:
        return Tensor(self.image[None])


@dataclass
class Manifest:
    pairs: list[tuple[Path, Path]]
    split: str = "train"

    def __len__(self) -> int:
        return len(self.pairs)

    @classmethod
    def read(cls, path: str | Path, split: str | None = None) -> "Manifest":
        path = Path(path)
        base = path.parent
        pairs = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected 'image<TAB>mask'")
            pairs.append((base / parts[0], base / parts[1]))
        return cls(pairs, split or path.stem)

    def write(self, path: str | Path) -> None:
        path = Path(path)
        base = path.parent.resolve()
        lines = []
        for img, msk in self.pairs:
            lines.append(f"{_rel(img, base)}\t{_rel(msk, base)}\n")
        path.write_text("".join(lines))


def _rel(p: Path, base: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(base))
    except ValueError:
        return str(Path(p).resolve())


def manifest_path(data_dir: str | Path, split: str = "train") -> Path:
    return Path(data_dir) / f"{split}.tsv"


def _resize_image(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if img.shape[1:] == tuple(size):
        return img
    with no_grad():
        return resample_bilinear(Tensor(img[None]), size=size).data[0]


def _resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if mask.shape == tuple(size):
        return mask
    with no_grad():
        return resample_nearest(Tensor(mask[None, None].astype(np.float64)), size=size).data[0, 0]


def load_sample(image_path, mask_path, target_size: tuple[int, int] | None = None) -> SampleRecord:
    img = read_netpbm(image_path).astype(np.float64)
    if img.ndim == 2:
        img = np.repeat(img[None], 3, axis=0)  # grayscale -> 3 channels
    else:
        img = img.transpose(2, 0, 1)
    img /= 255.0
    mask = read_netpbm(mask_path)
    if mask.ndim == 3:
        mask = mask.mean(axis=2)
    mask = mask.astype(np.float64)
    if target_size is not None:
        img = _resize_image(img, target_size)
        mask = _resize_mask(mask, target_size)
    else:
        if img.shape[1:] != mask.shape:
            raise ContractError(f"image {img.shape[1:]} and mask {mask.shape} sizes differ")
    return SampleRecord.from_arrays(img, mask >= 128, Path(image_path).stem)


def load_manifest(manifest: Manifest, target_size=None) -> list[SampleRecord]:
    return [load_sample(i, m, target_size) for i, m in manifest.pairs]


# ---------------------------------------------------------------------------
# synthetic data

FG_RATIO_RANGE = (0.02, 0.6)
NOISE_SIGMA = 0.05
MIN_CONTRAST = 0.2


def _ellipse_mask(h: int, w: int, cy, cx, ry, rx, theta) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    c, s = math.cos(theta), math.sin(theta)
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def synth_sample(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """One image (H,W,3 uint8) and mask (H,W uint8 0/255) with 1-3 ellipses."""
    h = w = size
    while True:
        mask = np.zeros((h, w), dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            ry = rng.uniform(0.08, 0.3) * h
            rx = rng.uniform(0.08, 0.3) * w
            cy = rng.uniform(0.2, 0.8) * h
            cx = rng.uniform(0.2, 0.8) * w
            mask |= _ellipse_mask(h, w, cy, cx, ry, rx, rng.uniform(0, math.pi))
        ratio = mask.mean()
        if FG_RATIO_RANGE[0] < ratio < FG_RATIO_RANGE[1]:
            break
    yy, xx = np.mgrid[0:h, 0:w] / size
    bg_level = rng.uniform(0.15, 0.45)
    fg_level = bg_level + rng.uniform(0.3, 0.45)
    if rng.random() < 0.5:
        bg_level, fg_level = 1.0 - bg_level, 1.0 - fg_level
    image = np.empty((h, w, 3))
    for ch in range(3):
        fx, fy = rng.uniform(1, 4, size=2)
        phase = rng.uniform(0, 2 * math.pi, size=2)
        texture = 0.04 * np.sin(2 * math.pi * fx * xx + phase[0]) * np.cos(2 * math.pi * fy * yy + phase[1])
        tint = rng.uniform(-0.03, 0.03)
        image[..., ch] = np.where(mask, fg_level, bg_level) + texture + tint
    image += rng.normal(0.0, NOISE_SIGMA, size=image.shape)
    return to_uint8(np.clip(image, 0.0, 1.0)), (mask * 255).astype(np.uint8)


def synth_generate(out_dir: str | Path, n: int, size: int, seed: int, split: str = "train") -> Manifest:
    """Write ``n`` samples plus ``<split>.tsv`` and ``<split>_stats.tsv`` to ``out_dir``."""
    if size % 32 or size <= 0:
        raise ContractError(f"size must be a positive multiple of 32, got {size}")
    if n < 0:
        raise ContractError("n must be non-negative")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    pairs = []
    stats = ["id\tfg_ratio\n"]
    for i in range(n):
        img, msk = synth_sample(rng, size)
        sid = f"{split}_{i:04d}"
        ip, mp = out / f"{sid}_img.ppm", out / f"{sid}_mask.pgm"
        write_netpbm(ip, img)
        write_netpbm(mp, msk)
        pairs.append((ip, mp))
        stats.append(f"{sid}\t{np.count_nonzero(msk) / msk.size!r}\n")
    manifest = Manifest(pairs, split)
    manifest.write(manifest_path(out, split))
    (out / f"{split}_stats.tsv").write_text("".join(stats))
    return manifest


def read_stats(data_dir: str | Path, split: str = "train") -> dict[str, float]:
    lines = (Path(data_dir) / f"{split}_stats.tsv").read_text().splitlines()[1:]
    return {sid: float(v) for sid, v in (ln.split("\t") for ln in lines if ln)}


# ---------------------------------------------------------------------------
# augmentation

MAX_ROTATION_DEG = 5.0


def _rotate(arr: np.ndarray, angle_deg: float, order: int) -> np.ndarray:
    """Rotate the trailing (H, W) plane about its centre; zeros fill from outside."""
    h, w = arr.shape[-2:]
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    # inverse map: output pixel -> source coordinate
    sy = c * (yy - cy) - s * (xx - cx) + cy
    sx = s * (yy - cy) + c * (xx - cx) + cx
    if order == 0:
        iy, ix = np.rint(sy).astype(int), np.rint(sx).astype(int)
        ok = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        out = np.zeros_like(arr)
        out[..., ok] = arr[..., iy[ok], ix[ok]]
        return out
    y0, x0 = np.floor(sy).astype(int), np.floor(sx).astype(int)
    ty, tx = sy - y0, sx - x0
    out = np.zeros_like(arr, dtype=np.float64)
    for dy, wy in ((0, 1 - ty), (1, ty)):
        for dx, wx in ((0, 1 - tx), (1, tx)):
            yi, xi = y0 + dy, x0 + dx
            ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            wgt = np.where(ok, wy * wx, 0.0)
            out += wgt * arr[..., np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
    return out


def augment(sample: SampleRecord, rng) -> SampleRecord:
    """Random h/v flips (p=0.5 each) and a rotation in [-5, 5] degrees.

    Shapes never change; boundary and distance targets are re-derived from the
    transformed region mask.
    """
    img, region = sample.image, sample.region
    changed = False
    if rng.random() < 0.5:
        img, region = img[:, :, ::-1], region[:, ::-1]
        changed = True
    if rng.random() < 0.5:
        img, region = img[:, ::-1, :], region[::-1, :]
        changed = True
    angle = float(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG))
    if angle != 0.0:
        img = _rotate(img, angle, order=1)
        region = _rotate(region, angle, order=0)
        changed = True
    if not changed:
        return sample
    return SampleRecord.from_arrays(np.ascontiguousarray(img), np.ascontiguousarray(region), sample.sample_id)


def multiscale_resize(images: np.ndarray, regions: np.ndarray, factor: float) -> tuple[np.ndarray, np.ndarray]:
    """Batch-level rescale to ``round(H*factor/32)*32``; masks use nearest neighbour."""
    h, w = images.shape[2:]
    th = max(32, int(round(h * factor / 32)) * 32)
    tw = max(32, int(round(w * factor / 32)) * 32)
    if (th, tw) == (h, w):
        return images, regions
    with no_grad():
        im = resample_bilinear(Tensor(images), size=(th, tw)).data
        rg = resample_nearest(Tensor(regions), size=(th, tw)).data
    return im, rg


def stack_batch(samples: list[SampleRecord]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples])
    regions = np.stack([s.region[None] for s in samples])
    return images, regions
