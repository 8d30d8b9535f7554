"""Image I/O (binary PGM/PPM), resizing, augmentation and a synthetic dataset."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .tensor import interp_matrix

MAX_ANGLE = 12.0


class PnmError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass
class ImageBuffer:
    """8-bit image stored as (h, w, channels)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[..., None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"expected (h, w, 1|3) pixels, got {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError(f"expected uint8 samples, got {px.dtype}")
        self.pixels = px

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def h(self) -> int:
        return self.pixels.shape[0]

    @property
    def w(self) -> int:
        return self.pixels.shape[1]


@dataclass
class SamplePair:
    image: ImageBuffer
    mask: ImageBuffer

    def __post_init__(self):
        if (self.image.h, self.image.w) != (self.mask.h, self.mask.w):
            raise ValueError("image and mask sizes differ")


# --------------------------------------------------------------------------- #
# PNM codec

_WS = b" \t\n\r\v\f"


def _header_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(buf):
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch in _WS:
            pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and buf[pos:pos + 1] not in _WS and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PnmError("truncated header", start)
    return buf[start:pos], pos


def decode_pnm(buf: bytes) -> ImageBuffer:
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"unsupported magic {magic!r}; expected P5 or P6", 0)
    channels = 1 if magic == b"P5" else 3
    pos = 2
    values = []
    for field_name in ("width", "height", "maxval"):
        start = pos
        tok, pos = _header_token(buf, pos)
        if not tok.isdigit():
            raise PnmError(f"malformed {field_name} {tok!r}", start)
        values.append(int(tok))
    width, height, maxval = values
    if width < 1 or height < 1:
        raise PnmError(f"invalid dimensions {width}x{height}", 2)
    if maxval != 255:
        raise PnmError(f"maxval {maxval} unsupported; only 255", pos)
    if pos >= len(buf) or buf[pos:pos + 1] not in _WS:
        raise PnmError("missing whitespace after maxval", pos)
    pos += 1
    need = width * height * channels
    if len(buf) - pos < need:
        raise PnmError(f"truncated payload: need {need} bytes, have {len(buf) - pos}", pos)
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return ImageBuffer(px.reshape(height, width, channels).copy())


def encode_pnm(img: ImageBuffer) -> bytes:
    magic = b"P5" if img.channels == 1 else b"P6"
    return magic + f"\n{img.w} {img.h}\n255\n".encode() + img.pixels.tobytes()


def read_pnm(path) -> ImageBuffer:
    return decode_pnm(Path(path).read_bytes())


def write_pnm(path, img: ImageBuffer) -> None:
    Path(path).write_bytes(encode_pnm(img))


def write_pgm(path, img: ImageBuffer) -> None:
    if img.channels != 1:
        raise ValueError("PGM output needs a single-channel buffer")
    write_pnm(path, img)


# --------------------------------------------------------------------------- #
# geometry

def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def binarize_mask(px: np.ndarray) -> np.ndarray:
    return np.where(px >= 128, 255, 0).astype(np.uint8)


def resize_bilinear(img: ImageBuffer, out_h: int, out_w: int, is_mask: bool = False) -> ImageBuffer:
    """Corner-aligned bilinear resize; masks are re-binarized at 128."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1, got {(out_h, out_w)}")
    if (out_h, out_w) == (img.h, img.w):
        return ImageBuffer(img.pixels.copy())
    ah = interp_matrix(img.h, out_h)
    aw = interp_matrix(img.w, out_w)
    chw = img.pixels.transpose(2, 0, 1).astype(np.float64)
    out = _to_u8(np.matmul(np.matmul(ah, chw), aw.T).transpose(1, 2, 0))
    return ImageBuffer(binarize_mask(out) if is_mask else out)


def hflip(pair: SamplePair) -> SamplePair:
    return SamplePair(ImageBuffer(pair.image.pixels[:, ::-1].copy()),
                      ImageBuffer(pair.mask.pixels[:, ::-1].copy()))


def _rotate_plane(plane: np.ndarray, degrees: float) -> np.ndarray:
    h, w = plane.shape
    th = np.deg2rad(degrees)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = center - rot @ center
    return ndimage.affine_transform(plane, rot, offset=offset, order=1, mode="reflect")


def rotate(pair: SamplePair, degrees: float) -> SamplePair:
    """Rotate about the center with bilinear sampling and reflected borders."""
    if degrees == 0:
        return SamplePair(ImageBuffer(pair.image.pixels.copy()),
                          ImageBuffer(binarize_mask(pair.mask.pixels)))
    img = pair.image.pixels.astype(np.float64)
    out = np.stack([_rotate_plane(img[..., c], degrees) for c in range(img.shape[2])], axis=-1)
    mask = _rotate_plane(pair.mask.pixels[..., 0].astype(np.float64), degrees)
    return SamplePair(ImageBuffer(_to_u8(out)), ImageBuffer(binarize_mask(_to_u8(mask))))


def draw_augmentation(rng: np.random.Generator) -> tuple[bool, float]:
    """Flip with probability 0.5; angle ~ U[0, 12] degrees with a random sign."""
    flip = bool(rng.random() < 0.5)
    angle = float(rng.uniform(0.0, MAX_ANGLE))
    if rng.random() < 0.5:
        angle = -angle
    return flip, angle


def apply_augmentation(pair: SamplePair, flip: bool, angle: float) -> SamplePair:
    if flip:
        pair = hflip(pair)
    return rotate(pair, angle)


def augment(pair: SamplePair, rng: np.random.Generator) -> SamplePair:
    return apply_augmentation(pair, *draw_augmentation(rng))


# --------------------------------------------------------------------------- #
# dataset layout

def list_pairs(root) -> list[tuple[str, Path, Path]]:
    root = Path(root)
    images = sorted((root / "images").glob("*.ppm"))
    if not images:
        raise FileNotFoundError(f"no images/*.ppm under {root}")
    out = []
    for img in images:
        mask = root / "masks" / f"{img.stem}.pgm"
        if not mask.exists():
            raise FileNotFoundError(f"missing mask for {img.name}: {mask}")
        out.append((img.stem, img, mask))
    return out


def load_dataset(root, size: int | None = None) -> list[tuple[str, SamplePair]]:
    pairs = []
    for stem, img_path, mask_path in list_pairs(root):
        img, mask = read_pnm(img_path), read_pnm(mask_path)
        if img.channels != 3 or mask.channels != 1:
            raise ValueError(f"{stem}: expected a 3-channel image and a 1-channel mask")
        mask = ImageBuffer(binarize_mask(mask.pixels))
        if size is not None:
            img = resize_bilinear(img, size, size)
            mask = resize_bilinear(mask, size, size, is_mask=True)
        pairs.append((stem, SamplePair(img, mask)))
    return pairs


def to_arrays(pairs: list[SamplePair]) -> tuple[np.ndarray, np.ndarray]:
    """Stack pairs into a centered float image batch (n,3,h,w) and a {0,1} mask batch (n,1,h,w)."""
    x = np.stack([p.image.pixels.transpose(2, 0, 1) for p in pairs]).astype(np.float64)
    g = np.stack([p.mask.pixels.transpose(2, 0, 1) for p in pairs]) >= 128
    return x / 255.0 - 0.5, g.astype(np.float64)


# --------------------------------------------------------------------------- #
# synthetic data

_PALETTE = np.array([
    [230, 40, 40], [40, 200, 60], [40, 80, 230], [240, 200, 30],
    [220, 60, 220], [30, 210, 220], [250, 130, 20], [245, 245, 245],
], dtype=np.float64)


def _ellipse(yy, xx, cy, cx, ay, ax, theta):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / ax
    v = (-s * dx + c * dy) / ay
    return u * u + v * v <= 1.0


def _distractor(yy, xx, cy, cx, r, kind):
    if kind == 0:
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    if kind == 1:
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    # upward triangle
    return (yy <= cy + r) & (yy - (cy - r) >= 2 * np.abs(xx - cx))


def synth_sample(size: int, rng: np.random.Generator) -> SamplePair:
    """One image: textured background, a two-region salient object, and 0-2
    salient-looking distractors that are labeled background."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = rng.uniform(70, 150, size=3)
    field = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=size / 12.0)
    field /= np.abs(field).max() + 1e-12
    grain = rng.normal(scale=8.0, size=(size, size, 3))
    img = base + 35.0 * field[..., None] + grain

    while True:
        cy, cx = rng.uniform(0.35, 0.65, size=2) * size
        ay, ax = rng.uniform(0.14, 0.3, size=2) * size
        obj = _ellipse(yy, xx, cy, cx, ay, ax, rng.uniform(0, np.pi))
        if 0.05 <= obj.mean() <= 0.5:
            break

    c1, c2 = _PALETTE[rng.choice(len(_PALETTE), size=2, replace=False)]
    phi = rng.uniform(0, 2 * np.pi)
    side = (np.cos(phi) * (xx - cx) + np.sin(phi) * (yy - cy)) > 0
    stripes = (np.floor((xx + yy) / max(2.0, size / 16)) % 2)[..., None]
    region2 = c2 * (0.75 + 0.25 * stripes)
    fill = np.where(side[..., None], c1 + rng.normal(scale=6.0, size=(size, size, 3)), region2)
    img = np.where(obj[..., None], fill, img)

    keepout = ndimage.binary_dilation(obj, iterations=max(1, size // 32))
    for _ in range(int(rng.integers(0, 3))):
        for _attempt in range(20):
            r = rng.uniform(0.05, 0.09) * size
            dy, dx = rng.uniform(r, size - r, size=2)
            shape = _distractor(yy, xx, dy, dx, r, int(rng.integers(0, 3)))
            if not (shape & keepout).any():
                color = _PALETTE[rng.integers(len(_PALETTE))]
                img = np.where(shape[..., None], color, img)
                keepout |= shape
                break

    mask = np.where(obj, 255, 0).astype(np.uint8)
    return SamplePair(ImageBuffer(_to_u8(img)), ImageBuffer(mask))


def synth_dataset(n: int, size: int, seed: int, out_dir) -> Path:
    """Write ``n`` synthetic pairs to ``out_dir/images`` and ``out_dir/masks``."""
    if size % 32:
        raise ValueError(f"size {size} must be divisible by 32")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for i in range(n):
        pair = synth_sample(size, np.random.default_rng([seed, i]))
        write_pnm(out / "images" / f"{i:05d}.ppm", pair.image)
        write_pgm(out / "masks" / f"{i:05d}.pgm", pair.mask)
    return out
