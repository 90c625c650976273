"""Image helpers: metrics, Gaussian blur, dihedral transforms and PNG I/O.

Images are float tensors in [0, 1] laid out as ``(C, H, W)`` or batched as
``(N, C, H, W)``. PNG files on disk are ``H x W x C``.
"""

from __future__ import annotations

import enum
import math
from functools import lru_cache
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn.functional as F

# Returned by psnr() for identical inputs instead of an infinite value.
PSNR_IDENTICAL = 100.0

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _check_same_shape(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _as_tensor(img):
    if isinstance(img, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(img))
    return img


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio with a peak value of 1.0.

    Returns ``PSNR_IDENTICAL`` when the inputs are equal.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b)
    mse = torch.mean((a.double() - b.double()) ** 2).item()
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / mse)


@lru_cache(maxsize=None)
def _gaussian_1d(size: int, sigma: float) -> tuple:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    return tuple(g / g.sum())


def gaussian_window(size: int, sigma: float, dtype=torch.float32) -> torch.Tensor:
    """Normalized 2-D Gaussian window of shape (size, size)."""
    g = torch.tensor(_gaussian_1d(size, float(sigma)), dtype=torch.float64)
    w = torch.outer(g, g)
    return (w / w.sum()).to(dtype)


def ssim(a: torch.Tensor, b: torch.Tensor, window_size: int = SSIM_WINDOW,
         sigma: float = SSIM_SIGMA, reduce: bool = True) -> torch.Tensor:
    """Mean SSIM over all valid window positions and channels.

    Differentiable. ``reduce=False`` returns one value per batch item.
    """
    _check_same_shape(a, b)
    squeeze = a.dim() == 3
    if squeeze:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    n, c, h, w = a.shape
    if h < window_size or w < window_size:
        raise ValueError(f"image {h}x{w} smaller than SSIM window {window_size}")

    win = gaussian_window(window_size, sigma, a.dtype).to(a.device)
    win = win.expand(c, 1, window_size, window_size)

    def filt(t):
        return F.conv2d(t, win, groups=c)

    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mu_a, mu_b = filt(a), filt(b)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = filt(a * a) - mu_aa
    var_b = filt(b * b) - mu_bb
    cov = filt(a * b) - mu_ab
    num = (2 * mu_ab + c1) * (2 * cov + c2)
    den = (mu_aa + mu_bb + c1) * (var_a + var_b + c2)
    smap = num / den
    if reduce:
        return smap.mean()
    per_item = smap.flatten(1).mean(1)
    return per_item[0] if squeeze else per_item


class BlurKernel:
    """Odd-sized, normalized 2-D Gaussian kernel.

    ``size`` is the side length in pixels; the standard deviation follows
    ``0.3 * ((size - 1) / 2 - 1) + 0.8``.
    """

    def __init__(self, size: int):
        if size < 1 or size % 2 == 0:
            raise ValueError(f"blur kernel size must be odd and positive, got {size}")
        self.size = int(size)
        self.stddev = 0.3 * ((self.size - 1) / 2.0 - 1.0) + 0.8
        self.weights = gaussian_window(self.size, self.stddev, torch.float64)

    def __repr__(self):
        return f"BlurKernel(size={self.size}, stddev={self.stddev:.3f})"


def gaussian_blur(img: torch.Tensor, kernel) -> torch.Tensor:
    """Per-channel 2-D convolution with reflective border padding."""
    if not isinstance(kernel, BlurKernel):
        kernel = BlurKernel(kernel)
    squeeze = img.dim() == 3
    x = img.unsqueeze(0) if squeeze else img
    c = x.shape[1]
    pad = kernel.size // 2
    w = kernel.weights.to(dtype=x.dtype, device=x.device)
    w = w.expand(c, 1, kernel.size, kernel.size)
    if pad:
        x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    out = F.conv2d(x, w, groups=c)
    return out.squeeze(0) if squeeze else out


class Dihedral(enum.IntEnum):
    """The 8 symmetries of the square.

    Member ``(k, f)`` maps an image to ``hflip^f(rot90^k(img))``.
    """

    IDENTITY = 0
    ROT90 = 1
    ROT180 = 2
    ROT270 = 3
    HFLIP = 4
    HFLIP_ROT90 = 5
    HFLIP_ROT180 = 6
    HFLIP_ROT270 = 7

    @property
    def rotations(self) -> int:
        return int(self) % 4

    @property
    def flipped(self) -> bool:
        return int(self) >= 4

    @property
    def changes_orientation(self) -> bool:
        return self.rotations % 2 == 1

    @classmethod
    def make(cls, rotations: int, flipped: bool) -> "Dihedral":
        return cls(rotations % 4 + (4 if flipped else 0))


def dihedral_apply(img: torch.Tensor, t: Dihedral) -> torch.Tensor:
    """Lossless flip/rotation over the last two axes."""
    t = Dihedral(t)
    if t.changes_orientation and img.shape[-1] != img.shape[-2]:
        raise ValueError(f"{t.name} needs a square image, got {tuple(img.shape[-2:])}")
    out = img
    if t.rotations:
        out = torch.rot90(out, t.rotations, dims=(-2, -1))
    if t.flipped:
        out = torch.flip(out, dims=(-1,))
    return out


def dihedral_inverse(t: Dihedral) -> Dihedral:
    t = Dihedral(t)
    if t.flipped:
        # hflip . rot^k is an involution
        return t
    return Dihedral.make(-t.rotations, False)


def dihedral_compose(first: Dihedral, second: Dihedral) -> Dihedral:
    """Element equal to applying ``first`` and then ``second``."""
    first, second = Dihedral(first), Dihedral(second)
    if first.flipped:
        k = first.rotations - second.rotations
    else:
        k = first.rotations + second.rotations
    return Dihedral.make(k, first.flipped != second.flipped)


# Nested fold sets shared by prompt ensembling and self-ensemble inference.
FOLD_SETS = {
    1: (Dihedral.IDENTITY,),
    2: (Dihedral.IDENTITY, Dihedral.HFLIP),
    4: (Dihedral.IDENTITY, Dihedral.HFLIP, Dihedral.ROT180, Dihedral.HFLIP_ROT180),
    8: tuple(Dihedral),
}


def fold_transforms(k: int) -> tuple:
    if k not in FOLD_SETS:
        raise ValueError(f"fold count must be one of {sorted(FOLD_SETS)}, got {k}")
    return FOLD_SETS[k]


# ---------------------------------------------------------------------------
# PNG I/O


def read_image(path) -> np.ndarray:
    """Read an 8- or 16-bit PNG as an ``H x W x C`` float32 array in [0, 1].

    Raises ``ValueError`` if the file cannot be decoded.
    """
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ValueError(f"cannot decode image {path}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ValueError(f"unsupported pixel type {raw.dtype} in {path}")
    if raw.ndim == 2:
        raw = raw[:, :, None]
    elif raw.shape[2] == 4:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGRA2RGB)
    else:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    return raw.astype(np.float32) / scale


def write_image(path, img, bits: int = 8) -> None:
    """Write an ``H x W x C`` (or ``C x H x W`` tensor) image as PNG."""
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().numpy()
        if img.ndim == 3:
            img = img.transpose(1, 2, 0)
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if bits == 8:
        out = np.rint(arr * 255.0).astype(np.uint8)
    elif bits == 16:
        out = np.rint(arr * 65535.0).astype(np.uint16)
    else:
        raise ValueError("bits must be 8 or 16")
    if out.ndim == 3 and out.shape[2] == 3:
        out = cv2.cvtColor(out, cv2.COLOR_RGB2BGR)
    elif out.ndim == 3 and out.shape[2] == 1:
        out = out[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), out):
        raise OSError(f"failed to write {path}")


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """``H x W x C`` array -> ``C x H x W`` float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32))


def to_array(img: torch.Tensor) -> np.ndarray:
    return img.detach().cpu().numpy().transpose(1, 2, 0)
