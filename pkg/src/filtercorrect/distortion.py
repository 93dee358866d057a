"""Seedable image distortions: Gaussian/motion/defocus/camera-shake blur and AWGN.

Images are float arrays on the 0-255 scale shaped (C, H, W) or (B, C, H, W).
Blur families correlate every channel with a unit-sum kernel using
edge-replication padding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K

FAMILIES = ("GaussianBlur", "AWGN", "MotionBlur", "DefocusBlur", "CameraShake", "Identity")

# camera-shake generator defaults
SHAKE_STEPS = 64
SHAKE_INERTIA = 0.7
SHAKE_JITTER = 0.6
SHAKE_SIZE = 9


class DistortionError(ValueError):
    """Invalid distortion parameters."""


@dataclass(frozen=True)
class Kernel2D:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
            raise DistortionError(f"kernel must be square with odd side, got shape {w.shape}")
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class DistortionSpec:
    """A distortion family plus its severity.

    ``severity`` is sigma_b for GaussianBlur, sigma_n for AWGN, the box length
    for MotionBlur, the disk radius for DefocusBlur and the kernel index for
    CameraShake. ``seed`` drives the stochastic families.
    """

    family: str
    severity: float = 0.0
    seed: int = 0
    orientation: str = "horizontal"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DistortionError(f"unknown distortion family {self.family!r}; expected one of {FAMILIES}")
        if self.family != "Identity" and not self.severity > 0:
            raise DistortionError(f"{self.family} needs severity > 0, got {self.severity}")
        if self.orientation not in ("horizontal", "vertical"):
            raise DistortionError(f"orientation must be horizontal or vertical, got {self.orientation!r}")

    def to_json(self) -> dict:
        d = {"family": self.family, "severity": self.severity, "seed": self.seed}
        if self.family == "MotionBlur":
            d["orientation"] = self.orientation
        return d

    @classmethod
    def from_json(cls, d) -> DistortionSpec:
        return cls(
            d["family"],
            float(d.get("severity", 0.0)),
            int(d.get("seed", 0)),
            d.get("orientation", "horizontal"),
        )

    def with_seed(self, seed) -> DistortionSpec:
        return DistortionSpec(self.family, self.severity, int(seed), self.orientation)

    @property
    def label(self) -> str:
        if self.family == "Identity":
            return "clean"
        return f"{self.family}:{self.severity:g}"


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def gaussian_kernel(sigma_b: float) -> Kernel2D:
    """Sampled 2-D Gaussian; side is the smallest odd integer >= 4*sigma_b."""
    if not sigma_b > 0:
        raise DistortionError(f"sigma_b must be positive, got {sigma_b}")
    side = math.ceil(4 * sigma_b - 1e-9)
    if side % 2 == 0:
        side += 1
    r = side // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(t**2) / (2 * sigma_b**2))
    w = np.outer(g, g)
    return Kernel2D(w / w.sum())


def _disk_coverage(x0, x1, y0, y1, r):
    """Exact area of {x^2 + y^2 <= r^2} inside the box [x0,x1] x [y0,y1]."""

    def prim(x):  # antiderivative of sqrt(r^2 - x^2)
        x = min(max(x, -r), r)
        return 0.5 * (x * math.sqrt(max(r * r - x * x, 0.0)) + r * r * math.asin(x / r))

    lo, hi = max(x0, -r), min(x1, r)
    if lo >= hi:
        return 0.0
    # h(x) peaks at x = 0, where the circle can be tangent to a box edge
    cuts = {lo, hi} | ({0.0} if lo < 0.0 < hi else set())
    for yy in (y0, y1):
        if abs(yy) < r:
            xc = math.sqrt(r * r - yy * yy)
            for c in (-xc, xc):
                if lo < c < hi:
                    cuts.add(c)
    cuts = sorted(cuts)
    area = 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        m = 0.5 * (a + b)
        h = math.sqrt(max(r * r - m * m, 0.0))
        top_const, bot_const = h >= y1, -h <= y0
        if min(y1, h) <= max(y0, -h):
            continue
        seg = 0.0
        seg += y1 * (b - a) if top_const else prim(b) - prim(a)
        seg -= y0 * (b - a) if bot_const else -(prim(b) - prim(a))
        area += seg
    return area


def disk_kernel(radius: float) -> Kernel2D:
    """Uniform disk; each pixel weighted by the exact fraction of its area inside the disk."""
    if not radius > 0:
        raise DistortionError(f"disk radius must be positive, got {radius}")
    half = max(math.ceil(radius - 0.5), 0)
    side = 2 * half + 1
    w = np.zeros((side, side))
    for i in range(side):
        for j in range(side):
            y, x = i - half, j - half
            w[i, j] = _disk_coverage(x - 0.5, x + 0.5, y - 0.5, y + 0.5, radius)
    return Kernel2D(w / w.sum())


def motion_kernel(length: int, orientation: str = "horizontal") -> Kernel2D:
    """Single-pixel-wide box of ``length`` equal taps inside an odd square."""
    length = int(length)
    if length < 1:
        raise DistortionError(f"motion length must be >= 1, got {length}")
    side = length if length % 2 else length + 1
    w = np.zeros((side, side))
    if orientation == "horizontal":
        w[side // 2, :length] = 1.0 / length
    elif orientation == "vertical":
        w[:length, side // 2] = 1.0 / length
    else:
        raise DistortionError(f"orientation must be horizontal or vertical, got {orientation!r}")
    return Kernel2D(w)


def shake_trajectory(seed, steps=SHAKE_STEPS, inertia=SHAKE_INERTIA, jitter=SHAKE_JITTER, angle=None, speed=None):
    """Constant-speed random walk: heading = inertia * previous velocity + Gaussian jitter."""
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0, 2 * np.pi) if angle is None else float(angle)
    speed = 1.0 if speed is None else float(speed)
    v = speed * np.array([np.cos(theta), np.sin(theta)])
    pos = np.zeros((steps, 2))
    for t in range(1, steps):
        nv = inertia * v + jitter * speed * rng.standard_normal(2)
        n = np.hypot(*nv)
        v = nv / n * speed if n > 0 else v
        pos[t] = pos[t - 1] + v
    return pos


def camera_shake_kernel(
    seed, size=SHAKE_SIZE, steps=SHAKE_STEPS, inertia=SHAKE_INERTIA, jitter=SHAKE_JITTER, angle=None
) -> Kernel2D:
    """Rasterise a random camera trajectory into a ``size`` x ``size`` blur kernel.

    Positions are centred on the grid, shrunk if the path would leave it, and
    splatted bilinearly. Velocity keeps a fraction ``inertia`` of its heading
    per step plus Gaussian ``jitter``; jitter 0 gives a straight line.
    """
    if size % 2 == 0 or size < 1:
        raise DistortionError("camera-shake grid size must be odd and positive")
    pos = shake_trajectory(seed, steps, inertia, jitter, angle)
    pos = pos - 0.5 * (pos.min(axis=0) + pos.max(axis=0))
    half = size // 2
    extent = np.abs(pos).max()
    if extent > half:
        pos = pos * (half / extent)
    w = np.zeros((size, size))
    xs, ys = pos[:, 0] + half, pos[:, 1] + half
    x0, y0 = np.floor(xs).astype(int), np.floor(ys).astype(int)
    fx, fy = xs - x0, ys - y0
    for dx, dy, wt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (1, 0, fx * (1 - fy)),
        (0, 1, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        cx, cy = np.clip(x0 + dx, 0, size - 1), np.clip(y0 + dy, 0, size - 1)
        np.add.at(w, (cy, cx), wt)
    return Kernel2D(w / w.sum())


def shake_seed(spec_seed, index) -> int:
    """Kernel seed for camera-shake kernel number ``index`` under a spec seed."""
    return int(np.random.SeedSequence([int(spec_seed), int(index)]).generate_state(1)[0])


def kernel_for(spec: DistortionSpec) -> Kernel2D | None:
    f = spec.family
    if f == "GaussianBlur":
        return gaussian_kernel(spec.severity)
    if f == "MotionBlur":
        return motion_kernel(int(round(spec.severity)), spec.orientation)
    if f == "DefocusBlur":
        return disk_kernel(spec.severity)
    if f == "CameraShake":
        return camera_shake_kernel(shake_seed(spec.seed, int(round(spec.severity))))
    return None


# ---------------------------------------------------------------------------
# application
# ---------------------------------------------------------------------------


def blur(image, kernel: Kernel2D):
    """Correlate every channel plane with ``kernel`` using edge replication."""
    return K.correlate_replicate(np.asarray(image, dtype=np.float64), kernel.weights)


def awgn(image, sigma_n: float, seed=0):
    """Add i.i.d. N(0, sigma_n^2) noise to every value, then clip to [0, 255]."""
    if sigma_n < 0:
        raise DistortionError(f"sigma_n must be non-negative, got {sigma_n}")
    image = np.asarray(image, dtype=np.float64)
    if sigma_n == 0:
        return image.copy()
    noise = np.random.default_rng(seed).standard_normal(image.shape) * sigma_n
    return np.clip(image + noise, 0.0, 255.0)


def distort(image, spec: DistortionSpec):
    """Apply ``spec`` to ``image``; Identity returns the input unchanged."""
    if spec.family == "Identity":
        return image
    if spec.family == "AWGN":
        return awgn(image, spec.severity, spec.seed)
    return blur(image, kernel_for(spec))


def distort_batch(images, specs):
    """Apply one spec per image of a (B, C, H, W) batch."""
    images = np.asarray(images)
    if len(specs) != len(images):
        raise DistortionError(f"{len(specs)} specs for {len(images)} images")
    out = np.empty(images.shape, dtype=np.float64)
    for k, (img, spec) in enumerate(zip(images, specs)):
        out[k] = distort(img, spec)
    return out


def image_seed(seed, index) -> int:
    """Noise seed for image ``index`` under a run seed."""
    return int(np.random.SeedSequence([int(seed), int(index), 0x5EED]).generate_state(1)[0])


def round_robin_specs(n, family, severities, seed=0, orientation="horizontal"):
    """Assign severities to ``n`` images round-robin over a seeded permutation.

    Every severity is used ``n // len(severities)`` or one more times. Each
    image gets its own noise seed, except for CameraShake where the kernel
    bank is shared by the whole run.
    """
    if not severities:
        raise DistortionError("severity list is empty")
    order = np.random.default_rng(seed).permutation(n)
    specs = [None] * n
    for t, m in enumerate(order):
        sev = severities[t % len(severities)]
        s = int(seed) if family == "CameraShake" else image_seed(seed, m)
        specs[m] = DistortionSpec(family, float(sev), s, orientation)
    return specs
