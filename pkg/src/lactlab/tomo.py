"""Phantom volumes, limited-angle acquisition and filtered backprojection.

Geometry is 2-D parallel beam applied slice by slice: S detector bins of one
pixel width, angles in degrees measured counter-clockwise from the +x axis.
The projector integrates attenuation, so normalised images are shifted to
``mu = x + 1`` (air -> 0, water -> 1) before projection and shifted back
after reconstruction.
"""
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import InvalidArgument, InvalidState

HU_MIN, HU_MAX = -1000.0, 1000.0


# ----------------------------------------------------------------------------
# data types
# ----------------------------------------------------------------------------

@dataclass
class Volume:
    voxels: np.ndarray                      # (D, S, S) float32
    value_domain: str = "HU"                # "HU" or "normalized"
    spacing: tuple = (2.5, 1.0, 1.0)        # mm, (slice, row, col)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3 or self.voxels.shape[1] != self.voxels.shape[2]:
            raise InvalidArgument(f"volume must be D x S x S, got {self.voxels.shape}")
        if self.value_domain not in ("HU", "normalized"):
            raise InvalidArgument(f"unknown value domain {self.value_domain!r}")

    @property
    def shape(self):
        return self.voxels.shape

    @property
    def depth(self):
        return self.voxels.shape[0]

    @property
    def size(self):
        return self.voxels.shape[1]


@dataclass(frozen=True)
class AngleSpec:
    """Limited-angle acquisition: start angle, angular range, step (degrees).

    Leaving ``theta_s`` unset centres the sweep on 90 degrees.
    """
    theta_r: float
    delta_theta: float = 0.5
    theta_s: float = None

    def __post_init__(self):
        if not (0.0 < self.theta_r <= 180.0):
            raise InvalidArgument(f"theta_r must lie in (0, 180], got {self.theta_r}")
        if self.delta_theta <= 0.0:
            raise InvalidArgument(f"delta_theta must be positive, got {self.delta_theta}")
        if self.theta_s is None:
            object.__setattr__(self, "theta_s", -self.theta_r / 2.0 + 90.0)

    def as_text(self):
        return f"{self.theta_s:g},{self.theta_r:g},{self.delta_theta:g}"


@dataclass
class Sinogram:
    rays: np.ndarray            # (A, S)
    angles: np.ndarray          # degrees, length A
    detector_spacing: float = 1.0

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=np.float64)
        if self.rays.ndim != 2 or self.rays.shape[0] != len(self.angles):
            raise InvalidArgument("sinogram rows must match the angle list")


@dataclass
class Ellipse:
    """One phantom ellipse. Lengths are fractions of the half image size.

    The ellipse is the cross-section of an ellipsoid along the slice axis:
    ``z_center``/``z_half`` (fractions of depth) set where it appears, and
    ``drift`` moves the centre linearly with depth, so consecutive slices
    change smoothly.
    """
    center: tuple
    axes: tuple
    rotation: float
    hu: float
    z_center: float = 0.5
    z_half: float = 10.0
    drift: tuple = (0.0, 0.0)


@dataclass
class PhantomSpec:
    seed: int = 0
    size: int = 64
    n_slices: int = 16
    ellipses: list = None               # None -> random anatomy from seed
    n_organs: tuple = (2, 4)
    n_bone: tuple = (1, 3)
    n_gas: tuple = (1, 2)
    texture_hu: float = 60.0
    spacing_mm: float = 2.5


# ----------------------------------------------------------------------------
# phantoms
# ----------------------------------------------------------------------------

def _random_anatomy(spec, rng):
    u = rng.uniform
    ell = []
    # body: wide ellipse, fully inside the inscribed circle
    ax = u(0.72, 0.84)
    ay = u(0.50, 0.66)
    ell.append(Ellipse((u(-0.03, 0.03), u(-0.03, 0.03)), (ax, ay), u(-6, 6),
                       u(-10.0, 30.0), 0.5, 10.0, (u(-0.04, 0.04), u(-0.04, 0.04))))
    for _ in range(rng.integers(spec.n_organs[0], spec.n_organs[1] + 1)):
        hu = u(-120.0, -60.0) if rng.random() < 0.3 else u(40.0, 90.0)
        ell.append(Ellipse((u(-0.45, 0.45) * ax, u(-0.4, 0.4) * ay),
                           (u(0.12, 0.28), u(0.10, 0.22)), u(0, 180), hu,
                           u(0.2, 0.8), u(0.5, 1.2), (u(-0.1, 0.1), u(-0.1, 0.1))))
    n_bone = rng.integers(spec.n_bone[0], spec.n_bone[1] + 1)
    # spine-like inclusion behind the centre, always present along the whole volume
    ell.append(Ellipse((u(-0.05, 0.05), -ay * u(0.55, 0.7)), (u(0.09, 0.13), u(0.08, 0.11)),
                       u(-10, 10), u(500.0, 1000.0), 0.5, 10.0, (u(-0.03, 0.03), 0.0)))
    for _ in range(n_bone - 1):
        ang = u(0, 2 * np.pi)
        ell.append(Ellipse((0.85 * ax * np.cos(ang), 0.85 * ay * np.sin(ang)),
                           (u(0.04, 0.08), u(0.03, 0.06)), u(0, 180), u(400.0, 1000.0),
                           u(0.2, 0.8), u(0.6, 1.5), (u(-0.05, 0.05), u(-0.05, 0.05))))
    for _ in range(rng.integers(spec.n_gas[0], spec.n_gas[1] + 1)):
        ell.append(Ellipse((u(-0.4, 0.4) * ax, u(-0.2, 0.5) * ay),
                           (u(0.05, 0.12), u(0.04, 0.09)), u(0, 180), u(-1000.0, -400.0),
                           u(0.2, 0.8), u(0.4, 1.0), (u(-0.08, 0.08), u(-0.08, 0.08))))
    return ell


def _paint(img, e, z, grid_x, grid_y):
    dz = (z - e.z_center) / e.z_half
    if abs(dz) >= 1.0:
        return
    shrink = math.sqrt(1.0 - dz * dz)
    cx = e.center[0] + e.drift[0] * (z - 0.5)
    cy = e.center[1] + e.drift[1] * (z - 0.5)
    th = math.radians(e.rotation)
    xr = (grid_x - cx) * math.cos(th) + (grid_y - cy) * math.sin(th)
    yr = -(grid_x - cx) * math.sin(th) + (grid_y - cy) * math.cos(th)
    inside = (xr / (e.axes[0] * shrink)) ** 2 + (yr / (e.axes[1] * shrink)) ** 2 <= 1.0
    img[inside] = e.hu


def _texture(spec, rng, grid_x, grid_y, depth):
    """Fine oriented texture (5-8 px periods), phase drifting slowly with depth."""
    n_waves = 6
    half = spec.size / 2.0
    freqs = rng.uniform(0.12, 0.20, n_waves)  # cycles per pixel
    dirs = rng.uniform(0, np.pi, n_waves)
    phases = rng.uniform(0, 2 * np.pi, n_waves)
    rates = rng.uniform(-0.6, 0.6, n_waves)
    px, py = grid_x * half, grid_y * half
    out = np.zeros((depth,) + grid_x.shape)
    for d in range(depth):
        z = d / max(depth - 1, 1)
        acc = np.zeros(grid_x.shape)
        for f, a, p, r in zip(freqs, dirs, phases, rates):
            acc += np.cos(2 * np.pi * (f * (px * np.cos(a) + py * np.sin(a)) + r * z) + p)
        out[d] = acc / np.sqrt(n_waves / 2.0)
    return out


def generate_phantom(spec=None):
    """Deterministic synthetic abdomen-like HU volume (D x S x S)."""
    spec = spec or PhantomSpec()
    rng = np.random.default_rng(spec.seed)
    S, D = spec.size, spec.n_slices
    coords = (np.arange(S) - (S - 1) / 2.0) / (S / 2.0)
    grid_x = coords[None, :].repeat(S, axis=0)
    grid_y = -coords[:, None].repeat(S, axis=1)
    vol = np.full((D, S, S), HU_MIN, dtype=np.float64)
    if spec.ellipses is None:
        ellipses = _random_anatomy(spec, rng)
        random_mode = True
    else:
        ellipses = list(spec.ellipses)
        random_mode = False
    for d in range(D):
        z = d / max(D - 1, 1)
        for e in ellipses:
            _paint(vol[d], e, z, grid_x, grid_y)
    if random_mode and spec.texture_hu > 0:
        tex = _texture(spec, rng, grid_x, grid_y, D)
        central = (grid_x ** 2 + grid_y ** 2) <= 0.5 ** 2
        soft = (vol > -300.0) & (vol < 300.0) & central[None]
        vol[soft] += spec.texture_hu * tex[soft]
    np.clip(vol, HU_MIN, HU_MAX, out=vol)
    mm = 512 * 1.07 / S
    return Volume(vol.astype(np.float32), "HU", (spec.spacing_mm, mm, mm), {"seed": spec.seed})


def shepp_logan(size):
    """Modified Shepp-Logan head phantom as a normalised [-1, 1] image."""
    # (intensity, a, b, x0, y0, phi) in the usual [0, 1] intensity scale
    table = [(1.0, .69, .92, 0, 0, 0), (-.8, .6624, .874, 0, -.0184, 0),
             (-.2, .11, .31, .22, 0, -18), (-.2, .16, .41, -.22, 0, 18),
             (.1, .21, .25, 0, .35, 0), (.1, .046, .046, 0, .1, 0),
             (.1, .046, .046, 0, -.1, 0), (.1, .046, .023, -.08, -.605, 0),
             (.1, .023, .023, 0, -.606, 0), (.1, .023, .046, .06, -.605, 0)]
    coords = (np.arange(size) - (size - 1) / 2.0) / (size / 2.0)
    gx = coords[None, :].repeat(size, axis=0)
    gy = -coords[:, None].repeat(size, axis=1)
    img = np.zeros((size, size))
    for inten, a, b, x0, y0, phi in table:
        th = math.radians(phi)
        xr = (gx - x0) * math.cos(th) + (gy - y0) * math.sin(th)
        yr = -(gx - x0) * math.sin(th) + (gy - y0) * math.cos(th)
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += inten
    return (2.0 * img - 1.0).astype(np.float32)


# ----------------------------------------------------------------------------
# value domains
# ----------------------------------------------------------------------------

def normalize_hu(v):
    if v.value_domain != "HU":
        raise InvalidState("volume is already normalized")
    vox = np.clip(v.voxels, HU_MIN, HU_MAX) / HU_MAX
    return replace(v, voxels=vox.astype(np.float32), value_domain="normalized", meta=dict(v.meta))


def denormalize_hu(v):
    if v.value_domain != "normalized":
        raise InvalidState("volume is not normalized")
    return replace(v, voxels=(v.voxels.astype(np.float64) * HU_MAX).astype(np.float32),
                   value_domain="HU", meta=dict(v.meta))


# ----------------------------------------------------------------------------
# acquisition and reconstruction
# ----------------------------------------------------------------------------

def make_angle_list(spec):
    """Half-open sweep [theta_s, theta_s + theta_r) in steps of delta_theta."""
    ratio = spec.theta_r / spec.delta_theta
    count = int(math.floor(ratio + 1e-9))
    if abs(ratio - round(ratio)) > 1e-9:
        warnings.warn(f"theta_r={spec.theta_r} is not a multiple of delta_theta={spec.delta_theta}; "
                      f"using {count} projections", stacklevel=2)
    return [spec.theta_s + k * spec.delta_theta for k in range(count)]


def _detector_positions(n, spacing=1.0):
    return (np.arange(n) - (n - 1) / 2.0) * spacing


def radon_forward(image, angles):
    """Parallel-beam line integrals of a square image, one row per angle."""
    image = np.asarray(image)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise InvalidArgument("radon_forward expects a square 2-D image")
    S = image.shape[0]
    t, dt = kernels.ray_samples(S)
    rays = kernels.radon_kernel(image, np.deg2rad(np.asarray(angles, dtype=np.float64)),
                                _detector_positions(S), t, dt)
    return Sinogram(rays, angles, 1.0)


def ramp_filter(n_det):
    """Frequency response of the band-limited Ram-Lak kernel, zero-padded."""
    n = max(64, int(2 ** math.ceil(math.log2(2 * n_det))))
    k = np.concatenate([np.arange(0, n // 2 + 1), np.arange(n // 2 - 1, 0, -1)])
    h = np.zeros(n)
    h[0] = 0.25
    odd = k % 2 == 1
    h[odd] = -1.0 / (np.pi * k[odd]) ** 2
    return np.real(np.fft.fft(h)), n


def filter_projections(rays, spacing=1.0):
    A, D = rays.shape
    resp, n = ramp_filter(D)
    padded = np.zeros((A, n))
    padded[:, :D] = rays
    out = np.real(np.fft.ifft(np.fft.fft(padded, axis=1) * resp[None, :], axis=1))[:, :D]
    return out / spacing


def _view_weights(angles_deg):
    """Angular integration weight per view (radians)."""
    a = np.asarray(angles_deg, dtype=np.float64)
    if len(a) == 1:
        return np.array([np.pi])
    step = np.deg2rad(np.median(np.diff(a)))
    return np.full(len(a), step)


def fbp_reconstruct(sino, size=None):
    """Ram-Lak filtered backprojection over whatever angles are present."""
    if len(sino.angles) == 0:
        raise InvalidArgument("cannot reconstruct from an empty angle list")
    size = size or sino.rays.shape[1]
    if sino.rays.shape[1] != size:
        raise InvalidArgument(f"detector bins {sino.rays.shape[1]} != image size {size}")
    filtered = filter_projections(sino.rays, sino.detector_spacing)
    return kernels.backproject_kernel(filtered, np.deg2rad(sino.angles), _view_weights(sino.angles),
                                      size, sino.detector_spacing)


def simulate_slice(image, angles):
    """Normalised slice -> limited-angle FBP reconstruction, clipped to [-1, 1]."""
    mu = np.asarray(image, dtype=np.float64) + 1.0
    rec = fbp_reconstruct(radon_forward(mu, angles), mu.shape[0]) - 1.0
    return np.clip(rec, -1.0, 1.0)


def simulate_lact(v, spec):
    if v.value_domain != "normalized":
        raise InvalidState("simulate_lact expects a normalized volume")
    angles = make_angle_list(spec)
    out = np.stack([simulate_slice(sl, angles) for sl in v.voxels])
    meta = dict(v.meta)
    meta["angles"] = spec.as_text()
    return replace(v, voxels=out.astype(np.float32), meta=meta)
