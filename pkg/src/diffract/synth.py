"""Synthetic Kikuchi-like patterns, corruption, quality scores and the dataset container.

Clean "master" patterns are sums of straight bands. Each band is the
gnomonic trace of a lattice-plane normal on the detector plane ``z = 1``
(detector coordinates span [-1, 1] along each axis), drawn with a
flat-topped cross profile and Gaussian flanks.
"""

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InvalidConfigError, InvalidInputError
from .pattern import as_pattern, minmax01_normalize

VALID_SIZES = (32, 64, 128)
QUALITY_MIN = 0.02
QUALITY_MAX = 0.98

MAGIC = b"DFRCT1\x00\x00"
VERSION = 1
_HEADER = struct.Struct("<8sIIII")
_RECORD = struct.Struct("<fB")

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class BandSpec:
    normal: tuple
    width: float
    amplitude: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if n.shape != (3,) or abs(np.linalg.norm(n) - 1.0) > 1e-6:
            raise InvalidConfigError("band normal must be a unit 3-vector")
        if np.hypot(n[0], n[1]) < 1e-9:
            raise InvalidConfigError("band normal parallel to the optical axis has no trace")
        if not self.width > 0:
            raise InvalidConfigError("band width must be positive")
        if not 0 < self.amplitude <= 1:
            raise InvalidConfigError("band amplitude must be in (0, 1]")


@dataclass(frozen=True)
class CorruptionSpec:
    gaussian_sigma: float = 0.0
    poisson_scale: float = 0.0
    background_gain: float = 1.0
    background_tilt: float = 0.0

    def __post_init__(self):
        if self.gaussian_sigma < 0:
            raise InvalidConfigError("gaussian_sigma must be >= 0")
        if self.poisson_scale < 0:
            raise InvalidConfigError("poisson_scale must be >= 0")


@dataclass
class Sample:
    x0: np.ndarray
    x: np.ndarray
    q: float
    is_noise: bool = False

    def __post_init__(self):
        if self.x0.shape != self.x.shape:
            raise InvalidInputError("x and x0 must share a shape")
        if not 0.0 <= self.q <= 1.0:
            raise InvalidInputError(f"quality {self.q} outside [0, 1]")
        if self.is_noise and self.q != 0.0:
            raise InvalidInputError("noise samples must have q = 0")


@dataclass(frozen=True)
class DatasetConfig:
    train: int = 200
    val: int = 20
    test: int = 20
    size: int = 64
    noise_frac: float = 0.1
    n_bands: tuple = (4, 9)
    sigma_range: tuple = (0.1, 0.9)
    poisson_prob: float = 0.5
    poisson_scale_range: tuple = (20.0, 200.0)
    gain_range: tuple = (0.6, 1.0)
    tilt_max: float = 0.004

    def __post_init__(self):
        counts = (self.train, self.val, self.test)
        if min(counts) < 0 or sum(counts) == 0 or self.train == 0:
            raise InvalidConfigError("train count must be > 0 and no split may be negative")
        if self.size not in VALID_SIZES:
            raise InvalidConfigError(f"size must be one of {VALID_SIZES}")
        if not 0 <= self.noise_frac <= 1:
            raise InvalidConfigError("noise_frac must be in [0, 1]")
        lo, hi = self.n_bands
        if not 2 <= lo <= hi <= 12:
            raise InvalidConfigError("n_bands range must lie in [2, 12]")

    def counts(self):
        return {"train": self.train, "val": self.val, "test": self.test}


@dataclass
class Dataset:
    samples: list
    splits: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def shape(self):
        return self.samples[0].x.shape

    def split(self, name):
        if name in (None, "all") or not self.splits:
            return Dataset(list(self.samples))
        start, stop = self.splits[name]
        return Dataset(self.samples[start:stop])


def _detector_grid(size):
    c = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    u, v = np.meshgrid(c, c)  # u along columns, v along rows
    return u, v


def band_profile(d, width, amplitude):
    """Flat top of half-width ``width / 2`` with Gaussian flanks (sigma ``width / 4``)."""
    d = np.abs(d)
    hw = width / 2.0
    sigma = width / 4.0
    edge = np.exp(-((d - hw) ** 2) / (2 * sigma**2))
    return amplitude * np.where(d <= hw, 1.0, edge)


def band_distance(normal, u, v):
    """Distance in detector units from (u, v) to the trace of ``normal`` on z = 1."""
    nx, ny, nz = normal
    return (nx * u + ny * v + nz) / np.hypot(nx, ny)


def render_bands(bands, size, background=0.0):
    u, v = _detector_grid(size)
    img = np.full((size, size), float(background))
    for b in bands:
        img += band_profile(band_distance(b.normal, u, v), b.width, b.amplitude)
    return np.clip(img, 0.0, 1.0)


def _random_band(rng, amplitude):
    phi = rng.uniform(0, 2 * np.pi)
    # keep the trace within 0.7 of the detector centre so it crosses the image
    offset = rng.uniform(-0.7, 0.7)
    n = np.array([np.cos(phi), np.sin(phi), offset])
    n /= np.linalg.norm(n)
    return BandSpec(tuple(n), width=float(rng.uniform(0.08, 0.2)), amplitude=float(amplitude))


def random_bands(n_bands, seed):
    rng = np.random.default_rng(seed)
    bands = [_random_band(rng, rng.uniform(0.75, 1.0))]
    bands += [_random_band(rng, rng.uniform(0.15, 0.6)) for _ in range(n_bands - 1)]
    background = float(rng.uniform(0.05, 0.2))
    return bands, background


def generate_master(n_bands, size, seed):
    """Clean band pattern in [0, 1]; the first band is bright enough to reach >= 0.8."""
    if not 2 <= n_bands <= 12:
        raise InvalidConfigError(f"n_bands must be in [2, 12], got {n_bands}")
    if size not in VALID_SIZES:
        raise InvalidConfigError(f"size must be one of {VALID_SIZES}, got {size}")
    bands, background = random_bands(n_bands, seed)
    return render_bands(bands, size, background)


def background_transform(x0, gain, tilt):
    h, w = x0.shape
    ramp = (np.arange(h)[:, None] - (h - 1) / 2.0) + (np.arange(w)[None, :] - (w - 1) / 2.0)
    return gain * x0 + tilt * ramp


def corrupt(x0, spec, seed, clamp=True):
    """Background transform, additive Gaussian noise, optional Poisson resampling, clamp.

    ``clamp=False`` skips only the final clamp to [0, 1].
    """
    x0 = as_pattern(x0, "x0")
    if x0.min() < 0 or x0.max() > 1:
        raise InvalidInputError("x0 must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    y = background_transform(x0, spec.background_gain, spec.background_tilt)
    if spec.gaussian_sigma > 0:
        y = y + rng.normal(0.0, spec.gaussian_sigma, size=y.shape)
    if spec.poisson_scale > 0:
        y = rng.poisson(np.maximum(y, 0.0) * spec.poisson_scale) / spec.poisson_scale
    return np.clip(y, 0.0, 1.0) if clamp else y


def compute_quality(x, x0):
    """Pearson correlation of ``x`` with ``x0``, clamped to [0.02, 0.98]."""
    x = as_pattern(x, "x")
    x0 = as_pattern(x0, "x0")
    if x.shape != x0.shape:
        raise InvalidInputError("shape mismatch")
    if np.std(x0) < 1e-12:
        raise InvalidInputError("quality is undefined for a constant x0")
    if np.std(x) < 1e-12:
        return QUALITY_MIN
    r = np.corrcoef(x.ravel(), x0.ravel())[0, 1]
    return float(np.clip(r, QUALITY_MIN, QUALITY_MAX))


def generate_pure_noise(size, seed):
    if size not in VALID_SIZES:
        raise InvalidConfigError(f"size must be one of {VALID_SIZES}, got {size}")
    rng = np.random.default_rng(seed)
    x = minmax01_normalize(rng.standard_normal((size, size)))
    return Sample(x0=np.zeros((size, size)), x=x, q=0.0, is_noise=True)


def random_corruption(rng, cfg):
    use_poisson = rng.uniform() < cfg.poisson_prob
    return CorruptionSpec(
        gaussian_sigma=float(rng.uniform(*cfg.sigma_range)),
        poisson_scale=float(rng.uniform(*cfg.poisson_scale_range)) if use_poisson else 0.0,
        background_gain=float(rng.uniform(*cfg.gain_range)),
        background_tilt=float(rng.uniform(-cfg.tilt_max, cfg.tilt_max)),
    )


def make_sample(cfg, seed_seq):
    """One observed pattern: corrupted master with min-max normalized observation."""
    s_master, s_noise, s_params = seed_seq.spawn(3)
    prng = np.random.default_rng(s_params)
    n_bands = int(prng.integers(cfg.n_bands[0], cfg.n_bands[1] + 1))
    x0 = generate_master(n_bands, cfg.size, s_master)
    spec = random_corruption(prng, cfg)
    x = minmax01_normalize(corrupt(x0, spec, s_noise))
    return _f32_sample(x0, x, compute_quality(x, x0), False)


def _f32_sample(x0, x, q, is_noise):
    # round everything to storage precision so write/read is lossless
    return Sample(
        x0=np.asarray(x0, dtype=np.float32),
        x=np.asarray(x, dtype=np.float32),
        q=float(np.float32(q)),
        is_noise=bool(is_noise),
    )


def build_samples(cfg, seed):
    """Generate all splits in memory; every split uses its own seed stream."""
    samples = []
    splits = {}
    for split_id, name in enumerate(SPLITS):
        n = cfg.counts()[name]
        root = np.random.SeedSequence([seed, split_id])
        s_layout, s_items = root.spawn(2)
        n_noise = int(round(n * cfg.noise_frac))
        noise_idx = set(np.random.default_rng(s_layout).permutation(n)[:n_noise].tolist())
        start = len(samples)
        for i, ss in enumerate(s_items.spawn(n)):
            if i in noise_idx:
                s = generate_pure_noise(cfg.size, ss)
                samples.append(_f32_sample(s.x0, s.x, 0.0, True))
            else:
                samples.append(make_sample(cfg, ss))
        splits[name] = (start, len(samples))
    return Dataset(samples, splits)


def build_dataset(cfg, seed, path=None):
    """Build the dataset and, when ``path`` is given, write it in container format."""
    ds = build_samples(cfg, seed)
    if path is not None:
        write_dataset(ds.samples, path)
    return ds


def encode_dataset(samples):
    if not samples:
        raise InvalidConfigError("cannot write an empty dataset")
    h, w = samples[0].x.shape
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, VERSION, h, w, len(samples)))
    for s in samples:
        if s.x.shape != (h, w):
            raise InvalidInputError("all samples must share one shape")
        buf.write(_RECORD.pack(s.q, int(s.is_noise)))
        buf.write(np.ascontiguousarray(s.x0, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(s.x, dtype="<f4").tobytes())
    return buf.getvalue()


def write_dataset(samples, path):
    data = encode_dataset(samples)
    with open(path, "wb") as fh:
        fh.write(data)


def decode_dataset(data):
    if len(data) < _HEADER.size:
        raise FormatError("file too short for a dataset header")
    magic, version, h, w, n = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError("bad dataset magic")
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    npx = h * w
    rec = _RECORD.size + 8 * npx
    if len(data) != _HEADER.size + n * rec:
        raise FormatError("dataset size does not match its header")
    samples = []
    off = _HEADER.size
    for _ in range(n):
        q, flag = _RECORD.unpack_from(data, off)
        off += _RECORD.size
        x0 = np.frombuffer(data, dtype="<f4", count=npx, offset=off).reshape(h, w)
        off += 4 * npx
        x = np.frombuffer(data, dtype="<f4", count=npx, offset=off).reshape(h, w)
        off += 4 * npx
        samples.append(Sample(x0=x0.astype(np.float32), x=x.astype(np.float32), q=float(q), is_noise=bool(flag)))
    return samples


def read_dataset(path):
    with open(path, "rb") as fh:
        return Dataset(decode_dataset(fh.read()))
