"""Synthetic bouncing-shapes video, frame-directory loading, corruptions.

Frames are float32 arrays in [0, 1], shape (H, W, C); sequences stack them
as (T, H, W, C). Scene motion is linear with elastic boundary reflection,
computed in closed form so frame t is an exact function of the start state.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.fft import dctn, idctn

logger = logging.getLogger(__name__)


@dataclass
class ShapeSpec:
    kind: str  # "disc" or "square"
    center: tuple  # (y, x) at t=0
    velocity: tuple  # (vy, vx) pixels/frame
    radius: int
    intensity: float = 1.0


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    channels: int = 1
    num_shapes: int = 1
    kind: str = "disc"  # "disc", "square" or "mixed"
    radius_range: tuple = (5, 9)
    velocity_range: tuple = (1, 2)
    intensity_range: tuple = (0.6, 1.0)
    length: int = 8
    boundary: str = "reflect"
    seed: int = 0
    shapes: list = None  # explicit ShapeSpec list overrides random draws


def reflect_position(p0, v, t, lo, hi):
    """Closed-form position after t steps of motion with elastic walls."""
    if hi <= lo:
        return lo
    span = hi - lo
    q = (p0 - lo + v * t) % (2 * span)
    return lo + (q if q <= span else 2 * span - q)


def _draw_shapes(spec, rng):
    shapes = []
    for _ in range(spec.num_shapes):
        kind = spec.kind
        if kind == "mixed":
            kind = "disc" if rng.integers(0, 2) == 0 else "square"
        r = int(rng.integers(spec.radius_range[0], spec.radius_range[1] + 1))
        if 2 * r + 1 > min(spec.height, spec.width):
            raise ValueError(f"shape radius {r} too large for canvas")
        cy = int(rng.integers(r, spec.height - r))
        cx = int(rng.integers(r, spec.width - r))
        v = rng.integers(spec.velocity_range[0], spec.velocity_range[1] + 1, size=2)
        sign = rng.integers(0, 2, size=2) * 2 - 1
        lo, hi = spec.intensity_range
        intensity = float(rng.uniform(lo, hi))
        shapes.append(
            ShapeSpec(kind, (cy, cx), (int(v[0] * sign[0]), int(v[1] * sign[1])), r, intensity)
        )
    return shapes


def _render(shapes, t, H, W):
    frame = np.zeros((H, W), dtype=np.float32)
    yy, xx = np.mgrid[0:H, 0:W]
    for s in shapes:
        r = s.radius
        cy = reflect_position(s.center[0], s.velocity[0], t, r, H - 1 - r)
        cx = reflect_position(s.center[1], s.velocity[1], t, r, W - 1 - r)
        if s.kind == "disc":
            d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
            cover = np.clip(r + 0.5 - d, 0.0, 1.0)
        elif s.kind == "square":
            d = np.maximum(np.abs(yy - cy), np.abs(xx - cx))
            cover = np.clip(r + 0.5 - d, 0.0, 1.0)
        else:
            raise ValueError(f"unknown shape kind {s.kind!r}")
        frame = np.maximum(frame, (cover * s.intensity).astype(np.float32))
    return frame


def generate_scene(spec: SceneSpec):
    """Deterministic (T, H, W, C) float32 sequence for the given spec."""
    if spec.boundary != "reflect":
        raise ValueError(f"unknown boundary rule {spec.boundary!r}")
    if spec.length < 1:
        raise ValueError("length must be >= 1")
    rng = np.random.default_rng(spec.seed)
    shapes = spec.shapes if spec.shapes is not None else _draw_shapes(spec, rng)
    for s in shapes:
        r = s.radius
        if 2 * r + 1 > min(spec.height, spec.width):
            raise ValueError(f"shape radius {r} too large for canvas")
    frames = np.stack(
        [_render(shapes, t, spec.height, spec.width) for t in range(spec.length)]
    )
    return np.repeat(frames[..., None], spec.channels, axis=-1)


def load_sequences(root, size=None, channels=1, min_length=1):
    """Load per-sequence image directories under ``root``.

    Each subdirectory holds numerically ordered image files (zero-padded
    names sort correctly). Frames are converted to ``channels`` channels,
    resized to ``size`` (H, W) when given, normalized to [0, 1]. Sequences
    shorter than ``min_length`` are skipped with a warning.
    """
    import pathlib

    root = pathlib.Path(root)
    if not root.is_dir():
        raise OSError(f"dataset root {root} is not a directory")
    sequences = []
    skipped = 0
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(
            p for p in sub.iterdir()
            if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")
        )
        if len(files) < min_length:
            skipped += 1
            logger.warning(
                "skipping %s: %d frames < required %d", sub.name, len(files), min_length
            )
            continue
        frames = []
        for f in files:
            try:
                img = Image.open(f)
                img = img.convert("L" if channels == 1 else "RGB")
            except Exception as e:
                raise OSError(f"unreadable image file {f}") from e
            if size is not None:
                img = img.resize((size[1], size[0]), Image.BILINEAR)
            a = np.asarray(img, dtype=np.float32) / 255.0
            if channels == 1:
                a = a[..., None]
            frames.append(a)
        sequences.append(np.stack(frames))
    if skipped:
        logger.warning("skipped %d sequence(s) shorter than %d frames", skipped, min_length)
    return sequences


@dataclass
class CorruptionSpec:
    """Input corruption parameters; neutral values give exact identity."""

    kind: str  # gaussian_blur | fragment_blur | additive_noise | compression
    sigma: float = 0.0
    fragments: int = 0
    fragment_size: int = 16
    snr_db: float = math.inf
    quality: int = 100


# standard JPEG luminance quantization table
_QUANT_BASE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def _blur(frames, sigma):
    out = np.empty_like(frames)
    for t in range(frames.shape[0]):
        for c in range(frames.shape[-1]):
            out[t, :, :, c] = ndimage.gaussian_filter(frames[t, :, :, c], sigma)
    return out


def _block_dct_quantize(frames, quality):
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    qm = np.clip(np.floor((_QUANT_BASE * scale + 50) / 100), 1, 255) / 255.0
    T, H, W, C = frames.shape
    ph = (-H) % 8
    pw = (-W) % 8
    padded = np.pad(frames, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="edge")
    Hp, Wp = padded.shape[1:3]
    out = np.empty_like(padded)
    for t in range(T):
        for c in range(C):
            blocks = padded[t, :, :, c].reshape(Hp // 8, 8, Wp // 8, 8).astype(np.float64)
            coef = dctn(blocks, axes=(1, 3), norm="ortho")
            coef = np.round(coef / qm[None, :, None, :]) * qm[None, :, None, :]
            rec = idctn(coef, axes=(1, 3), norm="ortho")
            out[t, :, :, c] = rec.reshape(Hp, Wp).astype(np.float32)
    return np.clip(out[:, :H, :W, :], 0.0, 1.0)


def corrupt(frames, spec: CorruptionSpec, seed=0):
    """Apply one corruption to a (T, H, W, C) sequence; clamped to [0, 1]."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 4:
        raise ValueError("frames must be (T, H, W, C)")
    if spec.kind == "gaussian_blur":
        if spec.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if spec.sigma == 0:
            return frames.copy()
        return np.clip(_blur(frames, spec.sigma), 0.0, 1.0)
    if spec.kind == "fragment_blur":
        if spec.fragments < 0 or spec.fragment_size < 1:
            raise ValueError("invalid fragment parameters")
        if spec.fragments == 0:
            return frames.copy()
        sigma = spec.sigma if spec.sigma > 0 else 2.0
        blurred = _blur(frames, sigma)
        out = frames.copy()
        rng = np.random.default_rng(seed)
        T, H, W, _ = frames.shape
        fh = min(spec.fragment_size, H)
        fw = min(spec.fragment_size, W)
        for t in range(T):
            for _ in range(spec.fragments):
                y = int(rng.integers(0, H - fh + 1))
                x = int(rng.integers(0, W - fw + 1))
                out[t, y : y + fh, x : x + fw] = blurred[t, y : y + fh, x : x + fw]
        return np.clip(out, 0.0, 1.0)
    if spec.kind == "additive_noise":
        if spec.snr_db == math.inf:
            return frames.copy()
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal(frames.shape)
        sig_power = float(np.sum(frames.astype(np.float64) ** 2))
        if sig_power == 0:
            raise ValueError("cannot set an SNR for an all-zero signal")

        # clamping removes noise energy, so solve for the scale that makes
        # the post-clamp empirical SNR hit the target (SNR is monotone
        # decreasing in the scale)
        def snr_at(s):
            y = np.clip(frames + (s * noise).astype(np.float32), 0.0, 1.0)
            return measure_snr(frames, y)

        noise_power = float(np.sum(noise**2))
        lo = math.sqrt(sig_power / (noise_power * 10 ** (spec.snr_db / 10)))
        hi = lo
        for _ in range(40):
            if snr_at(hi) < spec.snr_db:
                break
            hi *= 2.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if snr_at(mid) > spec.snr_db:
                lo = mid
            else:
                hi = mid
        scale = 0.5 * (lo + hi)
        return np.clip(frames + (scale * noise).astype(np.float32), 0.0, 1.0)
    if spec.kind == "compression":
        if not 1 <= spec.quality <= 100:
            raise ValueError("quality must be in [1, 100]")
        if spec.quality == 100:
            return frames.copy()
        return _block_dct_quantize(frames, spec.quality)
    raise ValueError(f"unknown corruption kind {spec.kind!r}")


def measure_snr(clean, corrupted):
    """Empirical SNR in dB of ``corrupted`` against ``clean``."""
    clean = np.asarray(clean, dtype=np.float64)
    corrupted = np.asarray(corrupted, dtype=np.float64)
    noise = np.sum((corrupted - clean) ** 2)
    if noise == 0:
        return math.inf
    return 10.0 * math.log10(np.sum(clean**2) / noise)


def scene_spec_to_kv(spec: SceneSpec):
    """Serialize a SceneSpec as flat key-value text."""
    pairs = [
        ("height", spec.height), ("width", spec.width), ("channels", spec.channels),
        ("num_shapes", spec.num_shapes), ("kind", spec.kind),
        ("radius_min", spec.radius_range[0]), ("radius_max", spec.radius_range[1]),
        ("velocity_min", spec.velocity_range[0]), ("velocity_max", spec.velocity_range[1]),
        ("intensity_min", spec.intensity_range[0]), ("intensity_max", spec.intensity_range[1]),
        ("length", spec.length), ("boundary", spec.boundary), ("seed", spec.seed),
    ]
    return "".join(f"{k} = {v}\n" for k, v in pairs)


def scene_spec_from_kv(text):
    fields = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        fields[k.strip()] = v.strip()
    return SceneSpec(
        height=int(fields["height"]), width=int(fields["width"]),
        channels=int(fields["channels"]), num_shapes=int(fields["num_shapes"]),
        kind=fields["kind"],
        radius_range=(int(fields["radius_min"]), int(fields["radius_max"])),
        velocity_range=(int(fields["velocity_min"]), int(fields["velocity_max"])),
        intensity_range=(float(fields.get("intensity_min", 0.6)),
                         float(fields.get("intensity_max", 1.0))),
        length=int(fields["length"]), boundary=fields["boundary"],
        seed=int(fields["seed"]),
    )
