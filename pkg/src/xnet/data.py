"""Image IO, dataset layout, unpaired sampling and synthetic task generators.

The native on-disk format is binary PPM (P6) so round trips are bit-exact;
PNG is accepted on ingest as a convenience (via Pillow).  Grayscale masks use
binary PGM (P5).  A dataset root looks like

    <root>/trainA/*.ppm
    <root>/trainB/*.ppm
    <root>/masksB/*.pgm      (optional, segmentation ground truth)
    <root>/manifest.txt      (one relative path per line; '#' lines carry
                              generator metadata for synthetic sets)

Pixel values map to model range via x/127.5 - 1; the inverse clamps to
[0, 255] and rounds half-up, so 0.0 lands on 128.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .tensor import Tensor

__all__ = [
    "DataError",
    "MAX_SIDE",
    "decode_ppm",
    "encode_ppm",
    "decode_pgm",
    "encode_pgm",
    "read_image",
    "write_image",
    "normalize",
    "denormalize",
    "to_batch",
    "from_batch",
    "box_resample",
    "DomainDataset",
    "load_domain",
    "load_masks",
    "UnpairedSampler",
    "SynthSpec",
    "synth_generate",
    "synth_write",
]

MAX_SIDE = 8192


class DataError(Exception):
    """Malformed image bytes, inconsistent datasets, or missing files."""


# ---------------------------------------------------------------------------
# netpbm codecs


def _pnm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """First `count` whitespace-separated header tokens, honouring '#' comments.

    Returns (tokens, offset of the byte right after the single whitespace
    that terminates the last token)."""
    tokens: list[bytes] = []
    i = 0
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i] == ord("#"):
            while i < n and data[i] != ord("\n"):
                i += 1
            continue
        start = i
        while i < n and not data[i : i + 1].isspace() and data[i] != ord("#"):
            i += 1
        if i == start:
            raise DataError("truncated header")
        tokens.append(data[start:i])
    if i >= n or not data[i : i + 1].isspace():
        raise DataError("header not terminated by whitespace")
    return tokens, i + 1


def _decode_pnm(data: bytes, magic: bytes, channels: int) -> np.ndarray:
    try:
        tokens, offset = _pnm_tokens(data, 4)
    except DataError:
        raise
    if tokens[0] != magic:
        raise DataError(f"bad magic {tokens[0]!r}, expected {magic.decode()}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise DataError(f"non-numeric header field: {e}") from None
    if w < 1 or h < 1:
        raise DataError(f"bad dimensions {w}x{h}")
    if w > MAX_SIDE or h > MAX_SIDE:
        raise DataError(f"image side {max(w, h)} exceeds the {MAX_SIDE} limit")
    if maxval != 255:
        raise DataError(f"unsupported maxval {maxval} (only 8-bit, maxval 255)")
    need = w * h * channels
    payload = data[offset:]
    if len(payload) != need:
        raise DataError(f"payload is {len(payload)} bytes, expected {need}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def decode_ppm(data: bytes) -> np.ndarray:
    """P6 bytes -> uint8 [H,W,3]."""
    return _decode_pnm(data, b"P6", 3)


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"encode_ppm wants uint8 [H,W,3], got {img.dtype} {img.shape}")
    h, w = img.shape[:2]
    if w > MAX_SIDE or h > MAX_SIDE:
        raise DataError(f"image side {max(w, h)} exceeds the {MAX_SIDE} limit")
    return b"P6\n%d %d\n255\n" % (w, h) + img.tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    """P5 bytes -> uint8 [H,W]."""
    return _decode_pnm(data, b"P5", 1)


def encode_pgm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise DataError(f"encode_pgm wants uint8 [H,W], got {img.dtype} {img.shape}")
    h, w = img.shape
    return b"P5\n%d %d\n255\n" % (w, h) + img.tobytes()


def read_image(path) -> np.ndarray:
    """uint8 RGB [H,W,3] from .ppm (native) or .png (Pillow)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such image: {path}")
    suffix = path.suffix.lower()
    if suffix == ".ppm":
        return decode_ppm(path.read_bytes())
    if suffix == ".png":
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        if max(arr.shape[:2]) > MAX_SIDE:
            raise DataError(f"image side {max(arr.shape[:2])} exceeds the {MAX_SIDE} limit")
        return arr
    raise DataError(f"unsupported image extension {suffix!r} (use .ppm or .png)")


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ppm":
        path.write_bytes(encode_ppm(img))
    elif suffix == ".png":
        from PIL import Image

        Image.fromarray(img, mode="RGB").save(path)
    else:
        raise DataError(f"unsupported image extension {suffix!r} (use .ppm or .png)")


# ---------------------------------------------------------------------------
# value range


def normalize(img: np.ndarray) -> np.ndarray:
    """uint8 -> float32 in [-1, 1]."""
    return (np.asarray(img, dtype=np.float32) / np.float32(127.5)) - np.float32(1.0)


def denormalize(arr: np.ndarray) -> np.ndarray:
    """float -> uint8, clamped to [0, 255], ties rounded up (0.0 -> 128)."""
    y = (np.asarray(arr, dtype=np.float64) + 1.0) * 127.5
    return np.clip(np.floor(y + 0.5), 0.0, 255.0).astype(np.uint8)


def to_batch(images) -> Tensor:
    """List/array of uint8 [H,W,3] -> Tensor [N,3,H,W] in [-1, 1]."""
    arr = np.stack([np.asarray(im) for im in images])
    return Tensor(normalize(arr).transpose(0, 3, 1, 2))


def from_batch(batch) -> list[np.ndarray]:
    """Tensor/array [N,3,H,W] -> list of uint8 [H,W,3]."""
    data = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    return [denormalize(im.transpose(1, 2, 0)) for im in data]


def _box_weights(n: int, k: int) -> np.ndarray:
    """Exact area-overlap weights mapping n source cells onto k output cells."""
    w = np.zeros((k, n))
    step = n / k
    for i in range(k):
        lo, hi = i * step, (i + 1) * step
        for j in range(int(math.floor(lo)), min(n, int(math.ceil(hi)))):
            w[i, j] = min(hi, j + 1) - max(lo, j)
    return w / step


def box_resample(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area (box-overlap) resample of [H,W] or [H,W,C]; returns float64."""
    arr = np.asarray(img, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    wh = _box_weights(arr.shape[0], out_h)
    ww = _box_weights(arr.shape[1], out_w)
    out = np.einsum("ij,jkc,lk->ilc", wh, arr, ww, optimize=True)
    return out[:, :, 0] if squeeze else out


# ---------------------------------------------------------------------------
# datasets on disk


@dataclass
class DomainDataset:
    images: np.ndarray  # uint8 [N,H,W,3]
    names: list[str]

    def __len__(self) -> int:
        return len(self.names)


def _manifest_entries(root: Path) -> Optional[list[str]]:
    mf = root / "manifest.txt"
    if not mf.exists():
        return None
    lines = []
    for line in mf.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            lines.append(line)
    return lines


def load_domain(root, sub: str, image_side: Optional[int] = None) -> DomainDataset:
    """Load `<root>/<sub>` (trainA or trainB), optionally resampled square."""
    root = Path(root)
    entries = _manifest_entries(root)
    if entries is not None:
        rels = [e for e in entries if e.replace("\\", "/").startswith(sub + "/")]
        paths = [root / r for r in rels]
    else:
        d = root / sub
        if not d.is_dir():
            raise DataError(f"missing dataset directory {d}")
        paths = sorted(p for p in d.iterdir() if p.suffix.lower() in (".ppm", ".png"))
    if not paths:
        raise DataError(f"no images for domain {sub!r} under {root}")
    images, names = [], []
    for p in paths:
        img = read_image(p)
        if image_side is not None and img.shape[:2] != (image_side, image_side):
            img = np.clip(np.rint(box_resample(img, image_side, image_side)), 0, 255).astype(np.uint8)
        images.append(img)
        names.append(p.name)
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataError(f"domain {sub!r} mixes image shapes: {sorted(shapes)}")
    return DomainDataset(np.stack(images), names)


def load_masks(root, names: Optional[list[str]] = None) -> Optional[np.ndarray]:
    """uint8 [N,H,W] masks from <root>/masksB, aligned with trainB order."""
    d = Path(root) / "masksB"
    if not d.is_dir():
        return None
    paths = sorted(p for p in d.iterdir() if p.suffix.lower() == ".pgm")
    if names is not None and len(paths) != len(names):
        raise DataError(f"masksB has {len(paths)} masks for {len(names)} images")
    return np.stack([decode_pgm(p.read_bytes()) for p in paths])


# ---------------------------------------------------------------------------
# unpaired sampling


class UnpairedSampler:
    """Independent per-domain epoch permutations, batched.

    One epoch is ceil(max(n_a, n_b)/batch) steps; each domain walks its own
    without-replacement permutation and reshuffles when exhausted, so the two
    index streams are independent draws.
    """

    def __init__(self, n_a: int, n_b: int, batch_size: int, rng: np.random.Generator):
        if n_a < 1 or n_b < 1:
            raise DataError(f"empty domain (sizes {n_a}, {n_b})")
        if batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {batch_size}")
        self.n_a, self.n_b = n_a, n_b
        self.batch_size = batch_size
        self._rng_a = np.random.Generator(np.random.PCG64(rng.integers(2**63)))
        self._rng_b = np.random.Generator(np.random.PCG64(rng.integers(2**63)))
        self._queue_a: list[int] = []
        self._queue_b: list[int] = []

    def _draw(self, queue: list[int], n: int, rng: np.random.Generator, k: int) -> np.ndarray:
        out = []
        while len(out) < k:
            if not queue:
                queue.extend(rng.permutation(n).tolist())
            out.append(queue.pop())
        return np.asarray(out, dtype=np.int64)

    def steps_per_epoch(self) -> int:
        return math.ceil(max(self.n_a, self.n_b) / self.batch_size)

    def epoch(self):
        for _ in range(self.steps_per_epoch()):
            yield (
                self._draw(self._queue_a, self.n_a, self._rng_a, self.batch_size),
                self._draw(self._queue_b, self.n_b, self._rng_b, self.batch_size),
            )


# ---------------------------------------------------------------------------
# synthetic tasks


@dataclass(frozen=True)
class SynthSpec:
    task: str = "invert"  # invert | stripes | segmentation
    count: int = 16
    side: int = 16
    seed: int = 0

    def validate(self) -> None:
        if self.task not in ("invert", "stripes", "segmentation"):
            raise DataError(f"unknown synthetic task {self.task!r}")
        if self.count < 1:
            raise DataError(f"count must be >= 1, got {self.count}")
        if not (4 <= self.side <= MAX_SIDE) or self.side % 4:
            raise DataError(f"side must be divisible by 4 and within [4, {MAX_SIDE}], got {self.side}")


def _bilinear_upsample(grid: np.ndarray, side: int) -> np.ndarray:
    """Smooth [gh,gw,C] -> [side,side,C] interpolation (float64)."""
    gh, gw, c = grid.shape
    ys = np.linspace(0, gh - 1, side)
    xs = np.linspace(0, gw - 1, side)
    y0 = np.clip(ys.astype(int), 0, gh - 2)
    x0 = np.clip(xs.astype(int), 0, gw - 2)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    g = grid.astype(np.float64)
    out = (
        g[y0][:, x0] * (1 - fy) * (1 - fx)
        + g[y0 + 1][:, x0] * fy * (1 - fx)
        + g[y0][:, x0 + 1] * (1 - fy) * fx
        + g[y0 + 1][:, x0 + 1] * fy * fx
    )
    return out


def _smooth_field(rng: np.random.Generator, side: int, lo=0, hi=255) -> np.ndarray:
    grid = rng.uniform(lo, hi, size=(4, 4, 3))
    return np.clip(np.rint(_bilinear_upsample(grid, side)), 0, 255).astype(np.uint8)


def _stripes(rng: np.random.Generator, side: int, horizontal: bool) -> np.ndarray:
    width = int(rng.integers(2, max(3, side // 4) + 1))
    phase = int(rng.integers(0, 2 * width))
    coords = np.arange(side)
    on = ((coords + phase) // width) % 2 == 0
    hi, lo = int(rng.integers(200, 256)), int(rng.integers(0, 56))
    line = np.where(on, hi, lo).astype(np.uint8)
    img = np.repeat(line[:, None], side, axis=1) if horizontal else np.repeat(line[None, :], side, axis=0)
    return np.repeat(img[:, :, None], 3, axis=2)


def _ellipse_mask(rng: np.random.Generator, side: int) -> np.ndarray:
    cy, cx = rng.uniform(0.35 * side, 0.65 * side, size=2)
    ay = rng.uniform(0.15 * side, 0.30 * side)
    ax = rng.uniform(0.15 * side, 0.30 * side)
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:side, 0:side]
    y, x = yy + 0.5 - cy, xx + 0.5 - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = (x * ct + y * st) / ax
    v = (-x * st + y * ct) / ay
    return (u * u + v * v) <= 1.0


def synth_generate(spec: SynthSpec):
    """Deterministic (A images, B images, B masks or None) for a task.

    invert:        B is the exact complement of A (smooth random fields).
    stripes:       A horizontal bars, B vertical bars, independent draws.
    segmentation:  the same random ellipse per index, composited on white (A)
                   and on a smooth noise background (B); masks follow B.
    """
    spec.validate()
    task_tag = {"invert": 1, "stripes": 2, "segmentation": 3}[spec.task]
    rng = np.random.default_rng(np.random.SeedSequence([task_tag, spec.seed]))
    side, n = spec.side, spec.count
    if spec.task == "invert":
        a = np.stack([_smooth_field(rng, side) for _ in range(n)])
        return a, (255 - a).astype(np.uint8), None
    if spec.task == "stripes":
        a = np.stack([_stripes(rng, side, True) for _ in range(n)])
        b = np.stack([_stripes(rng, side, False) for _ in range(n)])
        return a, b, None
    a_list, b_list, m_list = [], [], []
    for _ in range(n):
        mask = _ellipse_mask(rng, side)
        color = rng.integers(0, 181, size=3).astype(np.uint8)
        bg_b = _smooth_field(rng, side, lo=60, hi=255)
        img_a = np.full((side, side, 3), 255, dtype=np.uint8)
        img_a[mask] = color
        img_b = bg_b.copy()
        img_b[mask] = color
        a_list.append(img_a)
        b_list.append(img_b)
        m_list.append((mask * np.uint8(255)).astype(np.uint8))
    return np.stack(a_list), np.stack(b_list), np.stack(m_list)


def synth_write(root, spec: SynthSpec) -> None:
    """Materialize a synthetic dataset in the standard directory layout."""
    root = Path(root)
    a, b, masks = synth_generate(spec)
    rels: list[str] = []
    for sub, stack in (("trainA", a), ("trainB", b)):
        d = root / sub
        d.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(stack):
            rel = f"{sub}/{i:04d}.ppm"
            (root / rel).write_bytes(encode_ppm(img))
            rels.append(rel)
    if masks is not None:
        d = root / "masksB"
        d.mkdir(parents=True, exist_ok=True)
        for i, m in enumerate(masks):
            rel = f"masksB/{i:04d}.pgm"
            (root / rel).write_bytes(encode_pgm(m))
            rels.append(rel)
    header = f"# task={spec.task} count={spec.count} side={spec.side} seed={spec.seed}\n"
    (root / "manifest.txt").write_text(header + "\n".join(rels) + "\n")
