"""Training loop: alternating generator/discriminator phases, a bounded
history buffer feeding the discriminators stale fakes, a half-constant
half-linear learning-rate schedule, and the binary checkpoint format.

A step updates the generator side first (encoders, decoders, translators)
with the discriminators frozen, then updates each discriminator on its real
batch plus a buffered fake that was detached from the generator tape.  Any
non-finite loss value aborts the run naming the offending term.

Checkpoint wire format (all integers little-endian):

    b"XNET"  u32 version  u64 record_count
    per record: u16 name_len, name utf-8, u8 rank, rank x u32 dims,
                raw little-endian float32 payload
    u32 crc32 over everything after the magic

Reserved "meta/..." record names carry epoch, architecture, rng state and
the resolved config text (one byte per float; float32 holds small integers
exactly), which keeps checkpoints self-describing within the same format.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .data import DataError, UnpairedSampler, to_batch
from .losses import LossReport, LossWeights, TermFlags, lsgan_discriminator_loss, total_generator_loss
from .networks import ArchSpec, ModelBundle
from .optim import adam_step, set_trainable, zero_grads
from .tensor import Tape, Tensor, add, backward

__all__ = [
    "NumericsError",
    "CheckpointError",
    "HistoryBuffer",
    "TrainConfig",
    "lr_at_epoch",
    "train_step",
    "train_loop",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "apply_checkpoint",
    "bundle_from_checkpoint",
    "MAGIC",
    "FORMAT_VERSION",
]

MAGIC = b"XNET"
FORMAT_VERSION = 1


class NumericsError(RuntimeError):
    """A loss term went non-finite; training must not continue silently."""


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or shape-incompatible checkpoint."""


class HistoryBuffer:
    """Pool of up to `capacity` past fakes (one entry per image).

    Until full, every query stores a copy and returns the fresh image.  At
    capacity, each incoming image either (p = 1/2) swaps with a uniformly
    chosen stored one, returning the evicted image, or (p = 1/2) passes
    through untouched.  The caller's tensor is never mutated or retained.
    """

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity < 0:
            raise ValueError(f"capacity must be >= 0, got {capacity}")
        self.capacity = capacity
        self._rng = rng
        self._store: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self._store)

    def query(self, fresh: Tensor) -> Tensor:
        if self.capacity == 0:
            return Tensor(fresh.data.copy())
        out = []
        for img in fresh.data:
            if len(self._store) < self.capacity:
                self._store.append(img.copy())
                out.append(img.copy())
            elif self._rng.random() < 0.5:
                k = int(self._rng.integers(len(self._store)))
                out.append(self._store[k])
                self._store[k] = img.copy()
            else:
                out.append(img.copy())
        return Tensor(np.stack(out))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 1
    image_side: int = 64
    seed: int = 0
    base_width: int = 64
    latent_channels: int = 256
    n_res_blocks: int = 9
    disc_layers: int = 0  # 0 = deepest stack that fits image_side
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    flags: TermFlags = field(default_factory=TermFlags)
    history_capacity: int = 50
    checkpoint_every: int = 0  # epochs between scheduled saves; 0 = final only

    def arch(self) -> ArchSpec:
        return ArchSpec(
            image_side=self.image_side,
            base_width=self.base_width,
            latent_channels=self.latent_channels,
            n_res_blocks=self.n_res_blocks,
            disc_layers=self.disc_layers,
        )

    def gan_active(self) -> bool:
        return self.flags.gan and self.weights.gan > 0.0


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Constant for the first half of the run, then linear toward 0.

    `epoch` is 0-based; the factor reaches 0 exactly one epoch past the end.
    """
    decay_start = cfg.epochs // 2
    span = cfg.epochs - decay_start + 1
    factor = 1.0 - max(0, epoch + 1 - decay_start) / span
    return cfg.lr * factor


def _ensure_finite(values: dict[str, float]) -> None:
    for term, v in values.items():
        if not math.isfinite(v):
            raise NumericsError(f"loss term {term!r} is non-finite ({v}); aborting")


def train_step(
    bundle: ModelBundle,
    x_a: Tensor,
    x_b: Tensor,
    cfg: TrainConfig,
    buffers: tuple[HistoryBuffer, HistoryBuffer],
    lr: Optional[float] = None,
) -> LossReport:
    """One generator update followed by one update of each discriminator."""
    step_lr = cfg.lr if lr is None else lr
    gen_params = bundle.generator_parameters()
    disc_params = bundle.discriminator_parameters()

    set_trainable(disc_params, False)
    try:
        zero_grads(gen_params)
        with Tape() as tape:
            total, report, fakes = total_generator_loss(bundle, x_a, x_b, cfg.weights, cfg.flags)
        _ensure_finite(
            {"gan_g": report.gan_g, "id": report.id, "ctc": report.ctc,
             "zid": report.zid, "zcyc": report.zcyc, "total": report.total}
        )
        backward(total, tape)
    finally:
        set_trainable(disc_params, True)
    adam_step(gen_params, step_lr, cfg.beta1, cfg.beta2, cfg.adam_eps)

    if cfg.gan_active():
        buffer_a, buffer_b = buffers
        pooled_b = buffer_b.query(fakes["a2b"].detach())
        pooled_a = buffer_a.query(fakes["b2a"].detach())
        zero_grads(disc_params)
        with Tape() as tape_d:
            d_a = lsgan_discriminator_loss(bundle.disc_a, x_a, pooled_a)
            d_b = lsgan_discriminator_loss(bundle.disc_b, x_b, pooled_b)
            d_total = add(d_a, d_b)
        report.gan_d = d_total.item()
        _ensure_finite({"gan_d": report.gan_d})
        backward(d_total, tape_d)
        adam_step(disc_params, step_lr, cfg.beta1, cfg.beta2, cfg.adam_eps)

    return report


def train_loop(
    cfg: TrainConfig,
    images_a: np.ndarray,
    images_b: np.ndarray,
    sink: Optional[Callable[[int, int, float, LossReport], None]] = None,
    out_dir=None,
    config_text: Optional[str] = None,
):
    """Full run over uint8 image stacks [N,H,W,3]; returns (bundle, Checkpoint).

    Everything random derives from cfg.seed, so two runs with equal config
    and data produce bitwise-identical parameters.  When out_dir is given,
    scheduled and final checkpoints are written there.
    """
    images_a = getattr(images_a, "images", images_a)
    images_b = getattr(images_b, "images", images_b)
    if len(images_a) == 0 or len(images_b) == 0:
        raise DataError("cannot train on an empty domain")
    ss = np.random.SeedSequence(cfg.seed)
    init_rng, sampler_rng, buf_a_rng, buf_b_rng = (np.random.default_rng(c) for c in ss.spawn(4))
    bundle = ModelBundle.build(cfg.arch(), init_rng)
    sampler = UnpairedSampler(len(images_a), len(images_b), cfg.batch_size, sampler_rng)
    buffers = (
        HistoryBuffer(cfg.history_capacity, buf_a_rng),
        HistoryBuffer(cfg.history_capacity, buf_b_rng),
    )
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    rng_bundle = [sampler._rng_a, sampler._rng_b, buf_a_rng, buf_b_rng]
    epoch = 0
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        for step, (idx_a, idx_b) in enumerate(sampler.epoch()):
            x_a = to_batch(images_a[idx_a])
            x_b = to_batch(images_b[idx_b])
            report = train_step(bundle, x_a, x_b, cfg, buffers, lr)
            if sink is not None:
                sink(epoch, step, lr, report)
        if out_path is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(bundle, out_path / f"ckpt_ep{epoch + 1:04d}.xnet",
                            epoch=epoch + 1, rng_states=rng_bundle, config_text=config_text)

    ckpt_path = out_path / "final.xnet" if out_path is not None else None
    if ckpt_path is not None:
        save_checkpoint(bundle, ckpt_path, epoch=cfg.epochs, rng_states=rng_bundle, config_text=config_text)
        final = load_checkpoint(ckpt_path)
    else:
        final = Checkpoint(
            version=FORMAT_VERSION,
            params={n: p.value.data.copy() for n, p in bundle.named_parameters().items()},
            epoch=cfg.epochs,
            arch=cfg.arch(),
            rng_states=[_rng_state_ints(g) for g in rng_bundle],
            config_text=config_text,
        )
    return bundle, final


# ---------------------------------------------------------------------------
# checkpoint format


@dataclass
class Checkpoint:
    version: int
    params: dict[str, np.ndarray]
    epoch: int = 0
    arch: Optional[ArchSpec] = None
    rng_states: Optional[list[tuple[int, ...]]] = None
    config_text: Optional[str] = None


def _rng_state_ints(rng: np.random.Generator) -> tuple[int, ...]:
    st = rng.bit_generator.state
    return (int(st["state"]["state"]), int(st["state"]["inc"]),
            int(st["has_uint32"]), int(st["uinteger"]))


def _chunks16(value: int, n: int) -> list[float]:
    return [float((value >> (16 * i)) & 0xFFFF) for i in range(n)]


def _unchunk16(vals) -> int:
    return sum(int(round(v)) << (16 * i) for i, v in enumerate(vals))


def _encode_rng(states: list[tuple[int, ...]]) -> np.ndarray:
    out: list[float] = []
    for state, inc, has_u32, uint in states:
        out.extend(_chunks16(state, 8))
        out.extend(_chunks16(inc, 8))
        out.append(float(has_u32))
        out.extend(_chunks16(uint, 2))
    return np.asarray(out, dtype=np.float32)


def _decode_rng(arr: np.ndarray) -> list[tuple[int, ...]]:
    states = []
    vals = arr.astype(np.float64).tolist()
    for off in range(0, len(vals), 19):
        row = vals[off : off + 19]
        states.append((_unchunk16(row[0:8]), _unchunk16(row[8:16]), int(round(row[16])), _unchunk16(row[17:19])))
    return states


def _meta_records(epoch, arch, rng_states, config_text) -> dict[str, np.ndarray]:
    recs: dict[str, np.ndarray] = {"meta/epoch": np.asarray([float(epoch)], dtype=np.float32)}
    if arch is not None:
        recs["meta/arch"] = np.asarray(
            [arch.image_side, arch.in_channels, arch.base_width,
             arch.latent_channels, arch.n_res_blocks, arch.disc_layers],
            dtype=np.float32,
        )
    if rng_states:
        recs["meta/rng"] = _encode_rng(rng_states)
    if config_text is not None:
        recs["meta/config"] = np.asarray([float(b) for b in config_text.encode()], dtype=np.float32)
    return recs


def save_checkpoint(bundle: ModelBundle, path, *, epoch: int = 0,
                    rng_states=None, config_text: Optional[str] = None) -> None:
    records: dict[str, np.ndarray] = {}
    for name, p in bundle.named_parameters().items():
        if p.value.data.dtype != np.float32:
            raise CheckpointError(f"checkpoints are float32-only; {name!r} is {p.value.data.dtype}")
        records[name] = p.value.data
    if rng_states is not None:
        rng_states = [_rng_state_ints(s) if isinstance(s, np.random.Generator) else tuple(s) for s in rng_states]
    records.update(_meta_records(epoch, bundle.spec, rng_states, config_text))

    body = bytearray()
    body += struct.pack("<I", FORMAT_VERSION)
    body += struct.pack("<Q", len(records))
    for name, arr in records.items():
        encoded = name.encode()
        body += struct.pack("<H", len(encoded))
        body += encoded
        body += struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.astype("<f4", copy=False).tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    Path(path).write_bytes(MAGIC + bytes(body))


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, crc_stored = blob[4:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(body) != crc_stored:
        raise CheckpointError(f"{path}: checksum mismatch; file is corrupt")
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(body):
            raise CheckpointError(f"{path}: truncated record table")
        vals = struct.unpack_from(fmt, body, off)
        off += size
        return vals

    (version,) = take("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    (count,) = take("<Q")
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = body[off : off + name_len].decode()
        off += name_len
        (rank,) = take("<B")
        dims = take(f"<{rank}I") if rank else ()
        size = int(np.prod(dims)) if dims else 1
        payload = body[off : off + 4 * size]
        if len(payload) != 4 * size:
            raise CheckpointError(f"{path}: truncated payload for {name!r}")
        off += 4 * size
        records[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if off != len(body):
        raise CheckpointError(f"{path}: {len(body) - off} trailing bytes after last record")

    arch = None
    if "meta/arch" in records:
        vals = [int(v) for v in records.pop("meta/arch")]
        arch = ArchSpec(image_side=vals[0], in_channels=vals[1], base_width=vals[2],
                        latent_channels=vals[3], n_res_blocks=vals[4], disc_layers=vals[5])
    epoch = int(records.pop("meta/epoch")[0]) if "meta/epoch" in records else 0
    rng_states = _decode_rng(records.pop("meta/rng")) if "meta/rng" in records else None
    config_text = None
    if "meta/config" in records:
        config_text = bytes(int(v) for v in records.pop("meta/config")).decode()
    return Checkpoint(version=version, params=records, epoch=epoch, arch=arch,
                      rng_states=rng_states, config_text=config_text)


def apply_checkpoint(ckpt: Checkpoint, bundle: ModelBundle, prefixes: Optional[tuple[str, ...]] = None) -> None:
    """Copy checkpoint parameters into a bundle, strict about mismatches.

    With `prefixes`, only parameters under those name prefixes are loaded
    (e.g. encoders/decoders for test-time translation) and extra checkpoint
    records are ignored; otherwise the name sets must match exactly.
    """
    wanted = {
        n: p for n, p in bundle.named_parameters().items()
        if prefixes is None or n.startswith(prefixes)
    }
    missing = sorted(set(wanted) - set(ckpt.params))
    if missing:
        raise CheckpointError(f"checkpoint lacks parameter {missing[0]!r} ({len(missing)} missing)")
    for name, p in wanted.items():
        src = ckpt.params[name]
        if tuple(src.shape) != tuple(p.value.data.shape):
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {tuple(src.shape)} vs bundle {tuple(p.value.data.shape)}"
            )
    if prefixes is None:
        extra = sorted(set(ckpt.params) - set(wanted))
        if extra:
            raise CheckpointError(f"checkpoint has unexpected parameter {extra[0]!r} ({len(extra)} extra)")
    for name, p in wanted.items():
        p.value.data[...] = ckpt.params[name]


def bundle_from_checkpoint(ckpt: Checkpoint, *, with_train_nets: bool = True) -> ModelBundle:
    """Rebuild networks from the self-described architecture and load weights."""
    if ckpt.arch is None:
        raise CheckpointError("checkpoint carries no architecture record; cannot rebuild networks")
    bundle = ModelBundle.build(ckpt.arch, np.random.default_rng(0), with_train_nets=with_train_nets)
    prefixes = None
    if not with_train_nets:
        prefixes = ("enc_a2b", "enc_b2a", "dec_a", "dec_b")
    apply_checkpoint(ckpt, bundle, prefixes)
    return bundle
