"""Network definitions: paired encoders/decoders, latent translators, and
patch discriminators, plus the bundle that owns all eight and the forward
paths the training objective is written over.

Shared latent geometry: an encoder maps [N,3,S,S] -> [N,C_z,S/4,S/4] through
a 7x7 stem and two stride-2 halvings, then residual blocks at the latent
width.  Decoders mirror it back with two stride-2 transposed convs and a 7x7
head into tanh range.  Translators are residual stacks that stay at latent
width, so zero residual branches mean an exact identity.  Discriminators are
strided 4x4 patch classifiers emitting a score map, not a single logit.

Stride-1 convs in the generators use reflection padding; strided convs use
zero padding.  Kernels start N(0, 0.02), norm gains at 1, biases at 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .optim import Parameter
from .tensor import (
    ShapeError,
    Tensor,
    add,
    add_channel_bias,
    conv2d,
    conv2d_transpose,
    instance_norm,
    leaky_relu,
    pad_reflect,
    relu,
    tanh,
)

__all__ = [
    "ArchSpec",
    "Encoder",
    "Decoder",
    "LatentTranslator",
    "PatchDiscriminator",
    "ModelBundle",
    "auto_disc_layers",
    "translate_a2b",
    "translate_b2a",
    "cross_identity_a",
    "cross_identity_b",
    "plain_identity_a",
    "plain_identity_b",
]

NORM_EPS = 1e-5
LEAKY_SLOPE = 0.2
INIT_STD = 0.02


@dataclass(frozen=True)
class ArchSpec:
    """Width/depth knobs shared by all four network kinds.

    disc_layers == 0 means: pick the deepest strided stack (up to 3, the
    full-receptive-field configuration) whose score map stays non-empty at
    `image_side`.
    """

    image_side: int = 64
    in_channels: int = 3
    base_width: int = 64
    latent_channels: int = 256
    n_res_blocks: int = 9
    disc_layers: int = 0

    def validate(self) -> None:
        if self.image_side % 4 != 0 or self.image_side < 8:
            raise ShapeError(
                f"image_side {self.image_side} must be divisible by 4 and at least 8 "
                "(two stride-2 halvings with non-degenerate latent statistics)"
            )
        for name in ("in_channels", "base_width", "latent_channels"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_res_blocks < 0:
            raise ShapeError(f"n_res_blocks must be >= 0, got {self.n_res_blocks}")

    def resolved_disc_layers(self) -> int:
        if self.disc_layers:
            return self.disc_layers
        return auto_disc_layers(self.image_side)


def auto_disc_layers(image_side: int) -> int:
    """Deepest strided stack (capped at 3) whose final score map is >= 1x1."""
    n = 3
    while n > 1 and image_side // (2**n) < 3:
        n -= 1
    return n


def _kernel(rng: np.random.Generator, shape, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, INIT_STD, size=shape).astype(dtype))


class _Module:
    """Tiny base: ordered (name, Parameter) registration."""

    def __init__(self, name: str):
        self.name = name
        self._params: list[tuple[str, Parameter]] = []

    def _register(self, local_name: str, value: Tensor) -> Parameter:
        p = Parameter(value, name=f"{self.name}/{local_name}")
        self._params.append((local_name, p))
        return p

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for _, p in self._params:
            yield p.name, p

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self._params]


class _ConvUnit(_Module):
    """pad -> conv -> [instance norm] -> activation, the generator brick."""

    def __init__(self, rng, name, cin, cout, k, stride, pad, *, pad_mode, norm, act, dtype):
        super().__init__(name)
        self.stride = stride
        self.pad = pad
        self.pad_mode = pad_mode
        self.norm = norm
        self.act = act
        self.kernel = self._register("kernel", _kernel(rng, (cout, cin, k, k), dtype))
        self.bias = None if norm else self._register("bias", Tensor(np.zeros(cout, dtype=dtype)))
        if norm:
            self.gain = self._register("gain", Tensor(np.ones(cout, dtype=dtype)))
            self.shift = self._register("shift", Tensor(np.zeros(cout, dtype=dtype)))

    def __call__(self, x: Tensor) -> Tensor:
        if self.pad_mode == "reflect" and self.pad:
            x = pad_reflect(x, self.pad)
            h = conv2d(x, self.kernel.value, stride=self.stride, padding=0)
        else:
            h = conv2d(x, self.kernel.value, stride=self.stride, padding=self.pad)
        if self.bias is not None:
            h = add_channel_bias(h, self.bias.value)
        if self.norm:
            h = instance_norm(h, self.gain.value, self.shift.value, eps=NORM_EPS)
        if self.act == "relu":
            return relu(h)
        if self.act == "lrelu":
            return leaky_relu(h, LEAKY_SLOPE)
        if self.act == "tanh":
            return tanh(h)
        return h


class _UpUnit(_Module):
    """Transposed conv (stride 2, output_padding 1) -> instance norm -> relu."""

    def __init__(self, rng, name, cin, cout, dtype):
        super().__init__(name)
        self.kernel = self._register("kernel", _kernel(rng, (cin, cout, 3, 3), dtype))
        self.gain = self._register("gain", Tensor(np.ones(cout, dtype=dtype)))
        self.shift = self._register("shift", Tensor(np.zeros(cout, dtype=dtype)))

    def __call__(self, x: Tensor) -> Tensor:
        h = conv2d_transpose(x, self.kernel.value, stride=2, padding=1, output_padding=1)
        h = instance_norm(h, self.gain.value, self.shift.value, eps=NORM_EPS)
        return relu(h)


class _ResBlock(_Module):
    """Two reflect-padded 3x3 conv+norm steps with an additive skip.

    The residual branch ends without an activation, so zeroing its kernels
    and shifts makes the block (and any stack of them) an exact identity.
    """

    def __init__(self, rng, name, width, dtype):
        super().__init__(name)
        self.c1 = _ConvUnit(rng, f"{name}/conv1", width, width, 3, 1, 1,
                            pad_mode="reflect", norm=True, act="relu", dtype=dtype)
        self.c2 = _ConvUnit(rng, f"{name}/conv2", width, width, 3, 1, 1,
                            pad_mode="reflect", norm=True, act=None, dtype=dtype)

    def named_parameters(self):
        yield from self.c1.named_parameters()
        yield from self.c2.named_parameters()

    def parameters(self):
        return self.c1.parameters() + self.c2.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        return add(x, self.c2(self.c1(x)))


class _Net(_Module):
    """A named sequence of sub-modules."""

    def __init__(self, name: str):
        super().__init__(name)
        self.blocks: list = []

    def named_parameters(self):
        for b in self.blocks:
            yield from b.named_parameters()

    def parameters(self):
        out = []
        for b in self.blocks:
            out.extend(b.parameters())
        return out

    def __call__(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x


class Encoder(_Net):
    """[N,3,S,S] -> [N,C_z,S/4,S/4]; 7x7 stem, two halvings, residual tail."""

    def __init__(self, spec: ArchSpec, rng, name="enc", dtype=np.float32):
        super().__init__(name)
        spec.validate()
        self.spec = spec
        bw, cz = spec.base_width, spec.latent_channels
        self.blocks = [
            _ConvUnit(rng, f"{name}/stem", spec.in_channels, bw, 7, 1, 3,
                      pad_mode="reflect", norm=True, act="relu", dtype=dtype),
            _ConvUnit(rng, f"{name}/down1", bw, 2 * bw, 3, 2, 1,
                      pad_mode="zero", norm=True, act="relu", dtype=dtype),
            _ConvUnit(rng, f"{name}/down2", 2 * bw, cz, 3, 2, 1,
                      pad_mode="zero", norm=True, act="relu", dtype=dtype),
        ]
        self.blocks += [_ResBlock(rng, f"{name}/res{i}", cz, dtype) for i in range(spec.n_res_blocks)]

    def __call__(self, x: Tensor) -> Tensor:
        side = x.data.shape[-1]
        if x.data.ndim != 4 or x.data.shape[2] != side:
            raise ShapeError(f"encoder expects square [N,C,S,S] input, got {x.data.shape}")
        if side % 4 != 0 or side < 8:
            raise ShapeError(f"encoder input side {side} must be divisible by 4 and >= 8")
        return super().__call__(x)


class Decoder(_Net):
    """[N,C_z,S/4,S/4] -> [N,3,S,S]; two doublings, 7x7 head into tanh."""

    def __init__(self, spec: ArchSpec, rng, name="dec", dtype=np.float32):
        super().__init__(name)
        spec.validate()
        self.spec = spec
        bw, cz = spec.base_width, spec.latent_channels
        self.blocks = [
            _UpUnit(rng, f"{name}/up1", cz, 2 * bw, dtype),
            _UpUnit(rng, f"{name}/up2", 2 * bw, bw, dtype),
            _ConvUnit(rng, f"{name}/head", bw, spec.in_channels, 7, 1, 3,
                      pad_mode="reflect", norm=False, act="tanh", dtype=dtype),
        ]


class LatentTranslator(_Net):
    """Residual stack at latent width; identity when branch weights are zero."""

    def __init__(self, spec: ArchSpec, rng, name="tr", n_blocks: Optional[int] = None, dtype=np.float32):
        super().__init__(name)
        spec.validate()
        self.spec = spec
        n = spec.n_res_blocks if n_blocks is None else n_blocks
        self.blocks = [_ResBlock(rng, f"{name}/res{i}", spec.latent_channels, dtype) for i in range(n)]


class PatchDiscriminator(_Net):
    """Strided 4x4 conv stack scoring overlapping patches.

    With the default three strided layers the score map side is S/8 - 2 and
    each unit sees a 70x70 window.  Instance norm everywhere except the
    first conv; leaky-relu activations; the last conv is a plain linear map
    to one channel.
    """

    def __init__(self, spec: ArchSpec, rng, name="disc", dtype=np.float32):
        super().__init__(name)
        self.spec = spec
        bw = spec.base_width
        n = spec.resolved_disc_layers()
        self.n_strided = n
        widths = [bw * min(2**i, 8) for i in range(n + 1)]
        blocks = []
        cin = spec.in_channels
        for i in range(n):
            blocks.append(
                _ConvUnit(rng, f"{name}/d{i}", cin, widths[i], 4, 2, 1,
                          pad_mode="zero", norm=(i > 0), act="lrelu", dtype=dtype)
            )
            cin = widths[i]
        blocks.append(
            _ConvUnit(rng, f"{name}/pre", cin, widths[n], 4, 1, 1,
                      pad_mode="zero", norm=True, act="lrelu", dtype=dtype)
        )
        blocks.append(
            _ConvUnit(rng, f"{name}/head", widths[n], 1, 4, 1, 1,
                      pad_mode="zero", norm=False, act=None, dtype=dtype)
        )
        self.blocks = blocks

    def layer_geometry(self) -> list[tuple[int, int]]:
        """(kernel, stride) per conv, outermost first."""
        return [(4, 2)] * self.n_strided + [(4, 1), (4, 1)]

    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for k, s in self.layer_geometry():
            rf += (k - 1) * jump
            jump *= s
        return rf

    def score_map_side(self, side: int) -> int:
        for k, s in self.layer_geometry():
            side = (side + 2 - k) // s + 1
        return side

    def __call__(self, x: Tensor) -> Tensor:
        side = min(x.data.shape[2], x.data.shape[3])
        if self.score_map_side(side) < 1:
            raise ShapeError(
                f"discriminator input side {side} is smaller than one receptive field "
                f"({self.receptive_field()} with {self.n_strided} strided layers)"
            )
        return super().__call__(x)


@dataclass
class ModelBundle:
    """All eight networks of one experiment.

    Translators and discriminators are optional so a test-time bundle can
    hold encoders/decoders only.  Parameter names are globally unique
    (prefixed by the owning network), which the checkpoint format relies on.
    """

    spec: ArchSpec
    enc_a2b: Encoder
    enc_b2a: Encoder
    dec_a: Decoder
    dec_b: Decoder
    tr_a2b: Optional[LatentTranslator] = None
    tr_b2a: Optional[LatentTranslator] = None
    disc_a: Optional[PatchDiscriminator] = None
    disc_b: Optional[PatchDiscriminator] = None

    @classmethod
    def build(cls, spec: ArchSpec, rng: np.random.Generator, *, with_train_nets: bool = True,
              dtype=np.float32) -> "ModelBundle":
        spec.validate()
        enc_a2b = Encoder(spec, rng, "enc_a2b", dtype)
        enc_b2a = Encoder(spec, rng, "enc_b2a", dtype)
        dec_a = Decoder(spec, rng, "dec_a", dtype)
        dec_b = Decoder(spec, rng, "dec_b", dtype)
        tr_a2b = tr_b2a = disc_a = disc_b = None
        if with_train_nets:
            tr_a2b = LatentTranslator(spec, rng, "tr_a2b", dtype=dtype)
            tr_b2a = LatentTranslator(spec, rng, "tr_b2a", dtype=dtype)
            disc_a = PatchDiscriminator(spec, rng, "disc_a", dtype)
            disc_b = PatchDiscriminator(spec, rng, "disc_b", dtype)
        return cls(spec, enc_a2b, enc_b2a, dec_a, dec_b, tr_a2b, tr_b2a, disc_a, disc_b)

    def _nets(self):
        for net in (self.enc_a2b, self.enc_b2a, self.dec_a, self.dec_b,
                    self.tr_a2b, self.tr_b2a, self.disc_a, self.disc_b):
            if net is not None:
                yield net

    def named_parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for net in self._nets():
            for name, p in net.named_parameters():
                if name in out:
                    raise ShapeError(f"duplicate parameter name {name!r} in bundle")
                out[name] = p
        return out

    def generator_parameters(self) -> list[Parameter]:
        """Everything the generator phase updates: encoders, decoders, translators."""
        nets = [self.enc_a2b, self.enc_b2a, self.dec_a, self.dec_b, self.tr_a2b, self.tr_b2a]
        out: list[Parameter] = []
        for net in nets:
            if net is not None:
                out.extend(net.parameters())
        return out

    def discriminator_parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for net in (self.disc_a, self.disc_b):
            if net is not None:
                out.extend(net.parameters())
        return out


# ---------------------------------------------------------------------------
# forward paths over a bundle


def _need(net, what: str):
    if net is None:
        raise ShapeError(f"bundle has no {what}; build with with_train_nets=True or load its parameters")
    return net


def translate_a2b(bundle: ModelBundle, x: Tensor) -> Tensor:
    """Domain A image -> domain B image (encode, decode on the B side)."""
    return bundle.dec_b(bundle.enc_a2b(x))


def translate_b2a(bundle: ModelBundle, x: Tensor) -> Tensor:
    return bundle.dec_a(bundle.enc_b2a(x))


def cross_identity_a(bundle: ModelBundle, x: Tensor) -> Tensor:
    """A image round-tripped through the B-side latent and back."""
    z = bundle.enc_a2b(x)
    return bundle.dec_a(_need(bundle.tr_b2a, "tr_b2a")(z))


def cross_identity_b(bundle: ModelBundle, x: Tensor) -> Tensor:
    z = bundle.enc_b2a(x)
    return bundle.dec_b(_need(bundle.tr_a2b, "tr_a2b")(z))


def plain_identity_a(bundle: ModelBundle, x: Tensor) -> Tensor:
    """A image encoded by the A-side encoder and decoded straight back."""
    return bundle.dec_a(bundle.enc_b2a(x))


def plain_identity_b(bundle: ModelBundle, x: Tensor) -> Tensor:
    return bundle.dec_b(bundle.enc_a2b(x))
