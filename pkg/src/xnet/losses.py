"""Training objective: least-squares adversarial terms plus four L1
consistency terms tying the two autoencoding routes together.

Per-term shapes of the generator objective, writing enc/dec/tr for the
bundle's networks and A/B for the two domains:

  gan   sq_mean(disc_b(dec_b(enc_a2b(x_a))), 1) + mirrored for A
  id    l1( dec_a(enc_b2a(x_a)), x_a )          + mirrored   (no translator)
  ctc   l1( tr_a2b(enc_b2a(x_a)), enc_a2b(x_a) ) + mirrored  (latent space)
  zid   l1( dec_a(tr_b2a(enc_a2b(x_a))), x_a )  + mirrored
  zcyc  l1( tr_a2b(tr_b2a(z_b)), z_b ) + l1( tr_b2a(tr_a2b(z_a)), z_a )
        with z_b = enc_a2b(x_a) and z_a = enc_b2a(x_b)

Every term is the sum of its two directional parts; the objective is the
weight vector dotted with the term values.  The four encoder evaluations
(each encoder on each domain's batch) are computed at most once per step
and shared across terms.  Discriminator terms use labels 1 (real) and 0
(fake); the discriminator's own loss is halved and sees fakes detached
from the generator tape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

from .networks import ModelBundle, cross_identity_a, cross_identity_b
from .tensor import ShapeError, Tensor, add, l1_mean, scale, sq_mean

__all__ = [
    "LossWeights",
    "TermFlags",
    "LossReport",
    "lsgan_generator_loss",
    "lsgan_discriminator_loss",
    "identity_loss",
    "cross_translation_loss",
    "latent_cross_identity_loss",
    "latent_cycle_loss",
    "total_generator_loss",
]

TERM_NAMES = ("gan", "id", "ctc", "zid", "zcyc")


@dataclass(frozen=True)
class LossWeights:
    gan: float = 1.0
    id: float = 3.0
    ctc: float = 3.0
    zid: float = 6.0
    zcyc: float = 6.0

    def __post_init__(self):
        for name in TERM_NAMES:
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name!r} must be non-negative, got {getattr(self, name)}")

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, n) for n in TERM_NAMES)


@dataclass(frozen=True)
class TermFlags:
    """Ablation switches; a term contributes only if enabled and weighted."""

    gan: bool = True
    id: bool = True
    ctc: bool = True
    zid: bool = True
    zcyc: bool = True

    @classmethod
    def only(cls, *names: str) -> "TermFlags":
        unknown = set(names) - set(TERM_NAMES)
        if unknown:
            raise ValueError(f"unknown loss terms: {sorted(unknown)}")
        return cls(**{n: (n in names) for n in TERM_NAMES})


@dataclass
class LossReport:
    """Per-step scalar summary; total is the weighted sum of enabled terms."""

    gan_g: float = 0.0
    gan_d: float = 0.0
    id: float = 0.0
    ctc: float = 0.0
    zid: float = 0.0
    zcyc: float = 0.0
    total: float = 0.0

    @classmethod
    def from_terms(cls, weights: LossWeights, *, gan_g=0.0, gan_d=0.0, id=0.0, ctc=0.0, zid=0.0, zcyc=0.0):
        vals = {"gan": gan_g, "id": id, "ctc": ctc, "zid": zid, "zcyc": zcyc}
        total = sum(getattr(weights, n) * vals[n] for n in TERM_NAMES)
        return cls(gan_g=gan_g, gan_d=gan_d, id=id, ctc=ctc, zid=zid, zcyc=zcyc, total=total)


def lsgan_generator_loss(disc: Callable[[Tensor], Tensor], fake: Tensor) -> Tensor:
    """Least-squares term pushing the score map of a fake toward 1."""
    return sq_mean(disc(fake), 1.0)


def lsgan_discriminator_loss(disc: Callable[[Tensor], Tensor], real: Tensor, fake: Tensor) -> Tensor:
    """Halved least-squares term: real toward 1, detached fake toward 0."""
    real_term = sq_mean(disc(real), 1.0)
    fake_term = sq_mean(disc(fake.detach()), 0.0)
    return scale(add(real_term, fake_term), 0.5)


def identity_loss(bundle, x_a: Tensor, x_b: Tensor,
                  z_a_from_a: Optional[Tensor] = None, z_b_from_b: Optional[Tensor] = None) -> Tensor:
    """Same-domain autoencoding (encode with the opposite-direction encoder,
    decode straight back); translators never participate."""
    z_a_from_a = bundle.enc_b2a(x_a) if z_a_from_a is None else z_a_from_a
    z_b_from_b = bundle.enc_a2b(x_b) if z_b_from_b is None else z_b_from_b
    return add(
        l1_mean(bundle.dec_a(z_a_from_a), x_a),
        l1_mean(bundle.dec_b(z_b_from_b), x_b),
    )


def cross_translation_loss(bundle, x_a: Tensor, x_b: Tensor,
                           z_b: Optional[Tensor] = None, z_a: Optional[Tensor] = None,
                           z_a_from_a: Optional[Tensor] = None, z_b_from_b: Optional[Tensor] = None) -> Tensor:
    """Latent-space agreement: translating the opposite encoder's code must
    land on the direct encoder's code.  Both sides of each L1 carry gradient."""
    z_b = bundle.enc_a2b(x_a) if z_b is None else z_b
    z_a = bundle.enc_b2a(x_b) if z_a is None else z_a
    z_a_from_a = bundle.enc_b2a(x_a) if z_a_from_a is None else z_a_from_a
    z_b_from_b = bundle.enc_a2b(x_b) if z_b_from_b is None else z_b_from_b
    return add(
        l1_mean(bundle.tr_a2b(z_a_from_a), z_b),
        l1_mean(bundle.tr_b2a(z_b_from_b), z_a),
    )


def latent_cross_identity_loss(bundle, x_a: Tensor, x_b: Tensor,
                               z_b: Optional[Tensor] = None, z_a: Optional[Tensor] = None) -> Tensor:
    """Full round trip through the opposite domain's latent and translator."""
    if z_b is None or z_a is None:
        return add(
            l1_mean(cross_identity_a(bundle, x_a), x_a),
            l1_mean(cross_identity_b(bundle, x_b), x_b),
        )
    return add(
        l1_mean(bundle.dec_a(bundle.tr_b2a(z_b)), x_a),
        l1_mean(bundle.dec_b(bundle.tr_a2b(z_a)), x_b),
    )


def latent_cycle_loss(bundle, z_a: Tensor, z_b: Tensor) -> Tensor:
    """Translator round trips must return each latent to itself."""
    return add(
        l1_mean(bundle.tr_a2b(bundle.tr_b2a(z_b)), z_b),
        l1_mean(bundle.tr_b2a(bundle.tr_a2b(z_a)), z_a),
    )


def total_generator_loss(bundle, x_a: Tensor, x_b: Tensor,
                         weights: LossWeights = LossWeights(),
                         flags: TermFlags = TermFlags()):
    """Weighted sum of the enabled generator-side terms.

    Returns (total Tensor, LossReport, fakes dict).  fakes carries the
    translated images ('a2b', 'b2a') when the adversarial term ran, still
    attached to the tape; the discriminator phase detaches them itself.
    The four encoder outputs are memoized so each is computed at most once.
    """
    if x_a.data.shape != x_b.data.shape:
        raise ShapeError(f"domain batches differ in shape: {x_a.data.shape} vs {x_b.data.shape}")

    lat: dict[str, Tensor] = {}

    def enc(key: str) -> Tensor:
        if key not in lat:
            net, img = {
                "z_b": (bundle.enc_a2b, x_a),        # A image onto the B-side latent
                "z_a": (bundle.enc_b2a, x_b),        # B image onto the A-side latent
                "z_a_from_a": (bundle.enc_b2a, x_a),  # identity/latent-agreement routes
                "z_b_from_b": (bundle.enc_a2b, x_b),
            }[key]
            lat[key] = net(img)
        return lat[key]

    active = {n: (getattr(flags, n) and getattr(weights, n) > 0.0) for n in TERM_NAMES}
    terms: dict[str, Tensor] = {}
    fakes: dict[str, Tensor] = {}

    if active["gan"]:
        if bundle.disc_a is None or bundle.disc_b is None:
            raise ShapeError("adversarial term enabled but the bundle has no discriminators")
        fakes["a2b"] = bundle.dec_b(enc("z_b"))
        fakes["b2a"] = bundle.dec_a(enc("z_a"))
        terms["gan"] = add(
            lsgan_generator_loss(bundle.disc_b, fakes["a2b"]),
            lsgan_generator_loss(bundle.disc_a, fakes["b2a"]),
        )
    if active["id"]:
        terms["id"] = identity_loss(bundle, x_a, x_b, enc("z_a_from_a"), enc("z_b_from_b"))
    if active["ctc"]:
        terms["ctc"] = cross_translation_loss(
            bundle, x_a, x_b, enc("z_b"), enc("z_a"), enc("z_a_from_a"), enc("z_b_from_b")
        )
    if active["zid"]:
        terms["zid"] = latent_cross_identity_loss(bundle, x_a, x_b, enc("z_b"), enc("z_a"))
    if active["zcyc"]:
        terms["zcyc"] = latent_cycle_loss(bundle, enc("z_a"), enc("z_b"))

    total: Optional[Tensor] = None
    for name, term in terms.items():
        piece = scale(term, getattr(weights, name))
        total = piece if total is None else add(total, piece)
    if total is None:
        total = Tensor(x_a.data.dtype.type(0.0))

    report = LossReport.from_terms(
        weights,
        gan_g=terms["gan"].item() if "gan" in terms else 0.0,
        id=terms["id"].item() if "id" in terms else 0.0,
        ctc=terms["ctc"].item() if "ctc" in terms else 0.0,
        zid=terms["zid"].item() if "zid" in terms else 0.0,
        zcyc=terms["zcyc"].item() if "zcyc" in terms else 0.0,
    )
    report.total = total.item()
    return total, report, fakes
