"""Top-level acceptance gate: eight behavior checks, one pass/fail line each.

Each test prints "[acceptance] <name>: PASS/FAIL" through the capture-
disabled channel so the verdicts are visible in plain pytest output.
"""

import time
from contextlib import contextmanager

import numpy as np
import pytest

from oracles import assert_close
from xnet import tensor as T
from xnet.data import SynthSpec, decode_ppm, encode_ppm, from_batch, synth_generate, to_batch
from xnet.evaluation import (
    extract_features,
    fid_between,
    fit_gaussian,
    foreground_extract,
    frechet_distance,
    luma,
    roc_auc,
)
from xnet.losses import LossWeights, TermFlags, lsgan_discriminator_loss, total_generator_loss
from xnet.networks import ArchSpec, ModelBundle, translate_a2b, translate_b2a
from xnet.optim import set_trainable
from xnet.tensor import Tape, Tensor, backward
from xnet.training import HistoryBuffer, TrainConfig, load_checkpoint, save_checkpoint, train_loop

# pinned smoke scale: 16px images, 16 latent channels, width-8 trunks, batch 1
SMOKE = dict(image_side=16, latent_channels=16, base_width=8, batch_size=1, seed=0, n_res_blocks=1)
MICRO = ArchSpec(image_side=8, base_width=4, latent_channels=4, n_res_blocks=1)


@pytest.fixture()
def announce(capsys):
    @contextmanager
    def _announce(label):
        try:
            yield
        except BaseException:
            with capsys.disabled():
                print(f"\n[acceptance] {label}: FAIL")
            raise
        with capsys.disabled():
            print(f"\n[acceptance] {label}: PASS")

    return _announce


# ---------------------------------------------------------------------------
# 1. analytic gradients match central finite differences


def _fd_check(inputs, forward, rtol, rng, samples=4, eps=1e-4):
    """Compare backward() against central differences on sampled coordinates."""
    for x in inputs:  # gradients accumulate across tapes; start clean
        x.grad = None
    with Tape() as tape:
        out = forward()
    backward(out, tape)
    for x in inputs:
        assert x.grad is not None, "input never received a gradient"
        flat = x.data.reshape(-1)
        coords = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        for idx in coords:
            keep = flat[idx]
            flat[idx] = keep + eps
            hi = float(forward().data)
            flat[idx] = keep - eps
            lo = float(forward().data)
            flat[idx] = keep
            fd = (hi - lo) / (2 * eps)
            an = float(x.grad.reshape(-1)[idx])
            assert_close(an, fd, atol=5e-7, rtol=rtol)


def _rand(rng, *shape):
    return Tensor(rng.uniform(-0.8, 0.8, size=shape), )


def test_gradient_suite(announce):
    with announce("analytic gradients match finite differences (per-op 1e-3, composite 2e-3)"):
        t0 = time.monotonic()
        rng = np.random.default_rng(0)

        def t64(*shape, lo=-0.8, hi=0.8):
            v = Tensor(rng.uniform(lo, hi, size=shape))
            v.grad_enabled = True
            return v

        proj = {}

        def head(out):  # project to a scalar with a fixed random direction
            key = out.data.shape
            if key not in proj:
                proj[key] = Tensor(np.random.default_rng(99).normal(size=key))
            return T.sum_all(T.mul(out, proj[key]))

        a, b = t64(2, 3, 5, 5), t64(2, 3, 5, 5)
        k = t64(4, 3, 3, 3, lo=-0.5, hi=0.5)
        kt = t64(3, 4, 3, 3, lo=-0.5, hi=0.5)
        bias = t64(3)
        gain, shift = t64(3, lo=0.5, hi=1.5), t64(3)
        per_op = [
            ([a, b], lambda: head(T.add(a, b))),
            ([a, b], lambda: head(T.sub(a, b))),
            ([a, b], lambda: head(T.mul(a, b))),
            ([a], lambda: head(T.scale(a, 1.7))),
            ([a, bias], lambda: head(T.add_channel_bias(a, bias))),
            ([a], lambda: head(T.relu(a))),
            ([a], lambda: head(T.leaky_relu(a, 0.2))),
            ([a], lambda: head(T.tanh(a))),
            ([a, b], lambda: T.l1_mean(a, b)),
            ([a], lambda: T.sq_mean(a, 1.0)),
            ([a], lambda: T.sum_all(a)),
            ([a], lambda: head(T.pad_reflect(a, 2))),
            ([a, k], lambda: head(T.conv2d(a, k, stride=1, padding=1))),
            ([a, k], lambda: head(T.conv2d(a, k, stride=2, padding=1))),
            ([a, kt], lambda: head(T.conv2d_transpose(a, kt, stride=2, padding=1, output_padding=1))),
            ([a, gain, shift], lambda: head(T.instance_norm(a, gain, shift))),
        ]
        for inputs, forward in per_op:
            _fd_check(inputs, forward, rtol=1e-3, rng=rng)

        # composite: the entire weighted training objective on a micro model,
        # differentiated with respect to every parameter of all eight networks
        bundle = ModelBundle.build(MICRO, np.random.default_rng(1), dtype=np.float64)
        x_a = Tensor(np.random.default_rng(2).uniform(-0.9, 0.9, (1, 3, 8, 8)))
        x_b = Tensor(np.random.default_rng(3).uniform(-0.9, 0.9, (1, 3, 8, 8)))
        weights, flags = LossWeights(), TermFlags()

        def composite():
            total, _, _ = total_generator_loss(bundle, x_a, x_b, weights, flags)
            return total

        # finer step: the composite has high-curvature coordinates (instance
        # norms over few positions) where eps=1e-4 truncation dominates
        params = [p.value for p in bundle.named_parameters().values()]
        _fd_check(params, composite, rtol=2e-3, rng=rng, samples=3, eps=1e-5)

        elapsed = time.monotonic() - t0
        assert elapsed < 120.0, f"gradient suite took {elapsed:.1f}s (budget 120s)"


# ---------------------------------------------------------------------------
# 2. per-term gradient routing


WIRING = {
    "gan": {"enc_a2b", "enc_b2a", "dec_a", "dec_b"},
    "id": {"enc_a2b", "enc_b2a", "dec_a", "dec_b"},
    "ctc": {"enc_a2b", "enc_b2a", "tr_a2b", "tr_b2a"},
    "zid": {"enc_a2b", "enc_b2a", "dec_a", "dec_b", "tr_a2b", "tr_b2a"},
    "zcyc": {"enc_a2b", "enc_b2a", "tr_a2b", "tr_b2a"},
}


def _touched(bundle):
    return {name.split("/", 1)[0] for name, p in bundle.named_parameters().items()
            if p.value.grad is not None}


def test_gradient_routing(announce):
    with announce("loss terms reach exactly their own networks; disc step only its disc"):
        bundle = ModelBundle.build(MICRO, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        x_a = Tensor(rng.uniform(-0.9, 0.9, (1, 3, 8, 8)).astype(np.float32))
        x_b = Tensor(rng.uniform(-0.9, 0.9, (1, 3, 8, 8)).astype(np.float32))

        for term, expected in WIRING.items():
            for p in bundle.named_parameters().values():
                p.value.grad = None
            set_trainable(bundle.discriminator_parameters(), False)
            try:
                with Tape() as tape:
                    total, _, _ = total_generator_loss(bundle, x_a, x_b, LossWeights(), TermFlags.only(term))
                backward(total, tape)
            finally:
                set_trainable(bundle.discriminator_parameters(), True)
            assert _touched(bundle) == expected, f"term {term!r} touched {_touched(bundle)}"

        # discriminator update: only that discriminator's parameters
        for p in bundle.named_parameters().values():
            p.value.grad = None
        fake = translate_a2b(bundle, x_a).detach()
        with Tape() as tape:
            loss = lsgan_discriminator_loss(bundle.disc_b, x_b, fake)
        backward(loss, tape)
        assert _touched(bundle) == {"disc_b"}


# ---------------------------------------------------------------------------
# 3. distribution distance oracle


def test_distribution_distance(announce):
    with announce("frechet distance: closed forms 1e-6, sampled 5%, self-distance 1e-8"):
        rng = np.random.default_rng(1)
        d = 16
        mu1, mu2 = rng.normal(size=d), rng.normal(size=d)
        v1, v2 = rng.uniform(0.5, 3.0, d), rng.uniform(0.5, 3.0, d)
        expected = np.sum((mu1 - mu2) ** 2) + np.sum((np.sqrt(v1) - np.sqrt(v2)) ** 2)
        got = frechet_distance(mu1, np.diag(v1), mu2, np.diag(v2))
        assert got == pytest.approx(expected, rel=1e-6)

        mu = np.zeros(4)
        assert frechet_distance(mu, np.eye(4), mu + 3.0, np.eye(4)) == pytest.approx(36.0, rel=1e-6)
        assert frechet_distance(mu, 4 * np.eye(4), mu, np.eye(4)) == pytest.approx(4.0, rel=1e-6)

        rng = np.random.default_rng(7)
        n = 10_000
        shift = np.full(8, np.sqrt(0.5))  # analytic distance 4.0
        x = rng.normal(size=(n, 8))
        y = rng.normal(size=(n, 8)) + shift
        sampled = frechet_distance(*fit_gaussian(x), *fit_gaussian(y))
        assert sampled == pytest.approx(4.0, rel=0.05)

        imgs = np.random.default_rng(0).integers(0, 256, size=(64, 16, 16, 3), dtype=np.uint8)
        assert fid_between(imgs, imgs.copy()) <= 1e-8


# ---------------------------------------------------------------------------
# 4. history buffer statistics


def test_history_buffer(announce):
    with announce("history buffer: exact fill phase, swap rate 0.5 +/- 0.05"):
        buf = HistoryBuffer(5, np.random.default_rng(3))
        for i in range(5):  # fill phase returns every fresh image unchanged
            out = buf.query(Tensor(np.full((1, 3, 4, 4), float(i), dtype=np.float32)))
            assert np.all(out.data == np.float32(i))
        assert len(buf) == 5

        trials = 10_000
        swaps = 0
        for i in range(trials):
            v = np.float32(10.0 + i)
            out = buf.query(Tensor(np.full((1, 3, 4, 4), float(v), dtype=np.float32)))
            if out.data[0, 0, 0, 0] != v:
                swaps += 1
        assert abs(swaps / trials - 0.5) < 0.05, f"swap rate {swaps / trials}"


# ---------------------------------------------------------------------------
# 5. convergence smoke on the invert task


def _fid_a2b(bundle, a, b):
    fakes = [from_batch(translate_a2b(bundle, to_batch(a[i : i + 1])))[0] for i in range(len(a))]
    return frechet_distance(*fit_gaussian(extract_features(np.stack(fakes))),
                            *fit_gaussian(extract_features(b)))


def test_convergence_smoke(announce):
    with announce("500-step smoke: id+zid halves; full objective beats adversarial-only on FID"):
        t0 = time.monotonic()
        a, b, _ = synth_generate(SynthSpec(task="invert", count=2, side=16, seed=0))
        series = []
        cfg = TrainConfig(epochs=250, **SMOKE)  # 2 images, batch 1 -> 500 steps
        full_bundle, _ = train_loop(cfg, a, b, sink=lambda e, s, lr, r: series.append(r.id + r.zid))
        assert len(series) == 500
        assert series[-1] <= 0.5 * series[0], f"step 500 at {series[-1]:.4f} vs step 1 {series[0]:.4f}"

        gan_cfg = TrainConfig(epochs=250, flags=TermFlags.only("gan"), **SMOKE)
        gan_bundle, _ = train_loop(gan_cfg, a, b)
        fid_full = _fid_a2b(full_bundle, a, b)
        fid_gan = _fid_a2b(gan_bundle, a, b)
        assert fid_full <= fid_gan, f"full {fid_full:.4f} vs adversarial-only {fid_gan:.4f}"

        elapsed = time.monotonic() - t0
        assert elapsed < 900.0, f"smoke took {elapsed:.1f}s (budget 900s)"


# ---------------------------------------------------------------------------
# 6. segmentation by translation to the white-background domain


def test_segmentation_pipeline(announce):
    with announce("foreground scores vs masks: AUC >= 0.8; whitening invariant exhaustive"):
        a, b, masks = synth_generate(SynthSpec(task="segmentation", count=4, side=16, seed=0))
        bundle, _ = train_loop(TrainConfig(epochs=125, **SMOKE), a, b)  # 500 steps
        scores, labels = [], []
        for i in range(len(b)):
            img = from_batch(translate_b2a(bundle, to_batch(b[i : i + 1])))[0]
            fg = foreground_extract(img)
            # invariant: every output pixel is pure white or exactly the input pixel
            same = np.all(fg == img, axis=-1)
            white = np.all(fg == 255, axis=-1)
            assert np.all(same | white)
            assert np.array_equal(fg[luma(img) > 243.0], np.full_like(fg[luma(img) > 243.0], 255))
            scores.append((255.0 - luma(fg)).reshape(-1))
            labels.append((masks[i] > 127).astype(int).reshape(-1))
        auc = roc_auc(np.concatenate(scores), np.concatenate(labels))
        assert auc >= 0.8, f"AUC {auc:.4f}"


# ---------------------------------------------------------------------------
# 7. shape grid and byte-exact formats


def test_shapes_and_formats(announce, tmp_path):
    with announce("shape grid, checkpoint and P6 round-trips bitwise, luma threshold strict"):
        rng = np.random.default_rng(0)
        for side in (8, 16, 32, 64):
            for cz in (4, 8, 256):
                spec = ArchSpec(image_side=side, base_width=8, latent_channels=cz, n_res_blocks=1)
                bundle = ModelBundle.build(spec, np.random.default_rng(1))
                x = Tensor(rng.uniform(-0.9, 0.9, (1, 3, side, side)).astype(np.float32))
                z = bundle.enc_a2b(x)
                assert z.data.shape == (1, cz, side // 4, side // 4)
                assert bundle.tr_a2b(z).data.shape == z.data.shape
                y = bundle.dec_b(z)
                assert y.data.shape == (1, 3, side, side)
                # deepest 4x4-stride stack whose score map stays >= 1 px
                n = max(k for k in (1, 2, 3) if side // 2 ** k >= 3)
                s = side
                for _ in range(n):
                    s = s // 2
                assert bundle.disc_b(y).data.shape == (1, 1, s - 2, s - 2)

        # checkpoint round-trip: bytes in, identical bytes out
        micro = ModelBundle.build(MICRO, np.random.default_rng(5))
        p1, p2 = tmp_path / "a.xnet", tmp_path / "b.xnet"
        save_checkpoint(micro, p1, epoch=9)
        ckpt = load_checkpoint(p1)
        clone = ModelBundle.build(MICRO, np.random.default_rng(6))
        from xnet.training import apply_checkpoint

        apply_checkpoint(ckpt, clone)
        save_checkpoint(clone, p2, epoch=9)
        assert p1.read_bytes() == p2.read_bytes()

        # P6 image bytes survive a decode/encode cycle untouched
        img = np.random.default_rng(7).integers(0, 256, size=(13, 9, 3), dtype=np.uint8)
        blob = encode_ppm(img)
        assert encode_ppm(decode_ppm(blob)) == blob

        # luminance threshold: 243 stays, 244 goes white
        probe = np.zeros((1, 2, 3), dtype=np.uint8)
        probe[0, 0] = 243
        probe[0, 1] = 244
        out = foreground_extract(probe)
        assert np.array_equal(out[0, 0], [243, 243, 243])
        assert np.array_equal(out[0, 1], [255, 255, 255])


# ---------------------------------------------------------------------------
# 8. bitwise reproducible training


def test_reproducible_training(announce, tmp_path):
    with announce("identical config + seed give bitwise-identical checkpoints"):
        from xnet.cli import main

        data = tmp_path / "data"
        assert main(["synth-data", "--task", "invert", "--count", "2", "--side", "16",
                     "--seed", "0", "--out", str(data)]) == 0
        cfg = tmp_path / "smoke.cfg"
        cfg.write_text(
            "epochs = 4\nimage_side = 16\nbase_width = 8\nlatent_channels = 16\nn_res_blocks = 1\n"
        )
        outs = []
        for run in ("r1", "r2"):
            out = tmp_path / run
            assert main(["train", "--data", str(data), "--out", str(out), "--config", str(cfg)]) == 0
            outs.append((out / "final.xnet").read_bytes())
        assert outs[0] == outs[1]
