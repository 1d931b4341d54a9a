import warnings

import numpy as np
import pytest

from msic.autoencoder import (
    FULL_SCALE_PRESET,
    Autoencoder,
    CodecConfig,
    TrainSchedule,
    evaluate_distortion,
    random_crops,
    reflect_pad,
    single_scale,
    train_autoencoder,
)
from msic.metrics import distortion_loss
from msic.tensor import ConfigurationError
from msic.toydata import toy_corpus

SMALL = CodecConfig(M=2, channels=(2, 3), depth=4, hidden_width=6, K=2)


def generic_point(model, rng, scale=0.05):
    """Move off the initial point, where zero biases and a zero output layer put
    many pre-activations exactly on leaky-relu kinks and zero the analyzer gradient."""
    for p in model.parameters():
        if p.name.endswith("bias"):
            p.data[...] += rng.normal(0, scale, p.shape)
    last = model.syn_pre[-1].weight
    last.data[...] = rng.uniform(-scale, scale, last.shape)
    return model


def surrogate_gradient_error(model, x, rng, per_param=4, step=1e-5):
    """Max |hard-path gradient - central difference of the soft surrogate| over sampled coordinates."""
    offsets = model.surrogate_offsets(x)

    def soft():
        return distortion_loss(x, model.synthesize(model.quantize(model.analyze(x), False, offsets))).item()

    params = model.parameters()
    for p in params:
        p.grad = None
    hard = distortion_loss(x, model.forward(x, train=False))
    assert hard.item() == soft()
    hard.backward()
    worst = 0.0
    for p in params:
        flat, grad = p.data.reshape(-1), p.grad.reshape(-1)
        for i in rng.choice(flat.size, size=min(per_param, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + step
            up = soft()
            flat[i] = orig - step
            down = soft()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            worst = max(worst, abs(grad[i] - numeric) / max(1.0, abs(numeric)))
    return worst


class TestConfig:
    def test_preset(self):
        assert FULL_SCALE_PRESET.depth == 6 and FULL_SCALE_PRESET.M == 4 and FULL_SCALE_PRESET.channels[-1] == 32

    @pytest.mark.parametrize(
        "kw",
        [dict(M=0, channels=()), dict(M=2, channels=(1,)), dict(channels=(1, 2, 4, 0)), dict(N=1), dict(depth=5), dict(K=3)],
    )
    def test_invalid(self, kw):
        with pytest.raises((ConfigurationError, ValueError)):
            CodecConfig(**kw)

    def test_header_round_trip(self):
        cfg = CodecConfig(M=3, channels=(0, 3, 5), depth=5, N=13, u=3.5, K=6)
        values = {k: (",".join(map(str, v)) if k == "channels" else str(v)) for k, v in cfg.to_header().items()}
        assert CodecConfig.from_header(values) == cfg

    def test_single_scale(self):
        cfg = single_scale(CodecConfig(), 3, 11)
        assert cfg.channels == (0, 0, 11) and cfg.M == 3 and cfg.depth == 5

    def test_pad_multiple(self):
        assert CodecConfig(M=4, K=4).pad_multiple == 32
        assert CodecConfig(M=2, depth=4, channels=(1, 1), K=8).pad_multiple == 64


class TestShapes:
    def test_preset_shapes(self):
        ae = Autoencoder(CodecConfig(channels=(2, 8, 24, 32), hidden_width=4))
        x = np.random.default_rng(0).random((1, 3, 64, 64)).astype(np.float32)
        z = ae.analyze(x)
        assert [t.shape[1:] for t in z] == [(2, 16, 16), (8, 8, 8), (24, 4, 4), (32, 2, 2)]
        assert ae.forward(x, train=False).shape == (1, 3, 64, 64)

    @pytest.mark.parametrize("h,w", [(32, 32), (32, 64), (96, 32)])
    def test_round_trip_dims(self, h, w):
        ae = Autoencoder(CodecConfig(hidden_width=4))
        x = np.zeros((3, h, w), np.float32)
        levels = ae.encode_levels(x)
        assert [l.shape for l in levels] == ae.config.feature_shapes(h, w)
        assert ae.decode_levels(levels).shape == (3, h, w)

    def test_indivisible_rejected(self):
        with pytest.raises(ConfigurationError):
            Autoencoder(SMALL).analyze(np.zeros((1, 3, 20, 16)))

    def test_empty_scales(self):
        cfg = single_scale(CodecConfig(hidden_width=4), 2, 3)
        ae = Autoencoder(cfg)
        levels = ae.encode_levels(np.random.default_rng(1).random((3, 32, 32)).astype(np.float32))
        assert levels[0].shape == (0, 8, 8) and levels[1].shape == (3, 4, 4)
        assert ae.decode_levels(levels).shape == (3, 32, 32)

    def test_synthesize_channel_mismatch(self):
        ae = Autoencoder(SMALL)
        with pytest.raises(ConfigurationError):
            ae.synthesize([np.zeros((1, 2, 4, 4)), np.zeros((1, 2, 2, 2))])


class TestDeterminism:
    def test_zero_image_zero_bias(self):
        ae = Autoencoder(SMALL)
        for z in ae.analyze(np.zeros((1, 3, 16, 16), np.float32)):
            assert np.all(z.data == 0)

    def test_constant_output_for_zero_weights(self):
        ae = Autoencoder(SMALL)
        for p in ae.synthesizer_parameters():
            p.data[...] = 0
        ae.syn_pre[-1].bias.data[...] = 0.5
        out = ae.decode_levels([np.zeros((2, 4, 4)), np.zeros((3, 2, 2))])
        assert np.all(out == 0.5)

    def test_bitwise_repeatable(self):
        ae = Autoencoder(SMALL, seed=3)
        x = np.random.default_rng(2).random((3, 32, 32)).astype(np.float32)
        a, b = ae.encode_levels(x), ae.encode_levels(x.copy())
        assert all(u.tobytes() == v.tobytes() for u, v in zip(a, b))
        assert ae.decode_levels(a).tobytes() == ae.decode_levels(b).tobytes()

    def test_same_seed_same_weights(self):
        a, b = Autoencoder(SMALL, seed=5), Autoencoder(SMALL, seed=5)
        assert all(p.data.tobytes() == q.data.tobytes() for p, q in zip(a.parameters(), b.parameters()))

    def test_levels_in_range(self):
        ae = Autoencoder(SMALL, seed=4)
        for l in ae.encode_levels(np.random.default_rng(3).random((3, 32, 32)).astype(np.float32)):
            assert l.min() >= 0 and l.max() <= SMALL.N - 1 and l.dtype == np.int64

    def test_output_in_unit_range(self):
        ae = Autoencoder(SMALL, seed=6)
        out = ae.forward(np.random.default_rng(4).random((2, 3, 16, 16)), train=True).data
        assert out.min() >= 0 and out.max() <= 1


class TestGradient:
    def test_initial_output_is_flat_grey(self):
        out = Autoencoder(SMALL).forward(np.random.default_rng(0).random((2, 3, 16, 16)), train=False).data
        assert np.all(out == 0.5)

    def test_end_to_end_surrogate(self):
        model = generic_point(Autoencoder(SMALL, seed=1, dtype=np.float64), np.random.default_rng(1))
        x = toy_corpus(1, 32, 32, seed=3)[0][None].astype(np.float64)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            assert surrogate_gradient_error(model, x, np.random.default_rng(0)) < 1e-3

    def test_gradient_reaches_analyzer(self):
        model = generic_point(Autoencoder(SMALL, seed=1, dtype=np.float64), np.random.default_rng(2))
        x = np.stack(toy_corpus(2, 32, 32, seed=4)).astype(np.float64)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            distortion_loss(x, model.forward(x, train=True)).backward()
        assert np.abs(model.trunk[0].weight.grad).max() > 0


class TestPadding:
    def test_reflect(self):
        img = np.arange(12, dtype=np.float32).reshape(1, 3, 4)
        out = reflect_pad(img, 4)
        assert out.shape == (1, 4, 4)
        np.testing.assert_array_equal(out[0, 3], img[0, 1])

    def test_noop(self):
        img = np.zeros((3, 8, 8))
        assert reflect_pad(img, 8) is img

    def test_tiny_image(self):
        out = reflect_pad(np.ones((3, 1, 1)), 16)
        assert out.shape == (3, 16, 16) and np.all(out == 1)

    def test_random_crops_deterministic(self):
        imgs = toy_corpus(3, 40, 40, seed=0)
        a = random_crops(imgs, 16, 5, np.random.default_rng(1))
        b = random_crops(imgs, 16, 5, np.random.default_rng(1))
        assert a.shape == (5, 3, 16, 16) and a.tobytes() == b.tobytes()


class TestTraining:
    def test_zero_updates(self):
        model, state, log = train_autoencoder(toy_corpus(2, 32, 32), SMALL, TrainSchedule(updates=0, batch=2, crop=16))
        fresh = Autoencoder(SMALL)
        assert all(p.data.tobytes() == q.data.tobytes() for p, q in zip(model.parameters(), fresh.parameters()))
        assert state.step == 0 and log.updates == []

    def test_learning_rate_schedule(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            _, _, log = train_autoencoder(toy_corpus(2, 32, 32), SMALL, TrainSchedule(updates=8, batch=2, crop=16))
        assert log.lr_scale[:6] == [1.0] * 6
        assert log.lr_scale[6] == pytest.approx(0.5) and log.lr_scale[7] == 0.0

    def test_resume_matches_uninterrupted(self):
        images = toy_corpus(3, 32, 32, seed=1)
        sched = TrainSchedule(updates=6, batch=2, crop=16, seed=2)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            full, _, _ = train_autoencoder(images, SMALL, sched)
            part, state, _ = train_autoencoder(images, SMALL, sched, stop=3)
            resumed, _, _ = train_autoencoder(images, SMALL, sched, model=part, state=state, start=3)
        assert all(p.data.tobytes() == q.data.tobytes() for p, q in zip(full.state_arrays(), resumed.state_arrays()))

    def test_short_run_reduces_distortion(self):
        images = toy_corpus(40, 32, 32, seed=5)
        held_out = toy_corpus(4, 32, 32, seed=6)
        sched = TrainSchedule(updates=80, batch=4, crop=32, lr=3e-3)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            before = evaluate_distortion(Autoencoder(SMALL, sched.seed), held_out)
            model, _, _ = train_autoencoder(images, SMALL, sched)
            after = evaluate_distortion(model, held_out)
        assert after < before
