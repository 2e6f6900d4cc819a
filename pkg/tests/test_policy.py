import math
from dataclasses import FrozenInstanceError, replace

import numpy as np
import pytest
import torch

from ofa.dataset import ActionChunk, EmptySampleSetError, Observation, TrainingSample, collate
from ofa.policy import (
    NoCoveringChunkError,
    PolicyConfig,
    PolicyFileError,
    PolicyParams,
    PolicyShapeError,
    TemporalAggregator,
    UntrainedPolicyError,
    decode,
    encode,
    image_encode,
    infer,
    init_params,
    kl_divergence,
    load_params,
    loss,
    loss_at,
    sample_noise,
    save_params,
    temporal_aggregate,
    train,
    write_loss_curve,
)


def _samples(config: PolicyConfig, count: int, seed: int = 0, target: float = 0.0) -> list:
    rng = np.random.default_rng(seed)
    size = config.crop_size
    out = []
    for _ in range(count):
        observation = Observation(
            rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8),
            rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8),
            rng.normal(size=12),
        )
        chunk = ActionChunk(target + 0.1 * rng.normal(size=(config.k, 12)))
        out.append(TrainingSample(observation, chunk))
    return out


def _with_vector(params: PolicyParams, vector: np.ndarray) -> PolicyParams:
    return PolicyParams(params.config, params.layout, vector, params.trained)


class TestPolicyConfig:
    def test_unknown_keys(self):
        with pytest.raises(ValueError, match="Unknown policy keys: depth"):
            PolicyConfig.from_dict({"depth": 3})

    def test_attention_heads_must_divide(self):
        with pytest.raises(ValueError, match="divisible"):
            PolicyConfig(attention_dim=5, attention_heads=2)

    def test_unknown_trunk(self):
        with pytest.raises(ValueError, match="trunk"):
            PolicyConfig(trunk="lstm")

    def test_dict_round_trip(self, tiny_policy):
        assert PolicyConfig.from_dict(tiny_policy.to_dict()) == tiny_policy


class TestParams:
    def test_seeded_initialization(self, tiny_policy):
        """The same seed gives the same vector; another seed gives another."""
        a = init_params(tiny_policy, seed=1)
        b = init_params(tiny_policy, seed=1)
        c = init_params(tiny_policy, seed=2)
        assert np.array_equal(a.vector, b.vector)
        assert not np.array_equal(a.vector, c.vector)
        assert a.vector.dtype == np.float32
        assert not a.trained

    def test_layout_covers_vector(self, tiny_policy):
        params = init_params(tiny_policy)
        tensors = params.named_tensors()
        assert sum(t.size for t in tensors.values()) == params.vector.size
        assert "decoder.2.bias" in tensors

    def test_wrong_vector_length(self, tiny_policy):
        params = init_params(tiny_policy)
        with pytest.raises(PolicyShapeError):
            PolicyParams(tiny_policy, params.layout, params.vector[:-1])

    def test_non_finite_vector(self, tiny_policy):
        params = init_params(tiny_policy)
        vector = params.vector.copy()
        vector[0] = np.inf
        with pytest.raises(ValueError, match="non-finite"):
            PolicyParams(tiny_policy, params.layout, vector)

    def test_params_are_immutable(self, tiny_policy):
        """Changes go through replace, which never reuses a cached module."""
        params = init_params(tiny_policy)
        with pytest.raises(FrozenInstanceError):
            params.trained = True
        with pytest.raises(ValueError):
            params.vector[0] = 1.0
        module = params.module()
        trained = replace(params, trained=True)
        assert trained.trained and not params.trained
        assert trained.module() is not module
        assert params.module() is module

    def test_replaced_vector_reaches_the_model(self, tiny_policy):
        params = init_params(tiny_policy)
        observation = _samples(tiny_policy, 1)[0].observation
        before = decode(params, observation, np.zeros(2)).values
        shifted = replace(params, vector=params.vector + np.float32(0.5))
        assert not np.allclose(decode(shifted, observation, np.zeros(2)).values, before)


class TestForward:
    def test_shapes(self, tiny_policy):
        """Image features, latent statistics and decoded chunks have the configured sizes."""
        params = init_params(tiny_policy)
        sample = _samples(tiny_policy, 1)[0]
        features = image_encode(params, sample.observation.left, sample.observation.right)
        assert features.shape == (2 * tiny_policy.feature_dim,)
        stats = encode(params, sample.target_chunk, sample.observation.proprio)
        assert stats.mean.shape == stats.logvar.shape == (tiny_policy.z_dim,)
        chunk = decode(params, sample.observation, np.zeros(tiny_policy.z_dim))
        assert chunk.values.shape == (tiny_policy.k, 12)

    def test_attention_trunk(self, tiny_policy):
        config = replace(tiny_policy, trunk="attention")
        params = init_params(config)
        sample = _samples(config, 1)[0]
        assert decode(params, sample.observation, np.ones(config.z_dim)).values.shape == (config.k, 12)

    def test_swapping_images_changes_features(self, tiny_policy):
        """Left and right features occupy fixed halves, so exchanging the views is visible."""
        params = init_params(tiny_policy)
        sample = _samples(tiny_policy, 1, seed=4)[0]
        left, right = sample.observation.left, sample.observation.right
        straight = image_encode(params, left, right)
        swapped = image_encode(params, right, left)
        assert not np.allclose(straight, swapped)
        half = tiny_policy.feature_dim
        assert np.array_equal(straight[:half], swapped[half:])

    def test_infer_requires_training(self, tiny_policy):
        params = init_params(tiny_policy)
        with pytest.raises(UntrainedPolicyError):
            infer(params, _samples(tiny_policy, 1)[0].observation)

    def test_infer_is_decode_at_prior_mean(self, tiny_policy):
        params = replace(init_params(tiny_policy), trained=True)
        observation = _samples(tiny_policy, 1)[0].observation
        assert np.array_equal(infer(params, observation).values, decode(params, observation, np.zeros(2)).values)

    def test_image_size_checked(self, tiny_policy):
        params = init_params(tiny_policy)
        wrong = np.zeros((16, 16, 3), dtype=np.uint8)
        with pytest.raises(PolicyShapeError, match="8x8x3"):
            image_encode(params, wrong, wrong)

    def test_proprio_width_checked(self, tiny_policy):
        params = init_params(tiny_policy)
        sample = _samples(tiny_policy, 1)[0]
        with pytest.raises(PolicyShapeError, match="proprioception"):
            encode(params, sample.target_chunk, np.zeros(10))


class TestLoss:
    def test_kl_of_prior_is_zero(self):
        assert float(kl_divergence(torch.zeros(3, 4), torch.zeros(3, 4))) == 0.0

    def test_noise_follows_sample_content(self, tiny_policy):
        """Each sample keeps its noise when the batch is reordered."""
        batch = collate(_samples(tiny_policy, 4))
        eps = sample_noise(batch["chunk"], batch["proprio"], 2, seed=5)
        reordered = sample_noise(batch["chunk"][::-1], batch["proprio"][::-1], 2, seed=5)
        assert np.array_equal(eps[::-1], reordered)

    def test_order_invariant(self, tiny_policy):
        """The loss of a batch does not depend on sample order."""
        params = init_params(tiny_policy)
        samples = _samples(tiny_policy, 4)
        a, grad_a = loss(params, samples, seed=3, dtype=torch.float64)
        b, grad_b = loss(params, samples[::-1], seed=3, dtype=torch.float64)
        assert a == pytest.approx(b, rel=1e-12)
        assert np.allclose(grad_a, grad_b, rtol=1e-9, atol=1e-12)

    def test_empty_batch(self, tiny_policy):
        with pytest.raises(EmptySampleSetError):
            loss(init_params(tiny_policy), [])

    def test_gradient_of_output_bias(self, tiny_policy):
        """Central differences on the output bias, where the loss is exactly quadratic."""
        params = init_params(tiny_policy)
        samples = _samples(tiny_policy, 4)
        _, grad = loss(params, samples, seed=1, dtype=torch.float64)
        offset = next(o for name, _, o in params.layout if name == "decoder.2.bias")
        for i in range(offset, offset + 6):
            plus, minus = params.vector.copy(), params.vector.copy()
            plus[i] += np.float32(1e-2)
            minus[i] -= np.float32(1e-2)
            f_plus, _ = loss(_with_vector(params, plus), samples, seed=1, dtype=torch.float64)
            f_minus, _ = loss(_with_vector(params, minus), samples, seed=1, dtype=torch.float64)
            numeric = (f_plus - f_minus) / (float(plus[i]) - float(minus[i]))
            assert numeric == pytest.approx(grad[i], rel=1e-4, abs=1e-8)

    @pytest.mark.parametrize("trunk", ["mlp", "attention"])
    def test_every_tensor_matches_central_differences(self, tiny_policy, trunk):
        """64-bit gradients of the full loss agree with central differences in every layout tensor."""
        config = replace(tiny_policy, trunk=trunk)
        params = init_params(config)
        batch = collate(_samples(config, 2))
        vector = params.vector.astype(np.float64)
        _, grad = loss_at(config, params.layout, vector, batch, seed=1)
        rng = np.random.default_rng(0)
        h = 1e-6
        for name, shape, offset in params.layout:
            size = int(np.prod(shape))
            for i in offset + rng.choice(size, size=min(3, size), replace=False):
                plus, minus = vector.copy(), vector.copy()
                plus[i] += h
                minus[i] -= h
                f_plus, _ = loss_at(config, params.layout, plus, batch, seed=1)
                f_minus, _ = loss_at(config, params.layout, minus, batch, seed=1)
                numeric = (f_plus - f_minus) / (2.0 * h)
                assert numeric == pytest.approx(grad[i], rel=1e-4, abs=1e-8), f"{name}[{i - offset}]"

    def test_zero_when_decoder_reproduces_target(self, tiny_policy):
        """With eta = 0 and the output layer pinned to the target chunk the loss vanishes."""
        config = replace(tiny_policy, eta=0.0)
        params = init_params(config)
        target = np.arange(config.k * 12, dtype=np.float64).reshape(config.k, 12) / 8.0
        samples = [TrainingSample(s.observation, ActionChunk(target)) for s in _samples(config, 3)]
        vector = params.vector.copy()
        for name, shape, offset in params.layout:
            size = int(np.prod(shape))
            if name == "decoder.2.weight":
                vector[offset : offset + size] = 0.0
            elif name == "decoder.2.bias":
                vector[offset : offset + size] = target.reshape(-1)
        value, _ = loss(_with_vector(params, vector), samples, dtype=torch.float64)
        assert value == 0.0


class TestTrain:
    def test_loss_decreases(self, tiny_policy):
        """Fitting a near-constant target lowers the reconstruction error."""
        config = replace(tiny_policy, steps=300, learning_rate=5e-3, log_every=50)
        samples = _samples(config, 8, target=0.5)
        params, curve = train(config, samples)
        assert params.trained
        assert [row[0] for row in curve] == [50, 100, 150, 200, 250, 300]
        assert curve[-1][2] < curve[0][2]
        assert all(math.isfinite(row[1]) for row in curve)

    def test_deterministic(self, tiny_policy):
        """Same config and samples give bit-identical parameters."""
        samples = _samples(tiny_policy, 6)
        a, _ = train(tiny_policy, samples)
        b, _ = train(tiny_policy, samples)
        assert np.array_equal(a.vector, b.vector)

    def test_zero_steps_keeps_initialization(self, tiny_policy):
        config = replace(tiny_policy, steps=0)
        params, curve = train(config, _samples(config, 2))
        assert curve == []
        assert np.array_equal(params.vector, init_params(config).vector)

    def test_kl_weight_shrinks_kl(self, tiny_policy):
        """A heavier KL weight ends training with a smaller KL term."""
        samples = _samples(tiny_policy, 6)
        config = replace(tiny_policy, steps=200, learning_rate=5e-3, log_every=200)
        _, free_curve = train(replace(config, eta=0.0), samples)
        _, weighted_curve = train(replace(config, eta=10.0), samples)
        assert weighted_curve[-1][3] < free_curve[-1][3]

    @pytest.mark.slow
    def test_overfits_one_sample(self, tiny_policy):
        """A single repeated sample is memorised: low MSE and a close prediction at z = 0."""
        sample = _samples(tiny_policy, 1, seed=7)[0]
        config = replace(tiny_policy, steps=2000, learning_rate=1e-3, log_every=500)
        params, curve = train(config, [sample] * config.batch_size)
        assert curve[-1][2] < 1e-3
        predicted = infer(params, sample.observation).values
        assert np.max(np.abs(predicted - sample.target_chunk.values)) < 0.02

    def test_no_samples(self, tiny_policy):
        with pytest.raises(EmptySampleSetError):
            train(tiny_policy, [])


class TestPersistence:
    def test_round_trip(self, tmp_path, tiny_policy):
        params, _ = train(tiny_policy, _samples(tiny_policy, 4))
        path = tmp_path / "policy.params"
        save_params(path, params, config_digest="cfg")
        loaded = load_params(path)
        assert np.array_equal(loaded.vector, params.vector)
        assert loaded.config == tiny_policy
        assert loaded.trained
        assert loaded.layout == params.layout

    def test_tampered_blob(self, tmp_path, tiny_policy):
        path = tmp_path / "policy.params"
        save_params(path, init_params(tiny_policy))
        raw = bytearray(path.read_bytes())
        raw[-1] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(PolicyFileError, match="digest mismatch"):
            load_params(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(PolicyFileError, match="not found"):
            load_params(tmp_path / "nothing.params")

    def test_bad_header(self, tmp_path):
        path = tmp_path / "policy.params"
        path.write_bytes(b"not json\n\x00\x00")
        with pytest.raises(PolicyFileError, match="unreadable parameter header"):
            load_params(path)

    def test_loss_curve_csv(self, tmp_path):
        path = tmp_path / "loss.csv"
        write_loss_curve(path, [(1, 2.5, 2.0, 0.05)], config_digest="abc", seed=4)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "# config_digest=abc seed=4"
        assert lines[1] == "step,total,mse,kl"
        assert lines[2] == "1,2.5,2.0,0.05"


class TestTemporalAggregation:
    def test_weights_favour_older_chunks(self):
        """Covering chunks are averaged with weights exp(-m·age), oldest first."""
        old = ActionChunk(np.ones((3, 12)))
        new = ActionChunk(np.full((3, 12), 3.0))
        action = temporal_aggregate([(1, new), (0, old)], 1, m=0.1)
        w = math.exp(-0.1)
        assert np.allclose(action, (1.0 + 3.0 * w) / (1.0 + w))

    def test_zero_decay_is_mean(self):
        chunks = [(0, ActionChunk(np.zeros((2, 12)))), (1, ActionChunk(np.full((2, 12), 2.0)))]
        assert np.allclose(temporal_aggregate(chunks, 1, m=0.0), 1.0)

    def test_no_covering_chunk(self):
        with pytest.raises(NoCoveringChunkError, match="step 5"):
            temporal_aggregate([(0, ActionChunk(np.zeros((3, 12))))], 5)

    def test_aggregator_drops_expired_chunks(self):
        aggregator = TemporalAggregator(m=0.1)
        aggregator.add(0, ActionChunk(np.zeros((2, 12))))
        aggregator.add(1, ActionChunk(np.ones((2, 12))))
        assert np.allclose(aggregator.action(2), 1.0)
        assert len(aggregator.pending) == 1
