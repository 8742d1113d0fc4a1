import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from sleepseq.autodiff import NumericError, Tensor, backward, tsum, zero_grads
from sleepseq.model import ModelConfig, SleepScorer
from sleepseq.pipeline import EOD, SOD


@pytest.fixture
def tiny_model():
    return SleepScorer(ModelConfig.tiny(), seed=0, dtype=np.float64)


def random_batch(model, batch=2, rng=None):
    rng = rng or np.random.default_rng(0)
    cfg = model.config
    return rng.standard_normal((batch, cfg.maxtime, cfg.epoch_samples))


class TestModelConfig:
    def test_json_roundtrip(self):
        cfg = ModelConfig.tiny(epoch_samples=128, maxtime=5)
        again = ModelConfig.from_json(cfg.to_json())
        assert again == cfg

    def test_default_dims_consistent(self):
        model = SleepScorer(ModelConfig(), seed=0)
        assert model.config.epoch_samples == 3000
        assert model.feature_dim() > 0

    def test_collapsing_layer_rejected(self):
        cfg = ModelConfig.tiny(epoch_samples=8)
        with pytest.raises(ValueError):
            SleepScorer(cfg, seed=0)


class TestParams:
    def test_registered_exactly_once(self, tiny_model):
        names = list(tiny_model.params)
        assert len(names) == len(set(names))

    def test_duplicate_registration_rejected(self, tiny_model):
        with pytest.raises(ValueError):
            tiny_model._register("cnn.small.conv0.k", np.zeros(1))

    def test_bias_naming_convention(self, tiny_model):
        biases = [n for n in tiny_model.params if n.endswith(".b")]
        assert biases, "expected bias parameters"


class TestCnnFeatures:
    def test_shape_contract(self, tiny_model):
        rng = np.random.default_rng(1)
        for batch in (1, 3, 5):
            x = rng.standard_normal((batch, tiny_model.config.epoch_samples))
            feats = tiny_model.cnn_features(x)
            assert feats.shape == (batch, tiny_model.feature_dim())

    def test_zero_input_zero_bias_gives_zero_features(self, tiny_model):
        x = np.zeros((2, tiny_model.config.epoch_samples))
        feats = tiny_model.cnn_features(x)  # conv biases start at zero
        assert_array_equal(feats.values, np.zeros_like(feats.values))

    def test_inference_deterministic(self, tiny_model):
        x = random_batch(tiny_model)[:, 0, :]
        a = tiny_model.cnn_features(x).values
        b = tiny_model.cnn_features(x).values
        assert_array_equal(a, b)

    def test_wrong_epoch_length_rejected(self, tiny_model):
        with pytest.raises(ValueError):
            tiny_model.cnn_features(np.zeros((2, 17)))

    def test_training_mode_dropout_changes_output(self, tiny_model):
        x = random_batch(tiny_model)[:, 0, :]
        base = tiny_model.cnn_features(x).values
        dropped = tiny_model.cnn_features(x, training=True, rng=np.random.default_rng(0)).values
        assert not np.array_equal(base, dropped)


class TestEncoder:
    def test_zero_weights_give_bias_outputs(self, tiny_model):
        cfg = tiny_model.config
        for name in ("enc.fwd.W", "enc.fwd.U", "enc.fwd.b",
                     "enc.bwd.W", "enc.bwd.U", "enc.bwd.b", "enc.out.U"):
            tiny_model.params[name].values[:] = 0.0
        tiny_model.params["enc.out.b"].values[:] = np.arange(cfg.encoder_output)
        feats = [Tensor(np.random.default_rng(2).standard_normal((2, tiny_model.feature_dim())))
                 for _ in range(3)]
        states = tiny_model.birnn_encode(feats)
        for e in states.outputs:
            assert_allclose(e.values, np.tile(np.arange(cfg.encoder_output), (2, 1)))

    def test_reversal_with_tied_directions(self, tiny_model):
        # tie backward weights to forward ones and make the output map
        # symmetric in the two direction halves
        cfg = tiny_model.config
        p = tiny_model.params
        for suffix in ("W", "U", "b"):
            p[f"enc.bwd.{suffix}"].values = p[f"enc.fwd.{suffix}"].values.copy()
        half = cfg.encoder_hidden
        p["enc.out.U"].values[half:] = p["enc.out.U"].values[:half]
        rng = np.random.default_rng(3)
        feats = [rng.standard_normal((2, tiny_model.feature_dim())) for _ in range(4)]
        fwd = tiny_model.birnn_encode([Tensor(f) for f in feats])
        rev = tiny_model.birnn_encode([Tensor(f) for f in feats[::-1]])
        for a, b in zip(rev.outputs, fwd.outputs[::-1]):
            assert_allclose(a.values, b.values, atol=1e-10)

    def test_single_step_sequence(self, tiny_model):
        feats = [Tensor(np.zeros((2, tiny_model.feature_dim())))]
        states = tiny_model.birnn_encode(feats)
        assert states.n == 1
        assert states.outputs[0].shape == (2, tiny_model.config.encoder_output)

    def test_empty_sequence_rejected(self, tiny_model):
        with pytest.raises(ValueError):
            tiny_model.birnn_encode([])


class TestAttention:
    def states_from(self, model, arrays):
        from sleepseq.model import EncoderStates
        hidden = model.config.encoder_hidden
        batch = arrays[0].shape[0]
        return EncoderStates(
            outputs=[Tensor(a) for a in arrays],
            final_h=Tensor(np.zeros((batch, 2 * hidden))),
            final_c=Tensor(np.zeros((batch, 2 * hidden))),
        )

    def test_single_state(self, tiny_model):
        e0 = np.random.default_rng(4).standard_normal((3, tiny_model.config.encoder_output))
        states = self.states_from(tiny_model, [e0])
        h = Tensor(np.random.default_rng(5).standard_normal((3, tiny_model.config.decoder_hidden)))
        alpha, context = tiny_model.attend(h, states)
        assert_allclose(alpha.values, np.ones((3, 1)))
        assert_allclose(context.values, e0)

    def test_identical_states_uniform(self, tiny_model):
        e = np.random.default_rng(6).standard_normal((2, tiny_model.config.encoder_output))
        states = self.states_from(tiny_model, [e, e, e, e])
        h = Tensor(np.zeros((2, tiny_model.config.decoder_hidden)))
        alpha, _ = tiny_model.attend(h, states)
        assert_allclose(alpha.values, np.full((2, 4), 0.25), atol=1e-12)

    def test_context_in_convex_hull(self, tiny_model):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(1, 6))
            arrays = [rng.standard_normal((2, tiny_model.config.encoder_output)) for _ in range(n)]
            states = self.states_from(tiny_model, arrays)
            h = Tensor(rng.standard_normal((2, tiny_model.config.decoder_hidden)))
            alpha, context = tiny_model.attend(h, states)
            stacked = np.stack(arrays)  # (n, batch, dim)
            assert np.all(context.values >= stacked.min(axis=0) - 1e-9)
            assert np.all(context.values <= stacked.max(axis=0) + 1e-9)
            assert alpha.values.min() >= 0
            assert_allclose(alpha.values.sum(axis=1), 1.0, atol=1e-6)
            assert alpha.shape == (2, n)

    def test_invariant_violation_raises(self, tiny_model):
        states = self.states_from(
            tiny_model, [np.random.default_rng(8).standard_normal((1, tiny_model.config.encoder_output))])
        tiny_model.params["att.v"].values[:] = np.nan
        h = Tensor(np.zeros((1, tiny_model.config.decoder_hidden)))
        with pytest.raises(NumericError):
            tiny_model.attend(h, states)


class TestDecoder:
    def encode(self, model, x):
        return model.encode_epochs(x)

    def test_teacher_forced_shapes_and_records(self, tiny_model):
        x = random_batch(tiny_model, batch=2)
        states = self.encode(tiny_model, x)
        T = tiny_model.config.maxtime
        labels = np.random.default_rng(9).integers(0, 5, (2, T))
        symbols = np.concatenate([np.full((2, 1), SOD), labels], axis=1)
        logits_seq, records = tiny_model.decode_teacher_forced(states, symbols)
        assert len(logits_seq) == T + 1  # labels plus the EOD step
        for lg in logits_seq:
            assert lg.shape == (2, 6)
        assert len(records) == T + 1
        for r in records:
            assert r.weights.shape == (2, T)
            assert_allclose(r.weights.sum(axis=1), 1.0, atol=1e-6)

    def test_spec_length_contract(self, tiny_model):
        # decoder_inputs of length maxtime produce maxtime logit rows
        x = random_batch(tiny_model, batch=1)
        states = self.encode(tiny_model, x)
        T = tiny_model.config.maxtime
        symbols = np.concatenate([[SOD]], axis=0)[None, :]
        dec_inputs = np.concatenate([np.full((1, 1), SOD),
                                     np.random.default_rng(10).integers(0, 5, (1, T - 1))], axis=1)
        logits_seq, _ = tiny_model.decode_teacher_forced(states, dec_inputs)
        assert len(logits_seq) == T

    def test_requires_sod_start(self, tiny_model):
        x = random_batch(tiny_model, batch=1)
        states = self.encode(tiny_model, x)
        with pytest.raises(ValueError):
            tiny_model.decode_teacher_forced(states, np.array([[0, 1, 2]]))

    def test_out_of_vocabulary_rejected(self, tiny_model):
        x = random_batch(tiny_model, batch=1)
        states = self.encode(tiny_model, x)
        with pytest.raises(ValueError):
            tiny_model.decode_teacher_forced(states, np.array([[SOD, 99, 0]]))

    def test_attention_on_gradient_path(self, tiny_model):
        x = random_batch(tiny_model, batch=2)
        states = self.encode(tiny_model, x)
        labels = np.random.default_rng(11).integers(0, 5, (2, tiny_model.config.maxtime))
        symbols = np.concatenate([np.full((2, 1), SOD), labels], axis=1)
        logits_seq, _ = tiny_model.decode_teacher_forced(states, symbols)
        zero_grads(tiny_model.params)
        total = None
        for lg in logits_seq:
            s = tsum(lg * lg)
            total = s if total is None else total + s
        backward(total)
        for name in ("att.Wh", "att.We", "att.v"):
            grad = tiny_model.params[name].grad
            assert grad is not None and np.abs(grad).max() > 0

    def test_inference_fixed_length_and_deterministic(self, tiny_model):
        x = random_batch(tiny_model, batch=3)
        states = self.encode(tiny_model, x)
        labels1, records = tiny_model.decode_inference(states)
        labels2, _ = tiny_model.decode_inference(self.encode(tiny_model, x))
        assert labels1.shape == (3, tiny_model.config.maxtime)
        assert len(records) == tiny_model.config.maxtime
        assert_array_equal(labels1, labels2)
        assert labels1.min() >= 0 and labels1.max() < 5

    def test_premature_eod_emits_runner_up(self, tiny_model):
        # rig the output projection so EOD always wins
        tiny_model.params["dec.out.W"].values[:] = 0.0
        bias = np.zeros(6)
        bias[EOD] = 10.0
        bias[2] = 5.0  # runner-up among the stage classes
        tiny_model.params["dec.out.b"].values = bias
        x = random_batch(tiny_model, batch=2)
        states = self.encode(tiny_model, x)
        before = tiny_model.premature_eod_count
        labels, _ = tiny_model.decode_inference(states)
        assert_array_equal(labels, np.full_like(labels, 2))
        assert tiny_model.premature_eod_count == before + labels.size

    def test_inference_ties_break_low_index(self, tiny_model):
        tiny_model.params["dec.out.W"].values[:] = 0.0
        tiny_model.params["dec.out.b"].values = np.zeros(6)  # all logits tie
        x = random_batch(tiny_model, batch=1)
        labels, _ = tiny_model.decode_inference(self.encode(tiny_model, x))
        assert_array_equal(labels, np.zeros_like(labels))


class TestNonDegeneracy:
    def test_changing_one_epoch_moves_context_not_other_features(self, tiny_model):
        rng = np.random.default_rng(12)
        x = random_batch(tiny_model, batch=1, rng=rng)
        x2 = x.copy()
        x2[0, 1, :] += rng.standard_normal(x.shape[2]) * 0.5

        cfg = tiny_model.config
        flat = lambda arr: arr.transpose(1, 0, 2).reshape(-1, cfg.epoch_samples)
        f1 = tiny_model.cnn_features(flat(x)).values
        f2 = tiny_model.cnn_features(flat(x2)).values
        # only epoch 1's features change
        assert not np.allclose(f1[1], f2[1])
        for t in (0, 2):
            assert_allclose(f1[t], f2[t])

        s1 = tiny_model.encode_epochs(x)
        s2 = tiny_model.encode_epochs(x2)
        _, r1 = tiny_model.decode_inference(s1)
        _, r2 = tiny_model.decode_inference(s2)
        contexts1 = np.stack([r.context for r in r1])
        contexts2 = np.stack([r.context for r in r2])
        assert not np.allclose(contexts1, contexts2)


class TestOverfitSingleSequence:
    def test_teacher_forced_and_inference_agree_after_overfit(self):
        from sleepseq.training import Trainer

        cfg = ModelConfig.tiny(epoch_samples=64, maxtime=4)
        model = SleepScorer(cfg, seed=1)
        rng = np.random.default_rng(13)
        x = rng.standard_normal((1, 4, 64))
        labels = np.array([[0, 2, 2, 4]])
        teacher = np.concatenate([np.full((1, 1), SOD), labels], axis=1)
        targets = np.concatenate([labels, np.full((1, 1), EOD)], axis=1)

        trainer = Trainer(model, lr=5e-3, l2_beta=0.0, batch_size=1, seed=0)
        for _ in range(300):
            trainer.train_step(x, teacher, targets)

        preds_tf = trainer.teacher_forced_predictions(x, teacher)
        assert_array_equal(preds_tf, labels)
        states = model.encode_epochs(x)
        preds_inf, _ = model.decode_inference(states)
        assert_array_equal(preds_inf, labels)
