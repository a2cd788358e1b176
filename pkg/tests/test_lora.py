import os
import tempfile
import unittest

import numpy as np

from veille import model as mdl
from veille import numerics as nx
from veille.corpus import LabeledDataset, LabeledExample
from veille.errors import ConfigError, ContractError, DataError
from veille.lora import LoraAdapter, LoraConfig, adapted_forward, inject, load_adapters, merge, save_adapters
from veille.model import ModelConfig
from veille.tokenizer import BpeVocab
from veille.training import TrainingConfig, finetune_classifier

BYTE_VOCAB = BpeVocab(merges=())
TOY = ModelConfig(vocab_size=BYTE_VOCAB.size, d_model=16, n_layers=2, n_heads=2, d_ff=16, max_seq_len=16)
TOY_LORA = LoraConfig(rank=2, alpha=4.0, dropout_p=0.1)


def _toy_dataset():
    examples = []
    for i in range(16):
        word = "bad" if i % 2 else "ok"
        examples.append(LabeledExample(text=f"{word} {i}", label=i % 2))
    return LabeledDataset(tuple(examples))


class TestLoraConfig(unittest.TestCase):
    def test_scale(self):
        self.assertEqual(LoraConfig().scale, 2.0)

    def test_invalid(self):
        for bad in (
            LoraConfig(rank=0),
            LoraConfig(alpha=0.0),
            LoraConfig(dropout_p=1.0),
            LoraConfig(target_matrices=("lm_head",)),
            LoraConfig(target_matrices=()),
        ):
            with self.assertRaises(ConfigError):
                bad.validate()

    def test_dict_round_trip(self):
        config = LoraConfig(rank=4, target_matrices=("query_projection", "down_projection"))
        self.assertEqual(LoraConfig.from_dict(config.to_dict()), config)


class TestAdapter(unittest.TestCase):
    def test_zero_init_reproduces_base_exactly(self):
        rng = np.random.default_rng(0)
        for trial in range(20):
            config = ModelConfig(
                vocab_size=30,
                d_model=int(rng.choice([8, 16])),
                n_layers=int(rng.integers(1, 3)),
                n_heads=2,
                d_ff=12,
                max_seq_len=10,
            )
            weights = mdl.init_weights(config, trial)
            ids = rng.integers(0, 30, size=int(rng.integers(1, 10))).tolist()
            base_logits = mdl.forward_classifier(weights, config, ids).data
            model = inject(weights, LoraConfig(rank=2, dropout_p=0.0), seed=trial)
            np.testing.assert_array_equal(model.forward_classifier(ids).data, base_logits)

    def test_adapted_forward_formula(self):
        rng = np.random.default_rng(1)
        base = nx.Tensor(rng.normal(size=(6, 4)))
        w_a = nx.Tensor(rng.normal(size=(6, 2)))
        w_b = nx.Tensor(rng.normal(size=(2, 4)))
        x = rng.normal(size=(3, 4))
        adapter = LoraAdapter("m", base, w_a, w_b, scale=1.5, dropout_p=0.2)
        expected = x @ base.data.T + 1.5 * (x @ w_b.data.T) @ w_a.data.T
        np.testing.assert_allclose(adapted_forward(adapter, nx.Tensor(x), training=False).data, expected)
        np.testing.assert_allclose(x @ merge(adapter).data.T, expected, atol=1e-12)

    def test_gradient_reaches_w_a_only_while_it_is_zero(self):
        rng = np.random.default_rng(2)
        base = nx.Tensor(rng.normal(size=(5, 4)))
        w_a = nx.Tensor(np.zeros((5, 2)), requires_grad=True)
        w_b = nx.Tensor(rng.normal(0.0, 0.02, size=(2, 4)), requires_grad=True)
        x = nx.Tensor(rng.normal(size=(3, 4)))
        adapter = LoraAdapter("m", base, w_a, w_b, scale=2.0, dropout_p=0.1)
        w = rng.normal(size=(3, 5))

        def loss():
            return nx.weighted_sum(adapted_forward(adapter, x, training=False), w)

        nx.backward(loss())
        self.assertTrue(np.all(w_b.grad == 0.0))
        self.assertGreater(np.abs(w_a.grad).sum(), 0.0)
        self.assertLessEqual(nx.max_relative_error(w_a.grad, nx.numerical_grad(loss, w_a)), 1e-4)

    def test_evaluation_ignores_random_stream(self):
        rng = np.random.default_rng(3)
        base = nx.Tensor(rng.normal(size=(4, 4)))
        adapter = LoraAdapter(
            "m", base, nx.Tensor(rng.normal(size=(4, 2))), nx.Tensor(rng.normal(size=(2, 4))), 1.0, 0.5
        )
        x = nx.Tensor(rng.normal(size=(3, 4)))
        first = adapted_forward(adapter, x, training=False, rng=1).data
        second = adapted_forward(adapter, x, training=False, rng=2).data
        np.testing.assert_array_equal(first, second)
        np.testing.assert_array_equal(adapted_forward(adapter, x, training=False).data, first)
        training = adapted_forward(adapter, x, training=True, rng=1).data
        self.assertFalse(np.array_equal(training, first))

    def test_training_dropout_needs_rng(self):
        base = nx.Tensor(np.ones((4, 4)))
        adapter = LoraAdapter("m", base, nx.Tensor(np.zeros((4, 1))), nx.Tensor(np.ones((1, 4))), 1.0, 0.5)
        with self.assertRaises(ContractError):
            adapted_forward(adapter, nx.Tensor(np.ones((2, 4))), training=True)

    def test_mismatched_factor_shapes(self):
        with self.assertRaises(DataError):
            LoraAdapter("m", nx.Tensor(np.ones((4, 4))), nx.Tensor(np.zeros((3, 1))), nx.Tensor(np.ones((1, 4))), 1.0, 0)


class TestInject(unittest.TestCase):
    def test_trainable_count_oracle(self):
        weights = mdl.init_weights(TOY, 0)
        model = inject(weights, TOY_LORA, seed=0)
        adapter_params = sum(t.size for _, t in model.adapter_tensors())
        self.assertEqual(adapter_params, 2 * 2 * (16 * 2 + 2 * 16))
        total, trainable = model.count_params()
        enumerated = sum(t.size for _, t in model.adapter_tensors() if t.requires_grad)
        enumerated += sum(t.size for _, t in weights.items() if t.requires_grad)
        self.assertEqual(trainable, enumerated)
        self.assertEqual(trainable, 256 + TOY.d_model * TOY.n_classes)
        self.assertEqual(total, mdl.expected_param_count(TOY) + 256)

    def test_base_is_frozen_except_head(self):
        weights = mdl.init_weights(TOY, 0)
        inject(weights, TOY_LORA, seed=0)
        self.assertEqual([n for n, _ in weights.trainable()], ["classifier_head"])

    def test_stacking_is_rejected(self):
        weights = mdl.init_weights(TOY, 0)
        model = inject(weights, TOY_LORA, seed=0)
        with self.assertRaises(ConfigError):
            inject(weights, TOY_LORA, seed=0)
        with self.assertRaises(ConfigError):
            inject(model, TOY_LORA, seed=0)

    def test_rank_limit(self):
        with self.assertRaises(ConfigError):
            inject(mdl.init_weights(TOY, 0), LoraConfig(rank=9), seed=0)
        with self.assertLogs("veille.lora", level="WARNING"):
            inject(mdl.init_weights(TOY, 0), LoraConfig(rank=8), seed=0)

    def test_factor_init(self):
        model = inject(mdl.init_weights(TOY, 0), TOY_LORA, seed=0)
        for adapter in model.adapters.values():
            self.assertTrue(np.all(adapter.w_a.data == 0.0))
            self.assertGreater(np.abs(adapter.w_b.data).sum(), 0.0)


class TestAfterFinetuning(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.weights = mdl.init_weights(TOY, 7)
        cls.snapshot = cls.weights.snapshot()
        model = inject(cls.weights, TOY_LORA, seed=7)
        config = TrainingConfig(learning_rate=1e-2, epochs=25, batch_size=8, seed=7)
        cls.model, cls.log = finetune_classifier(model, BYTE_VOCAB, _toy_dataset(), config)

    def test_fifty_steps_were_taken(self):
        self.assertEqual(len(self.log.step_losses), 50)

    def test_frozen_base_is_bitwise_unchanged(self):
        for name, tensor in self.weights.items():
            if name == "classifier_head":
                self.assertFalse(np.array_equal(tensor.data, self.snapshot[name]))
            else:
                np.testing.assert_array_equal(tensor.data, self.snapshot[name])

    def test_merged_weights_match_adapted_logits(self):
        merged = self.model.merge()
        self.assertFalse(merged.adapted)
        rng = np.random.default_rng(0)
        for _ in range(100):
            ids = rng.integers(0, TOY.vocab_size, size=int(rng.integers(1, TOY.max_seq_len + 1))).tolist()
            adapted = self.model.forward_classifier(ids).data
            direct = mdl.forward_classifier(merged, TOY, ids).data
            self.assertLessEqual(np.max(np.abs(adapted - direct)), 1e-9)

    def test_merged_count_drops_adapter_params(self):
        adapter_params = sum(t.size for _, t in self.model.adapter_tensors())
        head = TOY.d_model * TOY.n_classes
        adapted = (mdl.expected_param_count(TOY) + adapter_params, adapter_params + head)
        self.assertEqual(self.model.count_params(), adapted)
        merged = mdl.count_params(self.model.merge())
        self.assertEqual(merged, (mdl.expected_param_count(TOY), head))

    def test_merge_leaves_base_alone(self):
        self.model.merge()
        name = "layers.0.attention.query"
        np.testing.assert_array_equal(self.weights[name].data, self.snapshot[name])

    def test_save_and_load_adapters(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "adapters.lora")
            save_adapters(self.model, path)
            base = mdl.TransformerWeights(TOY, {n: nx.Tensor(a, name=n) for n, a in self.snapshot.items()})
            loaded = load_adapters(base, path)
            ids = [5, 80, 33, 2]
            np.testing.assert_array_equal(loaded.forward_classifier(ids).data, self.model.forward_classifier(ids).data)

            other = mdl.init_weights(ModelConfig(vocab_size=TOY.vocab_size, d_model=8, n_heads=2, d_ff=8), 0)
            with self.assertRaises(DataError) as ctx:
                load_adapters(other, path)
            self.assertIn("d_model", str(ctx.exception))


if __name__ == "__main__":
    unittest.main()
