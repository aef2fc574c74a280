import unittest

import numpy as np

from groupnlu import autograd as ag
from groupnlu.crf import crf_nll
from groupnlu.data import encode_batch
from groupnlu.errors import ContractError, DimensionError
from groupnlu.mtl_model import (
    ArchitectureKind,
    FeatureBundle,
    ModelConfig,
    adversarial_loss,
    batch_objective,
    decode,
    forward,
    orthogonality_loss,
    tasks_loss,
    total_loss,
)
from tests.gradcheck import analytic_gradients, gradient_errors, numeric_gradient, relative_error
from tests.toy import TOY_CORPORA, toy_model

EXPECTED_WIDTHS = {
    ArchitectureKind.SINGLE_TASK: 256,
    ArchitectureKind.PARALLEL_UNIV: 256,
    ArchitectureKind.PARALLEL_UNIV_TASK: 512,
    ArchitectureKind.PARALLEL_UNIV_GROUP_TASK: 768,
    ArchitectureKind.SERIAL: 256,
    ArchitectureKind.SERIAL_HIGHWAY: 768,
    ArchitectureKind.SERIAL_HIGHWAY_SWAP: 768,
}


def toy_batch(model, task_id="music"):
    return encode_batch(TOY_CORPORA[task_id], model.vocab, task_id)


class WiringTests(unittest.TestCase):
    def test_decoder_widths_at_default_dims(self):
        for kind, width in EXPECTED_WIDTHS.items():
            with self.subTest(kind=kind.value):
                model = toy_model(kind, word_dim=300, char_dim=100, char_hidden=64, hidden=128)
                self.assertEqual(model.decoder_width, width)
                for decoder in model.decoders.values():
                    self.assertEqual(decoder.crf.input_dim, width)
                    self.assertEqual(decoder.intent.input_dim, width)

    def test_forward_shapes(self):
        for kind in ArchitectureKind:
            with self.subTest(kind=kind.value):
                model = toy_model(kind)
                batch = toy_batch(model)
                output = forward(model, batch)
                num_tags = len(model.registry.task("music").slot_labels)
                num_intents = len(model.registry.task("music").intent_labels)
                self.assertEqual(output.emissions.shape, (3, 4, num_tags))
                self.assertEqual(output.intent_logits.shape, (3, num_intents))

    def test_encoders_per_kind(self):
        single = toy_model(ArchitectureKind.SINGLE_TASK)
        self.assertIsNone(single.universe)
        self.assertEqual(set(single.tasks), {"music", "books", "weather"})
        self.assertIsNone(single.universe_discriminator)

        univ = toy_model(ArchitectureKind.PARALLEL_UNIV)
        self.assertEqual(univ.tasks, {})
        self.assertEqual(univ.groups, {})

        grouped = toy_model(ArchitectureKind.PARALLEL_UNIV_GROUP_TASK)
        self.assertEqual(set(grouped.groups), {"media", "places"})
        self.assertEqual(set(grouped.group_discriminators), {"media"})

    def test_serial_task_encoder_reads_both_shared_encoders(self):
        model = toy_model(ArchitectureKind.SERIAL)
        self.assertEqual(model.tasks["music"].input_dim, 4 * model.config.hidden)
        swap = toy_model(ArchitectureKind.SERIAL_HIGHWAY_SWAP)
        self.assertEqual(swap.universe.input_dim, 2 * swap.config.hidden)
        self.assertEqual(swap.tasks["music"].input_dim, swap.embedding_dim)

    def test_parameter_names_are_unique_and_prefixed(self):
        names = list(toy_model(ArchitectureKind.SERIAL_HIGHWAY).named_parameters())
        self.assertEqual(len(names), len(set(names)))
        self.assertIn("embed.word.weights", names)
        self.assertIn("universe.fwd.w_input", names)
        self.assertIn("group.media.bwd.bias", names)
        self.assertIn("task.weather.fwd.w_hidden", names)
        self.assertIn("decoder.books.crf.transitions", names)
        self.assertIn("disc.group.media.weight", names)

    def _task_states(self, model):
        with ag.no_grad():
            return forward(model, toy_batch(model)).bundle

    def test_swap_task_features_ignore_universe_encoder(self):
        model = toy_model(ArchitectureKind.SERIAL_HIGHWAY_SWAP)
        before = self._task_states(model)
        model.universe.forward_cell.w_input.data += 0.5
        after = self._task_states(model)
        np.testing.assert_array_equal(before.h_task.data, after.h_task.data)
        self.assertFalse(np.allclose(before.h_univ.data, after.h_univ.data))

    def test_serial_task_features_depend_on_universe_encoder(self):
        model = toy_model(ArchitectureKind.SERIAL)
        before = self._task_states(model)
        model.universe.forward_cell.w_input.data += 0.5
        after = self._task_states(model)
        self.assertFalse(np.allclose(before.h_task.data, after.h_task.data))

    def test_config_round_trips_through_dict(self):
        config = ModelConfig(architecture=ArchitectureKind.SERIAL_HIGHWAY, hidden=7, lambda_adv=0.0)
        self.assertEqual(ModelConfig.from_dict(config.to_dict()), config)


class ObjectiveGradientTests(unittest.TestCase):
    """The full objective (tasks, adversarial and orthogonality terms) against finite differences."""

    def test_all_architectures(self):
        for kind in ArchitectureKind:
            with self.subTest(kind=kind.value):
                model = toy_model(kind)
                batch = toy_batch(model)
                params = model.named_parameters()

                def fn():
                    return batch_objective(model, batch, training=False).loss

                errors = gradient_errors(fn, params, samples=3, seed=1, eps=1e-5, floor=1e-4)
                worst = max(errors, key=errors.get)
                self.assertLess(errors[worst], 1e-4, f"{kind.value}: {worst}")

    def test_other_tasks_receive_no_gradient(self):
        model = toy_model(ArchitectureKind.PARALLEL_UNIV_GROUP_TASK)
        batch = toy_batch(model, "weather")
        with ag.recording() as tape:
            objective = batch_objective(model, batch, training=True, rng=np.random.default_rng(0))
        ag.backward(objective.loss, tape)
        params = model.named_parameters()
        for name, var in params.items():
            if name.startswith(("task.music", "task.books", "decoder.music", "decoder.books", "group.media", "disc.group")):
                self.assertIsNone(var._grad, name)
        self.assertIsNotNone(params["task.weather.fwd.w_input"]._grad)
        self.assertIsNotNone(params["universe.fwd.w_input"]._grad)


class AdversarialTests(unittest.TestCase):
    def setUp(self):
        self.model = toy_model(ArchitectureKind.PARALLEL_UNIV_GROUP_TASK)
        self.batch = toy_batch(self.model, "books")
        self.universe = {f"universe.{k}": v for k, v in self.model.universe.named_parameters()}

    def adversarial(self, reverse):
        def fn():
            bundle = forward(self.model, self.batch).bundle
            return adversarial_loss(self.model, bundle, "books", reverse=reverse)

        return fn

    def test_forward_value_is_unchanged_by_reversal(self):
        with ag.no_grad():
            self.assertEqual(self.adversarial(True)().item(), self.adversarial(False)().item())

    def test_reversal_negates_encoder_gradients_only(self):
        params = dict(self.universe)
        params["disc.universe.weight"] = self.model.universe_discriminator.weight
        reversed_grads = analytic_gradients(self.adversarial(True), params)
        plain_grads = analytic_gradients(self.adversarial(False), params)
        for name in self.universe:
            np.testing.assert_allclose(reversed_grads[name], -plain_grads[name], rtol=0, atol=1e-14)
            self.assertTrue(np.any(plain_grads[name] != 0.0))
        np.testing.assert_array_equal(reversed_grads["disc.universe.weight"], plain_grads["disc.universe.weight"])

    def test_unreversed_gradient_matches_finite_differences(self):
        var = self.model.universe.forward_cell.w_input
        entries = np.arange(0, var.data.size, 7)
        plain = analytic_gradients(self.adversarial(False), {"w": var})["w"].reshape(-1)[entries]
        numeric = numeric_gradient(self.adversarial(False), var, entries, eps=1e-5)
        self.assertLess(relative_error(plain, numeric, floor=1e-4), 1e-4)

    def test_needs_a_shared_encoder(self):
        model = toy_model(ArchitectureKind.SINGLE_TASK)
        bundle = forward(model, toy_batch(model)).bundle
        with self.assertRaises(ContractError):
            adversarial_loss(model, bundle, "music")


class LossTermTests(unittest.TestCase):
    def test_orthogonality_values(self):
        mask = np.ones((1, 1), dtype=bool)
        h_task = ag.constant(np.array([[[1.0, 0.0]]]))
        orthogonal = FeatureBundle(mask=mask, h_task=h_task, h_univ=ag.constant(np.array([[[0.0, 1.0]]])))
        self.assertEqual(orthogonality_loss(orthogonal).item(), 0.0)
        aligned = FeatureBundle(mask=mask, h_task=h_task, h_univ=ag.constant(np.array([[[2.0, 0.0]]])))
        self.assertEqual(orthogonality_loss(aligned).item(), 4.0)

    def test_orthogonality_shape_mismatch(self):
        bundle = FeatureBundle(
            mask=np.ones((1, 2), dtype=bool),
            h_task=ag.constant(np.ones((1, 2, 2))),
            h_group=ag.constant(np.ones((1, 3, 2))),
        )
        with self.assertRaises(DimensionError):
            orthogonality_loss(bundle)

    def test_tasks_loss_weights_by_alpha(self):
        model = toy_model(ArchitectureKind.SINGLE_TASK)
        total = tasks_loss({"music": ag.constant(2.0), "weather": ag.constant(3.0)}, model.registry)
        self.assertAlmostEqual(total.item(), (2.0 + 3.0) * 2.0 / 3.0, places=12)

    def test_uniform_alphas_sum_losses(self):
        model = toy_model(ArchitectureKind.SINGLE_TASK, alpha_mode="uniform")
        total = tasks_loss({"books": ag.constant(1.5), "weather": ag.constant(0.5)}, model.registry)
        self.assertEqual(total.item(), 2.0)

    def test_total_loss_skips_zero_coefficients(self):
        config = ModelConfig(lambda_adv=0.0, gamma_ortho=0.5)
        total = total_loss(ag.constant(1.0), ag.constant(100.0), ag.constant(2.0), config)
        self.assertEqual(total.item(), 2.0)
        with self.assertRaises(ContractError):
            total_loss(ag.constant(1.0), None, None, ModelConfig(lambda_adv=-1.0))

    def test_single_task_objective_is_the_task_loss(self):
        model = toy_model(ArchitectureKind.SINGLE_TASK, alpha_mode="uniform")
        objective = batch_objective(model, toy_batch(model))
        self.assertIsNone(objective.adversarial)
        self.assertIsNone(objective.orthogonality)
        self.assertEqual(objective.loss.item(), objective.task.item())


class ForwardInvarianceTests(unittest.TestCase):
    def test_padding_leaves_real_rows_bit_identical(self):
        corpus = TOY_CORPORA["weather"]
        for kind in ArchitectureKind:
            model = toy_model(kind)
            crf = model.decoders["weather"].crf
            alone = encode_batch(corpus[:1], model.vocab, "weather")
            padded = encode_batch(corpus[:2], model.vocab, "weather")
            length = alone.word_ids.shape[1]
            self.assertGreater(padded.word_ids.shape[1], length)
            runs = []
            for batch in (alone, padded):
                out = forward(model, batch)
                nll = crf_nll(out.emissions, crf.transitions, batch.slot_ids, batch.mask)
                intent = ag.cross_entropy(out.intent_logits, batch.intent_ids)
                runs.append((out, nll, intent))
            (a, a_nll, a_intent), (p, p_nll, p_intent) = runs
            msg = kind.value
            np.testing.assert_array_equal(p.emissions.data[0, :length], a.emissions.data[0], err_msg=msg)
            np.testing.assert_array_equal(p.intent_logits.data[0], a.intent_logits.data[0], err_msg=msg)
            np.testing.assert_array_equal(p_nll.data[0], a_nll.data[0], err_msg=msg)
            np.testing.assert_array_equal(p_intent.data[0], a_intent.data[0], err_msg=msg)
            for name in ("h_univ", "h_group", "h_task"):
                states = getattr(a.bundle, name)
                if states is not None:
                    padded_states = getattr(p.bundle, name).data[0, :length]
                    np.testing.assert_array_equal(padded_states, states.data[0], err_msg=f"{msg} {name}")

    def test_forward_values_do_not_depend_on_recording(self):
        model = toy_model(ArchitectureKind.SERIAL_HIGHWAY_SWAP)
        batch = toy_batch(model, "books")
        plain = forward(model, batch)
        with ag.recording():
            recorded = forward(model, batch)
        np.testing.assert_array_equal(plain.emissions.data, recorded.emissions.data)
        np.testing.assert_array_equal(plain.intent_logits.data, recorded.intent_logits.data)


class DecodeTests(unittest.TestCase):
    def test_predictions_align_with_tokens(self):
        model = toy_model(ArchitectureKind.SERIAL_HIGHWAY)
        batch = toy_batch(model, "weather")
        predictions = decode(model, batch)
        self.assertEqual(len(predictions), len(TOY_CORPORA["weather"]))
        spec = model.registry.task("weather")
        for prediction, utterance in zip(predictions, TOY_CORPORA["weather"]):
            self.assertEqual(len(prediction.tags), len(utterance.tokens))
            self.assertTrue(all(tag in spec.slot_labels for tag in prediction.tags))
            self.assertIn(prediction.intent, spec.intent_labels)

    def test_decoding_is_deterministic(self):
        model = toy_model(ArchitectureKind.PARALLEL_UNIV_TASK)
        batch = toy_batch(model, "books")
        first = [(p.tags, p.intent, p.score) for p in decode(model, batch)]
        second = [(p.tags, p.intent, p.score) for p in decode(model, batch)]
        self.assertEqual(first, second)


if __name__ == "__main__":
    unittest.main()
