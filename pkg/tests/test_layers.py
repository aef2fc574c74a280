import os
import tempfile
import unittest

import numpy as np

from groupnlu import autograd as ag
from groupnlu.errors import ContractError, DimensionError
from groupnlu.layers import (
    BiLstmEncoder,
    EmbeddingTable,
    IntentHead,
    bilstm_forward,
    embed_tokens,
    init_word_table,
    intent_logits,
    load_pretrained_vectors,
)
from tests.gradcheck import gradient_errors


class BiLstmTests(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(5)
        self.encoder = BiLstmEncoder.create("enc", 3, 2, self.rng)
        self.inputs = ag.constant(self.rng.normal(size=(2, 4, 3)))
        self.mask = np.array([[True, True, True, True], [True, True, False, False]])

    def test_output_shapes_and_zero_padding(self):
        states, rep = bilstm_forward(self.encoder, self.inputs, self.mask)
        self.assertEqual(states.shape, (2, 4, 4))
        self.assertEqual(rep.shape, (2, 4))
        np.testing.assert_array_equal(states.data[1, 2:], np.zeros((2, 4)))

    def test_sentence_rep_joins_last_forward_and_first_backward_state(self):
        states, rep = bilstm_forward(self.encoder, self.inputs, self.mask)
        for row, length in enumerate([4, 2]):
            np.testing.assert_array_equal(rep.data[row, :2], states.data[row, length - 1, :2])
            np.testing.assert_array_equal(rep.data[row, 2:], states.data[row, 0, 2:])

    def test_padding_does_not_change_real_positions(self):
        states, rep = bilstm_forward(self.encoder, self.inputs, self.mask)
        alone_states, alone_rep = bilstm_forward(self.encoder, ag.constant(self.inputs.data[1, :2]), np.ones(2, bool))
        np.testing.assert_array_equal(states.data[1, :2], alone_states.data)
        np.testing.assert_array_equal(rep.data[1], alone_rep.data)

    def test_padding_content_is_ignored(self):
        noisy = self.inputs.data.copy()
        noisy[1, 2:] = 100.0
        clean_states, _ = bilstm_forward(self.encoder, self.inputs, self.mask)
        noisy_states, _ = bilstm_forward(self.encoder, ag.constant(noisy), self.mask)
        np.testing.assert_array_equal(clean_states.data, noisy_states.data)

    def test_reversed_tokens_swap_direction_roles(self):
        tokens = self.inputs.data[0]
        mirrored = BiLstmEncoder("mirror", self.encoder.backward_cell, self.encoder.forward_cell)
        states, rep = bilstm_forward(self.encoder, ag.constant(tokens), np.ones(4, bool))
        rev_states, rev_rep = bilstm_forward(mirrored, ag.constant(tokens[::-1].copy()), np.ones(4, bool))
        np.testing.assert_allclose(rev_rep.data, np.concatenate([rep.data[2:], rep.data[:2]]), rtol=0, atol=1e-12)
        swapped = np.concatenate([states.data[:, 2:], states.data[:, :2]], axis=1)
        np.testing.assert_allclose(rev_states.data[::-1], swapped, rtol=0, atol=1e-12)

    def test_empty_sequence_yields_zero_rep(self):
        states, rep = bilstm_forward(self.encoder, ag.constant(np.zeros((2, 0, 3))), np.zeros((2, 0), bool))
        self.assertEqual(states.shape, (2, 0, 4))
        np.testing.assert_array_equal(rep.data, np.zeros((2, 4)))

    def test_rejects_all_pad_row_and_holes(self):
        with self.assertRaises(ContractError):
            bilstm_forward(self.encoder, self.inputs, np.array([[True] * 4, [False] * 4]))
        with self.assertRaises(ContractError):
            bilstm_forward(self.encoder, self.inputs, np.array([[True] * 4, [True, False, True, False]]))

    def test_rejects_wrong_width(self):
        with self.assertRaises(DimensionError):
            bilstm_forward(self.encoder, ag.constant(np.zeros((1, 2, 5))), np.ones((1, 2), bool))

    def test_gradients_match_finite_differences(self):
        readout = self.rng.normal(size=(2, 4, 4))
        rep_readout = self.rng.normal(size=(2, 4))

        def fn():
            states, rep = bilstm_forward(self.encoder, self.inputs, self.mask)
            return ag.sum(states * readout) + ag.sum(rep * rep_readout)

        params = dict(self.encoder.named_parameters())
        for name, err in gradient_errors(fn, params).items():
            self.assertLess(err, 1e-4, name)


class EmbeddingTests(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(9)

    def test_pad_row_starts_at_zero(self):
        table = EmbeddingTable.create("embed.char", 5, 3, self.rng)
        np.testing.assert_array_equal(table.weights.data[0], np.zeros(3))
        self.assertEqual(table.weights.name, "embed.char.weights")

    def test_embed_tokens_width(self):
        words = EmbeddingTable.create("embed.word", 6, 4, self.rng)
        chars = EmbeddingTable.create("embed.char", 5, 3, self.rng)
        char_encoder = BiLstmEncoder.create("char_encoder", 3, 2, self.rng)
        word_ids = np.array([[2, 3, 0]])
        char_ids = np.array([[[2, 3], [4, 0], [0, 0]]])
        char_mask = np.array([[[True, True], [True, False], [True, False]]])
        out = embed_tokens(word_ids, char_ids, char_mask, words, chars, char_encoder)
        self.assertEqual(out.shape, (1, 3, 4 + 4))
        np.testing.assert_array_equal(out.data[0, 2, :4], np.zeros(4))

    def test_pad_rows_get_no_gradient_and_unk_row_does(self):
        words = EmbeddingTable.create("embed.word", 5, 3, self.rng)
        chars = EmbeddingTable.create("embed.char", 4, 2, self.rng)
        char_encoder = BiLstmEncoder.create("char_encoder", 2, 2, self.rng)
        word_ids = np.array([[2, 1, 0]])
        char_ids = np.array([[[2, 3], [1, 0], [0, 0]]])
        char_mask = np.array([[[True, True], [True, False], [True, False]]])
        readout = self.rng.normal(size=(1, 3, 3 + 4))
        with ag.recording() as tape:
            out = embed_tokens(word_ids, char_ids, char_mask, words, chars, char_encoder)
            loss = ag.sum(out * readout)
        ag.backward(loss, tape)
        np.testing.assert_array_equal(words.weights.grad[0], np.zeros(3))
        np.testing.assert_array_equal(chars.weights.grad[0], np.zeros(2))
        self.assertTrue(np.any(words.weights.grad[1] != 0.0))
        self.assertTrue(np.any(chars.weights.grad[1] != 0.0))
        np.testing.assert_array_equal(words.weights.grad[3:], np.zeros((2, 3)))

    def test_init_word_table_copies_covered_vectors(self):
        vectors = {"play": np.full(3, 0.5), "<pad>": np.full(3, 9.0)}
        table = init_word_table(["<pad>", "<unk>", "play", "jazz"], vectors, 3, self.rng)
        np.testing.assert_array_equal(table.weights.data[0], np.zeros(3))
        np.testing.assert_array_equal(table.weights.data[2], np.full(3, 0.5))
        self.assertTrue(np.all(np.abs(table.weights.data[3]) <= 0.1))
        self.assertTrue(table.weights.requires_grad)

    def test_frozen_table_requires_no_grad(self):
        table = init_word_table(["<pad>", "<unk>"], {}, 2, self.rng, trainable=False)
        self.assertFalse(table.weights.requires_grad)

    def test_init_word_table_rejects_wrong_width(self):
        with self.assertRaises(DimensionError):
            init_word_table(["<pad>", "<unk>", "play"], {"play": np.ones(5)}, 3, self.rng)


class PretrainedVectorTests(unittest.TestCase):
    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.temp_dir.name, "vectors.txt")

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_malformed_lines_are_skipped_and_counted(self):
        with open(self.path, "w", encoding="utf-8") as handle:
            handle.write("play 0.1 0.2 0.3\n")
            handle.write("broken 0.1 0.2\n")
            handle.write("nan 0.1 x 0.3\n")
            handle.write("Jazz 1 2 3\n")
            handle.write("\n")
        with self.assertLogs("groupnlu.layers", level="WARNING") as logs:
            vectors = load_pretrained_vectors(self.path, dim=3)
        self.assertEqual(sorted(vectors), ["Jazz", "play"])
        np.testing.assert_array_equal(vectors["play"], [0.1, 0.2, 0.3])
        self.assertTrue(any("Skipped 3" in line for line in logs.output))

    def test_width_is_inferred_from_first_line(self):
        with open(self.path, "w", encoding="utf-8") as handle:
            handle.write("a 1 2\nb 3 4\n")
        vectors = load_pretrained_vectors(self.path)
        self.assertEqual(vectors["b"].shape, (2,))


class IntentHeadTests(unittest.TestCase):
    def test_logits_for_single_and_batched_reps(self):
        head = IntentHead.create("decoder.t.intent", 4, 3, np.random.default_rng(0))
        self.assertEqual(intent_logits(head, ag.constant(np.ones(4))).shape, (3,))
        self.assertEqual(intent_logits(head, ag.constant(np.ones((2, 4)))).shape, (2, 3))
        with self.assertRaises(DimensionError):
            intent_logits(head, ag.constant(np.ones(5)))

    def test_intent_probabilities_sum_to_one(self):
        rng = np.random.default_rng(2)
        head = IntentHead.create("decoder.t.intent", 4, 6, rng)
        probs = ag.softmax(intent_logits(head, ag.constant(rng.normal(scale=5.0, size=(8, 4))))).data
        self.assertTrue(np.all(probs >= 0.0))
        np.testing.assert_allclose(probs.sum(axis=-1), np.ones(8), rtol=0, atol=1e-12)


if __name__ == "__main__":
    unittest.main()
