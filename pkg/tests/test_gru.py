import numpy as np
import pytest

from faplearn import numeric as nm
from faplearn.corpus import EOS, Trace, Vocabulary
from faplearn.fap import extract_fap_vector, fap_target_sequence, fap_vocabulary
from faplearn.gru import (Decoder, Encoder, GruCell, IndexOutOfVocab,
                          KIND_CLASSIFICATION, KIND_FAP, KIND_RECONSTRUCTION,
                          MultiTaskModel, build_model, decode_greedy,
                          decode_teacher_forced, encode, gru_step)
from faplearn.numeric import GradTape, Tensor, backward, grad_check


def zero_cell(E, H):
    cell = GruCell(E, H, np.random.default_rng(0), "cell")
    for p in cell.parameters():
        p.value.data[...] = 0.0
    return cell


class TestGruStep:
    def test_zero_params_halve_state(self):
        cell = zero_cell(3, 4)
        h = Tensor(np.array([1.0, -2.0, 0.5, 4.0]))
        out = gru_step(cell, Tensor(np.zeros(3)), h)
        # z = sigmoid(0) = 0.5 and the candidate is 0, so h_t = 0.5 h
        assert np.allclose(out.data, 0.5 * h.data)

    def test_zero_state_stays_zero(self):
        cell = zero_cell(3, 4)
        out = gru_step(cell, Tensor(np.ones(3)), Tensor(np.zeros(4)))
        assert not out.data.any()

    def test_gradient_check_random_cell(self):
        rng = np.random.default_rng(8)
        cell = GruCell(3, 5, rng, "cell")
        x = Tensor(rng.normal(size=3))
        h0 = Tensor(rng.normal(size=5))

        def f():
            return nm.total_sum(gru_step(cell, x, h0))

        report = grad_check(f, cell.parameters(), eps=1e-5, rng=np.random.default_rng(1))
        assert report.passed(1e-4), report.summary()


def small_encoder(bidirectional=False, V=9, E=4, H=6, seed=3):
    return Encoder(V, E, H, bidirectional, np.random.default_rng(seed))


class TestEncode:
    def test_length_one_equals_single_step(self):
        enc = small_encoder()
        C = encode(enc, [5])
        x = Tensor(enc.embedding.value.data[5])
        expected = gru_step(enc.cell_fwd, x, Tensor(np.zeros(enc.hidden_dim)))
        assert np.allclose(C.data, expected.data)

    def test_deterministic(self):
        enc = small_encoder()
        seq = [1, 5, 7, 2, 5]
        assert np.array_equal(encode(enc, seq).data, encode(enc, seq).data)

    def test_shape_invariant_across_lengths(self):
        enc = small_encoder()
        for n in (1, 3, 10, 40):
            assert encode(enc, [4] * n).data.shape == (enc.hidden_dim,)

    def test_index_out_of_vocab(self):
        enc = small_encoder()
        with pytest.raises(IndexOutOfVocab):
            encode(enc, [enc.vocab_size])

    def test_palindrome_with_tied_cells(self):
        enc = small_encoder(bidirectional=True)
        for p_src, p_dst in zip(enc.cell_fwd.parameters(), enc.cell_bwd.parameters()):
            p_dst.value.data[...] = p_src.value.data
        seq = np.array([[4, 7, 2, 7, 4]])
        lengths = np.array([5])
        h_fwd = enc._run_direction(enc.cell_fwd, seq, lengths, reverse=False)
        h_bwd = enc._run_direction(enc.cell_bwd, seq, lengths, reverse=True)
        assert np.allclose(h_fwd.data, h_bwd.data, atol=1e-14)

    def test_batch_padding_matches_individual(self):
        # padded batch encoding must equal per-sequence encoding
        enc = small_encoder()
        seqs = [[1, 2, 3, 4, 5, 6], [7, 8], [3]]
        from faplearn.training import pad_rows
        X, lengths = pad_rows(seqs)
        batch = enc.encode_batch(X, lengths).data
        for row, seq in zip(batch, seqs):
            assert np.allclose(row, encode(enc, seq).data, atol=1e-14)

    def test_bidirectional_context_shape(self):
        enc = small_encoder(bidirectional=True)
        assert encode(enc, [1, 2, 3]).data.shape == (enc.hidden_dim,)


def small_decoder(kind, seed=4, E=4, H=6):
    alphabet = {
        KIND_CLASSIFICATION: Vocabulary.from_tokens(["famA", "famB", "famC"]),
        KIND_FAP: fap_vocabulary(),
        KIND_RECONSTRUCTION: Vocabulary.from_tokens([f"t{i}" for i in range(5)]),
    }[kind]
    return Decoder(alphabet, E, H, kind, np.random.default_rng(seed), f"decoder.{kind}")


class TestTeacherForcing:
    def test_classification_emits_one_distribution(self):
        dec = small_decoder(KIND_CLASSIFICATION)
        probs = decode_teacher_forced(dec, Tensor(np.zeros(6)), [4])
        assert len(probs) == 1
        assert probs[0].data.shape == (dec.alphabet.size,)
        assert abs(probs[0].data.sum() - 1.0) < 1e-12

    def test_fap_length_eight(self):
        dec = small_decoder(KIND_FAP)
        target = fap_target_sequence(extract_fap_vector(
            Trace("t", "f", tuple("CreateFileA WriteFile ReadFile GetTempFileNameA "
                                  "SetFileAttributesA CopyFileA DeleteFileA".split()))),
            dec.alphabet)
        assert len(target) == 8
        probs = decode_teacher_forced(dec, Tensor(np.zeros(6)), target)
        assert len(probs) == 8

    def test_reconstruction_length(self):
        dec = small_decoder(KIND_RECONSTRUCTION)
        seq = [4, 5, 6]
        probs = decode_teacher_forced(dec, Tensor(np.zeros(6)), seq + [EOS])
        assert len(probs) == len(seq) + 1


class TestGreedy:
    def test_classification_returns_single_index(self):
        dec = small_decoder(KIND_CLASSIFICATION)
        out = decode_greedy(dec, Tensor(np.zeros(6)), 10)
        assert len(out) == 1
        assert 0 <= out[0] < dec.alphabet.size

    def test_immediate_eos_gives_empty_output(self):
        dec = small_decoder(KIND_FAP)
        dec.out_b.value.data[...] = 0.0
        dec.out_b.value.data[EOS] = 50.0
        assert decode_greedy(dec, Tensor(np.zeros(6)), 8) == []

    def test_terminates_at_max_len(self):
        dec = small_decoder(KIND_FAP)
        dec.out_b.value.data[...] = 0.0
        idx = dec.alphabet.token_to_index["CreateFile"]
        dec.out_b.value.data[idx] = 50.0  # never emits EOS
        out = decode_greedy(dec, Tensor(np.zeros(6)), 5)
        assert out == [idx] * 5

    def test_invariant_under_positive_logit_scaling(self):
        dec = small_decoder(KIND_FAP, seed=9)
        C = Tensor(np.random.default_rng(2).normal(size=6))
        base = decode_greedy(dec, C, 8)
        dec.out_W.value.data *= 3.7
        dec.out_b.value.data *= 3.7
        assert decode_greedy(dec, C, 8) == base

    def test_tie_breaks_to_lowest_index(self):
        dec = small_decoder(KIND_CLASSIFICATION)
        for p in dec.parameters():
            p.value.data[...] = 0.0  # all logits equal
        out = decode_greedy(dec, Tensor(np.zeros(6)), 1)
        assert out == [0]


class TestFullModelGradients:
    def test_five_step_multitask_grad_check(self):
        vocab = Vocabulary.from_tokens([f"api{i}" for i in range(6)])
        model = build_model(vocab, ["famA", "famB"], embed_dim=3, hidden_dim=4,
                            bidirectional=True,
                            decoders=(KIND_CLASSIFICATION, KIND_FAP), seed=5)
        rng = np.random.default_rng(0)
        seq = rng.integers(4, vocab.size, size=5)
        cls_target = np.array([[4]])
        fap_target = np.array([[4, 6, EOS]])

        def f():
            C = model.encoder.encode_batch(seq.reshape(1, -1), np.array([5]))
            cls_probs = model.decoders["cls"].teacher_forced_probs(C, cls_target)
            fap_probs = model.decoders["fap"].teacher_forced_probs(C, fap_target)
            loss = nm.cross_entropy_rows(cls_probs[0], cls_target[:, 0])
            for t, p in enumerate(fap_probs):
                loss = nm.add(loss, nm.cross_entropy_rows(p, fap_target[:, t]))
            return loss

        report = grad_check(f, model.parameters(), eps=1e-5,
                            rng=np.random.default_rng(7))
        assert report.passed(1e-4), report.summary()


class TestPersistence:
    def test_save_load_identical_outputs(self, tmp_path):
        vocab = Vocabulary.from_tokens([f"api{i}" for i in range(6)])
        model = build_model(vocab, ["a", "b", "c"], embed_dim=4, hidden_dim=5,
                            bidirectional=True,
                            decoders=(KIND_RECONSTRUCTION, KIND_CLASSIFICATION, KIND_FAP),
                            seed=1)
        path = tmp_path / "m.ckpt"
        model.save(path)
        loaded = MultiTaskModel.load(path)
        assert loaded.families == model.families
        assert loaded.encoder.bidirectional
        seq = [4, 5, 6, 7]
        a = encode(model.encoder, seq).data
        b = encode(loaded.encoder, seq).data
        assert np.array_equal(a, b)
        Ca = encode(model.encoder, seq)
        assert (decode_greedy(model.decoders["fap"], Ca, 8)
                == decode_greedy(loaded.decoders["fap"], Ca, 8))
