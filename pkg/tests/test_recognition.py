import numpy as np
import pytest

from textspot.recognition import CharVocab, Recognizer, VocabularyError
from textspot.roi import RoiBatch, RoiFeature
from textspot.tensor import Tensor, backward, no_grad

from gradcases import worst_error


def small_recognizer(seed=0, chars="ab", hidden=8, **kw):
    rng = np.random.default_rng(seed)
    return Recognizer(rng, 3, CharVocab(chars), conv_width=4, conv_layers=2, enc_hidden=hidden, dec_hidden=hidden,
                      embed=4, attn=6, dtype=np.float64, **kw)


def roi(rng, h=4, w=8, c=3):
    return RoiFeature(Tensor(rng.standard_normal((h, w, c))), np.zeros((4, 2)))


def batch_of(*feats):
    width = max(f.shape[1] for f in feats)
    data = np.zeros((len(feats), feats[0].shape[0], width, feats[0].shape[2]))
    for k, f in enumerate(feats):
        data[k, :, :f.shape[1]] = f
    return RoiBatch(Tensor(data), np.array([f.shape[1] for f in feats]))


def test_vocab_layout_and_round_trip(tmp_path):
    v = CharVocab("abc")
    assert (v.eos, v.start, v.pad, v.num_classes) == (3, 4, 5, 4)
    assert v.encode("CaB") == [2, 0, 1]
    assert v.decode([0, 2, 3]) == "ac"
    v.to_file(tmp_path / "v.txt")
    assert CharVocab.from_file(tmp_path / "v.txt").chars == "abc"


def test_vocab_rejects_unknown_character_by_name():
    with pytest.raises(VocabularyError, match="'!'"):
        CharVocab("ab").encode("a!")
    with pytest.raises(VocabularyError):
        CharVocab("aa")


def test_encoder_keeps_spatial_dims():
    rec = small_recognizer()
    enc = rec.encode(roi(np.random.default_rng(0), 4, 7))
    assert enc.features.shape == (1, 4, 7, 8)


def test_encoder_zero_input_zero_biases_is_zero():
    rec = small_recognizer()
    rec.eval()   # running stats: mean 0, var 1, so zero stays zero through BN
    enc = rec.encode(RoiFeature(Tensor(np.zeros((4, 6, 3))), np.zeros((4, 2))))
    assert np.abs(enc.features.data).max() == 0.0


def test_encoder_is_context_dependent():
    rng = np.random.default_rng(1)
    rec = small_recognizer()
    rec.eval()
    x = rng.standard_normal((4, 8, 3))
    swapped = x.copy()
    swapped[:, [1, 5]] = swapped[:, [5, 1]]
    a = rec.encode(RoiFeature(Tensor(x), None)).features.data
    b = rec.encode(RoiFeature(Tensor(swapped), None)).features.data
    # the last column sees every column through the row recurrence
    assert not np.allclose(a[0, :, -1], b[0, :, -1])


def test_padding_does_not_change_encoding_of_narrow_roi():
    rng = np.random.default_rng(2)
    rec = small_recognizer()
    rec.eval()
    narrow, wide = rng.standard_normal((4, 5, 3)), rng.standard_normal((4, 9, 3))
    alone = rec.encode_batch(batch_of(narrow)).features.data[0]
    padded = rec.encode_batch(batch_of(narrow, wide)).features.data[0, :, :5]
    np.testing.assert_allclose(padded, alone, atol=1e-12)


def test_bidirectional_encoder_doubles_channels():
    rec = small_recognizer(bidirectional=True)
    enc = rec.encode(roi(np.random.default_rng(0)))
    assert enc.features.shape[-1] == 16


def test_attention_uniform_when_scores_equal():
    rec = small_recognizer()
    rec.att_v.weight.data[:] = 0.0
    rng = np.random.default_rng(0)
    flat = Tensor(rng.standard_normal((1, 6, 8)))
    ctx, alpha = rec.attention_step(flat, rec.att_h(flat), np.ones((1, 6), bool), rec.initial_state(1))
    np.testing.assert_allclose(alpha.data, 1 / 6)
    np.testing.assert_allclose(ctx.data[0], flat.data[0].mean(0))


def test_attention_saturates_on_one_cell():
    rec = small_recognizer()
    rng = np.random.default_rng(0)
    flat = Tensor(rng.standard_normal((1, 5, 8)))
    proj = np.zeros((1, 5, 6))
    proj[0, 3] = 50.0
    rec.att_v.weight.data[:] = 100.0
    ctx, alpha = rec.attention_step(flat, Tensor(proj), np.ones((1, 5), bool), rec.initial_state(1))
    np.testing.assert_allclose(ctx.data[0], flat.data[0, 3], atol=1e-12)


def test_attention_ignores_masked_cells():
    rec = small_recognizer()
    rng = np.random.default_rng(3)
    flat = Tensor(rng.standard_normal((2, 6, 8)))
    mask = np.array([[1, 1, 1, 0, 0, 0], [1, 1, 1, 1, 1, 1]], bool)
    _, alpha = rec.attention_step(flat, rec.att_h(flat), mask, rec.initial_state(2))
    assert np.all(alpha.data[0, 3:] == 0)
    np.testing.assert_allclose(alpha.data.sum(-1), 1.0, atol=1e-12)


def test_decode_step_shapes_and_determinism():
    rec = small_recognizer(chars="abc")
    ctx = Tensor(np.ones((2, 8)))
    a, g = rec.decode_step(ctx, np.array([rec.vocab.start, 0]), rec.initial_state(2))
    b, _ = rec.decode_step(ctx, np.array([rec.vocab.start, 0]), rec.initial_state(2))
    assert a.shape == (2, 4) and g.shape == (2, 8)
    np.testing.assert_array_equal(a.data, b.data)
    with pytest.raises(VocabularyError):
        rec.decode_step(ctx, np.array([99, 0]), rec.initial_state(2))


def test_uniform_logits_give_log_class_count():
    chars = "0123456789abcdefghijklmnopqrstuvwxyz_"
    rec = Recognizer(np.random.default_rng(0), 3, CharVocab(chars), conv_width=4, conv_layers=1,
                     enc_hidden=4, dec_hidden=4, embed=2, attn=4, dtype=np.float64)
    rec.out.weight.data[:] = 0.0
    loss = rec.loss_batch(batch_of(np.ones((4, 6, 3))), ["hello"])
    assert float(loss.data) == pytest.approx(np.log(38), abs=1e-12)


def test_loss_averages_over_valid_steps():
    rec = small_recognizer()
    inputs, targets, mask = rec.targets(["a", "abb"])
    assert mask.sum() == 6
    assert inputs[:, 0].tolist() == [rec.vocab.start] * 2
    assert targets[0, :2].tolist() == [0, rec.vocab.eos]
    assert targets[1].tolist() == [0, 1, 1, rec.vocab.eos]


def test_recognition_branch_gradients():
    rng = np.random.default_rng(5)
    rec = small_recognizer(seed=5)
    for p in rec.parameters():
        if p.ndim == 1:
            p.data = rng.normal(0, 0.1, p.shape)
    rois = batch_of(rng.standard_normal((4, 8, 3)), rng.standard_normal((4, 6, 3)))

    def forward():
        return rec.loss_batch(rois, ["ab", "b"])

    params = rec.parameters()
    assert worst_error(forward, params, rng, eps=1e-7, max_entries=6, pooled=True) < 1e-3


def test_loss_drops_along_negative_gradient():
    rng = np.random.default_rng(6)
    rec = small_recognizer(seed=6)
    rois = batch_of(rng.standard_normal((4, 8, 3)))
    loss = rec.loss_batch(rois, ["ab"])
    backward(loss)
    before = float(loss.data)
    for p in rec.parameters():
        if p.grad is not None:
            p.data = p.data - 1e-3 * p.grad
    with no_grad():
        after = float(rec.loss_batch(rois, ["ab"]).data)
    assert 0 <= after < before


def test_greedy_decode_stops_at_eos_first():
    rec = small_recognizer()
    rec.out.weight.data[:] = 0.0
    rec.out.bias.data[:] = 0.0
    rec.out.bias.data[rec.vocab.eos] = 5.0
    text, trace = rec.greedy_decode(roi(np.random.default_rng(0)))
    assert text == "" and len(trace.indices) == 1 and not trace.truncated


def test_greedy_decode_truncates_at_max_steps():
    rec = small_recognizer()
    rec.out.weight.data[:] = 0.0
    rec.out.bias.data[:] = 0.0
    rec.out.bias.data[1] = 5.0
    text, trace = rec.greedy_decode(roi(np.random.default_rng(0)), max_steps=5)
    assert text == "bbbbb" and trace.truncated
    for w in trace.weights:
        assert abs(w.sum() - 1) < 1e-6
    with pytest.raises(ValueError):
        rec.greedy_decode(roi(np.random.default_rng(0)), max_steps=0)


def test_ties_pick_lowest_index():
    rec = small_recognizer()
    rec.out.weight.data[:] = 0.0
    rec.out.bias.data[:] = 1.0
    text, trace = rec.greedy_decode(roi(np.random.default_rng(0)), max_steps=2)
    assert trace.indices == [0, 0]


def test_overfit_single_roi():
    from textspot.trainer import Adam
    rng = np.random.default_rng(7)
    rec = small_recognizer(seed=7, hidden=16)
    rois = batch_of(rng.standard_normal((4, 8, 3)))
    opt = Adam(dict(rec.named_parameters()), lr=0.01)
    for _ in range(150):
        rec.zero_grad()
        backward(rec.loss_batch(rois, ["ab"]))
        opt.step()
    rec.eval()
    # eval mode uses running statistics; refresh them on this input first
    rec.train()
    with no_grad():
        for _ in range(60):
            rec.encode_batch(rois)
    rec.eval()
    assert rec.greedy_decode_batch(rois)[0][0] == "ab"
