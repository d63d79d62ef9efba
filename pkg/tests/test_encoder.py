import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xlslu.corpus import Utterance
from xlslu.encoder import (
    EncoderConfig, Vocabulary, encode, encode_batch, init_params, intent_logits, intent_probs,
    load_checkpoint, pool_words, save_checkpoint, slot_logits, slot_probs,
)
from xlslu.labels import LabelSpace
from xlslu.numerics import Tensor, backward, finite_diff_check

SPACE = LabelSpace(("a", "b", "c"), ("O", "B-x", "I-x", "B-y"))
WORDS = ["alpha", "beta", "gamma", "delta", "eps"]


def make_params(seed=0, pooling="mean", dropout=0.0):
    vocab = Vocabulary(WORDS)
    cfg = EncoderConfig(len(vocab), dim=6, pooling=pooling, hidden=5, dropout=dropout, seed=seed)
    return init_params(cfg, vocab, SPACE, np.random.default_rng(seed))


def utt(*words):
    return Utterance(words, 0, (0,) * len(words))


def test_vocabulary_unknown_maps_to_zero():
    v = Vocabulary(WORDS)
    assert v.words[0] == "<unk>" and v.ids(["beta", "zzz"]) == [v.index["beta"], 0]


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(5, dim=1)
    with pytest.raises(ValueError):
        EncoderConfig(5, pooling="max")
    with pytest.raises(ValueError):
        EncoderConfig(5, dropout=1.0)
    with pytest.raises(ValueError):
        init_params(EncoderConfig(3), Vocabulary(WORDS), SPACE)


@pytest.mark.parametrize("pooling", ["mean", "attention"])
def test_shapes(pooling):
    p = make_params(pooling=pooling)
    e = encode(p, utt("alpha", "beta", "zzz"))
    assert e.h_cls.shape == (6,) and e.words.shape == (3, 6) and len(e.word_list) == 3
    b = encode_batch(p, [utt("alpha"), utt("beta", "gamma", "delta")])
    assert b.h_cls.shape == (2, 6) and b.words.shape == (4, 6) and b.lengths == (1, 3)


def test_batch_matches_single_encodings():
    p = make_params(pooling="attention")
    us = [utt("alpha", "beta"), utt("gamma"), utt("delta", "eps", "alpha")]
    batch = encode_batch(p, us)
    for i, u in enumerate(us):
        single = encode(p, u)
        np.testing.assert_allclose(batch.utterance(i).h_cls.data, single.h_cls.data, atol=1e-12)
        np.testing.assert_allclose(batch.utterance(i).words.data, single.words.data, atol=1e-12)


def test_mean_pooling_of_equal_vectors():
    v = np.array([0.2, -0.4, 0.9])
    pooled = pool_words(Tensor(np.tile(v, (4, 1))), "mean")
    np.testing.assert_allclose(pooled.data[0], v, atol=1e-15)


def test_attention_pooling_is_convex_combination():
    words = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    pooled = pool_words(words, "attention", Tensor([3.0, 0.0])).data[0]
    assert pooled.sum() == pytest.approx(1.0) and pooled[0] > pooled[1]


def test_eval_mode_is_bitwise_deterministic():
    us = [utt("alpha", "beta", "gamma"), utt("eps")]
    a = encode_batch(make_params(3), us).h_cls.data
    b = encode_batch(make_params(3), us).h_cls.data
    assert a.tobytes() == b.tobytes()


def test_dropout_only_in_train_mode():
    p = make_params(dropout=0.5)
    us = [utt("alpha", "beta", "gamma")]
    eval_out = encode_batch(p, us).h_cls.data
    assert encode_batch(p, us).h_cls.data.tobytes() == eval_out.tobytes()
    train_out = encode_batch(p, us, train_mode=True, rng=np.random.default_rng(1)).h_cls.data
    assert not np.allclose(train_out, eval_out)


def test_zero_head_gives_uniform():
    p = make_params()
    arrays = p.arrays()
    arrays["w_intent"] = np.zeros_like(arrays["w_intent"])
    arrays["b_intent"] = np.zeros_like(arrays["b_intent"])
    arrays["w_slot"] = np.zeros_like(arrays["w_slot"])
    arrays["b_slot"] = np.zeros_like(arrays["b_slot"])
    p = p.replace_arrays(arrays)
    e = encode_batch(p, [utt("alpha", "beta")])
    np.testing.assert_allclose(intent_probs(p, e.h_cls).data, 1 / 3, atol=1e-15)
    np.testing.assert_allclose(slot_probs(p, e.words).data, 1 / 4, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_probs_normalized_and_argmax_consistent(seed):
    p = make_params(seed, pooling="attention")
    e = encode_batch(p, [utt("alpha", "beta", "gamma"), utt("delta")])
    for logits, probs in ((intent_logits(p, e.h_cls), intent_probs(p, e.h_cls)),
                          (slot_logits(p, e.words), slot_probs(p, e.words))):
        np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-12)
        assert (probs.data.argmax(axis=1) == logits.data.argmax(axis=1)).all()


def test_parameter_gradients_match_finite_differences():
    p = make_params(pooling="attention")
    us = [utt("alpha", "beta", "gamma"), utt("delta", "eps")]
    for name in ("embedding", "w_prev", "w_ctx", "attention", "w_pool2", "w_slot"):
        def f(x, name=name):
            q = p.copy()
            q.tensors[name] = x
            e = encode_batch(q, us)
            return intent_logits(q, e.h_cls).tanh().sum() + slot_logits(q, e.words).tanh().sum()
        assert finite_diff_check(f, p[name].data) < 1e-6, name


def test_every_parameter_receives_gradient():
    p = make_params(pooling="attention")
    e = encode_batch(p, [utt("alpha", "beta", "gamma")])
    grads = backward(intent_logits(p, e.h_cls).sum() + slot_logits(p, e.words).sum())
    assert all(t in grads for t in p.leaves())


def test_checkpoint_round_trip(tmp_path):
    p = make_params(4, pooling="attention")
    save_checkpoint(p, tmp_path / "ck.json")
    q = load_checkpoint(tmp_path / "ck.json")
    assert q.config == p.config and q.labels == p.labels and q.vocab.words == p.vocab.words
    for k, v in p.arrays().items():
        assert q[k].data.tobytes() == v.tobytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.json")
