import json

import numpy as np
import pytest

from xlslu.corpus import CodeSwitchConfig, Corpus, Utterance, code_switch
from xlslu.encoder import encode_batch, intent_logits, slot_logits
from xlslu.labels import LabelSpace
from xlslu.losses import TERM_NAMES, LossWeights, intent_ce, slot_ce
from xlslu.numerics import Tensor, backward
from xlslu.train import (
    AblationMode, Metrics, TrainConfig, bio_spans, evaluate, fit, init_state, predict, rng_stream,
    score, span_f1, train_step, view_alignment,
)

from conftest import FIXTURES

CE_ONLY = LossWeights().without(*TERM_NAMES[2:])


def small_config(**kw):
    base = dict(dim=8, hidden=8, batch_size=16, queue_size=8, epochs=2, seed=2)
    base.update(kw)
    return TrainConfig(**base)


def test_rng_streams_are_independent_and_reproducible():
    a = rng_stream(3, "data").random(4)
    assert (a == rng_stream(3, "data").random(4)).all()
    assert not np.allclose(a, rng_stream(3, "init").random(4))


def test_config_round_trip_and_validation():
    cfg = TrainConfig(ablation="only_scl", switch_languages=["de"], weights=LossWeights(beta_i=0.5))
    again = TrainConfig.from_dict(cfg.to_dict())
    assert again == cfg and again.ablation is AblationMode.ONLY_SCL
    for bad in (dict(batch_size=0), dict(lr=0.0), dict(epochs=-1), dict(optimizer="rmsprop")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        TrainConfig(ablation="nothing")


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.queue_size, cfg.batch_size, cfg.optimizer, cfg.lr) == (16, 32, "adam", 1e-2)
    assert (cfg.cl.tau, cfg.cl.tau_prime) == (0.1, 0.1)


def test_step_is_deterministic(small_data):
    cfg = small_config()
    batch = small_data.train.examples[:16]
    results = []
    for _ in range(2):
        state = init_state(cfg, small_data.train, small_data.lexicon)
        for _ in range(3):
            state, _ = train_step(state, batch, cfg)
        results.append(state.params.arrays())
    for k in results[0]:
        assert results[0][k].tobytes() == results[1][k].tobytes()


@pytest.mark.parametrize("capacity, batch", [(8, 16), (16, 5), (0, 4)])
def test_queue_length_after_first_step(small_data, capacity, batch):
    cfg = small_config(queue_size=capacity, batch_size=batch)
    state = init_state(cfg, small_data.train, small_data.lexicon)
    state, _ = train_step(state, small_data.train.examples[:batch], cfg)
    assert len(state.queues) == min(batch, capacity)


@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_ce_only_step_matches_reference_loop(small_data, optimizer):
    cfg = small_config(weights=CE_ONLY, dropout=0.0, optimizer=optimizer, lr=0.05)
    state = init_state(cfg, small_data.train, small_data.lexicon)
    ref = {k: v.copy() for k, v in state.params.arrays().items()}
    switch = CodeSwitchConfig(cfg.switch_p, state.switch.languages)
    switch_rng = rng_stream(cfg.seed, "codeswitch")
    m = {k: np.zeros_like(v) for k, v in ref.items()}
    v2 = {k: np.zeros_like(v) for k, v in ref.items()}
    batches = [small_data.train.examples[i:i + 16] for i in (0, 16, 32)]
    for t, batch in enumerate(batches, start=1):
        state, _ = train_step(state, batch, cfg)
        # reference: per-utterance cross-entropy on each code-switched view
        params = state.params.replace_arrays(ref)
        views = [code_switch(u, small_data.lexicon, switch, switch_rng) for u in batch]
        loss = Tensor(0.0)
        for u, view in zip(batch, views):
            enc = encode_batch(params, [view])
            loss = loss + intent_ce(intent_logits(params, enc.h_cls)[0], u.intent)
            loss = loss + slot_ce(slot_logits(params, enc.words), u.slots)
        grads = backward(loss * (1.0 / len(batch)))
        for k in ref:
            g = grads.get(params[k], np.zeros_like(ref[k]))
            if optimizer == "sgd":
                ref[k] = ref[k] - cfg.lr * g
            else:
                m[k] = 0.9 * m[k] + 0.1 * g
                v2[k] = 0.999 * v2[k] + 0.001 * g * g
                ref[k] = ref[k] - cfg.lr * (m[k] / (1 - 0.9 ** t)) / (np.sqrt(v2[k] / (1 - 0.999 ** t)) + 1e-8)
    for k, arr in state.params.arrays().items():
        np.testing.assert_allclose(arr, ref[k], atol=1e-10, rtol=0, err_msg=k)


# -- metrics --------------------------------------------------------------

SPACE = LabelSpace(("a", "b"), ("O", "B-x", "I-x", "B-y"))


def test_bio_spans():
    assert bio_spans(["B-x", "I-x", "O", "B-y"]) == {(0, 2, "x"), (3, 4, "y")}
    assert bio_spans(["I-x", "I-x", "B-x"]) == {(0, 2, "x"), (2, 3, "x")}
    assert bio_spans(["O", "O"]) == set()


def test_perfect_predictions():
    gold = [Utterance(("w", "v"), 0, (1, 2)), Utterance(("w",), 1, (0,))]
    pred = [(u.intent, u.slots) for u in gold]
    assert score(SPACE, gold, pred) == Metrics(1.0, 1.0, 1.0)


def test_all_outside_predictions_give_zero_f1():
    gold = [Utterance(("w", "v"), 0, (1, 2)), Utterance(("w",), 1, (3,))]
    pred = [(u.intent, (0,) * len(u)) for u in gold]
    m = score(SPACE, gold, pred)
    assert m.slot_f1 == 0.0 and m.intent_accuracy == 1.0 and m.overall_accuracy == 0.0


def test_boundary_error_fixture():
    # gold spans: u1 {x[0:2], y[3:4]}, u2 {x[1:2]}, u3 {y[0:1], x[1:3]}  -> 5
    # predicted:  u1 {x[0:1], y[3:4]}, u2 {x[1:2]}, u3 {y[0:1], x[1:3]}  -> 5, 4 correct
    gold = [["B-x", "I-x", "O", "B-y"], ["O", "B-x"], ["B-y", "B-x", "I-x"]]
    pred = [["B-x", "O", "O", "B-y"], ["O", "B-x"], ["B-y", "B-x", "I-x"]]
    assert span_f1(gold, pred) == pytest.approx(0.8, abs=1e-15)
    assert span_f1([["O"]], [["O"]]) == 1.0
    assert span_f1([["B-x"]], [["O"]]) == 0.0


def test_score_rejects_empty():
    with pytest.raises(ValueError):
        score(SPACE, [], [])


def test_evaluate_is_pure_and_bounded(small_data):
    cfg = small_config()
    params = init_state(cfg, small_data.train, small_data.lexicon).params
    for corpus in small_data.test.values():
        a, b = evaluate(params, corpus), evaluate(params, corpus)
        assert a == b
        preds = predict(params, corpus.examples)
        slot_exact = np.mean([tuple(u.slots) == p[1] for u, p in zip(corpus, preds)])
        assert a.overall_accuracy <= min(a.intent_accuracy, slot_exact) + 1e-15


# -- fitting ----------------------------------------------------------------

def test_zero_epochs_returns_initial_params(small_data):
    cfg = small_config(epochs=0)
    result = fit(cfg, small_data.train, small_data.dev, small_data.lexicon)
    init = init_state(cfg, small_data.train, small_data.lexicon).params
    assert result.curves == [] and result.best_epoch == 0
    for k, v in init.arrays().items():
        assert result.params[k].data.tobytes() == v.tobytes()


def test_curve_length_and_selection(small_data):
    cfg = small_config(epochs=3)
    seen = []
    result = fit(cfg, small_data.train, small_data.dev, small_data.lexicon,
                 on_epoch=lambda e, c, m: seen.append(e))
    assert len(result.curves) == len(result.history) == 3 and seen == [1, 2, 3]
    assert set(result.curves[0]) == {"epoch", *TERM_NAMES, "total"}
    scores = [np.mean([m.overall_accuracy for m in h.values()]) for h in result.history]
    assert result.best_epoch == int(np.argmax(scores)) + 1
    best = evaluate(result.params, small_data.dev["de"])
    assert best == result.history[result.best_epoch - 1]["de"]


def test_ce_only_loss_decreases(desk_data):
    # dropout off: the epoch mean is then a smooth function of the parameters
    pinned = json.loads((FIXTURES / "ce_only_curve.json").read_text())
    cfg = TrainConfig(weights=CE_ONLY, epochs=20, seed=pinned["train_seed"], dropout=0.0)
    result = fit(cfg, desk_data.train, {}, desk_data.lexicon)
    totals = [c["total"] for c in result.curves]
    assert all(b < a for a, b in zip(totals, totals[1:])), totals
    np.testing.assert_allclose(totals, pinned["totals"], rtol=1e-6)


def test_view_alignment_range(small_data):
    params = init_state(small_config(), small_data.train, small_data.lexicon).params
    cos = view_alignment(params, small_data.test["en"].examples, small_data.lexicon, ["de"])
    assert cos.shape == (30,) and (np.abs(cos) <= 1 + 1e-12).all()
    same = view_alignment(params, small_data.test["en"].examples, small_data.lexicon, ["de"], p=0.0)
    np.testing.assert_allclose(same, 1.0, atol=1e-12)


def test_fit_history_independent_of_corpus_object(small_data):
    cfg = small_config(epochs=1)
    copy = Corpus(list(small_data.train.examples), small_data.train.labels)
    a = fit(cfg, small_data.train, small_data.dev, small_data.lexicon)
    b = fit(cfg, copy, small_data.dev, small_data.lexicon)
    assert a.curves == b.curves
