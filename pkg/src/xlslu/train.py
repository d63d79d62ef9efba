"""Training loop, evaluation metrics and ablation wiring."""

from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import CodeSwitchConfig, Corpus, Lexicon, Utterance, code_switch
from .encoder import (
    EncoderConfig, EncoderParams, Vocabulary, encode_batch, init_params, intent_logits,
    slot_logits,
)
from .labels import LabelSpace
from .losses import (
    SUPERVISED_TERMS, TERM_NAMES, UNSUPERVISED_TERMS, CLConfig, LossBreakdown, LossWeights,
    check_finite, total_loss,
)
from .numerics import backward, normalize_rows
from .queues import SampleQueues, entries_from_batch

log = logging.getLogger(__name__)

_STREAMS = {"data": 1, "init": 2, "dropout": 3, "codeswitch": 4, "shuffle": 5, "eval": 6}


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named use of the root seed."""
    return np.random.default_rng([seed, _STREAMS[name]])


class AblationMode(str, enum.Enum):
    FULL = "full"
    ONLY_UCL = "only_ucl"
    ONLY_SCL = "only_scl"
    DROP_SLSCL = "drop_slscl"
    DROP_CLSCL = "drop_clscl"
    DROP_MLSCL = "drop_mlscl"
    DROP_INTENT_SCL = "drop_intent_scl"
    DROP_SLOT_SCL = "drop_slot_scl"
    DROP_JOINT_SCL = "drop_joint_scl"

    def disabled_terms(self) -> frozenset:
        if self is AblationMode.FULL:
            return frozenset()
        if self is AblationMode.ONLY_UCL:
            return frozenset(SUPERVISED_TERMS)
        if self is AblationMode.ONLY_SCL:
            return frozenset(UNSUPERVISED_TERMS)
        tag = self.value.split("_")[1]
        if tag in ("slscl", "clscl", "mlscl"):
            return frozenset(t for t in SUPERVISED_TERMS if t.startswith(f"L_{tag}_"))
        suffix = {"intent": "_I", "slot": "_S", "joint": "_Joint"}[tag]
        return frozenset(t for t in SUPERVISED_TERMS if t.endswith(suffix))

    def apply(self, weights: LossWeights) -> LossWeights:
        return weights.without(*self.disabled_terms())


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    cl: CLConfig = field(default_factory=CLConfig)
    switch_p: float = 0.5
    switch_languages: tuple[str, ...] | None = None
    queue_size: int = 16
    batch_size: int = 32
    epochs: int = 30
    optimizer: str = "adam"
    lr: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    dim: int = 16
    hidden: int = 16
    pooling: str = "mean"
    dropout: float = 0.1
    ablation: AblationMode = AblationMode.FULL
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ablation", AblationMode(self.ablation))
        if self.switch_languages is not None:
            object.__setattr__(self, "switch_languages", tuple(self.switch_languages))
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.queue_size < 0:
            raise ValueError("queue size must be non-negative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def effective_weights(self) -> LossWeights:
        return self.ablation.apply(self.weights)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"]["disabled"] = sorted(self.weights.disabled)
        d["ablation"] = self.ablation.value
        if self.switch_languages is not None:
            d["switch_languages"] = list(self.switch_languages)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights(**{**d["weights"], "disabled": frozenset(d["weights"].get("disabled", ()))})
        if "cl" in d:
            d["cl"] = CLConfig(**d["cl"])
        if d.get("switch_languages") is not None:
            d["switch_languages"] = tuple(d["switch_languages"])
        return cls(**d)


# -- optimizers ---------------------------------------------------------

class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: EncoderParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            m = b1 * self.m.get(name, 0.0) + (1 - b1) * g
            v = b2 * self.v.get(name, 0.0) + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            _assign(params, name, params[name].data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: EncoderParams, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            _assign(params, name, params[name].data - self.lr * g)


def _assign(params: EncoderParams, name: str, value: np.ndarray) -> None:
    value = np.asarray(value, dtype=np.float64)
    value.flags.writeable = False
    params[name].data = value


def make_optimizer(config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps)
    return SGD(config.lr)


# -- training state -----------------------------------------------------

@dataclass
class TrainState:
    params: EncoderParams
    optimizer: object
    queues: SampleQueues
    lexicon: Lexicon
    switch: CodeSwitchConfig
    dropout_rng: np.random.Generator
    switch_rng: np.random.Generator
    steps: int = 0


def init_state(config: TrainConfig, train: Corpus, lexicon: Lexicon,
               params: EncoderParams | None = None) -> TrainState:
    if params is None:
        vocab = Vocabulary.build(train, lexicon)
        enc = EncoderConfig(len(vocab), config.dim, config.pooling, config.hidden,
                            config.dropout, config.seed)
        params = init_params(enc, vocab, train.labels, rng_stream(config.seed, "init"))
    languages = config.switch_languages
    if languages is None:
        src = {u.language for u in train}
        languages = tuple(sorted({l for w in lexicon.entries.values() for l in w} - src))
    switch = CodeSwitchConfig(config.switch_p, languages, config.seed)
    return TrainState(
        params=params,
        optimizer=make_optimizer(config),
        queues=SampleQueues(config.queue_size),
        lexicon=lexicon,
        switch=switch,
        dropout_rng=rng_stream(config.seed, "dropout"),
        switch_rng=rng_stream(config.seed, "codeswitch"),
    )


def train_step(state: TrainState, batch: Sequence[Utterance], config: TrainConfig) -> tuple[TrainState, LossBreakdown]:
    """Encode the batch and its code-switched views, take one optimizer step,
    then enqueue the (pre-step, detached) representations."""
    views = [code_switch(u, state.lexicon, state.switch, state.switch_rng) for u in batch]
    snapshot = state.queues.snapshot()
    breakdown, source, view = total_loss(
        state.params, batch, views, snapshot, config.effective_weights, config.cl,
        train_mode=True, rng=state.dropout_rng,
    )
    check_finite(breakdown)
    grads = backward(breakdown.total)
    named = {k: grads.get(t, np.zeros(t.shape)) for k, t in state.params.tensors.items()}
    state.optimizer.step(state.params, named)
    state.queues.enqueue_batch(entries_from_batch(batch, state.params.labels, source, view))
    state.steps += 1
    return state, breakdown


# -- evaluation ---------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    intent_accuracy: float
    slot_f1: float
    overall_accuracy: float

    def to_dict(self) -> dict:
        return asdict(self)


def bio_spans(tags: Sequence[str]) -> set[tuple[int, int, str]]:
    """(start, end-exclusive, type) spans of a BIO sequence.

    An ``I-x`` that does not continue an ``x`` span opens a new one, as in
    conlleval.
    """
    spans = set()
    start, kind = None, None
    for i, tag in enumerate(list(tags) + ["O"]):
        prefix, _, label = tag.partition("-")
        continues = prefix == "I" and kind == label
        if start is not None and not continues:
            spans.add((start, i, kind))
            start, kind = None, None
        if prefix == "B" or (prefix == "I" and not continues):
            start, kind = i, label
    return spans


def span_f1(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]) -> float:
    """Micro span F1; 1.0 when neither side has any span."""
    n_gold = n_pred = n_correct = 0
    for g, p in zip(gold, pred):
        gs, ps = bio_spans(g), bio_spans(p)
        n_gold += len(gs)
        n_pred += len(ps)
        n_correct += len(gs & ps)
    if n_gold == 0 and n_pred == 0:
        return 1.0
    if n_correct == 0:
        return 0.0
    precision, recall = n_correct / n_pred, n_correct / n_gold
    return 2 * precision * recall / (precision + recall)


def predict(params: EncoderParams, utterances: Sequence[Utterance], batch_size: int = 256):
    """Greedy ``(intent, slots)`` predictions in evaluation mode."""
    out = []
    for start in range(0, len(utterances), batch_size):
        chunk = utterances[start:start + batch_size]
        enc = encode_batch(params, chunk, train_mode=False)
        intents = intent_logits(params, enc.h_cls).data.argmax(axis=1)
        slots = slot_logits(params, enc.words).data.argmax(axis=1)
        offs = enc.offsets
        for i in range(len(chunk)):
            out.append((int(intents[i]), tuple(int(s) for s in slots[offs[i]:offs[i + 1]])))
    return out


def score(labels: LabelSpace, gold: Sequence[Utterance], pred: Sequence[tuple[int, tuple]]) -> Metrics:
    if not gold:
        raise ValueError("cannot score an empty corpus")
    intent_ok = [u.intent == p[0] for u, p in zip(gold, pred)]
    slots_ok = [tuple(u.slots) == tuple(p[1]) for u, p in zip(gold, pred)]
    f1 = span_f1(
        [[labels.slots[s] for s in u.slots] for u in gold],
        [[labels.slots[s] for s in p[1]] for p in pred],
    )
    n = len(gold)
    return Metrics(
        intent_accuracy=sum(intent_ok) / n,
        slot_f1=f1,
        overall_accuracy=sum(a and b for a, b in zip(intent_ok, slots_ok)) / n,
    )


def evaluate(params: EncoderParams, corpus: Corpus) -> Metrics:
    return score(corpus.labels, corpus.examples, predict(params, corpus.examples))


def view_alignment(params: EncoderParams, utterances: Sequence[Utterance], lexicon: Lexicon,
                   languages: Sequence[str], p: float = 0.5, seed: int = 0) -> np.ndarray:
    """Cosine between each utterance's sentence vector and that of its
    code-switched view (fixed seed, evaluation mode)."""
    cfg = CodeSwitchConfig(p, tuple(languages), seed)
    rng = np.random.default_rng(seed)
    views = [code_switch(u, lexicon, cfg, rng) for u in utterances]
    a = normalize_rows(encode_batch(params, utterances).h_cls).data
    b = normalize_rows(encode_batch(params, views).h_cls).data
    return (a * b).sum(axis=1)


# -- fitting ------------------------------------------------------------

@dataclass
class FitResult:
    params: EncoderParams
    initial_params: EncoderParams
    curves: list[dict[str, float]]
    history: list[dict[str, Metrics]]
    best_epoch: int  # 0 means the initial parameters


def fit(config: TrainConfig, train: Corpus, dev: dict[str, Corpus], lexicon: Lexicon,
        params: EncoderParams | None = None,
        on_epoch: Callable[[int, dict, dict], None] | None = None) -> FitResult:
    """Train for ``config.epochs`` epochs and keep the parameters with the best
    mean dev overall accuracy (earliest epoch wins ties)."""
    state = init_state(config, train, lexicon, params)
    initial = state.params.copy()
    shuffle = rng_stream(config.seed, "shuffle")
    curves: list[dict[str, float]] = []
    history: list[dict[str, Metrics]] = []
    best_arrays, best_epoch, best_score = initial.arrays(), 0, -1.0
    examples = list(train.examples)
    for epoch in range(1, config.epochs + 1):
        order = shuffle.permutation(len(examples))
        sums = dict.fromkeys((*TERM_NAMES, "total"), 0.0)
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            batch = [examples[i] for i in order[start:start + config.batch_size]]
            _, breakdown = train_step(state, batch, config)
            for k, v in breakdown.as_dict().items():
                sums[k] += v
            n_batches += 1
        curve = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}}
        curves.append(curve)
        metrics = {lang: evaluate(state.params, c) for lang, c in dev.items()}
        history.append(metrics)
        mean_overall = float(np.mean([m.overall_accuracy for m in metrics.values()])) if metrics else 0.0
        if not metrics or mean_overall > best_score:
            best_score, best_epoch = mean_overall, epoch
            best_arrays = {k: v.copy() for k, v in state.params.arrays().items()}
        log.info("epoch %d total %.4f dev overall %.4f", epoch, curve["total"], mean_overall)
        if on_epoch is not None:
            on_epoch(epoch, curve, metrics)
    best = initial.replace_arrays(best_arrays) if config.epochs else initial.copy()
    return FitResult(best, initial, curves, history, best_epoch)
