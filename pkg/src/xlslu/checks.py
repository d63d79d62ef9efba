"""Finite-difference verification of every loss term on small random instances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Utterance
from .encoder import EncodedBatch, EncoderConfig, Vocabulary, init_params
from .labels import LabelSpace
from .losses import TERM_NAMES, BatchLabels, CLConfig, LossWeights, loss_breakdown
from .numerics import Tensor, finite_diff_errors
from .queues import QueueEntry, QueueSnapshot


@dataclass
class MicroInstance:
    """A batch's source/view representations plus a filled queue snapshot."""

    space: LabelSpace
    utterances: list[Utterance]
    lengths: tuple[int, ...]
    dim: int
    x: np.ndarray  # flat [h_cls | words | ml_h_cls | ml_words]
    snapshot: QueueSnapshot
    params: object
    labels: BatchLabels

    def unpack(self, x: Tensor) -> tuple[EncodedBatch, EncodedBatch]:
        b, n, d = len(self.lengths), sum(self.lengths), self.dim
        cuts = np.cumsum([b * d, n * d, b * d])
        parts = [x[0:cuts[0]], x[cuts[0]:cuts[1]], x[cuts[1]:cuts[2]], x[cuts[2]:]]
        src = EncodedBatch(parts[0].reshape(b, d), parts[1].reshape(n, d), self.lengths)
        view = EncodedBatch(parts[2].reshape(b, d), parts[3].reshape(n, d), self.lengths)
        return src, view


def micro_space(n_intents: int = 3, n_slots: int = 5) -> LabelSpace:
    return LabelSpace(tuple(f"i{k}" for k in range(n_intents)),
                      ("O", *(f"s{k}" for k in range(1, n_slots))))


def _random_utterance(rng: np.random.Generator, space: LabelSpace, max_len: int) -> Utterance:
    n = int(rng.integers(1, max_len + 1))
    return Utterance(
        tuple(f"w{int(rng.integers(5))}" for _ in range(n)),
        int(rng.integers(space.num_intents)),
        tuple(int(s) for s in rng.integers(space.num_slots, size=n)),
    )


def random_micro_instance(rng: np.random.Generator, dim: int = 4, max_len: int = 3,
                          queue_size: int = 3, batch: int = 2,
                          space: LabelSpace | None = None) -> MicroInstance:
    space = space or micro_space()
    utts = [_random_utterance(rng, space, max_len) for _ in range(batch)]
    lengths = tuple(len(u) for u in utts)
    n = sum(lengths)
    x = rng.uniform(-1.0, 1.0, size=2 * (batch + n) * dim)
    entries = []
    for _ in range(queue_size):
        q = _random_utterance(rng, space, max_len)
        m = len(q)
        entries.append(QueueEntry.from_utterance(
            q, space,
            rng.uniform(-1, 1, dim), rng.uniform(-1, 1, (m, dim)),
            rng.uniform(-1, 1, dim), rng.uniform(-1, 1, (m, dim)),
        ))
    vocab = Vocabulary([f"w{k}" for k in range(5)])
    params = init_params(EncoderConfig(len(vocab), dim, hidden=dim, dropout=0.0), vocab, space, rng)
    return MicroInstance(space, utts, lengths, dim, x, QueueSnapshot(entries), params,
                         BatchLabels.from_utterances(utts, space))


def term_function(inst: MicroInstance, term: str, cl: CLConfig | None = None):
    """Scalar function of the flattened representations returning one loss term
    (or ``"total"``)."""
    cl = cl or CLConfig()
    weights = LossWeights()
    if term != "total":
        weights = weights.without(*(t for t in TERM_NAMES if t != term))

    def f(x: Tensor) -> Tensor:
        src, view = inst.unpack(x)
        out = loss_breakdown(inst.params, src, view, inst.labels, inst.snapshot, weights, cl)
        return out.total if term == "total" else out.terms[term]

    return f


@dataclass(frozen=True)
class GradCheckResult:
    error: float
    trial: int
    coordinate: int


def grad_check(terms=TERM_NAMES, trials: int = 20, seed: int = 0, h: float = 1e-5,
               cl: CLConfig | None = None) -> dict[str, GradCheckResult]:
    """Worst relative finite-difference error per term over ``trials`` instances,
    with the trial and flat coordinate where it occurred."""
    if trials < 1:
        raise ValueError("need at least one trial")
    rng = np.random.default_rng(seed)
    worst = {t: GradCheckResult(0.0, 0, 0) for t in terms}
    for trial in range(trials):
        inst = random_micro_instance(rng)
        for t in terms:
            errors = finite_diff_errors(term_function(inst, t, cl), inst.x, h)
            i = int(errors.argmax())
            if errors[i] > worst[t].error:
                worst[t] = GradCheckResult(float(errors[i]), trial, i)
    return worst
