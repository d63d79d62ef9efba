"""Contrastive and cross-entropy objectives over sample-queue snapshots.

Two supervised kernels (sentence level, token level) and three unsupervised
ones cover all twelve contrastive terms; together with the intent and slot
cross-entropies they are combined into one weighted objective.

Every batch-level term is a mean over the utterances of the batch.  Queue
contents always enter as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np

from .corpus import Utterance
from .encoder import EncodedBatch, EncoderParams, intent_logits, slot_logits
from .labels import LabelSpace, joint_label, mu_matrix, one_hot
from .numerics import (
    NonFiniteError, Tensor, as_tensor, constant, cosine_matrix, log_softmax, log_sum_exp,
    logaddexp,
)
from .queues import QueueSnapshot

TERM_NAMES = (
    "L_I", "L_S",
    "L_un_I", "L_un_S", "L_un_GIS",
    "L_slscl_I", "L_slscl_S", "L_slscl_Joint",
    "L_clscl_I", "L_clscl_S", "L_clscl_Joint",
    "L_mlscl_I", "L_mlscl_S", "L_mlscl_Joint",
)
UNSUPERVISED_TERMS = ("L_un_I", "L_un_S", "L_un_GIS")
SUPERVISED_TERMS = TERM_NAMES[5:]


@dataclass(frozen=True)
class CLConfig:
    tau: float = 0.1
    tau_prime: float = 0.1
    include_o_anchors: bool = True
    strict_pairing: bool = False

    def __post_init__(self):
        if self.tau <= 0 or self.tau_prime <= 0:
            raise ValueError("temperatures must be positive")


@dataclass(frozen=True)
class LossWeights:
    lambda_i: float = 1.0
    lambda_s: float = 1.0
    lambda_un_i: float = 0.01
    lambda_un_s: float = 0.005
    lambda_un_gis: float = 0.01
    beta_i: float = 1e-2
    beta_s: float = 1e-4
    beta_j: float = 1e-4
    gamma1: float = 0.1
    gamma2: float = 0.1
    disabled: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "disabled", frozenset(self.disabled))
        for f in fields(self):
            if f.name != "disabled" and getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} is negative")
        unknown = self.disabled - set(TERM_NAMES)
        if unknown:
            raise ValueError(f"unknown loss terms: {sorted(unknown)}")

    def coefficients(self) -> dict[str, float]:
        beta = {"I": self.beta_i, "S": self.beta_s, "Joint": self.beta_j}
        coef = {
            "L_I": self.lambda_i,
            "L_S": self.lambda_s,
            "L_un_I": self.lambda_un_i,
            "L_un_S": self.lambda_un_s,
            "L_un_GIS": self.lambda_un_gis,
        }
        for task, b in beta.items():
            coef[f"L_slscl_{task}"] = b
            coef[f"L_clscl_{task}"] = self.gamma1 * b
            coef[f"L_mlscl_{task}"] = self.gamma2 * b
        return {k: (0.0 if k in self.disabled else coef[k]) for k in TERM_NAMES}

    def without(self, *terms: str) -> "LossWeights":
        return replace(self, disabled=self.disabled | set(terms))


@dataclass
class LossBreakdown:
    terms: dict[str, Tensor]
    total: Tensor

    def __getitem__(self, name: str) -> Tensor:
        return self.terms[name]

    def as_dict(self) -> dict[str, float]:
        out = {k: self.terms[k].item() for k in TERM_NAMES}
        out["total"] = self.total.item()
        return out


def combine(terms: dict[str, Tensor], weights: LossWeights) -> Tensor:
    coef = weights.coefficients()
    total = Tensor(0.0)
    for name in TERM_NAMES:
        if coef[name] != 0.0:
            total = total + terms[name] * coef[name]
    return total


# -- supervised kernels -------------------------------------------------

def _positive_weights(mu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = np.asarray(mu, dtype=np.float64)
    if (mu < 0).any():
        raise ValueError("label similarities must be non-negative")
    total = mu.sum(axis=1, keepdims=True)
    w = np.divide(mu, total, out=np.zeros_like(mu), where=total > 0)
    return w, total[:, 0] > 0


def supervised_rows(anchors: Tensor, candidates, mu: np.ndarray, tau_prime: float):
    """Loss of each anchor row against all candidate rows.

    ``mu[a, k]`` is the label similarity between anchor ``a`` and candidate
    ``k``.  Row ``a`` is ``-sum_k w_ak * log_softmax_k(s(anchor_a, cand_k))``
    with ``w_ak = mu_ak / sum_j mu_aj`` and ``s`` the tempered cosine.
    Returns the row losses and a mask of anchors having a positive.
    """
    anchors = as_tensor(anchors)
    w, has_pos = _positive_weights(mu)
    cand = constant(candidates)
    if cand.shape[0] == 0:
        return constant(np.zeros(anchors.shape[0])), has_pos
    sim = cosine_matrix(anchors, cand, tau_prime)
    logp = sim - log_sum_exp(sim, axis=1, keepdims=True)
    return -(logp * constant(w)).sum(axis=1), has_pos


def scl_sentence(anchor: Tensor, queue_reps: Sequence, weights: Sequence[float], tau_prime: float) -> Tensor:
    """Weighted supervised contrast of one sentence vector against queued ones."""
    if len(queue_reps) != len(weights):
        raise ValueError("one label weight per queue entry is required")
    if len(queue_reps) == 0:
        return Tensor(0.0)
    anchor = as_tensor(anchor)
    rows, _ = supervised_rows(
        anchor.reshape(1, -1),
        np.stack([getattr(q, "data", q) for q in queue_reps]),
        np.asarray(weights, dtype=np.float64).reshape(1, -1),
        tau_prime,
    )
    return rows[0]


def scl_tokens(
    anchor_words: Tensor,
    queue_words: Sequence,
    anchor_labels,
    queue_labels: Sequence,
    tau_prime: float,
    include_o_anchors: bool = True,
    o_index: int | None = None,
    similarity: Callable = mu_matrix,
) -> Tensor:
    """Token-level supervised contrast for one utterance.

    Each anchor word contrasts against every word of every queued sample;
    the result averages over anchor words that have at least one positive
    (and, with ``include_o_anchors=False``, whose label is not ``o_index``).
    """
    anchor_words = as_tensor(anchor_words)
    anchor_labels = np.atleast_2d(np.asarray(anchor_labels, dtype=np.float64))
    if anchor_labels.shape[0] != anchor_words.shape[0]:
        raise ValueError("anchor labels and words differ in length")
    if len(queue_words) != len(queue_labels):
        raise ValueError("queue words and labels differ in length")
    for w, l in zip(queue_words, queue_labels):
        if np.shape(getattr(w, "data", w))[0] != np.shape(l)[0]:
            raise ValueError("queued word and label sequences differ in length")
    if len(queue_words) == 0:
        return Tensor(0.0)
    cands = np.concatenate([getattr(w, "data", w) for w in queue_words])
    cand_labels = np.concatenate([np.atleast_2d(l) for l in queue_labels])
    rows, has_pos = supervised_rows(anchor_words, cands, similarity(anchor_labels, cand_labels), tau_prime)
    valid = has_pos.copy()
    if not include_o_anchors and o_index is not None:
        valid &= anchor_labels.argmax(axis=1) != o_index
    if not valid.any():
        return Tensor(0.0)
    return (rows * constant(valid / valid.sum())).sum()


# -- unsupervised kernels -----------------------------------------------

def _info_nce(pos: Tensor, neg_lse: Tensor) -> Tensor:
    """``-log(e^pos / (e^pos + e^neg_lse))``, elementwise."""
    return logaddexp(pos, neg_lse) - pos


def unsup_intent(h_cls: Tensor, ml_h_cls: Tensor, snapshot: QueueSnapshot, tau: float) -> Tensor:
    """Sentence alignment with the multilingual view; batched over rows."""
    h = as_tensor(h_cls)
    single = h.ndim == 1
    h = h.reshape(1, -1) if single else h
    ml = as_tensor(ml_h_cls).reshape(h.shape)
    if len(snapshot) == 0:
        return Tensor(0.0)
    negs = constant(np.concatenate([snapshot.h_cls, snapshot.ml_h_cls]))
    pos = (h * ml).sum(axis=1) * (1.0 / tau)
    neg = log_sum_exp(h @ negs.T * (1.0 / tau), axis=1)
    return _info_nce(pos, neg).mean()


def _word_negatives(snapshot: QueueSnapshot) -> Tensor:
    return constant(np.concatenate([snapshot.words, snapshot.ml_words]))


def _pair_weights(lengths: Sequence[int], strict: bool) -> np.ndarray:
    """Block weights averaging each utterance's n*n (or n diagonal) word pairs
    and then averaging over utterances."""
    n_total = sum(lengths)
    out = np.zeros((n_total, n_total))
    start = 0
    batch = len(lengths)
    for n in lengths:
        block = slice(start, start + n)
        if strict:
            idx = np.arange(start, start + n)
            out[idx, idx] = 1.0 / (n * batch)
        else:
            out[block, block] = 1.0 / (n * n * batch)
        start += n
    return out


def unsup_slot_batch(words: Tensor, ml_words: Tensor, lengths: Sequence[int],
                     snapshot: QueueSnapshot, tau: float, strict_pairing: bool = False) -> Tensor:
    if len(snapshot) == 0:
        return Tensor(0.0)
    words, ml_words = as_tensor(words), as_tensor(ml_words)
    negs = _word_negatives(snapshot)
    pos = words @ ml_words.T * (1.0 / tau)
    neg = log_sum_exp(words @ negs.T * (1.0 / tau), axis=1, keepdims=True)
    return (_info_nce(pos, neg) * constant(_pair_weights(lengths, strict_pairing))).sum()


def unsup_slot(words: Tensor, ml_words: Tensor, snapshot: QueueSnapshot, tau: float,
               strict_pairing: bool = False) -> Tensor:
    """Token alignment of every (word, view word) pair of one utterance."""
    words = as_tensor(words)
    if as_tensor(ml_words).shape != words.shape:
        raise ValueError("utterance and view differ in length")
    return unsup_slot_batch(words, ml_words, [words.shape[0]], snapshot, tau, strict_pairing)


def unsup_gis_batch(h_cls: Tensor, words: Tensor, ml_words: Tensor, lengths: Sequence[int],
                    snapshot: QueueSnapshot, tau: float) -> Tensor:
    if len(snapshot) == 0:
        return Tensor(0.0)
    h_cls, words, ml_words = as_tensor(h_cls), as_tensor(words), as_tensor(ml_words)
    lengths = np.asarray(lengths)
    seg = np.repeat(np.arange(len(lengths)), lengths)
    negs = _word_negatives(snapshot)
    neg = log_sum_exp(h_cls @ negs.T * (1.0 / tau), axis=1)[seg]
    own = h_cls[seg]
    scale = constant(1.0 / (lengths[seg] * len(lengths)))
    total = Tensor(0.0)
    for w in (words, ml_words):
        pos = (own * w).sum(axis=1) * (1.0 / tau)
        total = total + (_info_nce(pos, neg) * scale).sum()
    return total


def unsup_gis(h_cls: Tensor, words: Tensor, ml_words: Tensor, snapshot: QueueSnapshot, tau: float) -> Tensor:
    """Sentence vector against its own source and view words."""
    words = as_tensor(words)
    return unsup_gis_batch(as_tensor(h_cls).reshape(1, -1), words, ml_words,
                           [words.shape[0]], snapshot, tau)


# -- cross-entropy ------------------------------------------------------

def intent_ce(logits: Tensor, gold: int) -> Tensor:
    """Negative log-likelihood of the gold intent under softmax(``logits``)."""
    logits = as_tensor(logits)
    if not 0 <= gold < logits.shape[-1]:
        raise ValueError(f"gold intent {gold} out of range")
    return -log_softmax(logits.reshape(1, -1))[0, gold]


def slot_ce(logits: Tensor, gold: Sequence[int]) -> Tensor:
    """Slot negative log-likelihood summed over positions."""
    logits = as_tensor(logits)
    gold = np.asarray(gold, dtype=int)
    if logits.shape[0] != len(gold):
        raise ValueError("one gold slot per word is required")
    if ((gold < 0) | (gold >= logits.shape[1])).any():
        raise ValueError("gold slot out of range")
    return -log_softmax(logits)[np.arange(len(gold)), gold].sum()


# -- full objective -----------------------------------------------------

@dataclass
class BatchLabels:
    intents: np.ndarray  # [B] ids
    slots: np.ndarray  # [N] ids
    intent_onehot: np.ndarray  # [B, C_I]
    slot_onehot: np.ndarray  # [N, C_S]
    joint: np.ndarray  # [B, C_I + C_S]
    lengths: tuple[int, ...]
    o_index: int

    @classmethod
    def from_utterances(cls, utterances: Sequence[Utterance], space: LabelSpace) -> "BatchLabels":
        return cls(
            intents=np.array([u.intent for u in utterances]),
            slots=np.array([s for u in utterances for s in u.slots]),
            intent_onehot=np.stack([one_hot(u.intent, space.num_intents) for u in utterances]),
            slot_onehot=np.stack([one_hot(s, space.num_slots) for u in utterances for s in u.slots]),
            joint=np.stack([joint_label(u.intent, u.slots, space) for u in utterances]),
            lengths=tuple(len(u) for u in utterances),
            o_index=space.o_index,
        )


def _sentence_term(anchors: Tensor, candidates: np.ndarray, mu: np.ndarray, tau_prime: float) -> Tensor:
    rows, _ = supervised_rows(anchors, candidates, mu, tau_prime)
    return rows.mean()


def _token_term(anchors: Tensor, candidates: np.ndarray, mu: np.ndarray, labels: BatchLabels,
                cl: CLConfig) -> Tensor:
    rows, valid = supervised_rows(anchors, candidates, mu, cl.tau_prime)
    if not cl.include_o_anchors:
        valid = valid & (labels.slots != labels.o_index)
    seg = np.repeat(np.arange(len(labels.lengths)), labels.lengths)
    per_utt = np.bincount(seg, weights=valid, minlength=len(labels.lengths))
    scale = np.where(valid, 1.0 / np.maximum(per_utt[seg], 1) / len(labels.lengths), 0.0)
    return (rows * constant(scale)).sum()


def _named(name: str, thunk: Callable[[], Tensor]) -> Tensor:
    try:
        return thunk()
    except NonFiniteError as e:
        raise NonFiniteError(f"loss term {name}: {e}") from None


def contrastive_terms(source: EncodedBatch, view: EncodedBatch, labels: BatchLabels,
                      snapshot: QueueSnapshot, cl: CLConfig,
                      skip: frozenset = frozenset()) -> dict[str, Tensor]:
    """The twelve contrastive terms; names in ``skip`` (and every term on an
    empty queue) are exactly zero."""
    zero = Tensor(0.0)
    names = UNSUPERVISED_TERMS + SUPERVISED_TERMS
    if len(snapshot) == 0:
        return {k: zero for k in names}
    tau = cl.tau
    mu_intent = mu_matrix(labels.intent_onehot, snapshot.intents)
    mu_joint = mu_matrix(labels.joint, snapshot.joints)
    mu_slot = mu_matrix(labels.slot_onehot, snapshot.slots)
    thunks = {
        "L_un_I": lambda: unsup_intent(source.h_cls, view.h_cls, snapshot, tau),
        "L_un_S": lambda: unsup_slot_batch(source.words, view.words, labels.lengths, snapshot,
                                           tau, cl.strict_pairing),
        "L_un_GIS": lambda: unsup_gis_batch(source.h_cls, source.words, view.words,
                                            labels.lengths, snapshot, tau),
    }
    # anchor side and candidate queues of each supervised mechanism
    wiring = {
        "slscl": (source, snapshot.h_cls, snapshot.words),
        "clscl": (view, snapshot.h_cls, snapshot.words),
        "mlscl": (view, snapshot.ml_h_cls, snapshot.ml_words),
    }
    for mech, (anchor, sent_q, word_q) in wiring.items():
        thunks[f"L_{mech}_I"] = lambda a=anchor, q=sent_q: _sentence_term(a.h_cls, q, mu_intent, cl.tau_prime)
        thunks[f"L_{mech}_S"] = lambda a=anchor, q=word_q: _token_term(a.words, q, mu_slot, labels, cl)
        thunks[f"L_{mech}_Joint"] = lambda a=anchor, q=sent_q: _sentence_term(a.h_cls, q, mu_joint, cl.tau_prime)
    out = {name: _named(name, thunks[name]) for name in names if name not in skip}
    return {k: out.get(k, zero) for k in names}


def ce_terms(params: EncoderParams, view: EncodedBatch, labels: BatchLabels) -> dict[str, Tensor]:
    """Intent and slot cross-entropy on the multilingual view, batch-averaged."""
    batch = len(labels.lengths)
    lp_i = log_softmax(intent_logits(params, view.h_cls))
    lp_s = log_softmax(slot_logits(params, view.words))
    l_i = -lp_i[np.arange(batch), labels.intents].sum() * (1.0 / batch)
    l_s = -lp_s[np.arange(len(labels.slots)), labels.slots].sum() * (1.0 / batch)
    return {"L_I": l_i, "L_S": l_s}


def loss_breakdown(params: EncoderParams, source: EncodedBatch, view: EncodedBatch,
                   labels: BatchLabels, snapshot: QueueSnapshot,
                   weights: LossWeights, cl: CLConfig) -> LossBreakdown:
    if {"L_I", "L_S"} <= weights.disabled:
        terms = {}
    else:
        terms = _named("L_I/L_S", lambda: ce_terms(params, view, labels))
    terms.update(contrastive_terms(source, view, labels, snapshot, cl, skip=weights.disabled))
    for k in ("L_I", "L_S"):
        if k in weights.disabled:
            terms[k] = Tensor(0.0)
    return LossBreakdown({k: terms[k] for k in TERM_NAMES}, combine(terms, weights))


def total_loss(params: EncoderParams, utterances: Sequence[Utterance], views: Sequence[Utterance],
               snapshot: QueueSnapshot, weights: LossWeights, cl: CLConfig,
               train_mode: bool = False, rng: np.random.Generator | None = None):
    """Encode a batch and its multilingual views and evaluate every term.

    Returns ``(breakdown, source, view)`` so callers can enqueue the
    representations afterwards.
    """
    from .encoder import encode_batch

    source = encode_batch(params, utterances, train_mode, rng)
    view = encode_batch(params, views, train_mode, rng)
    labels = BatchLabels.from_utterances(utterances, params.labels)
    return loss_breakdown(params, source, view, labels, snapshot, weights, cl), source, view


def check_finite(breakdown: LossBreakdown) -> None:
    for name in TERM_NAMES:
        value = breakdown.terms[name].item()
        if not np.isfinite(value):
            raise NonFiniteError(f"loss term {name} is not finite ({value})")
    if not np.isfinite(breakdown.total.item()):
        raise NonFiniteError("total loss is not finite")
