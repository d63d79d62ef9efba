"""Small trainable utterance encoder with softmax intent and slot decoders.

One token per word.  Word vectors mix each embedding with its neighbours and
the sentence mean through a tanh layer; the sentence vector is a pooled
summary of the word vectors passed through a two-layer tanh MLP.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Lexicon, Utterance
from .labels import LabelSpace
from .numerics import Tensor, constant, log_softmax, log_sum_exp

CHECKPOINT_FORMAT = "xlslu-checkpoint"
CHECKPOINT_VERSION = 1
UNK = "<unk>"


class Vocabulary:
    def __init__(self, words: Iterable[str]):
        self.words = [UNK] + sorted(set(words) - {UNK})
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def ids(self, words: Sequence[str]) -> list[int]:
        return [self.index.get(w, 0) for w in words]

    @classmethod
    def build(cls, utterances: Iterable[Utterance], lexicon: Lexicon | None = None) -> "Vocabulary":
        words = {w for u in utterances for w in u.words}
        if lexicon is not None:
            words |= lexicon.words()
        return cls(words)


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    dim: int = 16
    pooling: str = "mean"
    hidden: int = 16
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("embedding dim must be at least 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.pooling not in ("mean", "attention"):
            raise ValueError(f"unknown pooling mode {self.pooling!r}")
        if self.vocab_size < 1 or self.hidden < 1:
            raise ValueError("vocab size and hidden width must be positive")


PARAM_ORDER = (
    "embedding", "w_self", "w_prev", "w_next", "w_ctx", "b_word",
    "attention", "w_pool1", "b_pool1", "w_pool2", "b_pool2",
    "w_intent", "b_intent", "w_slot", "b_slot",
)


@dataclass
class EncoderParams:
    config: EncoderConfig
    labels: LabelSpace
    vocab: Vocabulary
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def leaves(self) -> list[Tensor]:
        return [self.tensors[k] for k in PARAM_ORDER]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: self.tensors[k].data for k in PARAM_ORDER}

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.config, self.labels, self.vocab,
            {k: Tensor(v.data, requires_grad=True) for k, v in self.tensors.items()},
        )

    def replace_arrays(self, arrays: dict[str, np.ndarray]) -> "EncoderParams":
        return EncoderParams(
            self.config, self.labels, self.vocab,
            {k: Tensor(arrays[k], requires_grad=True) for k in PARAM_ORDER},
        )


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(
    config: EncoderConfig, vocab: Vocabulary, labels: LabelSpace,
    rng: np.random.Generator | None = None,
) -> EncoderParams:
    if len(vocab) != config.vocab_size:
        raise ValueError(f"vocabulary has {len(vocab)} words, config says {config.vocab_size}")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    d, h = config.dim, config.hidden
    arrays = {
        "embedding": rng.normal(0.0, 0.5, size=(config.vocab_size, d)),
        "w_self": _xavier(rng, d, d),
        "w_prev": _xavier(rng, d, d) * 0.5,
        "w_next": _xavier(rng, d, d) * 0.5,
        "w_ctx": _xavier(rng, d, d) * 0.5,
        "b_word": np.zeros(d),
        "attention": rng.normal(0.0, 0.1, size=d),
        "w_pool1": _xavier(rng, d, h),
        "b_pool1": np.zeros(h),
        "w_pool2": _xavier(rng, h, d),
        "b_pool2": np.zeros(d),
        "w_intent": _xavier(rng, d, labels.num_intents),
        "b_intent": np.zeros(labels.num_intents),
        "w_slot": _xavier(rng, d, labels.num_slots),
        "b_slot": np.zeros(labels.num_slots),
    }
    return EncoderParams(
        config, labels, vocab, {k: Tensor(arrays[k], requires_grad=True) for k in PARAM_ORDER}
    )


@dataclass
class EncodedUtterance:
    h_cls: Tensor
    words: Tensor  # [n, d]

    @property
    def word_list(self) -> list[Tensor]:
        return [self.words[i] for i in range(self.words.shape[0])]

    def __len__(self) -> int:
        return self.words.shape[0]


@dataclass
class EncodedBatch:
    h_cls: Tensor  # [B, d]
    words: Tensor  # [N, d], utterances concatenated
    lengths: tuple[int, ...]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.lengths)])

    @property
    def segments(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.lengths)), self.lengths)

    def __len__(self) -> int:
        return len(self.lengths)

    def utterance(self, i: int) -> EncodedUtterance:
        start, stop = self.offsets[i], self.offsets[i + 1]
        return EncodedUtterance(self.h_cls[i], self.words[start:stop])

    def detached(self) -> "EncodedBatch":
        return EncodedBatch(self.h_cls.detach(), self.words.detach(), self.lengths)


class _Layout:
    """Index bookkeeping for a batch of variable-length utterances."""

    def __init__(self, lengths: Sequence[int]):
        self.lengths = tuple(int(n) for n in lengths)
        n_total = sum(self.lengths)
        self.offsets = np.concatenate([[0], np.cumsum(self.lengths)]).astype(int)
        self.segments = np.repeat(np.arange(len(self.lengths)), self.lengths)
        pos = np.arange(n_total) - self.offsets[self.segments]
        n_of = np.asarray(self.lengths)[self.segments]
        self.has_prev = (pos > 0).astype(float)[:, None]
        self.has_next = (pos < n_of - 1).astype(float)[:, None]
        idx = np.arange(n_total)
        self.prev_idx = np.where(pos > 0, idx - 1, idx)
        self.next_idx = np.where(pos < n_of - 1, idx + 1, idx)
        self.average = np.zeros((len(self.lengths), n_total))
        self.average[self.segments, idx] = 1.0 / n_of
        self.mask = np.full((len(self.lengths), n_total), -1e9)
        self.mask[self.segments, idx] = 0.0


def pool_words(words: Tensor, mode: str = "mean", attention: Tensor | None = None,
               layout: _Layout | None = None) -> Tensor:
    """Pool word vectors ``[N, d]`` into one vector per utterance ``[B, d]``."""
    if layout is None:
        layout = _Layout([words.shape[0]])
    if mode == "mean":
        return constant(layout.average) @ words
    if mode == "attention":
        scores = (words @ attention).reshape(1, -1) + constant(layout.mask)
        weights = (scores - log_sum_exp(scores, axis=1, keepdims=True)).exp()
        return weights @ words
    raise ValueError(f"unknown pooling mode {mode!r}")


def encode_batch(
    params: EncoderParams,
    utterances: Sequence[Utterance],
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> EncodedBatch:
    if not utterances:
        raise ValueError("empty batch")
    for u in utterances:
        if len(u.words) == 0:
            raise ValueError("cannot encode an empty utterance")
    cfg = params.config
    layout = _Layout([len(u.words) for u in utterances])
    ids = np.array([i for u in utterances for i in params.vocab.ids(u.words)])
    x = params["embedding"][ids]
    if train_mode and cfg.dropout > 0:
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        keep = (rng.random(x.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
        x = x * constant(keep)
    ctx = (constant(layout.average) @ x)[layout.segments]
    pre = (
        x @ params["w_self"]
        + (x[layout.prev_idx] * constant(layout.has_prev)) @ params["w_prev"]
        + (x[layout.next_idx] * constant(layout.has_next)) @ params["w_next"]
        + ctx @ params["w_ctx"]
        + params["b_word"]
    )
    words = pre.tanh()
    pooled = pool_words(words, cfg.pooling, params["attention"], layout)
    hidden = (pooled @ params["w_pool1"] + params["b_pool1"]).tanh()
    h_cls = (hidden @ params["w_pool2"] + params["b_pool2"]).tanh()
    return EncodedBatch(h_cls, words, layout.lengths)


def encode(
    params: EncoderParams, u: Utterance, train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> EncodedUtterance:
    return encode_batch(params, [u], train_mode, rng).utterance(0)


def intent_logits(params: EncoderParams, h_cls: Tensor) -> Tensor:
    return h_cls @ params["w_intent"] + params["b_intent"]


def slot_logits(params: EncoderParams, h_words: Tensor) -> Tensor:
    return h_words @ params["w_slot"] + params["b_slot"]


def intent_probs(params: EncoderParams, h_cls: Tensor) -> Tensor:
    return log_softmax(intent_logits(params, h_cls)).exp()


def slot_probs(params: EncoderParams, h_words: Tensor) -> Tensor:
    return log_softmax(slot_logits(params, h_words)).exp()


# -- checkpoints --------------------------------------------------------

def save_checkpoint(params: EncoderParams, path) -> None:
    """JSON dump: format tag, version, config, vocabulary, labels and every
    tensor as ``{"shape": [...], "data": [row-major floats]}``."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "labels": params.labels.to_json(),
        "vocab": params.vocab.words,
        "tensors": {
            k: {"shape": list(params[k].shape), "data": params[k].data.ravel().tolist()}
            for k in PARAM_ORDER
        },
    }
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_checkpoint(path) -> EncoderParams:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an encoder checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    vocab = Vocabulary([])
    vocab.words = list(doc["vocab"])
    vocab.index = {w: i for i, w in enumerate(vocab.words)}
    tensors = {}
    for k in PARAM_ORDER:
        entry = doc["tensors"][k]
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        tensors[k] = Tensor(arr, requires_grad=True)
    return EncoderParams(
        EncoderConfig(**doc["config"]), LabelSpace.from_json(doc["labels"]), vocab, tensors
    )
