"""Multilingual SLU examples, a seeded synthetic corpus and code-switching."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .labels import LabelSpace


class ConfigError(ValueError):
    pass


class CorpusFormatError(ValueError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class Utterance:
    words: tuple[str, ...]
    intent: int
    slots: tuple[int, ...]
    language: str = "en"

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))
        object.__setattr__(self, "slots", tuple(int(s) for s in self.slots))
        if len(self.words) == 0:
            raise ValueError("utterance has no words")
        if len(self.slots) != len(self.words):
            raise ValueError(
                f"{len(self.words)} words but {len(self.slots)} slot labels"
            )

    def __len__(self) -> int:
        return len(self.words)

    def check(self, space: LabelSpace) -> None:
        if not 0 <= self.intent < space.num_intents:
            raise ValueError(f"intent id {self.intent} out of range")
        for s in self.slots:
            if not 0 <= s < space.num_slots:
                raise ValueError(f"slot id {s} out of range")


@dataclass
class Corpus:
    examples: list[Utterance]
    labels: LabelSpace

    def __post_init__(self):
        for u in self.examples:
            u.check(self.labels)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]


class Lexicon:
    """Word -> language -> list of translations."""

    def __init__(self, entries: dict[str, dict[str, list[str]]] | None = None):
        self.entries: dict[str, dict[str, list[str]]] = {}
        for word, by_lang in (entries or {}).items():
            for lang, options in by_lang.items():
                self.add(word, lang, options)

    def add(self, word: str, lang: str, translations: Iterable[str]) -> None:
        options = list(translations)
        if not options:
            raise ValueError(f"empty translation list for {word!r} -> {lang}")
        self.entries.setdefault(word, {}).setdefault(lang, []).extend(options)

    def languages(self, word: str) -> list[str]:
        return sorted(self.entries.get(word, {}))

    def translations(self, word: str, lang: str) -> list[str]:
        return self.entries.get(word, {}).get(lang, [])

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, Lexicon) and self.entries == other.entries

    def words(self) -> set[str]:
        out = set(self.entries)
        for by_lang in self.entries.values():
            for options in by_lang.values():
                out.update(options)
        return out

    def save(self, path) -> None:
        ordered = {w: {l: self.entries[w][l] for l in sorted(self.entries[w])} for w in sorted(self.entries)}
        Path(path).write_text(json.dumps(ordered, ensure_ascii=False, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Lexicon":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise ValueError("lexicon file must hold a JSON object")
        return cls(raw)


@dataclass(frozen=True)
class CodeSwitchConfig:
    p: float = 0.5
    languages: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "languages", tuple(self.languages))
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"substitution probability {self.p} outside [0, 1]")
        if self.p > 0 and not self.languages:
            raise ConfigError("code-switching needs at least one target language")


def code_switch(
    u: Utterance,
    lexicon: Lexicon,
    cfg: CodeSwitchConfig,
    rng: np.random.Generator | None = None,
) -> Utterance:
    """Multilingual view of ``u``: each word is independently replaced with
    probability ``cfg.p`` by a translation into one of the allowed languages.

    Words with no translation into an allowed language are kept.  Labels and
    length are unchanged.  ``rng`` defaults to a generator seeded from ``cfg``.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    allowed = set(cfg.languages)
    out = []
    for word in u.words:
        draw = rng.random()
        if draw >= cfg.p:
            out.append(word)
            continue
        langs = [l for l in lexicon.languages(word) if l in allowed]
        if not langs:
            out.append(word)
            continue
        lang = langs[rng.integers(len(langs))]
        options = lexicon.translations(word, lang)
        out.append(options[rng.integers(len(options))])
    return Utterance(tuple(out), u.intent, u.slots, u.language)


# -- serialization ------------------------------------------------------

def utterance_to_json(u: Utterance, space: LabelSpace) -> dict:
    return {
        "words": list(u.words),
        "intent": space.intents[u.intent],
        "slots": [space.slots[s] for s in u.slots],
        "lang": u.language,
    }


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for u in corpus.examples:
            f.write(json.dumps(utterance_to_json(u, corpus.labels), ensure_ascii=False) + "\n")


def _read_records(path) -> list[tuple[int, dict]]:
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(path, lineno, f"invalid JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise CorpusFormatError(path, lineno, "record is not a JSON object")
            for key in ("words", "intent", "slots"):
                if key not in obj:
                    raise CorpusFormatError(path, lineno, f"missing field {key!r}")
            if not isinstance(obj["words"], list) or not isinstance(obj["slots"], list):
                raise CorpusFormatError(path, lineno, "words and slots must be lists")
            if len(obj["words"]) == 0:
                raise CorpusFormatError(path, lineno, "empty utterance")
            if len(obj["words"]) != len(obj["slots"]):
                raise CorpusFormatError(
                    path, lineno,
                    f"{len(obj['words'])} words but {len(obj['slots'])} slot labels",
                )
            records.append((lineno, obj))
    return records


def infer_label_space(records: Iterable[dict], o_slot: str = "O") -> LabelSpace:
    records = list(records)
    intents = sorted({r["intent"] for r in records})
    slots = {s for r in records for s in r["slots"]} - {o_slot}
    return LabelSpace(tuple(intents), (o_slot, *sorted(slots)), o_slot)


def load_corpus(path, labels: LabelSpace | None = None) -> Corpus:
    """Read a JSON Lines corpus; label names are resolved against ``labels``
    (inferred from the file when omitted)."""
    records = _read_records(path)
    if labels is None:
        labels = infer_label_space(obj for _, obj in records)
    examples = []
    for lineno, obj in records:
        try:
            u = Utterance(
                tuple(str(w) for w in obj["words"]),
                labels.intent_id(obj["intent"]),
                tuple(labels.slot_id(s) for s in obj["slots"]),
                obj.get("lang", "en"),
            )
        except (KeyError, ValueError) as e:
            raise CorpusFormatError(path, lineno, str(e).strip("'\"")) from None
        examples.append(u)
    return Corpus(examples, labels)


# -- synthetic data -----------------------------------------------------

@dataclass(frozen=True)
class GeneratorSpec:
    """Shape of a synthetic multilingual SLU corpus.

    ``n_slot_types`` counts entity types; each contributes a B- and an I-
    label, so the slot label space has ``2 * n_slot_types + 1`` entries.
    """

    n_intents: int = 4
    n_slot_types: int = 5
    n_templates: int = 12
    n_train: int = 400
    n_dev: int = 100
    n_test: int = 100
    carrier_words_per_intent: int = 5
    values_per_slot: int = 4
    n_function_words: int = 8
    translations_per_word: int = 1
    source_language: str = "en"
    target_languages: tuple[str, ...] = ("de",)

    def check(self) -> None:
        if self.n_intents < 1 or self.n_slot_types < 1:
            raise ConfigError("need at least one intent and one slot type")
        if self.n_templates < self.n_intents:
            raise ConfigError(
                f"{self.n_intents} intents cannot be covered by {self.n_templates} templates"
            )
        if self.n_train < 1:
            raise ConfigError("training corpus size must be positive")
        if self.n_dev < 0 or self.n_test < 0:
            raise ConfigError("dev/test sizes must be non-negative")
        if self.values_per_slot < 2:
            raise ConfigError("need at least two values per slot type")
        if self.carrier_words_per_intent < 2 or self.n_function_words < 1:
            raise ConfigError("need at least two carrier words per intent and one function word")
        if self.translations_per_word < 1:
            raise ConfigError("translations_per_word must be positive")
        if not self.target_languages or self.source_language in self.target_languages:
            raise ConfigError("target languages must be non-empty and exclude the source")


@dataclass
class SyntheticData:
    labels: LabelSpace
    lexicon: Lexicon
    train: Corpus
    dev: dict[str, Corpus]
    test: dict[str, Corpus]
    templates: list[tuple[int, tuple]] = field(default_factory=list)
    template_ids: dict[str, list[int]] = field(default_factory=dict)


_SYLLABLES = {
    0: ("ka", "lo", "mi", "tu", "re", "sa", "no", "vi", "da", "pe", "go", "ri"),
    1: ("zu", "be", "ro", "fa", "ki", "ne", "tal", "sho", "mu", "dri", "wen", "op"),
    2: ("xi", "qua", "ly", "mor", "hep", "ix", "zo", "ter", "bul", "yan", "ce", "ud"),
    3: ("ga", "pli", "non", "ess", "tro", "vak", "du", "sil", "mek", "ho", "ju", "ar"),
}


class _WordFactory:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.used: set[str] = set()

    def make(self, inventory: int) -> str:
        syll = _SYLLABLES[inventory % len(_SYLLABLES)]
        while True:
            n = 2 + int(self.rng.integers(2))
            word = "".join(syll[int(i)] for i in self.rng.integers(len(syll), size=n))
            if inventory >= len(_SYLLABLES):
                word += str(inventory // len(_SYLLABLES))
            if word not in self.used:
                self.used.add(word)
                return word


def _slot_label_names(n_types: int) -> list[str]:
    names = []
    for t in range(n_types):
        names += [f"B-slot{t}", f"I-slot{t}"]
    return names


def generate_synthetic(spec: GeneratorSpec, seed: int) -> SyntheticData:
    """Seeded toy SLU corpus in the source language plus parallel dev/test
    corpora in every language, obtained by word-for-word lexicon translation."""
    spec.check()
    rng = np.random.default_rng([seed, 0x5EED])
    words = _WordFactory(rng)
    src = spec.source_language

    labels = LabelSpace(
        tuple(f"intent{i}" for i in range(spec.n_intents)),
        ("O", *_slot_label_names(spec.n_slot_types)),
    )

    function_words = [words.make(0) for _ in range(spec.n_function_words)]
    carriers = [
        [words.make(0) for _ in range(spec.carrier_words_per_intent)]
        for _ in range(spec.n_intents)
    ]
    # slot values: half single-word, half two-word, so every I- label occurs
    values: list[list[tuple[str, ...]]] = []
    for _ in range(spec.n_slot_types):
        vals = []
        for v in range(spec.values_per_slot):
            n = 2 if v % 2 else 1
            vals.append(tuple(words.make(0) for _ in range(n)))
        values.append(vals)
    markers = [function_words[t % len(function_words)] for t in range(spec.n_slot_types)]

    # template: (intent, tokens) with tokens either a word or ("slot", type)
    templates: list[tuple[int, tuple]] = []
    for j in range(spec.n_templates):
        intent = j % spec.n_intents
        slot_types = [j % spec.n_slot_types]
        if rng.random() < 0.6 and spec.n_slot_types > 1:
            other = int(rng.integers(spec.n_slot_types - 1))
            slot_types.append(other if other < slot_types[0] else other + 1)
        picks = rng.choice(len(carriers[intent]), size=3, replace=len(carriers[intent]) < 3)
        toks: list = [carriers[intent][int(picks[0])]]
        if rng.random() < 0.5:
            toks.insert(0, function_words[int(rng.integers(len(function_words)))])
        toks.append(carriers[intent][int(picks[1])])
        for t in slot_types:
            toks += [markers[t], ("slot", t)]
        if rng.random() < 0.5:
            toks.append(carriers[intent][int(picks[2])])
        templates.append((intent, tuple(toks)))

    def sample(template_id: int) -> Utterance:
        intent, toks = templates[template_id]
        out_words, out_slots = [], []
        for tok in toks:
            if isinstance(tok, tuple):
                t = tok[1]
                value = values[t][int(rng.integers(len(values[t])))]
                for k, w in enumerate(value):
                    out_words.append(w)
                    out_slots.append(labels.slot_id(f"{'B' if k == 0 else 'I'}-slot{t}"))
            else:
                out_words.append(tok)
                out_slots.append(labels.o_index)
        return Utterance(tuple(out_words), intent, tuple(out_slots), src)

    source_vocab = sorted(
        set(function_words)
        | {w for pool in carriers for w in pool}
        | {w for vals in values for v in vals for w in v}
    )
    lexicon = Lexicon()
    for idx, lang in enumerate(spec.target_languages, start=1):
        for w in source_vocab:
            options = [words.make(idx) for _ in range(spec.translations_per_word)]
            lexicon.add(w, lang, options)
            for o in options:
                lexicon.add(o, src, [w])

    def translate(u: Utterance, lang: str) -> Utterance:
        out = []
        for w in u.words:
            options = lexicon.translations(w, lang)
            out.append(options[int(rng.integers(len(options)))])
        return Utterance(tuple(out), u.intent, u.slots, lang)

    template_ids: dict[str, list[int]] = {}

    def draw(n: int, split: str) -> list[Utterance]:
        ids = [int(t) for t in rng.integers(spec.n_templates, size=n)]
        if split == "train":
            # cycle through all templates first so every template is seen
            ids = [i % spec.n_templates if i < 3 * spec.n_templates else t for i, t in enumerate(ids)]
        template_ids[split] = ids
        return [sample(t) for t in ids]

    train = Corpus(draw(spec.n_train, "train"), labels)
    dev: dict[str, Corpus] = {}
    test: dict[str, Corpus] = {}
    for split, size, bucket in (("dev", spec.n_dev, dev), ("test", spec.n_test, test)):
        base = draw(size, split)
        bucket[src] = Corpus(base, labels)
        for lang in spec.target_languages:
            bucket[lang] = Corpus([translate(u, lang) for u in base], labels)

    _check_coverage(train, labels)
    return SyntheticData(labels, lexicon, train, dev, test, templates, template_ids)


def _check_coverage(train: Corpus, labels: LabelSpace, minimum: int = 3) -> None:
    intent_counts = np.zeros(labels.num_intents, dtype=int)
    slot_counts = np.zeros(labels.num_slots, dtype=int)
    for u in train:
        intent_counts[u.intent] += 1
        for s in u.slots:
            slot_counts[s] += 1
    slot_counts[labels.o_index] = minimum
    if intent_counts.min() < minimum or slot_counts.min() < minimum:
        raise ConfigError(
            f"training corpus too small: every intent and non-O slot needs {minimum} occurrences"
        )


def label_counts(corpus: Corpus) -> tuple[np.ndarray, np.ndarray]:
    intents = np.bincount([u.intent for u in corpus], minlength=corpus.labels.num_intents)
    slots = np.bincount(
        [s for u in corpus for s in u.slots], minlength=corpus.labels.num_slots
    )
    return intents, slots


def validate_corpus(corpus: Corpus, lexicon: Lexicon | None = None) -> list[str]:
    """Human-readable list of problems; empty when the corpus is sound."""
    problems = []
    for i, u in enumerate(corpus):
        try:
            u.check(corpus.labels)
        except ValueError as e:
            problems.append(f"example {i}: {e}")
        o = corpus.labels.o_index
        for k, s in enumerate(u.slots):
            name = corpus.labels.slots[s]
            if name.startswith("I-"):
                prev = corpus.labels.slots[u.slots[k - 1]] if k else corpus.labels.o_slot
                if k == 0 or prev[2:] != name[2:] or s == o:
                    problems.append(f"example {i}: {name} at position {k} does not continue a span")
    if lexicon is not None:
        for word, by_lang in lexicon.entries.items():
            for lang, options in by_lang.items():
                if not options:
                    problems.append(f"lexicon: empty translations for {word!r} -> {lang}")
    return problems


def split_by_language(corpus: Corpus) -> dict[str, Corpus]:
    out: dict[str, list[Utterance]] = {}
    for u in corpus:
        out.setdefault(u.language, []).append(u)
    return {k: Corpus(v, corpus.labels) for k, v in sorted(out.items())}


def words_of(utterances: Sequence[Utterance]) -> set[str]:
    return {w for u in utterances for w in u.words}
