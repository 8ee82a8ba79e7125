"""Deterministic toy ideogram language with homophones and multi-pronunciation
characters, plus synthetic acoustic features for it."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .labels import Vocabulary

_CONSONANTS = "kstnhmyrwgzdbp"
_VOWELS = "aiueo"

DEFAULT_DUR_RANGE = (2, 4)
# Strong enough that single frames do not identify a syllable outright;
# recognition has to integrate over a syllable's 2-4 frames.
DEFAULT_NOISE_SIGMA = 1.0


class LanguageSpecError(ValueError):
    """Toy-language parameters outside their allowed bounds."""


def _syllable_names(n: int) -> list[str]:
    base = [c + v for c, v in itertools.product(_CONSONANTS, _VOWELS)]
    names = list(base)
    i = 0
    while len(names) < n:
        names.append(f"{base[i % len(base)]}{i}")
        i += 1
    return names[:n]


@dataclass
class ToyLanguage:
    """Characters mapped to one or more syllable-sequence pronunciations.

    Every syllable appears in some pronunciation, at least one pronunciation
    is shared by two characters (a homophone), and at least one character has
    several pronunciations (a polyphone).  Each syllable also owns a fixed
    feature prototype used for synthesis.
    """

    syllables: list[str]
    characters: list[str]
    pronunciations: dict[str, tuple[tuple[str, ...], ...]]
    prototypes: np.ndarray
    seed: int
    d_in: int

    def char_vocab(self) -> Vocabulary:
        return Vocabulary.from_labels(self.characters)

    def syl_vocab(self) -> Vocabulary:
        return Vocabulary.from_labels(self.syllables)

    def homophone_groups(self) -> dict[tuple[str, ...], list[str]]:
        """Pronunciations shared by two or more characters."""
        by_pron: dict[tuple[str, ...], list[str]] = {}
        for char in self.characters:
            for pron in self.pronunciations[char]:
                by_pron.setdefault(pron, []).append(char)
        return {p: chars for p, chars in by_pron.items() if len(chars) >= 2}

    def polyphones(self) -> list[str]:
        return [c for c in self.characters if len(self.pronunciations[c]) >= 2]

    def homophone_characters(self) -> list[str]:
        chars = sorted({c for group in self.homophone_groups().values() for c in group})
        return chars


@dataclass
class Utterance:
    """One synthetic sample: features with character and syllable targets."""

    utt_id: str
    features: np.ndarray
    char_ids: list[int]
    syl_ids: list[int]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Utterance):
            return NotImplemented
        return (
            self.utt_id == other.utt_id
            and self.char_ids == other.char_ids
            and self.syl_ids == other.syl_ids
            and self.features.shape == other.features.shape
            and bool((self.features == other.features).all())
        )


def make_language(
    seed: int,
    n_syllables: int = 20,
    n_characters: int = 60,
    max_pronunciations: int = 3,
    d_in: int = 16,
) -> ToyLanguage:
    """Build a toy language; deterministic in `seed`.

    A homophone pair and a polyphone are injected if random assignment did
    not already produce them, and every syllable is guaranteed to appear.
    """
    if n_syllables < 2:
        raise LanguageSpecError(f"need at least 2 syllables, got {n_syllables}")
    if n_characters <= n_syllables:
        raise LanguageSpecError(
            f"need more characters than syllables, got {n_characters} <= {n_syllables}"
        )
    if max_pronunciations < 2:
        raise LanguageSpecError(
            f"max_pronunciations must be >= 2 so a polyphone can exist, got {max_pronunciations}"
        )
    if d_in < 1:
        raise LanguageSpecError(f"d_in must be >= 1, got {d_in}")

    rng = np.random.default_rng(seed)
    syllables = _syllable_names(n_syllables)
    characters = [f"c{i:02d}" for i in range(n_characters)]

    def draw_pron() -> tuple[str, ...]:
        # Mostly two syllables: single-syllable pronunciations collide far too
        # often for the character inventory to stay distinguishable.
        length = 1 if rng.random() < 0.15 else 2
        return tuple(syllables[int(i)] for i in rng.integers(0, n_syllables, size=length))

    prons: dict[str, list[tuple[str, ...]]] = {}
    for i, char in enumerate(characters):
        count = int(rng.integers(1, max_pronunciations + 1))
        options: list[tuple[str, ...]] = []
        if i < n_syllables:
            # Seed coverage: the first characters each own one bare syllable.
            options.append((syllables[i],))
        while len(options) < count:
            cand = draw_pron()
            if cand not in options:
                options.append(cand)
        prons[char] = options

    all_assigned = {s for opts in prons.values() for p in opts for s in p}
    assert all_assigned.issuperset(syllables)

    flat = [(p, c) for c in characters for p in prons[c]]
    shared = {p for p, group in _group_by_pron(flat).items() if len(group) >= 2}
    if not shared:
        donor, receiver = characters[0], characters[-1]
        pron = prons[donor][0]
        if pron not in prons[receiver]:
            if len(prons[receiver]) >= max_pronunciations:
                prons[receiver] = prons[receiver][: max_pronunciations - 1]
            prons[receiver].append(pron)

    if not any(len(opts) >= 2 for opts in prons.values()):
        target = characters[-2]
        while len(prons[target]) < 2:
            cand = draw_pron()
            if cand not in prons[target]:
                prons[target].append(cand)

    lang = ToyLanguage(
        syllables=syllables,
        characters=characters,
        pronunciations={c: tuple(p) for c, p in prons.items()},
        prototypes=rng.normal(0.0, 1.0, size=(n_syllables, d_in)),
        seed=seed,
        d_in=d_in,
    )
    assert lang.homophone_groups() and lang.polyphones()
    return lang


def _group_by_pron(flat: list[tuple[tuple[str, ...], str]]) -> dict[tuple[str, ...], list[str]]:
    groups: dict[tuple[str, ...], list[str]] = {}
    for pron, char in flat:
        groups.setdefault(pron, []).append(char)
    return groups


def _synthesize(
    lang: ToyLanguage,
    char_seq: Sequence[str],
    rng: np.random.Generator,
    utt_id: str,
    pron_choice: Sequence[tuple[str, ...]] | None = None,
    dur_range: tuple[int, int] = DEFAULT_DUR_RANGE,
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
) -> Utterance:
    char_vocab = lang.char_vocab()
    syl_vocab = lang.syl_vocab()
    syl_index = {s: i for i, s in enumerate(lang.syllables)}
    syllable_seq: list[str] = []
    for pos, char in enumerate(char_seq):
        if pron_choice is not None:
            pron = pron_choice[pos]
        else:
            options = lang.pronunciations[char]
            pron = options[int(rng.integers(0, len(options)))]
        syllable_seq.extend(pron)
    frames = []
    lo, hi = dur_range
    for syl in syllable_seq:
        duration = int(rng.integers(lo, hi + 1))
        proto = lang.prototypes[syl_index[syl]]
        block = np.tile(proto, (duration, 1))
        if noise_sigma > 0.0:
            block = block + rng.normal(0.0, noise_sigma, size=block.shape)
        frames.append(block)
    features = np.concatenate(frames, axis=0)
    return Utterance(
        utt_id=utt_id,
        features=features,
        char_ids=char_vocab.encode(char_seq),
        syl_ids=syl_vocab.encode(syllable_seq),
    )


def synthesize_utterance(
    lang: ToyLanguage,
    char_seq: Sequence[str],
    seed: int,
    dur_range: tuple[int, int] = DEFAULT_DUR_RANGE,
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
) -> Utterance:
    """Sample one pronunciation per character and emit noisy prototype frames.

    Every syllable takes at least two frames, which keeps both target
    sequences alignable under CTC for any utterance this produces.
    """
    if not char_seq:
        raise LanguageSpecError("character sequence must be nonempty")
    if dur_range[0] < 2:
        raise LanguageSpecError("syllables need >= 2 frames to keep targets alignable")
    rng = np.random.default_rng(seed)
    return _synthesize(
        lang, char_seq, rng, utt_id=f"utt-{seed}", dur_range=dur_range, noise_sigma=noise_sigma
    )


def sample_utterances(
    lang: ToyLanguage,
    n: int,
    len_range: tuple[int, int],
    seed: int,
    stream: int,
    prefix: str,
    char_pool: Sequence[str] | None = None,
) -> list[Utterance]:
    """Draw `n` utterances with independent per-utterance RNG streams."""
    lo, hi = len_range
    if not 1 <= lo <= hi:
        raise LanguageSpecError(f"bad length range {len_range}")
    pool = list(char_pool) if char_pool is not None else lang.characters
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, stream, i])
        length = int(rng.integers(lo, hi + 1))
        chars = [pool[int(j)] for j in rng.integers(0, len(pool), size=length)]
        out.append(_synthesize(lang, chars, rng, utt_id=f"{prefix}-{i:04d}"))
    return out


def ambiguous_pair(lang: ToyLanguage, seed: int = 0) -> tuple[Utterance, Utterance]:
    """Two utterances with identical syllable targets but different characters."""
    groups = lang.homophone_groups()
    pron = sorted(groups)[0]
    first, second = sorted(groups[pron])[:2]
    rng_a = np.random.default_rng([seed, 0])
    rng_b = np.random.default_rng([seed, 1])
    a = _synthesize(lang, [first], rng_a, "ambig-a", pron_choice=[pron])
    b = _synthesize(lang, [second], rng_b, "ambig-b", pron_choice=[pron])
    return a, b


def utterance_to_record(utt: Utterance, lang: ToyLanguage) -> dict:
    char_vocab = lang.char_vocab()
    syl_vocab = lang.syl_vocab()
    rows, cols = utt.features.shape
    return {
        "id": utt.utt_id,
        "features": {"shape": [rows, cols], "data": [float(v) for v in utt.features.reshape(-1)]},
        "chars": char_vocab.decode(utt.char_ids),
        "syllables": syl_vocab.decode(utt.syl_ids),
    }


def record_to_utterance(record: dict, char_vocab: Vocabulary, syl_vocab: Vocabulary) -> Utterance:
    shape = tuple(record["features"]["shape"])
    features = np.asarray(record["features"]["data"], dtype=np.float64).reshape(shape)
    return Utterance(
        utt_id=record["id"],
        features=features,
        char_ids=char_vocab.encode(record["chars"]),
        syl_ids=syl_vocab.encode(record["syllables"]),
    )


def write_jsonl(utts: Sequence[Utterance], lang: ToyLanguage, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for utt in utts:
            fh.write(json.dumps(utterance_to_record(utt, lang), separators=(",", ":")) + "\n")


def read_jsonl(path: str | Path, char_vocab: Vocabulary, syl_vocab: Vocabulary) -> list[Utterance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(record_to_utterance(json.loads(line), char_vocab, syl_vocab))
    return out


def generate_dataset(
    lang: ToyLanguage,
    out_dir: str | Path,
    n_train: int,
    n_valid: int,
    len_range: tuple[int, int] = (3, 8),
    seed: int = 0,
    n_homophone_eval: int = 0,
) -> dict[str, Path]:
    """Write train/valid JSONL files and the two vocabulary files.

    Train, valid, and the optional homophone-rich evaluation split use
    disjoint RNG streams, so the files are byte-reproducible per split.
    """
    if n_train < 1 or n_valid < 1:
        raise LanguageSpecError("n_train and n_valid must be >= 1")
    out = Path(out_dir)
    paths = {
        "train": out / "train.jsonl",
        "valid": out / "valid.jsonl",
        "char_vocab": out / "chars.vocab",
        "syl_vocab": out / "syllables.vocab",
    }
    write_jsonl(sample_utterances(lang, n_train, len_range, seed, 0, "train"), lang, paths["train"])
    write_jsonl(sample_utterances(lang, n_valid, len_range, seed, 1, "valid"), lang, paths["valid"])
    lang.char_vocab().save(paths["char_vocab"])
    lang.syl_vocab().save(paths["syl_vocab"])
    if n_homophone_eval > 0:
        pool = lang.homophone_characters()
        utts = sample_utterances(
            lang, n_homophone_eval, len_range, seed, 2, "homo", char_pool=pool
        )
        paths["homophone_eval"] = out / "homophone_eval.jsonl"
        write_jsonl(utts, lang, paths["homophone_eval"])
    return paths
