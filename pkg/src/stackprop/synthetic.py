"""Deterministic synthetic grammar for desk-scale experiments.

Generates UD-flavored sentences with a small closed tagset, suffix-bearing
open-class words, genuinely ambiguous "-s" forms (noun plural vs. verb 3sg),
Zipf-distributed stems so held-out data contains unseen forms, and optional
extraposed (non-projective) prepositional phrases. All randomness comes from
the seed.
"""

from __future__ import annotations

import numpy as np

from stackprop.corpus import Sentence, Token

DETS = ["the", "a", "this", "that", "each", "some"]
PRONS = ["i", "you", "he", "she", "they", "we"]
ADPS = ["in", "on", "at", "with", "under", "near", "of"]
PUNCTS = [".", "!", "?"]

_SYLLABLES = [
    "ba", "do", "ki", "lu", "mer", "pon", "sa", "ti", "vor", "zen",
    "gra", "fel", "nim", "rus", "tol", "wid", "hov", "pel", "dar", "mok",
]


def _stems(count: int) -> list[str]:
    out = []
    i = 0
    while len(out) < count:
        a = _SYLLABLES[i % len(_SYLLABLES)]
        b = _SYLLABLES[(i // len(_SYLLABLES)) % len(_SYLLABLES)]
        suffix = "" if i < len(_SYLLABLES) ** 2 else str(i)
        out.append(a + b + suffix)
        i += 1
    return out


class Grammar:
    """Lexicon plus generation probabilities.

    ``zipf`` sets the stem frequency decay: ~1.1 gives a natural long tail
    (held-out data will contain unseen forms); values near 0 spread usage
    almost uniformly, which realizes large vocabularies quickly.
    """

    def __init__(self, lexicon_size: int = 120, p_nonproj: float = 0.0, zipf: float = 1.1):
        self.p_nonproj = p_nonproj
        stems = _stems(max(lexicon_size, 10))
        n = len(stems)
        # 50% noun-only, 30% verb-only, 20% ambiguous
        self.noun_stems = stems[: n // 2] + stems[int(n * 0.8) :]
        self.verb_stems = stems[n // 2 : int(n * 0.8)] + stems[int(n * 0.8) :]
        self.adj_stems = [s + "y" for s in stems[: max(n // 6, 4)]]
        self.adv_forms = [s + "ly" for s in stems[: max(n // 8, 3)]]
        self._zipf_noun = self._zipf(len(self.noun_stems), zipf)
        self._zipf_verb = self._zipf(len(self.verb_stems), zipf)

    @staticmethod
    def _zipf(n: int, exponent: float) -> np.ndarray:
        w = 1.0 / np.power(np.arange(1, n + 1), exponent)
        return w / w.sum()

    def noun(self, rng) -> str:
        stem = self.noun_stems[rng.choice(len(self.noun_stems), p=self._zipf_noun)]
        return stem + "s" if rng.random() < 0.3 else stem

    def verb(self, rng) -> str:
        stem = self.verb_stems[rng.choice(len(self.verb_stems), p=self._zipf_verb)]
        r = rng.random()
        if r < 0.4:
            return stem + "ed"
        if r < 0.7:
            return stem + "s"
        return stem


def _np(g: Grammar, rng, allow_pp: bool) -> tuple[list[tuple[str, str]], int, list[tuple[int, int, str]]]:
    """Noun phrase as (words, head offset, arcs); arcs are offset-relative."""
    words: list[tuple[str, str]] = []
    arcs: list[tuple[int, int, str]] = []
    if rng.random() < 0.25:
        words.append((PRONS[rng.integers(len(PRONS))], "PRON"))
        return words, 0, arcs
    det = rng.random() < 0.7
    if det:
        words.append((DETS[rng.integers(len(DETS))], "DET"))
    n_adj = int(rng.choice([0, 1, 2], p=[0.6, 0.3, 0.1]))
    for _ in range(n_adj):
        words.append((g.adj_stems[rng.integers(len(g.adj_stems))], "ADJ"))
    head = len(words)
    words.append((g.noun(rng), "NOUN"))
    for i in range(head):
        arcs.append((head, i, "det" if words[i][1] == "DET" else "amod"))
    if allow_pp and rng.random() < 0.15:
        sub_words, sub_head, sub_arcs, p_pos = _pp(g, rng)
        base = len(words)
        words += sub_words
        arcs += [(base + h, base + d, l) for h, d, l in sub_arcs]
        arcs.append((head, base + sub_head, "nmod"))
    return words, head, arcs


def _pp(g: Grammar, rng) -> tuple[list[tuple[str, str]], int, list[tuple[int, int, str]], int]:
    words = [(ADPS[rng.integers(len(ADPS))], "ADP")]
    np_words, np_head, np_arcs = _np(g, rng, allow_pp=False)
    words += np_words
    arcs = [(1 + h, 1 + d, l) for h, d, l in np_arcs]
    head = 1 + np_head
    arcs.append((head, 0, "case"))
    return words, head, arcs, 0


def generate_sentence(g: Grammar, rng: np.random.Generator, idx: int) -> Sentence:
    words: list[tuple[str, str]] = []
    arcs: list[tuple[int, int, str]] = []  # (head offset, dep offset, label)

    subj_words, subj_head, subj_arcs = _np(g, rng, allow_pp=True)
    words += subj_words
    arcs += subj_arcs
    subj = subj_head

    verb = len(words)
    words.append((g.verb(rng), "VERB"))
    arcs.append((verb, subj, "nsubj"))

    if rng.random() < 0.7:
        obj_words, obj_head, obj_arcs = _np(g, rng, allow_pp=False)
        base = len(words)
        words += obj_words
        arcs += [(base + h, base + d, l) for h, d, l in obj_arcs]
        arcs.append((verb, base + obj_head, "obj"))

    if rng.random() < 0.3:
        pp_words, pp_head, pp_arcs, _ = _pp(g, rng)
        base = len(words)
        words += pp_words
        arcs += [(base + h, base + d, l) for h, d, l in pp_arcs]
        # extraposed PP attaches to the subject noun across the verb
        if rng.random() < g.p_nonproj:
            arcs.append((subj, base + pp_head, "nmod"))
        else:
            arcs.append((verb, base + pp_head, "nmod"))

    if rng.random() < 0.3:
        adv = len(words)
        words.append((g.adv_forms[rng.integers(len(g.adv_forms))], "ADV"))
        arcs.append((verb, adv, "advmod"))

    punct = len(words)
    words.append((PUNCTS[rng.integers(len(PUNCTS))], "PUNCT"))
    arcs.append((verb, punct, "punct"))

    heads = [0] * len(words)
    labels = ["root"] * len(words)
    for h, d, l in arcs:
        heads[d] = h + 1
        labels[d] = l
    tokens = []
    for i, (form, tag) in enumerate(words):
        if i == 0:
            form = form[0].upper() + form[1:]
        tokens.append(
            Token(
                index=i + 1,
                form=form,
                gold_upos=tag,
                gold_head=heads[i],
                gold_deprel=labels[i],
            )
        )
    return Sentence(tokens, id=f"synth-{idx}")


def generate_corpus(
    n_sentences: int,
    seed: int = 0,
    lexicon_size: int = 120,
    p_nonproj: float = 0.0,
    zipf: float = 1.1,
) -> list[Sentence]:
    g = Grammar(lexicon_size=lexicon_size, p_nonproj=p_nonproj, zipf=zipf)
    rng = np.random.default_rng(seed)
    return [generate_sentence(g, rng, i + 1) for i in range(n_sentences)]
