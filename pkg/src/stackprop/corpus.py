"""CoNLL-U ingestion/emission, sentence data model, tree validation, projectivization."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Optional

from stackprop.errors import CorpusError

# CoNLL-U column indices
ID, FORM, LEMMA, UPOS, XPOS, FEATS, HEAD, DEPREL, DEPS, MISC = range(10)

NULL = "<NULL>"
UNKNOWN = "<UNK>"
NULL_ID = 0
UNKNOWN_ID = 1


@dataclass
class Token:
    """One syntactic word. ``index`` is 1-based; head 0 means the artificial root."""

    index: int
    form: str
    gold_upos: str = "_"
    gold_head: int = 0
    gold_deprel: str = "_"
    pred_upos: Optional[str] = None
    pred_head: Optional[int] = None
    pred_deprel: Optional[str] = None
    # opaque CoNLL-U columns carried through round trips
    lemma: str = "_"
    xpos: str = "_"
    feats: str = "_"
    deps: str = "_"
    misc: str = "_"


@dataclass
class Sentence:
    tokens: list[Token]
    id: str = ""

    def __len__(self) -> int:
        return len(self.tokens)

    def gold_heads(self) -> list[int]:
        return [t.gold_head for t in self.tokens]

    def token(self, index: int) -> Token:
        """Token at 1-based position ``index``."""
        return self.tokens[index - 1]


class Vocab:
    """Bidirectional string<->id map with reserved NULL and UNKNOWN ids.

    Ids are dense and assigned in insertion order: NULL=0, UNKNOWN=1, then
    entries from 2 upward. ``class_index`` exposes a 0-based id space over the
    real entries only, used for softmax outputs.
    """

    def __init__(self, entries: Iterable[str] = ()):
        self._strings = [NULL, UNKNOWN]
        self._ids = {NULL: NULL_ID, UNKNOWN: UNKNOWN_ID}
        for s in entries:
            self.add(s)

    def add(self, s: str) -> int:
        i = self._ids.get(s)
        if i is None:
            i = len(self._strings)
            self._ids[s] = i
            self._strings.append(s)
        return i

    def id_of(self, s: str) -> int:
        """Id of ``s``, falling back to UNKNOWN for out-of-vocabulary strings."""
        return self._ids.get(s, UNKNOWN_ID)

    def string_of(self, i: int) -> str:
        return self._strings[i]

    def __contains__(self, s: str) -> bool:
        return s in self._ids

    def __len__(self) -> int:
        return len(self._strings)

    @property
    def size(self) -> int:
        return len(self._strings)

    @property
    def n_classes(self) -> int:
        return len(self._strings) - 2

    def class_index(self, s: str) -> int:
        """0-based index of a real entry (NULL/UNKNOWN are not classes)."""
        i = self._ids[s]
        if i < 2:
            raise KeyError(f"{s!r} is a reserved vocabulary entry, not a class")
        return i - 2

    def class_string(self, k: int) -> str:
        return self._strings[k + 2]

    def entries(self) -> list[str]:
        """Real entries in id order (NULL/UNKNOWN excluded)."""
        return self._strings[2:]

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._strings == other._strings


def parse_conllu(text: str) -> list[Sentence]:
    """Parse CoNLL-U text into validated sentences.

    Multiword-token ranges ("3-4") and empty nodes ("5.1") are skipped;
    comment lines are ignored except that ``# sent_id`` names the sentence.
    Each sentence's gold heads must form a single tree under the artificial
    root.
    """
    sentences: list[Sentence] = []
    tokens: list[Token] = []
    sent_id: Optional[str] = None

    def flush(line_no: int) -> None:
        nonlocal tokens, sent_id
        if not tokens:
            sent_id = None
            return
        sid = sent_id if sent_id is not None else str(len(sentences) + 1)
        sent = Sentence(tokens, id=sid)
        validate_tree(sent)
        sentences.append(sent)
        tokens = []
        sent_id = None

    for line_no, line in enumerate(text.split("\n"), start=1):
        line = line.rstrip("\r")
        if not line.strip():
            flush(line_no)
            continue
        if line.startswith("#"):
            if line[1:].split("=", 1)[0].strip() == "sent_id" and "=" in line:
                sent_id = line.split("=", 1)[1].strip()
            continue
        cols = line.split("\t")
        if len(cols) != 10:
            raise CorpusError(f"line {line_no}: expected 10 columns, got {len(cols)}")
        if "-" in cols[ID] or "." in cols[ID]:
            continue  # multiword-token range or empty node
        try:
            index = int(cols[ID])
            head = int(cols[HEAD])
        except ValueError as e:
            raise CorpusError(f"line {line_no}: bad ID or HEAD field: {e}")
        if index != len(tokens) + 1:
            raise CorpusError(f"line {line_no}: token id {index} out of sequence")
        tokens.append(
            Token(
                index=index,
                form=cols[FORM],
                gold_upos=cols[UPOS],
                gold_head=head,
                gold_deprel=cols[DEPREL],
                lemma=cols[LEMMA],
                xpos=cols[XPOS],
                feats=cols[FEATS],
                deps=cols[DEPS],
                misc=cols[MISC],
            )
        )
    flush(-1)
    return sentences


def validate_tree(sentence: Sentence) -> None:
    """Reject self-loops, out-of-range heads, multiple roots, and cycles."""
    n = len(sentence.tokens)
    sid = sentence.id
    roots = 0
    for t in sentence.tokens:
        if t.gold_head == t.index:
            raise CorpusError(f"sentence {sid}: token {t.index} is its own head")
        if not 0 <= t.gold_head <= n:
            raise CorpusError(f"sentence {sid}: head {t.gold_head} out of range")
        if t.gold_head == 0:
            roots += 1
    if roots == 0:
        raise CorpusError(f"sentence {sid}: no token attached to root")
    if roots > 1:
        raise CorpusError(f"sentence {sid}: multiple root attachments")
    # n nodes, n arcs to {0..n}: a single tree iff every token reaches 0
    heads = sentence.gold_heads()
    for t in sentence.tokens:
        seen = set()
        node = t.index
        while node != 0:
            if node in seen:
                raise CorpusError(f"sentence {sid}: cycle through token {node}")
            seen.add(node)
            node = heads[node - 1]


def emit_conllu(sentences: list[Sentence], use_predicted: bool = False) -> str:
    """Serialize sentences to CoNLL-U; with ``use_predicted``, write predicted
    HEAD/DEPREL (and UPOS when tagged) instead of gold."""
    out = []
    for sent in sentences:
        for t in sent.tokens:
            if use_predicted:
                if t.pred_head is None or t.pred_deprel is None:
                    raise CorpusError(
                        f"sentence {sent.id}: token {t.index} has no prediction"
                    )
                upos = t.pred_upos if t.pred_upos is not None else t.gold_upos
                head, deprel = t.pred_head, t.pred_deprel
            else:
                upos, head, deprel = t.gold_upos, t.gold_head, t.gold_deprel
            out.append(
                "\t".join(
                    [
                        str(t.index),
                        t.form,
                        t.lemma,
                        upos,
                        t.xpos,
                        t.feats,
                        str(head),
                        deprel,
                        t.deps,
                        t.misc,
                    ]
                )
            )
        out.append("")
    return "\n".join(out) + "\n" if out else ""


def is_projective(sentence: Sentence) -> bool:
    """True iff every subtree covers a contiguous interval of the sentence.

    Equivalent, for valid trees, to "no two arcs cross when drawn above the
    sentence", with the root arc included.
    """
    heads = sentence.gold_heads()
    n = len(heads)
    desc: list[set[int]] = [set() for _ in range(n + 1)]
    for d in range(1, n + 1):
        node = d
        while node != 0:
            desc[node].add(d)
            node = heads[node - 1]
    for h in range(1, n + 1):
        s = desc[h]
        if max(s) - min(s) + 1 != len(s):
            return False
    return True


def arcs_cross(h1: int, d1: int, h2: int, d2: int) -> bool:
    """Strict interval-crossing test for two arcs given as (head, dependent)."""
    a, b = min(h1, d1), max(h1, d1)
    c, d = min(h2, d2), max(h2, d2)
    return (a < c < b < d) or (c < a < d < b)


def projectivize(sentence: Sentence) -> Sentence:
    """Lift non-projective arcs until the tree is projective.

    Repeatedly takes the crossing arc with the shortest span and re-attaches
    its dependent to the grandparent. Arcs from the artificial root are never
    lifted (the other arc of the pair is). Identity on projective input;
    forms, tags, and labels are untouched.
    """
    heads = sentence.gold_heads()
    n = len(heads)
    while True:
        crossing = set()
        arcs = [(heads[d - 1], d) for d in range(1, n + 1)]
        for i in range(len(arcs)):
            for j in range(i + 1, len(arcs)):
                if arcs_cross(*arcs[i], *arcs[j]):
                    crossing.add(arcs[i])
                    crossing.add(arcs[j])
        liftable = [(h, d) for (h, d) in crossing if h != 0]
        if not liftable:
            break
        h, d = min(liftable, key=lambda arc: (abs(arc[0] - arc[1]), arc[1]))
        heads[d - 1] = heads[h - 1]
    if heads == sentence.gold_heads():
        return sentence
    tokens = [replace(t, gold_head=heads[t.index - 1]) for t in sentence.tokens]
    return Sentence(tokens, id=sentence.id)


def build_vocabs(sentences: list[Sentence]) -> tuple[Vocab, Vocab, Vocab]:
    """(forms, tags, labels) vocabularies from a training corpus.

    Forms are lowercased. Ids are deterministic given corpus order.
    """
    forms, tags, labels = Vocab(), Vocab(), Vocab()
    for sent in sentences:
        for t in sent.tokens:
            forms.add(t.form.lower())
            tags.add(t.gold_upos)
            labels.add(t.gold_deprel)
    return forms, tags, labels


def root_label_of(sentences: list[Sentence], labels: Vocab) -> tuple[int, bool]:
    """(label id used on root attachments, whether it is root-exclusive).

    The most frequent deprel on head-0 tokens is the dedicated root label;
    exclusivity means it never appears on a non-root arc, which lets decoding
    mask it everywhere else.
    """
    counts: dict[str, int] = {}
    elsewhere: set[str] = set()
    for sent in sentences:
        for t in sent.tokens:
            if t.gold_head == 0:
                counts[t.gold_deprel] = counts.get(t.gold_deprel, 0) + 1
            else:
                elsewhere.add(t.gold_deprel)
    if not counts:
        return labels.id_of("root"), False
    best = max(counts, key=lambda s: (counts[s], s))
    return labels.id_of(best), best not in elsewhere
