"""Training loops: interleaved tagging/parsing updates over a stacked model,
the pipeline and joint comparison regimes, and k-fold jackknife tagging.

The interleaving draws a TAGGER or PARSER mini-batch with probability
proportional to the remaining per-objective budget, so a 10/5 epoch schedule
is honored in expectation without phase boundaries. TAGGER updates touch only
the tagger's blocks; PARSER updates backpropagate the parsing loss through
the parser and into the tagger's hidden layer and embeddings while leaving
the tagger's softmax blocks untouched.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace as dc_replace
from typing import Callable, Optional

import numpy as np

from stackprop.corpus import NULL_ID, Sentence, Vocab, build_vocabs, is_projective, projectivize
from stackprop.errors import StackpropError, UnrollError
from stackprop.evaluator import attachment_scores
from stackprop.model import (
    JOINT,
    JOINT_STACKPROP,
    PIPELINE,
    STACKPROP,
    WINDOW,
    ParserNetworkConfig,
    StackedModel,
    build_model,
)
from stackprop.nnkernel import (
    DTYPE,
    OptimizerConfig,
    asgd_step,
    backward_batch,
    backward_from_hidden,
    forward_batch,
    softmax_xent_batch,
)
from stackprop.parser import feature_tokens, label_features, parse_corpus
from stackprop.tagger import (
    GROUP_ORDER,
    TaggerConfig,
    encode_sentence,
    load_pretrained_embeddings,
    tag_sentence,
)
from stackprop.transition import unroll

log = logging.getLogger("stackprop")

TAGGER_SOFTMAX_BLOCKS = ("W2", "b2")


@dataclass
class TrainingSchedule:
    parser_epochs: int = 10
    tagger_epochs: int = 5
    tagger_pretrain_epochs: int = 1
    lambda_weight: float = 1.0
    seed: int = 0
    patience: int = 3

    def __post_init__(self):
        if min(self.parser_epochs, self.tagger_epochs, self.tagger_pretrain_epochs) < 0:
            raise StackpropError("epoch counts must be non-negative")


@dataclass
class TrainSettings:
    schedule: TrainingSchedule = field(default_factory=TrainingSchedule)
    tagger_cfg: TaggerConfig = field(default_factory=TaggerConfig)
    parser_cfg: ParserNetworkConfig = field(default_factory=ParserNetworkConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    swap: bool = False
    embeddings_path: Optional[str] = None
    jackknife_folds: int = 5


@dataclass
class EncodedCorpus:
    """Offline training examples: per-token tagger features and the unrolled
    gold derivations, with template tokens resolved to global token rows."""

    sentences: list[Sentence]
    tag_inputs: dict[str, np.ndarray]
    tag_gold: np.ndarray
    offsets: np.ndarray
    word_ids: np.ndarray
    deriv_tokens: np.ndarray
    deriv_labels: np.ndarray
    deriv_gold: np.ndarray
    skipped: int

    @property
    def n_tag_examples(self) -> int:
        return int(self.tag_gold.shape[0])

    @property
    def n_parse_examples(self) -> int:
        return int(self.deriv_gold.shape[0])


def encode_training_data(sentences: list[Sentence], model: StackedModel) -> EncodedCorpus:
    """Projectivize (unless SWAP handles non-projectivity), unroll every
    sentence once, and stack all features into flat arrays."""
    prepared = []
    for s in sentences:
        if not model.system.swap and not is_projective(s):
            s = projectivize(s)
        prepared.append(s)

    tag_inputs = {name: [] for name in GROUP_ORDER}
    tag_gold: list[int] = []
    word_ids: list[int] = []
    offsets = [0]
    deriv_tokens, deriv_labels, deriv_gold = [], [], []
    skipped = 0
    kept: list[Sentence] = []
    for s in prepared:
        try:
            deriv = unroll(s, model.system, model.labels, model.tags)
        except UnrollError as e:
            skipped += 1
            log.warning("skipping unrollable sentence: %s", e)
            continue
        kept.append(s)
        base = offsets[-1]
        enc = encode_sentence(s, model.tvocabs)
        for name in GROUP_ORDER:
            tag_inputs[name].append(enc[name])
        for t in s.tokens:
            tag_gold.append(model.tags.class_index(t.gold_upos))
            word_ids.append(model.forms.id_of(t.form.lower()))
        offsets.append(base + len(s))
        for c, a in deriv.steps:
            toks = feature_tokens(c)
            glob = np.where(toks >= 0, toks + base - 1, -1)
            deriv_tokens.append(glob)
            deriv_labels.append(label_features(c, toks))
            deriv_gold.append(model.actions.encode(a))
    if not kept:
        raise StackpropError("no trainable sentences after unrolling")
    return EncodedCorpus(
        sentences=kept,
        tag_inputs={k: np.concatenate(v) for k, v in tag_inputs.items()},
        tag_gold=np.array(tag_gold, dtype=np.int64),
        offsets=np.array(offsets, dtype=np.int64),
        word_ids=np.array(word_ids, dtype=np.int64),
        deriv_tokens=np.stack(deriv_tokens),
        deriv_labels=np.stack(deriv_labels),
        deriv_gold=np.array(deriv_gold, dtype=np.int64),
        skipped=skipped,
    )


def tagger_batch_update(
    model: StackedModel,
    data: EncodedCorpus,
    idx: np.ndarray,
    opt: OptimizerConfig,
    lam: float = 1.0,
) -> float:
    """One TAGGER update: tag cross-entropy backpropagated through the whole
    tagger network (softmax included)."""
    inputs = {name: data.tag_inputs[name][idx] for name in GROUP_ORDER}
    cache = forward_batch(model.tagger, inputs)
    _, losses, dlogits = softmax_xent_batch(cache.logits, data.tag_gold[idx])
    dlogits *= lam / len(idx)
    grads, _ = backward_batch(model.tagger, cache, dlogits)
    asgd_step(model.tagger, grads, opt)
    return float(losses.mean())


def parser_batch_update(
    model: StackedModel,
    data: EncodedCorpus,
    idx: np.ndarray,
    opt: OptimizerConfig,
    train_dists: Optional[np.ndarray] = None,
) -> float:
    """One PARSER update.

    Stacked modes: run the tagger forward for every distinct template token
    in the batch, feed the activations (and the learned null row) to the
    parser, and backpropagate the parsing loss into the parser and into the
    tagger's hidden/embedding blocks, skipping the tagger softmax. The
    pipeline variant reads jackknifed tag distributions instead and never
    touches the tagger.
    """
    batch = len(idx)
    toks = data.deriv_tokens[idx]
    gold = data.deriv_gold[idx]
    labels = data.deriv_labels[idx]
    if model.mode == PIPELINE:
        if train_dists is None:
            raise StackpropError("pipeline parser updates need jackknifed tag distributions")
        n_tags = model.tags.n_classes
        dist = np.zeros((batch, toks.shape[1], n_tags), dtype=DTYPE)
        words = np.full(toks.shape, NULL_ID, dtype=np.int64)
        real = toks >= 0
        dist[real] = train_dists[toks[real]]
        words[real] = data.word_ids[toks[real]]
        cache = forward_batch(model.parser, {"tagdist": dist, "pwords": words, "labels": labels})
        _, losses, dlogits = softmax_xent_batch(cache.logits, gold)
        dlogits /= batch
        grads, _ = backward_batch(model.parser, cache, dlogits)
        asgd_step(model.parser, grads, opt)
        return float(losses.mean())

    h_tagger = model.tagger_cfg.hidden
    uniq, inv = np.unique(toks.ravel(), return_inverse=True)
    has_null = uniq.size > 0 and uniq[0] == -1
    real_rows = uniq[uniq >= 0]
    rows = np.empty((uniq.size, h_tagger), dtype=DTYPE)
    tcache = None
    if real_rows.size:
        tcache = forward_batch(
            model.tagger, {name: data.tag_inputs[name][real_rows] for name in GROUP_ORDER}
        )
        rows[1 if has_null else 0 :] = tcache.h1
    if has_null:
        rows[0] = model.parser.params["null_input"]
    dense = rows[inv].reshape(batch, toks.shape[1], h_tagger)
    cache = forward_batch(model.parser, {"implicit": dense, "labels": labels})
    _, losses, dlogits = softmax_xent_batch(cache.logits, gold)
    dlogits /= batch
    grads, dense_grads = backward_batch(model.parser, cache, dlogits)
    dx = dense_grads["implicit"].reshape(-1, h_tagger)
    acc = np.zeros((uniq.size, h_tagger), dtype=DTYPE)
    np.add.at(acc, inv, dx)
    grads["null_input"] = acc[0] if has_null else np.zeros(h_tagger, dtype=DTYPE)
    asgd_step(model.parser, grads, opt)
    if tcache is not None:
        dh1 = acc[1 if has_null else 0 :]
        tgrads, _ = backward_from_hidden(model.tagger, tcache, dh1)
        scope = [b for b in model.tagger.block_names if b not in TAGGER_SOFTMAX_BLOCKS]
        asgd_step(model.tagger, tgrads, opt, scope=scope)
    return float(losses.mean())


class _Stream:
    """Cyclic shuffled index stream; reshuffles at each pass boundary."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = np.empty(0, dtype=np.int64)
        self.pos = 0

    def take(self, b: int) -> np.ndarray:
        parts = []
        need = b
        while need > 0:
            if self.pos >= len(self.order):
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            chunk = self.order[self.pos : self.pos + need]
            self.pos += len(chunk)
            need -= len(chunk)
            parts.append(chunk)
        return np.concatenate(parts) if len(parts) > 1 else parts[0]


def _snapshot_inference(model: StackedModel) -> dict:
    return {
        name: {k: v.copy() for k, v in net.inference_params(True).items()}
        for name, net in (("tagger", model.tagger), ("parser", model.parser))
    }


def _restore_inference(model: StackedModel, snap: dict) -> None:
    for name, net in (("tagger", model.tagger), ("parser", model.parser)):
        for k, v in snap[name].items():
            net.average[k] = v.copy()
            net.avg_count[k] = max(1, net.avg_count[k])


def _dev_scores(model: StackedModel, dev: list[Sentence]) -> tuple[float, float]:
    parsed, _ = parse_corpus(dev, model, threads=1, averaged=True)
    report = attachment_scores(dev, parsed, include_punct=True)
    return report.uas, report.las


def run_interleaved(
    model: StackedModel,
    data: EncodedCorpus,
    dev: Optional[list[Sentence]],
    schedule: TrainingSchedule,
    opt: OptimizerConfig,
    rng: np.random.Generator,
    tag_supervision: bool,
    train_dists: Optional[np.ndarray] = None,
    log_fn: Optional[Callable[[str], None]] = None,
) -> StackedModel:
    """Pretrain the tagger, then interleave TAGGER/PARSER mini-batches with
    probability proportional to the remaining budgets; evaluate dev UAS every
    epoch-equivalent and keep the best averaged parameters."""
    emit = log_fn or (lambda s: log.info("%s", s))
    n_tag = data.n_tag_examples if tag_supervision else 0
    n_par = data.n_parse_examples
    tag_stream = _Stream(max(data.n_tag_examples, 1), rng)
    par_stream = _Stream(max(n_par, 1), rng)

    if tag_supervision:
        for _ in range(schedule.tagger_pretrain_epochs):
            for start in range(0, data.n_tag_examples, opt.batch_size):
                idx = tag_stream.take(min(opt.batch_size, data.n_tag_examples - start))
                tagger_batch_update(model, data, idx, opt, schedule.lambda_weight)

    remaining_t = schedule.tagger_epochs * n_tag
    remaining_p = schedule.parser_epochs * n_par
    epoch_unit = max(n_tag + n_par, 1)
    consumed = 0
    next_eval = epoch_unit
    eq = 0
    best_uas = -1.0
    best_snap = None
    streak = 0
    loss_t, loss_p, nb_t, nb_p = 0.0, 0.0, 0, 0
    while remaining_t + remaining_p > 0:
        if rng.random() < remaining_t / (remaining_t + remaining_p):
            b = min(opt.batch_size, remaining_t)
            loss_t += tagger_batch_update(
                model, data, tag_stream.take(b), opt, schedule.lambda_weight
            )
            nb_t += 1
            remaining_t -= b
        else:
            b = min(opt.batch_size, remaining_p)
            loss_p += parser_batch_update(
                model, data, par_stream.take(b), opt, train_dists
            )
            nb_p += 1
            remaining_p -= b
        consumed += b
        if consumed >= next_eval:
            eq += 1
            next_eval += epoch_unit
            line = (
                f"epoch_eq={eq} consumed={consumed}"
                f" tag_loss={loss_t / max(nb_t, 1):.4f} parse_loss={loss_p / max(nb_p, 1):.4f}"
            )
            loss_t, loss_p, nb_t, nb_p = 0.0, 0.0, 0, 0
            if dev:
                uas, las = _dev_scores(model, dev)
                line += f" dev_uas={uas:.4f} dev_las={las:.4f}"
                emit(line)
                if uas > best_uas:
                    best_uas = uas
                    best_snap = _snapshot_inference(model)
                    streak = 0
                else:
                    streak += 1
                    if streak >= schedule.patience:
                        emit(f"early_stop=1 best_dev_uas={best_uas:.4f}")
                        break
            else:
                emit(line)
    if best_snap is not None:
        _restore_inference(model, best_snap)
    return model


def train_tagger_only(
    model: StackedModel,
    data: EncodedCorpus,
    epochs: int,
    opt: OptimizerConfig,
    rng: np.random.Generator,
    lam: float = 1.0,
) -> None:
    stream = _Stream(data.n_tag_examples, rng)
    budget = epochs * data.n_tag_examples
    while budget > 0:
        b = min(opt.batch_size, budget)
        tagger_batch_update(model, data, stream.take(b), opt, lam)
        budget -= b


def stackprop_train(
    train: list[Sentence],
    dev: Optional[list[Sentence]],
    settings: TrainSettings,
    log_fn: Optional[Callable[[str], None]] = None,
) -> StackedModel:
    return _train_stacked(STACKPROP, train, dev, settings, tag_supervision=True, log_fn=log_fn)


def window_train(
    train: list[Sentence],
    dev: Optional[list[Sentence]],
    settings: TrainSettings,
    log_fn: Optional[Callable[[str], None]] = None,
) -> StackedModel:
    """The no-tags baseline: same architecture, no POS supervision at all."""
    return _train_stacked(WINDOW, train, dev, settings, tag_supervision=False, log_fn=log_fn)


def joint_train(
    train: list[Sentence],
    dev: Optional[list[Sentence]],
    settings: TrainSettings,
    with_stackprop: bool = False,
    log_fn: Optional[Callable[[str], None]] = None,
) -> StackedModel:
    """Tag-augmented SHIFT system; with ``with_stackprop`` the interleaved
    TAGGER updates are kept, so tag supervision is used twice."""
    mode = JOINT_STACKPROP if with_stackprop else JOINT
    return _train_stacked(mode, train, dev, settings, tag_supervision=with_stackprop, log_fn=log_fn)


def _train_stacked(
    mode: str,
    train: list[Sentence],
    dev: Optional[list[Sentence]],
    settings: TrainSettings,
    tag_supervision: bool,
    log_fn: Optional[Callable[[str], None]] = None,
) -> StackedModel:
    schedule = settings.schedule
    rng = np.random.default_rng(schedule.seed)
    model = build_model(
        mode,
        train,
        settings.tagger_cfg,
        settings.parser_cfg,
        swap=settings.swap,
        seed=int(rng.integers(2**31)),
    )
    _maybe_load_embeddings(model, settings)
    data = encode_training_data(train, model)
    if data.skipped:
        log.warning("skipped %d unrollable sentences", data.skipped)
    return run_interleaved(
        model, data, dev, schedule, settings.optimizer, rng, tag_supervision, log_fn=log_fn
    )


def _maybe_load_embeddings(model: StackedModel, settings: TrainSettings) -> None:
    if not settings.embeddings_path:
        return
    loaded, total = load_pretrained_embeddings(
        settings.embeddings_path, model.forms, model.tagger.params["E_words"]
    )
    log.info("pretrained embeddings: initialized %d of %d word rows", loaded, total)
    if model.mode == PIPELINE:
        load_pretrained_embeddings(
            settings.embeddings_path, model.forms, model.parser.params["E_pwords"]
        )


def jackknife_tags(
    sentences: list[Sentence],
    k: int,
    settings: TrainSettings,
    seed: int = 0,
    global_tags: Optional[Vocab] = None,
) -> tuple[list[Sentence], np.ndarray, list[StackedModel]]:
    """Fill pred_upos on a corpus with k-fold jackknifed tags.

    Each contiguous fold is tagged by a tagger trained only on the other
    folds (its own vocabularies included). Returns the annotated corpus, the
    per-token tag distributions mapped into ``global_tags`` class order, and
    the fold models.
    """
    n = len(sentences)
    if k < 2:
        raise StackpropError("jackknifing needs k >= 2 folds")
    if n < k:
        raise StackpropError(f"corpus of {n} sentences cannot be split into {k} folds")
    if global_tags is None:
        _, global_tags, _ = build_vocabs(sentences)
    bounds = [round(i * n / k) for i in range(k + 1)]
    rng = np.random.default_rng(seed)
    annotated: list[Sentence] = list(sentences)
    dists = np.zeros((sum(len(s) for s in sentences), global_tags.n_classes), dtype=DTYPE)
    offsets = np.cumsum([0] + [len(s) for s in sentences])
    fold_models = []
    epochs = settings.schedule.tagger_pretrain_epochs + settings.schedule.tagger_epochs
    for i in range(k):
        lo, hi = bounds[i], bounds[i + 1]
        held_out = sentences[lo:hi]
        rest = sentences[:lo] + sentences[hi:]
        fold_model = build_model(
            STACKPROP,
            rest,
            settings.tagger_cfg,
            settings.parser_cfg,
            swap=settings.swap,
            seed=int(rng.integers(2**31)),
        )
        _maybe_load_embeddings(fold_model, settings)
        data = encode_training_data(rest, fold_model)
        train_tagger_only(fold_model, data, epochs, settings.optimizer, rng)
        fold_models.append(fold_model)
        class_map = np.array(
            [
                global_tags.class_index(t) if t in global_tags else -1
                for t in fold_model.tags.entries()
            ],
            dtype=np.int64,
        )
        known = class_map >= 0
        for j, sent in enumerate(held_out, start=lo):
            pred, acts = tag_sentence(
                sent, fold_model.tagger, fold_model.tvocabs, fold_model.tags,
                averaged=True, want_probs=True,
            )
            row0 = offsets[j]
            dists[row0 : row0 + len(sent)][:, class_map[known]] = acts.probs[:, known]
            annotated[j] = Sentence(
                [dc_replace(t, pred_upos=pred[t.index - 1]) for t in sent.tokens],
                id=sent.id,
            )
    return annotated, dists, fold_models


def pipeline_train(
    train: list[Sentence],
    dev: Optional[list[Sentence]],
    settings: TrainSettings,
    log_fn: Optional[Callable[[str], None]] = None,
) -> StackedModel:
    """The stacking baseline: an independent tagger plus a parser fed by
    predicted tag distributions and word embeddings.

    The parser trains on jackknifed distributions; at decode time the
    distributions come from the final tagger.
    """
    schedule = settings.schedule
    rng = np.random.default_rng(schedule.seed)
    model = build_model(
        PIPELINE,
        train,
        settings.tagger_cfg,
        settings.parser_cfg,
        swap=settings.swap,
        seed=int(rng.integers(2**31)),
    )
    _maybe_load_embeddings(model, settings)
    data = encode_training_data(train, model)
    if data.skipped:
        log.warning("skipped %d unrollable sentences", data.skipped)
    # the encoder may have projectivized/dropped sentences; jackknife the kept ones
    _, dists, _ = jackknife_tags(
        data.sentences, settings.jackknife_folds, settings,
        seed=int(rng.integers(2**31)), global_tags=model.tags,
    )
    epochs = schedule.tagger_pretrain_epochs + schedule.tagger_epochs
    train_tagger_only(model, data, epochs, settings.optimizer, rng)
    return run_interleaved(
        model, data, dev, schedule, settings.optimizer, rng,
        tag_supervision=False, train_dists=dists, log_fn=log_fn,
    )


def train_variant(
    mode: str,
    train: list[Sentence],
    dev: Optional[list[Sentence]],
    settings: TrainSettings,
    log_fn: Optional[Callable[[str], None]] = None,
) -> StackedModel:
    if mode == STACKPROP:
        return stackprop_train(train, dev, settings, log_fn)
    if mode == WINDOW:
        return window_train(train, dev, settings, log_fn)
    if mode == JOINT:
        return joint_train(train, dev, settings, False, log_fn)
    if mode == JOINT_STACKPROP:
        return joint_train(train, dev, settings, True, log_fn)
    if mode == PIPELINE:
        return pipeline_train(train, dev, settings, log_fn)
    raise StackpropError(f"unknown training mode {mode!r}")
