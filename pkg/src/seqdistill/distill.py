"""Word-level KD, sequence-level KD and sequence-level interpolation.

Teacher-generated corpora keep the source side exactly as given; only the
targets are replaced. Recipes compose the three regimes the way the
combined rows of the usual results table do: pick base data and base loss,
optionally fine-tune toward interpolation data.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from functools import partial
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import ParallelCorpus, ceil_fraction
from .decoder import (DecodeConfig, Hypothesis, beam_search, decode, greedy_decode, renormalize_kbest,
                      sample_sequence)
from .metrics import corpus_bleu, sentence_bleu
from .model import ModelConfig, ModelParams, init_params, perplexity, word_kd_loss, word_nll_loss
from .training import TrainConfig, TrainResult, fine_tune, train

log = logging.getLogger(__name__)


class RecipeError(ValueError):
    pass


@dataclass
class DistillRecipe:
    use_word_kd: bool = False
    use_seq_kd: bool = False
    use_seq_inter: bool = False
    alpha: float = 0.5
    tau: float = 1.0
    seq_kd_beam: int = 5
    seq_inter_beam: int = 35
    fine_tune_lr: float = 0.1
    seq_inter_fraction: float = 1.0
    # "mode" (top of the beam), "kbest" (renormalised K-best list) or "sample"
    seq_kd_target: str = "mode"
    seq_kd_samples: int = 5

    def __post_init__(self):
        if not (self.use_word_kd or self.use_seq_kd or self.use_seq_inter):
            raise RecipeError("a recipe must enable at least one of word_kd, seq_kd, seq_inter")
        if not 0.0 <= self.alpha <= 1.0:
            raise RecipeError("alpha must lie in [0, 1]")
        if self.tau < 1.0:
            raise RecipeError("tau must be >= 1")
        if self.seq_kd_beam < 1 or self.seq_inter_beam < 1:
            raise RecipeError("beam sizes must be >= 1")
        if not 0.0 < self.seq_inter_fraction <= 1.0:
            raise RecipeError("seq_inter_fraction must lie in (0, 1]")
        if self.seq_kd_target not in ("mode", "kbest", "sample"):
            raise RecipeError(f"unknown seq_kd_target {self.seq_kd_target!r}")


def parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise RecipeError(f"not a boolean: {value!r}")


def parse_kv_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise RecipeError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise RecipeError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def coerce_fields(cls, values: Dict[str, str], source: str = "<config>") -> dict:
    """Convert string values to the dataclass field types; unknown keys are errors."""
    known = {f.name: f for f in fields(cls)}
    out = {}
    for key, value in values.items():
        if key not in known:
            raise RecipeError(f"{source}: unknown key {key!r}")
        default = known[key].default
        if isinstance(default, bool):
            out[key] = parse_bool(value)
        elif isinstance(default, int):
            out[key] = int(value)
        elif isinstance(default, float):
            out[key] = float(value)
        else:
            out[key] = value
    return out


def load_recipe(path: str) -> DistillRecipe:
    with open(path, encoding="utf-8") as f:
        values = parse_kv_text(f.read(), path)
    return DistillRecipe(**coerce_fields(DistillRecipe, values, path))


# ------------------------------------------------------ corpus generation


@dataclass
class GeneratedCorpus:
    corpus: ParallelCorpus
    logprobs: List[Optional[float]]
    fallbacks: int = 0        # best hypothesis was a truncation
    gold_fallbacks: int = 0   # teacher produced an empty sentence; gold target kept
    sims: List[float] = field(default_factory=list)
    mode_sims: List[float] = field(default_factory=list)


def _target_or_gold(hyp: Hypothesis, gold: Sequence[int]):
    toks = hyp.stripped()
    return (toks, hyp.logprob, False) if toks else (list(gold), None, True)


def generate_seq_kd_corpus(teacher: ModelParams, corpus: ParallelCorpus, beam: int = 5,
                           decode_cfg: Optional[DecodeConfig] = None) -> GeneratedCorpus:
    """Replace every target by the teacher's highest-scoring beam hypothesis."""
    cfg = DecodeConfig(beam=beam) if decode_cfg is None else DecodeConfig(beam, decode_cfg.max_len,
                                                                          decode_cfg.length_cap_ratio,
                                                                          decode_cfg.length_cap)
    targets, scores = [], []
    fallbacks = gold = 0
    for src, tgt in zip(corpus.src, corpus.tgt):
        best = beam_search(teacher, src, cfg).best_completed
        if not best.finished:
            fallbacks += 1
        toks, lp, used_gold = _target_or_gold(best, tgt)
        gold += used_gold
        targets.append(toks)
        scores.append(lp)
    if fallbacks or gold:
        log.warning("seq-kd generation: %d truncated, %d empty outputs", fallbacks, gold)
    return GeneratedCorpus(ParallelCorpus([list(s) for s in corpus.src], targets), scores, fallbacks, gold)


def select_seq_inter(kbest, gold: Sequence[int]) -> Hypothesis:
    """The K-best member closest to ``gold`` by smoothed sentence BLEU.

    Ties go to the higher teacher log-probability, then to the
    lexicographically smaller token sequence.
    """
    hyps = list(kbest)
    if not hyps:
        raise ValueError("empty K-best list")
    best, best_key = None, None
    for h in hyps:
        cand = h.stripped()
        sim = sentence_bleu(cand, gold) if cand else 0.0
        key = (sim, h.logprob)
        if best is None or key > best_key or (key == best_key and h.tokens < best.tokens):
            best, best_key = h, key
    return best


def generate_seq_inter_corpus(teacher: ModelParams, corpus: ParallelCorpus, beam: int = 35,
                              fraction: float = 1.0, decode_cfg: Optional[DecodeConfig] = None) -> GeneratedCorpus:
    """Seq-Inter targets for the first ``ceil(fraction * N)`` sentences."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    cfg = DecodeConfig(beam=beam) if decode_cfg is None else DecodeConfig(beam, decode_cfg.max_len,
                                                                          decode_cfg.length_cap_ratio,
                                                                          decode_cfg.length_cap)
    n = ceil_fraction(fraction, len(corpus))
    targets, scores, sims, mode_sims = [], [], [], []
    fallbacks = gold_used = 0
    for src, gold in zip(corpus.src[:n], corpus.tgt[:n]):
        kbest = beam_search(teacher, src, cfg)
        chosen = select_seq_inter(kbest, gold)
        if not chosen.finished:
            fallbacks += 1
        toks, lp, used_gold = _target_or_gold(chosen, gold)
        gold_used += used_gold
        targets.append(toks)
        scores.append(lp)
        sims.append(sentence_bleu(chosen.stripped(), gold) if chosen.stripped() else 0.0)
        top = kbest.best_completed.stripped()
        mode_sims.append(sentence_bleu(top, gold) if top else 0.0)
    return GeneratedCorpus(ParallelCorpus([list(s) for s in corpus.src[:n]], targets), scores, fallbacks,
                           gold_used, sims, mode_sims)


def generate_kbest_corpus(teacher: ModelParams, corpus: ParallelCorpus, beam: int = 5) -> GeneratedCorpus:
    """Every K-best hypothesis as a separate pair, weighted by its renormalised probability."""
    cfg = DecodeConfig(beam=beam)
    src_out, tgt_out, weights, scores = [], [], [], []
    for src, gold in zip(corpus.src, corpus.tgt):
        kbest = beam_search(teacher, src, cfg)
        for h, w in zip(kbest, renormalize_kbest(kbest)):
            toks, lp, _ = _target_or_gold(h, gold)
            src_out.append(list(src))
            tgt_out.append(toks)
            weights.append(float(w))
            scores.append(lp)
    return GeneratedCorpus(ParallelCorpus(src_out, tgt_out, weights), scores)


def generate_sampled_corpus(teacher: ModelParams, corpus: ParallelCorpus, samples: int = 5,
                            seed: int = 0) -> GeneratedCorpus:
    """Monte-Carlo targets: ``samples`` ancestral draws per source, each weighted ``1/samples``."""
    rng = np.random.default_rng(seed)
    src_out, tgt_out, scores = [], [], []
    for src, gold in zip(corpus.src, corpus.tgt):
        for _ in range(samples):
            toks, lp, _ = _target_or_gold(sample_sequence(teacher, src, rng=rng), gold)
            src_out.append(list(src))
            tgt_out.append(toks)
            scores.append(lp)
    return GeneratedCorpus(ParallelCorpus(src_out, tgt_out, [1.0 / samples] * len(src_out)), scores)


# ---------------------------------------------------------------- recipes


class TeacherData:
    """Gold corpora plus lazily generated (and cached) teacher corpora."""

    def __init__(self, teacher: ModelParams, train: ParallelCorpus, dev: ParallelCorpus, test: ParallelCorpus,
                 seed: int = 0):
        self.teacher = teacher
        self.train = train
        self.dev = dev
        self.test = test
        self.seed = seed
        self._cache: Dict[tuple, GeneratedCorpus] = {}

    def seq_kd(self, split: str, beam: int, target: str = "mode", samples: int = 5) -> GeneratedCorpus:
        key = ("seq_kd", split, beam, target, samples)
        if key not in self._cache:
            gold = getattr(self, split)
            if target == "mode":
                out = generate_seq_kd_corpus(self.teacher, gold, beam)
            elif target == "kbest":
                out = generate_kbest_corpus(self.teacher, gold, beam)
            else:
                out = generate_sampled_corpus(self.teacher, gold, samples, self.seed)
            self._cache[key] = out
        return self._cache[key]

    def seq_inter(self, split: str, beam: int, fraction: float) -> GeneratedCorpus:
        key = ("seq_inter", split, beam, fraction)
        if key not in self._cache:
            frac = fraction if split == "train" else 1.0
            self._cache[key] = generate_seq_inter_corpus(self.teacher, getattr(self, split), beam, frac)
        return self._cache[key]

    def put(self, key: tuple, value: GeneratedCorpus) -> None:
        self._cache[key] = value


@dataclass
class StudentReport:
    """The results-table columns for one trained model."""

    bleu_k1: float
    bleu_k5: float
    ppl: float
    mode_mass: float
    params: int

    def as_dict(self) -> dict:
        return {"bleu_k1": self.bleu_k1, "bleu_k5": self.bleu_k5, "ppl": self.ppl,
                "mode_mass": self.mode_mass, "params": self.params}


def evaluate_model(params: ModelParams, test: ParallelCorpus, beam: int = 5) -> StudentReport:
    greedy = [greedy_decode(params, s) for s in test.src]
    beamed = [decode(params, s, DecodeConfig(beam=beam)) for s in test.src]
    return StudentReport(
        bleu_k1=corpus_bleu([h.stripped() for h in greedy], test.tgt).score,
        bleu_k5=corpus_bleu([h.stripped() for h in beamed], test.tgt).score,
        ppl=perplexity(params, test),
        mode_mass=float(np.mean([math.exp(h.logprob) for h in greedy])),
        params=params.num_params(),
    )


@dataclass
class RecipeResult:
    params: ModelParams
    report: StudentReport
    base: TrainResult
    fine_tuned: Optional[TrainResult] = None


def make_loss(teacher: Optional[ModelParams], word_kd: bool, alpha: float = 0.5, tau: float = 1.0):
    """Training loss: the Word-KD mixture when ``word_kd`` else plain NLL."""
    if word_kd:
        return partial(_kd_loss, teacher=teacher, alpha=alpha, tau=tau)
    return word_nll_loss


def recipe_loss(recipe: Optional[DistillRecipe], teacher: ModelParams):
    if recipe is None:
        return word_nll_loss
    return make_loss(teacher, recipe.use_word_kd, recipe.alpha, recipe.tau)


def _kd_loss(params, batch, rng=None, *, teacher, alpha, tau):
    return word_kd_loss(params, teacher, batch, alpha, tau, rng)


def base_key(recipe: Optional[DistillRecipe]) -> tuple:
    """Recipes with equal keys share the same base (pre-fine-tuning) training run."""
    if recipe is None:
        return (False, False)
    kd = (recipe.alpha, recipe.tau) if recipe.use_word_kd else None
    seq = (recipe.seq_kd_beam, recipe.seq_kd_target, recipe.seq_kd_samples) if recipe.use_seq_kd else None
    return (seq, kd)


def train_base(recipe: Optional[DistillRecipe], data: TeacherData, student_cfg: ModelConfig,
               train_cfg: TrainConfig) -> TrainResult:
    """Base phase: Seq-KD data if enabled else gold data; Word-KD loss if enabled else NLL."""
    if recipe is not None and recipe.use_seq_kd:
        base_train = data.seq_kd("train", recipe.seq_kd_beam, recipe.seq_kd_target, recipe.seq_kd_samples).corpus
        base_dev = data.seq_kd("dev", recipe.seq_kd_beam).corpus
    else:
        base_train, base_dev = data.train, data.dev
    init = init_params(student_cfg, train_cfg.seed, train_cfg.init_range)
    return train(init, base_train, base_dev, recipe_loss(recipe, data.teacher), train_cfg)


def run_recipe(recipe: Optional[DistillRecipe], data: TeacherData, student_cfg: ModelConfig,
               train_cfg: TrainConfig, eval_beam: int = 5, fine_tune_epochs: int = 5,
               base: Optional[TrainResult] = None) -> RecipeResult:
    """Train one student under ``recipe`` (``None`` = baseline) and evaluate it on the test split.

    ``base`` may carry an already trained base phase for this recipe (see
    :func:`base_key`); only the Seq-Inter fine-tuning is then run.
    """
    teacher = data.teacher
    if teacher.cfg.tgt_vocab_size != student_cfg.tgt_vocab_size or \
            teacher.cfg.src_vocab_size != student_cfg.src_vocab_size:
        raise RecipeError("teacher and student vocabularies differ")
    if base is None:
        base = train_base(recipe, data, student_cfg, train_cfg)
    params, tuned = base.params, None
    if recipe is not None and recipe.use_seq_inter:
        inter_train = data.seq_inter("train", recipe.seq_inter_beam, recipe.seq_inter_fraction).corpus
        inter_dev = data.seq_inter("dev", recipe.seq_inter_beam, 1.0).corpus
        tuned = fine_tune(params, inter_train, inter_dev, recipe_loss(recipe, teacher), lr=recipe.fine_tune_lr,
                          max_epochs=fine_tune_epochs, batch_size=train_cfg.batch_size,
                          grad_clip_norm=train_cfg.grad_clip_norm, seed=train_cfg.seed)
        params = tuned.params
    return RecipeResult(params, evaluate_model(params, data.test, eval_beam), base, tuned)
