"""Results-table grid at toy scale: teacher, baseline student and distilled students."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, fields, replace
from typing import Dict, List, Optional

from .checkpoint import save_checkpoint
from .data import ToyCorpus, ToyTaskConfig, generate_toy_corpus
from .distill import (DistillRecipe, StudentReport, TeacherData, base_key, coerce_fields, evaluate_model,
                      parse_kv_text, run_recipe, train_base)
from .model import ModelConfig, ModelParams, init_params
from .training import TrainConfig, TrainResult, train

log = logging.getLogger(__name__)

ROWS: Dict[str, tuple] = {
    # name: (label, use_seq_kd, use_seq_inter, use_word_kd)
    "baseline": ("Baseline", False, False, False),
    "word_kd": ("Word-KD", False, False, True),
    "seq_kd": ("Seq-KD", True, False, False),
    "baseline+seq_inter": ("Baseline + Seq-Inter", False, True, False),
    "word_kd+seq_inter": ("Word-KD + Seq-Inter", False, True, True),
    "seq_kd+seq_inter": ("Seq-KD + Seq-Inter", True, True, False),
    "seq_kd+word_kd": ("Seq-KD + Word-KD", True, False, True),
    "seq_kd+seq_inter+word_kd": ("Seq-KD + Seq-Inter + Word-KD", True, True, True),
}


@dataclass
class ExperimentConfig:
    # toy task
    vocab_size: int = 120
    min_length: int = 5
    max_length: int = 15
    lexicon_seed: int = 1234
    chunk_size: int = 3
    synonym_noise_rate: float = 0.1
    synonym_classes: int = 40
    num_sentences: int = 10000
    dev_size: int = 500
    test_size: int = 500
    data_seed: int = 0
    # models
    teacher_layers: int = 2
    teacher_hidden: int = 64
    teacher_dropout: float = 0.0
    teacher_epochs: int = 10
    teacher_init_range: float = 0.3
    teacher_seed: int = 0
    student_layers: int = 2
    student_hidden: int = 16
    student_dropout: float = 0.0
    epochs: int = 20
    # optimisation
    batch_size: int = 32
    learning_rate: float = 1.0
    lr_decay: float = 0.5
    grad_clip_norm: float = 5.0
    init_range: float = 0.7  # students; the teacher uses teacher_init_range
    seed: int = 0
    # distillation
    rows: str = ",".join(ROWS)
    alpha: float = 0.5
    tau: float = 1.0
    seq_kd_beam: int = 5
    seq_inter_beam: int = 35
    fine_tune_lr: float = 0.1
    seq_inter_fraction: float = 1.0
    fine_tune_epochs: int = 5
    eval_beam: int = 5

    def row_names(self) -> List[str]:
        names = [r.strip() for r in self.rows.split(",") if r.strip()]
        for r in names:
            if r not in ROWS:
                raise ValueError(f"unknown grid row {r!r}; choose from {', '.join(ROWS)}")
        return names

    def toy(self) -> ToyTaskConfig:
        keys = {f.name for f in fields(ToyTaskConfig)}
        return ToyTaskConfig(**{k: getattr(self, k) for k in keys})

    def train_config(self, epochs: Optional[int] = None, seed: Optional[int] = None) -> TrainConfig:
        return TrainConfig(epochs=self.epochs if epochs is None else epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, lr_decay=self.lr_decay,
                           grad_clip_norm=self.grad_clip_norm, init_range=self.init_range,
                           seed=self.seed if seed is None else seed)

    def recipe(self, row: str) -> Optional[DistillRecipe]:
        _, seq_kd, seq_inter, word_kd = ROWS[row]
        if not (seq_kd or seq_inter or word_kd):
            return None
        return DistillRecipe(use_word_kd=word_kd, use_seq_kd=seq_kd, use_seq_inter=seq_inter, alpha=self.alpha,
                             tau=self.tau, seq_kd_beam=self.seq_kd_beam, seq_inter_beam=self.seq_inter_beam,
                             fine_tune_lr=self.fine_tune_lr, seq_inter_fraction=self.seq_inter_fraction)


def load_experiment_config(path: Optional[str], overrides: Optional[dict] = None) -> ExperimentConfig:
    values = {}
    if path:
        with open(path, encoding="utf-8") as f:
            values = coerce_fields(ExperimentConfig, parse_kv_text(f.read(), path), path)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig(**values)


def train_teacher(cfg: ExperimentConfig, toy: ToyCorpus) -> TrainResult:
    mcfg = ModelConfig(cfg.teacher_layers, cfg.teacher_hidden, len(toy.src_vocab), len(toy.tgt_vocab),
                       cfg.teacher_dropout)
    tc = replace(cfg.train_config(epochs=cfg.teacher_epochs, seed=cfg.teacher_seed), init_range=cfg.teacher_init_range)
    return train(init_params(mcfg, cfg.teacher_seed, cfg.teacher_init_range), toy.train, toy.dev, cfg=tc)


def student_config(cfg: ExperimentConfig, toy: ToyCorpus) -> ModelConfig:
    return ModelConfig(cfg.student_layers, cfg.student_hidden, len(toy.src_vocab), len(toy.tgt_vocab),
                       cfg.student_dropout)


@dataclass
class GridRow:
    name: str
    label: str
    params: ModelParams
    report: StudentReport


class Grid:
    """Runs rows sharing base trainings (e.g. Baseline and Baseline + Seq-Inter share one base model)."""

    def __init__(self, cfg: ExperimentConfig, data: TeacherData, student_cfg: ModelConfig):
        self.cfg = cfg
        self.data = data
        self.student_cfg = student_cfg
        self._bases: Dict[tuple, TrainResult] = {}

    def run_row(self, name: str) -> GridRow:
        cfg = self.cfg
        recipe = cfg.recipe(name)
        key = base_key(recipe)
        if key not in self._bases:
            self._bases[key] = train_base(recipe, self.data, self.student_cfg, cfg.train_config())
        res = run_recipe(recipe, self.data, self.student_cfg, cfg.train_config(), cfg.eval_beam,
                         cfg.fine_tune_epochs, base=self._bases[key])
        log.info("%s: %s", ROWS[name][0], res.report)
        return GridRow(name, ROWS[name][0], res.params, res.report)


COLUMNS = ("bleu_k1", "delta_k1", "bleu_k5", "delta_k5", "ppl", "mode_mass", "params")


def table_rows(rows: List[GridRow]) -> List[dict]:
    """Results-table records; deltas are derived from the Baseline row when it is present."""
    base = next((r for r in rows if r.name == "baseline"), None)
    out = []
    for r in rows:
        rep = r.report
        out.append({
            "row": r.name, "label": r.label,
            "bleu_k1": rep.bleu_k1,
            "delta_k1": None if base is None else round(rep.bleu_k1, 2) - round(base.report.bleu_k1, 2),
            "bleu_k5": rep.bleu_k5,
            "delta_k5": None if base is None else round(rep.bleu_k5, 2) - round(base.report.bleu_k5, 2),
            "ppl": rep.ppl, "mode_mass": rep.mode_mass, "params": rep.params,
        })
    return out


def _fmt(col: str, v) -> str:
    if v is None:
        return "-"
    if col == "params":
        return str(int(v))
    if col == "mode_mass":
        return f"{100 * v:.1f}%"
    if col.startswith("delta"):
        return f"{v:+.2f}"
    return f"{v:.2f}"


def render_table(records: List[dict], teacher: Optional[StudentReport] = None) -> str:
    header = ["Model", "BLEU_K=1", "Δ_K=1", "BLEU_K=5", "Δ_K=5", "PPL", "p(t=ŷ)", "Params"]
    lines = []
    if teacher is not None:
        lines.append(["Teacher", _fmt("bleu_k1", teacher.bleu_k1), "-", _fmt("bleu_k5", teacher.bleu_k5), "-",
                      _fmt("ppl", teacher.ppl), _fmt("mode_mass", teacher.mode_mass), str(teacher.params)])
    for rec in records:
        lines.append([rec["label"]] + [_fmt(c, rec[c]) for c in COLUMNS])
    widths = [max(len(header[i]), *(len(l[i]) for l in lines)) for i in range(len(header))]
    out = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    out.append("  ".join("-" * w for w in widths))
    out += ["  ".join(c.ljust(w) for c, w in zip(l, widths)) for l in lines]
    return "\n".join(out) + "\n"


def report_tsv(records: List[dict], teacher: Optional[StudentReport] = None) -> str:
    lines = []
    if teacher is not None:
        for k, v in teacher.as_dict().items():
            lines.append(f"teacher.{k}\t{v!r}")
    for rec in records:
        for c in COLUMNS:
            v = rec[c]
            lines.append(f"{rec['row']}.{c}\t{'nan' if v is None else repr(v)}")
    return "\n".join(lines) + "\n"


def run_experiment_grid(cfg: ExperimentConfig, out_dir: str, toy: Optional[ToyCorpus] = None,
                        teacher: Optional[ModelParams] = None) -> List[dict]:
    """Train/evaluate every requested row; writes checkpoints, ``report.tsv`` and ``report.txt``."""
    os.makedirs(out_dir, exist_ok=True)
    toy = toy or generate_toy_corpus(cfg.toy(), cfg.data_seed)
    if teacher is None:
        teacher = train_teacher(cfg, toy).params
        save_checkpoint(os.path.join(out_dir, "teacher.ckpt"), teacher, toy.src_vocab, toy.tgt_vocab)
    teacher_report = evaluate_model(teacher, toy.test, cfg.eval_beam)
    data = TeacherData(teacher, toy.train, toy.dev, toy.test, cfg.seed)
    grid = Grid(cfg, data, student_config(cfg, toy))
    rows = []
    for name in cfg.row_names():
        row = grid.run_row(name)
        save_checkpoint(os.path.join(out_dir, name.replace("+", "_") + ".ckpt"), row.params,
                        toy.src_vocab, toy.tgt_vocab)
        rows.append(row)
    records = table_rows(rows)
    with open(os.path.join(out_dir, "report.tsv"), "w", encoding="utf-8", newline="\n") as f:
        f.write(report_tsv(records, teacher_report))
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8", newline="\n") as f:
        f.write(render_table(records, teacher_report))
    return records
