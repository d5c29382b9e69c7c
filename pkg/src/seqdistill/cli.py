"""Command-line entry point: ``seqdistill <subcommand> [flags]``.

Exit status: 0 on success, 1 on usage errors, 2 on runtime failures.
Configuration precedence is CLI flag > config file > built-in default.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import List, Optional

from .bench import throughput_benchmark
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (ParallelCorpus, ToyCorpus, ToyTaskConfig, Vocabulary, generate_toy_corpus, read_corpus, read_sentences,
                   save_toy_corpus, write_corpus, write_sentences)
from .decoder import DecodeConfig, decode, mode_mass
from .distill import (coerce_fields, generate_seq_inter_corpus, generate_seq_kd_corpus, load_recipe,
                      make_loss, parse_kv_text)
from .experiment import ROWS, ExperimentConfig, load_experiment_config, run_experiment_grid
from .metrics import corpus_bleu, format_corpus_bleu
from .model import ModelConfig, init_params, perplexity
from .pruning import apply_mask, compression_report, compute_prune_mask, retrain_pruned
from .training import TrainConfig, train

log = logging.getLogger("seqdistill")

SUBCOMMANDS = ("gen-data", "train", "distill-data", "translate", "evaluate", "prune", "bench", "experiment")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise UsageError(message)


def _read_kv(path: Optional[str]) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as f:
        return parse_kv_text(f.read(), path)


def _vocab_pair(directory: str):
    return (Vocabulary.load(os.path.join(directory, "vocab.src")),
            Vocabulary.load(os.path.join(directory, "vocab.tgt")))


def _model(path: str):
    params, meta = load_checkpoint(path)
    if "src_vocab" not in meta or "tgt_vocab" not in meta:
        raise ValueError(f"{path}: checkpoint carries no vocabularies")
    return params, meta["src_vocab"], meta["tgt_vocab"]


def _decode_cfg(args) -> DecodeConfig:
    return DecodeConfig(beam=args.beam, max_len=getattr(args, "max_len", None))


# ------------------------------------------------------------ subcommands


def cmd_gen_data(args) -> None:
    values = coerce_fields(ToyTaskConfig, _read_kv(args.config), args.config or "<config>")
    toy = generate_toy_corpus(ToyTaskConfig(**values), args.seed)
    save_toy_corpus(toy, args.out)
    print(f"wrote {len(toy.train)}/{len(toy.dev)}/{len(toy.test)} train/dev/test pairs to {args.out}")


def cmd_train(args) -> None:
    vocab_dir = args.vocab_dir or os.path.dirname(args.train) or "."
    src_vocab, tgt_vocab = _vocab_pair(vocab_dir)
    train_corpus = read_corpus(args.train, src_vocab, tgt_vocab)
    dev_corpus = read_corpus(args.dev, src_vocab, tgt_vocab)
    mvals = _read_kv(args.model_config)
    mcfg = ModelConfig(layers=int(mvals.pop("layers", 2)), hidden=int(mvals.pop("hidden", 16)),
                       src_vocab_size=len(src_vocab), tgt_vocab_size=len(tgt_vocab),
                       dropout_rate=float(mvals.pop("dropout_rate", 0.3)))
    if mvals:
        raise UsageError(f"unknown model config keys: {', '.join(sorted(mvals))}")
    tvals = coerce_fields(TrainConfig, _read_kv(args.train_config), args.train_config or "<config>")
    for key in ("epochs", "batch_size", "learning_rate", "init_range"):
        if getattr(args, key) is not None:
            tvals[key] = getattr(args, key)
    tvals["seed"] = args.seed
    tcfg = TrainConfig(**tvals)
    teacher = None
    if args.teacher:
        teacher, _, _ = _model(args.teacher)
    loss = make_loss(teacher, teacher is not None, args.alpha, args.tau)
    result = train(init_params(mcfg, tcfg.seed, tcfg.init_range), train_corpus, dev_corpus, loss, tcfg)
    save_checkpoint(args.save, result.params, src_vocab, tgt_vocab)
    for h in result.history:
        print(f"epoch\t{h.epoch}\tlr\t{h.learning_rate:.6g}\ttrain_loss\t{h.train_loss:.6f}\tdev_ppl\t{h.dev_ppl:.6f}")
    print(f"best_epoch\t{result.best_epoch}\tbest_dev_ppl\t{result.best_dev_ppl:.6f}")


def cmd_distill_data(args) -> None:
    teacher, src_vocab, tgt_vocab = _model(args.teacher)
    corpus = read_corpus(args.input, src_vocab, tgt_vocab)
    if args.mode == "seq-kd":
        out = generate_seq_kd_corpus(teacher, corpus, args.beam)
    else:
        out = generate_seq_inter_corpus(teacher, corpus, args.beam, args.fraction)
    write_corpus(args.output, out.corpus, src_vocab, tgt_vocab)
    with open(args.output + ".logprob", "w", encoding="utf-8", newline="\n") as f:
        for lp in out.logprobs:
            f.write(("nan" if lp is None else repr(lp)) + "\n")
    if out.fallbacks or out.gold_fallbacks:
        print(f"warning: {out.fallbacks} truncated hypotheses, {out.gold_fallbacks} empty outputs replaced by gold",
              file=sys.stderr)
    print(f"wrote {len(out.corpus)} pairs to {args.output}.src/.tgt")


def cmd_translate(args) -> None:
    params, src_vocab, tgt_vocab = _model(args.model)
    sources = [src_vocab.encode(s) for s in read_sentences(args.input)]
    cfg = _decode_cfg(args)
    hyps = [decode(params, s, cfg) for s in sources]
    write_sentences(args.output, [tgt_vocab.decode(h.stripped()) for h in hyps])
    if args.logprobs:
        with open(args.logprobs, "w", encoding="utf-8", newline="\n") as f:
            for h in hyps:
                f.write(repr(h.logprob) + "\n")


def cmd_evaluate(args) -> None:
    if args.mode == "bleu":
        if not (args.hyp and args.ref):
            raise UsageError("evaluate --mode bleu needs --hyp and --ref")
        hyps = _read_lines_allow_empty(args.hyp)
        refs = read_sentences(args.ref)
        print(format_corpus_bleu(corpus_bleu(hyps, refs)))
        return
    if not args.model:
        raise UsageError(f"evaluate --mode {args.mode} needs --model")
    params, src_vocab, tgt_vocab = _model(args.model)
    if args.mode == "ppl":
        if not args.data:
            raise UsageError("evaluate --mode ppl needs --data PREFIX")
        print(f"ppl\t{perplexity(params, read_corpus(args.data, src_vocab, tgt_vocab)):.6f}")
    else:
        if not args.input:
            raise UsageError("evaluate --mode mode-mass needs --input")
        sources = [src_vocab.encode(s) for s in read_sentences(args.input)]
        print(f"mode_mass\t{mode_mass(params, sources, DecodeConfig(beam=1)):.6f}")


def _read_lines_allow_empty(path: str) -> List[List[str]]:
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n").split() for line in f]


def cmd_prune(args) -> None:
    params, src_vocab, tgt_vocab = _model(args.model)

    def load(prefix):
        return read_corpus(prefix, src_vocab, tgt_vocab)

    kd_train = load(args.seq_kd_corpus)
    kd_dev = load(args.seq_kd_dev) if args.seq_kd_dev else kd_train
    inter_train = load(args.seq_inter_corpus)
    inter_dev = load(args.seq_inter_dev) if args.seq_inter_dev else inter_train
    mask = compute_prune_mask(params, args.fraction)
    total = params.num_params()
    if args.no_retrain:
        pruned = apply_mask(params, mask)
    else:
        pruned = retrain_pruned(params, mask, (kd_train, kd_dev), (inter_train, inter_dev), (args.lr1, args.lr2),
                                max_epochs=(args.epochs, args.epochs), batch_size=args.batch_size,
                                seed=args.seed).params
    if args.save:
        save_checkpoint(args.save, pruned, src_vocab, tgt_vocab)
    teacher_count = args.teacher_params
    if args.teacher:
        teacher_count = _model(args.teacher)[0].num_params()
    teacher_count = teacher_count or total
    unpruned = compression_report(total, total, teacher_count)
    rep = compression_report(total, mask.retained, teacher_count)
    bleu = None
    if args.test:
        test = load(args.test)
        cfg = DecodeConfig(beam=args.beam)
        bleu = corpus_bleu([decode(pruned, s, cfg).stripped() for s in test.src], test.tgt).score
    print("model\tprune\tparams\tbleu\tratio")
    print(unpruned.row("student", 0.0))
    print(rep.row("student", 100 * args.fraction, bleu))
    print(f"retained\t{rep.retained}\nratio\t{rep.ratio}\nthreshold\t{mask.threshold!r}")


def cmd_bench(args) -> None:
    params, src_vocab, tgt_vocab = _model(args.model)
    sources = [src_vocab.encode(s) for s in read_sentences(args.input)]
    corpus = ParallelCorpus(sources, [[1]] * len(sources))
    print("beam\twords\tseconds\twords_per_second\tdevice")
    for k in args.beam:
        r = throughput_benchmark(params, corpus, k, args.reps)
        print(f"{r.beam}\t{r.total_source_words}\t{r.wall_seconds:.4f}\t{r.words_per_second:.1f}\t{r.device}")


def cmd_experiment(args) -> None:
    overrides = {"seed": args.seed}
    if args.recipe:
        recipe = load_recipe(args.recipe)
        rows = [name for name, (_, kd, inter, wkd) in ROWS.items()
                if (kd, inter, wkd) == (recipe.use_seq_kd, recipe.use_seq_inter, recipe.use_word_kd)]
        overrides.update(rows=rows[0], alpha=recipe.alpha, tau=recipe.tau, seq_kd_beam=recipe.seq_kd_beam,
                         seq_inter_beam=recipe.seq_inter_beam, fine_tune_lr=recipe.fine_tune_lr,
                         seq_inter_fraction=recipe.seq_inter_fraction)
    cfg_path = args.config
    if args.grid:
        grid_vals = _read_kv(args.grid)
        base = coerce_fields(ExperimentConfig, _read_kv(cfg_path), cfg_path) if cfg_path else {}
        base.update(coerce_fields(ExperimentConfig, grid_vals, args.grid))
        base.update({k: v for k, v in overrides.items() if v is not None})
        cfg = ExperimentConfig(**base)
    else:
        cfg = load_experiment_config(cfg_path, overrides)
    toy = None
    if args.data:
        src_vocab, tgt_vocab = _vocab_pair(args.data)
        splits = [read_corpus(os.path.join(args.data, n), src_vocab, tgt_vocab) for n in ("train", "dev", "test")]
        toy = ToyCorpus(*splits, src_vocab, tgt_vocab, lexicon=None)
    teacher = _model(args.teacher)[0] if args.teacher else None
    records = run_experiment_grid(cfg, args.out, toy, teacher)
    with open(os.path.join(args.out, "report.txt"), encoding="utf-8") as f:
        sys.stdout.write(f.read())
    log.info("%d rows written to %s", len(records), args.out)


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="seqdistill", description="Sequence-level knowledge distillation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate the synthetic translation task")
    g.add_argument("--config", help="key = value toy task config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model (NLL, or Word-KD with --teacher)")
    t.add_argument("--train", required=True, help="corpus prefix (PREFIX.src / PREFIX.tgt)")
    t.add_argument("--dev", required=True, help="dev corpus prefix")
    t.add_argument("--vocab-dir", help="directory with vocab.src/vocab.tgt (default: next to --train)")
    t.add_argument("--model-config", help="key = value file: layers, hidden, dropout_rate")
    t.add_argument("--train-config", help="key = value file with TrainConfig fields")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--init-range", type=float)
    t.add_argument("--teacher", help="teacher checkpoint; enables the Word-KD loss")
    t.add_argument("--alpha", type=float, default=0.5)
    t.add_argument("--tau", type=float, default=1.0)
    t.add_argument("--save", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("distill-data", help="generate Seq-KD or Seq-Inter training data")
    d.add_argument("--mode", choices=("seq-kd", "seq-inter"), required=True)
    d.add_argument("--teacher", required=True)
    d.add_argument("--input", required=True, help="gold corpus prefix")
    d.add_argument("--output", required=True, help="output corpus prefix")
    d.add_argument("--beam", type=int, default=None)
    d.add_argument("--fraction", type=float, default=1.0)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_distill_data)

    tr = sub.add_parser("translate", help="decode a source file")
    tr.add_argument("--model", required=True)
    tr.add_argument("--input", required=True)
    tr.add_argument("--output", required=True)
    tr.add_argument("--beam", type=int, default=5)
    tr.add_argument("--max-len", type=int)
    tr.add_argument("--logprobs", help="optional sidecar file of hypothesis log-probabilities")
    tr.add_argument("--seed", type=int, default=0)
    tr.set_defaults(func=cmd_translate)

    e = sub.add_parser("evaluate", help="BLEU, perplexity or mode mass")
    e.add_argument("--mode", choices=("bleu", "ppl", "mode-mass"), required=True)
    e.add_argument("--hyp")
    e.add_argument("--ref")
    e.add_argument("--model")
    e.add_argument("--data", help="corpus prefix for --mode ppl")
    e.add_argument("--input", help="source file for --mode mode-mass")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_evaluate)

    pr = sub.add_parser("prune", help="magnitude pruning with masked retraining")
    pr.add_argument("--model", required=True)
    pr.add_argument("--fraction", type=float, required=True)
    pr.add_argument("--seq-kd-corpus", required=True)
    pr.add_argument("--seq-inter-corpus", required=True)
    pr.add_argument("--seq-kd-dev")
    pr.add_argument("--seq-inter-dev")
    pr.add_argument("--lr1", type=float, default=0.2)
    pr.add_argument("--lr2", type=float, default=0.1)
    pr.add_argument("--epochs", type=int, default=10, help="max epochs per retraining phase")
    pr.add_argument("--batch-size", type=int, default=64)
    pr.add_argument("--no-retrain", action="store_true")
    pr.add_argument("--teacher", help="teacher checkpoint (for the compression ratio)")
    pr.add_argument("--teacher-params", type=int, help="teacher parameter count (for the compression ratio)")
    pr.add_argument("--test", help="test corpus prefix; adds BLEU to the report")
    pr.add_argument("--beam", type=int, default=5)
    pr.add_argument("--save")
    pr.add_argument("--seed", type=int, default=0)
    pr.set_defaults(func=cmd_prune)

    b = sub.add_parser("bench", help="decode throughput (source words per second)")
    b.add_argument("--model", required=True)
    b.add_argument("--input", required=True)
    b.add_argument("--beam", type=int, nargs="+", default=[1, 5])
    b.add_argument("--reps", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)

    x = sub.add_parser("experiment", help="train and evaluate results-table rows")
    x.add_argument("--config", help="key = value ExperimentConfig file")
    group = x.add_mutually_exclusive_group()
    group.add_argument("--grid", help="key = value file (typically 'rows = ...' plus overrides)")
    group.add_argument("--recipe", help="single DistillRecipe file")
    x.add_argument("--teacher", help="use this teacher checkpoint instead of training one")
    x.add_argument("--data", help="directory from gen-data instead of generating")
    x.add_argument("--out", required=True)
    x.add_argument("--seed", type=int)
    x.set_defaults(func=cmd_experiment)
    return p


def run_cli(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"choose a subcommand: {', '.join(SUBCOMMANDS)}\n")
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "distill-data" and args.beam is None:
        args.beam = 5 if args.mode == "seq-kd" else 35
    try:
        args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"seqdistill {args.command}: {exc}\n")
        return 1
    except Exception as exc:  # runtime failure
        log.debug("failure", exc_info=True)
        sys.stderr.write(f"seqdistill {args.command}: error: {exc}\n")
        return 2
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
