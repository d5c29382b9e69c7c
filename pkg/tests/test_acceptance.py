"""End-to-end acceptance checks.

The toy-scale experiment (criteria 5 to 8) trains a teacher and the full grid once per
module; expect roughly 40 minutes on a single laptop core.
"""

import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from seqdistill import autodiff as ad
from seqdistill.bench import throughput_benchmark
from seqdistill.cli import run_cli
from seqdistill.data import BOS, EOS, generate_toy_corpus, make_batch
from seqdistill.decoder import DecodeConfig, beam_search, decode, greedy_decode, mode_mass
from seqdistill.distill import TeacherData
from seqdistill.experiment import ExperimentConfig, Grid, student_config, train_teacher
from seqdistill.metrics import corpus_bleu, sentence_bleu, smoothed_sentence_bleu
from seqdistill.model import (ModelConfig, decode_step, encode_source, init_params, initial_state,
                              sequence_logprob, word_kd_loss, word_nll_loss)
from seqdistill.pruning import apply_mask, compression_report, compute_prune_mask, retained_after, retrain_pruned

from acceptance_log import record_acceptance
from oracles import corpus_bleu_oracle, enumerate_outcomes, finite_difference_grad, sentence_bleu_oracle

SEEDS = (1, 2, 3)


def check(number, passed, detail):
    record_acceptance(number, bool(passed), detail)
    assert passed, detail


def test_1_gradient_correctness():
    start = time.perf_counter()
    student = init_params(ModelConfig(1, 4, 7, 6, dropout_rate=0.0), 11, 0.5)
    teacher = init_params(ModelConfig(1, 4, 7, 6, dropout_rate=0.0), 12, 0.5)
    batch = make_batch([[4, 5, 6], [6, 4]], [[5, 4], [4, 5, 5]])
    with ad.Tape() as tape:
        loss = word_kd_loss(student, teacher, batch, 0.5, 1.0).mean
    ad.backward(tape, loss)

    def f():
        with ad.no_tape():
            return word_kd_loss(student, teacher, batch, 0.5, 1.0).mean.item()

    worst, worst_name = 0.0, ""
    for name, leaf in student.items():
        num = finite_difference_grad(f, leaf.values)
        err = np.linalg.norm(leaf.grad - num) / max(np.linalg.norm(leaf.grad), np.linalg.norm(num), 1e-12)
        if err > worst:
            worst, worst_name = err, name
    elapsed = time.perf_counter() - start
    check(1, worst < 1e-4 and elapsed < 60,
          f"max rel err {worst:.2e} ({worst_name}), {elapsed:.1f}s")


def test_2_nll_identity():
    rng = np.random.default_rng(2)
    worst = 0.0
    for k in range(100):
        p = init_params(ModelConfig(1 + k % 2, 5, 9, 8, dropout_rate=0.0), k, 0.8)
        src = [int(x) for x in rng.integers(4, 9, size=rng.integers(1, 7))]
        tgt = [int(x) for x in rng.integers(4, 8, size=rng.integers(1, 7))]
        nll = word_nll_loss(p, make_batch([src], [tgt])).per_sentence[0]
        worst = max(worst, abs(-sequence_logprob(p, src, tgt + [EOS]) - nll))
    check(2, worst < 1e-6, f"max |diff| {worst:.2e} over 100 pairs")


def test_3_beam_exactness():
    cfg = DecodeConfig(beam=64, max_len=3)
    exact, mm_err = 0, 0.0
    for seed in range(50):
        p = init_params(ModelConfig(1, 3, 8, 4, dropout_rate=0.0), seed, 2.0)
        src = [4 + seed % 4, 5]
        enc = encode_source(p, src)
        truth = enumerate_outcomes(lambda st, prev: decode_step(p, st, prev, enc), initial_state(enc), 4, EOS, BOS, 3)
        ranked = sorted(truth, key=lambda o: (-o[1], o[0]))
        kb = beam_search(p, src, cfg)
        top5 = [h.tokens for h in kb][:5]
        exact += kb.best.tokens == ranked[0][0] and top5 == [o[0] for o in ranked[:5]]
        g = greedy_decode(p, src, DecodeConfig(beam=1, max_len=3))
        mm_err = max(mm_err, abs(mode_mass(p, [src], DecodeConfig(beam=1, max_len=3))
                                 - math.exp(dict(truth)[g.tokens])))
    check(3, exact == 50 and mm_err < 1e-9, f"{exact}/50 exact, mode-mass err {mm_err:.1e}")


def test_4_bleu_oracle():
    rng = np.random.default_rng(4)
    pairs = []
    for _ in range(100):
        ref = [int(x) for x in rng.integers(0, 5, size=rng.integers(1, 12))]
        hyp = [int(x) for x in rng.integers(0, 5, size=rng.integers(1, 12))]
        pairs.append((hyp, ref))
    sent_err = max(abs(sentence_bleu(h, r) - sentence_bleu_oracle(h, r)) for h, r in pairs)
    hyps, refs = zip(*pairs)
    corp_err = abs(corpus_bleu(hyps, refs).score - corpus_bleu_oracle(hyps, refs))
    ident = smoothed_sentence_bleu(refs[0], refs[0]).score == 1.0 and corpus_bleu(refs, refs).score == 100.0
    check(4, sent_err < 1e-4 and corp_err < 1e-4 and ident,
          f"sentence err {sent_err:.1e}, corpus err {corp_err:.1e}, identities {'exact' if ident else 'off'}")


# ---------------------------------------------------------------- toy-scale experiment


@pytest.fixture(scope="module")
def experiment():
    cfg = ExperimentConfig(seed=SEEDS[0])
    start = time.perf_counter()
    toy = generate_toy_corpus(cfg.toy(), cfg.data_seed)
    teacher = train_teacher(cfg, toy).params
    data = TeacherData(teacher, toy.train, toy.dev, toy.test, cfg.seed)
    scfg = student_config(cfg, toy)
    grid = Grid(cfg, data, scfg)
    rows = {name: grid.run_row(name) for name in cfg.row_names()}
    grid_seconds = time.perf_counter() - start
    reports = {SEEDS[0]: {n: rows[n].report for n in ("baseline", "seq_kd")}}
    for seed in SEEDS[1:]:
        g = Grid(replace(cfg, seed=seed), data, scfg)
        reports[seed] = {n: g.run_row(n).report for n in ("baseline", "seq_kd")}
    return {"cfg": cfg, "toy": toy, "teacher": teacher, "data": data, "rows": rows, "reports": reports,
            "grid_seconds": grid_seconds}


def test_5_distillation_trend(experiment):
    reps = experiment["reports"]
    gain = np.mean([reps[s]["seq_kd"].bleu_k1 - reps[s]["baseline"].bleu_k1 for s in SEEDS])
    mass = all(reps[s]["seq_kd"].mode_mass > reps[s]["baseline"].mode_mass for s in SEEDS)
    base_gap = np.mean([reps[s]["baseline"].bleu_k5 - reps[s]["baseline"].bleu_k1 for s in SEEDS])
    kd_gap = np.mean([reps[s]["seq_kd"].bleu_k5 - reps[s]["seq_kd"].bleu_k1 for s in SEEDS])
    minutes = experiment["grid_seconds"] / 60
    per_seed = "; ".join(f"s{s} base {reps[s]['baseline'].bleu_k1:.2f}/{reps[s]['baseline'].bleu_k5:.2f} "
                         f"mm {reps[s]['baseline'].mode_mass:.3f}, kd {reps[s]['seq_kd'].bleu_k1:.2f}/"
                         f"{reps[s]['seq_kd'].bleu_k5:.2f} mm {reps[s]['seq_kd'].mode_mass:.3f}" for s in SEEDS)
    parts = {"a": gain >= 1.0, "b": mass, "c": base_gap > kd_gap, "runtime": minutes <= 45}
    detail = (f"(a) greedy gain {gain:+.2f} (b) mode mass {'higher every seed' if mass else 'not higher'} "
              f"(c) beam gap base {base_gap:+.3f} vs kd {kd_gap:+.3f} grid {minutes:.1f} min "
              f"[{', '.join(k for k, ok in parts.items() if not ok) or 'all parts ok'}] | {per_seed}")
    check(5, all(parts.values()), detail)


def test_6_seq_inter_membership_and_dominance(experiment):
    data, cfg = experiment["data"], experiment["cfg"]
    corpora = [data.seq_inter("train", cfg.seq_inter_beam, cfg.seq_inter_fraction),
               data.seq_inter("dev", cfg.seq_inter_beam, 1.0)]
    dominance = all(np.mean(c.sims) >= np.mean(c.mode_sims) and all(a >= b for a, b in zip(c.sims, c.mode_sims))
                    for c in corpora)
    dev = corpora[1]
    members = 0
    beam = DecodeConfig(beam=cfg.seq_inter_beam)
    for src, tgt, lp in zip(dev.corpus.src, dev.corpus.tgt, dev.logprobs):
        listed = {h.tokens for h in beam_search(data.teacher, src, beam)}
        members += lp is None or tuple(tgt) + (EOS,) in listed or tuple(tgt) in listed
    check(6, dominance and members == len(dev.corpus),
          f"membership {members}/{len(dev.corpus)} (dev, K={cfg.seq_inter_beam}); dominance "
          f"{'holds' if dominance else 'violated'}; mean sim {np.mean(corpora[0].sims):.4f} "
          f"vs mode {np.mean(corpora[0].mode_sims):.4f} (train)")


def test_7_pruning_trend(experiment):
    data, cfg = experiment["data"], experiment["cfg"]
    student = experiment["rows"]["seq_kd+seq_inter"].params
    test = data.test
    beam = DecodeConfig(beam=cfg.eval_beam)

    def bleu(p):
        return corpus_bleu([decode(p, s, beam).stripped() for s in test.src], test.tgt).score

    kd = (data.seq_kd("train", cfg.seq_kd_beam).corpus, data.seq_kd("dev", cfg.seq_kd_beam).corpus)
    inter = (data.seq_inter("train", cfg.seq_inter_beam, cfg.seq_inter_fraction).corpus,
             data.seq_inter("dev", cfg.seq_inter_beam, 1.0).corpus)
    mask = compute_prune_mask(student, 0.8)
    pruned = retrain_pruned(student, mask, kd, inter, batch_size=cfg.batch_size, seed=cfg.seed).params
    zero_ok = all(np.all(pruned[n].values[~mask.masks[n]] == 0.0) for n in pruned)
    before, after, no_retrain = bleu(student), bleu(pruned), bleu(apply_mask(student, mask))
    r80 = compression_report(84_000_000, retained_after(84_000_000, 0.8), 221_000_000)
    r90 = compression_report(84_000_000, retained_after(84_000_000, 0.9), 221_000_000)
    arith = (r80.params_text, r80.ratio, r90.params_text, r90.ratio) == ("17 m", 13, "8 m", 26)
    check(7, before - after <= 1.0 and after >= no_retrain and arith and zero_ok,
          f"BLEU K={cfg.eval_beam} unpruned {before:.2f} -> 80% pruned+retrained {after:.2f} "
          f"(loss {before - after:+.2f}, no retraining {no_retrain:.2f}); arithmetic 84m->{r80.params_text}->{r80.ratio}x, "
          f"84m->{r90.params_text}->{r90.ratio}x")


def test_8_decode_cost_scaling(experiment):
    teacher, test = experiment["teacher"], experiment["data"].test
    k1 = throughput_benchmark(teacher, test, beam=1).seconds_per_sentence
    k5 = throughput_benchmark(teacher, test, beam=5).seconds_per_sentence
    ratio = k5 / k1
    check(8, 3.0 <= ratio <= 8.0, f"K=5/K=1 per-sentence time {ratio:.2f} ({1e3 * k5:.2f} ms vs {1e3 * k1:.2f} ms)")


# ---------------------------------------------------------------- determinism


def _snapshot(path):
    out = {}
    for root, _, files in os.walk(path):
        for name in files:
            full = os.path.join(root, name)
            with open(full, "rb") as f:
                out[os.path.relpath(full, path)] = f.read()
    return out


def _pipeline(d, capsys):
    """Every training and generation subcommand once; returns the files and stdout produced."""
    (d / "toy.cfg").write_text("vocab_size = 12\nmin_length = 2\nmax_length = 4\nsynonym_classes = 4\n"
                               "num_sentences = 150\ndev_size = 10\ntest_size = 10\n")
    (d / "model.cfg").write_text("layers = 1\nhidden = 6\ndropout_rate = 0.2\n")
    data = d / "data"
    steps = [
        ["gen-data", "--config", d / "toy.cfg", "--out", data, "--seed", 4],
        ["train", "--train", data / "train", "--dev", data / "dev", "--model-config", d / "model.cfg", "--epochs", 2,
         "--batch-size", 16, "--init-range", 0.3, "--save", d / "teacher.ckpt", "--seed", 1],
        ["train", "--train", data / "train", "--dev", data / "dev", "--model-config", d / "model.cfg", "--epochs", 1,
         "--batch-size", 16, "--teacher", d / "teacher.ckpt", "--save", d / "wkd.ckpt", "--seed", 2],
        ["distill-data", "--mode", "seq-kd", "--teacher", d / "teacher.ckpt", "--input", data / "train",
         "--output", d / "kd", "--beam", 3],
        ["distill-data", "--mode", "seq-inter", "--teacher", d / "teacher.ckpt", "--input", data / "train",
         "--output", d / "inter", "--beam", 4, "--fraction", 0.5],
        ["translate", "--model", d / "teacher.ckpt", "--input", data / "test.src", "--output", d / "hyp",
         "--beam", 3, "--logprobs", d / "hyp.lp"],
        ["prune", "--model", d / "teacher.ckpt", "--fraction", 0.5, "--seq-kd-corpus", d / "kd",
         "--seq-inter-corpus", d / "inter", "--epochs", 1, "--batch-size", 16, "--test", data / "test",
         "--save", d / "pruned.ckpt"],
    ]
    (d / "rows.cfg").write_text("rows = baseline, seq_kd, word_kd+seq_inter\nstudent_layers = 1\n"
                                "student_hidden = 4\nepochs = 1\nbatch_size = 16\nseq_inter_beam = 3\n"
                                "fine_tune_epochs = 1\n")
    steps.append(["experiment", "--grid", d / "rows.cfg", "--teacher", d / "teacher.ckpt", "--data", data,
                  "--out", d / "grid", "--seed", 3])
    logs = []
    for argv in steps:
        code = run_cli([str(a) for a in argv])
        logs.append((argv[0], code, capsys.readouterr().out.replace(str(d), "<dir>")))
    return _snapshot(d), logs


def test_9_determinism(tmp_path, capsys):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a, log_a = _pipeline(tmp_path / "a", capsys)
    b, log_b = _pipeline(tmp_path / "b", capsys)
    codes_ok = all(code == 0 for _, code, _ in log_a + log_b)
    diff = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    same_logs = log_a == log_b
    check(9, codes_ok and not diff and same_logs,
          f"{len(a)} files from {len(log_a)} subcommands; "
          f"{'byte-identical' if not diff else 'differs: ' + ', '.join(diff)}; "
          f"stdout {'identical' if same_logs else 'differs'}")
