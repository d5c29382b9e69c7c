"""Attentional LSTM encoder-decoder (global-general attention, input feeding).

Two forward paths share one parameter table:

* a differentiable teacher-forced path built from :mod:`seqdistill.autodiff`
  primitives, used for losses, perplexity and sequence scoring;
* a plain-numpy single-hypothesis path (:func:`encode_source`,
  :func:`decode_step`) used by the decoders, where per-op tape overhead
  would dominate.

Tests pin the two paths to each other.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import BOS, PAD, Batch, ParallelCorpus, batch_iterator


@dataclass
class ModelConfig:
    layers: int
    hidden: int
    src_vocab_size: int
    tgt_vocab_size: int
    dropout_rate: float = 0.3
    embed_dim: Optional[int] = None

    def __post_init__(self):
        if self.embed_dim is None:
            self.embed_dim = self.hidden
        if self.layers < 1 or self.hidden < 1:
            raise ValueError("layers and hidden must be >= 1")
        if self.embed_dim != self.hidden:
            raise ValueError("embed_dim must equal hidden")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """The documented parameter names, in checkpoint order, with their shapes."""
    h, e = cfg.hidden, cfg.embed_dim
    shapes = {"src_embed": (cfg.src_vocab_size, e), "tgt_embed": (cfg.tgt_vocab_size, e)}
    for side in ("enc", "dec"):
        for layer in range(cfg.layers):
            if layer > 0:
                d_in = h
            else:
                d_in = e + h if side == "dec" else e
            shapes[f"{side}.{layer}.W_x"] = (d_in, 4 * h)
            shapes[f"{side}.{layer}.W_h"] = (h, 4 * h)
            shapes[f"{side}.{layer}.b"] = (4 * h,)
    shapes["attn.W_a"] = (h, h)
    shapes["attn.W_c"] = (2 * h, h)
    shapes["out.W_o"] = (h, cfg.tgt_vocab_size)
    shapes["out.b_o"] = (cfg.tgt_vocab_size,)
    return shapes


class ModelParams:
    """Named tensor table for one encoder-decoder."""

    def __init__(self, cfg: ModelConfig, tensors: Dict[str, Tensor]):
        expected = param_shapes(cfg)
        if list(tensors) != list(expected):
            missing = set(expected) ^ set(tensors)
            raise ValueError(f"parameter names do not match config (differences: {sorted(missing)})")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {tensors[name].shape} != expected {shape}")
        self.cfg = cfg
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self, requires_grad: Optional[bool] = None) -> "ModelParams":
        return ModelParams(self.cfg, {
            k: Tensor(t.values.copy(), t.requires_grad if requires_grad is None else requires_grad, k)
            for k, t in self.tensors.items()})

    def frozen(self) -> "ModelParams":
        """View sharing buffers but never requesting gradients (teacher use)."""
        return ModelParams(self.cfg, {k: Tensor(t.values, False, k) for k, t in self.tensors.items()})

    def set_values(self, arrays: Dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            self.tensors[k].values = v

    def state(self) -> Dict[str, np.ndarray]:
        return {k: t.values.copy() for k, t in self.tensors.items()}


def init_params(cfg: ModelConfig, seed: int, init_range: float = 0.1) -> ModelParams:
    """Uniform(-init_range, init_range) weights; zero biases except forget gates at 1."""
    rng = np.random.default_rng(seed)
    h = cfg.hidden
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b") or name == "out.b_o":
            v = np.zeros(shape)
            if name.endswith(".b"):
                v[h: 2 * h] = 1.0
        else:
            v = rng.uniform(-init_range, init_range, size=shape) if init_range > 0 else np.zeros(shape)
        tensors[name] = Tensor(v, requires_grad=True, name=name)
    return ModelParams(cfg, tensors)


# ----------------------------------------------------- differentiable path


def _lstm(x: Tensor, h: Tensor, c: Tensor, W_x: Tensor, W_h: Tensor, b: Tensor, n: int):
    z = ad.add(ad.add(ad.matmul(x, W_x), ad.matmul(h, W_h)), b)
    i = ad.sigmoid(z[:, 0:n])
    f = ad.sigmoid(z[:, n: 2 * n])
    g = ad.tanh(z[:, 2 * n: 3 * n])
    o = ad.sigmoid(z[:, 3 * n: 4 * n])
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def _dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.mul(x, Tensor(keep))


@dataclass
class EncoderOutput:
    annotations: Tensor          # batch x I x hidden
    final: List[Tuple[Tensor, Tensor]]  # per layer (h, c)
    src_mask: np.ndarray         # batch x I, 1 at real positions


def encode(params: ModelParams, src: np.ndarray, lengths: Optional[np.ndarray] = None,
           rng: Optional[np.random.Generator] = None) -> EncoderOutput:
    """Run the stacked encoder LSTM over a right-padded id matrix."""
    cfg = params.cfg
    src = np.asarray(src, dtype=np.int64)
    if src.ndim == 1:
        src = src[None, :]
    if lengths is None:
        lengths = (src != PAD).sum(axis=1)
    if src.max() >= cfg.src_vocab_size or src.min() < 0:
        raise IndexError(f"source id out of range for vocabulary of size {cfg.src_vocab_size}")
    b, steps = src.shape
    n = cfg.hidden
    mask = (np.arange(steps)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)
    hs = [Tensor(np.zeros((b, n))) for _ in range(cfg.layers)]
    cs = [Tensor(np.zeros((b, n))) for _ in range(cfg.layers)]
    tops = []
    for t in range(steps):
        inp = ad.gather(params["src_embed"], src[:, t])
        m_t = mask[:, t]
        partial = not m_t.all()
        m = Tensor(np.repeat(m_t[:, None], n, axis=1)) if partial else None
        for layer in range(cfg.layers):
            p = f"enc.{layer}."
            h_new, c_new = _lstm(inp, hs[layer], cs[layer], params[p + "W_x"], params[p + "W_h"], params[p + "b"], n)
            if partial:
                # padded positions keep the previous state so final states stop at the last real token
                h_new = ad.add(hs[layer], ad.mul(m, ad.sub(h_new, hs[layer])))
                c_new = ad.add(cs[layer], ad.mul(m, ad.sub(c_new, cs[layer])))
            hs[layer], cs[layer] = h_new, c_new
            inp = _dropout(h_new, cfg.dropout_rate, rng) if layer < cfg.layers - 1 else h_new
        tops.append(ad.reshape(inp, (b, 1, n)))
    annotations = ad.concat(tops, axis=1)
    return EncoderOutput(annotations, list(zip(hs, cs)), mask)


def decoder_outputs(params: ModelParams, enc: EncoderOutput, tgt_in: np.ndarray,
                    rng: Optional[np.random.Generator] = None,
                    attention_log: Optional[list] = None) -> List[Tensor]:
    """Teacher-forced attentional hidden states, one ``batch x hidden`` tensor per step."""
    cfg = params.cfg
    n = cfg.hidden
    b, steps = tgt_in.shape
    _, src_len, _ = enc.annotations.shape
    keys = ad.reshape(ad.matmul(ad.reshape(enc.annotations, (b * src_len, n)), ad.transpose(params["attn.W_a"])),
                      (b, src_len, n))
    bias = Tensor(np.where(enc.src_mask > 0, 0.0, -np.inf))
    hs = [h for h, _ in enc.final]
    cs = [c for _, c in enc.final]
    feed = Tensor(np.zeros((b, n)))
    outs = []
    for t in range(steps):
        inp = ad.concat([ad.gather(params["tgt_embed"], tgt_in[:, t]), feed], axis=1)
        for layer in range(cfg.layers):
            p = f"dec.{layer}."
            hs[layer], cs[layer] = _lstm(inp, hs[layer], cs[layer], params[p + "W_x"], params[p + "W_h"],
                                         params[p + "b"], n)
            inp = _dropout(hs[layer], cfg.dropout_rate, rng) if layer < cfg.layers - 1 else hs[layer]
        h_top = inp
        scores = ad.add(ad.reshape(ad.matmul(keys, ad.reshape(h_top, (b, n, 1))), (b, src_len)), bias)
        attn = ad.softmax(scores, axis=1)
        if attention_log is not None:
            attention_log.append(attn.values)
        ctx = ad.reshape(ad.matmul(ad.reshape(attn, (b, 1, src_len)), enc.annotations), (b, n))
        feed = ad.tanh(ad.matmul(ad.concat([ctx, h_top], axis=1), params["attn.W_c"]))
        outs.append(feed)
    return outs


@dataclass
class ForwardResult:
    logits: Tensor      # one row per real target position
    rows: np.ndarray    # (sentence index within batch, position) for each row
    targets: np.ndarray


def forward_logits(params: ModelParams, batch: Batch, rng: Optional[np.random.Generator] = None) -> ForwardResult:
    """Output-layer logits at every non-pad target position of a teacher-forced batch."""
    enc = encode(params, batch.src, batch.src_lengths, rng)
    outs = decoder_outputs(params, enc, batch.tgt_in, rng)
    b, steps = batch.tgt_in.shape
    stacked = ad.concat(outs, axis=0)  # row = t * b + i
    flat_mask = batch.tgt_mask.T.reshape(-1) > 0
    sel = np.flatnonzero(flat_mask)
    hid = ad.gather(stacked, sel)
    logits = ad.add(ad.matmul(hid, params["out.W_o"]), params["out.b_o"])
    rows = np.stack([sel % b, sel // b], axis=1)
    targets = batch.tgt_out.T.reshape(-1)[sel]
    return ForwardResult(logits, rows, targets)


@dataclass
class LossResult:
    """Summed token loss of one batch plus the counts needed to normalise it."""

    total: Tensor
    num_tokens: int
    num_sentences: int
    per_sentence: np.ndarray

    @property
    def mean(self) -> Tensor:
        return ad.scale(self.total, 1.0 / self.num_tokens)

    @property
    def per_sentence_mean(self) -> Tensor:
        return ad.scale(self.total, 1.0 / self.num_sentences)


def _weighted_ce(target: np.ndarray, logp: Tensor) -> Tuple[Tensor, np.ndarray]:
    """Sum of ``-target * logp`` and the per-row values (target rows need not sum to 1)."""
    total = ad.scale(ad.tsum(ad.mul(Tensor(target), logp)), -1.0)
    per_row = -(np.where(target == 0.0, 0.0, target * logp.values)).sum(axis=1)
    return total, per_row


def _per_sentence(values: np.ndarray, rows: np.ndarray, b: int) -> np.ndarray:
    out = np.zeros(b)
    np.add.at(out, rows[:, 0], values)
    return out


def word_nll_loss(params: ModelParams, batch: Batch, rng: Optional[np.random.Generator] = None) -> LossResult:
    """Teacher-forced negative log-likelihood summed over real target tokens."""
    fw = forward_logits(params, batch, rng)
    logp = ad.log_softmax(fw.logits, axis=1)
    onehot = np.zeros(logp.shape)
    onehot[np.arange(len(fw.targets)), fw.targets] = batch.weights[fw.rows[:, 0]]
    total, per_row = _weighted_ce(onehot, logp)
    return LossResult(total, len(fw.targets), len(batch), _per_sentence(per_row, fw.rows, len(batch)))


def teacher_distribution(teacher: ModelParams, batch: Batch, tau: float = 1.0) -> np.ndarray:
    """Teacher next-token distributions on gold prefixes, annealed by ``tau``. No tape."""
    with ad.no_tape():
        fw = forward_logits(teacher.frozen(), batch)
    z = fw.logits.values / tau
    z = z - z.max(axis=1, keepdims=True)
    q = np.exp(z)
    return q / q.sum(axis=1, keepdims=True)


def word_kd_loss(student: ModelParams, teacher: ModelParams, batch: Batch, alpha: float = 0.5,
                 tau: float = 1.0, rng: Optional[np.random.Generator] = None,
                 teacher_probs: Optional[np.ndarray] = None) -> LossResult:
    """``(1 - alpha) * NLL + alpha * CE(teacher_tau, student_tau)`` at the same gold-prefix positions.

    The temperature only enters the distillation term. No gradient is
    recorded for the teacher.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if tau < 1.0:
        raise ValueError("tau must be >= 1")
    if teacher.cfg.tgt_vocab_size != student.cfg.tgt_vocab_size:
        raise ValueError(f"vocabulary mismatch: teacher {teacher.cfg.tgt_vocab_size} "
                         f"vs student {student.cfg.tgt_vocab_size} target types")
    q = teacher_distribution(teacher, batch, tau) if teacher_probs is None else teacher_probs
    fw = forward_logits(student, batch, rng)
    w = batch.weights[fw.rows[:, 0]][:, None]
    logp = ad.log_softmax(fw.logits, axis=1)
    onehot = np.zeros(logp.shape)
    onehot[np.arange(len(fw.targets)), fw.targets] = 1.0
    nll, nll_rows = _weighted_ce(onehot * w, logp)
    logp_tau = logp if tau == 1.0 else ad.log_softmax(ad.scale(fw.logits, 1.0 / tau), axis=1)
    kd, kd_rows = _weighted_ce(q * w, logp_tau)
    total = ad.add(ad.scale(nll, 1.0 - alpha), ad.scale(kd, alpha))
    per_row = (1.0 - alpha) * nll_rows + alpha * kd_rows
    return LossResult(total, len(fw.targets), len(batch), _per_sentence(per_row, fw.rows, len(batch)))


def _scoring_batch(src: Sequence[int], tokens: Sequence[int]) -> Batch:
    tokens = list(tokens)
    n = len(tokens)
    return Batch(src=np.asarray([src], dtype=np.int64), src_lengths=np.array([len(src)]),
                 tgt_in=np.asarray([[BOS] + tokens[:-1]], dtype=np.int64),
                 tgt_out=np.asarray([tokens], dtype=np.int64), tgt_mask=np.ones((1, n)),
                 indices=np.zeros(1, dtype=np.int64), weights=np.ones(1))


def token_logprobs(params: ModelParams, src: Sequence[int], tokens: Sequence[int]) -> np.ndarray:
    """Per-step log-probabilities of ``tokens`` given ``src``, scored exactly as given."""
    if len(tokens) == 0:
        return np.zeros(0)
    with ad.no_tape():
        fw = forward_logits(params, _scoring_batch(src, tokens))
        logp = ad.log_softmax(fw.logits, axis=1).values
    order = np.argsort(fw.rows[:, 1], kind="stable")
    return logp[order, fw.targets[order]]


def sequence_logprob(params: ModelParams, src: Sequence[int], tokens: Sequence[int]) -> float:
    """``log p(tokens | src)``; include ``</s>`` in ``tokens`` to score a complete sentence."""
    return float(token_logprobs(params, src, tokens).sum())


def corpus_nll(params: ModelParams, corpus: ParallelCorpus, batch_size: int = 64) -> Tuple[float, int]:
    """Total target NLL (including ``</s>``) and token count over a corpus."""
    total, count = 0.0, 0
    with ad.no_tape():
        for batch in batch_iterator(corpus, batch_size):
            res = word_nll_loss(params, batch)
            total += float(res.per_sentence.sum())
            count += res.num_tokens
    return total, count


def perplexity(params: ModelParams, corpus: ParallelCorpus, batch_size: int = 64) -> float:
    if len(corpus) == 0:
        raise ValueError("perplexity of an empty corpus")
    total, count = corpus_nll(params, corpus, batch_size)
    return float(np.exp(total / count))


# ------------------------------------------------------ numpy inference path


@dataclass
class EncodedSource:
    annotations: np.ndarray   # I x hidden
    keys: np.ndarray          # I x hidden, annotations projected by W_a
    final: List[Tuple[np.ndarray, np.ndarray]]


@dataclass
class DecoderState:
    """Per-layer (cell, hidden) vectors plus the input-feed vector."""

    layers: List[Tuple[np.ndarray, np.ndarray]]
    feed: np.ndarray
    attention: Optional[np.ndarray] = None


def _lstm_np(x, h, c, W_x, W_h, b, n):
    z = x @ W_x + h @ W_h + b
    i = 0.5 * (np.tanh(0.5 * z[:n]) + 1.0)
    f = 0.5 * (np.tanh(0.5 * z[n: 2 * n]) + 1.0)
    g = np.tanh(z[2 * n: 3 * n])
    o = 0.5 * (np.tanh(0.5 * z[3 * n:]) + 1.0)
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


def encode_source(params: ModelParams, src: Sequence[int]) -> EncodedSource:
    """Encode one unpadded source sentence."""
    cfg = params.cfg
    n = cfg.hidden
    src = list(src)
    if not src:
        raise ValueError("empty source sentence")
    if max(src) >= cfg.src_vocab_size or min(src) < 0:
        raise IndexError(f"source id out of range for vocabulary of size {cfg.src_vocab_size}")
    emb = params["src_embed"].values
    weights = [(params[f"enc.{l}.W_x"].values, params[f"enc.{l}.W_h"].values, params[f"enc.{l}.b"].values)
               for l in range(cfg.layers)]
    hs = [np.zeros(n) for _ in range(cfg.layers)]
    cs = [np.zeros(n) for _ in range(cfg.layers)]
    tops = []
    for tok in src:
        x = emb[tok]
        for layer, (W_x, W_h, b) in enumerate(weights):
            hs[layer], cs[layer] = _lstm_np(x, hs[layer], cs[layer], W_x, W_h, b, n)
            x = hs[layer]
        tops.append(x)
    annotations = np.stack(tops)
    keys = annotations @ params["attn.W_a"].values.T
    return EncodedSource(annotations, keys, list(zip(hs, cs)))


def initial_state(enc: EncodedSource) -> DecoderState:
    return DecoderState([(c, h) for h, c in enc.final], np.zeros(enc.annotations.shape[1]))


def decode_step(params: ModelParams, state: DecoderState, prev_token: int,
                enc: EncodedSource) -> Tuple[np.ndarray, DecoderState]:
    """One decoder step: log-distribution over the target vocabulary and the next state."""
    cfg = params.cfg
    n = cfg.hidden
    x = np.concatenate([params["tgt_embed"].values[prev_token], state.feed])
    new_layers = []
    for layer, (c, h) in enumerate(state.layers):
        p = f"dec.{layer}."
        h, c = _lstm_np(x, h, c, params[p + "W_x"].values, params[p + "W_h"].values, params[p + "b"].values, n)
        new_layers.append((c, h))
        x = h
    scores = enc.keys @ x
    scores = np.exp(scores - scores.max())
    attn = scores / scores.sum()
    ctx = attn @ enc.annotations
    feed = np.tanh(np.concatenate([ctx, x]) @ params["attn.W_c"].values)
    logits = feed @ params["out.W_o"].values + params["out.b_o"].values
    logits = logits - logits.max()
    log_dist = logits - np.log(np.exp(logits).sum())
    return log_dist, DecoderState(new_layers, feed, attn)
