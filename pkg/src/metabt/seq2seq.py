"""Tiny attentional RNN encoder-decoder over integer vocabularies.

Sentences are tuples of token ids that start with BOS and end with EOS.
``max_len`` always counts content tokens (BOS/EOS excluded): a decoder that
has emitted ``max_len`` content tokens may only emit EOS next. PAD and BOS
are never permitted as outputs, so an untrained model with zero weights is
uniform over the ``vocab_size - 2`` permissible tokens.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor

PAD, BOS, EOS = 0, 1, 2
FIRST_CONTENT = 3
NEG = -1e9

Sentence = tuple[int, ...]
Pair = tuple[Sentence, Sentence]


def make_sentence(content: Iterable[int]) -> Sentence:
    return (BOS, *(int(t) for t in content), EOS)


def content_of(s: Sentence) -> Sentence:
    return tuple(s[1:-1])


def check_sentence(s: Sequence[int], vocab_size: int, max_len: int | None = None) -> None:
    if len(s) < 2 or s[0] != BOS or s[-1] != EOS:
        raise ContractError(f"sentence must start with BOS and end with EOS: {tuple(s)}")
    body = s[1:-1]
    if any(t < FIRST_CONTENT or t >= vocab_size for t in body):
        raise ContractError(f"sentence has reserved or out-of-vocabulary ids: {tuple(s)}")
    if max_len is not None and len(body) > max_len:
        raise ContractError(f"sentence has {len(body)} content tokens, max_len is {max_len}")


@dataclass(frozen=True)
class NoiseConfig:
    delete: float = 0.1
    replace: float = 0.1
    window: int = 3

    def __post_init__(self):
        if not (0.0 <= self.delete <= 1.0 and 0.0 <= self.replace <= 1.0):
            raise ContractError("noise probabilities must lie in [0, 1]")
        if self.window < 1:
            raise ContractError("shuffle window must be >= 1")


PARAM_SHAPES = {
    "emb": ("V", "H"),
    "enc_W": ("H", "H"),
    "enc_U": ("H", "H"),
    "enc_b": ("H",),
    "dec_We": ("H", "H"),
    "dec_Wo": ("H", "H"),
    "dec_U": ("H", "H"),
    "dec_b": ("H",),
    "att_W": ("H", "H"),
    "out_W": ("2H", "H"),
    "out_b": ("H",),
}


@dataclass(frozen=True)
class ModelParams:
    """Named tensors of one encoder-decoder.

    The embedding table ``emb`` is shared by encoder and decoder and doubles as
    the output projection, so there is no separate softmax matrix.
    """

    tensors: Mapping[str, Tensor]
    vocab_size: int
    hidden: int
    max_len: int

    def __post_init__(self):
        dims = {"V": self.vocab_size, "H": self.hidden, "2H": 2 * self.hidden}
        if set(self.tensors) != set(PARAM_SHAPES):
            raise ContractError(f"unexpected parameter names: {sorted(self.tensors)}")
        for k, spec in PARAM_SHAPES.items():
            want = tuple(dims[d] for d in spec)
            if self.tensors[k].shape != want:
                raise ContractError(f"{k}: expected shape {want}, got {self.tensors[k].shape}")
        if self.vocab_size < 4:
            raise ContractError("vocabulary needs at least one content id (size >= 4)")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def with_arrays(self, arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        return ModelParams({k: Tensor(arrays[k], requires_grad=True) for k in PARAM_SHAPES},
                           self.vocab_size, self.hidden, self.max_len)

    def with_tensors(self, tensors: Mapping[str, Tensor]) -> "ModelParams":
        return ModelParams(dict(tensors), self.vocab_size, self.hidden, self.max_len)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.tensors.values())


def init_params(vocab_size: int, hidden: int, max_len: int,
                rng: np.random.Generator, emb_scale: float = 0.3) -> ModelParams:
    dims = {"V": vocab_size, "H": hidden, "2H": 2 * hidden}
    arrays = {}
    for k, spec in PARAM_SHAPES.items():
        shape = tuple(dims[d] for d in spec)
        if len(shape) == 1:
            arrays[k] = np.zeros(shape)
        elif k == "emb":
            arrays[k] = rng.normal(0.0, emb_scale, shape)
        else:
            arrays[k] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
    return ModelParams({k: Tensor(v, requires_grad=True) for k, v in arrays.items()},
                       vocab_size, hidden, max_len)


def zero_params(vocab_size: int, hidden: int, max_len: int) -> ModelParams:
    dims = {"V": vocab_size, "H": hidden, "2H": 2 * hidden}
    return ModelParams({k: Tensor(np.zeros(tuple(dims[d] for d in spec)), requires_grad=True)
                        for k, spec in PARAM_SHAPES.items()}, vocab_size, hidden, max_len)


# --------------------------------------------------------------------------
# network


def pad_batch(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width))
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return ids, mask


def output_mask(vocab_size: int, step: int, max_len: int) -> np.ndarray:
    """Additive logit mask for decoding position ``step`` (0 = first token after BOS)."""
    m = np.zeros(vocab_size)
    if step >= max_len:
        m[:] = NEG
        m[EOS] = 0.0
    else:
        m[PAD] = NEG
        m[BOS] = NEG
    return m


class Encoded:
    """Encoder states plus what the decoder needs to attend over them."""

    def __init__(self, states: Tensor, att_mask: np.ndarray, init: Tensor):
        self.states = states
        self.att_mask = att_mask
        self.init = init


def encode(p: ModelParams, src_ids: np.ndarray, src_mask: np.ndarray) -> Encoded:
    B, S = src_ids.shape
    x = ad.add_bias(ad.einsum("bsh,hk->bsk", ad.gather(p["emb"], src_ids), p["enc_W"]), p["enc_b"])
    h = ad.tanh(ad.select(x, 0, axis=1))
    states = [h]
    for t in range(1, S):
        h = ad.tanh(ad.add(ad.select(x, t, axis=1), ad.matmul(h, p["enc_U"])))
        states.append(h)
    M = ad.stack(states, axis=1)
    lengths = src_mask.sum(axis=1, keepdims=True)
    init = ad.tanh(ad.einsum("bs,bsh->bh", ad.constant(src_mask / lengths), M))
    att_mask = np.where(src_mask > 0, 0.0, NEG)
    return Encoded(M, att_mask, init)


def _dec_step(p: ModelParams, enc: Encoded, e_in: Tensor, s: Tensor, o: Tensor | None):
    pre = ad.add(e_in, ad.matmul(s, p["dec_U"]))
    if o is not None:
        pre = ad.add(pre, ad.matmul(o, p["dec_Wo"]))
    s = ad.tanh(pre)
    q = ad.matmul(s, p["att_W"])
    scores = ad.add(ad.einsum("bsh,bh->bs", enc.states, q), ad.constant(enc.att_mask))
    ctx = ad.einsum("bs,bsh->bh", ad.softmax(scores), enc.states)
    o = ad.tanh(ad.add_bias(ad.matmul(ad.concat([s, ctx], axis=-1), p["out_W"]), p["out_b"]))
    return s, o


def _input_proj(p: ModelParams, ids: np.ndarray) -> Tensor:
    return ad.add_bias(ad.einsum("bth,hk->btk", ad.gather(p["emb"], ids), p["dec_We"]), p["dec_b"])


def token_logprobs(p: ModelParams, pairs: Sequence[Pair],
                   max_len: int | None = None) -> tuple[Tensor, np.ndarray]:
    """Teacher-forced log P(tgt_i | tgt_<i, src) for a batch.

    Returns a (B, T) tensor and its 0/1 mask of real target positions.
    """
    if not pairs:
        raise ContractError("empty batch")
    L = p.max_len if max_len is None else max_len
    for src, tgt in pairs:
        check_sentence(src, p.vocab_size, L)
        check_sentence(tgt, p.vocab_size, L)
    src_ids, src_mask = pad_batch([s for s, _ in pairs])
    tgt_ids, tgt_mask = pad_batch([t for _, t in pairs])
    inputs = tgt_ids[:, :-1]
    gold = tgt_ids[:, 1:].copy()
    gmask = tgt_mask[:, 1:]
    gold[gmask == 0] = EOS
    T = inputs.shape[1]
    enc = encode(p, src_ids, src_mask)
    xin = _input_proj(p, inputs)
    s, o = enc.init, None
    outs = []
    for t in range(T):
        s, o = _dec_step(p, enc, ad.select(xin, t, axis=1), s, o)
        outs.append(o)
    logits = ad.einsum("bth,vh->btv", ad.stack(outs, axis=1), p["emb"])
    vmask = np.stack([output_mask(p.vocab_size, t, L) for t in range(T)])
    logits = ad.add(logits, ad.constant(np.broadcast_to(vmask, logits.shape)))
    return ad.pick(ad.log_softmax(logits), gold), gmask


def sequence_logprobs(p: ModelParams, pairs: Sequence[Pair], max_len: int | None = None) -> Tensor:
    """(B,) total log-probability of each target given its source."""
    lp, mask = token_logprobs(p, pairs, max_len)
    return ad.einsum("bt,bt->b", lp, ad.constant(mask))


def sequence_logprob(p: ModelParams, src: Sentence, tgt: Sentence,
                     max_len: int | None = None) -> tuple[Tensor, Tensor]:
    """(total, per_token) log-probability of ``tgt`` given ``src``."""
    lp, _ = token_logprobs(p, [(src, tgt)], max_len)
    per_token = ad.select(lp, 0, axis=0)
    return ad.total(per_token), per_token


def batch_nll(p: ModelParams, pairs: Sequence[Pair], max_len: int | None = None) -> Tensor:
    """Mean negative log-likelihood over all non-PAD target positions."""
    lp, mask = token_logprobs(p, pairs, max_len)
    return ad.scale(ad.masked_mean(lp, mask), -1.0)


# --------------------------------------------------------------------------
# decoding


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class _Decoder:
    """Incremental decoding state for a batch of sources (no tape)."""

    def __init__(self, p: ModelParams, srcs: Sequence[Sentence], max_len: int):
        for s in srcs:
            check_sentence(s, p.vocab_size, max_len)
        self.p = p
        self.max_len = max_len
        ids, mask = pad_batch(srcs)
        self.enc = encode(p, ids, mask)
        self.s = self.enc.init
        self.o = None
        self.step = 0

    def reorder(self, rows: np.ndarray) -> None:
        e = self.enc
        self.enc = Encoded(ad.constant(e.states.data[rows]), e.att_mask[rows], e.init)
        self.s = ad.constant(self.s.data[rows])
        if self.o is not None:
            self.o = ad.constant(self.o.data[rows])

    def advance(self, prev: np.ndarray) -> np.ndarray:
        """Feed the previous tokens; return (B, V) masked logits for the next one."""
        p = self.p
        e_in = ad.add_bias(ad.matmul(ad.gather(p["emb"], prev), p["dec_We"]), p["dec_b"])
        self.s, self.o = _dec_step(p, self.enc, e_in, self.s, self.o)
        logits = self.o.data @ p["emb"].data.T + output_mask(p.vocab_size, self.step, self.max_len)
        self.step += 1
        return logits


def _finish(prefix: list[int]) -> Sentence:
    return (BOS, *prefix, EOS)


def sample_batch(p: ModelParams, srcs: Sequence[Sentence], top_k: int, rng: np.random.Generator,
                 temperature: float = 1.0, max_len: int | None = None,
                 return_logprob: bool = False):
    """Ancestral top-k sampling for every source in ``srcs``.

    With ``return_logprob`` also returns the untruncated model log-probability
    log P(x|src) of each sample.
    """
    L = p.max_len if max_len is None else max_len
    V = p.vocab_size
    if not 1 <= top_k <= V:
        raise ContractError(f"top_k must lie in [1, {V}]")
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    B = len(srcs)
    dec = _Decoder(p, srcs, L)
    prev = np.full(B, BOS, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    out: list[list[int]] = [[] for _ in range(B)]
    logp = np.zeros(B)
    rows = np.arange(B)
    for _ in range(L + 1):
        logits = dec.advance(prev)
        z = logits / temperature
        order = np.argsort(-z, axis=1, kind="stable")[:, :top_k]
        zk = np.take_along_axis(z, order, axis=1)
        pk = np.exp(zk - zk[:, :1])
        pk /= pk.sum(axis=1, keepdims=True)
        u = rng.random(B)
        j = (np.cumsum(pk, axis=1) < u[:, None]).sum(axis=1)
        # rounding in the cumulative sum must not select a zero-probability slot
        j = np.minimum(j, (pk > 0).sum(axis=1) - 1)
        tok = order[rows, j]
        if return_logprob:
            lp = _log_softmax_np(logits)
            logp += np.where(done, 0.0, lp[rows, tok])
        for i in np.flatnonzero(~done):
            if tok[i] == EOS:
                done[i] = True
            else:
                out[i].append(int(tok[i]))
        if done.all():
            break
        prev = np.where(done, EOS, tok)
    result = [_finish(x) for x in out]
    return (result, logp) if return_logprob else result


def sample_sequence(p: ModelParams, src: Sentence, top_k: int, temperature: float,
                    max_len: int | None, rng: np.random.Generator) -> Sentence:
    return sample_batch(p, [src], top_k, rng, temperature, max_len)[0]


def greedy_batch(p: ModelParams, srcs: Sequence[Sentence], max_len: int | None = None) -> list[Sentence]:
    L = p.max_len if max_len is None else max_len
    B = len(srcs)
    dec = _Decoder(p, srcs, L)
    prev = np.full(B, BOS, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    out: list[list[int]] = [[] for _ in range(B)]
    for _ in range(L + 1):
        tok = np.argmax(dec.advance(prev), axis=1)
        for i in np.flatnonzero(~done):
            if tok[i] == EOS:
                done[i] = True
            else:
                out[i].append(int(tok[i]))
        if done.all():
            break
        prev = np.where(done, EOS, tok)
    return [_finish(x) for x in out]


def greedy_decode(p: ModelParams, src: Sentence, max_len: int | None = None) -> Sentence:
    return greedy_batch(p, [src], max_len)[0]


def beam_search(p: ModelParams, src: Sentence, beam_size: int,
                max_len: int | None = None, return_score: bool = False):
    """Highest total log-probability hypothesis found with a beam of ``beam_size``.

    Finished hypotheses compete for beam slots with unfinished ones. Scores are
    raw sums of token log-probabilities.
    """
    if beam_size < 1:
        raise ContractError("beam_size must be >= 1")
    L = p.max_len if max_len is None else max_len
    dec = _Decoder(p, [src], L)
    prefixes: list[list[int]] = [[]]
    scores = np.zeros(1)
    prev = np.array([BOS])
    finished: list[tuple[float, list[int]]] = []
    for _ in range(L + 1):
        lp = _log_softmax_np(dec.advance(prev))
        cand = scores[:, None] + lp
        allowed = np.broadcast_to(lp > NEG / 2, cand.shape)
        flat = np.flatnonzero(allowed.ravel())
        keep = flat[np.argsort(-cand.ravel()[flat], kind="stable")[:beam_size]]
        rows, toks = np.divmod(keep, p.vocab_size)
        live_rows, live_toks, live_scores = [], [], []
        for r, t, k in zip(rows, toks, keep):
            sc = float(cand.ravel()[k])
            if t == EOS:
                finished.append((sc, prefixes[r]))
            else:
                live_rows.append(r)
                live_toks.append(t)
                live_scores.append(sc)
        if not live_rows:
            break
        best_done = max((f[0] for f in finished), default=-np.inf)
        if best_done >= max(live_scores):
            break
        prefixes = [prefixes[r] + [int(t)] for r, t in zip(live_rows, live_toks)]
        scores = np.array(live_scores)
        dec.reorder(np.array(live_rows))
        prev = np.array(live_toks)
    best_score, best = max(finished, key=lambda f: f[0])
    sent = _finish(best)
    return (sent, best_score) if return_score else sent


def apply_noise(sent: Sentence, noise: NoiseConfig, vocab_size: int,
                rng: np.random.Generator) -> Sentence:
    """Delete, then replace, then locally shuffle the content tokens."""
    toks = [t for t in content_of(sent) if rng.random() >= noise.delete]
    toks = [int(rng.integers(FIRST_CONTENT, vocab_size)) if rng.random() < noise.replace else t
            for t in toks]
    if noise.window > 1 and len(toks) > 1:
        keys = np.arange(len(toks)) + rng.uniform(0.0, noise.window, len(toks))
        toks = [toks[i] for i in np.argsort(keys, kind="stable")]
    return make_sentence(toks)


def noisy_beam_search(p: ModelParams, src: Sentence, beam_size: int, max_len: int | None,
                      noise: NoiseConfig, rng: np.random.Generator) -> Sentence:
    return apply_noise(beam_search(p, src, beam_size, max_len), noise, p.vocab_size, rng)


def enumerate_sentences(vocab_size: int, max_len: int) -> list[Sentence]:
    """Every valid sentence with at most ``max_len`` content tokens."""
    content = range(FIRST_CONTENT, vocab_size)
    out = [make_sentence(())]
    frontier: list[tuple[int, ...]] = [()]
    for _ in range(max_len):
        frontier = [f + (c,) for f in frontier for c in content]
        out.extend(make_sentence(f) for f in frontier)
    return out
