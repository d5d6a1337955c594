"""Back-translation training with a fixed or meta-learned backward model.

One training step with a generation strategy:

1. draw a monolingual target batch ``y`` and generate pseudo sources ``x̂``
   with the backward model ψ;
2. (phase 1) update the forward model θ on the pseudo batch plus a real
   parallel batch, keeping the pseudo-batch gradient ``g_pseudo`` taken at
   the pre-update parameters;
3. (phase 2, meta strategy only) take the meta-dev gradient ``g_dev`` at the
   updated parameters, form the reward ``R = g_dev · g_pseudo`` and move ψ
   along ``(R - b) ∇ψ log P(x̂|y; ψ)`` where ``b`` is a moving-average
   baseline of past rewards.

The learning-rate factor that multiplies the exact first-order meta-gradient
is folded into the backward learning rate.
"""

from __future__ import annotations

import io
import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import evalanalysis as ev
from . import seq2seq as s2s
from .autodiff import ContractError, GradVector
from .datasynth import DataSplits
from .seq2seq import ModelParams, NoiseConfig, Pair, Sentence


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss, gradient or reward."""

    def __init__(self, message: str, log: "StepLog | None" = None):
        super().__init__(message)
        self.log = log


def substream(seed: int, label: str) -> np.random.Generator:
    """Independent generator for one concern, derived from the master seed."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(label.encode()),)))


@dataclass
class Hyperparams:
    lr_forward: float = 3e-3
    lr_backward: float = 1e-4
    lr_pretrain: float = 3e-3
    optimizer: str = "adam"              # "sgd" | "adam"
    backward_optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hidden: int = 32
    max_len: int = 8
    parallel_batch: int = 32
    mono_batch: int = 16
    dev_batch: int = 8
    pretrain_batch: int = 32
    top_k: int = 10
    temperature: float = 1.0
    baseline_decay: float = 0.99
    use_baseline: bool = True
    total_steps: int = 2000
    pretrain_steps: int = 2000
    eval_every: int = 200
    parallel_weight: float = 1.0
    phase1_mode: str = "sum"             # "sum" | "alternate"
    reward_mode: str = "batch"           # "batch" | "sentence"
    reward_grad: str = "raw"             # "raw" | "transformed"
    pretrain_union: bool = True
    seed: int = 0

    def validate(self) -> "Hyperparams":
        for k in ("lr_forward", "lr_backward", "lr_pretrain"):
            if not 0 <= getattr(self, k) < math.inf:
                raise ContractError(f"{k} must be finite and non-negative")
        for k in ("parallel_batch", "mono_batch", "dev_batch", "pretrain_batch", "hidden", "max_len",
                  "top_k", "eval_every"):
            if getattr(self, k) < 1:
                raise ContractError(f"{k} must be >= 1")
        if self.total_steps < 0 or self.pretrain_steps < 0:
            raise ContractError("step counts must be non-negative")
        if not 0.0 <= self.baseline_decay < 1.0:
            raise ContractError("baseline_decay must lie in [0, 1)")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ContractError("optimizer betas must lie in [0, 1)")
        if self.optimizer not in ("sgd", "adam") or self.backward_optimizer not in ("sgd", "adam"):
            raise ContractError("optimizer must be 'sgd' or 'adam'")
        if self.phase1_mode not in ("sum", "alternate"):
            raise ContractError("phase1_mode must be 'sum' or 'alternate'")
        if self.reward_mode not in ("batch", "sentence"):
            raise ContractError("reward_mode must be 'batch' or 'sentence'")
        if self.reward_grad not in ("raw", "transformed"):
            raise ContractError("reward_grad must be 'raw' or 'transformed'")
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")
        return self


@dataclass(frozen=True)
class GenerationStrategy:
    """How pseudo sources are drawn from the backward model."""

    kind: str                        # "beam" | "sample" | "noisy_beam" | "meta"
    top_k: int = 10
    beam_size: int = 1
    noise: NoiseConfig = NoiseConfig()

    @classmethod
    def beam(cls, beam_size: int = 4) -> "GenerationStrategy":
        return cls("beam", beam_size=beam_size)

    @classmethod
    def sample(cls, top_k: int = 10) -> "GenerationStrategy":
        return cls("sample", top_k=top_k)

    @classmethod
    def noisy_beam(cls, noise: NoiseConfig = NoiseConfig(), beam_size: int = 4) -> "GenerationStrategy":
        return cls("noisy_beam", beam_size=beam_size, noise=noise)

    @classmethod
    def meta(cls, top_k: int = 10) -> "GenerationStrategy":
        return cls("meta", top_k=top_k)

    def __post_init__(self):
        if self.kind not in ("beam", "sample", "noisy_beam", "meta"):
            raise ContractError(f"unknown generation strategy {self.kind!r}")
        if self.top_k < 1 or self.beam_size < 1:
            raise ContractError("top_k and beam_size must be >= 1")

    @property
    def learns_backward(self) -> bool:
        return self.kind == "meta"

    @property
    def name(self) -> str:
        return {"beam": "BeamBT", "sample": "SampleBT", "noisy_beam": "NoisyBeamBT", "meta": "MetaBT"}[self.kind]


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "OptState":
        return cls({k: np.zeros(t.shape) for k, t in params.tensors.items()},
                   {k: np.zeros(t.shape) for k, t in params.tensors.items()}, 0)

    def copy(self) -> "OptState":
        return OptState({k: v.copy() for k, v in self.m.items()}, {k: v.copy() for k, v in self.v.items()}, self.t)


def optimizer_step(params: ModelParams, grads: Mapping[str, np.ndarray], opt: OptState, lr: float,
                   kind: str = "adam", beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> tuple[ModelParams, OptState]:
    """One SGD or bias-corrected Adam step; returns new parameters and moments."""
    if set(grads) != set(params.tensors) or set(opt.m) != set(params.tensors):
        raise ContractError("parameter, gradient and moment key sets differ")
    t = opt.t + 1
    if kind == "sgd":
        new = {k: p.data - lr * grads[k] for k, p in params.tensors.items()}
        return params.with_arrays(new), OptState(opt.m, opt.v, t)
    m = {k: beta1 * opt.m[k] + (1.0 - beta1) * grads[k] for k in opt.m}
    v = {k: beta2 * opt.v[k] + (1.0 - beta2) * grads[k] ** 2 for k in opt.v}
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    new = {k: p.data - lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + eps) for k, p in params.tensors.items()}
    return params.with_arrays(new), OptState(m, v, t)


def precondition(g: Mapping[str, np.ndarray], opt: OptState, kind: str, beta1: float, beta2: float,
                 eps: float) -> GradVector:
    """Linear part of the optimizer update attributable to ``g``, moments held fixed."""
    if kind == "sgd":
        return GradVector({k: np.array(v) for k, v in g.items()})
    c1, c2 = 1.0 - beta1 ** opt.t, 1.0 - beta2 ** opt.t
    return GradVector({k: (1.0 - beta1) * g[k] / c1 / (np.sqrt(opt.v[k] / c2) + eps) for k in g})


# --------------------------------------------------------------------------
# state and logs


@dataclass
class TrainState:
    theta: ModelParams
    psi: ModelParams | None
    opt_theta: OptState
    opt_psi: OptState | None
    step: int = 0
    baseline: float = 0.0
    rngs: dict[str, np.random.Generator] = field(default_factory=dict)
    best_theta: ModelParams | None = None
    best_score: float = -math.inf
    best_step: int = 0
    eval_history: list[dict] = field(default_factory=list)


@dataclass
class StepLog:
    step: int
    pseudo_loss: float
    parallel_loss: float
    dev_loss: float
    reward: float
    centered_reward: float
    baseline: float
    backward_logprob: float
    grad_norm_dev: float
    grad_norm_pseudo: float
    grad_norm_psi: float

    def to_json(self) -> dict:
        return {k: (v if isinstance(v, int) or math.isfinite(v) else None) for k, v in asdict(self).items()}

    @classmethod
    def empty(cls, step: int) -> "StepLog":
        nan = float("nan")
        return cls(step, nan, nan, nan, nan, nan, nan, nan, nan, nan, nan)


@dataclass
class PseudoBatch:
    pairs: list[Pair]                     # (x̂, y)
    logprobs: np.ndarray | None = None    # log P(x̂ | y; ψ) per sentence


def loss_and_grad(params: ModelParams, pairs: Sequence[Pair]) -> tuple[float, GradVector]:
    return ad.value_and_grad(lambda prm: s2s.batch_nll(params.with_tensors(prm), pairs), params.tensors)


def _finite_or_raise(what: str, value: float, log: StepLog | None = None) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"{what} is not finite", log)


# --------------------------------------------------------------------------
# backward-model pre-training


def backward_corpus(splits: DataSplits, union: bool = True) -> list[Pair]:
    """Reversed (target -> source) training pairs for the backward model."""
    pairs = list(splits.parallel_train.pairs)
    if union and splits.high_resource_train is not None:
        pairs += splits.high_resource_train.pairs
    return [(t, s) for s, t in pairs]


def pretrain_backward(splits: DataSplits, hp: Hyperparams, init: ModelParams | None = None,
                      vocab_size: int | None = None, union: bool | None = None,
                      on_eval: Callable[[dict], None] | None = None) -> ModelParams:
    """MLE training of ψ on reversed pairs; returns the best reversed-valid checkpoint."""
    hp.validate()
    union = hp.pretrain_union if union is None else union
    data = backward_corpus(splits, union)
    if not data:
        raise ContractError("no parallel data to pre-train the backward model on")
    valid = splits.valid.reversed().pairs
    if init is None:
        if vocab_size is None:
            raise ContractError("need vocab_size or an initial model")
        init = s2s.init_params(vocab_size, hp.hidden, hp.max_len, substream(hp.seed, "psi-init"))
    rng = substream(hp.seed, "pretrain")
    psi, opt = init, OptState.zeros(init)
    best, best_loss = init, ev.perplexity(init, valid) if hp.pretrain_steps else math.inf
    for step in range(1, hp.pretrain_steps + 1):
        batch = [data[i] for i in rng.integers(0, len(data), hp.pretrain_batch)]
        loss, g = loss_and_grad(psi, batch)
        _finite_or_raise(f"pre-training loss at step {step}", loss)
        if not g.is_finite():
            raise DivergenceError(f"pre-training gradient at step {step} is not finite")
        psi, opt = optimizer_step(psi, g, opt, hp.lr_pretrain, hp.optimizer, hp.beta1, hp.beta2, hp.eps)
        if step % hp.eval_every == 0 or step == hp.pretrain_steps:
            vl = ev.perplexity(psi, valid)
            if on_eval is not None:
                on_eval({"step": step, "train_loss": loss, "valid_ppl": vl})
            if vl < best_loss:
                best, best_loss = psi, vl
    return best


# --------------------------------------------------------------------------
# the two phases


def generate_pseudo_batch(psi: ModelParams, strategy: GenerationStrategy, ys: Sequence[Sentence],
                          rng: np.random.Generator, temperature: float = 1.0) -> PseudoBatch:
    """Pair every target sentence with one generated pseudo source."""
    if strategy.kind in ("sample", "meta"):
        xs, lp = s2s.sample_batch(psi, ys, strategy.top_k, rng, temperature, return_logprob=True)
        return PseudoBatch(list(zip(xs, ys)), lp)
    if strategy.kind == "beam":
        xs = [s2s.beam_search(psi, y, strategy.beam_size) for y in ys]
    else:
        xs = [s2s.noisy_beam_search(psi, y, strategy.beam_size, None, strategy.noise, rng) for y in ys]
    return PseudoBatch(list(zip(xs, ys)))


@dataclass
class Phase1Result:
    theta: ModelParams
    opt: OptState
    g_pseudo: GradVector | None
    theta_pseudo_base: ModelParams      # parameters g_pseudo was taken at
    pseudo_loss: float
    parallel_loss: float


def phase1_forward_update(theta: ModelParams, opt: OptState, pseudo: Sequence[Pair] | None,
                          parallel: Sequence[Pair], hp: Hyperparams) -> Phase1Result:
    """Update θ as if the pseudo pairs were real, alongside a real parallel batch.

    The input ``theta`` is never modified; the result carries the new
    parameters and the pseudo-batch gradient taken at the old ones.
    """
    if not parallel and not pseudo:
        raise ContractError("phase 1 needs at least one non-empty batch")
    opt_args = (hp.optimizer, hp.beta1, hp.beta2, hp.eps)
    par_loss, g_par = loss_and_grad(theta, parallel) if parallel else (float("nan"), None)
    if pseudo is None:
        _check_grad("parallel", par_loss, g_par)
        new, opt = optimizer_step(theta, g_par, opt, hp.lr_forward, *opt_args)
        return Phase1Result(new, opt, None, theta, float("nan"), par_loss)
    if hp.phase1_mode == "alternate" and g_par is not None:
        _check_grad("parallel", par_loss, g_par)
        mid, opt = optimizer_step(theta, g_par.scaled(hp.parallel_weight), opt, hp.lr_forward, *opt_args)
        ps_loss, g_ps = loss_and_grad(mid, pseudo)
        _check_grad("pseudo", ps_loss, g_ps)
        new, opt = optimizer_step(mid, g_ps, opt, hp.lr_forward, *opt_args)
        return Phase1Result(new, opt, g_ps, mid, ps_loss, par_loss)
    ps_loss, g_ps = loss_and_grad(theta, pseudo)
    _check_grad("pseudo", ps_loss, g_ps)
    g = g_ps if g_par is None else g_ps.plus(g_par, hp.parallel_weight)
    if g_par is not None:
        _check_grad("parallel", par_loss, g_par)
    new, opt = optimizer_step(theta, g, opt, hp.lr_forward, *opt_args)
    return Phase1Result(new, opt, g_ps, theta, ps_loss, par_loss)


def _check_grad(what: str, loss: float, g: GradVector) -> None:
    _finite_or_raise(f"{what} loss", loss)
    if not g.is_finite():
        raise DivergenceError(f"{what} gradient is not finite")


@dataclass
class Phase2Result:
    psi: ModelParams
    opt: OptState
    baseline: float
    reward: float
    centered_reward: float
    dev_loss: float
    backward_logprob: float
    grad_norm_dev: float
    grad_norm_psi: float
    g_dev: GradVector


def backward_logprob_grad(psi: ModelParams, pseudo: Sequence[Pair],
                          weights: np.ndarray) -> tuple[float, GradVector]:
    """Gradient of Σ_i w_i log P(x̂_i | y_i; ψ); also returns the mean log-prob."""
    rev = [(y, x) for x, y in pseudo]
    w = ad.constant(weights)
    with ad.Tape() as tape:
        lp = s2s.sequence_logprobs(psi, rev)
        obj = ad.einsum("b,b->", lp, w)
    mean_lp = float(lp.data.mean())
    if not obj.requires_grad:
        return mean_lp, GradVector({k: np.zeros(t.shape) for k, t in psi.tensors.items()})
    return mean_lp, ad.backward(tape, obj, psi.tensors)


def phase2_backward_update(psi: ModelParams, opt_psi: OptState, baseline: float,
                           theta_t: ModelParams, g_pseudo: Mapping[str, np.ndarray],
                           pseudo: PseudoBatch, dev: Sequence[Pair], hp: Hyperparams,
                           theta_prev: ModelParams | None = None,
                           opt_theta: OptState | None = None) -> Phase2Result:
    """REINFORCE-style update of ψ with reward g_dev(θ_t) · g_pseudo(θ_{t-1}).

    In ``sentence`` reward mode every pseudo pair gets its own reward from its
    own gradient at ``theta_prev``; otherwise one batch-level reward scales the
    batch-mean score function.
    """
    dev_loss, g_dev = loss_and_grad(theta_t, dev)
    _check_grad("meta-dev", dev_loss, g_dev)

    def transform(g):
        if hp.reward_grad == "transformed" and opt_theta is not None:
            return precondition(g, opt_theta, hp.optimizer, hp.beta1, hp.beta2, hp.eps)
        return g

    n = len(pseudo.pairs)
    if hp.reward_mode == "sentence":
        if theta_prev is None:
            raise ContractError("sentence-level rewards need the pre-update forward parameters")
        rewards = np.array([ad.grad_dot(g_dev, transform(loss_and_grad(theta_prev, [pair])[1]))
                            for pair in pseudo.pairs])
        reward = float(rewards.mean())
    else:
        reward = ad.grad_dot(g_dev, transform(g_pseudo))
        rewards = np.full(n, reward)
    _finite_or_raise("reward", reward)
    b = baseline if hp.use_baseline else 0.0
    centered = rewards - b
    new_baseline = hp.baseline_decay * baseline + (1.0 - hp.baseline_decay) * reward
    mean_lp, g_psi = backward_logprob_grad(psi, pseudo.pairs, -centered / n)
    if not g_psi.is_finite():
        raise DivergenceError("backward-model gradient is not finite")
    new_psi, new_opt = optimizer_step(psi, g_psi, opt_psi, hp.lr_backward, hp.backward_optimizer,
                                      hp.beta1, hp.beta2, hp.eps)
    return Phase2Result(new_psi, new_opt, new_baseline, reward, float(centered.mean()), dev_loss,
                        mean_lp, g_dev.norm(), g_psi.norm(), g_dev)


# --------------------------------------------------------------------------
# training loop


RNG_LABELS = ("parallel", "mono", "backward-sampling", "meta-dev")


@dataclass
class TrainData:
    parallel: list[Pair]
    mono: list[Sentence]
    meta_dev: list[Pair]
    valid: list[Pair]
    train_eval: list[Pair]


def training_data(splits: DataSplits, strategy: GenerationStrategy | None) -> TrainData:
    """Corpora used by one run; without back-translation the parallel stream
    is the union of low- and high-resource bitext."""
    parallel = list(splits.parallel_train.pairs)
    if strategy is None and splits.high_resource_train is not None:
        parallel += splits.high_resource_train.pairs
    return TrainData(parallel, list(splits.mono_target.sentences), list(splits.meta_dev.pairs),
                     list(splits.valid.pairs), list(splits.parallel_train.pairs[:200]))


def init_state(hp: Hyperparams, vocab_size: int, psi0: ModelParams | None,
               theta0: ModelParams | None = None) -> TrainState:
    theta = theta0 if theta0 is not None else s2s.init_params(vocab_size, hp.hidden, hp.max_len, substream(hp.seed, "theta-init"))
    return TrainState(theta, psi0, OptState.zeros(theta), OptState.zeros(psi0) if psi0 else None,
                      rngs={k: substream(hp.seed, k) for k in RNG_LABELS})


def train_step(state: TrainState, data: TrainData, strategy: GenerationStrategy | None,
               hp: Hyperparams) -> tuple[StepLog, list[Pair] | None]:
    """Advance ``state`` by one step in place; returns the step log and pseudo pairs."""
    t = state.step + 1
    log = StepLog.empty(t)
    r = state.rngs
    parallel = [data.parallel[i] for i in r["parallel"].integers(0, len(data.parallel), hp.parallel_batch)]
    pseudo = None
    if strategy is not None:
        if state.psi is None:
            raise ContractError("back-translation needs a backward model")
        ys = [data.mono[i] for i in r["mono"].integers(0, len(data.mono), hp.mono_batch)]
        pseudo = generate_pseudo_batch(state.psi, strategy, ys, r["backward-sampling"], hp.temperature)
    try:
        p1 = phase1_forward_update(state.theta, state.opt_theta, pseudo.pairs if pseudo else None,
                                   parallel if hp.parallel_weight != 0 or pseudo is None else [], hp)
    except DivergenceError as e:
        e.log = log
        raise
    log.pseudo_loss, log.parallel_loss = p1.pseudo_loss, p1.parallel_loss
    if p1.g_pseudo is not None:
        log.grad_norm_pseudo = p1.g_pseudo.norm()
    if strategy is not None and strategy.learns_backward:
        dev = [data.meta_dev[i] for i in r["meta-dev"].integers(0, len(data.meta_dev), hp.dev_batch)]
        try:
            p2 = phase2_backward_update(state.psi, state.opt_psi, state.baseline, p1.theta, p1.g_pseudo,
                                        pseudo, dev, hp, p1.theta_pseudo_base, p1.opt)
        except DivergenceError as e:
            e.log = log
            raise
        state.psi, state.opt_psi, state.baseline = p2.psi, p2.opt, p2.baseline
        log.dev_loss, log.reward, log.centered_reward = p2.dev_loss, p2.reward, p2.centered_reward
        log.backward_logprob, log.grad_norm_dev, log.grad_norm_psi = (p2.backward_logprob,
                                                                      p2.grad_norm_dev, p2.grad_norm_psi)
    elif pseudo is not None and pseudo.logprobs is not None:
        log.backward_logprob = float(pseudo.logprobs.mean())
    log.baseline = state.baseline
    state.theta, state.opt_theta, state.step = p1.theta, p1.opt, t
    return log, pseudo.pairs if pseudo else None


def evaluate_state(state: TrainState, data: TrainData) -> dict:
    rep, _ = ev.evaluate_bleu(state.theta, data.valid)
    return {"step": state.step, "valid_bleu": rep.bleu,
            "valid_ppl": ev.perplexity(state.theta, data.valid),
            "train_ppl": ev.perplexity(state.theta, data.train_eval)}


def _record_eval(state: TrainState, data: TrainData) -> dict:
    rec = evaluate_state(state, data)
    state.eval_history.append(rec)
    if rec["valid_bleu"] > state.best_score:
        state.best_theta, state.best_score, state.best_step = state.theta, rec["valid_bleu"], state.step
    return rec


@dataclass
class TrainResult:
    theta: ModelParams            # best-valid checkpoint
    final_theta: ModelParams
    psi: ModelParams | None
    logs: list[StepLog]
    eval_history: list[dict]
    pseudo_sources: list[tuple[int, list[Sentence]]]
    snapshots: dict[int, ModelParams]
    state: TrainState


def train(splits: DataSplits, strategy: GenerationStrategy | None, hp: Hyperparams,
          psi0: ModelParams | None = None, vocab_size: int | None = None,
          state: TrainState | None = None,
          on_step: Callable[[StepLog, list[Pair] | None], None] | None = None,
          on_eval: Callable[[dict, TrainState], None] | None = None,
          on_checkpoint: Callable[[TrainState], None] | None = None,
          checkpoint_every: int = 0, stop_after: int | None = None,
          keep_logs: bool = True) -> TrainResult:
    """Run (or continue) the alternating loop for ``hp.total_steps`` steps.

    ``strategy=None`` trains on parallel data only. Snapshots of θ are kept at
    every evaluation, keyed by the next step whose pseudo batch they score.
    """
    hp.validate()
    data = training_data(splits, strategy)
    if state is None:
        if vocab_size is None:
            vocab_size = psi0.vocab_size if psi0 is not None else None
        if vocab_size is None:
            raise ContractError("need vocab_size when no backward model is given")
        state = init_state(hp, vocab_size, psi0)
    logs: list[StepLog] = []
    pseudo_log: list[tuple[int, list[Sentence]]] = []
    snapshots: dict[int, ModelParams] = {}
    if state.step == 0 and not state.eval_history:
        rec = _record_eval(state, data)
        snapshots[1] = state.theta
        if on_eval:
            on_eval(rec, state)
    end = hp.total_steps if stop_after is None else min(hp.total_steps, stop_after)
    while state.step < end:
        log, pseudo = train_step(state, data, strategy, hp)
        if keep_logs:
            logs.append(log)
            if pseudo is not None:
                pseudo_log.append((log.step, [x for x, _ in pseudo]))
        if on_step:
            on_step(log, pseudo)
        if state.step % hp.eval_every == 0 or state.step == hp.total_steps:
            rec = _record_eval(state, data)
            snapshots[state.step + 1] = state.theta
            if on_eval:
                on_eval(rec, state)
        if on_checkpoint and checkpoint_every and state.step % checkpoint_every == 0:
            on_checkpoint(state)
    return TrainResult(state.best_theta or state.theta, state.theta, state.psi, logs,
                       list(state.eval_history), pseudo_log, snapshots, state)


# --------------------------------------------------------------------------
# persistence


def _params_meta(p: ModelParams) -> dict:
    return {"vocab_size": p.vocab_size, "hidden": p.hidden, "max_len": p.max_len}


def save_params(path: str, params: ModelParams) -> None:
    arrays = {f"params/{k}": v for k, v in params.arrays().items()}
    arrays["meta"] = np.array(json.dumps(_params_meta(params)))
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_params(path: str) -> ModelParams:
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        arrays = {k.split("/", 1)[1]: z[k] for k in z.files if k.startswith("params/")}
    return _build(arrays, meta)


def _build(arrays: Mapping[str, np.ndarray], meta: Mapping) -> ModelParams:
    return ModelParams({k: ad.Tensor(v, requires_grad=True) for k, v in arrays.items()},
                       meta["vocab_size"], meta["hidden"], meta["max_len"])


def save_state(path: str, state: TrainState) -> None:
    """Checkpoint with parameters, moments, baseline, step counter and rng states."""
    arrays: dict[str, np.ndarray] = {}
    models = {"theta": state.theta, "psi": state.psi, "best_theta": state.best_theta}
    for name, p in models.items():
        if p is not None:
            for k, v in p.arrays().items():
                arrays[f"{name}/{k}"] = v
    opts = {"opt_theta": state.opt_theta, "opt_psi": state.opt_psi}
    for name, o in opts.items():
        if o is not None:
            for k in o.m:
                arrays[f"{name}/m/{k}"] = o.m[k]
                arrays[f"{name}/v/{k}"] = o.v[k]
    meta = {
        "step": state.step, "baseline": state.baseline,
        "best_score": state.best_score if math.isfinite(state.best_score) else None,
        "best_step": state.best_step, "eval_history": state.eval_history,
        "models": {k: _params_meta(p) for k, p in models.items() if p is not None},
        "opt_t": {k: o.t for k, o in opts.items() if o is not None},
        "rngs": {k: g.bit_generator.state for k, g in state.rngs.items()},
    }
    arrays["meta"] = np.array(json.dumps(meta))
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_state(path: str) -> TrainState:
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        data = {k: z[k] for k in z.files if k != "meta"}

    def group(prefix):
        return {k[len(prefix):]: v for k, v in data.items() if k.startswith(prefix)}

    models = {name: _build(group(f"{name}/"), m) for name, m in meta["models"].items()}
    opts = {name: OptState(group(f"{name}/m/"), group(f"{name}/v/"), t) for name, t in meta["opt_t"].items()}
    rngs = {}
    for k, st in meta["rngs"].items():
        g = np.random.default_rng()
        g.bit_generator.state = st
        rngs[k] = g
    best = meta["best_score"]
    return TrainState(models["theta"], models.get("psi"), opts["opt_theta"], opts.get("opt_psi"),
                      meta["step"], meta["baseline"], rngs, models.get("best_theta"),
                      -math.inf if best is None else best, meta["best_step"], meta["eval_history"])
