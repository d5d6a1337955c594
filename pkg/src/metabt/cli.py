"""Command-line driver: make-data | pretrain | train | evaluate | analyze.

Every subcommand reads the same flat config, writes below ``--out`` and
records what it produced in ``manifest.json``. Exit status is 0 on success,
2 for invalid input (config, missing files, vocabulary mismatch) and 3 when
training diverges.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
import zlib
from typing import Sequence

import numpy as np

from . import datasynth as ds
from . import evalanalysis as ev
from . import metatrain as mt
from . import seq2seq as s2s
from .autodiff import ContractError
from .config import ConfigError, ExperimentConfig

log = logging.getLogger("metabt")

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3


# --------------------------------------------------------------------------
# shared pieces (also used by tests and scripts)


def derived_seed(seed: int, label: str) -> int:
    ss = np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(label.encode()),))
    return int(ss.generate_state(1)[0])


def build_tasks(cfg: ExperimentConfig) -> tuple[ds.TaskSpec, ds.TaskSpec | None]:
    task = ds.make_task(derived_seed(cfg.seed, "task"), cfg.vocab_size, cfg.vocab_size, cfg.window,
                        (cfg.min_length, cfg.max_length), zipf=cfg.zipf, name="low")
    related = None
    if cfg.related:
        related = ds.make_related_task(task, cfg.overlap, derived_seed(cfg.seed, "related-task"), name="high")
    return task, related


def build_splits(cfg: ExperimentConfig) -> tuple[ds.DataSplits, ds.TaskSpec, ds.TaskSpec | None]:
    task, related = build_tasks(cfg)
    splits = ds.make_splits(task, cfg.split_sizes(), mt.substream(cfg.seed, "data"), related=related,
                            related_size=cfg.high_resource_train if related else 0,
                            mono_from_related=cfg.mono_target == 0)
    return splits, task, related


class RunDir:
    """Paths of one experiment directory."""

    def __init__(self, root: str):
        self.root = root
        self.data = os.path.join(root, "data")
        self.pretrain = os.path.join(root, "pretrain")
        self.train = os.path.join(root, "train")
        self.evaluate = os.path.join(root, "evaluate")
        self.analysis = os.path.join(root, "analysis")
        self.psi = os.path.join(self.pretrain, "psi.npz")
        self.state = os.path.join(self.train, "state.npz")
        self.steplog = os.path.join(self.train, "steplog.jsonl")
        self.pseudo = os.path.join(self.train, "pseudo.jsonl")
        self.evals = os.path.join(self.train, "eval.jsonl")
        self.snapshots = os.path.join(self.train, "snapshots")
        self.best = os.path.join(self.train, "best_theta.npz")
        self.final = os.path.join(self.train, "final_theta.npz")
        self.psi_final = os.path.join(self.train, "psi_final.npz")
        self.test_outputs = os.path.join(self.train, "test_outputs.txt")
        self.manifest = os.path.join(root, "manifest.json")

    def rel(self, path: str) -> str:
        return os.path.relpath(path, self.root)


def _read_manifest(run: RunDir) -> dict:
    if os.path.exists(run.manifest):
        with open(run.manifest) as f:
            return json.load(f)
    return {"commands": {}}


def _write_manifest(run: RunDir, cfg: ExperimentConfig, command: str, paths: Sequence[str],
                    started: float, status: str) -> None:
    man = _read_manifest(run)
    man["config_hash"] = cfg.digest()
    man["seed"] = cfg.seed
    man["commands"][command] = {
        "status": status,
        "wall_clock_seconds": round(time.time() - started, 3),
        "artifacts": sorted(run.rel(p) for p in paths if os.path.exists(p)),
    }
    tmp = run.manifest + ".tmp"
    with open(tmp, "w") as f:
        json.dump(man, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, run.manifest)


def _write_json(path: str, obj) -> str:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence]) -> str:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else "nan"
    return str(v)


def _read_jsonl(path: str) -> list[dict]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing log stream {path}")
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def _truncate_jsonl(path: str, max_step: int) -> None:
    """Drop records written after the checkpoint a run resumes from."""
    if not os.path.exists(path):
        return
    keep = [r for r in _read_jsonl(path) if r["step"] <= max_step]
    with open(path, "w") as f:
        for r in keep:
            f.write(json.dumps(r) + "\n")


def _load_data(run: RunDir):
    if not os.path.isdir(run.data):
        raise FileNotFoundError(f"no corpora under {run.data}; run make-data first")
    return ds.read_splits(run.data)


def _check_vocab(params: s2s.ModelParams, cfg: ExperimentConfig, what: str) -> None:
    if params.vocab_size != cfg.model_vocab:
        raise ContractError(f"{what} has vocabulary {params.vocab_size}, the corpora need {cfg.model_vocab}")


def _sent(s: Sequence[int]) -> list[int]:
    return list(s2s.content_of(tuple(s)))


# --------------------------------------------------------------------------
# subcommands


def cmd_make_data(cfg: ExperimentConfig, run: RunDir, args) -> list[str]:
    splits, task, related = build_splits(cfg)
    return ds.write_splits(run.data, splits, task, related)


def cmd_pretrain(cfg: ExperimentConfig, run: RunDir, args) -> list[str]:
    splits, _, _ = _load_data(run)
    os.makedirs(run.pretrain, exist_ok=True)
    hp = cfg.hyperparams()
    evals = []
    psi = mt.pretrain_backward(splits, hp, vocab_size=cfg.model_vocab, on_eval=evals.append)
    mt.save_params(run.psi, psi)
    path = os.path.join(run.pretrain, "eval.jsonl")
    with open(path, "w") as f:
        for r in evals:
            f.write(json.dumps(r) + "\n")
    return [run.psi, path]


def cmd_train(cfg: ExperimentConfig, run: RunDir, args) -> list[str]:
    splits, task, _ = _load_data(run)
    strategy = cfg.generation_strategy()
    hp = cfg.hyperparams()
    psi0 = None
    if strategy is not None:
        if not os.path.exists(run.psi):
            raise FileNotFoundError(f"missing backward model {run.psi}; run pretrain first")
        psi0 = mt.load_params(run.psi)
        _check_vocab(psi0, cfg, "backward model")
    os.makedirs(run.snapshots, exist_ok=True)

    state = None
    if os.path.exists(run.state):
        man = _read_manifest(run)
        if man.get("train_config_hash") not in (None, cfg.digest()):
            raise ConfigError(f"{run.state} was written with a different config; use a fresh --out")
        state = mt.load_state(run.state)
        log.info("resuming from step %d", state.step)
        for p in (run.steplog, run.pseudo, run.evals):
            _truncate_jsonl(p, state.step)
    else:
        for p in (run.steplog, run.pseudo, run.evals, run.psi_final):
            if os.path.exists(p):
                os.remove(p)
    man = _read_manifest(run)
    man["train_config_hash"] = cfg.digest()
    man.setdefault("commands", {})
    _write_json(run.manifest, man)

    steplog = open(run.steplog, "a")
    pseudo_f = open(run.pseudo if strategy is not None else os.devnull, "a")
    eval_f = open(run.evals, "a")

    def on_step(entry: mt.StepLog, pseudo):
        steplog.write(json.dumps(entry.to_json()) + "\n")
        if pseudo is not None:
            pseudo_f.write(json.dumps({"step": entry.step, "sources": [_sent(x) for x, _ in pseudo],
                                       "targets": [_sent(y) for _, y in pseudo]}) + "\n")

    def on_eval(rec: dict, st: mt.TrainState):
        eval_f.write(json.dumps(rec) + "\n")
        eval_f.flush()
        mt.save_params(os.path.join(run.snapshots, f"theta_{st.step + 1:07d}.npz"), st.theta)
        log.info("step %d valid BLEU %.2f valid PPL %.3f", rec["step"], rec["valid_bleu"], rec["valid_ppl"])

    def on_checkpoint(st: mt.TrainState):
        steplog.flush()
        pseudo_f.flush()
        eval_f.flush()
        mt.save_state(run.state, st)

    try:
        result = mt.train(splits, strategy, hp, psi0=psi0, vocab_size=cfg.model_vocab, state=state,
                          on_step=on_step, on_eval=on_eval, on_checkpoint=on_checkpoint,
                          checkpoint_every=cfg.checkpoint_every, stop_after=args.stop_after, keep_logs=False)
    except mt.DivergenceError as e:
        if e.log is not None:
            steplog.write(json.dumps(e.log.to_json()) + "\n")
        raise
    finally:
        steplog.close()
        pseudo_f.close()
        eval_f.close()
    mt.save_state(run.state, result.state)
    paths = [run.state, run.steplog, run.evals, run.snapshots]
    if strategy is not None:
        paths.append(run.pseudo)
    if result.state.step < hp.total_steps:
        log.info("stopped at step %d of %d", result.state.step, hp.total_steps)
        return paths
    mt.save_params(run.best, result.theta)
    mt.save_params(run.final, result.final_theta)
    if result.psi is not None:
        mt.save_params(run.psi_final, result.psi)
        paths.append(run.psi_final)
    hyps = ev.translate_corpus(result.theta, splits.test.sources)
    with open(run.test_outputs, "w") as f:
        for h in hyps:
            f.write(" ".join(str(t) for t in s2s.content_of(h)) + "\n")
    return paths + [run.best, run.final, run.test_outputs]


def cmd_evaluate(cfg: ExperimentConfig, run: RunDir, args) -> list[str]:
    splits, task, _ = _load_data(run)
    named = splits.named()
    if args.split not in named or isinstance(named[args.split], ds.MonoCorpus):
        raise ContractError(f"cannot evaluate on split {args.split!r}")
    pairs = named[args.split].pairs
    os.makedirs(run.evaluate, exist_ok=True)
    if args.oracle:
        hyps = [ds.translate(task, s) for s, _ in pairs]
        report = {"split": args.split, "model": "oracle",
                  "bleu": ev.corpus_bleu([ev.strip_special(h) for h in hyps],
                                         [ev.strip_special(t) for _, t in pairs]).to_json()}
        name = f"{args.split}_oracle"
    else:
        ckpt = args.checkpoint or run.best
        if not os.path.exists(ckpt):
            raise FileNotFoundError(f"missing checkpoint {ckpt}")
        theta = mt.load_params(ckpt)
        for s, t in pairs:
            if max(s + t) >= theta.vocab_size:
                raise ContractError(f"checkpoint vocabulary {theta.vocab_size} does not cover split {args.split}")
        rep, hyps = ev.evaluate_bleu(theta, pairs)
        report = {"split": args.split, "model": os.path.abspath(ckpt), "bleu": rep.to_json(),
                  "perplexity": ev.perplexity(theta, pairs)}
        name = args.split
    out = os.path.join(run.evaluate, f"{name}.json")
    hyp_path = os.path.join(run.evaluate, f"{name}.hyp")
    _write_json(out, report)
    with open(hyp_path, "w") as f:
        for h in hyps:
            f.write(" ".join(str(t) for t in s2s.content_of(h)) + "\n")
    print(json.dumps(report["bleu"]["bleu"]))
    return [out, hyp_path]


def _read_outputs(path: str) -> list[s2s.Sentence]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing test outputs {path}")
    with open(path) as f:
        return [s2s.make_sentence(int(t) for t in line.split()) for line in f.read().splitlines()]


def cmd_analyze(cfg: ExperimentConfig, run: RunDir, args) -> list[str]:
    from . import plotting

    splits, task, related = _load_data(run)
    steps = _read_jsonl(run.steplog)
    evals = _read_jsonl(run.evals)
    outputs = _read_outputs(run.test_outputs)
    os.makedirs(run.analysis, exist_ok=True)
    A = run.analysis
    paths = []

    # training curves
    rows = [(r["step"], r["train_ppl"], r["valid_ppl"], r["valid_bleu"]) for r in evals]
    paths.append(_write_csv(os.path.join(A, "training_curves.csv"),
                            ["step", "train_ppl", "valid_ppl", "valid_bleu"], rows))
    plotting.line_plot(os.path.join(A, "training_curves.png"), [r[0] for r in rows],
                       {"train PPL": [r[1] for r in rows]}, "step", "perplexity",
                       "Training PPL and validation BLEU", secondary={"valid BLEU": [r[3] for r in rows]},
                       secondary_label="BLEU")
    paths.append(os.path.join(A, "training_curves.png"))

    # reward trace
    rows = [(r["step"], r["reward"], r["centered_reward"], r["baseline"], r["dev_loss"], r["pseudo_loss"],
             r["parallel_loss"]) for r in steps]
    paths.append(_write_csv(os.path.join(A, "step_trace.csv"),
                            ["step", "reward", "centered_reward", "baseline", "dev_loss", "pseudo_loss",
                             "parallel_loss"], [[_nan(v) for v in r] for r in rows]))
    plotting.line_plot(os.path.join(A, "step_trace.png"), [r[0] for r in rows],
                       {"pseudo loss": [_nan(r[5]) for r in rows], "parallel loss": [_nan(r[6]) for r in rows],
                        "meta-dev loss": [_nan(r[4]) for r in rows]}, "step", "loss", "Per-step losses and reward",
                       secondary={"reward - baseline": [_nan(r[2]) for r in rows]}, secondary_label="centred reward")
    paths.append(os.path.join(A, "step_trace.png"))

    # length differences on the test set
    refs = splits.test.targets
    if len(outputs) != len(refs):
        raise ContractError(f"{run.test_outputs} has {len(outputs)} lines, the test split {len(refs)}")
    hist = ev.length_diff_histogram(outputs, refs)
    rows = list(hist.counts.items())
    paths.append(_write_csv(os.path.join(A, "length_diff.csv"), ["ref_minus_output", "count"], rows))
    plotting.bar_plot(os.path.join(A, "length_diff.png"), [str(d) for d, _ in rows], [c for _, c in rows],
                      "reference length - output length", "sentences", "Length differences on test")
    paths.append(os.path.join(A, "length_diff.png"))

    # word F1 by training frequency
    freq_corpus = (splits.high_resource_train or splits.parallel_train).targets
    f1 = ev.word_f1_buckets(outputs, refs, freq_corpus)
    rows = [(lo, hi, n, v) for lo, hi, n, v in zip(f1.edges, f1.edges[1:], f1.n_words, f1.f1)]
    paths.append(_write_csv(os.path.join(A, "word_f1.csv"), ["freq_from", "freq_below", "n_words", "f1"], rows))
    plotting.bar_plot(os.path.join(A, "word_f1.png"), [f"[{_fmt_edge(a)},{_fmt_edge(b)})" for a, b, _, _ in rows],
                      [r[3] for r in rows], "training frequency", "word F1", "Word F1 by frequency bucket")
    paths.append(os.path.join(A, "word_f1.png"))

    # pseudo-data analyses exist only for back-translation runs
    if os.path.exists(run.pseudo):
        pseudo = _read_jsonl(run.pseudo)
        log_sources = [(r["step"], [s2s.make_sentence(x) for x in r["sources"]]) for r in pseudo]
        cov = ev.coverage_curve(log_sources, task.source_ids)
        crow = [(r["decile"], r["first_step"], r["last_step"], r["coverage_pct"], r["low_resource_tokens"],
                 r["content_tokens"]) for r in cov.rows()]
        paths.append(_write_csv(os.path.join(A, "coverage.csv"),
                                ["decile", "first_step", "last_step", "coverage_pct", "low_resource_tokens",
                                 "content_tokens"], crow))
        plotting.line_plot(os.path.join(A, "coverage.png"), [r[0] for r in crow], {"coverage": [r[3] for r in crow]},
                           "training decile", "% low-resource tokens", "Pseudo-source vocabulary coverage")
        paths.append(os.path.join(A, "coverage.png"))

        snaps = {}
        for name in sorted(os.listdir(run.snapshots)):
            step = int(name.split("_")[1].split(".")[0])
            snaps[step] = os.path.join(run.snapshots, name)
        by_step = {r["step"]: r for r in pseudo}
        common = sorted(set(snaps) & set(by_step))
        if common:
            track = ev.pseudo_prob_track(
                {s: mt.load_params(snaps[s]) for s in common},
                {s: [(s2s.make_sentence(x), s2s.make_sentence(y)) for x, y in
                     zip(by_step[s]["sources"], by_step[s]["targets"])] for s in common})
            paths.append(_write_csv(os.path.join(A, "pseudo_prob.csv"), ["step", "mean_token_logprob"], track))
            plotting.line_plot(os.path.join(A, "pseudo_prob.png"), [s for s, _ in track],
                               {"log P(y | x̂)": [v for _, v in track]}, "step", "mean token log-prob",
                               "Forward-model probability of pseudo-parallel data")
            paths.append(os.path.join(A, "pseudo_prob.png"))

    if args.baseline:
        other = RunDir(args.baseline)
        theirs = _read_outputs(other.test_outputs)
        refs_c = [ev.strip_special(t) for t in refs]
        mine_c = [ev.strip_special(h) for h in outputs]
        theirs_c = [ev.strip_special(h) for h in theirs]
        p = ev.paired_bootstrap(mine_c, theirs_c, refs_c, cfg.bootstrap_resamples,
                                mt.substream(cfg.seed, "bootstrap"))
        row = [(ev.corpus_bleu(mine_c, refs_c).bleu, ev.corpus_bleu(theirs_c, refs_c).bleu, p,
                cfg.bootstrap_resamples)]
        paths.append(_write_csv(os.path.join(A, "significance.csv"),
                                ["bleu_this_run", "bleu_baseline", "p_value", "resamples"], row))
    return paths


def _nan(v):
    return float("nan") if v is None else v


def _fmt_edge(x: float) -> str:
    return "inf" if math.isinf(x) else str(int(x))


COMMANDS = {
    "make-data": cmd_make_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metabt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="flat TOML experiment config")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            p.add_argument("--stop-after", type=int, default=None,
                           help="checkpoint and stop once this many steps are done")
        if name == "evaluate":
            p.add_argument("--checkpoint", default=None, help="parameters to evaluate (default: best θ)")
            p.add_argument("--split", default="test")
            p.add_argument("--oracle", action="store_true", help="score the ground-truth translator")
        if name == "analyze":
            p.add_argument("--baseline", default=None,
                           help="another run directory to test this run's outputs against")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
    except ContractError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    run = RunDir(args.out)
    started = time.time()
    if args.command != "make-data" and not os.path.isdir(run.data):
        print(f"error: no corpora under {run.data}; run make-data first", file=sys.stderr)
        return EXIT_INVALID
    try:
        os.makedirs(run.root, exist_ok=True)
        paths = COMMANDS[args.command](cfg, run, args)
    except mt.DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        if e.log is not None:
            print(json.dumps(e.log.to_json()), file=sys.stderr)
        _write_manifest(run, cfg, args.command, [], started, "diverged")
        return EXIT_DIVERGED
    except (ContractError, ds.CapacityError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    cfg_path = os.path.join(run.root, "config.toml")
    with open(cfg_path, "w") as f:
        f.write(cfg.to_toml())
    _write_manifest(run, cfg, args.command, paths + [cfg_path], started, "complete")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
