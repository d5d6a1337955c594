"""Synthetic translation tasks with a known, invertible ground truth.

A task translates a source sentence by substituting every token through a
fixed injective map and then permuting each complete window of ``window``
consecutive tokens with a fixed permutation. A trailing partial window is
left in place.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .autodiff import ContractError
from .seq2seq import FIRST_CONTENT, Pair, Sentence, content_of, make_sentence

SPLIT_NAMES = ("parallel_train", "meta_dev", "valid", "test", "mono_target")


class CapacityError(ValueError):
    """The sentence space is too small for the requested disjoint splits."""


@dataclass(frozen=True)
class TaskSpec:
    seed: int
    source_vocab: int
    target_vocab: int
    source_ids: tuple[int, ...]
    token_map: tuple[int, ...]      # aligned with source_ids
    window: int
    perm: tuple[int, ...]
    min_len: int
    max_len: int
    weights: tuple[float, ...]      # unigram distribution over source_ids
    name: str = "task"

    def __post_init__(self):
        if len(self.token_map) != len(self.source_ids) or len(set(self.token_map)) != len(self.token_map):
            raise ContractError("token_map must be injective over the source ids")
        if sorted(self.perm) != list(range(self.window)):
            raise ContractError("perm must be a permutation of range(window)")
        if abs(math.fsum(self.weights) - 1.0) > 1e-12:
            raise ContractError("unigram weights must sum to 1")
        if not 0 <= self.min_len <= self.max_len:
            raise ContractError("invalid length range")

    @property
    def mapping(self) -> dict[int, int]:
        return dict(zip(self.source_ids, self.token_map))

    @property
    def inverse(self) -> dict[int, int]:
        return dict(zip(self.token_map, self.source_ids))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: Mapping) -> "TaskSpec":
        d = dict(d)
        for k in ("source_ids", "token_map", "perm", "weights"):
            d[k] = tuple(d[k])
        return cls(**d)


def _permute_windows(toks: Sequence[int], perm: Sequence[int]) -> list[int]:
    w = len(perm)
    out = list(toks)
    for start in range(0, len(toks) - w + 1, w):
        for j, k in enumerate(perm):
            out[start + j] = toks[start + k]
    return out


def translate(task: TaskSpec, src: Sentence) -> Sentence:
    m = task.mapping
    return make_sentence(_permute_windows([m[t] for t in content_of(src)], task.perm))


def inverse_translate(task: TaskSpec, tgt: Sentence) -> Sentence:
    inv_perm = [0] * task.window
    for j, k in enumerate(task.perm):
        inv_perm[k] = j
    inv = task.inverse
    return make_sentence(inv[t] for t in _permute_windows(list(content_of(tgt)), inv_perm))


def zipf_weights(n: int, exponent: float, rng: np.random.Generator) -> np.ndarray:
    ranks = rng.permutation(n) + 1
    w = 1.0 / ranks.astype(np.float64) ** exponent
    return w / math.fsum(w)


def make_task(seed: int, source_vocab: int, target_vocab: int, window: int,
              length_range: tuple[int, int], zipf: float = 1.0, name: str = "task") -> TaskSpec:
    if source_vocab <= FIRST_CONTENT or target_vocab <= FIRST_CONTENT:
        raise ContractError("vocabularies need room for PAD/BOS/EOS plus content ids")
    if target_vocab < source_vocab:
        raise ContractError("target_vocab must be >= source_vocab")
    if window < 1:
        raise ContractError("window must be >= 1")
    rng = np.random.default_rng(seed)
    src_ids = tuple(range(FIRST_CONTENT, source_vocab))
    tgt_pool = np.arange(FIRST_CONTENT, target_vocab)
    tmap = tuple(int(t) for t in rng.choice(tgt_pool, len(src_ids), replace=False))
    perm = tuple(range(window))
    while window > 1 and perm == tuple(range(window)):
        perm = tuple(int(i) for i in rng.permutation(window))
    weights = zipf_weights(len(src_ids), zipf, rng)
    lo, hi = length_range
    return TaskSpec(seed, source_vocab, target_vocab, src_ids, tmap, window, perm,
                    int(lo), int(hi), tuple(float(x) for x in weights), name)


def make_related_task(base: TaskSpec, overlap: float, seed: int, name: str = "related") -> TaskSpec:
    """A task sharing ``round(overlap * n)`` map entries with ``base``.

    The remaining base entries are re-keyed onto fresh source ids placed just
    above ``base.source_vocab``; the target side and reorder rule are shared.
    """
    if not 0.0 <= overlap <= 1.0:
        raise ContractError(f"overlap must lie in [0, 1], got {overlap}")
    rng = np.random.default_rng(seed)
    n = len(base.source_ids)
    k = int(math.floor(overlap * n + 0.5))
    chosen = rng.choice(n, k, replace=False) if k else np.zeros(0, dtype=int)
    shared = set(int(i) for i in chosen)
    moved = [i for i in range(n) if i not in shared]
    new_id = {i: base.source_vocab + j for j, i in enumerate(moved)}
    entries = []
    for i in range(n):
        sid = base.source_ids[i] if i in shared else new_id[i]
        entries.append((sid, base.token_map[i], base.weights[i]))
    entries.sort()
    w = np.array([e[2] for e in entries])
    w = w / math.fsum(w)
    return TaskSpec(seed, base.source_vocab + len(moved), base.target_vocab,
                    tuple(e[0] for e in entries), tuple(e[1] for e in entries),
                    base.window, base.perm, base.min_len, base.max_len,
                    tuple(float(x) for x in w), name)


def shared_entries(a: TaskSpec, b: TaskSpec) -> int:
    ma = a.mapping
    return sum(1 for s, t in b.mapping.items() if ma.get(s) == t)


# --------------------------------------------------------------------------
# corpora


@dataclass
class Bitext:
    pairs: list[Pair]
    tag: str = ""

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def sources(self) -> list[Sentence]:
        return [s for s, _ in self.pairs]

    @property
    def targets(self) -> list[Sentence]:
        return [t for _, t in self.pairs]

    def reversed(self) -> "Bitext":
        return Bitext([(t, s) for s, t in self.pairs], self.tag + ":reversed")


@dataclass
class MonoCorpus:
    sentences: list[Sentence]
    tag: str = ""

    def __len__(self) -> int:
        return len(self.sentences)


@dataclass
class DataSplits:
    parallel_train: Bitext
    meta_dev: Bitext
    valid: Bitext
    test: Bitext
    mono_target: MonoCorpus
    high_resource_train: Bitext | None = None

    def named(self) -> dict[str, Bitext | MonoCorpus]:
        d = {k: getattr(self, k) for k in SPLIT_NAMES}
        if self.high_resource_train is not None:
            d["high_resource_train"] = self.high_resource_train
        return d


def sample_source(task: TaskSpec, rng: np.random.Generator) -> Sentence:
    n = int(rng.integers(task.min_len, task.max_len + 1))
    ids = np.asarray(task.source_ids)
    return make_sentence(ids[rng.choice(len(ids), size=n, p=np.asarray(task.weights))])


def generate_bitext(task: TaskSpec, n: int, rng: np.random.Generator, tag: str = "") -> Bitext:
    if n < 1:
        raise ContractError("n must be >= 1")
    pairs = []
    for _ in range(n):
        src = sample_source(task, rng)
        pairs.append((src, translate(task, src)))
    return Bitext(pairs, tag or task.name)


def generate_mono(task: TaskSpec, n: int, rng: np.random.Generator, tag: str = "") -> MonoCorpus:
    return MonoCorpus(generate_bitext(task, n, rng).targets, tag or task.name + ":mono")


def sentence_space(task: TaskSpec) -> int:
    n = len(task.source_ids)
    return sum(n ** L for L in range(task.min_len, task.max_len + 1))


def _draw_disjoint(task: TaskSpec, n: int, used: set, rng: np.random.Generator) -> list[Pair]:
    out: list[Pair] = []
    attempts = 0
    limit = 50 * n + 10_000
    while len(out) < n:
        if attempts >= limit:
            raise CapacityError(f"could not draw {n} unseen sentences from {task.name} "
                                f"after {limit} attempts")
        attempts += 1
        src = sample_source(task, rng)
        tgt = translate(task, src)
        if tgt in used:
            continue
        used.add(tgt)
        out.append((src, tgt))
    return out


def make_splits(task: TaskSpec, sizes: Mapping[str, int], rng: np.random.Generator,
                related: TaskSpec | None = None, related_size: int = 0,
                mono_from_related: bool = True) -> DataSplits:
    """Disjoint splits; no target sentence appears in two splits.

    With a related task, ``high_resource_train`` holds ``related_size`` pairs
    from it and, when ``mono_from_related``, the monolingual corpus is its
    target side.
    """
    for k in SPLIT_NAMES:
        if sizes.get(k, 0) < 1 and not (k == "mono_target" and related is not None and mono_from_related):
            raise ContractError(f"split size for {k} must be >= 1")
    if related is not None and related_size < 1:
        raise ContractError("related_size must be >= 1 when a related task is given")
    wanted = sum(sizes.get(k, 0) for k in SPLIT_NAMES if k != "mono_target")
    own_mono = related is None or not mono_from_related
    if own_mono:
        wanted += sizes["mono_target"]
    capacity = sentence_space(task)
    if wanted > capacity:
        raise CapacityError(f"requested {wanted} distinct sentences but the task has only {capacity}")
    used: set = set()
    made = {}
    for k in ("test", "valid", "meta_dev", "parallel_train"):
        made[k] = Bitext(_draw_disjoint(task, sizes[k], used, rng), f"{task.name}:{k}")
    high = None
    if related is not None:
        high = Bitext(_draw_disjoint(related, related_size, used, rng), f"{related.name}:high_resource_train")
    if own_mono:
        mono = MonoCorpus([t for _, t in _draw_disjoint(task, sizes["mono_target"], used, rng)],
                          f"{task.name}:mono_target")
    else:
        mono = MonoCorpus(high.targets, f"{related.name}:mono_target")
    splits = DataSplits(made["parallel_train"], made["meta_dev"], made["valid"], made["test"], mono, high)
    check_disjoint(splits)
    return splits


def check_disjoint(splits: DataSplits) -> None:
    sets = {}
    for k in SPLIT_NAMES:
        c = getattr(splits, k)
        sets[k] = set(c.sentences) if isinstance(c, MonoCorpus) else set(c.pairs)
    targets = {k: set(getattr(splits, k).targets) for k in SPLIT_NAMES if k != "mono_target"}
    targets["mono_target"] = sets["mono_target"]
    names = list(SPLIT_NAMES)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            if sets[a] & sets[b] or targets[a] & targets[b]:
                raise ContractError(f"splits {a} and {b} overlap")


# --------------------------------------------------------------------------
# serialisation: one sentence per line, space-separated content ids


def _write_lines(path: str, sents: Iterable[Sentence]) -> None:
    with open(path, "w") as f:
        for s in sents:
            f.write(" ".join(str(t) for t in content_of(s)) + "\n")


def _read_lines(path: str) -> list[Sentence]:
    with open(path) as f:
        return [make_sentence(int(t) for t in line.split()) for line in f.read().splitlines()]


def write_corpus(directory: str, name: str, corpus: Bitext | MonoCorpus, task: TaskSpec) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    if isinstance(corpus, Bitext):
        _write_lines(os.path.join(directory, f"{name}.src"), corpus.sources)
        _write_lines(os.path.join(directory, f"{name}.tgt"), corpus.targets)
        paths += [os.path.join(directory, f"{name}.src"), os.path.join(directory, f"{name}.tgt")]
        kind = "bitext"
    else:
        _write_lines(os.path.join(directory, f"{name}.tgt"), corpus.sentences)
        paths.append(os.path.join(directory, f"{name}.tgt"))
        kind = "mono"
    desc = {"split": name, "kind": kind, "count": len(corpus), "tag": corpus.tag,
            "task_seed": task.seed, "source_vocab": task.source_vocab, "target_vocab": task.target_vocab}
    dpath = os.path.join(directory, f"{name}.json")
    with open(dpath, "w") as f:
        json.dump(desc, f, indent=2, sort_keys=True)
        f.write("\n")
    paths.append(dpath)
    return paths


def read_corpus(directory: str, name: str) -> Bitext | MonoCorpus:
    dpath = os.path.join(directory, f"{name}.json")
    if not os.path.exists(dpath):
        raise FileNotFoundError(f"missing corpus descriptor {dpath}")
    with open(dpath) as f:
        desc = json.load(f)
    tgt = _read_lines(os.path.join(directory, f"{name}.tgt"))
    if desc["kind"] == "mono":
        corpus: Bitext | MonoCorpus = MonoCorpus(tgt, desc["tag"])
    else:
        src = _read_lines(os.path.join(directory, f"{name}.src"))
        corpus = Bitext(list(zip(src, tgt)), desc["tag"])
    if len(corpus) != desc["count"]:
        raise ContractError(f"{name}: descriptor lists {desc['count']} items, files hold {len(corpus)}")
    return corpus


def write_splits(directory: str, splits: DataSplits, task: TaskSpec,
                 related: TaskSpec | None = None) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for name, corpus in splits.named().items():
        paths += write_corpus(directory, name, corpus, related if name == "high_resource_train" else task)
    tasks = {"task": task.to_json(), "related": related.to_json() if related else None}
    tpath = os.path.join(directory, "tasks.json")
    with open(tpath, "w") as f:
        json.dump(tasks, f, indent=1, sort_keys=True)
        f.write("\n")
    return paths + [tpath]


def read_splits(directory: str) -> tuple[DataSplits, TaskSpec, TaskSpec | None]:
    tpath = os.path.join(directory, "tasks.json")
    if not os.path.exists(tpath):
        raise FileNotFoundError(f"missing task description {tpath}")
    with open(tpath) as f:
        tasks = json.load(f)
    task = TaskSpec.from_json(tasks["task"])
    related = TaskSpec.from_json(tasks["related"]) if tasks.get("related") else None
    parts = {k: read_corpus(directory, k) for k in SPLIT_NAMES}
    high = read_corpus(directory, "high_resource_train") if related is not None else None
    return DataSplits(high_resource_train=high, **parts), task, related
