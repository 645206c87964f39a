"""Synthetic multi-task collections and their JSON-lines file format.

Four generator families are available:

``pattern``
    label 1 iff the sequence contains a token from the target trigger set.
    Half the sequences also carry tokens of a second, distractor trigger set.
    An *instructed* pattern task starts with one of two instruction tokens
    that says which of the two sets is the target; the plain task always
    targets the first set and has no instruction.  Bag-of-tokens separable.
``order``
    two marker tokens appear once each; label 1 iff the first marker comes
    before the second.  Token counts carry no signal.
``aggregate``
    every token carries an integer value; classification labels whether the
    value sum is positive, regression targets the mean value.
``parity``
    parity of the number of tokens drawn from a subset.

Trigger, instruction and marker tokens come from one pool fixed by the
``world`` argument, and the order markers are taken from the two trigger
sets, so pattern and order tasks overlap in vocabulary.  A base pretrained
on instructed pattern tasks from a different seed already reads the
triggers; adapting it to the plain task only needs the missing instruction.
Values and parity subsets are redrawn per seed and must be learned anew.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, ParseError

FORMAT_VERSION = 1
FAMILIES = ("pattern", "order", "aggregate", "parity")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    family: str
    kind: str = "classification"
    n_classes: int = 2
    seq_len: int = 16
    vocab_size: int = 64
    n_train: int = 600
    n_val: int = 200
    n_test: int = 200
    seed: int = 0
    instructed: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.kind not in ("classification", "regression"):
            raise ConfigurationError(f"task {self.task_id}: unknown kind {self.kind!r}")
        if self.kind == "regression" and self.family != "aggregate":
            raise ConfigurationError(f"task {self.task_id}: only 'aggregate' supports regression")
        if self.kind == "classification" and self.n_classes != 2:
            raise ConfigurationError(f"task {self.task_id}: families are binary, n_classes must be 2")
        if min(self.seq_len, self.vocab_size, self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigurationError(f"task {self.task_id}: sizes must be positive")
        if self.instructed and self.family != "pattern":
            raise ConfigurationError(f"task {self.task_id}: only 'pattern' tasks can be instructed")
        if self.seq_len < 4 or self.vocab_size < 16:
            raise ConfigurationError(f"task {self.task_id}: need seq_len >= 4 and vocab_size >= 16")

    @property
    def n_outputs(self) -> int:
        return 1 if self.kind == "regression" else self.n_classes

    def split_size(self, split: str) -> int:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]


@dataclass
class Split:
    tokens: np.ndarray  # (N, seq_len) int64
    labels: np.ndarray  # (N,) int64 or float64

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        return (isinstance(other, Split) and np.array_equal(self.tokens, other.tokens)
                and np.array_equal(self.labels, other.labels)
                and self.labels.dtype == other.labels.dtype)


@dataclass
class TaskData:
    spec: TaskSpec
    splits: dict[str, Split]


@dataclass
class TaskCollection:
    tasks: list[TaskData]
    vocab_size: int
    seed: int = 0
    world: int = 0

    @property
    def specs(self) -> list[TaskSpec]:
        return [t.spec for t in self.tasks]

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def max_seq(self) -> int:
        return max(t.spec.seq_len for t in self.tasks)

    @property
    def n_outputs(self) -> list[int]:
        return [t.spec.n_outputs for t in self.tasks]

    def split(self, i: int, name: str) -> Split:
        return self.tasks[i].splits[name]

    def __eq__(self, other):
        if not isinstance(other, TaskCollection):
            return NotImplemented
        return (self.vocab_size == other.vocab_size and self.world == other.world
                and self.specs == other.specs
                and all(a.splits == b.splits for a, b in zip(self.tasks, other.tasks)))


def default_specs(n_train: int = 600, n_val: int = 200, n_test: int = 200,
                  vocab_size: int = 64, seq_len: int = 16) -> list[TaskSpec]:
    """The four-task desk collection, one task per family."""
    common = dict(vocab_size=vocab_size, seq_len=seq_len, n_train=n_train, n_val=n_val, n_test=n_test)
    return [TaskSpec(f"t{i}_{fam}", fam, seed=i, **common) for i, fam in enumerate(FAMILIES)]


def pretraining_specs(n_train: int = 600, n_val: int = 200, n_test: int = 200,
                      vocab_size: int = 64, seq_len: int = 16) -> list[TaskSpec]:
    """The desk collection with an instructed pattern task, for pretraining a base."""
    specs = default_specs(n_train, n_val, n_test, vocab_size, seq_len)
    specs[0] = TaskSpec(specs[0].task_id, "pattern", seed=0, instructed=True, vocab_size=vocab_size,
                        seq_len=seq_len, n_train=n_train, n_val=n_val, n_test=n_test)
    return specs


# -- generation ---------------------------------------------------------------

@dataclass
class _Latent:
    pool: np.ndarray         # 8 world tokens: two trigger sets, two instruction tokens
    values: np.ndarray       # per-token integer values for aggregate
    parity_set: np.ndarray

    @property
    def triggers(self) -> tuple[np.ndarray, np.ndarray]:
        return self.pool[0:3], self.pool[3:6]

    @property
    def instructions(self) -> np.ndarray:
        return self.pool[6:8]

    @property
    def markers(self) -> np.ndarray:
        return self.pool[[0, 3]]


def _latent(vocab: int, world: int, seed: int) -> _Latent:
    # token roles in the pool are a property of the world, so a base pretrained on
    # one seed already knows them; values and parity members change with the seed
    pool = np.random.default_rng([world, 7919]).permutation(vocab)[:8]
    rng = np.random.default_rng([seed, 7920])
    values = rng.integers(-2, 3, size=vocab)
    rest = rng.permutation(np.setdiff1d(np.arange(vocab), pool))
    return _Latent(pool=pool, values=values, parity_set=np.sort(rest[:vocab // 4]))


class _Sampler:
    """Class-conditional example constructors for one task."""

    def __init__(self, spec: TaskSpec, latent: _Latent, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        v = spec.vocab_size
        if spec.family == "pattern":
            self.sets = latent.triggers
            self.instructions = latent.instructions
            self.background = np.setdiff1d(np.arange(v), latent.pool)
        elif spec.family == "order":
            self.markers = latent.markers
            self.background = np.setdiff1d(np.arange(v), self.markers)
        elif spec.family == "aggregate":
            self.values = latent.values
        else:
            self.members = np.zeros(v, dtype=bool)
            self.members[latent.parity_set] = True

    def _pattern(self, label) -> np.ndarray:
        s, rng = self.spec.seq_len, self.rng
        x = rng.choice(self.background, size=s)
        start = 0
        which = 0
        if self.spec.instructed:
            which = int(rng.integers(2))
            x[0] = self.instructions[which]
            start = 1
        target, other = self.sets[which], self.sets[1 - which]
        slots = rng.permutation(np.arange(start, s))
        if rng.random() < 0.5:
            # tokens of the other trigger set are distractors
            n = rng.integers(1, 3)
            x[slots[:n]] = rng.choice(other, size=n)
            slots = slots[n:]
        if label == 1:
            n = rng.integers(1, 3)
            x[slots[:n]] = rng.choice(target, size=n)
        return x

    def draw(self, label) -> tuple[np.ndarray, object]:
        s, rng = self.spec.seq_len, self.rng
        fam = self.spec.family
        if fam == "pattern":
            return self._pattern(label), label
        if fam == "order":
            x = rng.choice(self.background, size=s)
            i, j = sorted(rng.choice(s, size=2, replace=False))
            first, second = (self.markers if label == 1 else self.markers[::-1])
            x[i], x[j] = first, second
            return x, label
        if fam == "aggregate":
            while True:
                x = rng.integers(0, self.spec.vocab_size, size=s)
                total = int(self.values[x].sum())
                if self.spec.kind == "regression":
                    return x, float(self.values[x].mean())
                if total != 0 and int(total > 0) == label:
                    return x, label
        while True:
            x = rng.integers(0, self.spec.vocab_size, size=s)
            if int(self.members[x].sum() % 2) == label:
                return x, label


def _task_rng(seed: int, spec: TaskSpec, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, spec.seed, index, FAMILIES.index(spec.family)])


def generate_tasks(specs: list[TaskSpec], seed: int, world: int = 0) -> TaskCollection:
    """Materialize every spec deterministically from ``(spec, seed, world)``.

    ``world`` fixes which tokens act as triggers, markers and instructions;
    ``seed`` draws the examples, the aggregate values and the parity subset.
    Classification splits are balanced to within one example per class and no
    token sequence occurs in more than one split of a task.
    """
    if not specs:
        raise ConfigurationError("need at least one task spec")
    vocab = {s.vocab_size for s in specs}
    if len(vocab) != 1:
        raise ConfigurationError(f"inconsistent vocab_size across specs: {sorted(vocab)}")
    ids = [s.task_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("duplicate task ids")
    vocab_size = vocab.pop()
    latent = _latent(vocab_size, world, seed)
    tasks = []
    for index, spec in enumerate(specs):
        sampler = _Sampler(spec, latent, _task_rng(seed, spec, index))
        seen: set[bytes] = set()
        splits = {}
        for name in SPLITS:
            n = spec.split_size(name)
            xs, ys = [], []
            for j in range(n):
                label = j % spec.n_classes if spec.kind == "classification" else None
                while True:
                    x, y = sampler.draw(label)
                    key = x.astype(np.int64).tobytes()
                    if key not in seen:
                        seen.add(key)
                        break
                xs.append(x)
                ys.append(y)
            order = sampler.rng.permutation(n)
            tokens = np.asarray(xs, dtype=np.int64)[order]
            dtype = np.int64 if spec.kind == "classification" else np.float64
            labels = np.asarray(ys, dtype=dtype)[order]
            splits[name] = Split(tokens, labels)
        tasks.append(TaskData(spec, splits))
    return TaskCollection(tasks, vocab_size, seed, world)


def example_hash(tokens: np.ndarray) -> str:
    return hashlib.sha1(np.asarray(tokens, dtype=np.int64).tobytes()).hexdigest()


# -- file format ----------------------------------------------------------------

def save_collection(coll: TaskCollection, path) -> None:
    """Write the JSON-lines format: one header line, then one line per example."""
    counts = {t.spec.task_id: {s: len(t.splits[s]) for s in SPLITS} for t in coll.tasks}
    header = {"format_version": FORMAT_VERSION, "seed": coll.seed, "world": coll.world,
              "vocab_size": coll.vocab_size,
              "tasks": [asdict(t.spec) for t in coll.tasks], "counts": counts}
    lines = [json.dumps(header, sort_keys=True)]
    for t in coll.tasks:
        reg = t.spec.kind == "regression"
        for s in SPLITS:
            sp = t.splits[s]
            for x, y in zip(sp.tokens, sp.labels):
                label = float(y) if reg else int(y)
                lines.append(json.dumps({"task": t.spec.task_id, "tokens": [int(v) for v in x],
                                         "label": label, "split": s}))
    Path(path).write_text("\n".join(lines) + "\n")


def _spec_from_dict(d: dict, line: int) -> TaskSpec:
    try:
        return TaskSpec(**d)
    except TypeError as exc:
        raise ParseError(str(exc), line=line, field="tasks") from None
    except ConfigurationError as exc:
        raise ParseError(str(exc), line=line, field="tasks") from None


def load_collection(path) -> TaskCollection:
    """Parse a collection file; every failure names the offending line/field."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    raw = path.read_text().splitlines()
    if not raw:
        raise ParseError("empty file", line=1)
    try:
        header = json.loads(raw[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON header: {exc.msg}", line=1) from None
    for key in ("format_version", "vocab_size", "tasks", "counts"):
        if key not in header:
            raise ParseError("missing header key", line=1, field=key)
    if header["format_version"] != FORMAT_VERSION:
        raise ParseError(f"unsupported format_version {header['format_version']}",
                         line=1, field="format_version")
    specs = [_spec_from_dict(d, 1) for d in header["tasks"]]
    by_id = {s.task_id: s for s in specs}
    buckets = {(s.task_id, sp): ([], []) for s in specs for sp in SPLITS}
    for lineno, text in enumerate(raw[1:], start=2):
        if not text.strip():
            continue
        try:
            rec = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", line=lineno) from None
        if not isinstance(rec, dict):
            raise ParseError("expected an object", line=lineno)
        for key in ("task", "tokens", "label", "split"):
            if key not in rec:
                raise ParseError("missing field", line=lineno, field=key)
        spec = by_id.get(rec["task"])
        if spec is None:
            raise ParseError(f"unknown task {rec['task']!r}", line=lineno, field="task")
        if rec["split"] not in SPLITS:
            raise ParseError(f"unknown split {rec['split']!r}", line=lineno, field="split")
        toks = rec["tokens"]
        if (not isinstance(toks, list) or len(toks) != spec.seq_len
                or not all(isinstance(t, int) and not isinstance(t, bool) for t in toks)):
            raise ParseError(f"tokens must be {spec.seq_len} integers", line=lineno, field="tokens")
        if any(t < 0 or t >= spec.vocab_size for t in toks):
            raise DataError(f"line {lineno}: token outside [0, {spec.vocab_size})")
        label = rec["label"]
        if spec.kind == "classification":
            if not isinstance(label, int) or isinstance(label, bool):
                raise ParseError("classification label must be an integer", line=lineno, field="label")
            if not 0 <= label < spec.n_classes:
                raise DataError(f"line {lineno}: label {label} out of range [0, {spec.n_classes})")
        elif not isinstance(label, (int, float)) or isinstance(label, bool):
            raise ParseError("regression label must be a number", line=lineno, field="label")
        xs, ys = buckets[(spec.task_id, rec["split"])]
        xs.append(toks)
        ys.append(label)
    tasks = []
    for spec in specs:
        splits = {}
        for sp in SPLITS:
            xs, ys = buckets[(spec.task_id, sp)]
            expected = header["counts"].get(spec.task_id, {}).get(sp)
            if expected != len(ys):
                raise ParseError(f"task {spec.task_id} split {sp}: expected {expected} examples,"
                                 f" found {len(ys)} (truncated file?)", line=len(raw), field="counts")
            dtype = np.int64 if spec.kind == "classification" else np.float64
            splits[sp] = Split(np.asarray(xs, dtype=np.int64).reshape(len(xs), spec.seq_len),
                               np.asarray(ys, dtype=dtype))
        tasks.append(TaskData(spec, splits))
    return TaskCollection(tasks, int(header["vocab_size"]), int(header.get("seed", 0)),
                          int(header.get("world", 0)))
