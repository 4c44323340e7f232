"""
Prompt construction for in-context classification tasks.

Synthetic worlds (ambiguous multi-attribute items, bijective and clustered
facts), a word-level tokenizer, demonstration sampling under the four label
modes, and prompt assembly with token-offset bookkeeping.
"""
import csv
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .config import substream
from .errors import InsufficientPool, InvalidConfig, SpecError, TokenizationError

logger = logging.getLogger(__name__)

SPECIALS = ("<pad>",)
DEFAULT_UNIT = "input: [x] label: [y]\n"
MAX_ALTERNATES = 16

ATTRIBUTE_VALUES: Dict[str, Tuple[str, ...]] = {
    "color": ("red", "blue", "green", "yellow", "purple", "orange"),
    "shape": ("circle", "square", "triangle", "star", "oval", "arrow"),
    "taste": ("sweet", "sour", "bitter", "salty", "spicy", "bland"),
    "mood": ("happy", "sad", "angry", "calm", "tired", "proud"),
    "size": ("tiny", "small", "medium", "large", "huge", "giant"),
    "sound": ("loud", "quiet", "sharp", "dull", "shrill", "deep"),
}

FACT_NOUNS = {"bijection": "code", "clustering_fact": "group"}


# ==============================================================================
# BASIC TYPES
# ==============================================================================

@dataclass(frozen=True)
class Example:
    input_text: str
    gold_label: str


class DemoMode(str, Enum):
    GOLD = "gold"
    RANDOM_LABEL = "random_label"
    UNSEEN = "unseen"
    SEEN = "seen"

    @classmethod
    def parse(cls, name: Union[str, "DemoMode"]) -> "DemoMode":
        if isinstance(name, cls):
            return name
        if name == "random_sample":
            return cls.GOLD
        try:
            return cls(name)
        except ValueError:
            raise SpecError(f"unknown demonstration mode {name!r}") from None


class InstructionMode(str, Enum):
    NONE = "none"
    BASIC = "basic"
    WITH_LABEL_SPACE = "with_label_space"

    @classmethod
    def parse(cls, name: Union[str, "InstructionMode"]) -> "InstructionMode":
        if isinstance(name, cls):
            return name
        aliases = {"instruct": cls.BASIC, "instruct_ls": cls.WITH_LABEL_SPACE}
        if name in aliases:
            return aliases[name]
        try:
            return cls(name)
        except ValueError:
            raise SpecError(f"unknown instruction mode {name!r}") from None


@dataclass(frozen=True)
class Template:
    """Per-example unit with one [x] slot and a terminal [y] slot"""
    unit: str = DEFAULT_UNIT

    def __post_init__(self):
        if self.unit.count("[x]") != 1 or self.unit.count("[y]") != 1:
            raise SpecError(f"template needs exactly one [x] and one [y]: {self.unit!r}")
        if self.unit.index("[x]") > self.unit.index("[y]"):
            raise SpecError("template [x] must come before [y]")
        if self.suffix.strip():
            raise SpecError("template label slot must be terminal")

    @property
    def suffix(self) -> str:
        return self.unit[self.unit.index("[y]") + 3:]

    def query_text(self, x: str) -> str:
        """The unit up to (not including) the label slot"""
        return self.unit[:self.unit.index("[y]")].replace("[x]", x).strip()

    def demo_text(self, x: str, y: str) -> str:
        return self.unit.replace("[x]", x).replace("[y]", y)


@dataclass(frozen=True)
class PromptInstance:
    token_ids: Tuple[int, ...]
    last_index: int
    label_positions: Tuple[int, ...]        # first token of every demonstration label
    label_token_positions: Tuple[int, ...]  # every token of every demonstration label
    query_span: Tuple[int, int]
    demo_labels: Tuple[str, ...]
    mode: str
    k: int
    instruction_mode: str
    gold_label: str
    gold_ids: Tuple[int, ...]

    @property
    def length(self) -> int:
        return len(self.token_ids)


# ==============================================================================
# TOKENIZER
# ==============================================================================

_WORD = re.compile(r"\n|[^\s]+")


def split_words(text: str) -> List[str]:
    return _WORD.findall(text)


class Tokenizer:
    """Whitespace word-level vocabulary; newline is its own token"""

    def __init__(self, vocab: Sequence[str]):
        self.vocab = tuple(vocab)
        self.index = {tok: i for i, tok in enumerate(self.vocab)}
        if len(self.index) != len(self.vocab):
            raise SpecError("vocabulary contains duplicate tokens")

    @classmethod
    def from_texts(cls, texts: Iterable[str], specials: Sequence[str] = SPECIALS) -> "Tokenizer":
        words = sorted({w for text in texts for w in split_words(text)} - set(specials))
        return cls(list(specials) + words)

    def __len__(self) -> int:
        return len(self.vocab)

    def tokenize(self, text: str) -> List[int]:
        ids = []
        for word in split_words(text):
            if word not in self.index:
                raise TokenizationError(word)
            ids.append(self.index[word])
        return ids

    def detokenize(self, ids: Iterable[int]) -> str:
        out = ""
        for i in ids:
            tok = self.vocab[int(i)]
            if tok != "\n" and out and not out.endswith("\n"):
                out += " "
            out += tok
        return out


# ==============================================================================
# SYNTHETIC TASKS
# ==============================================================================

class SyntheticTaskSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["ambiguous_attributes", "bijection", "clustering_fact"]
    n_attributes: int = Field(default=4, ge=1, le=len(ATTRIBUTE_VALUES))
    values_per_attribute: int = Field(default=2, ge=2, le=6)
    words_per_value: int = Field(default=6, ge=1)
    n_items: int = Field(default=2560, ge=2)
    n_labels: int = Field(default=5, ge=1)
    test_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_kind(self) -> "SyntheticTaskSpec":
        if self.kind == "ambiguous_attributes":
            if self.n_attributes < 2:
                raise ValueError("ambiguous_attributes needs at least 2 attributes")
            space = (self.values_per_attribute * self.words_per_value) ** self.n_attributes
            if self.n_items > space // 2:
                raise ValueError(f"n_items={self.n_items} too large for an item space of {space}")
        if self.kind == "clustering_fact" and not 2 <= self.n_labels < self.n_items:
            raise ValueError("clustering_fact needs 2 <= n_labels < n_items")
        n_test = self.n_test
        if not 1 <= n_test < self.n_items:
            raise ValueError(f"test split of {n_test} items is empty or covers every item")
        return self

    @property
    def n_test(self) -> int:
        return int(round(self.n_items * self.test_fraction))


class SyntheticData(NamedTuple):
    train: Dict[str, List[Example]]
    test: Dict[str, List[Example]]
    label_sets: Dict[str, Tuple[str, ...]]


def _split(spec: SyntheticTaskSpec) -> Tuple[np.ndarray, np.ndarray]:
    perm = substream(spec.seed, "split").permutation(spec.n_items)
    return np.sort(perm[spec.n_test:]), np.sort(perm[:spec.n_test])


def _ambiguous(spec: SyntheticTaskSpec) -> Tuple[List[str], Dict[str, List[str]], Dict[str, Tuple[str, ...]]]:
    rng = substream(spec.seed, "items")
    attrs = list(ATTRIBUTE_VALUES)[:spec.n_attributes]
    values = {a: ATTRIBUTE_VALUES[a][:spec.values_per_attribute] for a in attrs}
    choices = spec.values_per_attribute * spec.words_per_value
    seen, items = set(), []
    golds: Dict[str, List[str]] = {a: [] for a in attrs}
    while len(items) < spec.n_items:
        code = tuple(int(c) for c in rng.integers(choices, size=len(attrs)))
        if code in seen:
            continue
        seen.add(code)
        words = []
        for attr, c in zip(attrs, code):
            value = values[attr][c // spec.words_per_value]
            words.append(f"{value}{c % spec.words_per_value}")
            golds[attr].append(value)
        items.append(" ".join(words))
    return items, golds, values


def _facts(spec: SyntheticTaskSpec) -> Tuple[List[str], Dict[str, List[str]], Dict[str, Tuple[str, ...]]]:
    rng = substream(spec.seed, spec.kind)
    items = [f"item{i}" for i in range(spec.n_items)]
    if spec.kind == "bijection":
        codes = rng.permutation(spec.n_items)
        golds = [f"code{c}" for c in codes]
        labels = tuple(f"code{c}" for c in range(spec.n_items))
        return items, {"bijection": golds}, {"bijection": labels}
    assignment = rng.integers(spec.n_labels, size=spec.n_items)
    # first n_labels items of a random order cover every group
    order = rng.permutation(spec.n_items)
    assignment[order[:spec.n_labels]] = np.arange(spec.n_labels)
    golds = [f"group{g}" for g in assignment]
    labels = tuple(f"group{g}" for g in range(spec.n_labels))
    return items, {"clustering": golds}, {"clustering": labels}


def gen_synthetic(spec: SyntheticTaskSpec) -> SyntheticData:
    """Deterministic train/test datasets and label sets for one spec"""
    if spec.kind == "ambiguous_attributes":
        items, golds, label_sets = _ambiguous(spec)
    else:
        items, golds, label_sets = _facts(spec)
    train_idx, test_idx = _split(spec)
    train = {t: [Example(items[i], g[i]) for i in train_idx] for t, g in golds.items()}
    test = {t: [Example(items[i], g[i]) for i in test_idx] for t, g in golds.items()}
    return SyntheticData(train=train, test=test, label_sets={t: tuple(v) for t, v in label_sets.items()})


def load_tsv(path: Union[str, Path]) -> List[Example]:
    """Two tab-separated columns (input, label); '#' lines are comments"""
    df = pd.read_csv(path, sep="\t", header=None, names=["input", "label"], comment="#",
                     dtype=str, keep_default_na=False, quoting=csv.QUOTE_NONE, encoding="utf-8").fillna("")
    if (df["label"] == "").any() or (df["input"] == "").any():
        raise SpecError(f"{path}: every row needs an input and a label")
    return [Example(row.input, row.label) for row in df.itertuples(index=False)]


# ==============================================================================
# DEMONSTRATIONS AND PROMPTS
# ==============================================================================

def _pick(pool: Sequence[Example], n: int, rng: np.random.Generator) -> List[Example]:
    return [pool[i] for i in rng.choice(len(pool), size=n, replace=False)]


def sample_demos(dataset: Sequence[Example], k: int, mode: Union[str, DemoMode], query: Example,
                 rng: np.random.Generator,
                 label_space: Optional[Sequence[str]] = None) -> List[Tuple[Example, str]]:
    """k demonstrations from dataset (query excluded) with their shown labels"""
    mode = DemoMode.parse(mode)
    if k < 0:
        raise SpecError("k must be >= 0")
    pool = [ex for ex in dataset if ex.input_text != query.input_text]
    labels = list(label_space) if label_space is not None else sorted({ex.gold_label for ex in dataset})

    if mode is DemoMode.UNSEEN:
        if len(labels) < 2:
            raise InsufficientPool("unseen mode needs at least 2 labels")
        pool = [ex for ex in pool if ex.gold_label != query.gold_label]
    if mode is DemoMode.SEEN:
        if k < 1:
            raise SpecError("seen mode needs k >= 1")
        same = [ex for ex in pool if ex.gold_label == query.gold_label]
        if not same or len(pool) < k:
            raise InsufficientPool(f"no room for a seen-label demonstration (pool {len(pool)}, k={k})")
        anchor = same[int(rng.integers(len(same)))]
        rest = _pick([ex for ex in pool if ex is not anchor], k - 1, rng)
        demos = [anchor] + rest
        demos = [demos[i] for i in rng.permutation(k)]
        return [(ex, ex.gold_label) for ex in demos]

    if len(pool) < k:
        raise InsufficientPool(f"{mode.value} mode needs {k} demonstrations, pool has {len(pool)}")
    demos = _pick(pool, k, rng)
    if mode is DemoMode.RANDOM_LABEL:
        return [(ex, labels[int(rng.integers(len(labels)))]) for ex in demos]
    return [(ex, ex.gold_label) for ex in demos]


def build_prompt(template: Template, instruction_mode: Union[str, InstructionMode],
                 demos: Sequence[Tuple[Example, str]], query: Example, tokenizer: Tokenizer,
                 instruction: Optional[str] = None, mode: str = DemoMode.GOLD.value,
                 gold_label: Optional[str] = None) -> PromptInstance:
    """[instruction?][x1 y1]...[xk yk][query unit without label]"""
    instruction_mode = InstructionMode.parse(instruction_mode)
    ids: List[int] = []
    if instruction_mode is not InstructionMode.NONE:
        if not instruction:
            raise SpecError(f"instruction mode {instruction_mode.value} needs instruction text")
        ids += tokenizer.tokenize(instruction)

    suffix = tokenizer.tokenize(template.suffix)
    label_positions, label_tokens, shown = [], [], []
    for ex, label in demos:
        ids += tokenizer.tokenize(template.query_text(ex.input_text))
        label_ids = tokenizer.tokenize(label)
        if not label_ids:
            raise SpecError("labels must contain at least one token")
        label_positions.append(len(ids))
        label_tokens.extend(range(len(ids), len(ids) + len(label_ids)))
        shown.append(label)
        ids += label_ids + suffix

    start = len(ids)
    ids += tokenizer.tokenize(template.query_text(query.input_text))
    gold = query.gold_label if gold_label is None else gold_label
    return PromptInstance(
        token_ids=tuple(ids),
        last_index=len(ids) - 1,
        label_positions=tuple(label_positions),
        label_token_positions=tuple(label_tokens),
        query_span=(start, len(ids)),
        demo_labels=tuple(shown),
        mode=mode,
        k=len(demos),
        instruction_mode=instruction_mode.value,
        gold_label=gold,
        gold_ids=tuple(tokenizer.tokenize(gold)),
    )


# ==============================================================================
# TASK WORLD
# ==============================================================================

@dataclass(frozen=True)
class TaskData:
    name: str
    noun: str
    train: Tuple[Example, ...]
    test: Tuple[Example, ...]
    labels: Tuple[str, ...]
    alternates: Mapping[str, str] = field(default_factory=dict)


class TaskWorld:
    """Tasks, template, instructions and the tokenizer built over all of them"""

    def __init__(self, tasks: Mapping[str, TaskData], template: Template, source: Mapping[str, Any],
                 query_pool: str = "train"):
        if not tasks:
            raise SpecError("a task world needs at least one task")
        self.tasks = dict(tasks)
        self.template = template
        self.source = dict(source)
        self.query_pool = query_pool
        self.tokenizer = Tokenizer.from_texts(self._corpus_texts())
        logger.debug("task world %s: %d tasks, %d tokens", self.source.get("preset"), len(self.tasks), len(self.tokenizer))

    # --------------------------------------------------------------------------
    # Construction
    # --------------------------------------------------------------------------

    @classmethod
    def from_specs(cls, specs: Sequence[SyntheticTaskSpec], template: Template = Template(),
                   query_pool: str = "train", preset: Optional[str] = None) -> "TaskWorld":
        tasks: Dict[str, TaskData] = {}
        for spec in specs:
            data = gen_synthetic(spec)
            for name in data.train:
                if name in tasks:
                    raise InvalidConfig(f"two specs both define task {name!r}")
                labels = data.label_sets[name]
                alternates = {}
                if len(labels) <= MAX_ALTERNATES:
                    alternates = {label: f"opt{i}" for i, label in enumerate(labels)}
                tasks[name] = TaskData(
                    name=name,
                    noun=FACT_NOUNS.get(spec.kind, name),
                    train=tuple(data.train[name]),
                    test=tuple(data.test[name]),
                    labels=labels,
                    alternates=alternates,
                )
        source = {"preset": preset, "specs": [s.model_dump() for s in specs], "template": template.unit,
                  "query_pool": query_pool}
        return cls(tasks, template, source, query_pool)

    @classmethod
    def from_tsv(cls, path: Union[str, Path], template: Template = Template(), noun: str = "label",
                 test_fraction: float = 0.25, seed: int = 0) -> "TaskWorld":
        examples = load_tsv(path)
        if len(examples) < 2:
            raise SpecError(f"{path}: need at least 2 examples")
        perm = substream(seed, "split").permutation(len(examples))
        n_test = max(1, int(round(len(examples) * test_fraction)))
        labels = tuple(sorted({ex.gold_label for ex in examples}))
        task = TaskData(
            name="tsv",
            noun=noun,
            train=tuple(examples[i] for i in np.sort(perm[n_test:])),
            test=tuple(examples[i] for i in np.sort(perm[:n_test])),
            labels=labels,
            alternates={label: f"opt{i}" for i, label in enumerate(labels)} if len(labels) <= MAX_ALTERNATES else {},
        )
        source = {"tsv": str(path), "template": template.unit, "noun": noun,
                  "test_fraction": test_fraction, "seed": seed}
        return cls({"tsv": task}, template, source)

    @classmethod
    def from_meta(cls, meta: Mapping[str, Any]) -> "TaskWorld":
        """Rebuild the world a model was pretrained on (stored in its TWB1 header)"""
        template = Template(meta.get("template", DEFAULT_UNIT))
        if "tsv" in meta:
            return cls.from_tsv(meta["tsv"], template, meta.get("noun", "label"),
                                meta.get("test_fraction", 0.25), meta.get("seed", 0))
        if "specs" not in meta:
            raise SpecError("model metadata does not describe a task world; pass --task")
        specs = [SyntheticTaskSpec(**s) for s in meta["specs"]]
        return cls.from_specs(specs, template, meta.get("query_pool", "train"), meta.get("preset"))

    def to_meta(self) -> Dict[str, Any]:
        return dict(self.source)

    # --------------------------------------------------------------------------
    # Accessors
    # --------------------------------------------------------------------------

    @property
    def task_names(self) -> List[str]:
        return list(self.tasks)

    def task(self, name: str) -> TaskData:
        try:
            return self.tasks[name]
        except KeyError:
            raise SpecError(f"unknown task {name!r}; world has {self.task_names}") from None

    def query_examples(self, name: str) -> Tuple[Example, ...]:
        task = self.task(name)
        return task.train + task.test if self.query_pool == "all" else task.train

    def labels(self, name: str, verbalize: Optional[Mapping[str, str]] = None) -> Tuple[str, ...]:
        labels = self.task(name).labels
        return tuple(verbalize.get(l, l) for l in labels) if verbalize else labels

    def label_map(self, name: str, verbalize: Optional[Mapping[str, str]] = None) -> Dict[str, List[int]]:
        return {label: self.tokenizer.tokenize(label) for label in self.labels(name, verbalize)}

    def instruction(self, name: str, mode: Union[str, InstructionMode],
                    verbalize: Optional[Mapping[str, str]] = None) -> str:
        mode = InstructionMode.parse(mode)
        noun = self.task(name).noun
        if mode is InstructionMode.NONE:
            return ""
        if mode is InstructionMode.BASIC:
            return f"Please predict the {noun} of the following input .\n"
        labels = list(self.labels(name, verbalize))
        space = labels[0] if len(labels) == 1 else " , ".join(labels[:-1]) + " and " + labels[-1]
        return f"Please predict the {noun} of the following input in {space} .\n"

    def _corpus_texts(self) -> List[str]:
        texts = [self.template.suffix]
        for name, task in self.tasks.items():
            for ex in task.train + task.test:
                texts.append(self.template.query_text(ex.input_text))
            texts.extend(task.labels)
            texts.extend(task.alternates.values())
            for mode in (InstructionMode.BASIC, InstructionMode.WITH_LABEL_SPACE):
                texts.append(self.instruction(name, mode))
                if task.alternates and mode is InstructionMode.WITH_LABEL_SPACE:
                    texts.append(self.instruction(name, mode, task.alternates))
        return texts

    # --------------------------------------------------------------------------
    # Prompts
    # --------------------------------------------------------------------------

    def prompt(self, name: str, query: Example, k: int, mode: Union[str, DemoMode], rng: np.random.Generator,
               instruction_mode: Union[str, InstructionMode] = InstructionMode.NONE,
               verbalize: Optional[Mapping[str, str]] = None) -> PromptInstance:
        task = self.task(name)
        mode = DemoMode.parse(mode)
        instruction_mode = InstructionMode.parse(instruction_mode)
        demos = sample_demos(task.train, k, mode, query, rng, label_space=task.labels)
        if verbalize:
            demos = [(ex, verbalize.get(label, label)) for ex, label in demos]
        gold = verbalize.get(query.gold_label, query.gold_label) if verbalize else query.gold_label
        return build_prompt(self.template, instruction_mode, demos, query, self.tokenizer,
                            instruction=self.instruction(name, instruction_mode, verbalize),
                            mode=mode.value, gold_label=gold)

    def prompts(self, name: str, queries: Sequence[Example], k: int, mode: Union[str, DemoMode],
                rng: np.random.Generator, instruction_mode: Union[str, InstructionMode] = InstructionMode.NONE,
                per_query: int = 1, verbalize: Optional[Mapping[str, str]] = None) -> List[PromptInstance]:
        """per_query independent demonstration sequences for every query"""
        return [self.prompt(name, q, k, mode, rng, instruction_mode, verbalize)
                for q in queries for _ in range(per_query)]


PRESETS = ("ambiguous", "facts")


def build_world(task: str, seed: int = 0, template: Template = Template()) -> TaskWorld:
    """A preset name ('ambiguous', 'facts') or a path to a TSV dataset"""
    if task == "ambiguous":
        return TaskWorld.from_specs([SyntheticTaskSpec(kind="ambiguous_attributes", seed=seed)], template,
                                    preset="ambiguous")
    if task == "facts":
        # shared items and split; facts are world knowledge, so test items are pretrained on too
        specs = [SyntheticTaskSpec(kind="bijection", n_items=256, seed=seed),
                 SyntheticTaskSpec(kind="clustering_fact", n_items=256, n_labels=5, seed=seed)]
        return TaskWorld.from_specs(specs, template, query_pool="all", preset="facts")
    path = Path(task)
    if path.suffix.lower() in (".tsv", ".txt") and path.exists():
        return TaskWorld.from_tsv(path, template, seed=seed)
    raise SpecError(f"unknown task {task!r}: expected one of {PRESETS} or an existing .tsv file")
