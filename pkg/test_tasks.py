"""
Task worlds, demonstration sampling modes, prompt layout and the tokenizer.
"""
import numpy as np
import pytest

from icl_lab.errors import InsufficientPool, InvalidConfig, SpecError, TokenizationError
from icl_lab.tasks import (
    DemoMode,
    Example,
    InstructionMode,
    SyntheticTaskSpec,
    TaskWorld,
    Template,
    Tokenizer,
    build_prompt,
    build_world,
    gen_synthetic,
    load_tsv,
    sample_demos,
)

POOL = [Example(f"x{i}", label) for i, label in enumerate(["a", "b", "c"] * 6)]


class TestSampleDemos:

    def test_gold(self):
        demos = sample_demos(POOL, 5, "gold", POOL[0], np.random.default_rng(0))
        assert len(demos) == 5
        assert all(label == ex.gold_label for ex, label in demos)
        assert POOL[0] not in [ex for ex, _ in demos]

    def test_random_sample_alias(self):
        assert DemoMode.parse("random_sample") is DemoMode.GOLD

    def test_unseen_excludes_query_label(self):
        rng = np.random.default_rng(1)
        for query in POOL[:6]:
            demos = sample_demos(POOL, 8, "unseen", query, rng)
            assert all(ex.gold_label != query.gold_label for ex, _ in demos)

    def test_seen_contains_query_label(self):
        rng = np.random.default_rng(2)
        for query in POOL[:6]:
            demos = sample_demos(POOL, 4, "seen", query, rng)
            assert len(demos) == 4
            assert any(ex.gold_label == query.gold_label for ex, _ in demos)

    def test_random_labels_come_from_label_space(self):
        demos = sample_demos(POOL, 10, "random_label", POOL[0], np.random.default_rng(3), label_space=["p", "q"])
        assert {label for _, label in demos} <= {"p", "q"}

    def test_random_label_flip_rate(self):
        pool = [Example(f"x{i}", label) for i, label in enumerate(["p", "q"] * 10)]
        rng = np.random.default_rng(11)
        flips = [label != ex.gold_label
                 for i in range(1000)
                 for ex, label in sample_demos(pool, 10, "random_label", pool[i % 20], rng, label_space=["p", "q"])]
        assert len(flips) == 10_000
        assert abs(np.mean(flips) - 0.5) <= 0.02

    def test_seen_and_unseen_hold_over_many_draws(self):
        rng = np.random.default_rng(12)
        for i in range(2500):
            query = POOL[i % len(POOL)]
            unseen = sample_demos(POOL, 4, "unseen", query, rng)
            assert all(ex.gold_label != query.gold_label for ex, _ in unseen)
            seen = sample_demos(POOL, 4, "seen", query, rng)
            assert any(ex.gold_label == query.gold_label for ex, _ in seen)
            assert query not in [ex for ex, _ in seen]

    def test_deterministic(self):
        a = sample_demos(POOL, 4, "gold", POOL[1], np.random.default_rng(7))
        b = sample_demos(POOL, 4, "gold", POOL[1], np.random.default_rng(7))
        assert a == b

    def test_insufficient_pool(self):
        with pytest.raises(InsufficientPool):
            sample_demos(POOL, 13, "unseen", POOL[0], np.random.default_rng(0))
        with pytest.raises(InsufficientPool):
            sample_demos(POOL, 18, "gold", POOL[0], np.random.default_rng(0))
        with pytest.raises(InsufficientPool):
            sample_demos([Example("x", "a"), Example("y", "a")], 1, "unseen", Example("z", "a"),
                         np.random.default_rng(0))

    def test_bad_mode_and_k(self):
        with pytest.raises(SpecError):
            sample_demos(POOL, 2, "shuffled", POOL[0], np.random.default_rng(0))
        with pytest.raises(SpecError):
            sample_demos(POOL, -1, "gold", POOL[0], np.random.default_rng(0))
        with pytest.raises(SpecError):
            sample_demos(POOL, 0, "seen", POOL[0], np.random.default_rng(0))


class TestPromptLayout:

    @pytest.fixture
    def tokenizer(self):
        return Tokenizer.from_texts(["input: x0 x1 q label: a b\n", "long label"])

    def test_offsets(self, tokenizer):
        demos = [(Example("x0", "a"), "a"), (Example("x1", "b"), "long label")]
        prompt = build_prompt(Template(), "none", demos, Example("q", "b"), tokenizer)
        words = [tokenizer.vocab[i] for i in prompt.token_ids]
        assert words == ["input:", "x0", "label:", "a", "\n",
                         "input:", "x1", "label:", "long", "label", "\n",
                         "input:", "q", "label:"]
        assert prompt.label_positions == (3, 8)
        assert prompt.label_token_positions == (3, 8, 9)
        assert prompt.query_span == (11, 14)
        assert prompt.last_index == 13
        assert prompt.k == 2
        assert prompt.gold_ids == (tokenizer.index["b"],)

    def test_instruction_prefix(self, tiny_world):
        query = tiny_world.task("color").test[0]
        prompt = tiny_world.prompt("color", query, 1, "gold", np.random.default_rng(0),
                                   instruction_mode="instruct_ls")
        text = tiny_world.tokenizer.detokenize(prompt.token_ids)
        assert text.startswith("Please predict the color of the following input in red and blue .\n")
        assert prompt.instruction_mode == InstructionMode.WITH_LABEL_SPACE.value

    def test_instruction_needs_text(self, tokenizer):
        with pytest.raises(SpecError):
            build_prompt(Template(), "basic", [], Example("q", "a"), tokenizer)

    def test_verbalized_labels(self, tiny_world):
        task = tiny_world.task("shape")
        prompt = tiny_world.prompt("shape", task.test[0], 3, "gold", np.random.default_rng(0),
                                   verbalize=task.alternates)
        assert set(prompt.demo_labels) <= set(task.alternates.values())
        assert prompt.gold_label == task.alternates[task.test[0].gold_label]

    def test_template_validation(self):
        with pytest.raises(SpecError):
            Template("input: [x] label: [y] end\n")
        with pytest.raises(SpecError):
            Template("[y] then [x]")


class TestTokenizer:

    def test_newline_is_a_token(self):
        tok = Tokenizer.from_texts(["a b\nc"])
        assert tok.vocab == ("<pad>", "\n", "a", "b", "c")
        assert tok.tokenize("a b\nc") == [2, 3, 1, 4]
        assert tok.detokenize([2, 3, 1, 4]) == "a b\nc"

    def test_unknown_word(self):
        with pytest.raises(TokenizationError):
            Tokenizer.from_texts(["a"]).tokenize("b")


class TestWorlds:

    def test_ambiguous_world(self, tiny_world):
        assert tiny_world.task_names == ["color", "shape"]
        color = tiny_world.task("color")
        assert color.labels == ("red", "blue")
        assert (len(color.train), len(color.test)) == (12, 4)
        shape = tiny_world.task("shape")
        assert [ex.input_text for ex in color.train] == [ex.input_text for ex in shape.train]
        assert {ex.input_text for ex in color.train}.isdisjoint(ex.input_text for ex in color.test)

    def test_same_seed_same_world(self):
        spec = SyntheticTaskSpec(kind="bijection", n_items=20, seed=4)
        assert gen_synthetic(spec) == gen_synthetic(spec)

    def test_meta_round_trip(self, tiny_world):
        rebuilt = TaskWorld.from_meta(tiny_world.to_meta())
        assert rebuilt.tokenizer.vocab == tiny_world.tokenizer.vocab
        assert rebuilt.task("shape").test == tiny_world.task("shape").test

    def test_facts_world(self):
        world = build_world("facts")
        assert world.task_names == ["bijection", "clustering"]
        assert world.query_pool == "all"
        assert len(world.task("clustering").labels) == 5
        assert len(world.query_examples("bijection")) == 256

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SyntheticTaskSpec(kind="ambiguous_attributes", n_attributes=2, values_per_attribute=2,
                              words_per_value=1, n_items=10)
        with pytest.raises(ValueError):
            SyntheticTaskSpec(kind="clustering_fact", n_items=4, n_labels=4)

    def test_duplicate_task_names(self):
        spec = SyntheticTaskSpec(kind="bijection", n_items=20)
        with pytest.raises(InvalidConfig):
            TaskWorld.from_specs([spec, spec])

    def test_unknown_task(self):
        with pytest.raises(SpecError):
            build_world("nonexistent")


class TestTsv:

    def test_load_and_world(self, tmp_path):
        path = tmp_path / "sentiment.tsv"
        rows = ["# input\tlabel"] + [f"movie{i} was fine\t{'pos' if i % 2 else 'neg'}" for i in range(12)]
        path.write_text("\n".join(rows) + "\n", encoding="utf-8")
        examples = load_tsv(path)
        assert len(examples) == 12
        assert examples[1] == Example("movie1 was fine", "pos")
        world = build_world(str(path))
        task = world.task("tsv")
        assert (len(task.train), len(task.test)) == (9, 3)
        assert task.labels == ("neg", "pos")

    def test_missing_label(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("only input\n", encoding="utf-8")
        with pytest.raises(SpecError):
            load_tsv(path)
