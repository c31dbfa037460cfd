from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from zebra.kb_core import Example, ExampleSet, load_examples, make_choices

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def golden_dir() -> Path:
    return GOLDEN


@pytest.fixture
def kb_small() -> ExampleSet:
    return load_examples(FIXTURES / "kb_small.jsonl")


@pytest.fixture
def dataset_10q() -> ExampleSet:
    return load_examples(FIXTURES / "dataset_10q.jsonl")


@pytest.fixture
def query_5choice() -> Example:
    return Example(
        id="g5",
        question="Where would you keep a spare pen?",
        choices=make_choices(["desk drawer", "garden", "oven", "swimming pool", "shoe"]),
        answer_label="A",
    )


@pytest.fixture
def query_2choice() -> Example:
    return Example(
        id="g2",
        question="Can a candle burn underwater?",
        choices=make_choices(["no", "yes"]),
        answer_label="A",
    )


@pytest.fixture
def exemplar_3choice() -> Example:
    return Example(
        id="e1",
        question="What do people usually store in a pencil case?",
        choices=make_choices(["pens", "soup", "bricks"]),
        answer_label="A",
        explanations=(
            "Pencil cases hold writing tools.",
            "Soup and bricks do not belong in pencil cases.",
        ),
        topic="stationery",
    )


@pytest.fixture
def exemplar_2choice() -> Example:
    return Example(
        id="e2",
        question="Does ice float on water?",
        choices=make_choices(["yes", "no"]),
        answer_label="A",
        explanations=("Ice is less dense than liquid water.",),
        topic="water",
    )


def make_two_topic_fixture(
    n_per_topic: int = 10, dim: int = 8, seed: int = 11
) -> tuple[ExampleSet, dict[str, np.ndarray]]:
    """Toy KB whose topic signal lives in dims 0-1 under heavier noise.

    The raw dot product is dominated by the noise dims, so identity-like
    weights retrieve topic-mates only part of the time; a trained adapter
    can amplify the signal dims and push recall up.
    """
    rng = np.random.default_rng(seed)
    examples: list[Example] = []
    base: dict[str, np.ndarray] = {}
    for topic, signal_dim, prefix in (("red", 0, "r"), ("blue", 1, "b")):
        for i in range(n_per_topic):
            ex_id = f"{prefix}{i:02d}"
            examples.append(
                Example(
                    id=ex_id,
                    question=f"Which {topic} item is this, number {i}?",
                    choices=make_choices(["first", "second"]),
                    answer_label="A",
                    explanations=(f"{topic} item {i} is the first kind.",),
                    topic=topic,
                )
            )
            vec = np.zeros(dim)
            vec[signal_dim] = 0.8 + 0.1 * rng.standard_normal()
            vec[2:] = rng.standard_normal(dim - 2)
            base[ex_id] = vec
    return ExampleSet(examples), base


@pytest.fixture
def two_topic_fixture() -> tuple[ExampleSet, dict[str, np.ndarray]]:
    return make_two_topic_fixture()


def read_golden(name: str) -> str:
    return (GOLDEN / name).read_text(encoding="utf-8")
