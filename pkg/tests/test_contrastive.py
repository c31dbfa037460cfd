from __future__ import annotations

import math
import random

import numpy as np
import pytest

from zebra.contrastive import (
    AdapterWeights,
    BatchQuery,
    TrainConfig,
    TrainingBatch,
    TrainingDivergedError,
    apply_adapter,
    assemble_batch,
    augment_passages,
    build_augmentation_bank,
    init_adapter,
    load_adapter,
    load_loss_trace,
    mine_positives,
    nce_grads_from_sims,
    nce_loss,
    nce_loss_from_sims,
    save_adapter,
    train_adapter,
    write_loss_trace,
    _batch_loss_and_grad,
)
from zebra.kb_core import Example, ExampleSet, make_choices, serialize_query

from conftest import make_two_topic_fixture


def _naive_nce(pos_sims, neg_sims):
    """Direct unstabilized evaluation of the loss formula."""
    neg_sum = sum(math.exp(u) for u in neg_sims)
    total = sum(math.exp(s) / (math.exp(s) + neg_sum) for s in pos_sims)
    return -math.log(total)


def _topic_example(ex_id: str, topic: str | None, n_choices: int = 3) -> Example:
    return Example(
        id=ex_id,
        question=f"Question about {ex_id}?",
        choices=make_choices([f"{ex_id} opt {i}" for i in range(n_choices)]),
        answer_label="A",
        explanations=(f"{ex_id} explanation.",),
        topic=topic,
    )


# ---------------------------------------------------------------------------
# Loss


def test_loss_single_positive_no_negatives_is_exactly_zero():
    for sim in (-50.0, -3.0, 0.0, 1.7, 50.0):
        value = nce_loss_from_sims([sim], [])
        assert value == 0.0
        assert str(value) == "0.0"


def test_loss_known_value_one_positive_one_negative():
    value = nce_loss(
        np.array([1.0, 0.0]), [np.array([1.0, 0.0])], [np.array([0.0, 1.0])]
    )
    assert value == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert value == pytest.approx(0.3132616875182228, abs=1e-12)


def test_loss_known_value_two_positives_can_go_negative():
    value = nce_loss_from_sims([2.0, 2.0], [0.0])
    expected = -math.log(2 * math.exp(2) / (math.exp(2) + 1))
    assert value == pytest.approx(expected, abs=1e-12)
    assert value == pytest.approx(-0.5662191695169727, abs=1e-12)
    assert value < 0


def test_loss_matches_naive_formula():
    rng = random.Random(13)
    for _ in range(300):
        pos = [rng.uniform(-5, 5) for _ in range(rng.randint(1, 3))]
        neg = [rng.uniform(-5, 5) for _ in range(rng.randint(0, 5))]
        assert nce_loss_from_sims(pos, neg) == pytest.approx(_naive_nce(pos, neg), abs=1e-9)


def test_loss_stable_at_extreme_sims():
    assert math.isfinite(nce_loss_from_sims([50.0], [-50.0, 49.0]))
    assert math.isfinite(nce_loss_from_sims([-50.0, -49.0], [50.0]))
    assert math.isfinite(nce_loss_from_sims([700.0], [690.0]))


def test_loss_rejects_empty_positives():
    with pytest.raises(ValueError, match="positive"):
        nce_loss_from_sims([], [0.0])


def test_loss_rejects_dim_mismatch():
    with pytest.raises(ValueError, match="dim"):
        nce_loss(np.ones(3), [np.ones(2)], [])


def test_adding_a_negative_never_decreases_loss():
    rng = random.Random(29)
    for _ in range(200):
        pos = [rng.uniform(-5, 5) for _ in range(rng.randint(1, 3))]
        neg = [rng.uniform(-5, 5) for _ in range(rng.randint(0, 4))]
        before = nce_loss_from_sims(pos, neg)
        after = nce_loss_from_sims(pos, neg + [rng.uniform(-5, 5)])
        assert after > before


def test_raising_a_positive_sim_never_increases_loss():
    rng = random.Random(31)
    for _ in range(200):
        pos = [rng.uniform(-5, 5) for _ in range(rng.randint(1, 3))]
        neg = [rng.uniform(-5, 5) for _ in range(rng.randint(1, 4))]
        before = nce_loss_from_sims(pos, neg)
        j = rng.randrange(len(pos))
        bumped = list(pos)
        bumped[j] += rng.uniform(0.01, 2.0)
        assert nce_loss_from_sims(bumped, neg) <= before


def test_sim_gradients_match_finite_differences():
    rng = random.Random(37)
    h = 1e-6
    for _ in range(50):
        pos = [rng.uniform(-4, 4) for _ in range(rng.randint(1, 3))]
        neg = [rng.uniform(-4, 4) for _ in range(rng.randint(1, 5))]
        _, d_pos, d_neg = nce_grads_from_sims(pos, neg)
        for j in range(len(pos)):
            up = list(pos)
            down = list(pos)
            up[j] += h
            down[j] -= h
            fd = (nce_loss_from_sims(up, neg) - nce_loss_from_sims(down, neg)) / (2 * h)
            assert d_pos[j] == pytest.approx(fd, abs=1e-6)
        for l in range(len(neg)):
            up = list(neg)
            down = list(neg)
            up[l] += h
            down[l] -= h
            fd = (nce_loss_from_sims(pos, up) - nce_loss_from_sims(pos, down)) / (2 * h)
            assert d_neg[l] == pytest.approx(fd, abs=1e-6)


def test_adapter_gradient_matches_finite_differences():
    rng = np.random.default_rng(41)
    h = 1e-5
    for _ in range(10):
        dim = int(rng.integers(2, 6))
        n_pos = int(rng.integers(1, 4))
        n_neg = int(rng.integers(0, 4))
        b_q = rng.standard_normal(dim)
        b_pos = rng.standard_normal((n_pos, dim))
        b_neg = rng.standard_normal((n_neg, dim))
        base = {"q": b_q}
        base.update({f"p{i}": b_pos[i] for i in range(n_pos)})
        base.update({f"n{i}": b_neg[i] for i in range(n_neg)})
        batch = TrainingBatch(
            queries=(
                BatchQuery(
                    query_id="q",
                    positive_ids=tuple(f"p{i}" for i in range(n_pos)),
                    negative_ids=tuple(f"n{i}" for i in range(n_neg)),
                ),
            )
        )
        matrix = np.eye(dim) + 0.05 * rng.standard_normal((dim, dim))
        _, analytic = _batch_loss_and_grad(matrix, batch, base)
        fd = np.zeros_like(matrix)
        for i in range(dim):
            for j in range(dim):
                up = matrix.copy()
                down = matrix.copy()
                up[i, j] += h
                down[i, j] -= h
                lu, _ = _batch_loss_and_grad(up, batch, base)
                ld, _ = _batch_loss_and_grad(down, batch, base)
                fd[i, j] = (lu - ld) / (2 * h)
        rel = np.linalg.norm(analytic - fd) / max(np.linalg.norm(fd), 1e-12)
        assert rel < 1e-4


# ---------------------------------------------------------------------------
# Positive mining


def test_mine_positives_no_peer():
    s = ExampleSet(
        [
            _topic_example("q1", "river"),
            _topic_example("q2", "mountain"),
        ]
    )
    assert mine_positives(s, "q1", cap=64, seed=0) == []


def test_mine_positives_stable_order():
    s = ExampleSet(
        [
            _topic_example("q1", "bar"),
            _topic_example("q2", "bar"),
            _topic_example("q3", "bar"),
        ]
    )
    assert mine_positives(s, "q1", cap=64, seed=0) == ["q2", "q3"]


def test_mine_positives_topic_match_is_case_and_space_insensitive():
    s = ExampleSet(
        [
            _topic_example("q1", " Bar "),
            _topic_example("q2", "bar"),
            _topic_example("q3", "BAR"),
            _topic_example("q4", "barn"),
        ]
    )
    assert mine_positives(s, "q1", cap=64, seed=0) == ["q2", "q3"]


def test_mine_positives_cap_and_determinism():
    examples = [_topic_example("query", "wide")] + [
        _topic_example(f"peer{i:03d}", "wide") for i in range(100)
    ]
    s = ExampleSet(examples)
    first = mine_positives(s, "query", cap=64, seed=5)
    second = mine_positives(s, "query", cap=64, seed=5)
    assert first == second
    assert len(first) == 64
    assert len(set(first)) == 64
    assert all(p.startswith("peer") for p in first)
    assert first == sorted(first)  # set order preserved after sampling
    other_seed = mine_positives(s, "query", cap=64, seed=6)
    assert other_seed != first


def test_mine_positives_untopiced_query():
    s = ExampleSet([_topic_example("q1", None), _topic_example("q2", "t")])
    with pytest.raises(ValueError, match="untopiced query 'q1'"):
        mine_positives(s, "q1", cap=64, seed=0)


# ---------------------------------------------------------------------------
# Augmentation


def test_augment_two_choices_yields_the_swap():
    ex = _topic_example("e", "t", n_choices=2)
    variants = augment_passages(ex, seed=0, n_variants=5)
    texts = [c.text for c in ex.choices]
    assert variants == [f"{ex.question} [SEP] {texts[1]} [SEP] {texts[0]}"]


def test_augment_never_removes_the_gold_choice():
    ex = _topic_example("e", "t", n_choices=3)
    gold_text = ex.choices[0].text
    variants = augment_passages(ex, seed=0, n_variants=100)
    for passage in variants:
        parts = passage.split(" [SEP] ")
        assert gold_text in parts[1:]


def test_augment_without_gold_may_remove_any_choice():
    ex = Example(
        id="e",
        question="Q?",
        choices=make_choices(["a", "b", "c"]),
        topic="t",
    )
    variants = augment_passages(ex, seed=0, n_variants=100)
    removed_first = [v for v in variants if "a" not in v.split(" [SEP] ")[1:]]
    assert removed_first


def test_augment_distinct_and_reproducible():
    ex = _topic_example("e", "t", n_choices=5)
    first = augment_passages(ex, seed=9, n_variants=10)
    second = augment_passages(ex, seed=9, n_variants=10)
    assert first == second
    assert len(first) == 10
    assert len(set(first)) == 10
    original = serialize_query(ex)
    assert original not in first
    assert all(v.startswith(f"{ex.question} [SEP] ") for v in first)


def test_augment_exhausts_small_edit_spaces():
    # 2 choices with a gold answer: the swap is the whole edit space.
    ex = _topic_example("e", "t", n_choices=2)
    assert len(augment_passages(ex, seed=0, n_variants=50)) == 1


def test_augment_many_choices_uses_sampling_path():
    ex = _topic_example("e", "t", n_choices=9)
    variants = augment_passages(ex, seed=3, n_variants=12)
    assert len(variants) == 12
    assert len(set(variants)) == 12
    assert variants == augment_passages(ex, seed=3, n_variants=12)
    for passage in variants:
        parts = passage.split(" [SEP] ")
        assert len(parts) >= 3  # at least two choices always remain
        assert ex.choices[0].text in parts[1:]


def test_augment_zero_variants():
    ex = _topic_example("e", "t")
    assert augment_passages(ex, seed=0, n_variants=0) == []


def test_augmentation_bank_ids_and_collision():
    s = ExampleSet([_topic_example("e1", "t"), _topic_example("e2", "t")])
    bank = build_augmentation_bank(s, n_variants=3, seed=0)
    assert bank.ids_for("e1") == ("e1::aug0", "e1::aug1", "e1::aug2")
    assert set(bank.passages) == set(bank.ids_for("e1")) | set(bank.ids_for("e2"))
    clash = ExampleSet([_topic_example("e1", "t"), _topic_example("e1::aug0", "t")])
    with pytest.raises(ValueError, match="collides"):
        build_augmentation_bank(clash, n_variants=1, seed=0)


# ---------------------------------------------------------------------------
# Batch assembly


def test_assemble_batch_disjoint_topics():
    s = ExampleSet(
        [
            _topic_example("q1", "x"),
            _topic_example("p1", "x"),
            _topic_example("q2", "y"),
            _topic_example("p2", "y"),
        ]
    )
    cfg = TrainConfig(seed=0)
    batch = assemble_batch(["q1", "q2"], s, cfg)
    by_id = {e.query_id: e for e in batch.queries}
    assert by_id["q1"].positive_ids == ("p1",)
    assert by_id["q1"].negative_ids == ("p2",)
    assert by_id["q2"].positive_ids == ("p2",)
    assert by_id["q2"].negative_ids == ("p1",)
    assert batch.skipped == ()


def test_assemble_batch_shared_positive_is_negative_for_neither():
    s = ExampleSet(
        [
            _topic_example("q1", "t"),
            _topic_example("q2", "t"),
            _topic_example("shared", "t"),
        ]
    )
    batch = assemble_batch(["q1", "q2"], s, TrainConfig(seed=0))
    for entry in batch.queries:
        assert "shared" in entry.positive_ids
        assert "shared" not in entry.negative_ids
        assert entry.query_id not in entry.negative_ids
        assert set(entry.positive_ids).isdisjoint(entry.negative_ids)


def test_assemble_batch_exact_negative_cap():
    examples = []
    for t in range(8):
        for i in range(41):
            examples.append(_topic_example(f"t{t}e{i:02d}", f"topic{t}"))
    s = ExampleSet(examples)
    queries = [f"t{t}e00" for t in range(8)]
    cfg = TrainConfig(seed=4, positive_cap=64, negative_cap=200)
    batch = assemble_batch(queries, s, cfg)
    assert len(batch.queries) == 8
    for entry in batch.queries:
        assert len(entry.positive_ids) == 40
        assert len(entry.negative_ids) == 200
        assert len(set(entry.negative_ids)) == 200
        assert set(entry.positive_ids).isdisjoint(entry.negative_ids)
        assert entry.query_id not in entry.negative_ids
    again = assemble_batch(queries, s, cfg)
    assert [e.negative_ids for e in again.queries] == [e.negative_ids for e in batch.queries]
    reseeded = assemble_batch(queries, s, TrainConfig(seed=5, negative_cap=200))
    assert [e.negative_ids for e in reseeded.queries] != [
        e.negative_ids for e in batch.queries
    ]


def test_assemble_batch_skips_unusable_queries():
    s = ExampleSet(
        [
            _topic_example("q1", "x"),
            _topic_example("p1", "x"),
            _topic_example("q2", "y"),
            _topic_example("p2", "y"),
            _topic_example("lonely", "z"),
            _topic_example("bare", None),
        ]
    )
    batch = assemble_batch(["q1", "q2", "lonely", "bare"], s, TrainConfig(seed=0))
    assert sorted(batch.skipped) == ["bare", "lonely"]
    assert {e.query_id for e in batch.queries} == {"q1", "q2"}


def test_assemble_batch_all_unusable():
    s = ExampleSet([_topic_example("a", None), _topic_example("b", None)])
    with pytest.raises(ValueError, match="unusable batch"):
        assemble_batch(["a", "b"], s, TrainConfig(seed=0))


def test_assemble_batch_needs_two_queries():
    s = ExampleSet([_topic_example("a", "t"), _topic_example("b", "t")])
    with pytest.raises(ValueError, match="2 queries"):
        assemble_batch(["a"], s, TrainConfig(seed=0))
    with pytest.raises(ValueError, match="duplicate"):
        assemble_batch(["a", "a"], s, TrainConfig(seed=0))


def test_assemble_batch_appends_augmentations_up_to_cap():
    s = ExampleSet(
        [
            _topic_example("q1", "x"),
            _topic_example("p1", "x"),
            _topic_example("q2", "y"),
            _topic_example("p2", "y"),
        ]
    )
    bank = build_augmentation_bank(s, n_variants=4, seed=0)
    cfg = TrainConfig(seed=0, positive_cap=3)
    batch = assemble_batch(["q1", "q2"], s, cfg, aug_bank=bank)
    by_id = {e.query_id: e for e in batch.queries}
    assert by_id["q1"].positive_ids == ("p1",) + bank.ids_for("p1")[:2]
    assert len(by_id["q1"].positive_ids) == 3


# ---------------------------------------------------------------------------
# Adapter weights


def test_init_adapter_near_identity():
    weights = init_adapter(6, seed=0)
    assert np.allclose(weights.matrix, np.eye(6), atol=0.06)
    assert not np.array_equal(weights.matrix, np.eye(6))
    assert np.array_equal(weights.matrix, init_adapter(6, seed=0).matrix)
    assert not np.array_equal(weights.matrix, init_adapter(6, seed=1).matrix)


def test_apply_adapter_vector_and_rows_agree():
    weights = init_adapter(4, seed=2)
    rows = np.random.default_rng(0).standard_normal((3, 4))
    mapped = apply_adapter(weights, rows)
    for i in range(3):
        assert np.allclose(mapped[i], apply_adapter(weights, rows[i]))


def test_adapter_save_load_round_trip(tmp_path):
    weights = init_adapter(5, seed=7)
    path = tmp_path / "adapter.json"
    save_adapter(weights, path)
    loaded = load_adapter(path)
    assert loaded.d_in == 5 and loaded.d_out == 5
    assert np.array_equal(loaded.matrix, weights.matrix)


def test_adapter_rejects_bad_shape_and_nonfinite():
    with pytest.raises(ValueError, match="shape"):
        AdapterWeights(matrix=np.ones((2, 3)), d_in=2, d_out=2)
    with pytest.raises(ValueError, match="finite"):
        AdapterWeights(matrix=np.array([[1.0, np.nan], [0.0, 1.0]]), d_in=2, d_out=2)


# ---------------------------------------------------------------------------
# Training


def test_train_zero_steps_returns_initialization():
    examples, base = make_two_topic_fixture()
    cfg = TrainConfig(max_steps=0, seed=3)
    result = train_adapter(cfg, base, examples)
    dim = base[examples.ids()[0]].shape[0]
    assert np.array_equal(result.weights.matrix, init_adapter(dim, 3).matrix)
    assert result.loss_trace == ()
    assert result.best_step is None


def test_train_is_deterministic_per_seed():
    examples, base = make_two_topic_fixture()
    cfg = TrainConfig(learning_rate=1e-2, max_steps=30, seed=5)
    first = train_adapter(cfg, base, examples)
    second = train_adapter(cfg, base, examples)
    assert [(r.step, r.loss, r.lr) for r in first.loss_trace] == [
        (r.step, r.loss, r.lr) for r in second.loss_trace
    ]
    assert np.array_equal(first.weights.matrix, second.weights.matrix)
    other = train_adapter(TrainConfig(learning_rate=1e-2, max_steps=30, seed=6), base, examples)
    assert [r.loss for r in other.loss_trace] != [r.loss for r in first.loss_trace]


def test_train_reduces_loss():
    examples, base = make_two_topic_fixture()
    cfg = TrainConfig(learning_rate=1e-2, max_steps=60, seed=0)
    result = train_adapter(cfg, base, examples)
    assert len(result.loss_trace) == 60
    assert result.loss_trace[-1].loss < result.loss_trace[0].loss
    assert result.loss_trace[0].lr == pytest.approx(1e-2)
    assert result.loss_trace[-1].lr == pytest.approx(1e-2 / 60)


def test_train_tracks_validation_best():
    examples, base = make_two_topic_fixture()
    ids = examples.ids()
    train_ids = [i for i in ids if not i.endswith("9")]
    val_ids = [i for i in ids if i.endswith("9")]
    cfg = TrainConfig(learning_rate=1e-2, max_steps=40, seed=0, eval_every=10)
    result = train_adapter(cfg, base, examples, train_ids=train_ids, val_ids=val_ids)
    assert result.best_step is not None
    assert result.best_step % 10 == 0 or result.best_step == 40


def test_train_aborts_on_divergence_with_step_index():
    examples, base = make_two_topic_fixture()
    huge = {k: v * 1e200 for k, v in base.items()}
    cfg = TrainConfig(learning_rate=1e-3, max_steps=3, seed=0)
    with pytest.raises(TrainingDivergedError, match="step 1"):
        train_adapter(cfg, huge, examples)


def test_train_requires_two_usable_queries():
    s = ExampleSet([_topic_example("a", None), _topic_example("b", None)])
    base = {"a": np.ones(4), "b": np.ones(4)}
    with pytest.raises(ValueError, match="2 usable"):
        train_adapter(TrainConfig(max_steps=5), base, s)


def test_train_config_validation():
    with pytest.raises(ValueError, match="learning_rate"):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError, match="max_steps"):
        TrainConfig(max_steps=-1)
    with pytest.raises(ValueError, match="caps"):
        TrainConfig(positive_cap=0)
    with pytest.raises(ValueError, match="schedule"):
        TrainConfig(schedule="cosine")


def test_loss_trace_round_trip(tmp_path):
    examples, base = make_two_topic_fixture()
    result = train_adapter(TrainConfig(learning_rate=1e-2, max_steps=10, seed=0), base, examples)
    path = tmp_path / "trace.csv"
    write_loss_trace(result.loss_trace, path)
    loaded = load_loss_trace(path)
    assert loaded == list(result.loss_trace)
    header = path.read_text(encoding="utf-8").splitlines()[0]
    assert header == "step,loss,lr"
