import numpy as np
import pytest
from scipy import stats

from fsml.data import Observation, ParcelSample, SynthConfig, generate_synthetic
from fsml.episodes import (
    EpisodeConfig,
    build_meta_validation,
    dump_tasks,
    episode_pool,
    load_task_dump,
    sample_episode,
    sample_region,
    sample_task,
)
from fsml.errors import ContractError, EpisodeError
from fsml.seeding import rng_from


def flat_pool(region_class_counts):
    samples = []
    i = 0
    for region, class_counts in region_class_counts.items():
        for label, n in class_counts.items():
            for _ in range(n):
                samples.append(
                    ParcelSample(
                        f"p{i}", [Observation(5, {"s2": np.zeros(2)})],
                        0.0, 0.0, region, label, "train",
                    )
                )
                i += 1
    return samples


def test_config_validation():
    with pytest.raises(ContractError):
        EpisodeConfig(n_way=1, k_support=1, k_query=1)
    with pytest.raises(ContractError):
        EpisodeConfig(n_way=4, k_support=0, k_query=1)


def test_region_ratio_trivial():
    config = EpisodeConfig(n_way=2, k_support=1, k_query=1)
    pool = flat_pool({"R1": {"a": 50, "b": 50}})
    assert sample_region(pool, config, rng_from(0, 0)) == "R1"


def test_region_probabilities_match_counts():
    config = EpisodeConfig(n_way=2, k_support=1, k_query=1)
    pool = flat_pool({"R1": {"a": 50, "b": 50}, "R2": {"a": 150, "b": 150}})
    draws = [sample_region(pool, config, rng_from(7, i)) for i in range(10_000)]
    observed = np.array([draws.count("R1"), draws.count("R2")])
    _, p = stats.chisquare(observed, f_exp=[2500, 7500])
    assert p > 0.001


def test_within_region_class_marginal_uniform():
    config = EpisodeConfig(n_way=2, k_support=1, k_query=1)
    pool = flat_pool({"R1": {"a": 40, "b": 40, "c": 40, "d": 40}})
    counts = {"a": 0, "b": 0, "c": 0, "d": 0}
    for i in range(10_000):
        task = sample_task(pool, "R1", config, rng_from(3, i))
        for label in task.class_roster:
            counts[label] += 1
    observed = np.array([counts[c] for c in "abcd"])
    _, p = stats.chisquare(observed)  # uniform expected
    assert p > 0.001


def test_no_eligible_region_raises():
    config = EpisodeConfig(n_way=3, k_support=1, k_query=5)
    pool = flat_pool({"R1": {"a": 6, "b": 6, "c": 3}})  # c has < k_query+1
    with pytest.raises(EpisodeError):
        sample_region(pool, config, rng_from(0, 0))


def test_full_support_when_plentiful():
    config = EpisodeConfig(n_way=2, k_support=3, k_query=2)
    pool = flat_pool({"R1": {"a": 10, "b": 10}})
    task = sample_task(pool, "R1", config, rng_from(1, 1))
    assert len(task.query) == config.n_way * config.k_query
    assert len(task.support) == config.n_way * config.k_support


def test_fallback_support_size_when_scarce():
    # class with exactly k_query+1 samples and k_support=10 -> support of 1
    config = EpisodeConfig(n_way=2, k_support=10, k_query=3)
    pool = flat_pool({"R1": {"a": 4, "b": 30}})
    task = sample_task(pool, "R1", config, rng_from(2, 0))
    by_class = {}
    for sample, idx in task.support:
        by_class.setdefault(task.class_roster[idx], []).append(sample)
    assert len(by_class[task.class_roster[task.class_roster.index("a")]]) == 1
    assert len(by_class["b"]) == 10
    assert len(task.query) == 6


def test_support_query_disjoint():
    config = EpisodeConfig(n_way=3, k_support=4, k_query=2)
    pool = flat_pool({"R1": {"a": 9, "b": 9, "c": 9}})
    for i in range(50):
        task = sample_task(pool, "R1", config, rng_from(11, i))
        support_ids = {s.parcel_id for s, _ in task.support}
        query_ids = {s.parcel_id for s, _ in task.query}
        assert not support_ids & query_ids


def test_labels_consistent_with_roster():
    config = EpisodeConfig(n_way=3, k_support=2, k_query=2)
    pool = flat_pool({"R1": {"a": 8, "b": 8, "c": 8, "d": 8}})
    task = sample_task(pool, "R1", config, rng_from(4, 2))
    assert len(set(task.class_roster)) == len(task.class_roster)
    for sample, idx in task.support + task.query:
        assert sample.label == task.class_roster[idx]


def _synthetic_corpus():
    cfg = SynthConfig(
        regions=["R1", "R2"],
        finetune_region="T1",
        n_classes=5,
        n_level4=5,
        samples_per_class=24,
        finetune_samples_per_class=20,
        obs_count=(5, 8),
        k_max=5,
    )
    return generate_synthetic(cfg, seed=42)


def test_meta_validation_fixed_and_seed_stable():
    corpus = _synthetic_corpus()
    config = EpisodeConfig(n_way=4, k_support=1, k_query=1, seed=3)
    tasks_a = build_meta_validation(corpus, config, count=100)
    tasks_b = build_meta_validation(corpus, config, count=100)
    assert len(tasks_a) == 100
    validation_ids = {s.parcel_id for s in episode_pool(corpus, "validation")}
    for ta, tb in zip(tasks_a, tasks_b):
        assert [s.parcel_id for s, _ in ta.support] == [s.parcel_id for s, _ in tb.support]
        assert [s.parcel_id for s, _ in ta.query] == [s.parcel_id for s, _ in tb.query]
        for s, _ in ta.support + ta.query:
            assert s.parcel_id in validation_ids
        assert len(ta.query) == 4
        assert len(ta.support) <= 4


def test_meta_validation_different_seed_differs():
    corpus = _synthetic_corpus()
    a = build_meta_validation(corpus, EpisodeConfig(4, 1, 1, seed=3), count=20)
    b = build_meta_validation(corpus, EpisodeConfig(4, 1, 1, seed=4), count=20)
    sig = lambda ts: [[s.parcel_id for s, _ in t.query] for t in ts]
    assert sig(a) != sig(b)


def test_task_dump_roundtrip(tmp_path):
    corpus = _synthetic_corpus()
    pool = episode_pool(corpus, "train")
    config = EpisodeConfig(n_way=3, k_support=2, k_query=1, seed=9)
    tasks = [sample_episode(pool, config, i) for i in range(5)]
    path = dump_tasks(tasks, tmp_path / "tasks.jsonl")
    loaded = load_task_dump(path)
    assert len(loaded) == 5
    for task, record in zip(tasks, loaded):
        assert record["region"] == task.region
        assert record["classes"] == task.class_roster
        assert record["support"] == [s.parcel_id for s, _ in task.support]
        assert record["query"] == [s.parcel_id for s, _ in task.query]
