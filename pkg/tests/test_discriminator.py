import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sigzsl import discriminator as disc
from sigzsl.discriminator import MetricKind


def two_class_stats():
    return disc.ClassStats(np.array([[0.0, 0.0], [10.0, 0.0]]), np.stack([np.eye(2), np.diag([4.0, 4.0])]), [5, 5])


def test_fit_statistics_mean_and_singleton():
    stats = disc.fit_statistics(np.array([[0.0, 0.0], [2.0, 2.0], [5.0, 1.0]]), [0, 0, 1])
    np.testing.assert_array_equal(stats.centers, [[1.0, 1.0], [5.0, 1.0]])
    np.testing.assert_array_equal(stats.covariances[1], np.eye(2))
    assert list(stats.counts) == [2, 1]
    with pytest.raises(ValueError):
        disc.fit_statistics(np.zeros((2, 2)), [0, 2])


def test_shrinkage_and_sigma2():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((50, 3))
    stats = disc.fit_statistics(x, np.zeros(50, int), shrinkage=0.1)
    raw = np.cov(x, rowvar=False)
    np.testing.assert_allclose(stats.covariances[0], raw + 0.1 * np.trace(raw) / 3 * np.eye(3))
    s = disc.ClassStats(np.zeros((1, 2)), np.diag([2.0, 4.0])[None], [3])
    assert s.sigma2[0] == 3.0


def test_identical_members_give_identity():
    stats = disc.fit_statistics(np.ones((4, 3)), np.zeros(4, int))
    np.testing.assert_array_equal(stats.covariances[0], np.eye(3))


def test_distance_examples():
    s = disc.ClassStats(np.zeros((1, 2)), np.diag([4.0, 4.0])[None], [9])
    z = np.array([3.0, 4.0])
    assert disc.distance(z, s, 0, MetricKind.EUCLIDEAN) == pytest.approx(5.0)
    assert disc.distance(z, s, 0, MetricKind.DIAGONAL) == pytest.approx(2.5)
    for m in MetricKind:
        assert disc.distance(np.zeros(2), s, 0, m) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31))
def test_metric_variants_against_direct_formula(t, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((t + 3, t))
    cov = a.T @ a / (t + 3) + 0.1 * np.eye(t)
    s = disc.ClassStats(rng.standard_normal((1, t)), cov[None], [t + 3])
    z = rng.standard_normal(t)
    v = z - s.centers[0]
    sigma = np.sqrt(np.trace(cov) / t)
    assert disc.distance(z, s, 0, MetricKind.MAHALANOBIS) == pytest.approx(np.sqrt(v @ np.linalg.solve(cov, v)))
    assert disc.distance(z, s, 0, MetricKind.DIAGONAL) == pytest.approx(np.sqrt(np.sum(v * v / np.diag(cov))))
    assert disc.distance(z, s, 0, MetricKind.SCALED_IDENTITY) == pytest.approx(np.linalg.norm(v) / sigma)
    assert disc.distance(z, s, 0, MetricKind.EUCLIDEAN) == pytest.approx(np.linalg.norm(v))
    np.testing.assert_allclose(disc.distances(z, s, MetricKind.MAHALANOBIS)[0, 0],
                               disc.distance(z, s, 0, MetricKind.MAHALANOBIS))


def test_singular_metric_without_shrinkage_is_rejected():
    s = disc.ClassStats(np.zeros((1, 2)), np.zeros((1, 2, 2)), [2])
    with pytest.raises(ValueError):
        disc.distance(np.ones(2), s, 0, MetricKind.MAHALANOBIS)


def test_thresholds():
    assert disc.theta1(0.4, 64) == pytest.approx(9.6)
    assert disc.theta2(9.6, 1.0, 12.0) == pytest.approx(10.8)
    assert disc.theta2(9.6, 0.0, 12.0) == 9.6
    with pytest.raises(ValueError):
        disc.DiscriminatorConfig(lambda1=0.0)


def test_known_center_is_known_with_zero_distance():
    stats = two_class_stats()
    p = disc.discriminate(np.array([10.0, 0.0]), stats, disc.UnknownRegistry(), disc.DiscriminatorConfig())
    assert p.known and p.index == 1 and p.d1 == 0.0


def test_registry_growth_and_join():
    stats = two_class_stats()
    reg = disc.UnknownRegistry()
    cfg = disc.DiscriminatorConfig(lambda1=0.5, metric=MetricKind.EUCLIDEAN)  # theta1 = 2.12
    z = np.array([0.0, 50.0])
    p = disc.discriminate(z, stats, reg, cfg)
    assert not p.known and p.index == 0 and p.d2 is None
    np.testing.assert_array_equal(reg.center(0), z)
    assert reg.counts == [1]
    # d1 = 50.01 so theta2 ~ 26; a sample 1 away joins R1
    z2 = np.array([1.0, 50.0])
    p = disc.discriminate(z2, stats, reg, cfg)
    assert p.index == 0 and p.d2 == pytest.approx(1.0)
    np.testing.assert_array_equal(reg.center(0), (z + z2) / 2)
    # far from both known and R1 -> R2
    p = disc.discriminate(np.array([0.0, -80.0]), stats, reg, cfg)
    assert p.index == 1 and reg.labels == ["R1", "R2"]


def test_registry_update_rules():
    reg = disc.UnknownRegistry()
    reg.add_label(np.zeros(2))
    disc.registry_update(reg, 0, np.array([2.0, 2.0]))
    np.testing.assert_array_equal(reg.center(0), [1.0, 1.0])
    disc.registry_update(reg, 0, reg.center(0))
    np.testing.assert_array_equal(reg.center(0), [1.0, 1.0])
    with pytest.raises(KeyError):
        disc.registry_update(reg, 3, np.zeros(2))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 200), st.integers(1, 8), st.integers(0, 2**31))
def test_registry_center_is_exact_mean(n, t, seed):
    rng = np.random.default_rng(seed)
    reg = disc.UnknownRegistry()
    reg.add_label(rng.standard_normal(t) * 10)
    for _ in range(n):
        disc.registry_update(reg, 0, rng.standard_normal(t) * 10)
    brute = np.mean(np.array(reg.members[0]), axis=0)
    assert np.max(np.abs(reg.center(0) - brute)) <= 1e-12


def test_unknown_metric_matrix_rules():
    reg = disc.UnknownRegistry()
    reg.add_label(np.ones(3))
    np.testing.assert_array_equal(disc.unknown_metric_matrix(reg, 0, MetricKind.MAHALANOBIS), np.eye(3))
    disc.registry_update(reg, 0, np.ones(3))
    np.testing.assert_array_equal(disc.unknown_metric_matrix(reg, 0, MetricKind.MAHALANOBIS), np.eye(3))
    rng = np.random.default_rng(1)
    big = disc.UnknownRegistry()
    big.add_label(rng.normal(0, 2.0, 3))
    for z in rng.normal(0, 2.0, (4000, 3)):
        disc.registry_update(big, 0, z)
    a = disc.unknown_metric_matrix(big, 0, MetricKind.MAHALANOBIS)
    np.testing.assert_allclose(a, 4.0 * np.eye(3), atol=0.4)


def test_threshold_dichotomy_and_update_known():
    rng = np.random.default_rng(2)
    stats = two_class_stats()
    for update_known in (False, True):
        d = disc.Discriminator(stats, disc.DiscriminatorConfig(lambda1=0.6, update_known=update_known))
        for p in d.run(rng.normal(5, 6, (300, 2))):
            assert p.known == (p.d1 < p.theta1)
    # the session works on a copy; the caller's stats are untouched
    np.testing.assert_array_equal(stats.centers, two_class_stats().centers)


def test_update_known_moves_known_center():
    d = disc.Discriminator(two_class_stats(), disc.DiscriminatorConfig(lambda1=1.0, update_known=True))
    d.run(np.array([[0.6, 0.0]]))
    np.testing.assert_allclose(d.stats.centers[0], [0.1, 0.0])
    assert d.stats.counts[0] == 6


def test_unknown_covariance_option_runs():
    rng = np.random.default_rng(3)
    d = disc.Discriminator(two_class_stats(), disc.DiscriminatorConfig(lambda1=0.3, unknown_covariance=True))
    preds = d.run(rng.normal(40, 1, (20, 2)))
    assert all(not p.known for p in preds)
    assert sum(d.registry.counts) == 20


def test_frozen_mode_matches_and_does_not_mutate():
    rng = np.random.default_rng(4)
    d = disc.Discriminator(two_class_stats(), disc.DiscriminatorConfig(lambda1=0.5))
    d.run(rng.normal(30, 1, (10, 2)))
    snap = d.registry.to_json()
    z = rng.normal(10, 15, (50, 2))
    a, b = d.predict_frozen(z), d.predict_frozen(z)
    assert [p.tag for p in a] == [p.tag for p in b]
    assert d.registry.to_json() == snap


def test_same_order_same_predictions():
    z = np.random.default_rng(5).normal(5, 20, (200, 2))
    runs = [disc.Discriminator(two_class_stats(), disc.DiscriminatorConfig(lambda1=0.3)).run(z) for _ in range(2)]
    assert [p.tag for p in runs[0]] == [p.tag for p in runs[1]]


def test_ties_go_to_lowest_index():
    s = disc.ClassStats(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.stack([np.eye(2)] * 2), [2, 2])
    p = disc.discriminate(np.zeros(2), s, disc.UnknownRegistry(), disc.DiscriminatorConfig(lambda1=1.0))
    assert p.index == 0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(list(MetricKind)))
def test_known_set_grows_with_lambda1(seed, metric):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((60, 3))
    stats = disc.fit_statistics(x, np.arange(60) % 3)
    z = rng.normal(0, 3, (80, 3))
    prev = set()
    for lam in np.arange(1, 21) * 0.05:
        preds = disc.Discriminator(stats, disc.DiscriminatorConfig(lambda1=lam, metric=metric)).run(z)
        known = {i for i, p in enumerate(preds) if p.known}
        assert prev <= known
        prev = known
