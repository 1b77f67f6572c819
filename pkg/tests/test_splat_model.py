import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatforensics.errors import (
    ActivationRangeError,
    EmptyMaskError,
    MissingNormStatsError,
    NonFiniteInputError,
    OutOfRangeError,
)
from splatforensics.splat_model import (
    FEATURE_GROUPS,
    FeatureGroupMask,
    GaussianScene,
    NormalizationSpec,
    RawScene,
    activate,
    assemble_features,
    deactivate,
    group_width,
    morton_code,
    morton_codes,
    scene_stats,
    sh_degree_from_width,
    sh_rest_width,
)

from conftest import random_raw


def one_gaussian(**kw):
    base = dict(
        position=[[0, 0, 0]],
        f_dc=[[0, 0, 0]],
        f_rest=np.zeros((1, 0)),
        opacity_logit=[0.0],
        log_scale=[[0, 0, 0]],
        quat=[[1, 0, 0, 0]],
        sh_degree=0,
    )
    base.update(kw)
    return RawScene(**base)


def test_activate_trivial_values():
    g = activate(one_gaussian(quat=[[2, 0, 0, 0]], log_scale=[[0, math.log(2), math.log(3)]]))
    assert g.opacity[0] == 0.5
    np.testing.assert_array_equal(g.quat_unit[0], [1, 0, 0, 0])
    np.testing.assert_allclose(g.scale[0], [1, 2, 3], rtol=1e-6)


def test_zero_quaternion_maps_to_identity():
    g = activate(one_gaussian(quat=[[0, 0, 0, 0]]))
    np.testing.assert_array_equal(g.quat_unit[0], [1, 0, 0, 0])


def test_activate_matches_scalar_reference(rng):
    raw = random_raw(rng, 100)
    g = activate(raw)
    for i in range(raw.count):
        z = float(raw.opacity_logit[i])
        assert g.opacity[i] == pytest.approx(1 / (1 + math.exp(-z)), abs=1e-12)
        for k in range(3):
            assert g.scale[i, k] == pytest.approx(math.exp(float(raw.log_scale[i, k])), rel=1e-12)
        q = [float(v) for v in raw.quat[i]]
        nrm = math.sqrt(sum(v * v for v in q))
        for k in range(4):
            assert g.quat_unit[i, k] == pytest.approx(q[k] / nrm, abs=1e-12)
    np.testing.assert_array_equal(g.sh0, raw.f_dc.astype(np.float64))
    np.testing.assert_array_equal(g.sh_rest, raw.f_rest.astype(np.float64))


def test_activate_rejects_nan():
    with pytest.raises(NonFiniteInputError, match="opacity_logit at Gaussian 0"):
        activate(one_gaussian(opacity_logit=[np.nan]))


def test_deactivate_trivial():
    g = activate(one_gaussian())
    raw = deactivate(g)
    assert raw.opacity_logit[0] == 0.0
    np.testing.assert_array_equal(raw.log_scale[0], [0, 0, 0])


@pytest.mark.parametrize("op", [0.0, 1.0])
def test_deactivate_rejects_saturated_opacity(op):
    g = activate(one_gaussian()).with_(opacity=[op])
    with pytest.raises(ActivationRangeError):
        deactivate(g)


def test_round_trips(rng):
    raw = random_raw(rng, 200)
    back = deactivate(activate(raw))
    for name in ("position", "f_dc", "f_rest", "opacity_logit", "log_scale"):
        np.testing.assert_allclose(getattr(back, name), getattr(raw, name), atol=1e-5)
    g = activate(raw)
    again = activate(deactivate(g))
    for name in ("position", "opacity", "scale", "quat_unit", "sh0", "sh_rest"):
        np.testing.assert_allclose(getattr(again, name), getattr(g, name), atol=1e-5, rtol=1e-5)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 40), degree=st.integers(0, 3), spread=st.floats(0.01, 30))
def test_activate_outputs_are_valid(seed, n, degree, spread):
    rng = np.random.default_rng(seed)
    raw = random_raw(rng, n, degree)
    raw = RawScene(
        position=raw.position,
        f_dc=raw.f_dc,
        f_rest=raw.f_rest,
        opacity_logit=raw.opacity_logit * spread,
        log_scale=raw.log_scale,
        quat=raw.quat * spread,
        sh_degree=degree,
    )
    g = activate(raw)
    assert np.all((g.opacity >= 0) & (g.opacity <= 1))
    assert np.all(g.scale > 0)
    assert np.all(np.abs(np.linalg.norm(g.quat_unit, axis=1) - 1) <= 1e-6)


def test_sh_width_inversion():
    assert sh_rest_width(3) == 45
    assert sh_degree_from_width(45) == 3
    assert sh_degree_from_width(24) == 2
    assert sh_degree_from_width(0) == 0
    assert sh_degree_from_width(20) is None


def _norm():
    return NormalizationSpec((-3.0, -3.0, -3.0), (0.5, 0.5, 0.5))


def test_feature_width_all_groups(rng):
    g = activate(random_raw(rng, 10))
    assert assemble_features(g, FeatureGroupMask(), _norm()).shape == (10, 59)


def test_feature_without_opacity_drops_column(rng):
    g = activate(random_raw(rng, 10))
    f = assemble_features(g, FeatureGroupMask().without("opacity"), _norm())
    assert f.shape == (10, 58)
    for j in range(f.shape[1]):
        assert not np.array_equal(f[:, j], g.opacity)


def test_every_mask_width(rng):
    g = activate(random_raw(rng, 5))
    for bits in itertools.product([False, True], repeat=6):
        if not any(bits):
            with pytest.raises(EmptyMaskError):
                FeatureGroupMask(*bits)
            continue
        mask = FeatureGroupMask(*bits)
        expected = sum(group_width(grp, 3) for grp, on in zip(FEATURE_GROUPS, bits) if on)
        assert assemble_features(g, mask, _norm()).shape[1] == expected == mask.width(3)


def test_single_point_position_centres_to_zero():
    g = activate(one_gaussian(position=[[5, 5, 5]]))
    f = assemble_features(g, FeatureGroupMask.from_groups(["position"]))
    np.testing.assert_array_equal(f, [[0, 0, 0]])


def test_scale_without_stats_fails(rng):
    g = activate(random_raw(rng, 3))
    with pytest.raises(MissingNormStatsError):
        assemble_features(g, FeatureGroupMask(), None)
    assemble_features(g, FeatureGroupMask().without("scale"), None)


def test_features_are_permutation_equivariant(rng):
    g = activate(random_raw(rng, 30))
    perm = rng.permutation(30)
    a = assemble_features(g, FeatureGroupMask(), _norm())
    b = assemble_features(g.take(perm), FeatureGroupMask(), _norm())
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_stored_domain_uses_logits(rng):
    raw = random_raw(rng, 8)
    g = activate(raw)
    f = assemble_features(g, FeatureGroupMask.from_groups(["opacity"]), NormalizationSpec(domain="stored"))
    np.testing.assert_allclose(f[:, 0], raw.opacity_logit, atol=1e-5)


def test_morton_trivial():
    assert morton_code((0, 0, 0), 4) == 0
    assert morton_code((1, 0, 0), 1) == 1
    assert morton_code((0, 1, 0), 1) == 2
    assert morton_code((0, 0, 1), 1) == 4


@pytest.mark.parametrize("bits", range(0, 7))
def test_morton_bijection(bits):
    side = 1 << bits
    cells = np.array(list(itertools.product(range(side), repeat=3)))
    codes = morton_codes(cells, bits)
    assert sorted(codes.tolist()) == list(range(side**3))
    if bits <= 3:
        assert [morton_code(c, bits) for c in cells] == codes.tolist()


def test_morton_out_of_range():
    with pytest.raises(OutOfRangeError):
        morton_code((2, 0, 0), 1)
    with pytest.raises(OutOfRangeError):
        morton_code((0, 0, 0), 22)


def test_morton_21_bits_matches_scalar(rng):
    cells = rng.integers(0, 1 << 21, (50, 3))
    assert morton_codes(cells, 21).tolist() == [morton_code(c, 21) for c in cells]


def test_stats_trivial():
    g = GaussianScene(
        position=[[0, 0, 0], [1, 2, 3]],
        opacity=[0, 1],
        scale=np.ones((2, 3)),
        quat_unit=[[1, 0, 0, 0]] * 2,
        sh0=np.zeros((2, 3)),
        sh_rest=np.zeros((2, 0)),
        sh_degree=0,
    )
    s = scene_stats(g)
    assert s.groups["opacity"].mean[0] == 0.5
    assert s.groups["opacity"].min[0] == 0 and s.groups["opacity"].max[0] == 1
    single = scene_stats(g.take([1]))
    for ch in single.groups.values():
        assert np.all(ch.std == 0)


def test_stats_match_two_pass_reference(rng):
    g = activate(random_raw(rng, 1000))
    s = scene_stats(g)
    assert np.all(s.bbox_min <= s.bbox_max)
    for name, arr in [("position", g.position), ("scale", g.scale), ("sh_rest", g.sh_rest)]:
        for j in range(arr.shape[1]):
            col = [float(v) for v in arr[:, j]]
            mean = sum(col) / len(col)
            var = sum((v - mean) ** 2 for v in col) / len(col)
            assert s.groups[name].mean[j] == pytest.approx(mean, abs=1e-6)
            assert s.groups[name].std[j] == pytest.approx(math.sqrt(var), abs=1e-6)
            assert s.groups[name].min[j] == min(col)
            assert s.groups[name].max[j] == max(col)
