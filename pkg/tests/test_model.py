"""Domain model: parameter layout, delta algebra, tombstones, scene I/O."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatstream.errors import StructuralError, ValidationError
from splatstream.model import (
    EPS_SPARSE,
    LIVE_LOGIT_FLOOR,
    OPACITY,
    TOMBSTONE_LOGIT,
    CanonicalSpace,
    DeltaTensor,
    GaussianFrame,
    GaussianPrimitive,
    apply_delta,
    compose_deltas,
    diff_frames,
    load_scene,
    param_dim,
    quat_to_matrix,
    save_scene,
    sigmoid,
    logit,
)


def _delta_strategy(base_count=8, width=17):
    value = st.floats(min_value=-10.0, max_value=10.0, allow_nan=False)
    block = st.lists(value, min_size=width, max_size=width).map(np.array)
    entries = st.dictionaries(st.integers(0, base_count - 1), block, max_size=base_count)
    return entries.map(
        lambda e: DeltaTensor(base_count=base_count, param_width=width, entries=e)
    )


class TestDeltaAlgebra:
    @given(_delta_strategy(), _delta_strategy())
    @settings(max_examples=50, deadline=None)
    def test_compose_commutative(self, a, b):
        ab = compose_deltas([a, b]).dense()
        ba = compose_deltas([b, a]).dense()
        np.testing.assert_array_equal(ab, ba)

    @given(_delta_strategy(), _delta_strategy(), _delta_strategy())
    @settings(max_examples=50, deadline=None)
    def test_compose_associative_up_to_eps(self, a, b, c):
        left = compose_deltas([compose_deltas([a, b]), c]).dense()
        right = compose_deltas([a, compose_deltas([b, c])]).dense()
        assert np.max(np.abs(left - right)) <= 2 * EPS_SPARSE

    @given(_delta_strategy())
    @settings(max_examples=50, deadline=None)
    def test_negate_is_inverse(self, d):
        zero = compose_deltas([d, d.negate()])
        assert zero.is_empty()

    @given(_delta_strategy())
    @settings(max_examples=50, deadline=None)
    def test_empty_is_identity(self, d):
        # identity up to the sparsity threshold: composition may drop
        # entries whose every component is below EPS_SPARSE
        e = DeltaTensor.empty(d.base_count, d.param_width)
        diff = np.abs(compose_deltas([d, e]).dense() - d.dense())
        assert diff.max(initial=0.0) <= EPS_SPARSE

    def test_from_dense_round_trip(self, rng):
        dense = np.zeros((6, 17))
        dense[2] = rng.normal(size=17)
        dense[5] = rng.normal(size=17)
        d = DeltaTensor.from_dense(dense)
        assert sorted(d.entries) == [2, 5]
        np.testing.assert_array_equal(d.dense(), dense)

    def test_from_dense_drops_subthreshold_rows(self):
        dense = np.zeros((3, 17))
        dense[1] = EPS_SPARSE / 10
        assert DeltaTensor.from_dense(dense).is_empty()

    def test_l1_norm_and_entry_count(self):
        d = DeltaTensor(base_count=4, param_width=17,
                        entries={0: np.full(17, 0.5), 3: np.full(17, -1.0)})
        assert d.entry_count == 2
        assert d.l1_norm() == pytest.approx(17 * 0.5 + 17 * 1.0)

    def test_out_of_range_index_rejected(self):
        with pytest.raises(StructuralError):
            DeltaTensor(base_count=2, param_width=17, entries={5: np.zeros(17)})

    def test_non_finite_rejected(self):
        bad = np.zeros(17)
        bad[0] = np.nan
        with pytest.raises(ValidationError):
            DeltaTensor(base_count=2, param_width=17, entries={0: bad})

    def test_compose_mismatched_bases_rejected(self):
        a = DeltaTensor.empty(2, 17)
        b = DeltaTensor.empty(3, 17)
        with pytest.raises(StructuralError):
            compose_deltas([a, b])


class TestApplyDiff:
    def test_diff_then_apply_is_exact(self, rng, frame_factory):
        a = frame_factory(rng, 6)
        b = a.with_params(a.params + rng.normal(0, 0.1, a.params.shape))
        space = CanonicalSpace(frame=a, capacity_U=a.live_count())
        d = diff_frames(a, b)
        np.testing.assert_array_equal(apply_delta(space, d).params, b.params)

    def test_apply_checks_base(self, rng, frame_factory):
        a = frame_factory(rng, 6)
        space = CanonicalSpace(frame=a, capacity_U=a.live_count())
        with pytest.raises(StructuralError):
            apply_delta(space, DeltaTensor.empty(7, 17))

    def test_frame_index_override(self, rng, frame_factory):
        a = frame_factory(rng, 4)
        space = CanonicalSpace(frame=a, capacity_U=a.live_count())
        out = apply_delta(space, DeltaTensor.empty(4, 17), frame_index=9)
        assert out.frame_index == 9
        assert out.group_key == space.key_index


class TestFrames:
    def test_tombstone_excluded_from_live_count(self, rng, frame_factory):
        f = frame_factory(rng, 5)
        p = f.params.copy()
        p[2, OPACITY] = TOMBSTONE_LOGIT
        g = f.with_params(p)
        assert g.count == 5
        assert g.live_count() == 4
        assert not g.live_mask()[2]
        assert LIVE_LOGIT_FLOOR > TOMBSTONE_LOGIT

    def test_primitive_activation_round_trip(self):
        prim = GaussianPrimitive(
            position=np.array([0.1, -0.2, 0.3]),
            rotation=np.array([1.0, 0.0, 0.0, 0.0]),
            scale=np.array([0.1, 0.2, 0.3]),
            opacity=0.7,
            color=np.array([0.2, 0.5, 0.9]),
            sh=np.zeros(3),
        )
        frame = GaussianFrame.from_primitives([prim])
        back = frame.primitive(0)
        np.testing.assert_allclose(back.position, prim.position)
        np.testing.assert_allclose(back.scale, prim.scale, rtol=1e-12)
        assert back.opacity == pytest.approx(prim.opacity, rel=1e-9)
        np.testing.assert_allclose(back.color, prim.color, rtol=1e-9)

    def test_params_are_immutable(self, rng, frame_factory):
        f = frame_factory(rng, 3)
        with pytest.raises(ValueError):
            f.params[0, 0] = 1.0

    def test_canonical_space_requires_self_anchor(self, rng, frame_factory):
        f = frame_factory(rng, 3)
        shifted = GaussianFrame(params=f.params, frame_index=2, group_key=0)
        with pytest.raises(StructuralError):
            CanonicalSpace(frame=shifted, capacity_U=3)

    def test_canonical_space_capacity_floor(self, rng, frame_factory):
        f = frame_factory(rng, 3)
        with pytest.raises(StructuralError):
            CanonicalSpace(frame=f, capacity_U=2)

    def test_param_dim_by_degree(self):
        assert param_dim(0) == 17
        assert param_dim(1) == 26
        with pytest.raises(ValidationError):
            param_dim(2)


class TestActivations:
    def test_sigmoid_logit_inverse(self, rng):
        x = rng.uniform(0.01, 0.99, 32)
        np.testing.assert_allclose(sigmoid(logit(x)), x, rtol=1e-12)

    def test_quat_to_matrix_orthonormal(self, rng):
        q = rng.normal(size=(10, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        m = quat_to_matrix(q)
        eye = np.einsum("nij,nkj->nik", m, m)
        np.testing.assert_allclose(eye, np.broadcast_to(np.eye(3), (10, 3, 3)), atol=1e-12)
        np.testing.assert_allclose(np.linalg.det(m), 1.0, atol=1e-12)


class TestSceneIO:
    def test_round_trip(self, tmp_path, rng, frame_factory):
        frames = [frame_factory(rng, 5).with_params(frame_factory(rng, 5).params, frame_index=t)
                  for t in range(3)]
        path = tmp_path / "scene.gssc"
        save_scene(path, frames)
        back = load_scene(path)
        assert len(back) == 3
        for a, b in zip(frames, back):
            np.testing.assert_array_equal(a.params, b.params)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "scene.gssc"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ValidationError):
            load_scene(path)

    def test_truncated_rejected(self, tmp_path, rng, frame_factory):
        path = tmp_path / "scene.gssc"
        save_scene(path, [frame_factory(rng, 5)])
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(ValidationError):
            load_scene(path)
