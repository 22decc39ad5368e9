import json

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra import numpy as hnp

from metaexo import kinematics as km
from metaexo.errors import DegenerateBone, InvalidSkeleton, TooShort, TopologyMismatch

vec3 = hnp.arrays(np.float64, 3, elements=st.floats(-1, 1, allow_nan=False))


def unit(v):
    return v / np.linalg.norm(v)


def random_unit(rng):
    return unit(rng.normal(size=3))


def random_rotation(rng):
    return km.rotation_about(random_unit(rng), rng.uniform(-np.pi, np.pi))


def random_q(model, rng, margin=0.05):
    return rng.uniform(model.lower + margin, model.upper - margin)


class TestBoneVector:
    def test_examples(self):
        np.testing.assert_allclose(km.bone_vector((0, 0, 0), (0, 0, 2)), [0, 0, 1])
        np.testing.assert_allclose(km.bone_vector((1, 1, 1), (2, 2, 1)), [0.7071067811865476, 0.7071067811865476, 0])

    def test_degenerate(self):
        with pytest.raises(DegenerateBone):
            km.bone_vector((1, 2, 3), (1, 2, 3))

    @given(vec3, vec3)
    def test_unit_length(self, a, b):
        assume(np.linalg.norm(a - b) > 1e-6)
        assert abs(np.linalg.norm(km.bone_vector(a, b)) - 1.0) < 1e-12


class TestRodrigues:
    def test_identity_for_equal(self):
        np.testing.assert_allclose(km.rodrigues_align([0, 0, 1], [0, 0, 1]), np.eye(3), atol=1e-15)

    def test_quarter_turn(self):
        R = km.rodrigues_align([1, 0, 0], [0, 1, 0])
        np.testing.assert_allclose(R, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)

    def test_antiparallel_convention(self):
        R = km.rodrigues_align([1, 0, 0], [-1, 0, 0])
        np.testing.assert_allclose(R, np.diag([-1.0, -1.0, 1.0]), atol=1e-15)

    @given(st.integers(0, 2**32 - 1))
    def test_aligns_and_is_rotation(self, seed):
        rng = np.random.default_rng(seed)
        v, b = random_unit(rng), random_unit(rng)
        R = km.rodrigues_align(v, b)
        assert np.linalg.norm(R @ v - b) < 1e-9
        assert km.is_rotation(R)

    @given(st.integers(0, 2**32 - 1), st.floats(1e-12, 1e-3))
    def test_near_antiparallel(self, seed, eps):
        rng = np.random.default_rng(seed)
        v = random_unit(rng)
        b = unit(-v + eps * random_unit(rng))
        R = km.rodrigues_align(v, b)
        assert np.linalg.norm(R @ v - b) < 1e-9
        assert km.is_rotation(R)

    def test_axis_is_cross_product(self, rng):
        v, b = random_unit(rng), random_unit(rng)
        R = km.rodrigues_align(v, b)
        axis = unit(np.cross(v, b))
        np.testing.assert_allclose(R @ axis, axis, atol=1e-12)


class TestFrameTransform:
    def test_identity_q(self, rng):
        R = random_rotation(rng)
        np.testing.assert_allclose(km.frame_transform(R, np.eye(3)), R, atol=1e-15)

    @given(st.integers(0, 2**32 - 1))
    def test_conjugation_is_rotation(self, seed):
        rng = np.random.default_rng(seed)
        R, Q = random_rotation(rng), random_rotation(rng)
        out = km.frame_transform(R, Q)
        assert km.is_rotation(out)
        # conjugation preserves the rotation angle
        assert np.trace(out) == pytest.approx(np.trace(R), abs=1e-12)


class TestTreeAndFK:
    def test_invalid_trees(self):
        with pytest.raises(InvalidSkeleton):
            km.KinematicTree.from_bones(["a", "b"], [-1, -1], [], [])
        with pytest.raises(InvalidSkeleton):
            km.KinematicTree.from_bones(["a", "b"], [-1, 0], [[0, 0, 2]], [1.0])
        with pytest.raises(InvalidSkeleton):
            km.KinematicTree.from_bones(["a", "b", "c"], [-1, 2, 1], [[0, 0, 1], [0, 0, 1]], [1, 1])

    def test_rest_pose_fk(self):
        model = km.HumanModel()
        np.testing.assert_allclose(model.tree().rest_positions(), model.fk(np.zeros(8)), atol=1e-15)

    @given(st.integers(0, 2**32 - 1))
    def test_fk_preserves_bone_lengths(self, seed):
        rng = np.random.default_rng(seed)
        tree = km.HumanModel().tree()
        rots = [random_rotation(rng) for _ in tree.bones]
        P = km.forward_kinematics(tree, rots, rng.normal(size=3)).positions
        for i in tree.bones:
            assert abs(np.linalg.norm(P[i] - P[tree.parents[i]]) - tree.lengths[i]) < 1e-9

    @given(st.integers(0, 2**32 - 1))
    def test_source_rotations_reproduce_frame(self, seed):
        rng = np.random.default_rng(seed)
        model = km.HumanModel()
        tree = model.tree()
        frame = km.SkeletonFrame(model.fk(random_q(model, rng)))
        rots = km.source_rotations(frame, tree)
        for R, i in zip(rots, tree.bones):
            b = km.bone_vector(frame.positions[tree.parents[i]], frame.positions[i])
            assert np.linalg.norm(R @ tree.rest_dirs[i] - b) < 1e-9
        out = km.forward_kinematics(tree, rots, frame.positions[tree.root])
        np.testing.assert_allclose(out.positions, frame.positions, atol=1e-9)


class TestRetarget:
    @given(st.integers(0, 2**32 - 1))
    def test_identity_retarget(self, seed):
        rng = np.random.default_rng(seed)
        model = km.HumanModel()
        tree = model.tree()
        frame = km.SkeletonFrame(model.fk(random_q(model, rng)))
        out = km.retarget(frame, tree, tree, target_root=frame.positions[0])
        np.testing.assert_allclose(out.positions, frame.positions, atol=1e-9)

    @given(st.integers(0, 2**32 - 1), st.floats(0.5, 2.0))
    def test_bone_lengths_follow_target(self, seed, scale):
        rng = np.random.default_rng(seed)
        model = km.HumanModel()
        src = model.tree()
        tgt = src.scaled(scale)
        frame = km.SkeletonFrame(model.fk(random_q(model, rng)))
        out = km.retarget(frame, src, tgt, Q=random_rotation(rng)).positions
        for i in tgt.bones:
            assert abs(np.linalg.norm(out[i] - out[tgt.parents[i]]) - tgt.lengths[i]) < 1e-9

    def test_topology_mismatch(self):
        a = km.KinematicTree.from_bones(["r", "a", "b"], [-1, 0, 1], [[0, 0, 1]] * 2, [1, 1])
        b = km.KinematicTree.from_bones(["r", "a", "b"], [-1, 0, 0], [[0, 0, 1]] * 2, [1, 1])
        with pytest.raises(TopologyMismatch):
            km.retarget(km.SkeletonFrame(a.rest_positions()), a, b)


class TestHumanModel:
    def test_dof_layout(self):
        model = km.HumanModel()
        assert model.n_dof == 8
        assert model.elbow_index("r") == 3 and model.elbow_index("l") == 7
        assert np.all(model.lower < model.upper)

    def test_jacobian_matches_finite_differences(self, rng):
        model = km.HumanModel()
        q = random_q(model, rng)
        J = model.jacobian(q)
        h = 1e-6
        num = np.column_stack([(model.fk(q + h * e).ravel() - model.fk(q - h * e).ravel()) / (2 * h)
                               for e in np.eye(model.n_dof)])
        np.testing.assert_allclose(J, num, atol=1e-8)

    def test_elbow_flexion_geometry(self):
        model = km.HumanModel()
        q = np.zeros(8)
        q[3] = np.pi / 2
        P = model.fk(q)
        elbow, wrist = P[2], P[3]
        # forearm perpendicular to the hanging upper arm
        assert abs(np.dot(wrist - elbow, [0, 0, -1])) < 1e-12


class TestIK:
    @given(st.integers(0, 2**32 - 1))
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        model = km.HumanModel()
        q_true = random_q(model, rng, margin=0.1)
        q0 = np.clip(q_true + rng.normal(scale=0.05, size=8), model.lower, model.upper)
        res = km.inverse_kinematics(model, km.SkeletonFrame(model.fk(q_true)), q0)
        assert res.residual < 1e-10
        assert abs(res.q[3] - q_true[3]) < 1e-6
        assert abs(res.q[7] - q_true[7]) < 1e-6

    def test_rest_pose_from_zero(self):
        model = km.HumanModel()
        res = km.inverse_kinematics(model, km.SkeletonFrame(model.fk(np.zeros(8))))
        np.testing.assert_allclose(res.q, 0.0, atol=1e-12)
        assert res.converged

    def test_unreachable_target_lower_bound(self):
        model = km.HumanModel()
        P = model.fk(np.zeros(8))
        gap = 0.2
        P[3] = P[1] + np.array([0, 0, -(0.30 + 0.25 + gap)])
        res = km.inverse_kinematics(model, km.SkeletonFrame(P))
        assert res.residual >= gap ** 2 - 1e-12

    def test_limits_respected(self):
        model = km.HumanModel()
        q = np.zeros(8)
        q[3] = 2.6
        P = model.fk(q)
        # push the wrist further than the elbow limit allows
        P[3] = P[2] + (P[2] - P[1]) * 0.1 + (P[3] - P[2])
        res = km.inverse_kinematics(model, km.SkeletonFrame(P))
        assert np.all(res.q >= model.lower) and np.all(res.q <= model.upper)

    def test_sequence_warm_start_and_empty(self, rng):
        model = km.HumanModel()
        qs = [random_q(model, rng, 0.2)]
        for _ in range(5):
            qs.append(np.clip(qs[-1] + rng.normal(scale=0.02, size=8), model.lower, model.upper))
        frames = [km.SkeletonFrame(model.fk(q)) for q in qs]
        res = km.solve_sequence(model, frames, q_init=qs[0])
        for r, q in zip(res, qs):
            assert abs(r.q[3] - q[3]) < 1e-6
        with pytest.raises(TooShort):
            km.solve_sequence(model, [])


class TestMotionFiles:
    def test_round_trip(self, tmp_path, rng):
        model = km.HumanModel()
        tree = model.tree()
        frames = [model.fk(random_q(model, rng)) for _ in range(3)]
        path = tmp_path / "m.json"
        km.save_motion(path, tree, frames, fps=30.0)
        motion = km.load_motion(path)
        assert motion.fps == 30.0 and len(motion.frames) == 3
        np.testing.assert_allclose(motion.frames[1].positions, frames[1])

    def test_malformed_json_names_location(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"fps": 30,\n "names": [}')
        with pytest.raises(InvalidSkeleton, match=r"bad.json:2:"):
            km.load_motion(path)

    def test_missing_field_named(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps({"fps": 30, "names": ["a"], "parents": [-1], "rest_dirs": [], "lengths": []}))
        with pytest.raises(InvalidSkeleton, match="frames"):
            km.load_motion(path)

    def test_empty_frames(self, tmp_path):
        path = tmp_path / "m.json"
        km.save_motion(path, km.HumanModel().tree(), [], fps=30.0)
        with pytest.raises(TooShort):
            km.load_motion(path)
