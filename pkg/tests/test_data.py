import json

import numpy as np
import pytest

from mhformer import data


@pytest.fixture(params=["h36m17", "toy5"])
def skeleton(request):
    return data.get_skeleton(request.param)


def test_skeletons_are_valid(skeleton):
    assert skeleton.parents[0] == 0
    perm = list(range(skeleton.num_joints))
    for l, r in skeleton.pairs:
        perm[l], perm[r] = r, l
    assert [perm[p] for p in perm] == list(range(skeleton.num_joints))


def test_skeleton_validation_errors():
    with pytest.raises(data.PoseFormatError) as e:
        data.Skeleton(["a", "b"], [0, 2], [], [1.0, 1.0]).validate()
    assert e.value.field == "skeleton.parents"
    with pytest.raises(data.PoseFormatError):
        data.Skeleton(["a", "b", "c"], [0, 0, 0], [(1, 2), (2, 1)], [1.0, 1.0, 1.0]).validate()
    with pytest.raises(ValueError):
        data.get_skeleton("nope")


def test_synthetic_motion_preserves_bone_lengths(skeleton):
    seq = data.synth_generate(skeleton, 200, seed=3)
    got = data.bone_lengths(seq.frames, skeleton)
    want = np.asarray(skeleton.bone_lengths_mm[1:])
    assert np.max(np.abs(got - want) / want) < 1e-9


def test_synthetic_motion_is_seeded(skeleton):
    a = data.synth_generate(skeleton, 50, seed=1).frames
    assert np.array_equal(a, data.synth_generate(skeleton, 50, seed=1).frames)
    assert not np.array_equal(a, data.synth_generate(skeleton, 50, seed=2).frames)


def test_zero_amplitude_is_static(skeleton):
    seq = data.synth_generate(skeleton, 30, seed=0, motion=data.MotionParams(amplitude=0.0, turn_rate_hz=0.0))
    assert np.array_equal(seq.frames, np.broadcast_to(seq.frames[:1], seq.frames.shape))


def test_projection_rules():
    cam = data.CameraModel(fx=1000, fy=900, cx=320, cy=240)
    sk = data.toy_skeleton()
    on_axis = data.PoseSequence(np.tile([0.0, 0.0, 3000.0], (1, sk.num_joints, 1)), sk)
    np.testing.assert_array_equal(data.project(on_axis, cam).frames[0, 0], [320, 240])
    near = data.PoseSequence(np.tile([100.0, -50.0, 2000.0], (1, sk.num_joints, 1)), sk)
    far = data.PoseSequence(np.tile([100.0, -50.0, 4000.0], (1, sk.num_joints, 1)), sk)
    off_near = data.project(near, cam).frames[0, 0] - [320, 240]
    off_far = data.project(far, cam).frames[0, 0] - [320, 240]
    np.testing.assert_allclose(off_far, off_near / 2, rtol=1e-14)
    behind = data.PoseSequence(np.tile([0.0, 0.0, -1.0], (1, sk.num_joints, 1)), sk)
    with pytest.raises(ValueError):
        data.project(behind, cam)


def test_projection_matches_per_point_arithmetic(rng):
    cam = data.default_camera(yaw_rad=0.4)
    sk = data.h36m_skeleton()
    seq = data.synth_generate(sk, 4, seed=9)
    uv = data.project(seq, cam).frames
    R, t = cam.rotation, cam.translation
    for f in range(4):
        for j in range(sk.num_joints):
            X = seq.frames[f, j]
            pc = [sum(R[i][k] * X[k] for k in range(3)) + t[i] for i in range(3)]
            want = [cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy]
            np.testing.assert_allclose(uv[f, j], want, atol=1e-12 * 1000, rtol=1e-12)


def test_back_projection_roundtrip():
    cam = data.default_camera()
    seq = data.synth_generate(data.h36m_skeleton(), 10, seed=0)
    pc = data.to_camera_sequence(seq, cam).frames
    uv = data.project(seq, cam).frames
    np.testing.assert_allclose(data.back_project(uv, pc[..., 2], cam), pc, atol=1e-9)


def test_default_camera_sees_the_subject():
    cam = data.default_camera()
    seq = data.synth_generate(data.h36m_skeleton(), 500, seed=0)
    pc = data.to_camera_sequence(seq, cam).frames
    uv = data.project(seq, cam).frames
    assert (pc[..., 2] > 3000).all()
    assert (uv >= 0).all() and (uv <= 1000).all()


def test_noise(rng):
    sk = data.toy_skeleton()
    clean = data.PoseSequence(rng.uniform(0, 1000, size=(10_000, sk.num_joints, 2)), sk)
    assert np.array_equal(data.add_noise(clean, 0.0, 1).frames, clean.frames)
    noisy = data.add_noise(clean, 5.0, 42)
    assert np.array_equal(noisy.frames, data.add_noise(clean, 5.0, 42).frames)
    resid = (noisy.frames - clean.frames).ravel()
    assert resid.size == 10 ** 5
    assert abs(resid.std() - 5.0) / 5.0 < 0.02
    with pytest.raises(ValueError):
        data.add_noise(clean, -1.0, 0)


def test_normalize_screen():
    np.testing.assert_allclose(data.normalize_screen([[0.0, 0.0], [1000.0, 500.0]], 1000, 500), [[-1, -0.5], [1, 0.5]])


def test_targets_are_root_relative_metres():
    seq = data.synth_generate(data.h36m_skeleton(), 5, seed=0)
    y = data.model_targets(seq)
    assert np.array_equal(y[:, 0], np.zeros((5, 3)))
    np.testing.assert_allclose(y[:, 3] * 1000, seq.frames[:, 3] - seq.frames[:, 0], atol=1e-9)


def test_windows_edge_replication():
    idx = list(data.window_indices(5, 3))
    assert len(idx) == 5
    assert list(idx[0]) == [0, 0, 1] and list(idx[-1]) == [3, 4, 4]
    assert [list(w) for w in data.window_indices(4, 1)] == [[0], [1], [2], [3]]
    x = np.arange(7.0)[:, None, None] * np.ones((7, 2, 2))
    xs, _ = data.window_arrays(x, None, 5)
    for k in range(7):
        assert xs[k, 2, 0, 0] == k
    with pytest.raises(ValueError):
        list(data.window_indices(5, 4))


def test_pose_json_roundtrip_exact(tmp_path, rng):
    sk = data.h36m_skeleton()
    seq = data.PoseSequence(rng.normal(0, 1000, size=(6, 17, 3)), sk, 50.0, "test", {"k": [1, 2]})
    path = tmp_path / "p.json"
    data.save_pose_json(seq, path)
    back = data.load_pose_json(path)
    assert np.array_equal(back.frames, seq.frames)
    assert back.skeleton.same_as(sk) and back.fps == 50.0 and back.meta == {"k": [1, 2]}
    assert back.skeleton.rest_dirs is not None


def test_pose_json_errors(tmp_path):
    sk = data.toy_skeleton()
    doc = data.pose_to_json(data.PoseSequence(np.zeros((2, 5, 2)), sk))
    for key in ("frames", "skeleton", "dims"):
        bad = dict(doc)
        del bad[key]
        with pytest.raises(data.PoseFormatError) as e:
            data.pose_from_json(bad)
        assert e.value.field == key
    short = dict(doc, frames=np.zeros((2, 4, 2)).tolist())
    with pytest.raises(data.PoseFormatError):
        data.pose_from_json(short)
    p = tmp_path / "nan.json"
    p.write_text(json.dumps(doc).replace("0.0", "NaN", 1))
    with pytest.raises(data.PoseFormatError):
        data.load_pose_json(p)
    p.write_text("{not json")
    with pytest.raises(data.PoseFormatError):
        data.load_pose_json(p)
