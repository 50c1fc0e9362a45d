import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import ring_rig
from gradcheck import numeric_grad, rel_error
from posegraph import diffcore as dc
from posegraph.geometry import Rig, project_many
from posegraph.lifter import (
    PROFILES,
    EmptyGroup,
    LifterArch,
    LifterNet,
    LifterTrainConfig,
    PairBank,
    Supervision,
    build_lift_input,
    input_length,
    lift,
    lift_many,
    reprojection_loss,
    train_lifter,
    triangulation_baseline,
)
from posegraph.scene_forge import SkeletonDetection, SynthConfig, generate_track, make_rig


def _views(rig, joints, visible=None, noise=0.0, rng=None):
    out = []
    for c, cam in enumerate(rig):
        uv, _ = project_many(cam, joints)
        if noise:
            uv = uv + rng.normal(0, noise, uv.shape)
        vis = np.ones(len(joints), bool) if visible is None else visible[c]
        kps = np.zeros((len(joints), 4))
        kps[vis, 0] = 1
        kps[vis, 1:3] = uv[vis]
        kps[vis, 3] = 0.8
        out.append(SkeletonDetection(cam.id, kps))
    return out


def _body(rng, nk):
    return rng.uniform([-400, -400, 100], [400, 400, 1800], size=(nk, 3))


def _blocks(x, nc, nk):
    return x.reshape(nc, nk, 14)


def test_paper_input_and_output_sizes():
    assert input_length(25, 4) == 1400
    net = LifterNet(LifterArch(25, 4, (8,)), seed=0)
    pose = lift(net, np.zeros(1400))
    assert pose.shape == (25, 3) and pose.size == 75


def test_availability_rules():
    rig = ring_rig(4)
    rng = np.random.default_rng(0)
    joints = _body(rng, 5)
    vis = np.ones((4, 5), bool)
    vis[1:, 0] = False  # joint 0 only in camera 0
    vis[:, 1] = False  # joint 1 nowhere
    vis[2:, 2] = False  # joint 2 in two cameras
    x = _blocks(build_lift_input(_views(rig, joints, vis), rig), 4, 5)
    assert np.all(x[:, 0, 13] == 0) and not x[:, 0, 10:13].any()
    assert np.all(x[:, 1, 13] == 0) and not x[:, 1, 10:13].any()
    assert np.all(x[:, 2, 13] == 1)
    for k in range(5):
        assert np.all(x[:, k, 10:] == x[0, k, 10:])
    # view slots of the absent camera stay zero
    assert not x[1:, 0, :10].any()


def test_noiseless_triangulation_slots():
    rig = ring_rig(3)
    joints = _body(np.random.default_rng(1), 15)
    x = _blocks(build_lift_input(_views(rig, joints), rig), 3, 15)
    assert np.abs(x[0, :, 10:13] - joints / 1000.0).max() < 1e-9


def test_empty_group():
    with pytest.raises(EmptyGroup):
        build_lift_input([], ring_rig(2))


def test_lift_deterministic_and_shape_checked():
    net = LifterNet(LifterArch(15, 3, (16, 16)), seed=2)
    x = np.random.default_rng(3).normal(size=input_length(15, 3))
    assert np.array_equal(lift(net, x), lift(net, x))
    with pytest.raises(dc.ShapeMismatch):
        lift(net, x[:-1])


def test_zero_weights_give_bias_pose():
    net = LifterNet(LifterArch(25, 2, (4, 4)), seed=0)
    for layer in net.layers:
        layer.weight.value[:] = 0.0
    bias = np.arange(75, dtype=float) / 100.0
    net.layers[-1].bias.value[:] = bias
    out = lift(net, np.random.default_rng(0).normal(size=input_length(25, 2)))
    assert out.shape == (25, 3)
    assert np.allclose(out, bias.reshape(25, 3) * 1000.0)


def test_lift_complete_under_any_visibility():
    rig = ring_rig(3)
    net = LifterNet(LifterArch(15, 3, (32,)), seed=1)
    rng = np.random.default_rng(4)
    joints = _body(rng, 15)
    for _ in range(5):
        vis = rng.random((3, 15)) < 0.4
        vis[0, 0] = True
        out = lift(net, build_lift_input(_views(rig, joints, vis), rig))
        assert out.shape == (15, 3) and np.all(np.isfinite(out))


def test_loss_hand_example(identity_camera):
    rig = Rig([identity_camera])
    z = 2000.0
    pose = np.array([[[(103 - 960) * z / 1000, (98 - 540) * z / 1000, z]]])
    sup = Supervision(np.array([[[[100.0, 100.0]]]]), np.ones((1, 1, 1)))
    rep = reprojection_loss(pose, sup, rig)
    assert rep.errors[0] == pytest.approx(5.0, abs=1e-9)
    assert rep.loss == pytest.approx(25.0, abs=1e-7)


def test_loss_zero_at_fixed_point():
    rig = ring_rig(4)
    joints = _body(np.random.default_rng(5), 15)
    sup = Supervision.from_views([_views(rig, joints)], rig, 15)
    rep = reprojection_loss(joints[None], sup, rig)
    assert rep.loss == pytest.approx(0.0, abs=1e-12)


def _independent_errors(rig, poses, pixels, mask):
    B = poses.shape[0]
    e = np.zeros(B)
    for b in range(B):
        for c, cam in enumerate(rig):
            P = cam.intrinsics @ (cam.rotation @ poses[b].T + cam.translation[:, None])
            uv = (P[:2] / P[2]).T
            e[b] += (np.abs(uv - pixels[b, c]).sum(axis=1) * mask[b, c]).sum()
    return e


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_loss_equals_mean_squared_error(seed):
    rng = np.random.default_rng(seed)
    rig = ring_rig(3)
    B, K = 4, 6
    poses = rng.uniform([-500, -500, 0], [500, 500, 1800], size=(B, K, 3))
    pixels = rng.uniform(0, 1000, size=(B, 3, K, 2))
    mask = (rng.random((B, 3, K)) < 0.7).astype(float)
    rep = reprojection_loss(poses, Supervision(pixels, mask), rig)
    e = _independent_errors(rig, poses, pixels, mask)
    assert np.allclose(rep.errors, e, rtol=1e-12, atol=1e-9)
    assert np.all(rep.barrier == 0)
    ref = np.mean(e**2)
    assert abs(rep.loss - ref) <= 1e-12 * max(ref, 1.0)


def test_undetected_keypoints_ignored():
    rng = np.random.default_rng(6)
    rig = ring_rig(3)
    poses = _body(rng, 8)[None]
    pixels = rng.uniform(0, 1000, size=(1, 3, 8, 2))
    mask = np.ones((1, 3, 8))
    mask[0, :, 3] = 0  # joint 3 undetected everywhere
    mask[0, 1, 5] = 0
    base = reprojection_loss(poses, Supervision(pixels, mask), rig).loss
    for _ in range(10):
        px = pixels.copy()
        px[0, :, 3] = rng.uniform(-1e4, 1e4, size=(3, 2))
        px[0, 1, 5] = 0.0
        moved = poses.copy()
        moved[0, 3] += rng.normal(0, 300, 3)
        assert reprojection_loss(moved, Supervision(px, mask), rig).loss == base


def _away_from_kinks(rng, rig, K, margin=1e-2):
    poses = rng.uniform([-500, -500, 0], [500, 500, 1800], size=(1, K, 3))
    pixels = np.zeros((1, len(rig), K, 2))
    for c, cam in enumerate(rig):
        uv, _ = project_many(cam, poses[0])
        off = rng.uniform(margin + 0.5, 20.0, size=uv.shape) * rng.choice([-1, 1], size=uv.shape)
        pixels[0, c] = uv + off
    return poses, pixels


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    rig = ring_rig(3)
    worst = 0.0
    for _ in range(100):
        K = int(rng.integers(1, 4))
        poses, pixels = _away_from_kinks(rng, rig, K)
        mask = (rng.random((1, 3, K)) < 0.8).astype(float)
        sup = Supervision(pixels, mask)
        x = dc.Tensor(poses.copy(), requires_grad=True)
        reprojection_loss(x, sup, rig).tensor.backward()
        num = numeric_grad(lambda: reprojection_loss(x.value, sup, rig).loss, x.value)
        worst = max(worst, rel_error(x.grad, num))
    assert worst < 1e-4


def test_behind_camera_is_penalised_not_fatal(identity_camera):
    rig = Rig([identity_camera])
    sup = Supervision(np.full((1, 1, 2, 2), 500.0), np.ones((1, 1, 2)))
    front = np.array([[[0.0, 0.0, 2000.0], [10.0, 0.0, 2000.0]]])
    back = front.copy()
    back[0, 1, 2] = -50.0
    r_front = reprojection_loss(front, sup, rig)
    x = dc.Tensor(back, requires_grad=True)
    r_back = reprojection_loss(x, sup, rig)
    r_back.tensor.backward()
    assert np.isfinite(r_back.loss) and r_back.barrier.sum() > 0
    assert np.all(np.isfinite(x.grad))
    # gradient pushes the offending joint forward along the optical axis
    assert x.grad[0, 1, 2] < 0
    assert r_front.barrier.sum() == 0


def test_baseline_exact_on_noiseless_complete_views():
    rig = ring_rig(4)
    joints = _body(np.random.default_rng(8), 25)
    out = triangulation_baseline(_views(rig, joints), rig)
    assert np.abs(out - joints).max() < 1e-6


def test_baseline_leaves_single_view_joints_absent():
    rig = ring_rig(3)
    joints = _body(np.random.default_rng(9), 15)
    vis = np.ones((3, 15), bool)
    vis[1:, 4] = False
    vis[:, 7] = False
    views = _views(rig, joints, vis)
    base = triangulation_baseline(views, rig)
    assert np.isnan(base[4]).all() and np.isnan(base[7]).all()
    assert np.isfinite(np.delete(base, [4, 7], axis=0)).all()
    net = LifterNet(LifterArch(15, 3, (16,)), seed=0)
    assert np.isfinite(lift(net, build_lift_input(views, rig))).all()


def test_pair_bank_masks_removed_views():
    cfg = SynthConfig(n_cameras=3, drop_prob=0.0, occlusion_prob=0.0, walk_radius=800.0, seed=2)
    rig = make_rig(cfg)
    track, _ = generate_track(cfg, 2, rig)
    bank = PairBank(track.frames, rig, "all")
    assert len(bank.subsets[0]) == 7
    items = [(0, s) for s in range(7)]
    X, sup, kept, gt = bank.make(items)
    X = X.reshape(7, 3, 15, 14)
    full = build_lift_input([d for _, _, d in track.frames[0].detections()], rig)
    assert np.array_equal(X[0].ravel(), full)
    for i, (_, s) in enumerate(items):
        on = set(bank.subsets[0][s])
        for c in range(3):
            if c not in on:
                assert not X[i, c, :, :10].any() and not kept[i, c].any()
        # supervision always comes from the seed sample
        assert np.array_equal(sup.pixels[i], sup.pixels[0]) and np.array_equal(sup.mask[i], sup.mask[0])
    assert gt.shape == (7, 15, 3)


def test_profiles_and_checkpoint(tmp_path):
    assert PROFILES["paper"] == (3072, 3072, 2048, 2048, 1024, 1024, 1024)
    assert PROFILES["small"] == (512, 512, 256, 256, 128, 128, 128)
    net = LifterNet(LifterArch(15, 3, (8, 4)), seed=3)
    net.save(tmp_path / "l.json")
    back = LifterNet.load(tmp_path / "l.json")
    x = np.random.default_rng(0).normal(size=(2, input_length(15, 3)))
    assert np.array_equal(lift_many(net, x), lift_many(back, x))
    with pytest.raises(dc.CheckpointError):
        LifterNet.load(tmp_path / "l.json", LifterArch(15, 3, (8, 5)))


def test_short_training_reduces_loss():
    cfg = SynthConfig(n_cameras=3, seed=1)
    rig = make_rig(cfg)
    tracks = [generate_track(cfg, 20, rig, i)[0] for i in range(3)]
    tc = LifterTrainConfig(lr=1e-3, batch_size=16, max_steps=40, eval_every=20, val_pairs=32)
    net, res = train_lifter(tracks, rig, LifterArch(15, 3, (64, 64)), tc)
    assert [h[0] for h in res.history] == [0, 20, 40]
    assert res.best_val_loss < res.initial_val_loss
    _, res2 = train_lifter(tracks, rig, LifterArch(15, 3, (64, 64)), tc)
    np.testing.assert_array_equal(np.array(res.history), np.array(res2.history))
