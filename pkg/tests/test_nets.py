import numpy as np
import pytest

from rnnvo.autodiff import Tensor, ops, precision
from rnnvo.nets import (ConvLSTMCell, ConvLSTMState, DepthNet, NetConfig, PoseNet, RecurrentModel,
                        convlstm_step, encoder_sizes, frames_to_nchw)

from conftest import small_config


def frames(rng, n, cfg):
    return [rng.uniform(size=(cfg.height, cfg.width, 3)) for _ in range(n)]


def test_encoder_sizes_for_full_resolution():
    sizes = encoder_sizes(128, 416, 7)
    assert sizes[0] == (64, 208) and sizes[-1] == (1, 4)


def test_full_size_config_shapes():
    net = DepthNet(NetConfig.paper())
    assert net.sizes[-1] == (1, 4)
    assert net.enc_channels == [32, 64, 128, 256, 256, 256, 512]


@pytest.mark.parametrize("placement", ["encoder", "decoder", "full"])
def test_output_shapes_and_ranges(rng, placement):
    cfg = small_config(lstm_placement=placement)
    model = RecurrentModel(cfg).eval()
    step = model.step(frames(rng, 1, cfg)[0])
    assert step.inverse_depth.shape == (cfg.height, cfg.width)
    assert np.all(step.inverse_depth.data >= cfg.inv_depth_min)
    assert np.all(step.inverse_depth.data <= cfg.inv_depth_max)
    assert step.pose_vector.shape == (6,) and step.pose_matrix.shape == (4, 4)
    R = step.pose_matrix.data[:3, :3]
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-5)


def test_initial_depth_is_near_configured_value(rng):
    cfg = small_config()
    model = RecurrentModel(cfg).eval()
    depth = 1.0 / model.step(frames(rng, 1, cfg)[0]).inverse_depth.data
    assert np.median(depth) == pytest.approx(cfg.init_depth, rel=0.1)


def test_lstm_states_have_level_shapes(rng):
    cfg = small_config()
    net = DepthNet(cfg)
    _, _, states = net(frames(rng, 1, cfg)[0])
    assert [s.h.shape[2:] for s in states] == net.sizes
    assert [s.h.shape[1] for s in states] == net.enc_channels


def test_zero_cell_gives_zero_hidden(rng):
    cell = ConvLSTMCell(rng, 2, 3, forget_bias=0.0)
    cell.weight.data[...] = 0.0
    h, st = convlstm_step(cell, Tensor(rng.normal(size=(1, 2, 4, 5))), None)
    assert np.all(h.data == 0) and np.all(st.c.data == 0)
    assert h is st.h


def test_saturated_forget_gate_keeps_cell(rng):
    cell = ConvLSTMCell(rng, 2, 3)
    cell.weight.data[...] = 0.0
    cell.bias.data[:3] = -60.0      # input gate closed
    cell.bias.data[3:6] = 60.0      # forget gate open
    with precision(np.float64):
        c0 = Tensor(rng.normal(size=(1, 3, 4, 5)))
        state = ConvLSTMState(Tensor(np.zeros((1, 3, 4, 5))), c0)
        _, st = cell(Tensor(rng.normal(size=(1, 2, 4, 5))), state)
    np.testing.assert_allclose(st.c.data, c0.data, atol=1e-12)


def test_forget_bias_initialization(rng):
    cell = ConvLSTMCell(rng, 2, 3, forget_bias=1.0)
    np.testing.assert_array_equal(cell.bias.data, [0, 0, 0, 1, 1, 1, 0, 0, 0, 0, 0, 0])


def test_zero_pose_head_gives_identity(rng):
    cfg = small_config()
    pose = PoseNet(cfg).eval()
    pose.out.weight.data[...] = 0.0
    pose.out.bias.data[...] = 0.0
    vec, mat, _ = pose(frames(rng, 1, cfg)[0], np.full((cfg.height, cfg.width), 5.0))
    assert np.all(vec.data == 0)
    np.testing.assert_array_equal(mat.data, np.eye(4))


def test_long_rollout_stays_finite(rng):
    cfg = small_config()
    model = RecurrentModel(cfg).eval()
    steps = model.rollout(frames(rng, 25, cfg))
    assert len(steps) == 25
    assert all(np.all(np.isfinite(s.inverse_depth.data)) for s in steps)


def test_construction_is_deterministic():
    a, b = RecurrentModel(small_config(seed=3)), RecurrentModel(small_config(seed=3))
    assert a.parameter_count() == b.parameter_count()
    for (na, pa), (nb, pb) in zip(a.named_parameters().items(), b.named_parameters().items()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()
    c = RecurrentModel(small_config(seed=4))
    assert any(c.named_parameters()[n].data.tobytes() != p.data.tobytes() for n, p in a.named_parameters().items())


def test_placements_have_distinct_parameter_counts():
    counts = {p: RecurrentModel(small_config(lstm_placement=p)).parameter_count()
              for p in ("encoder", "decoder", "full")}
    assert len(set(counts.values())) == 3
    assert counts["full"] > max(counts["encoder"], counts["decoder"])


def test_inference_is_causal(rng):
    cfg = small_config()
    imgs = frames(rng, 6, cfg)
    model = RecurrentModel(cfg).eval()
    a = model.rollout(imgs)
    changed = imgs[:3] + [rng.uniform(size=imgs[0].shape) for _ in range(3)]
    b = model.rollout(changed)
    for t in range(3):
        assert a[t].inverse_depth.data.tobytes() == b[t].inverse_depth.data.tobytes()
    assert a[4].inverse_depth.data.tobytes() != b[4].inverse_depth.data.tobytes()


def test_stacked_forward_equals_stepping_in_inference_mode(rng):
    cfg = small_config(lstm_placement="full")
    imgs = frames(rng, 5, cfg)
    model = RecurrentModel(cfg).eval()
    stepped = model.rollout(imgs)
    xi, _, _ = model.depth_net.forward(frames_to_nchw(imgs))
    vecs, _, _ = model.pose_net.forward(frames_to_nchw(imgs), ops.reciprocal(xi))
    for t, s in enumerate(stepped):
        np.testing.assert_allclose(xi.data[t], s.inverse_depth.data, rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(vecs.data[t], s.pose_vector.data, rtol=1e-4, atol=1e-7)


def test_training_rollout_pools_batch_statistics(rng):
    cfg = small_config(bn_min_count=2)
    imgs = frames(rng, 4, cfg)
    model = RecurrentModel(cfg).train()
    before = {k: v.copy() for k, v in model.depth_net.named_buffers().items()}
    model.rollout(imgs)
    after = model.depth_net.named_buffers()
    assert any(not np.array_equal(before[k], after[k]) for k in before)


def test_state_dict_round_trip(rng):
    cfg = small_config()
    a, b = RecurrentModel(cfg), RecurrentModel(small_config(seed=9))
    b.load_state_dict(a.state_dict())
    img = frames(rng, 1, cfg)[0]
    sa, sb = a.eval().step(img), b.eval().step(img)
    assert sa.inverse_depth.data.tobytes() == sb.inverse_depth.data.tobytes()


def test_wrong_input_size_raises(rng):
    from rnnvo.autodiff import ShapeError
    cfg = small_config()
    with pytest.raises(ShapeError):
        DepthNet(cfg)(rng.uniform(size=(cfg.height + 2, cfg.width, 3)))


def test_invalid_config_rejected():
    with pytest.raises(ValueError):
        NetConfig(lstm_placement="middle")
    with pytest.raises(ValueError):
        NetConfig(inv_depth_min=1.0, inv_depth_max=0.5)
