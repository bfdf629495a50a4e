import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tdsnet.adapters import TdParams, cls_shift, frame_differences, pool_difference, td_forward
from tdsnet.autodiff.checkpoint import load_checkpoint, save_checkpoint
from tdsnet.autodiff.tensor import Tensor
from tdsnet.data import VideoClip, read_dataset, sparse_sample, write_dataset
from tdsnet.network import ls_cross_entropy
from tdsnet.train import lr_at

finite = st.floats(-1e3, 1e3, allow_nan=False)
FAST = settings(max_examples=60, deadline=None)


@FAST
@given(st.integers(1, 3), st.integers(1, 3), st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 2**31))
def test_frame_differences_linear(n, hw, a, b, seed):
    rng = np.random.default_rng(seed)
    v, w = rng.normal(size=(2, 3, 2 * n + 1, hw, hw))
    lhs = frame_differences(Tensor(a * v + b * w)).data
    rhs = a * frame_differences(Tensor(v)).data + b * frame_differences(Tensor(w)).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


@FAST
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 6), st.integers(1, 3), st.integers(1, 3)),
              elements=finite), st.sampled_from([1, 3, 5]))
def test_pool_difference_nonpositive_and_zero_at_window_max(z, k):
    d = pool_difference(Tensor(z), k).data
    assert (d <= 0).all()
    r = k // 2
    t = z.shape[1]
    for i in range(t):
        lo, hi = max(i - r, 0), min(i + r, t - 1)
        is_max = z[:, i] >= z[:, lo:hi + 1].max(axis=1)
        assert (d[:, i][is_max] == 0).all()


@FAST
@given(st.integers(1, 3), st.integers(1, 5), st.sampled_from([(1, 1), (2, 2), (1, 3)]), st.sampled_from([1, 2, 4]),
       st.sampled_from(["pool", "conv", "direct"]), st.integers(0, 2**31))
def test_td_preserves_token_shape(b, t, grid, r, mode, seed):
    rng = np.random.default_rng(seed)
    c = 8
    td = TdParams.init(rng, c, reduction=r, mode=mode)
    x = rng.normal(size=(b, t, 1 + grid[0] * grid[1], c))
    y = td_forward(Tensor(x), td, grid).data
    assert y.shape == x.shape
    np.testing.assert_array_equal(y[:, :, 0], x[:, :, 0])


@FAST
@given(st.integers(2, 8), st.floats(-50, 50), st.floats(0, 0.9), st.integers(0, 2**31))
def test_ls_ce_shift_invariant(nc, shift, alpha, seed):
    rng = np.random.default_rng(seed)
    lg = rng.normal(size=(3, nc)) * 4
    y = rng.integers(0, nc, size=3)
    a = ls_cross_entropy(Tensor(lg), y, alpha).item()
    b = ls_cross_entropy(Tensor(lg + shift), y, alpha).item()
    assert abs(a - b) < 1e-10


@FAST
@given(st.integers(1, 7), st.sampled_from([4, 8, 12]), st.integers(0, 2**31))
def test_cls_shift_preserves_untouched_channels_and_energy_moves(t, c, seed):
    x = np.random.default_rng(seed).normal(size=(t, c))
    y = cls_shift(Tensor(x)).data
    f = c // 4
    np.testing.assert_array_equal(y[:, 2 * f:], x[:, 2 * f:])
    if t > 1:
        np.testing.assert_array_equal(y[:-1, :f], x[1:, :f])
        np.testing.assert_array_equal(y[1:, f:2 * f], x[:-1, f:2 * f])


@FAST
@given(st.integers(1, 40), st.data())
def test_sparse_sample_strictly_increasing(t_raw, data):
    t = data.draw(st.integers(1, t_raw))
    idx = sparse_sample(t_raw, t, jitter=data.draw(st.booleans()), seed=data.draw(st.integers(0, 99)))
    assert len(idx) == t and all(0 <= i < t_raw for i in idx)
    assert all(a < b for a, b in zip(idx, idx[1:]))


@FAST
@given(st.integers(0, 100), st.integers(1, 100), st.integers(0, 50), st.floats(1e-5, 1.0))
def test_lr_bounded(step, extra, warm, base):
    total = warm + extra
    lr = lr_at(min(step, total), total, warm, base)
    assert 0.0 <= lr <= base * (1 + 1e-15)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 9), st.integers(1, 4), st.integers(1, 3), st.text(max_size=5)),
                min_size=0, max_size=4), st.integers(0, 2**31))
def test_dataset_round_trip_any_shapes(tmp_path_factory, items, seed):
    rng = np.random.default_rng(seed)
    clips = [VideoClip(rng.uniform(size=(3, t, h, h + 1)), lab, name) for lab, t, h, name in items]
    p = tmp_path_factory.mktemp("ds") / "c.tdsd"
    write_dataset(p, clips)
    back = read_dataset(p)
    assert [(c.label, c.id) for c in back] == [(c.label, c.id) for c in clips]
    assert all(np.array_equal(a.frames, b.frames) for a, b in zip(clips, back))


@settings(max_examples=25, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=8),
                       arrays(np.float64, st.lists(st.integers(1, 3), min_size=0, max_size=3).map(tuple),
                              elements=st.floats(allow_nan=False)), max_size=4))
def test_checkpoint_round_trip(tmp_path_factory, named):
    p = tmp_path_factory.mktemp("ck") / "m.tdsc"
    save_checkpoint(p, named)
    back = load_checkpoint(p)
    assert list(back) == list(named)
    for k in named:
        np.testing.assert_array_equal(back[k], named[k])
