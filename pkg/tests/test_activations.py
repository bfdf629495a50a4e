import numpy as np
import pytest

from conftest import MICRO
from tdsnet.activations import activation_maps, read_ppm, side_by_side, to_gray, write_ppm
from tdsnet.adapters import window_indices
from tdsnet.data import DatasetSpec, gen_clip, segment_indices, sprite_mask
from tdsnet.network import TDSModel

SPEC = DatasetSpec(t_raw=8, height=16, width=16, sprite=4)


@pytest.mark.parametrize("label", range(4))
def test_motion_peak_lies_on_sprite_track(label):
    model = TDSModel(MICRO, seed=4)
    clip = gen_clip(label, 2, SPEC)
    maps = activation_maps(model, clip.frames, 1)
    idx = segment_indices(SPEC.t_raw, MICRO.frames)
    wins = window_indices(idx, MICRO.window_radius, SPEC.t_raw)
    p = MICRO.patch
    for t in range(MICRO.frames):
        m = maps["motion"][t]
        gy, gx = np.unravel_index(np.argmax(m), m.shape)
        track = np.zeros((16, 16), dtype=bool)
        for f in wins[t]:
            track |= sprite_mask(label, 2, SPEC, f)
        assert track[gy * p:(gy + 1) * p, gx * p:(gx + 1) * p].any()
        # patches the sprite never touches carry no motion at all
        untouched = ~track.reshape(4, p, 4, p).any(axis=(1, 3))
        assert not m[untouched].any()


def test_static_clip_has_no_motion_and_equal_maps():
    model = TDSModel(MICRO, seed=4)
    frames = np.repeat(gen_clip(0, 1, SPEC).frames[:, :1], SPEC.t_raw, axis=1)
    maps = activation_maps(model, frames, 0)
    assert not maps["motion"].any()
    np.testing.assert_array_equal(maps["with_sme"], maps["without_sme"])


def test_layer_out_of_range():
    with pytest.raises(IndexError):
        activation_maps(TDSModel(MICRO), gen_clip(0, 0, SPEC).frames, 2)


def test_ppm_round_trip(tmp_path, rng):
    a, b, m = (rng.uniform(size=(2, 3)) for _ in range(3))
    img = side_by_side((a, b, m), scale=2)
    assert img.shape == (4, 3 * 6 + 2) and img.dtype == np.uint8
    write_ppm(tmp_path / "x.ppm", img)
    back = read_ppm(tmp_path / "x.ppm")
    np.testing.assert_array_equal(back[..., 0], img)
    assert not to_gray(np.zeros((2, 2))).any()
