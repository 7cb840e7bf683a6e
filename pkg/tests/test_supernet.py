import numpy as np
import pytest

from desknas.errors import SearchSpaceError
from desknas.supernet import (
    LayerSpec, SearchSpaceSpec, build_supernet, default_desk_spec, derive_final, derived_indices,
    dump_architecture, freeze_layer, instantiate_child, parse_architecture, planted_spec,
    sample_arch,
)
from desknas.archdist import layer_rng
from desknas.tensorcore import Tensor


def small_spec(layers=4, cands=("conv3", "skip", "sepconv3", "conv5"), stem=8, image=6):
    return SearchSpaceSpec(3, image, 4, [LayerSpec(list(cands), 8, 1) for _ in range(layers)],
                           stem_channels=stem)


def test_space_size_and_instances():
    net = build_supernet(small_spec(4))
    assert net.space_size == 256
    assert sum(l.n for l in net.layers) == 16


def test_full_scale_space_size():
    spec = SearchSpaceSpec(3, 8, 10, [LayerSpec(["conv3", "conv5", "sepconv3", "skip"], 8, 1)
                                      for _ in range(20)], stem_channels=8)
    assert spec.space_size == 4 ** 20


def test_single_candidate_layer_is_fixed():
    spec = SearchSpaceSpec(3, 6, 4, [LayerSpec(["conv3"], 8, 1)], stem_channels=8)
    net = build_supernet(spec)
    assert net.space_size == 1
    s = sample_arch(net, [layer_rng(0, 0)])
    assert s.indices == (0,)


def test_unknown_kind_and_bad_skip():
    with pytest.raises(SearchSpaceError):
        build_supernet(small_spec(1, cands=("conv7",)))
    with pytest.raises(SearchSpaceError):
        build_supernet(SearchSpaceSpec(3, 6, 4, [LayerSpec(["skip"], 8, 2)], stem_channels=8))


def test_parameter_count_matches_independent_count():
    net = build_supernet(small_spec(4))
    sel = (0, 1, 2, 3)
    child = instantiate_child(net, sel, dummy=False)
    expected = 0
    expected += 8 * 3 * 9 + 2 * 8          # stem conv + BN
    expected += 8 * 8 * 9 + 2 * 8          # conv3
    expected += 0                          # skip
    expected += 8 * 9 + 8 * 8 + 2 * 8      # sepconv3: depthwise + pointwise + BN
    expected += 8 * 8 * 25 + 2 * 8         # conv5
    expected += 8 * 4 + 4                  # head
    assert child.parameter_count() == expected


def test_skip_layer_is_identity():
    net = build_supernet(small_spec(2))
    x = np.random.default_rng(0).standard_normal((3, 3, 6, 6))
    seen = {}
    child = instantiate_child(net, (1, 0), dummy=False)
    child.forward(x, capture=lambda i, h: seen.__setitem__(i, h.data.copy()))
    stem = net.stem_forward(Tensor(x)).data
    assert np.array_equal(seen[0], stem)


def test_all_skip_stemless_reproduces_pooled_input():
    spec = SearchSpaceSpec(3, 5, 3, [LayerSpec(["skip", "conv3"], 3, 1) for _ in range(3)],
                           stem_channels=None)
    net = build_supernet(spec)
    x = np.random.default_rng(1).standard_normal((2, 3, 5, 5))
    seen = []
    child = instantiate_child(net, (0, 0, 0), dummy=False)
    child.forward(x, capture=lambda i, h: seen.append(h.data))
    assert np.array_equal(seen[-1].mean(axis=(2, 3)), x.mean(axis=(2, 3)))


def test_wrong_selection_length():
    net = build_supernet(small_spec(3))
    with pytest.raises(SearchSpaceError):
        instantiate_child(net, (0, 0))
    with pytest.raises(SearchSpaceError):
        instantiate_child(net, (0, 0, 9))


def test_mac_count_matches_formula():
    net = build_supernet(small_spec(2, image=6))
    hw = 6
    stem = 8 * hw * hw * 3 * 9 + 2 * 8 * hw * hw
    conv3 = 8 * hw * hw * 8 * 9 + 2 * 8 * hw * hw
    sep3 = 8 * hw * hw * 9 + 8 * hw * hw * 8 + 2 * 8 * hw * hw
    head = 8 + 8 * 4
    assert net.selection_macs((0, 2)) == stem + conv3 + sep3 + head
    assert net.selection_macs((1, 1)) == stem + head


def test_counted_macs_match_analytic_model():
    from desknas.metrics import counting
    net = build_supernet(small_spec(3, image=6))
    x = np.random.default_rng(2).standard_normal((1, 3, 6, 6))
    for sel in [(0, 1, 2), (3, 3, 3), (1, 1, 1)]:
        with counting() as c:
            instantiate_child(net, sel, dummy=False).forward(x)
        assert c.forward_macs == net.selection_macs(sel)


@pytest.mark.parametrize("batch", [1, 7, 64])
def test_batch_dimension_preserved(batch):
    net = build_supernet(small_spec(2))
    x = np.zeros((batch, 3, 6, 6))
    assert instantiate_child(net, (0, 2)).forward(x).shape == (batch, 4)


def test_desk_spec_strides():
    net = build_supernet(default_desk_spec(3, 16, 10))
    assert len(net.layers) == 8
    assert [l.candidates[0].stride for l in net.layers] == [1, 1, 2, 1, 1, 2, 1, 1]
    x = np.zeros((2, 3, 16, 16))
    assert instantiate_child(net, [0] * 8).forward(x).shape == (2, 10)


def test_freeze_then_sampling_is_fixed():
    net = build_supernet(small_spec(2))
    freeze_layer(net, 1, 2)
    rngs = [layer_rng(0, i) for i in range(2)]
    assert all(sample_arch(net, rngs).indices[1] == 2 for _ in range(10_000))
    with pytest.raises(SearchSpaceError):
        freeze_layer(net, 1, 0)


def test_derived_argmax_and_shift_invariance():
    net = build_supernet(small_spec(2))
    net.layers[0].alpha.data[:] = [2.0, 0.1, 0.1, 0.1]
    net.layers[1].alpha.data[:] = [0.0, 0.3, 1.0, -1.0]
    assert derived_indices(net) == (0, 2)
    for l in net.layers:
        l.alpha.data += 7.5
    assert derived_indices(net) == (0, 2)


def test_tie_warns_lowest_index():
    net = build_supernet(small_spec(1))
    with pytest.warns(UserWarning):
        assert derived_indices(net) == (0,)


def test_all_frozen_derive():
    net = build_supernet(small_spec(3))
    for i, op in enumerate((3, 1, 0)):
        freeze_layer(net, i, op)
    assert derive_final(net).indices == (3, 1, 0)


def test_architecture_dump_roundtrip():
    net = build_supernet(small_spec(3))
    text = dump_architecture(net, (2, 0, 1))
    assert parse_architecture(text) == (2, 0, 1)


def test_planted_spec_layout():
    spec = planted_spec(8, 6, 4, [0, 1], n_layers=8)
    net = build_supernet(spec)
    assert [c.kind for c in net.layers[0].candidates] == ["skip", "randproj", "conv3", "conv5"]
    assert net.stem is None


def test_random_projection_erases_signal_channels():
    spec = planted_spec(4, 5, 2, [0], n_layers=1)
    net = build_supernet(spec)
    rp = net.layers[0].candidates[1]
    x = np.random.default_rng(3).standard_normal((2, 4, 5, 5))
    x2 = x.copy()
    x2[:, 0] += 10.0
    assert np.array_equal(rp(Tensor(x)).data, rp(Tensor(x2)).data)
