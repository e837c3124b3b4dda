import numpy as np
import pytest

from data import (
    STD_FLOOR,
    BatchLoader,
    FrameDataset,
    SampleLayout,
    assemble_batch,
    assemble_sample,
    compute_stats,
    denormalize,
    gen_synthetic,
    make_windows,
    read_dataset,
    split_dataset,
    split_sample_input,
    with_stats,
    write_dataset,
)
from errors import ConfigError, DataError, FormatError, IntegrityError


def _frames(T, C=4, H=16, W=16, fill=None, seed=0):
    rng = np.random.default_rng(seed)
    dynamic = rng.standard_normal((T, C, H, W)) if fill is None else np.full((T, C, H, W), fill)
    static = rng.uniform(0, 5, (3, H, W))
    names = [f"d{i}" for i in range(C)] + ["lat", "lon", "elev"]
    return with_stats(dynamic.astype(np.float32), static, names)


@pytest.mark.parametrize("T,expected", [(36, 1), (40, 5), (35, 0), (0, 0)])
def test_window_counts(T, expected):
    assert len(make_windows(_frames(T, H=16, W=16), 4, 32)) == expected


def test_windows_cover_every_frame():
    ds = _frames(10)
    starts = make_windows(ds, 2, 3)
    covered = {s + i for s in starts for i in range(5)}
    assert covered == set(range(10))


def test_stwf_round_trip(tmp_path, tiny_dataset):
    path = tmp_path / "d.stwf"
    write_dataset(tiny_dataset, path)
    loaded = read_dataset(path)
    np.testing.assert_array_equal(loaded.dynamic, tiny_dataset.dynamic)
    np.testing.assert_array_equal(loaded.static, tiny_dataset.static)
    np.testing.assert_array_equal(loaded.mean, tiny_dataset.mean)
    np.testing.assert_array_equal(loaded.std, tiny_dataset.std)
    assert loaded.channel_names == tiny_dataset.channel_names
    assert loaded.cadence_minutes == 15


def test_stwf_header_layout(tmp_path):
    ds = _frames(2, C=1, H=16, W=16)
    path = tmp_path / "d.stwf"
    write_dataset(ds, path)
    raw = path.read_bytes()
    assert raw[:4] == b"STWF"
    assert raw[4:6] == b"\x01\x00"
    assert int.from_bytes(raw[6:10], "little") == 2
    names = sum(2 + len(n) for n in ds.channel_names)
    assert len(raw) == 4 + 2 + 5 * 4 + 2 + 2 + names + 8 * 1 + 4 * (2 * 16 * 16 + 3 * 16 * 16)


def test_empty_dataset_loads_without_windows(tmp_path):
    path = tmp_path / "empty.stwf"
    write_dataset(_frames(0), path)
    ds = read_dataset(path)
    assert ds.n_frames == 0
    assert make_windows(ds, 4, 32) == []


def test_stwf_errors(tmp_path, tiny_dataset):
    path = tmp_path / "d.stwf"
    write_dataset(tiny_dataset, path)
    raw = path.read_bytes()
    (tmp_path / "magic.stwf").write_bytes(b"STWX" + raw[4:])
    with pytest.raises(FormatError):
        read_dataset(tmp_path / "magic.stwf")
    (tmp_path / "cut.stwf").write_bytes(raw[:-7])
    with pytest.raises(IntegrityError, match="byte offset") as info:
        read_dataset(tmp_path / "cut.stwf")
    assert info.value.offset > 0
    with pytest.raises(DataError):
        read_dataset(tmp_path / "missing.stwf")
    at = raw.index(b"intensity")
    (tmp_path / "name.stwf").write_bytes(raw[:at] + b"\xff" + raw[at + 1:])
    with pytest.raises(FormatError, match="not UTF-8"):
        read_dataset(tmp_path / "name.stwf")


def test_compute_stats_examples():
    constant = _frames(3, C=1, fill=2.5)
    assert compute_stats(constant, 0) == (2.5, STD_FLOOR)
    halves = np.zeros((2, 1, 16, 16), dtype=np.float32)
    halves[1] = 2.0
    ds = with_stats(halves, np.zeros((0, 16, 16)), ["x"])
    assert compute_stats(ds, 0) == (1.0, 1.0)


def test_compute_stats_ignore_frame_order():
    ds = _frames(6, seed=3)
    shuffled = FrameDataset(ds.dynamic[::-1].copy(), ds.static, ds.channel_names, ds.mean, ds.std)
    for c in range(ds.n_dynamic):
        np.testing.assert_allclose(compute_stats(ds, c), compute_stats(shuffled, c), rtol=1e-12)


def test_reference_channel_counts():
    ds = gen_synthetic(seed=0, T=36, H=16, W=16)
    once = assemble_sample(ds, 0, SampleLayout())
    assert once.input.shape == (19, 16, 16)
    assert once.target.shape == (128, 16, 16)
    per_frame = assemble_sample(ds, 0, SampleLayout(static_layout="per_frame"))
    assert per_frame.input.shape == (28, 16, 16)
    assert SampleLayout().in_channels(4, 3) == 19
    assert SampleLayout(static_layout="per_frame").in_channels(4, 3) == 28


def test_constant_dataset_normalizes_to_zero():
    ds = _frames(6, fill=3.0)
    sample = assemble_sample(ds, 0, SampleLayout(t_in=2, t_out=3))
    np.testing.assert_array_equal(sample.input.data[:8], 0)
    np.testing.assert_array_equal(sample.target.data, 0)


def test_channel_layout(tiny_dataset):
    layout = SampleLayout(t_in=2, t_out=3, target_channels=(1, 3))
    sample = assemble_sample(tiny_dataset, 4, layout)
    ds = tiny_dataset
    expected = (ds.dynamic[5, 2] - ds.mean[2]) / ds.std[2]
    np.testing.assert_allclose(sample.input.data[4 + 2], expected, rtol=1e-6, atol=1e-6)
    lead2_channel3 = (ds.dynamic[4 + 2 + 1, 3] - ds.mean[3]) / ds.std[3]
    np.testing.assert_allclose(sample.target.data[2 + 1], lead2_channel3, rtol=1e-6, atol=1e-6)
    statics = sample.input.data[8:]
    assert statics.min() == 0.0 and statics.max() == 1.0


@pytest.mark.parametrize("static_layout", ["once", "per_frame"])
def test_deassembly_recovers_frames(tiny_dataset, static_layout):
    layout = SampleLayout(t_in=3, t_out=2, static_layout=static_layout)
    sample = assemble_sample(tiny_dataset, 6, layout)
    frames, static = split_sample_input(sample.input.data, layout, 4, 3)
    reassembled = assemble_sample(tiny_dataset, 6, layout)
    np.testing.assert_array_equal(split_sample_input(reassembled.input.data, layout, 4, 3)[0], frames)
    np.testing.assert_array_equal(static, tiny_dataset.static_scaled())
    np.testing.assert_allclose(denormalize(frames, tiny_dataset), tiny_dataset.dynamic[6:9], rtol=1e-5, atol=1e-5)


def test_normalized_channels_have_zero_mean_unit_std():
    ds = gen_synthetic(seed=5, T=60, H=32, W=32, n_blobs=3)
    for c in range(ds.n_dynamic):
        if ds.std[c] <= STD_FLOOR:
            continue
        z = (ds.dynamic[:, c].astype(np.float64) - ds.mean[c]) / ds.std[c]
        assert abs(z.mean()) < 1e-4
        assert abs(z.std() - 1) < 1e-3


def test_out_of_range_start(tiny_dataset):
    with pytest.raises(DataError, match="out of range"):
        assemble_sample(tiny_dataset, 20, SampleLayout(t_in=2, t_out=3))


def test_generator_is_deterministic():
    a = gen_synthetic(seed=9, T=6, H=16, W=20)
    b = gen_synthetic(seed=9, T=6, H=16, W=20)
    np.testing.assert_array_equal(a.dynamic, b.dynamic)
    np.testing.assert_array_equal(a.static, b.static)
    assert a.channel_names == ["intensity", "rain", "smooth", "cloud_mask", "row", "column", "elevation"]


def test_zero_velocity_freezes_frames():
    ds = gen_synthetic(seed=2, T=5, H=16, W=16, velocity_range=0.0)
    for t in range(1, 5):
        np.testing.assert_array_equal(ds.dynamic[t], ds.dynamic[0])


def test_blob_mass_is_conserved():
    ds = gen_synthetic(seed=4, T=30, H=32, W=32, n_blobs=3, velocity_range=1.5)
    mass = ds.dynamic[:, 0].astype(np.float64).sum(axis=(1, 2))
    assert np.max(np.abs(mass - mass[0])) / mass[0] < 0.01


def test_generator_channels_are_consistent():
    ds = gen_synthetic(seed=6, T=3, H=16, W=16)
    intensity, rain, smooth, mask = (ds.dynamic[:, c] for c in range(4))
    np.testing.assert_allclose(rain, np.maximum(intensity - 0.5, 0), atol=1e-6)
    np.testing.assert_allclose(smooth, np.tanh(intensity), atol=1e-6)
    assert set(np.unique(mask)) <= {0.0, 1.0}
    np.testing.assert_allclose(ds.static[0, :, 0], np.linspace(0, 1, 16), atol=1e-6)


def test_generator_rejects_small_frames():
    with pytest.raises(ConfigError):
        gen_synthetic(seed=0, T=3, H=8, W=16)


def test_split_is_chronological_and_shares_stats(tiny_dataset):
    train, valid, test = split_dataset(tiny_dataset, 0.25, 0.25)
    assert (train.n_frames, valid.n_frames, test.n_frames) == (12, 6, 6)
    np.testing.assert_array_equal(valid.dynamic, tiny_dataset.dynamic[12:18])
    for part in (train, valid, test):
        np.testing.assert_array_equal(part.mean, tiny_dataset.mean)
    with pytest.raises(ConfigError):
        split_dataset(tiny_dataset, 0.6, 0.6)


@pytest.mark.parametrize("prefetch", [0, 1, 3])
def test_batch_loader_preserves_order(tiny_dataset, prefetch):
    layout = SampleLayout(t_in=2, t_out=3)
    batches = [[5, 1, 9], [0, 2], [19, 7]]
    for (x, y), starts in zip(BatchLoader(tiny_dataset, batches, layout, prefetch), batches):
        ex, ey = assemble_batch(tiny_dataset, starts, layout)
        np.testing.assert_array_equal(x, ex)
        np.testing.assert_array_equal(y, ey)


def test_batch_loader_forwards_errors(tiny_dataset):
    loader = BatchLoader(tiny_dataset, [[0], [99]], SampleLayout(t_in=2, t_out=3), prefetch=2)
    with pytest.raises(DataError):
        list(loader)
