import io
import json

import numpy as np
import pytest
import torch
from PIL import Image
from scipy import stats

from mdtrans.data import (DataError, MultiDomainDataset, SynthSpec, denormalize, domain_transforms,
                          load_domain_folders, load_split, normalize, preprocess, render_scene,
                          sample_bag, synth_generate, write_synth)
from mdtrans.metrics import ssim


def png_bytes(arr, mode=None):
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def write_png(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(png_bytes(arr))


def test_normalization_endpoints():
    u8 = torch.tensor([0, 128, 255], dtype=torch.uint8)
    out = normalize(u8, torch.float64)
    assert out[0] == -1.0 and out[2] == 1.0
    assert float(out[1]) == pytest.approx(128 / 127.5 - 1, abs=1e-12)
    assert float(out[1]) == pytest.approx(0.00392, abs=1e-5)


def test_round_trip_all_8bit_values():
    u8 = torch.arange(256, dtype=torch.uint8)
    x = normalize(u8)
    assert torch.equal(denormalize(x), u8)
    assert ((x + 1) * 127.5 - u8.float()).abs().max() <= 0.5


def test_preprocess_resize_and_channels():
    rng = np.random.default_rng(0)
    big = rng.integers(0, 256, (512, 512, 3), dtype=np.uint8)
    out = preprocess(png_bytes(big), 64)
    assert out.shape == (3, 64, 64)
    assert out.min() >= -1 and out.max() <= 1

    same = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
    out = preprocess(png_bytes(same), 64)
    assert torch.equal(denormalize(out), torch.from_numpy(same).permute(2, 0, 1))

    gray = rng.integers(0, 256, (32, 32), dtype=np.uint8)
    out = preprocess(png_bytes(gray, "L"), 32)
    assert out.shape == (3, 32, 32)
    assert torch.equal(out[0], out[1]) and torch.equal(out[1], out[2])

    with pytest.raises(DataError):
        preprocess(b"not an image", 32)


def test_load_domain_folders(tmp_path):
    rng = np.random.default_rng(1)
    for name, count in (("c", 1), ("a", 2), ("b", 3)):
        for k in range(count):
            write_png(tmp_path / name / f"{k}.png", rng.integers(0, 256, (20, 20, 3), dtype=np.uint8))
    (tmp_path / "a" / "notes.txt").write_text("ignored")
    (tmp_path / "b" / "broken.png").write_bytes(b"garbage")
    with pytest.warns(UserWarning, match="broken.png"):
        ds = load_domain_folders(tmp_path, 16)
    assert ds.names == ["a", "b", "c"]
    assert ds.sizes() == [2, 3, 1]
    assert ds.image_shape == (3, 16, 16)


def test_load_domain_folders_errors(tmp_path):
    write_png(tmp_path / "only" / "0.png", np.zeros((8, 8, 3), dtype=np.uint8))
    with pytest.raises(DataError):
        load_domain_folders(tmp_path, 8)
    (tmp_path / "empty").mkdir()
    with pytest.raises(DataError):
        load_domain_folders(tmp_path, 8)
    (tmp_path / "empty" / "bad.png").write_bytes(b"garbage")
    with pytest.warns(UserWarning), pytest.raises(DataError):
        load_domain_folders(tmp_path, 8)
    with pytest.raises(DataError):
        load_domain_folders(tmp_path / "missing", 8)


def _toy(sizes):
    return MultiDomainDataset([f"d{k}" for k in range(len(sizes))],
                              [torch.full((n, 3, 4, 4), k, dtype=torch.uint8) for k, n in enumerate(sizes)])


def test_sample_bag_basic():
    ds = _toy([4, 2, 3])
    bag = sample_bag(ds, torch.Generator().manual_seed(0))
    assert bag.domains == [0, 1, 2]
    assert [tuple(im.shape) for im in bag.images] == [(1, 3, 4, 4)] * 3
    for d, im in bag.entries:
        assert float(im[0, 0, 0, 0]) == pytest.approx(d / 127.5 - 1)
    seq = lambda: [sample_bag(ds, torch.Generator().manual_seed(4)).indices for _ in range(1)]
    g1, g2 = torch.Generator().manual_seed(4), torch.Generator().manual_seed(4)
    assert [sample_bag(ds, g1).indices for _ in range(20)] == [sample_bag(ds, g2).indices for _ in range(20)]


def test_sample_bag_uniform():
    ds = _toy([4, 5])
    g = torch.Generator().manual_seed(1)
    n = 10_000
    idx = np.array([sample_bag(ds, g).indices for _ in range(n)])[:, :, 0]
    counts = np.bincount(idx[:, 0], minlength=4)
    p = 1 / 4
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < 5 * sigma)
    # independence across domains: chi-square on the 4x5 contingency table
    table = np.zeros((4, 5))
    np.add.at(table, (idx[:, 0], idx[:, 1]), 1)
    assert stats.chi2_contingency(table).pvalue > 1e-3


def test_sample_bag_empty_domain():
    ds = _toy([2, 0])
    with pytest.raises(DataError):
        sample_bag(ds, torch.Generator())


def test_dataset_requires_two_domains():
    with pytest.raises(DataError):
        _toy([3])


def test_synth_counts_and_pairing():
    ds = synth_generate(SynthSpec(num_domains=3, image_size=32, train_per_domain=150, test_per_domain=99))
    assert ds.train.sizes() == [150] * 3 and ds.test.sizes() == [99] * 3
    assert sum(ds.train.sizes()) == 450 and sum(ds.test.sizes()) == 297
    for split in (ds.train, ds.test):
        for a in range(3):
            for b in range(3):
                partners = [split.partner(a, k, b) for k in range(split.sizes()[a])]
                assert sorted(partners) == list(range(split.sizes()[b]))
    assert not set(ds.train.scene_ids[0]) & set(ds.test.scene_ids[0])


def test_synth_ground_truth_by_construction(tiny_synth):
    spec = tiny_synth.spec
    test = tiny_synth.test
    for i in range(3):
        for k in range(test.sizes()[i]):
            scene = render_scene(test.scene_ids[i][k], spec.image_size, spec.seed)
            for j, t in enumerate(tiny_synth.transforms):
                stored = test.images[j][test.partner(i, k, j)]
                rendered = torch.from_numpy(t(scene)).permute(2, 0, 1)
                assert torch.equal(stored, rendered)
                assert ssim(normalize(rendered, torch.float64), normalize(stored, torch.float64)) == 1.0
    x = test.domain_images(0)
    assert x.min() >= -1 and x.max() <= 1


def test_synth_transforms_distinct():
    ts = domain_transforms(6, seed=0)
    assert len({(t.gains, t.curve, t.shading, t.strength, t.angle) for t in ts}) == 6
    scene = render_scene(0, 32, 0)
    imgs = [t(scene) for t in ts]
    for a in range(6):
        for b in range(a + 1, 6):
            assert not np.array_equal(imgs[a], imgs[b])


def test_tone_curves_monotone():
    t = np.linspace(0, 1, 1001)
    for tr in domain_transforms(8, seed=3):
        assert np.all(np.diff(tr.tone(t)) >= 0)


def test_synth_invalid_spec():
    with pytest.raises(DataError):
        synth_generate(SynthSpec(num_domains=1))


def test_write_and_reload(tmp_path, tiny_synth):
    root = write_synth(tiny_synth, tmp_path / "ds")
    pairs = json.loads((root / "pairs.json").read_text())
    assert len(pairs) == 10
    assert set(pairs["0"]) == set(tiny_synth.train.names)
    assert json.loads((root / "spec.json").read_text())["num_domains"] == 3
    test = load_split(root, "test", 16)
    assert test.names == sorted(tiny_synth.test.names)
    for d, name in enumerate(test.names):
        src = tiny_synth.test.names.index(name)
        assert torch.equal(test.images[d], tiny_synth.test.images[src])
    a, b = test.names.index("dark"), test.names.index("normal")
    k = 2
    assert test.scene_ids[a][k] == test.scene_ids[b][test.partner(a, k, b)]
    assert load_split(root, "train", 16, with_pairing=False).scene_ids is None
