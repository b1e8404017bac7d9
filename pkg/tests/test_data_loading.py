import numpy as np
import pytest
import torch

from pptformer.data_loading import (SAMPLE_SUFFIX, SPLIT_PITCH, DataConfig, SynthDataModule, SynthSceneDataset,
                                    augmentation_matrix, classic_augment, generate_samples, perspective_matrix,
                                    rasterize_scene, read_sample, rotation_matrix, scale_matrix, seed_worker,
                                    synth_scene, write_sample)
from pptformer.errors import ConfigError, DataError
from pptformer.metrics import IGNORE_INDEX, miou
from pptformer.numerics import Rng


def test_identity_viewpoint_is_raster():
    sample = synth_scene(3, (1.0, 0.0, 0.0), size=32)
    raster = rasterize_scene(3, size=32)
    assert torch.equal(sample.labels, raster.labels)
    assert torch.equal(sample.image, raster.image)


def test_render_deterministic():
    a = synth_scene(7, (1.3, 12.0, 8.0), size=32)
    b = synth_scene(7, (1.3, 12.0, 8.0), size=32)
    assert torch.equal(a.image, b.image)
    assert torch.equal(a.labels, b.labels)
    assert a.viewpoint == (1.3, 12.0, 8.0)


def test_render_shapes_and_labels():
    sample = synth_scene(1, (0.8, -20.0, 5.0), size=24, num_classes=4, channels=1)
    assert sample.image.shape == (1, 24, 24)
    assert sample.image.dtype == torch.float64
    assert sample.labels.shape == (24, 24)
    assert sample.labels.min() >= 0 and sample.labels.max() < 4


@pytest.mark.parametrize("viewpoint", [(3.0, 0.0, 0.0), (1.0, 180.0, 0.0), (1.0, 0.0, -5.0), (0.4, 0.0, 0.0)])
def test_viewpoint_out_of_range(viewpoint):
    with pytest.raises(ConfigError):
        synth_scene(0, viewpoint)


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_class_inventory_is_viewpoint_independent(seed):
    viewpoints = [(1.0, 0.0, 0.0), (0.7, 30.0, 10.0), (1.2, -40.0, 25.0), (0.5, 10.0, 30.0)]
    inventories = [set(synth_scene(seed, v).labels.unique().tolist()) for v in viewpoints]
    assert all(inv == inventories[0] for inv in inventories)
    assert inventories[0] == set(range(6))


def test_rotate_zero_is_identity():
    sample = synth_scene(2, (1.0, 5.0, 5.0))
    out = classic_augment(sample, "rotate", params={"angle": 0.0})
    assert torch.allclose(out.image, sample.image, atol=1e-12)
    assert torch.equal(out.labels, sample.labels)


def test_scale_one_is_identity():
    sample = synth_scene(2, (1.0, 5.0, 5.0))
    out = classic_augment(sample, "scale", params={"factor": 1.0})
    assert torch.allclose(out.image, sample.image, atol=1e-12)
    assert torch.equal(out.labels, sample.labels)


def test_rotate_twice_by_90():
    sample = synth_scene(4, (1.1, -10.0, 12.0))
    twice = classic_augment(classic_augment(sample, "rotate", params={"angle": 90.0}), "rotate", params={"angle": 90.0})
    once = classic_augment(sample, "rotate", params={"angle": 180.0})
    assert torch.equal(twice.labels, once.labels)
    assert torch.equal(once.labels, torch.flip(sample.labels, dims=(0, 1)))


def test_out_of_frame_pixels_are_ignored():
    sample = synth_scene(5, (1.0, 0.0, 0.0))
    out = classic_augment(sample, "rotate", params={"angle": 30.0})
    assert int(out.labels[0, 0]) == IGNORE_INDEX
    assert (out.labels != IGNORE_INDEX).sum() > 0.5 * out.labels.numel()
    assert miou(out.labels, out.labels, 6)[1] == 1.0


def test_combo_composes_transforms():
    params = {"angle": 12.0, "factor": 0.9, "strength": 0.2, "axis": "horizontal"}
    expected = perspective_matrix(0.2, "horizontal") @ rotation_matrix(12.0) @ scale_matrix(0.9)
    assert np.allclose(augmentation_matrix("combo", params=params), expected)


def test_augmentation_draws_from_rng():
    a = augmentation_matrix("persp_vertical", rng=Rng(0))
    b = augmentation_matrix("persp_vertical", rng=Rng(0))
    assert np.array_equal(a, b)
    assert -0.3 <= a[2, 1] <= 0.3


def test_augmentation_errors():
    sample = synth_scene(0, (1.0, 0.0, 0.0), size=16)
    with pytest.raises(ConfigError):
        classic_augment(sample, "shear")
    with pytest.raises(ConfigError):
        classic_augment(sample, "rotate")
    with pytest.raises(ConfigError):
        perspective_matrix(0.1, "diagonal")


def test_generate_samples_splits():
    train = generate_samples(4, seed=1, split="train", size=16)
    test = generate_samples(4, seed=1, split="test", size=16)
    assert all(SPLIT_PITCH["train"][0] <= s.viewpoint[2] <= SPLIT_PITCH["train"][1] for s in train)
    assert all(SPLIT_PITCH["test"][0] <= s.viewpoint[2] <= SPLIT_PITCH["test"][1] for s in test)
    again = generate_samples(4, seed=1, split="train", size=16)
    assert all(torch.equal(a.image, b.image) for a, b in zip(train, again))
    with pytest.raises(ConfigError):
        generate_samples(1, seed=0, split="holdout")


def test_write_and_read_sample(tmp_path):
    sample = synth_scene(6, (0.9, 15.0, 20.0), size=16)
    path = tmp_path / f"sample{SAMPLE_SUFFIX}"
    write_sample(sample, path)
    loaded = read_sample(path)
    assert torch.equal(loaded.image, sample.image)
    assert torch.equal(loaded.labels, sample.labels)
    assert loaded.viewpoint == sample.viewpoint


def test_read_corrupt_sample(tmp_path):
    sample = synth_scene(6, (0.9, 15.0, 20.0), size=16)
    path = tmp_path / f"sample{SAMPLE_SUFFIX}"
    write_sample(sample, path)
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(DataError):
        read_sample(path)
    path.write_bytes(b"JUNK" + data[4:])
    with pytest.raises(DataError):
        read_sample(path)


def test_dataset_from_directory(tmp_path):
    for i, sample in enumerate(generate_samples(3, seed=2, size=16)):
        write_sample(sample, tmp_path / f"sample_{i:05d}{SAMPLE_SUFFIX}")
    dataset = SynthSceneDataset.from_directory(tmp_path, num_classes=6)
    assert len(dataset) == 3
    image, labels, viewpoint = dataset[0]
    assert image.shape == (3, 16, 16)
    assert labels.shape == (16, 16)
    assert viewpoint.shape == (3,)
    with pytest.raises(DataError):
        SynthSceneDataset.from_directory(tmp_path / "empty")


def test_dataset_label_check():
    sample = synth_scene(0, (1.0, 0.0, 0.0), size=16, num_classes=6)
    with pytest.raises(DataError):
        SynthSceneDataset([sample], num_classes=1)


def test_dataset_online_augmentation():
    samples = generate_samples(2, seed=3, size=16)
    dataset = SynthSceneDataset(samples, augmentation="rotate", seed=0)
    image, labels, _ = dataset[0]
    assert image.shape == samples[0].image.shape
    assert labels.shape == samples[0].labels.shape


def test_data_config():
    with pytest.raises(ConfigError):
        DataConfig.from_dict({"train_size": 3})
    with pytest.raises(ConfigError):
        DataConfig.from_dict({"augmentation": "flip"})
    assert DataConfig.from_dict(DataConfig().to_dict()) == DataConfig()


def test_datamodule():
    datamodule = SynthDataModule(DataConfig(train_samples=4, val_samples=2, test_samples=2), image_size=16, batch_size=2)
    datamodule.setup()
    datamodule.setup()
    image, labels, viewpoint = next(iter(datamodule.train_dataloader()))
    assert image.shape == (2, 3, 16, 16)
    assert labels.shape == (2, 16, 16)
    assert viewpoint.shape == (2, 3)
    assert len(datamodule.test_dataloader().dataset) == 2


def write_split_folders(root, size=16, counts=(4, 2, 2)):
    for split, count in zip(("train", "val", "test"), counts):
        folder = root / split
        folder.mkdir(parents=True)
        for i, sample in enumerate(generate_samples(count, seed=5, split=split, size=size)):
            write_sample(sample, folder / f"sample_{i:05d}{SAMPLE_SUFFIX}")


def test_datamodule_reads_sample_folders(tmp_path):
    write_split_folders(tmp_path)
    datamodule = SynthDataModule(DataConfig(data_dir=str(tmp_path)), image_size=16, batch_size=2)
    datamodule.setup()
    assert [len(d) for d in (datamodule.dataset_train, datamodule.dataset_val, datamodule.dataset_test)] == [4, 2, 2]
    expected = read_sample(tmp_path / "test" / f"sample_00000{SAMPLE_SUFFIX}")
    image, labels, _ = datamodule.dataset_test[0]
    assert torch.equal(image, expected.image)
    assert torch.equal(labels, expected.labels)
    # test pitches come from the shifted range
    assert all(SPLIT_PITCH["test"][0] <= s.viewpoint[2] <= SPLIT_PITCH["test"][1] for s in datamodule.dataset_test.samples)


def test_datamodule_sample_folder_errors(tmp_path):
    write_split_folders(tmp_path)
    with pytest.raises(DataError):
        SynthDataModule(DataConfig(data_dir=str(tmp_path)), image_size=32).setup()
    with pytest.raises(DataError):
        SynthDataModule(DataConfig(data_dir=str(tmp_path / "missing")), image_size=16).setup()


def test_reseeded_workers_draw_different_augmentations():
    samples = generate_samples(1, seed=4, size=16)
    first = SynthSceneDataset(samples, augmentation="rotate", seed=0)
    second = SynthSceneDataset(samples, augmentation="rotate", seed=0)
    # unseeded copies repeat each other
    assert torch.equal(first[0][0], second[0][0])
    first.reseed(11)
    second.reseed(12)
    assert not torch.equal(first[0][0], second[0][0])
    again = SynthSceneDataset(samples, augmentation="rotate", seed=0)
    again.reseed(11)
    first.reseed(11)
    assert torch.equal(first[0][0], again[0][0])


def test_train_loader_reseeds_workers():
    datamodule = SynthDataModule(DataConfig(train_samples=2, val_samples=1, test_samples=1), image_size=16, batch_size=2)
    datamodule.setup()
    assert datamodule.train_dataloader().worker_init_fn is seed_worker
    # outside a worker process there is nothing to reseed
    seed_worker(0)
