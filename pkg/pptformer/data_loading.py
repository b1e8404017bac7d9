import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from joblib import Parallel, delayed
from pytorch_lightning import LightningDataModule
from pytorch_lightning.utilities import rank_zero_info
from torch.utils.data import DataLoader, Dataset, get_worker_info
from tqdm import tqdm

from pptformer.errors import ConfigError, DataError
from pptformer.metrics import IGNORE_INDEX
from pptformer.numerics import DTYPE, Rng

SCALE_RANGE = (0.5, 2.0)
YAW_RANGE = (-45.0, 45.0)
PITCH_RANGE = (0.0, 30.0)
# viewpoint-shift protocol: train and validate on low pitch, test on high pitch
SPLIT_PITCH = {"train": (0.0, 15.0), "val": (0.0, 15.0), "test": (20.0, 30.0)}
SPLIT_OFFSET = {"train": 0, "val": 1_000_000, "test": 2_000_000}
AUGMENTATIONS = ("no", "rotate", "scale", "persp_vertical", "persp_horizontal", "combo")
PALETTE_SEED = 20240
SAMPLE_MAGIC = b"PPTS"
SAMPLE_VERSION = 1
SAMPLE_SUFFIX = ".pptsample"


@dataclass
class SegSample:
    """Image (C, H, W) float64, labels (H, W) int64 and the (scale, yaw, pitch) it was rendered from."""

    image: torch.Tensor
    labels: torch.Tensor
    viewpoint: tuple


@dataclass
class Scene:
    num_classes: int
    offset: float
    boundaries: np.ndarray
    radii: np.ndarray
    polygons: list
    brightness: np.ndarray
    phases: np.ndarray


@dataclass
class DataConfig:
    train_samples: int = 64
    val_samples: int = 16
    test_samples: int = 32
    data_seed: int = 0
    augmentation: str = "no"
    num_workers: int = 0
    # folder with train/, val/ and test/ sample files written by gen-data; empty renders on the fly
    data_dir: str = ""

    def validate(self):
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigError(f"augmentation {self.augmentation} not supported, use one of {AUGMENTATIONS}")
        if min(self.train_samples, self.val_samples, self.test_samples) < 1:
            raise ConfigError("every split needs at least one sample")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown data config keys: {unknown}")
        return cls(**d).validate()


def class_palette(num_classes, channels):
    """Fixed per-class base colours, identical for every scene."""
    return Rng(PALETTE_SEED).generator.uniform(0.15, 0.85, size=(num_classes, channels))


def check_viewpoint(viewpoint):
    s, yaw, pitch = viewpoint
    if not (SCALE_RANGE[0] <= s <= SCALE_RANGE[1] and YAW_RANGE[0] <= yaw <= YAW_RANGE[1]
            and PITCH_RANGE[0] <= pitch <= PITCH_RANGE[1]):
        raise ConfigError(
            f"viewpoint {viewpoint} outside scale {SCALE_RANGE}, yaw {YAW_RANGE}, pitch {PITCH_RANGE}"
        )


def camera_homography(viewpoint):
    """World plane to normalized image coordinates: pitch tilt @ yaw rotation @ altitude scale."""
    s, yaw, pitch = viewpoint
    t = math.radians(yaw)
    p = math.radians(pitch)
    scale = np.diag([s, s, 1.0])
    rotation = np.array([[math.cos(t), -math.sin(t), 0.0], [math.sin(t), math.cos(t), 0.0], [0.0, 0.0, 1.0]])
    tilt = np.array([[1.0, 0.0, 0.0], [0.0, math.cos(p), 0.0], [0.0, math.sin(p), 1.0]])
    return tilt @ rotation @ scale


def make_scene(scene_seed, num_classes):
    """Angular sectors meeting at the origin, one per foreground class, plus a few convex polygons further out."""
    rng = Rng(scene_seed).generator
    k = num_classes - 1
    widths = 1.0 + rng.uniform(-0.3, 0.3, size=k)
    boundaries = np.concatenate([[0.0], np.cumsum(widths / widths.sum() * 2 * np.pi)[:-1]])
    polygons = []
    for _ in range(rng.integers(0, 4)):
        centre_angle = rng.uniform(0, 2 * np.pi)
        centre = rng.uniform(0.55, 0.9) * np.array([np.cos(centre_angle), np.sin(centre_angle)])
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=rng.integers(3, 6)))
        vertices = centre + rng.uniform(0.08, 0.18) * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        polygons.append((vertices, int(rng.integers(1, num_classes))))
    return Scene(
        num_classes=num_classes,
        offset=rng.uniform(0, 2 * np.pi),
        boundaries=boundaries,
        radii=rng.uniform(0.35, 0.6, size=k),
        polygons=polygons,
        brightness=rng.uniform(0.8, 1.2, size=num_classes),
        phases=rng.uniform(0, 2 * np.pi, size=num_classes),
    )


def _inside_convex(vertices, X, Y):
    inside = np.ones_like(X, dtype=bool)
    n = len(vertices)
    for i in range(n):
        (x0, y0), (x1, y1) = vertices[i], vertices[(i + 1) % n]
        inside &= (x1 - x0) * (Y - y0) - (y1 - y0) * (X - x0) >= 0
    return inside


def world_labels(scene, X, Y):
    if scene.num_classes == 1:
        return np.zeros(X.shape, dtype=np.int64)
    angle = np.mod(np.arctan2(Y, X) - scene.offset, 2 * np.pi)
    sector = np.searchsorted(scene.boundaries, angle, side="right") - 1
    labels = np.where(np.hypot(X, Y) < scene.radii[sector], sector + 1, 0)
    for vertices, cls in scene.polygons:
        labels[_inside_convex(vertices, X, Y)] = cls
    return labels.astype(np.int64)


def world_image(scene, X, Y, labels, channels, noise_rng):
    """Class colour times a per-scene brightness plus a world-space stripe texture tuned per class."""
    palette = class_palette(scene.num_classes, channels)
    frequency = 6.0 + 3.0 * labels
    orientation = np.pi * labels / scene.num_classes
    stripes = 0.2 * np.sin(2 * np.pi * frequency * (X * np.cos(orientation) + Y * np.sin(orientation))
                           + scene.phases[labels])
    base = palette[labels] * scene.brightness[labels][..., None]
    image = base + stripes[..., None] + noise_rng.normal(0.0, 0.03, size=base.shape)
    return np.moveaxis(image, -1, 0)


def _pixel_centres(size):
    c = (np.arange(size) + 0.5) / size * 2 - 1
    Y, X = np.meshgrid(c, c, indexing="ij")
    return X, Y


def _noise_rng(scene_seed, viewpoint):
    # the noise is a function of the viewpoint too, so the render is fully determined by both
    key = np.frombuffer(np.array(viewpoint, dtype="<f8").tobytes(), dtype="<u4")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(scene_seed, spawn_key=tuple(int(k) for k in key))))


def _render(scene_seed, viewpoint, homography, size, num_classes, channels):
    scene = make_scene(scene_seed, num_classes)
    X, Y = _pixel_centres(size)
    world = np.linalg.inv(homography) @ np.stack([X.ravel(), Y.ravel(), np.ones(X.size)])
    WX = (world[0] / world[2]).reshape(size, size)
    WY = (world[1] / world[2]).reshape(size, size)
    labels = world_labels(scene, WX, WY)
    image = world_image(scene, WX, WY, labels, channels, _noise_rng(scene_seed, viewpoint))
    return SegSample(
        image=torch.from_numpy(image).to(DTYPE),
        labels=torch.from_numpy(labels),
        viewpoint=tuple(float(v) for v in viewpoint),
    )


def synth_scene(scene_seed, viewpoint, size=64, num_classes=6, channels=3):
    """Render scene `scene_seed` seen from viewpoint (altitude scale, yaw degrees, pitch degrees)."""
    check_viewpoint(viewpoint)
    return _render(scene_seed, viewpoint, camera_homography(viewpoint), size, num_classes, channels)


def rasterize_scene(scene_seed, size=64, num_classes=6, channels=3):
    """The scene sampled directly on the pixel grid, without any camera."""
    return _render(scene_seed, (1.0, 0.0, 0.0), np.eye(3), size, num_classes, channels)


def rotation_matrix(degrees):
    t = math.radians(degrees)
    return np.array([[math.cos(t), -math.sin(t), 0.0], [math.sin(t), math.cos(t), 0.0], [0.0, 0.0, 1.0]])


def scale_matrix(factor):
    return np.diag([factor, factor, 1.0])


def perspective_matrix(strength, axis="vertical"):
    m = np.eye(3)
    if axis == "vertical":
        m[2, 1] = strength
    elif axis == "horizontal":
        m[2, 0] = strength
    else:
        raise ConfigError(f"perspective axis {axis} not supported")
    return m


def augmentation_matrix(kind, rng=None, params=None):
    """Forward transform of a classic augmentation; missing params are drawn from rng."""
    params = dict(params or {})

    def draw(name, low, high):
        if name not in params:
            if rng is None:
                raise ConfigError(f"augmentation {kind} needs either params['{name}'] or an rng")
            params[name] = rng.uniform(low, high)
        return params[name]

    if kind == "rotate":
        return rotation_matrix(draw("angle", -30.0, 30.0))
    if kind == "scale":
        return scale_matrix(draw("factor", 0.75, 1.25))
    if kind == "persp_vertical":
        return perspective_matrix(draw("strength", -0.3, 0.3), "vertical")
    if kind == "persp_horizontal":
        return perspective_matrix(draw("strength", -0.3, 0.3), "horizontal")
    if kind == "combo":
        axis = params.get("axis") or ("vertical" if rng is None or rng.uniform() < 0.5 else "horizontal")
        return (perspective_matrix(draw("strength", -0.3, 0.3), axis)
                @ rotation_matrix(draw("angle", -30.0, 30.0))
                @ scale_matrix(draw("factor", 0.75, 1.25)))
    raise ConfigError(f"augmentation kind {kind} not supported, use one of {AUGMENTATIONS[1:]}")


def warp(sample, matrix):
    """Apply a homography to image (bilinear) and labels (nearest); pixels from outside the frame become ignored."""
    _, h, w = sample.image.shape
    ys = (torch.arange(h, dtype=DTYPE) + 0.5) / h * 2 - 1
    xs = (torch.arange(w, dtype=DTYPE) + 0.5) / w * 2 - 1
    Y, X = torch.meshgrid(ys, xs, indexing="ij")
    target = torch.stack([X.reshape(-1), Y.reshape(-1), torch.ones(h * w, dtype=DTYPE)])
    source = torch.from_numpy(np.linalg.inv(matrix)).to(DTYPE) @ target
    grid = (source[:2] / source[2]).T.reshape(1, h, w, 2)
    image = F.grid_sample(sample.image[None], grid, mode="bilinear", padding_mode="zeros", align_corners=False)[0]
    shifted = (sample.labels.to(DTYPE) + 1)[None, None]
    labels = F.grid_sample(shifted, grid, mode="nearest", padding_mode="zeros", align_corners=False)[0, 0].long() - 1
    labels[labels < 0] = IGNORE_INDEX
    return SegSample(image=image, labels=labels, viewpoint=sample.viewpoint)


def classic_augment(sample, kind, rng=None, params=None):
    """Rotate, scale, vertical or horizontal perspective, or a combination of them, applied jointly to image and labels."""
    if kind not in AUGMENTATIONS[1:]:
        raise ConfigError(f"augmentation kind {kind} not supported, use one of {AUGMENTATIONS[1:]}")
    return warp(sample, augmentation_matrix(kind, rng=rng, params=params))


def sample_viewpoint(rng, split):
    if split not in SPLIT_PITCH:
        raise ConfigError(f"split {split} not supported, use one of {list(SPLIT_PITCH)}")
    return (
        rng.uniform(*SCALE_RANGE),
        rng.uniform(*YAW_RANGE),
        rng.uniform(*SPLIT_PITCH[split]),
    )


def _make_sample(seed, split, index, size, num_classes, channels):
    rng = Rng(seed).spawn(SPLIT_OFFSET[split] + index)
    scene_seed = rng.integers(0, 2 ** 31)
    return synth_scene(scene_seed, sample_viewpoint(rng, split), size=size, num_classes=num_classes, channels=channels)


def generate_samples(count, seed, split="train", size=64, num_classes=6, channels=3, n_jobs=1):
    """Render `count` samples of a split; every sample has its own derived seed, so n_jobs does not change the result."""
    if split not in SPLIT_OFFSET:
        raise ConfigError(f"split {split} not supported, use one of {list(SPLIT_OFFSET)}")
    return Parallel(n_jobs=n_jobs)(
        delayed(_make_sample)(seed, split, i, size, num_classes, channels)
        for i in tqdm(range(count), desc=f"rendering {split}", disable=count < 100)
    )


def write_sample(sample, path):
    """One sample per file: magic, version, H, W, C, viewpoint, then little-endian f8 image and u1 labels."""
    c, h, w = sample.image.shape
    labels = sample.labels.numpy()
    if labels.min() < 0 or labels.max() > 255:
        raise DataError(f"labels must fit in one byte, got range [{labels.min()}, {labels.max()}]")
    with open(path, "wb") as f:
        f.write(SAMPLE_MAGIC)
        f.write(np.array([SAMPLE_VERSION, h, w, c], dtype="<u4").tobytes())
        f.write(np.array(sample.viewpoint, dtype="<f8").tobytes())
        f.write(sample.image.numpy().astype("<f8").tobytes())
        f.write(labels.astype("<u1").tobytes())


def read_sample(path):
    data = Path(path).read_bytes()
    if data[:4] != SAMPLE_MAGIC:
        raise DataError(f"{path} is not a sample file")
    header_end = 4 + 16 + 24
    if len(data) < header_end:
        raise DataError(f"{path} is truncated inside the header")
    version, h, w, c = (int(v) for v in np.frombuffer(data[4:20], dtype="<u4"))
    if version != SAMPLE_VERSION:
        raise DataError(f"{path} has unsupported version {version}")
    viewpoint = tuple(float(v) for v in np.frombuffer(data[20:header_end], dtype="<f8"))
    image_end = header_end + 8 * c * h * w
    if len(data) != image_end + h * w:
        raise DataError(f"{path} has {len(data)} bytes, expected {image_end + h * w}")
    image = np.frombuffer(data[header_end:image_end], dtype="<f8").reshape(c, h, w).astype(np.float64)
    labels = np.frombuffer(data[image_end:], dtype="<u1").reshape(h, w).astype(np.int64)
    return SegSample(image=torch.from_numpy(image), labels=torch.from_numpy(labels), viewpoint=viewpoint)


class SynthSceneDataset(Dataset):
    """Rendered scenes, optionally augmented on the fly with a classic transform."""

    def __init__(self, samples, augmentation="no", seed=0, num_classes=None):
        if augmentation not in AUGMENTATIONS:
            raise ConfigError(f"augmentation must be one of {AUGMENTATIONS}, got {augmentation}")
        self.samples = list(samples)
        self.augmentation = augmentation
        self.seed = seed
        self.rng = Rng(seed)
        if num_classes is not None:
            for sample in self.samples:
                bad = (sample.labels >= num_classes) & (sample.labels != IGNORE_INDEX)
                if bad.any():
                    raise DataError(f"sample labels {sample.labels[bad].unique().tolist()} exceed {num_classes} classes")

    def reseed(self, worker_seed):
        """Switch to the augmentation stream of one DataLoader worker."""
        self.rng = Rng(self.seed).spawn(worker_seed)

    @classmethod
    def from_directory(cls, folder, **kwargs):
        paths = sorted(Path(folder).glob(f"*{SAMPLE_SUFFIX}"))
        if not paths:
            raise DataError(f"no {SAMPLE_SUFFIX} files in {folder}")
        return cls([read_sample(p) for p in paths], **kwargs)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, idx):
        sample = self.samples[idx]
        if self.augmentation != "no":
            sample = classic_augment(sample, self.augmentation, rng=self.rng)
        return sample.image, sample.labels, torch.tensor(sample.viewpoint, dtype=DTYPE)


def seed_worker(worker_id):
    """DataLoader worker_init_fn: workers start from copies of one rng, give each its own stream."""
    info = get_worker_info()
    if info is not None and hasattr(info.dataset, "reseed"):
        info.dataset.reseed(info.seed)


class SynthDataModule(LightningDataModule):
    def __init__(self, data_config=None, image_size=64, num_classes=6, in_channels=3, batch_size=8):
        super(SynthDataModule, self).__init__()
        self.data_config = (data_config or DataConfig()).validate()
        self.image_size = image_size
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.batch_size = batch_size
        self.is_setup = False

    def prepare_data(self):
        pass

    def setup(self, stage=None):
        if self.is_setup:
            return
        c = self.data_config
        if c.data_dir:
            splits = {split: self.read_split(split) for split in ("train", "val", "test")}
        else:
            n_jobs = max(c.num_workers, 1)
            render = dict(size=self.image_size, num_classes=self.num_classes, channels=self.in_channels, n_jobs=n_jobs)
            splits = {
                "train": generate_samples(c.train_samples, c.data_seed, "train", **render),
                "val": generate_samples(c.val_samples, c.data_seed, "val", **render),
                "test": generate_samples(c.test_samples, c.data_seed, "test", **render),
            }
        self.dataset_train = SynthSceneDataset(
            splits["train"], augmentation=c.augmentation, seed=c.data_seed, num_classes=self.num_classes
        )
        self.dataset_val = SynthSceneDataset(splits["val"], num_classes=self.num_classes)
        self.dataset_test = SynthSceneDataset(splits["test"], num_classes=self.num_classes)
        rank_zero_info(
            f"Train size :{len(self.dataset_train)}, Val size :{len(self.dataset_val)}, Test size :{len(self.dataset_test)}"
        )
        self.is_setup = True

    def read_split(self, split):
        folder = Path(self.data_config.data_dir) / split
        samples = SynthSceneDataset.from_directory(folder).samples
        expected = (self.in_channels, self.image_size, self.image_size)
        for sample in samples:
            if tuple(sample.image.shape) != expected:
                raise DataError(f"{folder} holds images of shape {tuple(sample.image.shape)}, the model expects {expected}")
        return samples

    def train_dataloader(self):
        return DataLoader(
            self.dataset_train,
            batch_size=self.batch_size,
            num_workers=self.data_config.num_workers,
            shuffle=True,
            worker_init_fn=seed_worker,
        )

    def val_dataloader(self):
        return DataLoader(
            self.dataset_val, batch_size=self.batch_size, num_workers=self.data_config.num_workers
        )

    def test_dataloader(self):
        return DataLoader(
            self.dataset_test, batch_size=self.batch_size, num_workers=self.data_config.num_workers
        )
