import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import pandas as pd
import torch
import yaml
from joblib import Parallel, delayed
from pytorch_lightning import Callback, Trainer, seed_everything
from pytorch_lightning.utilities import rank_zero_info, rank_zero_warn
from tqdm import tqdm

from pptformer.data_loading import DataConfig, SynthDataModule
from pptformer.errors import ConfigError
from pptformer.metrics import MeanIoU
from pptformer.models import ModelConfig, PhaseSwitchCallback, PPTFormerLightModel, count_parameters

ABLATION_AXES = {
    "contourlet_T": "texture_levels",
    "prototypes_N": "num_prototypes",
    "calib_layers": "calibration_layers",
    "pmp_M": "pmp_layers",
    "augmentation": None,
}
AXIS_DEFAULTS = {
    "contourlet_T": [0, 1, 2, 3],
    "prototypes_N": [16, 32, 64, 128, 256],
    "calib_layers": [0, 1, 2, 3],
    "pmp_M": [1, 2, 4, 6],
    "augmentation": ["none", "rotate", "scale", "persp_vertical", "persp_horizontal", "combo", "pptformer", "pptformer+combo"],
}
# augmentation axis value -> (plain baseline model, classic augmentation)
AUGMENTATION_RUNS = {
    "none": (True, "no"),
    "rotate": (True, "rotate"),
    "scale": (True, "scale"),
    "persp_vertical": (True, "persp_vertical"),
    "persp_horizontal": (True, "persp_horizontal"),
    "combo": (True, "combo"),
    "pptformer": (False, "no"),
    "pptformer+combo": (False, "combo"),
}
# tolerance of the monotone contourlet check, as a fraction of IoU
NOISE_BAND = 0.005
INFERENCE_MODE = "single-scale"


@dataclass
class RunReport:
    config_hash: str
    axis: str = ""
    value: str = ""
    seed: int = 0
    split: str = "test"
    per_class_iou: list = field(default_factory=list)
    miou: float = float("nan")
    loss_curve: list = field(default_factory=list)
    seg_loss_curve: list = field(default_factory=list)
    wall_clock: float = 0.0
    param_count: int = 0
    inference: str = INFERENCE_MODE
    status: str = "ok"
    error: str = None

    def to_json(self):
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, line):
        return cls(**json.loads(line))

    def fingerprint(self):
        """Every field except the wall-clock time, for reproducibility comparisons."""
        d = asdict(self)
        d.pop("wall_clock")
        return json.dumps(d, sort_keys=True)


class LossCurveCallback(Callback):
    """Per-iteration total loss, plus its segmentation part."""

    def __init__(self):
        self.losses = []
        self.seg_losses = []

    def on_train_batch_end(self, trainer, pl_module, outputs, batch, batch_idx):
        self.losses.append(float(outputs["loss"]))
        self.seg_losses.append(float(outputs["seg_loss"]))


def load_run_config(path):
    """Read a YAML file with `model:` and `data:` sections (a flat file is the model section)."""
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    if "model" in data or "data" in data:
        extra = sorted(set(data) - {"model", "data"})
        if extra:
            raise ConfigError(f"unknown config sections: {extra}")
        return ModelConfig.from_dict(data.get("model") or {}), DataConfig.from_dict(data.get("data") or {})
    return ModelConfig.from_dict(data), DataConfig()


def make_datamodule(model_config, data_config):
    return SynthDataModule(
        data_config,
        image_size=model_config.image_size,
        num_classes=model_config.num_classes,
        in_channels=model_config.in_channels,
        batch_size=model_config.batch_size,
    )


def evaluate(model, dataloader):
    """Single-scale inference over a dataloader; returns (per-class IoU list, mIoU)."""
    metric = MeanIoU(model.config.num_classes)
    model.eval()
    with torch.no_grad():
        for batch in dataloader:
            metric.update(model(batch[0]).argmax(dim=1), batch[1])
    return [float(v) for v in metric.per_class()], float(metric.compute())


def train_and_evaluate(model_config, data_config, seed, axis="", value="", out_dir=None, logger=False):
    """Train one model on the low-pitch split and evaluate it on the viewpoint-shifted test split.

    A run that raises is reported with status "aborted" instead of propagating.
    """
    start = time.perf_counter()
    config = ModelConfig.from_dict({**model_config.to_dict(), "seed": seed})
    report = RunReport(config_hash=config.config_hash(), axis=axis, value=str(value), seed=seed)
    try:
        seed_everything(seed, workers=True)
        datamodule = make_datamodule(config, data_config)
        model = PPTFormerLightModel(config)
        report.param_count = count_parameters(model.module)
        curve = LossCurveCallback()
        trainer = Trainer(
            max_steps=config.max_iterations,
            max_epochs=-1,
            accelerator="cpu",
            devices=1,
            precision=64,
            deterministic=True,
            gradient_clip_val=config.grad_clip or None,
            logger=logger,
            callbacks=[curve, PhaseSwitchCallback()],
            enable_checkpointing=False,
            enable_progress_bar=False,
            enable_model_summary=False,
            num_sanity_val_steps=0,
            limit_val_batches=0,
            log_every_n_steps=10,
        )
        trainer.fit(model, datamodule)
        report.loss_curve = curve.losses
        report.seg_loss_curve = curve.seg_losses
        report.per_class_iou, report.miou = evaluate(model, datamodule.test_dataloader())
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            trainer.save_checkpoint(str(Path(out_dir) / "model.ckpt"))
    except Exception as e:
        report.status = "aborted"
        report.error = f"{type(e).__name__}: {e}"
        rank_zero_warn(f"run {axis}={value} seed={seed} aborted: {report.error}")
    report.wall_clock = time.perf_counter() - start
    return report


def ablation_configs(axis, value, model_config, data_config):
    if axis not in ABLATION_AXES:
        raise ConfigError(f"ablation axis {axis} not supported, use one of {list(ABLATION_AXES)}")
    if axis == "augmentation":
        if value not in AUGMENTATION_RUNS:
            raise ConfigError(f"augmentation value {value} not supported, use one of {list(AUGMENTATION_RUNS)}")
        plain, augmentation = AUGMENTATION_RUNS[value]
        model = ModelConfig.from_dict({**model_config.to_dict(), "plain_baseline": plain})
        data = DataConfig.from_dict({**data_config.to_dict(), "augmentation": augmentation})
        return model, data
    model = ModelConfig.from_dict({**model_config.to_dict(), ABLATION_AXES[axis]: int(value)})
    return model, data_config


def run_ablation(axis, values=None, seeds=(0, 1, 2), model_config=None, data_config=None, n_jobs=1):
    """One training run per (value, seed); all configs are validated before any run starts."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"ablation axis {axis} not supported, use one of {list(ABLATION_AXES)}")
    model_config = model_config or ModelConfig()
    data_config = data_config or DataConfig()
    values = AXIS_DEFAULTS[axis] if values is None else values
    jobs = []
    for value in values:
        model, data = ablation_configs(axis, value, model_config, data_config)
        for seed in seeds:
            jobs.append((model, data, seed, value))
    rank_zero_info(f"Running {len(jobs)} {axis} runs")
    return Parallel(n_jobs=n_jobs)(
        delayed(train_and_evaluate)(model, data, seed, axis=axis, value=value)
        for model, data, seed, value in tqdm(jobs, desc=f"ablation {axis}")
    )


def seed_means(reports):
    """Mean mIoU per axis value over the finished runs."""
    df = pd.DataFrame([asdict(r) for r in reports if r.status == "ok"])
    if df.empty:
        return {}
    return df.groupby("value")["miou"].mean().to_dict()


def check_trends(axis, reports):
    """Directional checks on seed-mean mIoU; checks whose values were not run are skipped."""
    means = seed_means(reports)
    checks = []

    def expect(name, keys, condition):
        if all(str(k) in means for k in keys):
            values = [means[str(k)] for k in keys]
            checks.append({"check": name, "passed": bool(condition(*values)), "values": dict(zip(map(str, keys), values))})

    if axis == "augmentation":
        expect("pptformer > combo", ["pptformer", "combo"], lambda a, b: a > b)
        expect("combo > none", ["combo", "none"], lambda a, b: a > b)
    elif axis == "contourlet_T":
        expect("T=2 >= T=0", [2, 0], lambda a, b: a >= b)
        expect("monotone over T=0,1,2", [0, 1, 2], lambda a, b, c: b >= a - NOISE_BAND and c >= b - NOISE_BAND)
    elif axis == "calib_layers":
        expect("L_cal=2 >= L_cal=0", [2, 0], lambda a, b: a >= b)
    elif axis == "prototypes_N":
        expect("N=64 >= N=16", [64, 16], lambda a, b: a >= b)
        expect("N=64 >= N=256", [64, 256], lambda a, b: a >= b)
    return checks


def exit_code(reports, checks):
    if any(r.status != "ok" for r in reports):
        return 2
    if any(not c["passed"] for c in checks):
        return 1
    return 0


def write_reports(reports, out_dir):
    """One JSON-lines file per run plus a summary.csv over all runs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for r in reports:
        name = f"run_{r.axis or 'train'}_{r.value or 'default'}_seed{r.seed}.jsonl".replace("+", "_")
        (out_dir / name).write_text(r.to_json() + "\n")
    summary = pd.DataFrame([
        {"axis": r.axis, "value": r.value, "seed": r.seed, "miou": r.miou, "param_count": r.param_count,
         "status": r.status, "wall_clock": r.wall_clock, "config_hash": r.config_hash}
        for r in reports
    ])
    summary.to_csv(out_dir / "summary.csv", index=False)
    return out_dir / "summary.csv"


def load_reports(folder):
    reports = []
    for path in sorted(Path(folder).glob("*.jsonl")):
        for line in path.read_text().splitlines():
            if line.strip():
                reports.append(RunReport.from_json(line))
    return reports


def summarize(reports):
    """Seed-mean and seed-std mIoU per (axis, value)."""
    df = pd.DataFrame([asdict(r) for r in reports if r.status == "ok"])
    if df.empty:
        return df
    return df.groupby(["axis", "value"])["miou"].agg(["mean", "std", "count"]).reset_index()

