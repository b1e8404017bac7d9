import argparse
from pathlib import Path

import yaml
from pytorch_lightning.loggers import CSVLogger, WandbLogger

from pptformer.data_loading import SAMPLE_SUFFIX, DataConfig, generate_samples, write_sample
from pptformer.errors import ConfigError
from pptformer.experiments import (check_trends, evaluate, exit_code, load_reports, load_run_config, make_datamodule,
                                   run_ablation, summarize, train_and_evaluate, write_reports)
from pptformer.models import ModelConfig, PPTFormerLightModel, parameter_report


def parse_list(text, cast=str):
    return [cast(v) for v in text.split(",") if v.strip()]


def build_parser():
    parser = argparse.ArgumentParser(prog="pptformer")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="Train one model and evaluate it on the viewpoint-shifted split.")
    train.add_argument("--config", type=str, default="sweep/desk_default.yml")
    train.add_argument("--out", type=str, required=True)
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--wandb_log", action="store_true", help="Use wandb for logging.")
    train.add_argument("--data_dir", type=str, default=None, help="Folder with train/, val/ and test/ written by gen-data.")

    ev = sub.add_parser("eval", help="Evaluate a checkpoint on a split.")
    ev.add_argument("--checkpoint", type=str, required=True)
    ev.add_argument("--split", type=str, default="test", help="'train', 'val' or 'test'")
    ev.add_argument("--config", type=str, default=None, help="Config whose data section builds the split.")
    ev.add_argument("--data_dir", type=str, default=None, help="Folder with train/, val/ and test/ written by gen-data.")

    ablate = sub.add_parser("ablate", help="Sweep one axis over values and seeds.")
    ablate.add_argument("--axis", type=str, default=None)
    ablate.add_argument("--values", type=str, default=None, help="Comma separated, e.g. '0,1,2,3'")
    ablate.add_argument("--seeds", type=str, default=None, help="Comma separated, default '0,1,2'")
    ablate.add_argument("--grid", type=str, default=None, help="YAML file with axis, values and seeds, e.g. sweep/ablation_contourlet.yml")
    ablate.add_argument("--config", type=str, default="sweep/desk_default.yml")
    ablate.add_argument("--out", type=str, default="runs/ablation")
    ablate.add_argument("--n_jobs", type=int, default=1)
    ablate.add_argument("--data_dir", type=str, default=None, help="Folder with train/, val/ and test/ written by gen-data.")

    gen = sub.add_parser("gen-data", help="Render synthetic samples to disk.")
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", type=str, required=True)
    gen.add_argument("--split", type=str, default="train")
    gen.add_argument("--config", type=str, default=None)

    report = sub.add_parser("report", help="Print parameter counts and a summary of finished runs.")
    report.add_argument("--dir", type=str, required=True)
    report.add_argument("--config", type=str, default=None)
    return parser


def _configs(path, data_dir=None):
    model_config, data_config = (ModelConfig(), DataConfig()) if path is None else load_run_config(path)
    if data_dir:
        data_config = DataConfig.from_dict({**data_config.to_dict(), "data_dir": data_dir})
    return model_config, data_config


def cmd_train(args):
    model_config, data_config = _configs(args.config, args.data_dir)
    seed = model_config.seed if args.seed is None else args.seed
    if args.wandb_log:
        logger = WandbLogger(log_model=True, project="PPTFormer desk", name=f"train-{model_config.config_hash()[:8]}-seed{seed}")
    else:
        logger = CSVLogger(args.out, name="logs")
    report = train_and_evaluate(model_config, data_config, seed, out_dir=args.out, logger=logger)
    write_reports([report], args.out)
    print(f"status={report.status} mIoU={report.miou:.4f} params={report.param_count}")
    return 0 if report.status == "ok" else 2


def cmd_eval(args):
    model = PPTFormerLightModel.load_from_checkpoint(args.checkpoint)
    _, data_config = _configs(args.config, args.data_dir)
    datamodule = make_datamodule(model.config, data_config)
    datamodule.setup()
    loaders = {
        "train": datamodule.train_dataloader,
        "val": datamodule.val_dataloader,
        "test": datamodule.test_dataloader,
    }
    if args.split not in loaders:
        raise ConfigError(f"split {args.split} not supported, use one of {list(loaders)}")
    per_class, mean = evaluate(model, loaders[args.split]())
    print(f"split={args.split} mIoU={mean:.4f}")
    print("per-class IoU:", ", ".join(f"{v:.4f}" for v in per_class))
    return 0


def load_grid(path):
    with open(path) as f:
        grid = yaml.safe_load(f) or {}
    unknown = sorted(set(grid) - {"axis", "values", "seeds"})
    if unknown:
        raise ConfigError(f"unknown ablation grid keys: {unknown}")
    return grid


def cmd_ablate(args):
    model_config, data_config = _configs(args.config, args.data_dir)
    grid = load_grid(args.grid) if args.grid else {}
    axis = args.axis or grid.get("axis")
    if axis is None:
        raise ConfigError("ablate needs --axis or a --grid file naming one")
    values = parse_list(args.values) if args.values is not None else grid.get("values")
    seeds = parse_list(args.seeds, int) if args.seeds is not None else grid.get("seeds", [0, 1, 2])
    reports = run_ablation(axis, values, seeds, model_config, data_config, n_jobs=args.n_jobs)
    write_reports(reports, args.out)
    checks = check_trends(axis, reports)
    for c in checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['check']}: {c['values']}")
    print(summarize(reports).to_string(index=False))
    return exit_code(reports, checks)


def cmd_gen_data(args):
    model_config, _ = _configs(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = generate_samples(args.count, args.seed, args.split, size=model_config.image_size,
                               num_classes=model_config.num_classes, channels=model_config.in_channels)
    for i, sample in enumerate(samples):
        write_sample(sample, out / f"sample_{i:05d}{SAMPLE_SUFFIX}")
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_report(args):
    model_config, _ = _configs(args.config)
    params = parameter_report(model_config)
    print(f"PPTFormer parameters: {params['pptformer']}")
    print(f"Plain-blocks baseline parameters: {params['baseline']}")
    print(f"Overhead: {100 * params['overhead']:.2f}%")
    if Path(args.dir).is_dir():
        reports = load_reports(args.dir)
        if reports:
            print(summarize(reports).to_string(index=False))
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gen-data": cmd_gen_data,
    "report": cmd_report,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    print("Starting a new run with the following parameters:")
    print(args)
    return COMMANDS[args.command](args)
