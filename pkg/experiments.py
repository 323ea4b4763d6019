""" Command-line entry point of the experimental protocols: dataset generation, pretraining, full/LoRA fine-tuning,
    rank/alpha sweeps, OOD evaluation, low-data grids and report rendering.

    Usage: python experiments.py <command> [--config file] [flags], see `python experiments.py <command> --help`. """
import argparse
import contextlib
import logging
import os
import sys
import time

import numpy as np
import pandas as pd
import torch
from torch.utils.data import ConcatDataset, Subset

from dataset import DatasetSpec, PRESET_DIMS, synthesize_dataset, load_dataset, split, subsample, \
    denormalize_velocity
from inversionnet import ModelConfig, build_model, param_count
from lora import LoraConfig, attach, merge, save_adapter, load_adapter
from metrics import spatial_information
from report import IMPROVEMENT_COLUMNS, REPORT_METHODS, make_row, write_report, render_report, plot_velocity_maps
from serialization import save_checkpoint, load_checkpoint
from train import TrainConfig, InversionController, evaluate, predict
from utils import FAMILIES, DIFFICULTIES, DATA_FRACTIONS, ShapeMismatchError, read_config_file

log_to_stdout = logging.info

DEFAULT_SWEEP_RANKS = "4,8,16,32,64,128"
DEFAULT_SWEEP_ALPHAS = "16"
FINETUNE_METHODS = ["fft", "lora", "baseline"]
BOOLEAN_FLAGS = {"ood", "resume"}
REQUIRED = {
    "gen-data": ["family", "difficulty", "n", "out"],
    "pretrain": ["datasets", "out"],
    "finetune": ["pfm", "dataset", "out"],
    "eval": ["model", "datasets", "out"],
    "sweep": ["pfm", "dataset", "out"],
    "lowdata": ["pfm", "dataset", "out"],
    "report": ["input", "plots"],
    "merge": ["model", "adapter", "out"],
    "spatial-info": ["datasets"]
}
# TrainConfig fields that can be overridden from the command line
SCHEDULE_FLAGS = {
    "epochs": "total_epochs",
    "batch_size": "batch_size",
    "lr": "base_lr",
    "milestones": "milestones",
    "warmup_epochs": "warmup_epochs",
    "warmup_factor": "warmup_factor",
    "gamma": "gamma",
    "weight_decay": "weight_decay"
}


def comma_list(value):
    items = [item.strip() for item in str(value).split(",") if item.strip()]
    if len(items) == 0:
        raise argparse.ArgumentTypeError("expected a non-empty comma-separated list")
    return items


def int_list(value):
    return [int(item) for item in comma_list(value)]


def float_list(value):
    return [float(item) for item in comma_list(value)]


def _parse_bool(value):
    lowered = str(value).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"'{value}' is not a boolean")


def _flag_name(dest):
    return "--in" if dest == "input" else f"--{dest}"


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None,
                        help="key=value file whose values become defaults of this command; explicit flags win")

    schedule = argparse.ArgumentParser(add_help=False)
    schedule.add_argument("--preset", type=str, choices=list(PRESET_DIMS.keys()), default="tiny")
    schedule.add_argument("--epochs", type=int, default=None,
                          help="defaults to 20 for the tiny preset and 120 for the full one")
    schedule.add_argument("--batch_size", type=int, default=None)
    schedule.add_argument("--lr", type=float, default=None)
    schedule.add_argument("--milestones", type=int_list, default=None)
    schedule.add_argument("--warmup_epochs", type=int, default=None)
    schedule.add_argument("--warmup_factor", type=float, default=None)
    schedule.add_argument("--gamma", type=float, default=None)
    schedule.add_argument("--weight_decay", type=float, default=None)
    schedule.add_argument("--seed", type=int, default=0)

    lora_flags = argparse.ArgumentParser(add_help=False)
    lora_flags.add_argument("--rank", type=int, default=None)
    lora_flags.add_argument("--alpha", type=float, default=None)
    lora_flags.add_argument("--scaling_mode", type=str, choices=["alpha_over_r", "alpha"], default=None)

    parser = argparse.ArgumentParser(description="Desk-scale full-waveform inversion experiments")
    subparsers = parser.add_subparsers(dest="command", required=True)
    parser.commands = {}

    sub = subparsers.add_parser("gen-data", parents=[common], help="synthesize a dataset file")
    sub.add_argument("--family", type=str, choices=FAMILIES)
    sub.add_argument("--difficulty", type=str, choices=DIFFICULTIES)
    sub.add_argument("--n", type=int)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--preset", type=str, choices=list(PRESET_DIMS.keys()), default="tiny")
    sub.add_argument("--out", type=str)
    parser.commands["gen-data"] = sub

    sub = subparsers.add_parser("pretrain", parents=[common, schedule],
                                help="train a foundational model on a mixture of datasets")
    sub.add_argument("--datasets", type=comma_list)
    sub.add_argument("--out", type=str, help="output directory")
    sub.add_argument("--resume", action="store_true")
    sub.add_argument("--stop_after_epoch", type=int, default=None)
    parser.commands["pretrain"] = sub

    sub = subparsers.add_parser("finetune", parents=[common, schedule, lora_flags],
                                help="adapt a pretrained model to one dataset")
    sub.add_argument("--pfm", type=str, help="pretrained checkpoint, or 'none' to train a baseline from scratch")
    sub.add_argument("--dataset", type=str)
    sub.add_argument("--method", type=str, choices=["fft", "lora"], default="lora")
    sub.add_argument("--fraction", type=int, choices=DATA_FRACTIONS, default=100)
    sub.add_argument("--out", type=str, help="output directory")
    sub.add_argument("--report", type=str, default=None, help="report CSV, defaults to <out>/report.csv")
    parser.commands["finetune"] = sub

    sub = subparsers.add_parser("eval", parents=[common], help="evaluate a model on several datasets")
    sub.add_argument("--model", type=str)
    sub.add_argument("--adapter", type=str, default=None)
    sub.add_argument("--datasets", type=comma_list)
    sub.add_argument("--ood", action="store_true",
                     help="tag rows ID/OOD using the training datasets stored with the model")
    sub.add_argument("--split", type=str, choices=["test", "all"], default="test")
    sub.add_argument("--out", type=str, help="report CSV")
    sub.add_argument("--plots", type=str, default=None, help="directory for prediction figures")
    parser.commands["eval"] = sub

    sub = subparsers.add_parser("sweep", parents=[common, schedule], help="LoRA rank/alpha grid")
    sub.add_argument("--pfm", type=str)
    sub.add_argument("--dataset", type=str)
    sub.add_argument("--ranks", type=int_list, default=DEFAULT_SWEEP_RANKS)
    sub.add_argument("--alphas", type=float_list, default=DEFAULT_SWEEP_ALPHAS)
    sub.add_argument("--scaling_mode", type=str, choices=["alpha_over_r", "alpha"], default="alpha_over_r")
    sub.add_argument("--fraction", type=int, choices=DATA_FRACTIONS, default=100)
    sub.add_argument("--out", type=str, help="report CSV")
    parser.commands["sweep"] = sub

    sub = subparsers.add_parser("lowdata", parents=[common, schedule, lora_flags],
                                help="fine-tuning on nested fractions of the training split")
    sub.add_argument("--pfm", type=str)
    sub.add_argument("--dataset", type=str)
    sub.add_argument("--fractions", type=int_list, default=",".join(map(str, DATA_FRACTIONS)))
    sub.add_argument("--methods", type=comma_list, default="fft,lora")
    sub.add_argument("--ood_datasets", type=comma_list, default=None)
    sub.add_argument("--out", type=str, help="report CSV")
    parser.commands["lowdata"] = sub

    sub = subparsers.add_parser("report", parents=[common], help="render plots and a summary of a report CSV")
    sub.add_argument("--in", dest="input", type=str)
    sub.add_argument("--plots", type=str)
    parser.commands["report"] = sub

    sub = subparsers.add_parser("merge", parents=[common], help="fold an adapter into its base checkpoint")
    sub.add_argument("--model", type=str)
    sub.add_argument("--adapter", type=str)
    sub.add_argument("--out", type=str)
    parser.commands["merge"] = sub

    sub = subparsers.add_parser("spatial-info", parents=[common], help="mean Sobel spatial information per dataset")
    sub.add_argument("--datasets", type=comma_list)
    sub.add_argument("--out", type=str, default=None)
    parser.commands["spatial-info"] = sub

    return parser


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = parser.commands[args.command]

    if args.config is not None:
        try:
            file_values = read_config_file(args.config)
        except (OSError, ValueError) as err:
            sub.error(str(err))
        known = vars(sub.parse_known_args([])[0])
        unknown = sorted(key for key in file_values if key not in known or key == "config")
        if unknown:
            sub.error(f"{args.config}: unknown option(s) {', '.join(unknown)}")
        for key in BOOLEAN_FLAGS & set(file_values):
            try:
                file_values[key] = _parse_bool(file_values[key])
            except ValueError as err:
                sub.error(f"{args.config}: {key}: {err}")
        sub.set_defaults(**file_values)
        args = parser.parse_args(argv)

    missing = [_flag_name(dest) for dest in REQUIRED[args.command] if getattr(args, dest) is None]
    if missing:
        sub.error(f"the following arguments are required: {', '.join(missing)}")

    if args.command == "finetune":
        lora_given = [flag for flag in ("rank", "alpha", "scaling_mode") if getattr(args, flag) is not None]
        if args.method != "lora" and lora_given:
            sub.error(f"{', '.join('--' + flag for flag in lora_given)} only apply to --method lora")
        if args.method == "lora" and args.pfm == "none":
            sub.error("LoRA fine-tuning needs a pretrained model, got --pfm none")
    if args.command == "lowdata":
        unknown_methods = [m for m in args.methods if m not in FINETUNE_METHODS]
        if unknown_methods:
            sub.error(f"unknown method(s) {unknown_methods}, expected some of {FINETUNE_METHODS}")
        unknown_fractions = [f for f in args.fractions if f not in DATA_FRACTIONS]
        if unknown_fractions:
            sub.error(f"unsupported fraction(s) {unknown_fractions}, expected some of {DATA_FRACTIONS}")

    return args


@contextlib.contextmanager
def log_to_file(out_dir, file_name):
    """ Copies root log records into `out_dir/file_name` for the duration of the block. """
    handler = logging.FileHandler(os.path.join(out_dir, file_name))
    logger = logging.getLogger()
    logger.addHandler(handler)
    try:
        yield
    finally:
        logger.removeHandler(handler)
        handler.close()


def _ensure_parent_dir(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    return parent


def make_train_config(args, method, lora_config=None):
    """ Preset schedule (reference schedule for the full preset, compressed one for the tiny preset) with the schedule
        flags that were given applied on top. """
    base = TrainConfig() if args.preset == "full" else TrainConfig.desk_scale()
    params = base.to_dict()
    for flag, field_name in SCHEDULE_FLAGS.items():
        if getattr(args, flag, None) is not None:
            params[field_name] = getattr(args, flag)
    params.update(seed=args.seed, method=method, lora=lora_config.to_dict() if lora_config is not None else None)
    return TrainConfig.from_dict(params)


def lora_config_from_args(args, rank=None, alpha=None):
    defaults = LoraConfig()
    rank = rank if rank is not None else args.rank
    alpha = alpha if alpha is not None else args.alpha
    return LoraConfig(rank=rank if rank is not None else defaults.rank,
                      alpha=alpha if alpha is not None else defaults.alpha,
                      scaling_mode=args.scaling_mode if args.scaling_mode is not None else defaults.scaling_mode)


def load_datasets(paths):
    datasets = [load_dataset(path) for path in paths]
    dims = {path: ds.dims for path, ds in zip(paths, datasets)}
    if len(set(dims.values())) > 1:
        raise ShapeMismatchError(f"datasets have different (S, T, R, V) dims: {dims}")
    return datasets


def mean_spatial_information(dataset):
    """ Mean spatial information of the velocity maps of `dataset`, in m/s. """
    stats = dataset.stats
    v_range = {} if stats is None else {"v_min": stats.v_min, "v_max": stats.v_max}
    return float(np.mean([spatial_information(denormalize_velocity(vel.numpy(), **v_range))
                          for vel in dataset.velocity]))


def run_finetune(args, dataset, method, fraction, lora_config=None, model_dir=None, test_datasets=()):
    """ Fine-tunes on `fraction` percent of the training split of `dataset` and evaluates on its test split (ID) and
        on the test splits of `test_datasets` (OOD, unless one of them is `dataset` itself).

        `method` is "fft" or "lora" (starting from the checkpoint `args.pfm`) or "baseline" (random initialization).
        Returns (trained model, report rows). """
    train_split, test_split = split(dataset)
    train_subset = subsample(train_split, fraction, seed=args.seed)
    model_config = ModelConfig.from_preset(args.preset)

    if method == "baseline":
        model = build_model(model_config, seed=args.seed)
        train_method = "scratch"
    else:
        model = load_checkpoint(args.pfm, expected_config=model_config)
        train_method = method
        if method == "lora":
            model = attach(model, lora_config, seed=args.seed)
    train_config = make_train_config(args, train_method, lora_config if method == "lora" else None)

    log_to_stdout(f"Fine-tuning ({method}) on {len(train_subset)} samples of '{dataset.name}' ({fraction}%)")
    t_start = time.time()
    controller = InversionController(model, train_config, model_dir=model_dir)
    history = controller.fit(train_subset, test_split)

    rank = lora_config.rank if method == "lora" else None
    alpha = lora_config.alpha if method == "lora" else None
    trainable_params = param_count(model, trainable_only=True)
    metadata = {
        "train_datasets": [dataset.name],
        "method": method,
        "data_fraction": fraction,
        "train_samples": len(train_subset),
        "trainable_params": trainable_params,
        "rank": rank,
        "alpha": alpha,
        "seed": args.seed,
        "pfm": None if method == "baseline" else args.pfm
    }
    if method == "lora":
        model.adapter.metadata = metadata
    else:
        model.metadata = metadata
    if model_dir is not None:
        history.to_csv(os.path.join(model_dir, "history.csv"))
        if method == "lora":
            save_adapter(model, os.path.join(model_dir, "adapter.fwla"))
        else:
            save_checkpoint(model, os.path.join(model_dir, "model.fwck"))

    run_config = {"model": model.config, "train": train_config.to_dict(), "dataset": dataset.name,
                  "fraction": fraction, "pfm": metadata["pfm"]}
    rows = []
    eval_sets = [(dataset.name, test_split, "ID")]
    eval_sets += [(other.name, split(other)[1], "ID" if other.name == dataset.name else "OOD")
                  for other in test_datasets if other is not dataset]
    for test_name, test_set, distribution in eval_sets:
        metrics = evaluate(model, test_set)
        rows.append(make_row(train_dataset=dataset.name, test_dataset=test_name, distribution=distribution,
                             method=method, data_fraction=fraction, train_samples=len(train_subset), rank=rank,
                             alpha=alpha, trainable_params=trainable_params, metrics=metrics,
                             wall_seconds=time.time() - t_start, seed=args.seed, config=run_config))
        log_to_stdout(f"[{method}, {fraction}%] {test_name} ({distribution}): MAE={metrics.mae:.4f}, "
                      f"RMSE={metrics.rmse:.4f}, SSIM={metrics.ssim:.4f}")

    return model, rows


def add_improvements(rows):
    """ Relative improvement of each LoRA row over the FFT row with the same (data fraction, test dataset): lower is
        better for MAE and RMSE, higher for SSIM. Other rows get NaN. """
    fft_rows = {(row["data_fraction"], row["test_dataset"]): row for row in rows if row["method"] == "fft"}
    for row in rows:
        reference = fft_rows.get((row["data_fraction"], row["test_dataset"]))
        if row["method"] != "lora" or reference is None:
            row.update({col: float("nan") for col in IMPROVEMENT_COLUMNS})
            continue
        row["mae_improvement"] = (reference["mae"] - row["mae"]) / reference["mae"]
        row["rmse_improvement"] = (reference["rmse"] - row["rmse"]) / reference["rmse"]
        row["ssim_improvement"] = (row["ssim"] - reference["ssim"]) / reference["ssim"]
    return rows


def cmd_gen_data(args):
    _ensure_parent_dir(args.out)
    spec = DatasetSpec.for_preset(args.family, args.difficulty, n_samples=args.n, seed=args.seed,
                                  preset=args.preset)
    dataset = synthesize_dataset(spec, path=args.out)
    log_to_stdout(f"'{args.out}': {len(dataset)} samples of dims {dataset.dims}, mean spatial information "
                  f"{mean_spatial_information(dataset):.2f} m/s")


def cmd_pretrain(args):
    datasets = load_datasets(args.datasets)
    if len(datasets) < 2:
        logging.warning(f"Pretraining on a single dataset ('{datasets[0].name}'), a mixture of families is expected")

    splits = [split(ds) for ds in datasets]
    train_set = ConcatDataset([train_split for train_split, _ in splits])
    val_set = ConcatDataset([test_split for _, test_split in splits])
    os.makedirs(args.out, exist_ok=True)

    with log_to_file(args.out, "train.log"):
        model = build_model(ModelConfig.from_preset(args.preset), seed=args.seed)
        train_config = make_train_config(args, "scratch")
        controller = InversionController(model, train_config, model_dir=args.out, show_progress=True)
        history = controller.fit(train_set, val_set, resume=args.resume, stop_after_epoch=args.stop_after_epoch)
        history.to_csv(os.path.join(args.out, "history.csv"))
        save_checkpoint(model, os.path.join(args.out, "model.fwck"), metadata={
            "train_datasets": [ds.name for ds in datasets],
            "method": "pfm",
            "data_fraction": 100,
            "train_samples": len(train_set),
            "trainable_params": param_count(model, trainable_only=True),
            "seed": args.seed
        })
        log_to_stdout(f"Saved pretrained model to '{os.path.join(args.out, 'model.fwck')}'")


def cmd_finetune(args):
    dataset = load_dataset(args.dataset)
    method = "baseline" if args.pfm == "none" else args.method
    lora_config = lora_config_from_args(args) if method == "lora" else None
    os.makedirs(args.out, exist_ok=True)

    with log_to_file(args.out, "train.log"):
        _, rows = run_finetune(args, dataset, method, args.fraction, lora_config=lora_config, model_dir=args.out)
    report_path = args.report if args.report is not None else os.path.join(args.out, "report.csv")
    _ensure_parent_dir(report_path)
    write_report(rows, report_path)


def cmd_eval(args):
    model = load_checkpoint(args.model)
    if args.adapter is not None:
        model = load_adapter(args.adapter, model)
    metadata = model.metadata
    train_datasets = metadata.get("train_datasets")
    if args.ood and not train_datasets:
        logging.warning(f"'{args.model}' does not record its training datasets, all rows are tagged 'unknown'")

    datasets = load_datasets(args.datasets)
    out_dir = _ensure_parent_dir(args.out)
    if args.plots is not None:
        os.makedirs(args.plots, exist_ok=True)

    run_config = {"model": model.config, "checkpoint": args.model, "adapter": args.adapter, "split": args.split}
    method = metadata.get("method", "pfm")
    rows = []
    with log_to_file(out_dir, "evaluate.log"):
        for dataset in datasets:
            t_start = time.time()
            test_set = split(dataset)[1] if args.split == "test" else dataset
            metrics = evaluate(model, test_set)
            if args.ood and train_datasets:
                distribution = "ID" if dataset.name in train_datasets else "OOD"
            else:
                distribution = "unknown"
            rows.append(make_row(train_dataset="+".join(train_datasets) if train_datasets else "unknown",
                                 test_dataset=dataset.name, distribution=distribution,
                                 method=method if method in REPORT_METHODS else "pfm",
                                 data_fraction=metadata.get("data_fraction", 100),
                                 train_samples=metadata.get("train_samples"), rank=metadata.get("rank"),
                                 alpha=metadata.get("alpha"),
                                 trainable_params=metadata.get("trainable_params",
                                                               param_count(model, trainable_only=True)),
                                 metrics=metrics, wall_seconds=time.time() - t_start, seed=metadata.get("seed"),
                                 config=run_config))
            log_to_stdout(f"{dataset.name} ({distribution}): MAE={metrics.mae:.4f}, RMSE={metrics.rmse:.4f}, "
                          f"SSIM={metrics.ssim:.4f}")

            if args.plots is not None:
                shown = Subset(test_set, list(range(min(4, len(test_set)))))
                preds, targets = predict(model, shown)
                plot_velocity_maps(preds, targets, os.path.join(args.plots, f"{dataset.name}.png"),
                                   title=f"{dataset.name} ({distribution})", stats=dataset.stats)

    write_report(rows, args.out)


def cmd_sweep(args):
    dataset = load_dataset(args.dataset)
    rows = []
    for rank in args.ranks:
        for alpha in args.alphas:
            lora_config = LoraConfig(rank=rank, alpha=alpha, scaling_mode=args.scaling_mode)
            _, cell_rows = run_finetune(args, dataset, "lora", args.fraction, lora_config=lora_config)
            rows.extend(cell_rows)

    rows = sorted(rows, key=lambda row: row["mae"])
    for idx_row, row in enumerate(rows):
        row["best"] = idx_row == 0
    log_to_stdout(f"Best: rank={rows[0]['rank']}, alpha={rows[0]['alpha']:g}, MAE={rows[0]['mae']:.4f}")
    _ensure_parent_dir(args.out)
    write_report(rows, args.out, extra_columns=["best"])


def cmd_lowdata(args):
    dataset = load_dataset(args.dataset)
    ood_datasets = load_datasets(args.ood_datasets) if args.ood_datasets else []
    lora_config = lora_config_from_args(args)

    rows = []
    for fraction in args.fractions:
        for method in args.methods:
            _, cell_rows = run_finetune(args, dataset, method, fraction,
                                        lora_config=lora_config if method == "lora" else None,
                                        test_datasets=ood_datasets)
            rows.extend(cell_rows)

    _ensure_parent_dir(args.out)
    write_report(add_improvements(rows), args.out, extra_columns=IMPROVEMENT_COLUMNS)


def cmd_report(args):
    render_report(args.input, args.plots)


def cmd_merge(args):
    lora_model = load_adapter(args.adapter, load_checkpoint(args.model))
    merged = merge(lora_model)
    _ensure_parent_dir(args.out)
    save_checkpoint(merged, args.out)
    log_to_stdout(f"Merged '{args.adapter}' into '{args.model}', wrote '{args.out}'")


def cmd_spatial_info(args):
    rows = []
    for dataset in load_datasets(args.datasets):
        rows.append({"dataset": dataset.name, "n_samples": len(dataset),
                     "spatial_information": mean_spatial_information(dataset)})
        log_to_stdout(f"{dataset.name}: mean spatial information {rows[-1]['spatial_information']:.2f} m/s")

    df = pd.DataFrame(rows).sort_values("spatial_information", kind="mergesort")
    if args.out is not None:
        _ensure_parent_dir(args.out)
        df.to_csv(args.out, index=False)
    return df


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "lowdata": cmd_lowdata,
    "report": cmd_report,
    "merge": cmd_merge,
    "spatial-info": cmd_spatial_info
}


def main(argv=None):
    """ Runs one command and returns the process exit code: 0 on success, 1 on a domain error (reported as a single
        `error: <ErrorClass>: <message>` line on stderr), 2 on a usage error. """
    logging.basicConfig(level=logging.INFO)
    try:
        args = parse_args(argv)
    except SystemExit as err:
        return err.code if err.code is not None else 0

    torch.manual_seed(args.seed if "seed" in args else 0)
    try:
        COMMANDS[args.command](args)
    except (ValueError, RuntimeError, OSError) as err:
        message = " ".join(str(err).split())
        print(f"error: {type(err).__name__}: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, handlers=[logging.StreamHandler(sys.stdout)])
    sys.exit(main())
