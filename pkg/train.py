import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import pandas as pd
import torch
import torch.optim as optim
from torch.utils.data import DataLoader
from tqdm import tqdm

from autodiff import elementwise
from lora import LoraConfig, LoraModel
from metrics import report_from_maps
from utils import DivergenceError, ShapeMismatchError, dataset_dims

log_to_stdout = logging.info

METHODS = ["scratch", "fft", "lora"]
HISTORY_COLUMNS = ["epoch", "lr", "train_l1", "val_mae", "val_rmse", "val_ssim", "seconds"]
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    base_lr: float = 8e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-4
    warmup_epochs: int = 5
    warmup_factor: float = 1e-5
    milestones: list = field(default_factory=lambda: [90, 100])
    gamma: float = 0.1
    total_epochs: int = 120
    batch_size: int = 128
    seed: int = 0
    method: str = "scratch"
    lora: LoraConfig = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.milestones = [int(m) for m in self.milestones]
        if self.method not in METHODS:
            raise ValueError(f"Unknown training method '{self.method}', expected one of {METHODS}")
        if any(m2 <= m1 for m1, m2 in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {self.milestones}")
        if self.milestones and self.milestones[0] < self.warmup_epochs:
            raise ValueError(f"milestones {self.milestones} must not start before the end of warmup "
                             f"({self.warmup_epochs} epochs)")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.total_epochs < 1 or self.batch_size < 1:
            raise ValueError(f"invalid schedule: {self.total_epochs} epochs of batch size {self.batch_size}")
        if isinstance(self.lora, dict):
            self.lora = LoraConfig.from_dict(self.lora)
        if self.method == "lora" and self.lora is None:
            self.lora = LoraConfig()

    @staticmethod
    def desk_scale(**overrides):
        """ Schedule of the tiny preset: same shape as the full one, compressed to 20 epochs. """
        params = dict(total_epochs=20, batch_size=8, milestones=[15, 18])
        params.update(overrides)
        return TrainConfig(**params)

    def to_dict(self):
        return {
            "base_lr": self.base_lr,
            "betas": list(self.betas),
            "weight_decay": self.weight_decay,
            "warmup_epochs": self.warmup_epochs,
            "warmup_factor": self.warmup_factor,
            "milestones": list(self.milestones),
            "gamma": self.gamma,
            "total_epochs": self.total_epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "method": self.method,
            "lora": self.lora.to_dict() if self.lora is not None else None
        }

    @staticmethod
    def from_dict(d):
        return TrainConfig(**d)


def lr_at(epoch, config):
    """ Per-epoch warmup from warmup_factor * base_lr to base_lr, then a drop by `gamma` at every milestone. """
    if not 0 <= epoch < config.total_epochs:
        raise ValueError(f"epoch {epoch} outside of [0, {config.total_epochs})")

    if epoch < config.warmup_epochs:
        return config.base_lr * (config.warmup_factor + (1.0 - config.warmup_factor) * epoch / config.warmup_epochs)

    lr = config.base_lr
    for milestone in config.milestones:
        if epoch >= milestone:
            lr *= config.gamma
    return lr


def l1_loss(pred, target):
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"L1 loss got prediction {list(pred.shape)} and target {list(target.shape)}")
    return torch.mean(elementwise("abs", elementwise("sub", pred, target)))


def make_optimizer(model, config):
    """ AdamW over the trainable parameters only; parameter names are kept in the param group for error reporting. """
    named_params = [(name, param) for name, param in model.named_parameters() if param.requires_grad]
    return optim.AdamW([{"params": [param for _, param in named_params],
                         "names": [name for name, _ in named_params]}],
                       lr=config.base_lr, betas=config.betas, eps=ADAM_EPS, weight_decay=config.weight_decay)


def adamw_step(optimizer, lr):
    """ One decoupled-weight-decay Adam update at learning rate `lr`. Every trainable parameter needs a gradient. """
    for group in optimizer.param_groups:
        group["lr"] = lr
        for name, param in zip(group.get("names", [None] * len(group["params"])), group["params"]):
            if param.requires_grad and param.grad is None:
                raise ValueError(f"missing gradient for trainable parameter '{name}'")
    optimizer.step()


class TrainHistory:
    def __init__(self, rows=None):
        self.rows = list(rows) if rows is not None else []

    def append(self, **row):
        if self.rows and row["epoch"] != self.rows[-1]["epoch"] + 1:
            raise ValueError(f"epoch {row['epoch']} does not follow epoch {self.rows[-1]['epoch']}")
        self.rows.append({col: row.get(col, float("nan")) for col in HISTORY_COLUMNS})

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, idx):
        return self.rows[idx]

    def column(self, name):
        return [row[name] for row in self.rows]

    def to_dataframe(self):
        return pd.DataFrame(self.rows, columns=HISTORY_COLUMNS)

    def to_csv(self, path):
        self.to_dataframe().to_csv(path, index=False)

    @staticmethod
    def from_csv(path):
        return TrainHistory(pd.read_csv(path).to_dict(orient="records"))


def _check_method(model, method):
    if method == "lora" and not isinstance(model, LoraModel):
        raise ValueError("method 'lora' needs a model with an attached LoRA adapter")
    if method != "lora" and isinstance(model, LoraModel):
        raise ValueError(f"method '{method}' trains a plain model, got one with a LoRA adapter")


def _check_dims(model, dataset):
    num_sources, num_time, num_receivers, size = dataset_dims(dataset)
    cfg = model.model_config
    if (num_sources, num_time, num_receivers, size) != (cfg.in_channels, cfg.in_time, cfg.in_receivers, cfg.out_size):
        raise ShapeMismatchError(f"dataset dims (S, T, R, V) = {(num_sources, num_time, num_receivers, size)} do not "
                                 f"match the model ({cfg.in_channels}, {cfg.in_time}, {cfg.in_receivers}, "
                                 f"{cfg.out_size})")


def batch_indices(order, batch_size):
    """ Splits `order` into batches. A trailing single example is folded into the previous batch: train-mode batch
        normalization at the 1x1 bottleneck needs at least 2 examples. """
    batches = [order[i: i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        last = batches.pop()
        batches[-1] = batches[-1] + last
    return batches


class InversionController:
    def __init__(self, model, train_config, model_dir=None, show_progress=False):
        """ Trains an InversionNet (method scratch/fft) or a LoraModel (method lora) with L1 loss, AdamW and the
            warmup multi-step schedule. If `model_dir` is given, the configuration is dumped there as `config.json`
            and the training state is written after every epoch. """
        _check_method(model, train_config.method)
        self.model = model
        self.train_config = train_config
        self.model_dir = model_dir
        self.show_progress = show_progress
        self.optimizer = make_optimizer(model, train_config)
        self.num_steps = 0
        self.history = TrainHistory()

        log_to_stdout(f"Configuration: \n{json.dumps(self.config, indent=4)}")
        if self.model_dir is not None:
            os.makedirs(self.model_dir, exist_ok=True)
            config_path = os.path.join(self.model_dir, "config.json")
            if not os.path.exists(config_path):
                with open(config_path, "w") as f_config:
                    logging.info(f"Saving training config file to '{config_path}'")
                    json.dump(self.config, fp=f_config, indent=4)

    @property
    def config(self):
        return {
            "model": self.model.config,
            "train": self.train_config.to_dict(),
            "trainable_params": sum(p.numel() for p in self.model.parameters() if p.requires_grad)
        }

    @property
    def state_path(self):
        return os.path.join(self.model_dir, "train_state.th") if self.model_dir is not None else None

    def save_train_state(self, next_epoch):
        torch.save({
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "next_epoch": next_epoch,
            "num_steps": self.num_steps,
            "history": self.history.rows
        }, self.state_path)

    def load_train_state(self):
        """ Restores the state saved after the last completed epoch; returns the epoch to continue from. """
        state = torch.load(self.state_path)
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.num_steps = state["num_steps"]
        self.history = TrainHistory(state["history"])
        return state["next_epoch"]

    def epoch_order(self, num_examples, idx_epoch):
        # Seeded per epoch so that a resumed run shuffles exactly like an uninterrupted one
        generator = torch.Generator().manual_seed(self.train_config.seed * 100_003 + idx_epoch)
        return torch.randperm(num_examples, generator=generator).tolist()

    def train_epoch(self, train_dataset, idx_epoch):
        self.model.train()
        lr = lr_at(idx_epoch, self.train_config)
        batches = batch_indices(self.epoch_order(len(train_dataset), idx_epoch), self.train_config.batch_size)
        train_loss = 0.0

        loader = DataLoader(train_dataset, batch_sampler=batches)
        for idx_batch, curr_batch in enumerate(tqdm(loader, disable=not self.show_progress)):
            pred = self.model(curr_batch["seismic"])
            curr_loss = l1_loss(pred, curr_batch["velocity"])
            if not torch.isfinite(curr_loss):
                raise DivergenceError(f"non-finite loss ({float(curr_loss)}) at epoch {idx_epoch}, batch {idx_batch}")
            train_loss += float(curr_loss)

            curr_loss.backward()
            adamw_step(self.optimizer, lr)
            self.optimizer.zero_grad()
            self.num_steps += 1

        return train_loss / len(batches)

    def evaluate(self, dataset):
        return evaluate(self.model, dataset, batch_size=2 * self.train_config.batch_size)

    def fit(self, train_dataset, val_dataset=None, resume=False, stop_after_epoch=None):
        """ Trains from the current epoch (0, or the one after the last saved state if `resume`) up to
            `total_epochs`, or up to and including `stop_after_epoch`. Returns the TrainHistory. """
        _check_dims(self.model, train_dataset)
        start_epoch = 0
        if resume:
            if self.state_path is None or not os.path.exists(self.state_path):
                raise FileNotFoundError(f"no training state to resume from in '{self.model_dir}'")
            start_epoch = self.load_train_state()
            log_to_stdout(f"Resuming from epoch {start_epoch}")

        num_epochs = self.train_config.total_epochs
        last_epoch = num_epochs - 1 if stop_after_epoch is None else min(stop_after_epoch, num_epochs - 1)
        t_start = time.time()
        for idx_epoch in range(start_epoch, last_epoch + 1):
            log_to_stdout(f"Epoch#{1 + idx_epoch}/{num_epochs}")
            t_epoch = time.time()
            train_l1 = self.train_epoch(train_dataset, idx_epoch)
            val_report = self.evaluate(val_dataset) if val_dataset is not None else None

            self.history.append(epoch=idx_epoch, lr=lr_at(idx_epoch, self.train_config), train_l1=train_l1,
                                val_mae=val_report.mae if val_report else math.nan,
                                val_rmse=val_report.rmse if val_report else math.nan,
                                val_ssim=val_report.ssim if val_report else math.nan,
                                seconds=time.time() - t_epoch)
            log_to_stdout(f"lr={self.history[-1]['lr']:.3e}, training L1: {train_l1: .4f}" +
                          (f", validation MAE/RMSE/SSIM: {val_report.mae:.4f}/{val_report.rmse:.4f}/"
                           f"{val_report.ssim:.4f}" if val_report else ""))
            if self.model_dir is not None:
                self.save_train_state(next_epoch=idx_epoch + 1)

        log_to_stdout(f"Training took {time.time() - t_start: .3f}s")
        return self.history


def train(model, train_dataset, val_dataset, config, model_dir=None):
    """ Returns (trained model, TrainHistory). """
    controller = InversionController(model, config, model_dir=model_dir)
    history = controller.fit(train_dataset, val_dataset)
    return controller.model, history


@torch.no_grad()
def predict(model, dataset, batch_size=64):
    """ Eval-mode predictions and targets of a whole dataset, both [N, 1, V, V]. """
    model.eval()
    preds, targets = [], []
    for curr_batch in DataLoader(dataset, batch_size=batch_size, shuffle=False):
        preds.append(model(curr_batch["seismic"]))
        targets.append(curr_batch["velocity"])
    return torch.cat(preds), torch.cat(targets)


def evaluate(model, test_dataset, batch_size=64):
    if len(test_dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    _check_dims(model, test_dataset)
    preds, targets = predict(model, test_dataset, batch_size=batch_size)
    return report_from_maps(preds, targets)
