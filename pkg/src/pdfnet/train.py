"""Training loop, checkpointing and inference helpers."""

from __future__ import annotations

import io
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import RunConfig
from .data import TripletDataset, collate_triplets, list_samples
from .errors import ConfigError, EmptyInput, IoError, NotFound, NumericsError, VersionError
from .losses import total_loss
from .metrics import mae
from .network import PDFNet

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    batch_in_epoch: int = 0  # batches of the current epoch already consumed
    best_metric: float = math.inf  # validation MAE, lower is better
    best_step: int = -1


def set_determinism(cfg: RunConfig) -> None:
    torch.manual_seed(cfg.seed)
    torch.use_deterministic_algorithms(cfg.deterministic)


def build_model(cfg: RunConfig) -> PDFNet:
    torch.manual_seed(cfg.seed)
    model = PDFNet(cfg.model_config())
    if not cfg.trains_depth:
        for p in model.depth_decoder_parameters():
            p.requires_grad_(False)
    return model


def build_optimizer(model: PDFNet, cfg: RunConfig) -> torch.optim.AdamW:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2),
                             weight_decay=cfg.weight_decay)


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(path, model, optimizer, state: TrainState, cfg: RunConfig) -> Path:
    """Serialize in memory then replace ``path`` atomically; bytes depend only on content."""
    payload = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(include_location=False),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "state": asdict(state),
        "torch_rng": torch.get_rng_state(),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(buf.getvalue())
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"checkpoint not found: {path}")
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # corrupt or foreign file
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    version = ckpt.get("format_version") if isinstance(ckpt, dict) else None
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint format {version!r}")
    return ckpt


def model_from_checkpoint(path, cfg: RunConfig | None = None) -> tuple[PDFNet, RunConfig]:
    ckpt = load_checkpoint(path)
    saved = RunConfig.from_mapping(ckpt["config"])
    if cfg is not None:
        saved.out_dir, saved.resume = cfg.out_dir, cfg.resume
    model = PDFNet(saved.model_config())
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model, saved


# --------------------------------------------------------------------------- training


class LossDiverged(NumericsError):
    pass


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def _batches(order: np.ndarray, batch_size: int):
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


@torch.no_grad()
def predict_dataset(model: PDFNet, dataset: TripletDataset, g: int | None = None):
    """Yield (sample_id, prediction HxW, mask HxW, refined depth HxW) in dataset order."""
    model.eval()
    for i in range(len(dataset)):
        t = dataset[i]
        out = model(t.image, t.depth, g)
        yield (t.sample_id, out.final_prediction[0, 0].double().numpy(), t.mask[0, 0].double().numpy(),
               out.final_depth[0, 0].double().numpy())


def validation_mae(model: PDFNet, dataset: TripletDataset) -> float:
    was_training = model.training
    vals = [mae(p, m > 0.5) for _, p, m, _ in predict_dataset(model, dataset)]
    model.train(was_training)
    return float(np.mean(vals))


class Trainer:
    def __init__(self, cfg: RunConfig):
        if not cfg.data_root:
            raise ConfigError("data_root is required for training")
        self.cfg = cfg
        set_determinism(cfg)
        self.out = Path(cfg.out_dir)
        self.dataset = TripletDataset(cfg.data_root, tuple(cfg.resolution), cfg.patch_grid, cfg.augment, cfg.seed)
        if len(self.dataset) == 0:
            raise EmptyInput(f"no samples in {cfg.data_root}")
        self.val = None
        if cfg.val_root:
            self.val = TripletDataset(cfg.val_root, tuple(cfg.resolution), cfg.patch_grid, False, cfg.seed)
            if len(self.val) == 0:
                raise EmptyInput(f"no samples in {cfg.val_root}")
        self.model = build_model(cfg)
        self.optimizer = build_optimizer(self.model, cfg)
        self.loss_cfg = cfg.loss_config()
        self.state = TrainState()
        if cfg.resume:
            self._resume(cfg.resume)

    def _resume(self, path) -> None:
        ckpt = load_checkpoint(path)
        self.model.load_state_dict(ckpt["model"])
        if ckpt["optimizer"] is not None:
            self.optimizer.load_state_dict(ckpt["optimizer"])
        self.state = TrainState(**ckpt["state"])
        torch.set_rng_state(ckpt["torch_rng"])

    def checkpoint(self, name: str) -> Path:
        return save_checkpoint(self.out / name, self.model, self.optimizer, self.state, self.cfg)

    def _log(self, fh, record: dict) -> None:
        fh.write(json.dumps(record) + "\n")
        fh.flush()

    def _train_step(self, batch_ids) -> dict:
        cfg = self.cfg
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        record: dict = {}
        micro = np.array_split(np.asarray(batch_ids), min(cfg.grad_accum, len(batch_ids)))
        for ids in micro:
            t = collate_triplets([self.dataset[int(i)] for i in ids])
            out = self.model(t.image, t.depth)
            report = total_loss(out, t.mask, t.supervision_depth, self.loss_cfg)
            if not torch.isfinite(report.total):
                raise LossDiverged(f"non-finite loss at step {self.state.step + 1}")
            share = len(ids) / len(batch_ids)
            (report.total * share).backward()
            for k, v in report.as_dict().items():
                record[k] = record.get(k, 0.0) + share * v
        self.optimizer.step()
        return record

    def run(self) -> TrainState:
        cfg, st = self.cfg, self.state
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.txt").write_text(cfg.dumps())
        log_path = self.out / "train_log.jsonl"
        n = len(self.dataset)
        done = False
        with open(log_path, "a") as fh:
            while st.epoch < cfg.epochs and not done:
                self.dataset.set_epoch(st.epoch)
                batches = _batches(epoch_order(n, cfg.seed, st.epoch), cfg.batch_size)
                while st.batch_in_epoch < len(batches):
                    t0 = time.perf_counter()
                    try:
                        record = self._train_step(batches[st.batch_in_epoch])
                    except LossDiverged:
                        # parameters were not updated by the failed step, so this is the last good state
                        self._log(fh, {"step": st.step + 1, "event": "diverged"})
                        self.checkpoint("last.pt")
                        raise
                    st.step += 1
                    st.batch_in_epoch += 1
                    if st.step % cfg.log_every == 0:
                        self._log(fh, {"step": st.step, "epoch": st.epoch, "lr": cfg.learning_rate,
                                       "time": time.perf_counter() - t0, **record})
                    if cfg.checkpoint_every and st.step % cfg.checkpoint_every == 0:
                        self.checkpoint(f"step_{st.step:06d}.pt")
                    if cfg.max_steps and st.step >= cfg.max_steps:
                        done = True
                        break
                if st.batch_in_epoch >= len(batches):
                    st.epoch += 1
                    st.batch_in_epoch = 0
                    self._end_of_epoch(fh)
            self.checkpoint("last.pt")
        return st

    def _end_of_epoch(self, fh) -> None:
        st = self.state
        self.checkpoint("last.pt")
        if self.cfg.keep_epoch_checkpoints:
            self.checkpoint(f"epoch_{st.epoch:03d}.pt")
        if self.val is None:
            return
        score = validation_mae(self.model, self.val)
        self._log(fh, {"step": st.step, "epoch": st.epoch, "val_mae": score})
        if score < st.best_metric:
            st.best_metric, st.best_step = score, st.step
            self.checkpoint("best.pt")


def train(cfg: RunConfig) -> Trainer:
    trainer = Trainer(cfg)
    trainer.run()
    return trainer


def read_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# --------------------------------------------------------------------------- inference


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(x * 255), 0, 255).astype(np.uint8)


def to_uint16(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(x * 65535), 0, 65535).astype(np.uint16)


def resize_map(x: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if x.shape == tuple(size):
        return x
    t = torch.from_numpy(np.ascontiguousarray(x))[None, None]
    return F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0, 0].clamp(0, 1).numpy()


def list_or_raise(root) -> list[str]:
    ids = list_samples(root)
    if not ids:
        raise EmptyInput(f"no samples in {root}")
    return ids
