#!/usr/bin/env python3
"""
Trainer - paired augmentation, embedding cache, gradient accumulation,
per-component learning rates with linear warmup/decay, the stop-gradient
window and the combined CE + alpha * BT objective.
"""

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from modules.bt_core import LossWeights, bt_loss_from_raw, combined_loss, default_lambda
from modules.geometry import AlignedPair, filter_pair, prealign
from modules.model import BTSegNet, load_checkpoint, save_checkpoint, stop_gradient_boundary
from modules.pooling import downsample_confidence, mask_from_segmentation, pool_features
from modules.system_monitor import SystemMonitor
from utils.config import fingerprint, to_dict
from utils.errors import ConfigError, DatasetIOError, NumericAbort
from utils.logger import setup_logger

METRICS_LOG = "metrics.jsonl"
LAST_CHECKPOINT = "checkpoint_last.pt"


def lr_schedule(step, base_lr, warmup_steps, total_steps):
    """Linear ramp 0 -> base_lr over the warmup, then linear decay to 0 at total_steps"""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step >= total_steps:
        return 0.0
    if step < warmup_steps:
        return base_lr * (step / warmup_steps)
    return base_lr * ((total_steps - step) / (total_steps - warmup_steps))


def paired_augment(pair, rng, crop_size, flip_prob):
    """One flip decision and one crop window shared by all four arrays"""
    h, w = pair.shape
    ch, cw = crop_size
    if ch > h or cw > w:
        raise ValueError(f"crop {crop_size} larger than the aligned pair {pair.shape}")
    flip = bool(rng.random() < flip_prob)
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    rows, cols = slice(top, top + ch), slice(left, left + cw)

    def take(array):
        out = array[..., rows, cols]
        return np.ascontiguousarray(out[..., ::-1] if flip else out)

    return AlignedPair(take(pair.source), take(pair.target), take(pair.labels), take(pair.confidence))


def pad_pair(pair, size, ignore_index):
    """Pad bottom/right up to ``size``: zero images and confidence, ignore labels"""
    h, w = pair.shape
    th, tw = max(h, size[0]), max(w, size[1])
    if (th, tw) == (h, w):
        return pair
    pad = ((0, th - h), (0, tw - w))
    return AlignedPair(
        source=np.pad(pair.source, ((0, 0),) + pad),
        target=np.pad(pair.target, ((0, 0),) + pad),
        labels=np.pad(pair.labels.astype(np.int64), pad, constant_values=ignore_index),
        confidence=np.pad(pair.confidence, pad),
    )


def resize_pair(pair, size):
    """Bilinear for images and confidence, nearest for labels"""
    if tuple(pair.shape) == tuple(size):
        return pair
    images = torch.from_numpy(np.stack([pair.source, pair.target]))
    images = F.interpolate(images, size=size, mode="bilinear", align_corners=False)
    conf = torch.from_numpy(pair.confidence)[None, None]
    conf = F.interpolate(conf, size=size, mode="bilinear", align_corners=False)
    labels = torch.from_numpy(pair.labels.astype(np.int64))[None, None].double()
    labels = F.interpolate(labels, size=size, mode="nearest").long()
    return AlignedPair(images[0].numpy(), images[1].numpy(), labels[0, 0].numpy(),
                       conf[0, 0].clamp(0, 1).numpy())


def prepare_pairs(dataset, config):
    """Pre-align every sample, drop unsuitable pairs and bring each to crop size.

    Returns (pairs, stats).
    """
    pairs, rejected = [], 0
    for i in range(len(dataset)):
        sample = dataset[i]
        pair, valid = prealign(sample.source_float(), sample.target_float(), sample.source_labels,
                               sample.confidence, sample.warp, config.use_warp, config.use_crop)
        if config.use_warp and not filter_pair(valid, config.min_valid_fraction, config.min_rect_side):
            rejected += 1
            continue
        if config.resize_after_crop and config.use_warp and config.use_crop:
            pair = resize_pair(pair, sample.source_labels.shape)
        pair = pad_pair(pair, config.crop_size, config.ignore_index)
        pairs.append(pair)
    if not pairs:
        raise ConfigError("no training pair survived pre-alignment filtering", key="train.min_valid_fraction")
    return pairs, {"kept": len(pairs), "rejected": rejected}


class EmbeddingCache:
    """Rolling store of detached embeddings, ``capacity`` rows per domain"""

    def __init__(self, capacity):
        if capacity < 2:
            raise ValueError("cache capacity must be >= 2")
        self.capacity = capacity
        self.source = deque(maxlen=capacity)
        self.target = deque(maxlen=capacity)

    def __len__(self):
        return min(len(self.source), len(self.target))

    @property
    def balanced(self):
        return len(self.source) == len(self.target)

    def can_complete(self, live_rows):
        return self.balanced and len(self.source) >= self.capacity - live_rows

    def push(self, z_s, z_t):
        if z_s.shape != z_t.shape:
            raise ValueError("source and target embeddings must come in matching batches")
        for row in z_s.detach():
            self.source.append(row.clone())
        for row in z_t.detach():
            self.target.append(row.clone())

    def stacked(self, live=None):
        """Full effective batch: the newest cached rows followed by the live ones"""
        live_rows = 0 if live is None else live[0].shape[0]
        if live is not None and live[0].shape != live[1].shape:
            raise ValueError("live source and target embeddings differ in shape")
        if live_rows > self.capacity:
            raise ValueError("more live rows than the cache capacity")
        if not self.balanced:
            raise ValueError("cache holds unequal numbers of source and target embeddings")
        need = self.capacity - live_rows
        if len(self.source) < need:
            raise ValueError(f"cache holds {len(self.source)} rows per domain, {need} needed")
        parts_s = [torch.stack(list(self.source)[len(self.source) - need:])] if need else []
        parts_t = [torch.stack(list(self.target)[len(self.target) - need:])] if need else []
        if live is not None:
            parts_s.append(live[0])
            parts_t.append(live[1])
        return torch.cat(parts_s), torch.cat(parts_t)

    def state_dict(self):
        return {
            "capacity": self.capacity,
            "source": [t.clone() for t in self.source],
            "target": [t.clone() for t in self.target],
        }

    def load_state_dict(self, state):
        self.capacity = state["capacity"]
        self.source = deque(state["source"], maxlen=self.capacity)
        self.target = deque(state["target"], maxlen=self.capacity)


def bt_loss_cached(cache, weights, live=None):
    """BT loss over the full effective batch held by the cache.

    Cached rows are constants; only ``live`` embeddings receive gradient.
    """
    z_s, z_t = cache.stacked(live)
    return bt_loss_from_raw(z_s, z_t, weights)


@dataclass
class FitResult:
    model: BTSegNet
    log: list = field(default_factory=list)
    checkpoint: Path = None
    prepared: dict = field(default_factory=dict)


class BTSegTrainer:
    """Owns the model, optimizer and embedding cache for one training run"""

    def __init__(self, config, scene, out_dir=None, model=None):
        self.logger = setup_logger()
        self.config = config
        self.scene = scene
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.dtype = torch.float64 if config.dtype == "float64" else torch.float32
        self.model = model if model is not None else BTSegNet.from_config(config, scene.num_classes)
        self.fingerprint = fingerprint({"scene": to_dict(scene), "train": to_dict(config)})

        groups = self.model.param_groups()
        self.base_lrs = {
            "encoder": config.lr_encoder,
            "decoder": config.lr_decoder,
            "projector": config.lr_projector,
        }
        self.optimizer = torch.optim.AdamW(
            [{"params": groups[name], "lr": self.base_lrs[name], "name": name} for name in self.base_lrs],
            betas=tuple(config.betas),
            eps=config.adam_eps,
            weight_decay=config.weight_decay,
        )
        p = self.model.projector_spec.out_dim
        lambda_bt = config.lambda_bt if config.lambda_bt is not None else default_lambda(p, config.lambda_rule)
        self.weights = LossWeights(lambda_bt=lambda_bt, alpha=config.alpha, epsilon=config.bn_epsilon)
        self.cache = EmbeddingCache(config.effective_batch)
        self.step = 0
        self._perms = {}

    # ---------------------------
    # Schedules and sampling
    # ---------------------------
    def set_learning_rates(self, step):
        lrs = {}
        for group in self.optimizer.param_groups:
            lr = lr_schedule(step, self.base_lrs[group["name"]], self.config.warmup_steps,
                             self.config.total_steps)
            group["lr"] = lr
            lrs[group["name"]] = lr
        return lrs

    def sample_indices(self, step, n):
        """Endless shuffled stream, so every step gets a complete batch"""
        batch = self.config.effective_batch
        picked = []
        for position in range(step * batch, (step + 1) * batch):
            epoch, offset = divmod(position, n)
            if epoch not in self._perms:
                self._perms = {epoch: np.random.default_rng([self.config.seed, epoch]).permutation(n)}
            picked.append(int(self._perms[epoch][offset]))
        return picked

    def augment_batch(self, pairs, indices, step):
        out = []
        for slot, index in enumerate(indices):
            rng = np.random.default_rng([self.config.seed, step, slot, 1])
            out.append(paired_augment(pairs[index], rng, self.config.crop_size, self.config.flip_prob))
        return out

    # ---------------------------
    # One optimizer step
    # ---------------------------
    def _to_tensors(self, pairs):
        source = torch.from_numpy(np.stack([p.source for p in pairs])).to(self.dtype)
        target = torch.from_numpy(np.stack([p.target for p in pairs])).to(self.dtype)
        labels = torch.from_numpy(np.stack([p.labels.astype(np.int64) for p in pairs]))
        confidence = torch.from_numpy(np.stack([p.confidence for p in pairs])).to(self.dtype)
        return source, target, labels, confidence

    def _pooling_mode(self, step):
        mode = self.config.pooling
        if step < self.config.guidance_delay:
            # early predictions are noise; fall back to the unguided variant
            mode = {"segm": "avg", "segconf": "conf"}.get(mode, mode)
        return mode

    def _guidance_masks(self, logits_s, y_t, grid):
        mobile = self.scene.mobile_class_ids
        num_classes = self.scene.num_classes
        with torch.no_grad():
            pred_s = logits_s.argmax(dim=1)
            mask_s = mask_from_segmentation(pred_s, mobile, grid, num_classes)
            if self.config.mask_source == "per_path":
                pred_t = self.model.decoder(y_t).argmax(dim=1)
                mask_t = mask_from_segmentation(pred_t, mobile, grid, num_classes)
            else:
                mask_t = mask_s
        return mask_s.to(self.dtype), mask_t.to(self.dtype)

    def _bt_embeddings(self, y_s, y_t, logits_s, confidence, step):
        mode = self._pooling_mode(step)
        detach = step < self.config.stopgrad_steps
        grid = tuple(y_s.shape[-2:])
        mask_s = mask_t = conf_grid = None
        if mode in ("segm", "segconf"):
            mask_s, mask_t = self._guidance_masks(logits_s, y_t, grid)
        if mode in ("conf", "segconf"):
            conf_grid = downsample_confidence(confidence, grid)
        eps = self.config.pool_epsilon
        pooled_s = pool_features(stop_gradient_boundary(y_s, detach), mode, mask_s, conf_grid, eps)
        pooled_t = pool_features(stop_gradient_boundary(y_t, detach), mode, mask_t, conf_grid, eps)
        return self.model.projector(pooled_s), self.model.projector(pooled_t)

    def train_step(self, batch, step):
        """One optimizer update over ``effective_batch`` aligned pairs; returns the losses"""
        cfg = self.config
        self.model.train()
        lrs = self.set_learning_rates(step)
        self.optimizer.zero_grad(set_to_none=True)
        accum = cfg.accumulation_steps
        ce_values, bt_values = [], []
        # alpha = 0 leaves the projector untouched, exactly as use_bt = False does
        bt_active = cfg.use_bt and cfg.alpha > 0

        for k in range(accum):
            micro = batch[k * cfg.micro_batch:(k + 1) * cfg.micro_batch]
            source, target, labels, confidence = self._to_tensors(micro)
            y_s = self.model.encoder(source)
            logits_s = self.model.decoder(y_s)
            if (labels != cfg.ignore_index).any():
                l_ce = F.cross_entropy(logits_s, labels, ignore_index=cfg.ignore_index)
            else:
                l_ce = logits_s.sum() * 0.0

            self._check_finite(step, k, lrs, l_ce=l_ce)

            l_bt = torch.zeros((), dtype=self.dtype)
            if bt_active:
                y_t = self.model.encoder(target)
                self._check_finite(step, k, lrs, l_ce=l_ce, target_features=y_t)
                z_s, z_t = self._bt_embeddings(y_s, y_t, logits_s, confidence, step)
                self._check_finite(step, k, lrs, l_ce=l_ce, z_source=z_s, z_target=z_t)
                if self.cache.can_complete(z_s.shape[0]):
                    l_bt = bt_loss_cached(self.cache, self.weights, live=(z_s, z_t))
                    bt_values.append(float(l_bt.detach()))
                self.cache.push(z_s, z_t)

            self._check_finite(step, k, lrs, l_ce=l_ce, l_bt=l_bt)
            ce_values.append(float(l_ce.detach()))
            loss = combined_loss(l_ce, l_bt, cfg.alpha if bt_active else 0.0) / accum
            loss.backward()

        self.optimizer.step()
        self.step = step + 1
        return {
            "step": step,
            "l_ce": float(np.mean(ce_values)),
            "l_bt": float(np.mean(bt_values)) if bt_values else None,
            "lr_enc": lrs["encoder"],
            "lr_dec": lrs["decoder"],
            "lr_proj": lrs["projector"],
        }

    def _check_finite(self, step, micro_step, lrs, **values):
        """Abort with a diagnostic dump as soon as any monitored tensor goes non-finite"""
        if all(bool(torch.isfinite(v).all()) for v in values.values()):
            return
        losses = {name: float(v.detach()) if v.dim() == 0 else "non-finite tensor"
                  for name, v in values.items()}
        losses["micro_step"] = micro_step
        raise NumericAbort(f"non-finite loss at step {step}", self._dump(step, losses, lrs))

    def _dump(self, step, losses, lrs):
        norms = {
            name: float(torch.sqrt(sum((p.detach().double() ** 2).sum() for p in params)))
            for name, params in self.model.param_groups().items()
        }
        dump = {
            "step": step,
            "losses": losses,
            "learning_rates": lrs,
            "parameter_norms": norms,
            "host": SystemMonitor().get_resource_snapshot(),
            "fingerprint": self.fingerprint,
        }
        if self.out_dir is None:
            self.logger.error(f"Non-finite loss at step {step}: {dump}")
            return None
        path = self.out_dir / "nan_dump.json"
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(dump, indent=2, sort_keys=True), encoding="utf-8")
        except OSError as e:
            raise DatasetIOError(f"could not write diagnostic dump: {e}", path) from e
        self.logger.error(f"Non-finite loss at step {step}; diagnostics in {path}")
        return path

    # ---------------------------
    # Checkpoints
    # ---------------------------
    def save(self, path):
        return save_checkpoint(path, self.model, self.step, extra={
            "optimizer": self.optimizer.state_dict(),
            "cache": self.cache.state_dict(),
            "fingerprint": self.fingerprint,
        })

    def restore(self, path):
        model, payload = load_checkpoint(path)
        if payload.get("fingerprint") != self.fingerprint:
            raise ConfigError(f"checkpoint {path} was written by a different configuration")
        self.model.load_state_dict(model.state_dict())
        self.optimizer.load_state_dict(payload["optimizer"])
        self.cache.load_state_dict(payload["cache"])
        self.step = payload["step"]
        return self.step

    # ---------------------------
    # Full run
    # ---------------------------
    def fit(self, dataset, resume=False):
        cfg = self.config
        pairs, stats = prepare_pairs(dataset, cfg)
        self.logger.info(f"Prepared {stats['kept']} training pairs ({stats['rejected']} filtered out)")
        self.logger.info(f"Host: {SystemMonitor().get_resource_snapshot()}")

        log = []
        log_path = self.out_dir / METRICS_LOG if self.out_dir is not None else None
        if resume:
            checkpoint = self.out_dir / LAST_CHECKPOINT if self.out_dir is not None else None
            if checkpoint is None or not checkpoint.exists():
                raise DatasetIOError("no checkpoint to resume from", checkpoint)
            self.restore(checkpoint)
            log = [r for r in _read_log(log_path) if r["step"] < self.step]
            self.logger.info(f"Resumed from {checkpoint} at step {self.step}")
        _write_log(log_path, log)

        last = None
        for step in range(self.step, cfg.total_steps):
            indices = self.sample_indices(step, len(pairs))
            batch = self.augment_batch(pairs, indices, step)
            record = self.train_step(batch, step)
            record["fingerprint"] = self.fingerprint
            log.append(record)
            _append_log(log_path, record)
            if step % 50 == 0 or step == cfg.total_steps - 1:
                bt = "n/a" if record["l_bt"] is None else f"{record['l_bt']:.4f}"
                self.logger.info(f"step {step}: l_ce={record['l_ce']:.4f} l_bt={bt} "
                                 f"lr_enc={record['lr_enc']:.2e}")
            if self.out_dir is not None and (self.step % cfg.checkpoint_every == 0
                                             or self.step == cfg.total_steps):
                last = self.save(self.out_dir / LAST_CHECKPOINT)
                if self.step % cfg.checkpoint_every == 0:
                    self.save(self.out_dir / f"checkpoint_{self.step:06d}.pt")
        if self.out_dir is not None and last is None:
            last = self.save(self.out_dir / LAST_CHECKPOINT)
        return FitResult(model=self.model, log=log, checkpoint=last, prepared=stats)


def fit(dataset, config, out_dir=None, resume=False):
    """Train on ``dataset`` (anything indexable with a ``scene`` attribute)"""
    trainer = BTSegTrainer(config, dataset.scene, out_dir=out_dir)
    return trainer.fit(dataset, resume=resume)


def _read_log(path):
    if path is None or not path.exists():
        return []
    try:
        return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetIOError(f"could not read metrics log: {e}", path) from e


def _write_log(path, records):
    if path is None:
        return
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records), encoding="utf-8")
    except OSError as e:
        raise DatasetIOError(f"could not write metrics log: {e}", path) from e


def _append_log(path, record):
    if path is None:
        return
    try:
        with path.open("a", encoding="utf-8") as handle:
            handle.write(json.dumps(record, sort_keys=True) + "\n")
    except OSError as e:
        raise DatasetIOError(f"could not append to metrics log: {e}", path) from e
