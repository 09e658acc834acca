"""Calibration -> training -> evaluation for every method variant.

The training path only ever sees the teacher through an endpoint (and the cache
in front of it); source-domain parameters are handed to ``teacher.connect``
untouched.
"""
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .. import teacher as teacher_api
from ..domain import make_dataset
from ..eval import ConfusionMatrix, accumulate, iou_from_cm, metrics_csv
from ..probmap import hard_argmax
from ..pseudolabel import compute_class_thresholds, naive_mask, ac_mask, r2cp_mask
from ..refine import EmaState, RefineConfig, ema_update, refine_mask
from ..seeding import derive_seed, rng
from ..student import (
    OptimState,
    StudentParams,
    augment,
    ce_loss_and_grad,
    forward,
    kl_loss_and_grad,
    optim_step,
)
from .cache import TeacherCache
from .checkpoint import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

EVAL_CHUNK = 50


class TrainingAborted(RuntimeError):
    """Training stopped early; ``checkpoint`` names a file that ``--resume`` accepts."""

    def __init__(self, message, checkpoint):
        super().__init__(f"{message} (resumable checkpoint: {checkpoint})")
        self.checkpoint = checkpoint


@dataclass
class RunRecord:
    config_hash: str
    variant: str
    subseeds: dict
    history: list = field(default_factory=list)  # (step, MetricsReport)
    losses: list = field(default_factory=list)
    retained: list = field(default_factory=list)  # supervised-pixel fraction per step
    wall_clock: float = 0.0
    checkpoint_path: str = None
    completed: bool = False
    teacher_queries: int = 0

    @property
    def final_miou(self):
        return self.history[-1][1].miou if self.history else float("nan")

    def metrics_csv(self, num_classes):
        return metrics_csv([(s, self.variant, r) for s, r in self.history], num_classes)


def build_datasets(config):
    d = config.domain
    target = d.target_spec()
    return (
        make_dataset(target, "target-train", d.n_train, d.height, d.width),
        make_dataset(target, "target-test", d.n_test, d.height, d.width),
    )


def batch_indices(step, batch_size, n, seed):
    """Sample ids of a step's batch: consecutive slices of per-epoch permutations."""
    out = []
    for pos in range(step * batch_size, (step + 1) * batch_size):
        epoch, offset = divmod(pos, n)
        out.append(int(rng(seed, epoch).permutation(n)[offset]))
    return out


def evaluate(params, dataset, retained_fraction=float("nan")):
    cm = ConfusionMatrix.zeros(params.num_classes)
    samples = list(dataset)
    for start in range(0, len(samples), EVAL_CHUNK):
        chunk = samples[start:start + EVAL_CHUNK]
        probs = forward(params, np.stack([s.features for s in chunk]))
        for s, p in zip(chunk, probs):
            cm = accumulate(cm, hard_argmax(p), s.labels)
    return iou_from_cm(cm, retained_fraction)


def evaluate_teacher(cache, dataset):
    """mIoU of the teacher's own argmax (the source-only reference)."""
    cm = None
    for s in dataset:
        q = cache.get(s)
        cm = cm or ConfusionMatrix.zeros(q.shape[0])
        cm = accumulate(cm, hard_argmax(q), s.labels)
    return iou_from_cm(cm)


def calibrate(config, cache, dataset, statistic=None):
    statistic = statistic or config.statistic or "rc"
    return compute_class_thresholds((cache.get(s) for s in dataset), statistic)


class Trainer:
    def __init__(self, config, endpoint=None, datasets=None, thresholds=None, write_outputs=True):
        self.config = config
        self.hash = config.config_hash()
        self.subseeds = config.subseeds()
        self.write_outputs = write_outputs
        self.train_set, self.test_set = datasets or build_datasets(config)
        self.num_classes = config.domain.source.num_classes
        self._own_endpoint = endpoint is None
        self.endpoint = endpoint or teacher_api.connect(config.teacher, config.domain.source)
        self.cache = TeacherCache(self.endpoint, self.hash)
        self.thresholds = thresholds
        self.refine_config = RefineConfig(config.beta, config.lambda_max, config.total_steps)
        self.record = RunRecord(self.hash, config.variant, self.subseeds)
        log.info("run %s variant=%s subseeds=%s", self.hash, config.variant, self.subseeds)

        feature_dim = self.train_set.spec.feature_dim
        self.params = StudentParams.init(
            feature_dim, self.num_classes, config.hidden, config.patch, rng(self.subseeds["init"])
        )
        o = config.optimizer
        self.optim = OptimState(o.lr_hidden, o.lr_output, o.weight_decay, o.warmup_steps, o.beta1, o.beta2, o.eps)
        self.ema = EmaState.init_from(self.params, config.alpha) if config.uses_ema else None
        self.step = 0

    # -- paths ------------------------------------------------------------------

    def _path(self, name):
        return os.path.join(self.config.output_dir, name)

    @property
    def checkpoint_path(self):
        return self._path("checkpoint.ckpt")

    # -- state ------------------------------------------------------------------

    def save(self, path=None):
        path = path or self.checkpoint_path
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        extra = {
            "variant": self.config.variant,
            "num_classes": self.num_classes,
            "history": [[s, _report_to_dict(r)] for s, r in self.record.history],
            "losses": self.record.losses,
            "retained": self.record.retained,
        }
        save_checkpoint(path, config_hash=self.hash, step=self.step, params=self.params,
                        optim=self.optim, ema=self.ema, extra=extra)
        self.record.checkpoint_path = path
        return path

    def restore(self, path):
        header, params, optim, ema = load_checkpoint(path)
        if header["config_hash"] != self.hash:
            raise ValueError(f"checkpoint was written by config {header['config_hash']}, not {self.hash}")
        self.params, self.optim, self.ema = params, optim, ema
        self.step = header["step"]
        extra = header["extra"]
        self.record.history = [(s, _report_from_dict(r)) for s, r in extra["history"]]
        self.record.losses = list(extra["losses"])
        self.record.retained = list(extra["retained"])
        log.info("resumed %s at step %d", path, self.step)

    # -- phases -----------------------------------------------------------------

    def teacher_probs(self, sample):
        try:
            return self.cache.get(sample)
        except teacher_api.TeacherError as e:
            ckpt = self.save() if self.write_outputs else None
            raise TrainingAborted(f"teacher query failed for sample {sample.sample_id}: {e}", ckpt) from e

    def calibrate(self):
        if self.config.statistic is None or self.thresholds is not None:
            return self.thresholds
        self.thresholds = compute_class_thresholds(
            (self.teacher_probs(s) for s in self.train_set), self.config.statistic
        )
        if self.write_outputs:
            self.thresholds.save(self._path(f"thresholds_{self.config.statistic}.json"))
        return self.thresholds

    def supervision(self, sample, ema_probs=None):
        q = self.teacher_probs(sample)
        stat = self.config.statistic
        if stat is None:
            mask = naive_mask(q)
        elif stat == "ac":
            mask = ac_mask(q, self.thresholds)
        else:
            mask = r2cp_mask(q, self.thresholds)
        if ema_probs is not None:
            mask = refine_mask(mask, ema_probs, self.step, self.refine_config)
        return mask

    def train_step(self):
        cfg = self.config
        ids = batch_indices(self.step, cfg.batch_size, len(self.train_set), self.subseeds["batching"])
        batch = [self.train_set[i] for i in ids]
        clean = np.stack([s.features for s in batch])

        if cfg.variant == "kl-div":
            q = np.stack([self.teacher_probs(s) for s in batch])
            loss, grads = kl_loss_and_grad(self.params, clean, q)
            retained = 1.0
        else:
            ema_probs = forward(self.ema.params, clean) if self.ema is not None else [None] * len(batch)
            masks = [self.supervision(s, e) for s, e in zip(batch, ema_probs)]
            feats = clean
            if cfg.uses_augment:
                pairs = [
                    augment(s.features, m, cfg.augment, derive_seed(self.subseeds["augment"], self.step, s.sample_id))
                    for s, m in zip(batch, masks)
                ]
                feats = np.stack([f for f, _ in pairs])
                masks = [m for _, m in pairs]
            loss, grads = ce_loss_and_grad(self.params, feats, masks)
            retained = float(np.mean([m.supervised.mean() for m in masks]))

        if not np.isfinite(loss):
            ckpt = self.save() if self.write_outputs else None
            raise TrainingAborted(f"non-finite loss at step {self.step}", ckpt)
        self.optim, self.params = optim_step(self.optim, self.params, grads)
        if self.ema is not None:
            self.ema = ema_update(self.ema, self.params)
        self.record.losses.append(loss)
        self.record.retained.append(retained)
        self.step += 1

    def maybe_evaluate(self):
        cfg = self.config
        if self.step % cfg.eval_every and self.step != cfg.total_steps:
            return
        since = self.record.history[-1][0] if self.record.history else 0
        window = self.record.retained[since:self.step]
        report = evaluate(self.params, self.test_set, float(np.mean(window)) if window else float("nan"))
        self.record.history.append((self.step, report))
        log.info("step %d %s mIoU %.4f acc %.4f", self.step, cfg.variant, report.miou, report.pixel_accuracy)
        if self.write_outputs:
            self.write_metrics()
            self.save()

    def write_metrics(self):
        os.makedirs(self.config.output_dir, exist_ok=True)
        with open(self._path("metrics.csv"), "w", newline="") as f:
            f.write(self.record.metrics_csv(self.num_classes))
        with open(self._path("curve.csv"), "w", newline="") as f:
            f.write("step,miou\n")
            for s, r in self.record.history:
                f.write(f"{s},{r.miou:.6f}\n")

    def run(self, stop_after=None):
        start = time.perf_counter()
        cfg = self.config
        if self.write_outputs:
            os.makedirs(cfg.output_dir, exist_ok=True)
            cfg.save(self._path("config.json"))
        try:
            self.calibrate()
            while self.step < cfg.total_steps:
                self.train_step()
                self.maybe_evaluate()
                if stop_after is not None and self.step >= stop_after and self.step < cfg.total_steps:
                    if self.write_outputs:
                        self.save()
                    break
            else:
                self.record.completed = True
                if self.write_outputs:
                    self.save()
        finally:
            self.record.wall_clock += time.perf_counter() - start
            self.record.teacher_queries = self.cache.misses
            if self._own_endpoint:
                self.endpoint.close()
        if self.write_outputs:
            self._write_record()
        return self.record

    def _write_record(self):
        rec = self.record
        with open(self._path("run.json"), "w") as f:
            json.dump({
                "config_hash": rec.config_hash,
                "variant": rec.variant,
                "subseeds": rec.subseeds,
                "completed": rec.completed,
                "steps": self.step,
                "final_miou": _finite_or_none(rec.final_miou),
                "wall_clock_s": rec.wall_clock,
                "teacher_queries": rec.teacher_queries,
                "checkpoint": rec.checkpoint_path,
            }, f, indent=2, sort_keys=True)


def _finite_or_none(x):
    return None if np.isnan(x) else float(x)


def _report_to_dict(r):
    return {
        "per_class_iou": [_finite_or_none(x) for x in r.per_class_iou],
        "miou": _finite_or_none(r.miou),
        "pixel_accuracy": _finite_or_none(r.pixel_accuracy),
        "retained_fraction": _finite_or_none(r.retained_fraction),
    }


def _report_from_dict(d):
    from ..eval import MetricsReport

    def num(x):
        return float("nan") if x is None else x

    return MetricsReport(
        np.array([num(x) for x in d["per_class_iou"]]),
        num(d["miou"]),
        num(d["pixel_accuracy"]),
        num(d["retained_fraction"]),
    )


def run_experiment(config, resume=None, stop_after=None, endpoint=None, datasets=None,
                   thresholds=None, write_outputs=True):
    trainer = Trainer(config, endpoint, datasets, thresholds, write_outputs)
    if resume:
        trainer.restore(resume)
    return trainer.run(stop_after)
