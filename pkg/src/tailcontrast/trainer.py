"""Training loop: composed objective, schedules, checkpoints, determinism.

One step trains the classifier on labeled data, the consistency loss on
confidently pseudo-labeled strong views, the semantic alignment term,
and the contrastive loss of strong-view embeddings against a pre-step
snapshot of the labeled memory. Labeled (and, late in training,
feature-augmented) EMA features are pushed into the memory afterwards,
so no anchor ever scores against an entry produced in the same step.

All randomness flows from one master seed expanded into named substreams
(batch order, augmentation, feature augmentation, parameter init), which
makes deterministic runs bitwise reproducible.
"""
from __future__ import annotations

import json
import math
import os
from typing import Callable, Iterator, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .config import RunConfig
from .contrastive import ContrastiveBatch, confidence_vector, contrastive_loss
from .datasets import ArrayDataset
from .augment import strong_augment_batch, weak_augment_batch
from .evaluation import EvalRecord, evaluate, final_score
from .featureaug import augment_batch, fa_probability
from .memory import ClassMemory
from .models import ModelState
from .pseudolabels import (
    ConfidentHistogram,
    align_loss,
    fixmatch_loss,
    make_pseudo_labels,
    semantic_pseudo_label,
)
from .splits import SplitManifest


class NonFiniteLossError(RuntimeError):
    """A loss component became NaN or infinite."""


def total_loss(l_cls, l_u, l_align, l_c, loss_cfg) -> torch.Tensor:
    """Weighted sum of the four objective components.

    Raises NonFiniteLossError naming the first non-finite component.
    """
    for name, value in (("l_cls", l_cls), ("l_u", l_u), ("l_align", l_align), ("l_c", l_c)):
        scalar = float(value)
        if not math.isfinite(scalar):
            raise NonFiniteLossError(f"{name} is non-finite ({scalar})")
    return (
        l_cls
        + loss_cfg.lambda_u * l_u
        + loss_cfg.lambda_align * l_align
        + loss_cfg.lambda_c * l_c
    )


def fa_active(iteration: int, total_iters: int, start_fraction: float) -> bool:
    """Feature augmentation runs only in the final stretch of training."""
    if not 0 <= iteration < total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {total_iters})")
    return iteration >= start_fraction * total_iters


def cosine_lr_factor(iteration: int, total_iters: int) -> float:
    return math.cos(7.0 * math.pi * iteration / (16.0 * total_iters))


class IndexStream:
    """Endless shuffled batches of dataset indices."""

    def __init__(self, indices: np.ndarray, batch_size: int, rng: np.random.Generator, shuffle: bool = True):
        if len(indices) == 0:
            raise ValueError("cannot stream from an empty index pool")
        self.indices = np.asarray(indices, dtype=np.int64)
        self.batch_size = batch_size
        self.rng = rng
        self.shuffle = shuffle
        self._order = self._new_order()
        self._pos = 0

    def _new_order(self) -> np.ndarray:
        return self.rng.permutation(len(self.indices)) if self.shuffle else np.arange(len(self.indices))

    def next(self) -> np.ndarray:
        out = []
        while len(out) < self.batch_size:
            if self._pos >= len(self._order):
                self._order = self._new_order()
                self._pos = 0
            take = min(self.batch_size - len(out), len(self._order) - self._pos)
            out.append(self._order[self._pos : self._pos + take])
            self._pos += take
        return self.indices[np.concatenate(out)]

    def state_dict(self) -> dict:
        return {"order": self._order.tolist(), "pos": self._pos}

    def load_state_dict(self, state: dict) -> None:
        self._order = np.asarray(state["order"], dtype=np.int64)
        self._pos = int(state["pos"])


class MetricsLogger:
    """JSON-lines metrics stream, optionally mirrored to a file."""

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self.history: list[dict] = []
        self._fh = open(path, "a") if path else None

    def log(self, record: dict) -> None:
        self.history.append(record)
        if self._fh:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


_RNG_NAMES = ("data_labeled", "data_unlabeled", "aug_labeled", "aug_unlabeled", "fa", "torch_init")


def spawn_rngs(seed: int) -> dict:
    children = np.random.SeedSequence(seed).spawn(len(_RNG_NAMES))
    return {name: np.random.default_rng(child) for name, child in zip(_RNG_NAMES, children)}


class Trainer:
    """Owns model, memory, optimizer, and data streams for one run."""

    def __init__(
        self,
        config: RunConfig,
        train_source: ArrayDataset,
        manifest: SplitManifest,
        test_source: Optional[ArrayDataset] = None,
        run_dir: Optional[str] = None,
        bundle_hook: Optional[Callable] = None,
    ):
        self.config = config
        self.train_source = train_source
        self.manifest = manifest
        self.test_source = test_source
        self.run_dir = run_dir
        self.bundle_hook = bundle_hook

        tc = config.trainer
        self.rngs = spawn_rngs(tc.seed)
        torch.manual_seed(int(self.rngs["torch_init"].integers(0, 2**63 - 1)))

        self.model = ModelState.build(
            config.model.backbone,
            num_classes=config.data.num_classes,
            proj_dim=config.model.proj_dim,
            ema_momentum=config.model.ema_momentum,
        )
        self.memory = ClassMemory(config.data.num_classes, capacity=tc.queue_capacity)
        self.histogram = ConfidentHistogram(config.data.num_classes, window=tc.histogram_window)

        opt = tc.optimizer
        self.optimizer = torch.optim.SGD(
            self.model.trainable_parameters(),
            lr=opt.lr,
            momentum=opt.momentum,
            nesterov=opt.nesterov,
            weight_decay=opt.weight_decay,
        )
        if opt.cosine_decay:
            self.scheduler = torch.optim.lr_scheduler.LambdaLR(
                self.optimizer, lambda it: cosine_lr_factor(min(it, tc.total_iters - 1), tc.total_iters)
            )
        else:
            self.scheduler = torch.optim.lr_scheduler.LambdaLR(self.optimizer, lambda it: 1.0)

        labeled_idx, labeled_lab = manifest.flat_labeled()
        self._labeled_labels = {int(i): int(l) for i, l in zip(labeled_idx, labeled_lab)}
        self.labeled_stream = IndexStream(labeled_idx, tc.batch_labeled, self.rngs["data_labeled"])
        unlabeled_idx = manifest.flat_unlabeled()
        self.unlabeled_stream = (
            IndexStream(unlabeled_idx, tc.batch_unlabeled, self.rngs["data_unlabeled"])
            if len(unlabeled_idx) > 0 and tc.batch_unlabeled > 0
            else None
        )

        self.fa_probs = fa_probability(manifest.labeled_counts)
        self.fa_counts = np.zeros(config.data.num_classes, dtype=np.int64)
        counts = np.asarray(manifest.labeled_counts)
        order = np.lexsort((-np.arange(len(counts)), counts))
        self.tail_classes = [int(c) for c in order[: config.eval.tail_k]]

        self.iteration = 0
        self.eval_records: list[EvalRecord] = []
        metrics_path = os.path.join(run_dir, "metrics.jsonl") if run_dir else None
        if run_dir:
            os.makedirs(run_dir, exist_ok=True)
            os.makedirs(os.path.join(run_dir, "checkpoints"), exist_ok=True)
            config.save(os.path.join(run_dir, "config.yaml"))
        self.metrics = MetricsLogger(metrics_path)

    # ------------------------------------------------------------------ data

    def next_batches(self):
        """Assemble one (labeled, unlabeled) batch pair with augmented views."""
        idx = self.labeled_stream.next()
        raw = self.train_source.batch(idx)
        x_w = weak_augment_batch(raw, self.rngs["aug_labeled"])
        y = torch.tensor([self._labeled_labels[int(i)] for i in idx], dtype=torch.long)

        if self.unlabeled_stream is None:
            empty = torch.zeros(0, *raw.shape[1:])
            return (x_w, y), (empty, empty)
        uidx = self.unlabeled_stream.next()
        uraw = self.train_source.batch(uidx)
        u_w = weak_augment_batch(uraw, self.rngs["aug_unlabeled"])
        u_s = strong_augment_batch(uraw, self.rngs["aug_unlabeled"])
        return (x_w, y), (u_w, u_s)

    # ------------------------------------------------------------------ step

    def train_step(self, labeled_batch, unlabeled_batch) -> dict:
        """One optimization step; returns the step's metrics record."""
        cfg = self.config
        lw = cfg.loss
        x_w, y = labeled_batch
        u_w, u_s = unlabeled_batch
        n_u = u_w.shape[0]
        unsup = n_u > 0 and (lw.lambda_u > 0 or lw.lambda_align > 0 or lw.lambda_c > 0)

        self.model.train_mode()
        snapshot = self.memory.snapshot()  # pre-push view used by the contrastive loss
        protos = self.memory.prototypes()

        if unsup:
            feats = self.model.encode(torch.cat([x_w, u_w, u_s]))
            z_l, z_uw, z_us = feats.split([x_w.shape[0], n_u, n_u])
        else:
            z_l = self.model.encode(x_w)

        l_cls = F.cross_entropy(self.model.classify(z_l), y)

        zero = torch.zeros(())
        l_u = l_align = l_c = zero
        confident_frac = 0.0
        skipped = 0
        pl_hist = [0] * cfg.data.num_classes
        bundle = None
        if unsup:
            bundle = make_pseudo_labels(
                z_uw.detach(), self.model.classifier, protos, self.histogram,
                tau=lw.tau, proto_temperature=lw.proto_temperature,
            )
            self.histogram.update(bundle.linear_probs, lw.tau)
            confident_frac = float(bundle.confident.float().mean())
            pl_hist = (
                torch.bincount(bundle.pseudo_class[bundle.confident], minlength=cfg.data.num_classes)
                .tolist()
            )
            if lw.lambda_u > 0:
                strong_probs = F.softmax(self.model.classify(z_us), dim=-1)
                l_u = fixmatch_loss(bundle.blended_probs, strong_probs, lw.tau)
            if lw.lambda_align > 0:
                # gradient flows through the semantic head here, unlike the bundle
                l_align = align_loss(semantic_pseudo_label(z_uw, protos, lw.proto_temperature))
            if lw.lambda_c > 0:
                anchors = self.model.project(z_us)
                s = confidence_vector(bundle.blended_probs, lw.tau)
                l_c, skipped = contrastive_loss(
                    ContrastiveBatch(anchors, bundle.pseudo_class, s, snapshot),
                    temperature=lw.contrast_temperature,
                )
        if self.bundle_hook is not None and bundle is not None:
            self.bundle_hook(self.iteration, bundle, confidence_vector(bundle.blended_probs, lw.tau))

        try:
            loss = total_loss(l_cls, l_u, l_align, l_c, lw)
        except NonFiniteLossError as exc:
            raise NonFiniteLossError(f"iteration {self.iteration}: {exc}") from None

        # memory updates use EMA features as of step start (before the optimizer moves)
        fa_count = 0
        if unsup:
            with torch.no_grad():
                z_l_ema = self.model.encode(x_w, use_ema=True)
                e_l_ema = self.model.project(z_l_ema, use_ema=True)
                augmented = []
                if fa_active(self.iteration, cfg.trainer.total_iters, cfg.fa.start_fraction):
                    z_uw_ema = self.model.encode(u_w, use_ema=True)
                    augmented = augment_batch(
                        z_l_ema, y.tolist(), z_uw_ema, self.fa_probs, cfg.fa, self.rngs["fa"]
                    )
                for i in range(x_w.shape[0]):
                    self.memory.push(int(y[i]), z_l_ema[i], e_l_ema[i], 1.0)
                if augmented:
                    fa_count = len(augmented)
                    aug_feats = torch.stack([a.feature for a in augmented])
                    aug_embs = self.model.project(aug_feats, use_ema=True)
                    for j, aug in enumerate(augmented):
                        self.memory.push(aug.label, aug.feature, aug_embs[j], min(aug.lam, 1.0))
                        self.fa_counts[aug.label] += 1

        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.scheduler.step()
        self.model.ema_update()

        record = {
            "kind": "step",
            "iter": self.iteration,
            "l_cls": float(l_cls),
            "l_u": float(l_u),
            "l_align": float(l_align),
            "l_c": float(l_c),
            "l_total": float(loss),
            "confident_frac": confident_frac,
            "fa_count": fa_count,
            "lr": float(self.optimizer.param_groups[0]["lr"]),
            "contrastive_skipped": skipped,
            "pl_hist": pl_hist,
        }
        self.metrics.log(record)
        self.iteration += 1
        return record

    # ------------------------------------------------------------------ loop

    def run_evaluation(self) -> EvalRecord:
        if self.test_source is None:
            raise RuntimeError("no test source configured")
        record = evaluate(
            self.model,
            self.test_source,
            tail_classes=self.tail_classes,
            batch_size=self.config.eval.batch_size,
            iteration=self.iteration,
        )
        self.eval_records.append(record)
        self.metrics.log(
            {
                "kind": "eval",
                "iter": record.iteration,
                "top1": record.top1,
                "per_class": record.per_class,
                "tail3": record.tail3,
                "fa_per_class": self.fa_counts.tolist(),
            }
        )
        return record

    def train(self, num_steps: Optional[int] = None) -> dict:
        """Run ``num_steps`` (default: up to total_iters) and return a summary."""
        tc = self.config.trainer
        target = self.iteration + num_steps if num_steps is not None else tc.total_iters
        target = min(target, tc.total_iters)
        while self.iteration < target:
            labeled, unlabeled = self.next_batches()
            self.train_step(labeled, unlabeled)
            if self.test_source is not None and self.iteration % tc.eval_interval == 0:
                self.run_evaluation()
                if self.run_dir:
                    self.save_checkpoint(
                        os.path.join(self.run_dir, "checkpoints", f"checkpoint_{self.iteration:08d}.pt")
                    )
        summary = self.summary()
        if self.run_dir:
            self.save_checkpoint(os.path.join(self.run_dir, "checkpoints", "checkpoint_final.pt"))
            with open(os.path.join(self.run_dir, "summary.json"), "w") as f:
                json.dump(summary, f, indent=2, sort_keys=True)
        return summary

    def summary(self) -> dict:
        summary = {
            "iterations": self.iteration,
            "config_hash": self.config.config_hash(),
            "num_evals": len(self.eval_records),
        }
        if self.eval_records:
            last = self.eval_records[-1]
            summary["last_top1"] = last.top1
            summary["last_tail3"] = last.tail3
            window = self.config.eval.final_window
            if len(self.eval_records) >= window:
                summary["final_score"] = final_score(self.eval_records, window=window)
        return summary

    # ----------------------------------------------------------- checkpoints

    def save_checkpoint(self, path: str) -> None:
        state = {
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict(),
            "iteration": self.iteration,
            "memory": self.memory.state_dict(),
            "histogram": self.histogram.state_dict(),
            "fa_counts": self.fa_counts.tolist(),
            "rng": {name: rng.bit_generator.state for name, rng in self.rngs.items()},
            "torch_rng": torch.get_rng_state(),
            "streams": {
                "labeled": self.labeled_stream.state_dict(),
                "unlabeled": self.unlabeled_stream.state_dict() if self.unlabeled_stream else None,
            },
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
        }
        torch.save(state, path)
        with open(path + ".json", "w") as f:
            json.dump({"config": self.config.to_dict(), "config_hash": self.config.config_hash()}, f, indent=2, sort_keys=True)

    def load_checkpoint(self, path: str) -> None:
        state = torch.load(path, weights_only=False)
        if state["config_hash"] != self.config.config_hash():
            raise ValueError(
                "checkpoint config hash does not match the trainer configuration; "
                "rebuild the trainer from the checkpoint's config"
            )
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.scheduler.load_state_dict(state["scheduler"])
        self.iteration = int(state["iteration"])
        self.memory.load_state_dict(state["memory"])
        self.histogram.load_state_dict(state["histogram"])
        self.fa_counts = np.asarray(state["fa_counts"], dtype=np.int64)
        for name, rng_state in state["rng"].items():
            self.rngs[name].bit_generator.state = rng_state
        torch.set_rng_state(state["torch_rng"])
        self.labeled_stream.load_state_dict(state["streams"]["labeled"])
        if self.unlabeled_stream and state["streams"]["unlabeled"]:
            self.unlabeled_stream.load_state_dict(state["streams"]["unlabeled"])
