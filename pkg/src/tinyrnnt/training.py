"""Epoch-level training loop: shuffled minibatches, clipped gradient steps,
per-epoch checkpoints, and a tab-separated log."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np

from .core import NumericError, Vocabulary, derive_seed, encode_transcript
from .loss import LossConfig, clip_gradients, combined_loss_and_grads, sgd_step
from .model import ModelParams, load_params, save_params

LOG_HEADER = "epoch\tmean_loss\tmean_nll_full\tmean_nll_ilm\tmean_nll_iam\twall_ms"


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    mean_nll_full: float
    mean_nll_ilm: float
    mean_nll_iam: float
    wall_ms: float

    def log_line(self) -> str:
        return (
            f"{self.epoch}\t{self.mean_loss!r}\t{self.mean_nll_full!r}"
            f"\t{self.mean_nll_ilm!r}\t{self.mean_nll_iam!r}\t{self.wall_ms:.1f}"
        )


def encode_corpus(utts, vocab: Vocabulary):
    """Corpus records to (id, features, labels) training items."""
    return [(u.id, u.features, encode_transcript(u.transcript, vocab)) for u in utts]


def train_epochs(
    params: ModelParams,
    items,
    alpha: float,
    beta: float,
    eta: float,
    lr: float,
    epochs: int,
    batch_size: int,
    clip_norm: float,
    seed: int,
    start_epoch: int = 0,
    out_dir: str | None = None,
    init_seed: int | None = None,
    on_epoch=None,
) -> tuple[ModelParams, list[EpochStats]]:
    """Run epochs [start_epoch, epochs); deterministic in (seed, start_epoch).

    Shuffling is keyed by (seed, epoch) and masking by (seed, epoch, example
    id), so a resumed run replays exactly the epochs an uninterrupted run
    would have executed.
    """
    if batch_size < 1:
        raise NumericError("batch_size must be at least 1")
    history: list[EpochStats] = []
    for epoch in range(start_epoch, epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng(derive_seed(seed, "shuffle", epoch))
        order = rng.permutation(len(items))
        cfg = LossConfig(alpha=alpha, beta=beta, eta=eta, seed=derive_seed(seed, "mask", epoch))
        sums = np.zeros(4)
        count = 0
        for lo in range(0, len(order), batch_size):
            batch = [items[i] for i in order[lo:lo + batch_size]]
            try:
                loss, grads, report = combined_loss_and_grads(params, batch, cfg)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}: {exc}") from exc
            grads = clip_gradients(grads, clip_norm)
            params = sgd_step(params, grads, lr)
            n = len(batch)
            sums += n * np.array([loss, report.nll_full, report.nll_ilm, report.nll_iam])
            count += n
        wall_ms = (time.perf_counter() - t0) * 1000.0
        stats = EpochStats(epoch, *(sums / count), wall_ms)
        history.append(stats)
        if out_dir is not None:
            ckpt = os.path.join(out_dir, f"ckpt_epoch_{epoch + 1:04d}.json")
            save_params(params, ckpt, init_seed=init_seed, epoch=epoch + 1)
            save_params(
                params, os.path.join(out_dir, "ckpt_latest.json"), init_seed=init_seed, epoch=epoch + 1
            )
        if on_epoch is not None:
            on_epoch(stats)
    return params, history


def append_log(path, stats_list, write_header: bool) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        if write_header:
            fh.write(LOG_HEADER + "\n")
        for stats in stats_list:
            fh.write(stats.log_line() + "\n")


def resume_state(out_dir: str) -> tuple[ModelParams, int] | None:
    """Latest checkpoint in out_dir, or None when starting fresh."""
    latest = os.path.join(out_dir, "ckpt_latest.json")
    if not os.path.exists(latest):
        return None
    params, meta = load_params(latest)
    return params, meta["epoch"]
