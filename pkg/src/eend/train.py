"""Optimization: Adam with a warm-up schedule, chunked batches, checkpoint
averaging and domain adaptation.

Training splits each recording into non-overlapping fixed-length chunks,
shuffles them every epoch, pads chunks within a batch to a common length
(padded frames are masked out of attention and loss, so padding is exactly
loss-neutral) and minimizes the permutation-free loss, blended with the
clustering loss for the BLSTM model. The reference run is single-threaded
and bit-reproducible given (seed, config, data).

Validation loss is always the plain permutation-free BCE on whole
(unchunked) recordings, weighted by frame count, so runs with different
architectures or objectives stay comparable.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import loss as losses
from . import tensor as tt
from .audio import read_wav
from .features import extract
from .model import Config, SaEendConfig, blstm_eend_forward, \
    init_params, sa_eend_forward, save_params
from .rng import Rng, derive
from .score import parse_rttm, rasterize_segments, records_to_segments
from .simulate import FRAME_PERIOD, FRAME_SAMPLES, LabelSequence, subsample_labels
from .tensor import Tensor, backward, collect_grads, no_grad, zero_grads

log = logging.getLogger(__name__)

Example = tuple[np.ndarray, np.ndarray]   # features (T, F), labels (T, C)

MIN_CHUNK_FRAMES = 10


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 40
    chunk_len: int = 500
    warmup_steps: int = 2000
    lr_mode: str = "noam"          # "noam" (scaled by model dim) or "fixed"
    lr: float = 1e-3               # used when lr_mode == "fixed"
    average_last: int = 10
    alpha: float = 0.5             # clustering blend for the BLSTM objective
    seed: int = 0

    def __post_init__(self):
        if self.chunk_len < 1:
            raise ValueError(f"chunk_len must be >= 1, got {self.chunk_len}")
        if self.warmup_steps < 1:
            raise ValueError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.lr_mode not in ("noam", "fixed"):
            raise ValueError(f"lr_mode must be noam or fixed, got {self.lr_mode!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.average_last < 1:
            raise ValueError("batch_size/epochs/average_last out of range")


def noam_lr(step: int, d_model: int, warmup: int) -> float:
    """Warm-up schedule: d^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise ValueError(f"schedule step must be >= 1, got {step}")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_mode(cls, lr_mode: str) -> "AdamState":
        if lr_mode == "noam":
            return cls(beta1=0.9, beta2=0.98, eps=1e-9)
        return cls(beta1=0.9, beta2=0.999, eps=1e-8)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise TrainingError(
                f"gradient for {name!r} has shape {g.shape}, expected {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# data handling
# ---------------------------------------------------------------------------

def save_optimizer_state(path: str | Path, state: AdamState, config: Config) -> None:
    """Sidecar in the parameter-file format: moments plus the step counter."""
    tensors = {"step": Tensor(np.asarray(float(state.step)))}
    for name, m in state.m.items():
        tensors[f"m.{name}"] = Tensor(m)
    for name, v in state.v.items():
        tensors[f"v.{name}"] = Tensor(v)
    save_params(path, tensors, config)


def load_optimizer_state(path: str | Path, lr_mode: str) -> AdamState:
    from .model import load_params

    _, tensors = load_params(path)
    state = AdamState.for_mode(lr_mode)
    state.step = int(tensors.pop("step").data)
    for name, t in tensors.items():
        kind, _, param = name.partition(".")
        (state.m if kind == "m" else state.v)[param] = t.data.copy()
    return state


def chunk(dataset: list[Example], chunk_len: int) -> list[Example]:
    """Non-overlapping chunks; a final remainder shorter than
    MIN_CHUNK_FRAMES frames is dropped."""
    if chunk_len < 1:
        raise ValueError(f"chunk_len must be >= 1, got {chunk_len}")
    out = []
    for feats, labels in dataset:
        t = feats.shape[0]
        for start in range(0, t, chunk_len):
            stop = min(start + chunk_len, t)
            size = stop - start
            if size == chunk_len or size >= MIN_CHUNK_FRAMES:
                out.append((feats[start:stop], labels[start:stop]))
    return out


def load_example(wav_path: str | Path, rttm_path: str | Path,
                 n_speakers: int, subsample: int = 10) -> Example:
    """Features and frame labels for one recording, truncated to a common T.

    Labels rasterize the sidecar RTTM on the 10 ms grid covering the
    waveform, columns in sorted speaker-name order, zero-padded up to
    n_speakers columns; both streams are then subsampled by the same factor.
    """
    wave = read_wav(wav_path)
    feats = extract(wave, factor=subsample)
    n_frames = -(-len(wave.samples) // FRAME_SAMPLES)
    segments = []
    for segs in records_to_segments(parse_rttm(Path(rttm_path).read_text())).values():
        segments.extend(segs)
    mat, speakers = rasterize_segments(segments, n_frames, FRAME_PERIOD)
    if len(speakers) > n_speakers:
        raise TrainingError(
            f"{rttm_path}: {len(speakers)} speakers exceed model capacity {n_speakers}")
    if len(speakers) < n_speakers:
        pad = np.zeros((mat.shape[0], n_speakers - len(speakers)), dtype=mat.dtype)
        mat = np.concatenate([mat, pad], axis=1)
    labels = subsample_labels(LabelSequence(mat, FRAME_PERIOD), subsample)
    t = min(feats.num_frames, labels.num_frames)
    return feats.frames[:t], labels.matrix[:t].astype(np.float64)


def load_dataset(data_dir: str | Path, n_speakers: int = 2,
                 subsample: int = 10) -> list[Example]:
    """All WAV + sidecar RTTM pairs under a directory, in sorted name order."""
    root = Path(data_dir)
    wavs = sorted(root.glob("*.wav"))
    if not wavs:
        raise TrainingError(f"no .wav files found under {root}")
    out = []
    for wav in wavs:
        rttm = wav.with_suffix(".rttm")
        if not rttm.exists():
            raise TrainingError(f"missing sidecar reference {rttm}")
        out.append(load_example(wav, rttm, n_speakers, subsample))
    return out


def _pad_to(arr: np.ndarray, length: int) -> np.ndarray:
    if arr.shape[0] == length:
        return arr
    out = np.zeros((length,) + arr.shape[1:], dtype=arr.dtype)
    out[:arr.shape[0]] = arr
    return out


def _forward_loss(feats: np.ndarray, labels: np.ndarray, n_valid: int,
                  params: dict[str, Tensor], config: Config, alpha: float) -> Tensor:
    if isinstance(config, SaEendConfig):
        z, _ = sa_eend_forward(feats, params, config, n_valid=n_valid)
        return losses.permutation_free_loss(z, labels, n_valid=n_valid).loss
    z, emb = blstm_eend_forward(feats, params, config, n_valid=n_valid)
    pf = losses.permutation_free_loss(z, labels, n_valid=n_valid).loss
    # The raw Gram-matrix distance grows like T^2; normalize before blending
    # so both objectives stay on a per-frame scale.
    dc = tt.affine(losses.dc_loss(emb, labels, n_valid=n_valid), 1.0 / n_valid ** 2)
    return losses.multi_objective(pf, dc, alpha)


def _batch_loss(batch: list[Example], params: dict[str, Tensor], config: Config,
                alpha: float) -> Tensor:
    """Frame-weighted mean loss over a padded batch."""
    max_len = max(f.shape[0] for f, _ in batch)
    total = sum(f.shape[0] for f, _ in batch)
    parts = []
    for feats, labels in batch:
        n_valid = feats.shape[0]
        part = _forward_loss(_pad_to(feats, max_len), _pad_to(labels, max_len),
                             n_valid, params, config, alpha)
        parts.append(tt.affine(part, n_valid / total))
    out = parts[0]
    for part in parts[1:]:
        out = tt.add(out, part)
    return out


def validation_loss(dataset: list[Example], params: dict[str, Tensor],
                    config: Config) -> float:
    """Frame-weighted permutation-free BCE over whole recordings."""
    total_frames = 0
    total = 0.0
    with no_grad():
        for feats, labels in dataset:
            if isinstance(config, SaEendConfig):
                z, _ = sa_eend_forward(feats, params, config)
            else:
                z, _ = blstm_eend_forward(feats, params, config)
            pf = losses.permutation_free_loss(z, labels)
            total += float(pf.loss.data) * feats.shape[0]
            total_frames += feats.shape[0]
    return total / max(total_frames, 1)


# ---------------------------------------------------------------------------
# fit / adapt / averaging
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    valid_loss: float
    lr: float


@dataclass
class FitResult:
    history: list[EpochStats]
    checkpoints: list[dict[str, np.ndarray]]   # one parameter snapshot per epoch
    params: dict[str, Tensor]
    diverged: bool = False


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def fit(config: Config, train_cfg: TrainConfig, train_set: list[Example],
        valid_set: list[Example] | None = None,
        params: dict[str, Tensor] | None = None,
        out_dir: str | Path | None = None) -> FitResult:
    """Train a model; returns per-epoch stats and parameter snapshots.

    On a non-finite loss the run stops and keeps the checkpoints written so
    far (`diverged=True`). With out_dir set, per-epoch checkpoints and a
    history.csv (epoch, train_loss, valid_loss, lr) are written there.
    """
    if not train_set:
        raise TrainingError("training set is empty")
    if params is None:
        params = init_params(config, train_cfg.seed)
    state = AdamState.for_mode(train_cfg.lr_mode)
    chunks = chunk(train_set, train_cfg.chunk_len)
    order_rng = Rng(derive(train_cfg.seed, 1))
    d_model = config.model_dim if isinstance(config, SaEendConfig) else 2 * config.hidden

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    history: list[EpochStats] = []
    checkpoints: list[dict[str, np.ndarray]] = []
    diverged = False
    lr = 0.0
    for epoch in range(1, train_cfg.epochs + 1):
        idx = list(range(len(chunks)))
        order_rng.shuffle(idx)
        epoch_loss = 0.0
        epoch_frames = 0
        for start in range(0, len(idx), train_cfg.batch_size):
            batch = [chunks[i] for i in idx[start:start + train_cfg.batch_size]]
            zero_grads(params.values())
            loss = _batch_loss(batch, params, config, train_cfg.alpha)
            if not math.isfinite(float(loss.data)):
                log.error("non-finite loss at epoch %d; stopping", epoch)
                diverged = True
                break
            backward(loss)
            if train_cfg.lr_mode == "noam":
                lr = noam_lr(state.step + 1, d_model, train_cfg.warmup_steps)
            else:
                lr = train_cfg.lr
            adam_step(params, collect_grads(params), state, lr)
            frames = sum(f.shape[0] for f, _ in batch)
            epoch_loss += float(loss.data) * frames
            epoch_frames += frames
        if diverged:
            break
        train_loss = epoch_loss / max(epoch_frames, 1)
        valid = validation_loss(valid_set, params, config) if valid_set else math.nan
        history.append(EpochStats(epoch, train_loss, valid, lr))
        checkpoints.append(_snapshot(params))
        log.info("epoch %d train %.4f valid %.4f lr %.2e", epoch, train_loss, valid, lr)
        if out is not None:
            save_params(out / f"epoch{epoch:03d}.eend", params, config)
            save_optimizer_state(out / f"epoch{epoch:03d}.optim", state, config)
    if out is not None:
        with open(out / "history.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "valid_loss", "lr"])
            for h in history:
                w.writerow([h.epoch, f"{h.train_loss:.6f}", f"{h.valid_loss:.6f}",
                            f"{h.lr:.6e}"])
    return FitResult(history, checkpoints, params, diverged)


def average_models(checkpoints: list[dict[str, np.ndarray]]) -> dict[str, Tensor]:
    """Tensor-wise arithmetic mean of parameter snapshots.

    Computed as c0 + sum(ck - c0)/n, which is the same mean but exact when
    all checkpoints coincide (so a no-op training pass leaves parameters
    bit-identical after averaging).
    """
    if not checkpoints:
        raise ValueError("no checkpoints to average")
    keys = set(checkpoints[0])
    for ck in checkpoints[1:]:
        if set(ck) != keys:
            raise ValueError("checkpoints have mismatched parameter sets")
        for k in keys:
            if ck[k].shape != checkpoints[0][k].shape:
                raise ValueError(f"checkpoint shapes differ for {k!r}")
    out = {}
    n = len(checkpoints)
    for k in checkpoints[0]:
        base = checkpoints[0][k]
        delta = np.zeros_like(base)
        for ck in checkpoints[1:]:
            delta += ck[k] - base
        out[k] = Tensor(base + delta / n, requires_grad=True)
    return out


def averaged_from_fit(result: FitResult, last: int) -> dict[str, Tensor]:
    return average_models(result.checkpoints[-last:])


def adapt(params: dict[str, Tensor], config: Config, adapt_set: list[Example],
          lr: float = 1e-5, epochs: int = 100, train_cfg: TrainConfig | None = None,
          valid_set: list[Example] | None = None,
          out_dir: str | Path | None = None) -> tuple[dict[str, Tensor], FitResult]:
    """Retrain on a new domain at a fixed learning rate, then average the
    last checkpoints."""
    if not adapt_set:
        raise TrainingError("adaptation set is empty")
    base = train_cfg or TrainConfig()
    cfg = TrainConfig(
        batch_size=base.batch_size, epochs=epochs, chunk_len=base.chunk_len,
        warmup_steps=base.warmup_steps, lr_mode="fixed", lr=lr,
        average_last=base.average_last, alpha=base.alpha, seed=base.seed)
    start = {k: Tensor(p.data.copy(), requires_grad=True) for k, p in params.items()}
    result = fit(config, cfg, adapt_set, valid_set, params=start, out_dir=out_dir)
    n_avg = min(cfg.average_last, len(result.checkpoints))
    if n_avg == 0:
        raise TrainingError("adaptation produced no checkpoints")
    return average_models(result.checkpoints[-n_avg:]), result
