"""Command-line surface: simulate, train, adapt, infer, score, viz, gradcheck.

All randomness flows from the single --seed: the corpus stream is
derive(seed, 1), the mixture-set stream derive(seed, 2), and training uses
the seed directly, so every command is reproducible byte for byte. Exit
codes: 0 success, 1 runtime failure, 2 configuration or usage error.
EEND_LOG={error,info,debug} controls logging.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .audio import read_wav
from .config import ConfigError
from .features import extract
from .infer import DecisionConfig, diarize, export_attention, frames_to_segments
from .model import (
    BlstmConfig,
    SaEendConfig,
    load_params,
    save_params,
)
from .rng import derive
from .score import der, emit_rttm, parse_rttm, records_to_segments, segments_to_records
from .simulate import gen_corpus, mixture_specs, write_mixture_set
from .tensor import no_grad
from .train import TrainConfig, adapt, average_models, fit, load_dataset

log = logging.getLogger(__name__)


class UsageError(ValueError):
    pass


def _model_config(cfg: dict):
    in_dim = cfg["features.n_mels"] * (2 * cfg["features.splice"] + 1)
    if cfg["model.kind"] == "sa":
        return SaEendConfig(
            in_dim=in_dim, model_dim=cfg["model.dim"], heads=cfg["model.heads"],
            ffn_dim=cfg["model.ffn"], blocks=cfg["model.blocks"],
            speakers=cfg["model.speakers"], residual=cfg["model.residual"])
    if cfg["model.kind"] == "blstm":
        return BlstmConfig(
            in_dim=in_dim, layers=cfg["model.layers"], hidden=cfg["model.hidden"],
            dc_layer=cfg["model.dc_layer"], embed_dim=cfg["model.embed"],
            speakers=cfg["model.speakers"])
    raise ConfigError(f"model.kind must be sa or blstm, got {cfg['model.kind']!r}")


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg["train.batch"], epochs=cfg["train.epochs"],
        chunk_len=cfg["train.chunk"], warmup_steps=cfg["train.warmup"],
        lr_mode=cfg["train.lr_mode"], lr=cfg["train.lr"],
        average_last=cfg["train.average"], alpha=cfg["train.alpha"],
        seed=cfg["seed"])


def _corpus(cfg: dict):
    return gen_corpus(
        n_speakers=cfg["corpus.speakers"],
        utt_per_speaker=cfg["corpus.utts_per_speaker"],
        utt_dur_range=(cfg["corpus.utt_min"], cfg["corpus.utt_max"]),
        seed=derive(cfg["seed"], 1),
        n_noises=cfg["corpus.noises"], noise_dur=cfg["corpus.noise_dur"],
        n_rirs=cfg["corpus.rirs"], rir_dur=cfg["corpus.rir_dur"],
        rir_tail_amp=cfg["corpus.rir_tail"])


def cmd_simulate(args) -> int:
    cfg = cfgmod.resolve(args.config, args.set)
    if args.n is not None:
        cfg["simulate.n"] = args.n
    if args.beta is not None:
        cfg["simulate.beta"] = args.beta
    if args.seed is not None:
        cfg["seed"] = args.seed
    if cfg["simulate.beta"] <= 0:
        raise ConfigError(f"simulate.beta must be positive, got {cfg['simulate.beta']}")
    corpus = _corpus(cfg)
    specs = mixture_specs(
        cfg["simulate.n"], seed=derive(cfg["seed"], 2),
        n_spk=cfg["simulate.n_spk"], n_umin=cfg["simulate.umin"],
        n_umax=cfg["simulate.umax"], beta=cfg["simulate.beta"],
        snr_choices=cfg["simulate.snrs"])
    out = Path(args.out)
    meta = write_mixture_set(out, corpus, specs, jobs=args.jobs)
    cfgmod.write_resolved(cfg, out)
    ratios = [m["overlap_ratio"] for m in meta]
    log.info("wrote %d mixtures to %s (mean overlap %.3f)",
             len(meta), out, float(np.mean(ratios)))
    return 0


def _split_train_valid(dataset, frac: float):
    n_valid = max(1, int(round(len(dataset) * frac))) if len(dataset) > 1 else 0
    if n_valid == 0:
        return dataset, []
    return dataset[:-n_valid], dataset[-n_valid:]


def cmd_train(args) -> int:
    cfg = cfgmod.resolve(args.config, args.set)
    if args.epochs is not None:
        cfg["train.epochs"] = args.epochs
    if args.seed is not None:
        cfg["seed"] = args.seed
    model_cfg = _model_config(cfg)
    dataset = load_dataset(args.data, n_speakers=model_cfg.speakers,
                           subsample=cfg["features.subsample"])
    if args.valid_data:
        train_set, valid_set = dataset, load_dataset(
            args.valid_data, n_speakers=model_cfg.speakers,
            subsample=cfg["features.subsample"])
    else:
        train_set, valid_set = _split_train_valid(dataset, cfg["train.valid_frac"])
    out = Path(args.out)
    result = fit(model_cfg, _train_config(cfg), train_set, valid_set, out_dir=out)
    n_avg = min(cfg["train.average"], len(result.checkpoints))
    if n_avg == 0:
        log.error("training produced no checkpoints")
        return 1
    averaged = average_models(result.checkpoints[-n_avg:])
    save_params(out / "averaged.eend", averaged, model_cfg)
    cfgmod.write_resolved(cfg, out)
    if result.diverged:
        log.error("training diverged; last finite checkpoint retained")
        return 1
    return 0


def cmd_adapt(args) -> int:
    cfg = cfgmod.resolve(args.config, args.set)
    if args.seed is not None:
        cfg["seed"] = args.seed
    model_cfg, params = load_params(args.model)
    dataset = load_dataset(args.data, n_speakers=model_cfg.speakers,
                           subsample=cfg["features.subsample"])
    out = Path(args.out)
    lr = args.lr if args.lr is not None else cfg["adapt.lr"]
    epochs = args.epochs if args.epochs is not None else cfg["adapt.epochs"]
    adapted, result = adapt(params, model_cfg, dataset, lr=lr, epochs=epochs,
                            train_cfg=_train_config(cfg), out_dir=out)
    save_params(out / "adapted.eend", adapted, model_cfg)
    cfgmod.write_resolved(cfg, out)
    return 1 if result.diverged else 0


def _collect_wavs(paths: list[str]) -> list[Path]:
    out = []
    for p in paths:
        path = Path(p)
        if path.is_dir():
            out.extend(sorted(path.glob("*.wav")))
        elif path.exists():
            out.append(path)
        else:
            raise UsageError(f"no such wav file or directory: {p}")
    if not out:
        raise UsageError("no input wav files")
    return out


def cmd_infer(args) -> int:
    cfg = cfgmod.resolve(args.config, args.set)
    model_cfg, params = load_params(args.model)
    threshold = args.threshold if args.threshold is not None else cfg["infer.threshold"]
    median = args.median if args.median is not None else cfg["infer.median"]
    decision = DecisionConfig(threshold=threshold, median_window=median)
    from .model import forward
    records = []
    for wav_path in _collect_wavs(args.wavs):
        feats = extract(read_wav(wav_path), n_mels=cfg["features.n_mels"],
                        left=cfg["features.splice"], right=cfg["features.splice"],
                        factor=cfg["features.subsample"])
        with no_grad():
            z = forward(feats.frames, params, model_cfg)
        labels = diarize(z.data, decision, frame_period=feats.frame_period)
        hyp = frames_to_segments(labels, recording_id=wav_path.stem)
        records.extend(segments_to_records(wav_path.stem, hyp.segments))
        log.info("%s: %d segments", wav_path.stem,
                 sum(1 for r in records if r.file_id == wav_path.stem))
    Path(args.out).write_text(emit_rttm(records))
    return 0


def _read_rttm_source(path_str: str) -> tuple[dict, bool]:
    """Segments by recording id, plus whether the source was a directory.

    In a directory, every per-recording file declares its recording (stem)
    even when it holds no segments; a single file only declares the ids it
    mentions.
    """
    path = Path(path_str)
    if path.is_dir():
        segments: dict = {}
        for p in sorted(path.glob("*.rttm")):
            segments.setdefault(p.stem, [])
            for rec_id, segs in records_to_segments(parse_rttm(p.read_text())).items():
                segments.setdefault(rec_id, []).extend(segs)
        return segments, True
    if path.exists():
        return records_to_segments(parse_rttm(path.read_text())), False
    raise UsageError(f"no such RTTM file or directory: {path_str}")


def cmd_score(args) -> int:
    cfg = cfgmod.resolve(args.config, args.set)
    collar = args.collar if args.collar is not None else cfg["score.collar"]
    ref, _ = _read_rttm_source(args.ref)
    hyp, hyp_is_dir = _read_rttm_source(args.hyp)
    extra = sorted(set(hyp) - set(ref))
    if extra:
        raise UsageError(f"hypothesis contains unknown recording ids: {extra}")
    missing = sorted(set(ref) - set(hyp))
    if missing and hyp_is_dir:
        raise UsageError(f"hypothesis is missing recordings: {missing}")
    for rec_id in missing:
        # a single hypothesis file cannot declare silent recordings; score
        # them as empty (all miss)
        hyp[rec_id] = []
    try:
        report = der(ref, hyp, collar=collar, frame_step=cfg["score.step"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(report.as_table())
    print(report.as_json())
    if args.json_out:
        Path(args.json_out).write_text(report.as_json() + "\n")
    return 0


def cmd_viz(args) -> int:
    cfg = cfgmod.resolve(args.config, args.set)
    model_cfg, params = load_params(args.model)
    if not isinstance(model_cfg, SaEendConfig):
        raise UsageError("attention visualization requires a self-attention model")
    feats = extract(read_wav(args.wav), n_mels=cfg["features.n_mels"],
                    left=cfg["features.splice"], right=cfg["features.splice"],
                    factor=cfg["features.subsample"])
    paths = export_attention(feats.frames, params, model_cfg, args.block, args.out)
    log.info("wrote %d attention files to %s", len(paths), args.out)
    return 0


def cmd_gradcheck(args) -> int:
    from .loss import dc_loss, permutation_free_loss
    from .model import blstm_eend_forward, init_params, sa_eend_forward
    from .tensor import affine, grad_check

    rng = np.random.default_rng(0)
    worst = {}

    sa_cfg = SaEendConfig(in_dim=16, model_dim=16, heads=4, ffn_dim=24, blocks=1)
    sa_params = init_params(sa_cfg, 0)
    x = rng.standard_normal((6, 16))
    labels = (rng.uniform(size=(6, 2)) > 0.5).astype(float)

    def block_loss():
        z, _ = sa_eend_forward(x, sa_params, sa_cfg)
        return permutation_free_loss(z, labels).loss

    worst["encoder block + permutation-free loss"] = grad_check(
        block_loss, sa_params, eps=1e-5, max_coords=4)

    full_cfg = SaEendConfig(in_dim=16, model_dim=16, heads=4, ffn_dim=24, blocks=2)
    full_params = init_params(full_cfg, 1)
    x2 = rng.standard_normal((8, 16))
    labels2 = (rng.uniform(size=(8, 2)) > 0.5).astype(float)

    def full_loss():
        z, _ = sa_eend_forward(x2, full_params, full_cfg)
        return permutation_free_loss(z, labels2).loss

    worst["2-block network + permutation-free loss"] = grad_check(
        full_loss, full_params, eps=1e-5, max_coords=3)

    bl_cfg = BlstmConfig(in_dim=8, layers=1, hidden=6, dc_layer=1, embed_dim=6)
    bl_params = init_params(bl_cfg, 2)
    x3 = rng.standard_normal((5, 8))
    labels3 = (rng.uniform(size=(5, 2)) > 0.5).astype(float)

    def blstm_loss():
        _, emb = blstm_eend_forward(x3, bl_params, bl_cfg)
        return affine(dc_loss(emb, labels3), 0.1)

    worst["BLSTM layer + clustering loss"] = grad_check(
        blstm_loss, bl_params, eps=1e-5, max_coords=4)

    ok = True
    for name, err in worst.items():
        status = "ok" if err < 1e-4 else "FAIL"
        print(f"{name}: max relative error {err:.3e} [{status}]")
        ok = ok and err < 1e-4
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eend",
        description="End-to-end neural diarization toolkit")
    parser.add_argument("--version", action="version", version=f"eend {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one configuration key")

    p = sub.add_parser("simulate", help="generate a synthetic mixture set")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("-n", type=int, default=None, help="number of mixtures")
    p.add_argument("--beta", type=float, default=None, help="average silence interval")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a diarization model")
    common(p)
    p.add_argument("--data", required=True, help="directory of wav + rttm pairs")
    p.add_argument("--valid-data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="retrain a model on a new domain")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("infer", help="diarize wav files into an RTTM")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("wavs", nargs="+", help="wav files or directories")
    p.add_argument("--out", required=True, help="output RTTM path")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--median", type=int, default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("score", help="score hypothesis RTTM against reference")
    common(p)
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--collar", type=float, default=None)
    p.add_argument("--json-out", default=None)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("viz", help="export attention heatmaps")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("wav")
    p.add_argument("--block", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("gradcheck", help="check gradients against finite differences")
    common(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("EEND_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError, ValueError) as exc:
        if isinstance(exc, (ConfigError, UsageError)):
            print(f"error: {exc}", file=sys.stderr)
            return 2
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:   # runtime failures
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
