"""Diarization-style multi-speaker mixture simulation.

A synthetic desk-scale corpus stands in for real speech: each speaker is a
harmonic source at a speaker-specific fundamental, shaped by formant-like
resonances and a spectral tilt, amplitude-modulated at a syllabic rate.
Background noises are spectrally colored noise; room impulse responses are a
unit impulse followed by an exponentially decaying noise tail.

Mixtures are scheduled per speaker as alternating exponential(beta) silences
and utterances (an exponential gap precedes every utterance, including the
first), convolved with a per-speaker RIR, summed after zero-padding to the
longest track, and overlaid with repeated background noise scaled to a target
SNR measured over speech-active samples. Frame labels live on a 10 ms grid;
a frame is active for a speaker when at least half of it lies inside one of
that speaker's utterances (integer sample arithmetic, so labeling is exact).

All sampling comes from per-mixture splitmix64 streams seeded with
derive(global_seed, mixture_index), so generation is reproducible and
parallelizable. The sampling order inside one mixture is fixed: speakers,
then per speaker (RIR, utterance count, starting utterance, per-utterance
gap), then noise index, then SNR.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import Waveform, write_wav
from .rng import Rng, derive

SAMPLE_RATE = 8000
FRAME_PERIOD = 0.01
FRAME_SAMPLES = int(round(FRAME_PERIOD * SAMPLE_RATE))


class CapacityError(RuntimeError):
    """The corpus cannot satisfy the requested mixture."""


@dataclass
class LabelSequence:
    """Per-frame, per-speaker binary activity on a fixed frame grid."""
    matrix: np.ndarray       # (T, C) uint8
    frame_period: float

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.uint8)
        if self.matrix.ndim != 2 or self.matrix.shape[1] < 1:
            raise ValueError(f"label matrix must be (T, C), got {self.matrix.shape}")
        if not np.all((self.matrix == 0) | (self.matrix == 1)):
            raise ValueError("labels must be binary")
        if self.frame_period <= 0:
            raise ValueError(f"frame_period must be positive, got {self.frame_period}")

    @property
    def num_frames(self) -> int:
        return self.matrix.shape[0]

    @property
    def num_speakers(self) -> int:
        return self.matrix.shape[1]


def overlap_ratio(labels: LabelSequence) -> float:
    """Fraction of speech frames during which two or more speakers are active."""
    counts = labels.matrix.sum(axis=1)
    speech = int((counts >= 1).sum())
    if speech == 0:
        return 0.0
    return int((counts >= 2).sum()) / speech


def subsample_labels(labels: LabelSequence, factor: int = 10) -> LabelSequence:
    """Same index-selection rule as feature subsampling, keeping alignment."""
    if factor < 1:
        raise ValueError(f"subsample factor must be >= 1, got {factor}")
    return LabelSequence(labels.matrix[::factor].copy(), labels.frame_period * factor)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

@dataclass
class SpeakerProfile:
    id: str
    f0: float                                   # fundamental, Hz
    formants: tuple[tuple[float, float], ...]   # (center Hz, bandwidth Hz)
    tilt: float                                 # harmonic roll-off exponent
    syllable_rate: float                        # Hz


@dataclass
class Corpus:
    speakers: list[SpeakerProfile]
    utterances: list[list[np.ndarray]]   # utterances[i] belongs to speakers[i]
    noises: list[np.ndarray]
    rirs: list[np.ndarray]
    sample_rate: int = SAMPLE_RATE


def _spectral_envelope(freqs: np.ndarray, profile: SpeakerProfile) -> np.ndarray:
    env = np.full_like(freqs, 0.05)
    for center, bw in profile.formants:
        env += 1.0 / (1.0 + ((freqs - center) / bw) ** 2)
    return env


def synth_utterance(profile: SpeakerProfile, n_samples: int, rng: Rng,
                    sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """One voiced utterance: harmonics at k*f0 under the speaker envelope."""
    t = np.arange(n_samples) / sample_rate
    vib_phase = rng.uniform(0.0, 2 * math.pi)
    inst_f0 = profile.f0 * (1.0 + 0.01 * np.sin(2 * np.pi * 4.0 * t + vib_phase))
    phase = 2 * np.pi * np.cumsum(inst_f0) / sample_rate
    n_harm = max(1, int(3600.0 / profile.f0))
    amps = _spectral_envelope(np.arange(1, n_harm + 1) * profile.f0, profile)
    amps = amps / (np.arange(1, n_harm + 1) ** profile.tilt)
    sig = np.zeros(n_samples)
    for k in range(1, n_harm + 1):
        sig += amps[k - 1] * np.sin(k * phase + rng.uniform(0.0, 2 * math.pi))
    am_phase = rng.uniform(0.0, 2 * math.pi)
    sig *= 0.55 + 0.45 * np.sin(2 * np.pi * profile.syllable_rate * t + am_phase)
    ramp = min(int(0.010 * sample_rate), n_samples // 2)
    if ramp > 0:
        w = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        sig[:ramp] *= w
        sig[-ramp:] *= w[::-1]
    peak = np.max(np.abs(sig))
    if peak > 0:
        sig *= 0.25 / peak
    return sig


def _colored_noise(n_samples: int, rng: Rng, sample_rate: int) -> np.ndarray:
    white = rng.normal_array(n_samples)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n_samples, 1.0 / sample_rate)
    spec *= 1.0 / np.sqrt(1.0 + freqs / 200.0)
    out = np.fft.irfft(spec, n=n_samples)
    return out / max(np.sqrt(np.mean(out ** 2)), 1e-12)


def _make_rir(rng: Rng, dur: float, tail_amp: float, sample_rate: int) -> np.ndarray:
    n = max(1, int(dur * sample_rate))
    rir = np.zeros(n)
    rir[0] = 1.0
    if n > 1 and tail_amp > 0:
        tau = rng.uniform(0.005, 0.02) * sample_rate
        rir[1:] = tail_amp * np.exp(-np.arange(1, n) / tau) * rng.normal_array(n - 1)
    peak = np.max(np.abs(rir))
    return rir / peak


def gen_corpus(n_speakers: int = 16, utt_per_speaker: int = 10,
               utt_dur_range: tuple[float, float] = (1.5, 2.5), seed: int = 0,
               n_noises: int = 4, noise_dur: float = 5.0,
               n_rirs: int = 8, rir_dur: float = 0.05, rir_tail_amp: float = 0.25,
               f0_range: tuple[float, float] = (90.0, 315.0),
               sample_rate: int = SAMPLE_RATE) -> Corpus:
    """Deterministic synthetic corpus of speakers, noises and RIRs.

    Fundamentals are laid out on an even grid over f0_range with +-2 Hz
    per-speaker jitter, so any two speakers differ by at least 10 Hz; the
    speaker count is capped accordingly.
    """
    if n_speakers < 2:
        raise ValueError(f"need at least 2 speakers for diarization, got {n_speakers}")
    if not (0 < utt_dur_range[0] < utt_dur_range[1]):
        raise ValueError(f"degenerate utterance duration range {utt_dur_range}")
    lo, hi = f0_range
    step = (hi - lo) / (n_speakers - 1) if n_speakers > 1 else hi - lo
    if step < 14.0:
        raise ValueError(
            f"{n_speakers} speakers over f0 range {f0_range} cannot keep "
            f"fundamentals 10 Hz apart")

    rng = Rng(derive(seed, 0))
    speakers: list[SpeakerProfile] = []
    utterances: list[list[np.ndarray]] = []
    order = list(range(n_speakers))
    rng.shuffle(order)
    for i in range(n_speakers):
        f0 = lo + order[i] * step + rng.uniform(-2.0, 2.0)
        formants = tuple(
            (rng.uniform(flo, fhi), rng.uniform(60.0, 140.0))
            for flo, fhi in ((300, 850), (900, 2100), (2200, 3400)))
        profile = SpeakerProfile(
            id=f"s{i:03d}", f0=f0, formants=formants,
            tilt=rng.uniform(0.4, 1.0), syllable_rate=rng.uniform(2.5, 5.0))
        speakers.append(profile)
        utt_rng = Rng(derive(seed, 1000 + i))
        utts = []
        for _ in range(utt_per_speaker):
            dur = utt_rng.uniform(*utt_dur_range)
            utts.append(synth_utterance(profile, int(round(dur * sample_rate)),
                                        utt_rng, sample_rate))
        utterances.append(utts)

    noise_rng = Rng(derive(seed, 2))
    noises = [_colored_noise(int(noise_dur * sample_rate), noise_rng, sample_rate)
              for _ in range(n_noises)]
    rir_rng = Rng(derive(seed, 3))
    rirs = [_make_rir(rir_rng, rir_dur, rir_tail_amp, sample_rate)
            for _ in range(n_rirs)]
    return Corpus(speakers, utterances, noises, rirs, sample_rate)


# ---------------------------------------------------------------------------
# mixture planning and rendering
# ---------------------------------------------------------------------------

@dataclass
class MixtureSpec:
    n_spk: int = 2
    n_umin: int = 10
    n_umax: int = 20
    beta: float = 2.0
    snr_choices: tuple[float, ...] = (10.0, 15.0, 20.0)   # dB; math.inf = clean
    seed: int = 0

    def __post_init__(self):
        if self.n_spk < 1:
            raise ValueError(f"n_spk must be >= 1, got {self.n_spk}")
        if not (1 <= self.n_umin <= self.n_umax):
            raise ValueError(
                f"need 1 <= n_umin <= n_umax, got {self.n_umin}, {self.n_umax}")
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not self.snr_choices:
            raise ValueError("snr_choices must be non-empty")


@dataclass
class UtteranceEvent:
    column: int        # label column / track index
    speaker: int       # corpus speaker index
    utterance: int     # index into the speaker's utterance list
    onset: int         # samples
    length: int        # samples, after RIR convolution


@dataclass
class MixturePlan:
    spec: MixtureSpec
    speaker_indices: list[int]
    rir_indices: list[int]
    events: list[UtteranceEvent]
    total_samples: int
    noise_index: int
    snr: float


@dataclass
class Mixture:
    wave: Waveform
    labels: LabelSequence
    speakers: list[str]
    beta: float
    snr: float
    seed: int


def plan_mixture(spec: MixtureSpec, corpus: Corpus) -> MixturePlan:
    """Sample the full schedule of one mixture without rendering audio."""
    rng = Rng(spec.seed)
    if spec.n_spk > len(corpus.speakers):
        raise CapacityError(
            f"mixture wants {spec.n_spk} speakers, corpus has {len(corpus.speakers)}")
    speaker_indices = rng.sample(range(len(corpus.speakers)), spec.n_spk)
    sr = corpus.sample_rate
    events: list[UtteranceEvent] = []
    rir_indices: list[int] = []
    track_ends: list[int] = []
    for col, si in enumerate(speaker_indices):
        utts = corpus.utterances[si]
        if len(utts) < spec.n_umax:
            raise CapacityError(
                f"speaker {corpus.speakers[si].id} has {len(utts)} utterances, "
                f"mixture needs up to {spec.n_umax}")
        ri = rng.randint(len(corpus.rirs))
        rir_indices.append(ri)
        rir_len = len(corpus.rirs[ri])
        n_u = spec.n_umin + rng.randint(spec.n_umax - spec.n_umin + 1)
        start = rng.randint(len(utts))
        t = 0
        for u in range(n_u):
            t += int(round(rng.exponential(spec.beta) * sr))
            ui = (start + u) % len(utts)
            length = len(utts[ui]) + rir_len - 1
            events.append(UtteranceEvent(col, si, ui, t, length))
            t += length
        track_ends.append(t)
    total = max(track_ends)
    noise_index = rng.randint(len(corpus.noises))
    snr = rng.choice(list(spec.snr_choices))
    return MixturePlan(spec, speaker_indices, rir_indices, events, total, noise_index, snr)


def labels_from_plan(plan: MixturePlan) -> LabelSequence:
    """Rasterize scheduled utterances onto the 10 ms grid (half-frame rule)."""
    fs = FRAME_SAMPLES
    n_frames = (plan.total_samples + fs - 1) // fs
    mat = np.zeros((n_frames, plan.spec.n_spk), dtype=np.uint8)
    for ev in plan.events:
        s, e = ev.onset, ev.onset + ev.length
        first, last = s // fs, (e - 1) // fs
        for k in (first, last):
            cov = min(e, (k + 1) * fs) - max(s, k * fs)
            if 2 * cov >= fs:
                mat[k, ev.column] = 1
        if last - first > 1:
            mat[first + 1:last, ev.column] = 1
    return LabelSequence(mat, FRAME_PERIOD)


def render_mixture(plan: MixturePlan, corpus: Corpus) -> np.ndarray:
    """Waveform for a plan: per-speaker tracks, summed, plus scaled noise."""
    total = plan.total_samples
    mix = np.zeros(total)
    active = np.zeros(total, dtype=bool)
    for col, ri in enumerate(plan.rir_indices):
        rir = corpus.rirs[ri]
        for ev in plan.events:
            if ev.column != col:
                continue
            utt = corpus.utterances[ev.speaker][ev.utterance]
            mix[ev.onset:ev.onset + ev.length] += np.convolve(utt, rir)
            active[ev.onset:ev.onset + ev.length] = True
    if math.isfinite(plan.snr):
        noise = corpus.noises[plan.noise_index]
        reps = -(-total // len(noise))
        tiled = np.tile(noise, reps)[:total]
        p_speech = float(np.mean(mix[active] ** 2))
        p_noise = float(np.mean(tiled[active] ** 2))
        scale = math.sqrt(p_speech / (p_noise * 10.0 ** (plan.snr / 10.0)))
        mix = mix + scale * tiled
    return mix


def simulate_mixture(spec: MixtureSpec, corpus: Corpus) -> Mixture:
    plan = plan_mixture(spec, corpus)
    wave = Waveform(render_mixture(plan, corpus), corpus.sample_rate)
    return Mixture(
        wave=wave,
        labels=labels_from_plan(plan),
        speakers=[corpus.speakers[i].id for i in plan.speaker_indices],
        beta=spec.beta,
        snr=plan.snr,
        seed=spec.seed,
    )


# ---------------------------------------------------------------------------
# on-disk mixture sets
# ---------------------------------------------------------------------------

def mixture_specs(n: int, seed: int, **kwargs) -> list[MixtureSpec]:
    """n specs whose seeds derive from a single global seed."""
    return [MixtureSpec(seed=derive(seed, i), **kwargs) for i in range(n)]


_WORKER_CORPUS: Corpus | None = None


def _pool_init(corpus: Corpus) -> None:
    global _WORKER_CORPUS
    _WORKER_CORPUS = corpus


def _render_task(task: tuple) -> dict:
    out_dir, rec_id, spec = task
    return _write_one(Path(out_dir), _WORKER_CORPUS, rec_id, spec)


def _write_one(out: Path, corpus: Corpus, rec_id: str, spec: MixtureSpec) -> dict:
    from .infer import frames_to_segments
    from .score import emit_rttm, segments_to_records

    mix = simulate_mixture(spec, corpus)
    write_wav(out / f"{rec_id}.wav", mix.wave)
    hyp = frames_to_segments(mix.labels, speaker_names=mix.speakers,
                             recording_id=rec_id)
    (out / f"{rec_id}.rttm").write_text(
        emit_rttm(segments_to_records(rec_id, hyp.segments)))
    return {
        "id": rec_id,
        "seed": spec.seed,
        "beta": spec.beta,
        "snr": mix.snr if math.isfinite(mix.snr) else "inf",
        "speakers": mix.speakers,
        "overlap_ratio": overlap_ratio(mix.labels),
    }


def write_mixture_set(out_dir: str | Path, corpus: Corpus, specs: list[MixtureSpec],
                      prefix: str = "mix", jobs: int = 1) -> list[dict]:
    """Render specs to WAV + sidecar RTTM + metadata.jsonl; returns metadata.

    The reference RTTM is grid-aligned: segments are the maximal label runs,
    so rasterizing it back at 10 ms reproduces the label matrix exactly.
    Each mixture is self-seeded, so jobs > 1 renders them in parallel with
    byte-identical results.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(str(out), f"{prefix}_{i:05d}", spec) for i, spec in enumerate(specs)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs, initializer=_pool_init,
                                 initargs=(corpus,)) as pool:
            records = list(pool.map(_render_task, tasks))
    else:
        records = [_write_one(out, corpus, rec_id, spec)
                   for _, rec_id, spec in tasks]
    with open(out / "metadata.jsonl", "w") as fh:
        for meta in records:
            fh.write(json.dumps(meta) + "\n")
    return records
