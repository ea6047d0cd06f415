"""From frame posteriors to diarization decisions.

Posteriors are thresholded per frame and speaker (>= at the boundary), each
speaker column is median-filtered to suppress implausibly short segments
(edge frames shrink the window symmetrically to the available context), and
maximal runs of active frames become time-stamped segments. Attention-weight
matrices can be exported as PGM heatmaps plus raw CSV for inspection.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import SaEendConfig, sa_eend_forward
from .simulate import LabelSequence
from .tensor import Tensor, no_grad


@dataclass
class DecisionConfig:
    threshold: float = 0.5
    median_window: int = 11

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.median_window < 1 or self.median_window % 2 == 0:
            raise ValueError(
                f"median window must be odd and >= 1, got {self.median_window}")


Segment = tuple[str, float, float]   # speaker, start seconds, end seconds


@dataclass
class DiarizationHypothesis:
    recording_id: str
    segments: list[Segment] = field(default_factory=list)

    def __post_init__(self):
        per_spk: dict[str, list[tuple[float, float]]] = {}
        for spk, start, end in self.segments:
            if end <= start:
                raise ValueError(f"segment ({spk}, {start}, {end}) has end <= start")
            per_spk.setdefault(spk, []).append((start, end))
        for spk, segs in per_spk.items():
            segs.sort()
            for (s1, e1), (s2, e2) in zip(segs, segs[1:]):
                if s2 < e1:
                    raise ValueError(f"speaker {spk} segments overlap: "
                                     f"({s1}, {e1}) and ({s2}, {e2})")

    def speech_time(self) -> float:
        return sum(e - s for _, s, e in self.segments)


def threshold_decisions(z: np.ndarray | Tensor, threshold: float = 0.5,
                        frame_period: float = 0.1) -> LabelSequence:
    """Activity is 1 wherever the posterior is >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    zd = z.data if isinstance(z, Tensor) else np.asarray(z)
    return LabelSequence((zd >= threshold).astype(np.uint8), frame_period)


def median_filter(labels: LabelSequence, window: int = 11) -> LabelSequence:
    """Majority vote in a centered window, per speaker column.

    Near the edges the window shrinks symmetrically to the frames available,
    so it always stays odd and centered.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"median window must be odd and >= 1, got {window}")
    mat = labels.matrix
    t = mat.shape[0]
    half = np.minimum(window // 2, np.minimum(np.arange(t), t - 1 - np.arange(t)))
    cum = np.zeros((t + 1, mat.shape[1]), dtype=np.int64)
    np.cumsum(mat, axis=0, out=cum[1:])
    lo = np.arange(t) - half
    hi = np.arange(t) + half + 1
    ones = cum[hi] - cum[lo]
    out = (2 * ones > (hi - lo)[:, None]).astype(np.uint8)
    return LabelSequence(out, labels.frame_period)


def frames_to_segments(labels: LabelSequence, speaker_names: list[str] | None = None,
                       recording_id: str = "rec") -> DiarizationHypothesis:
    """Maximal runs of active frames as [i*fp, (j+1)*fp) segments."""
    fp = labels.frame_period
    if speaker_names is None:
        speaker_names = [f"spk{c}" for c in range(labels.num_speakers)]
    segments: list[Segment] = []
    for c in range(labels.num_speakers):
        col = labels.matrix[:, c]
        edges = np.flatnonzero(np.diff(np.concatenate(([0], col, [0]))))
        for start, end in zip(edges[::2], edges[1::2]):
            segments.append((speaker_names[c], start * fp, end * fp))
    return DiarizationHypothesis(recording_id, segments)


def diarize(z: np.ndarray | Tensor, decision: DecisionConfig = DecisionConfig(),
            frame_period: float = 0.1) -> LabelSequence:
    """threshold + median filtering in one step."""
    return median_filter(threshold_decisions(z, decision.threshold, frame_period),
                         decision.median_window)


# ---------------------------------------------------------------------------
# attention export
# ---------------------------------------------------------------------------

def _write_pgm(path: Path, matrix: np.ndarray, binary: bool = True) -> None:
    peak = float(matrix.max())
    scaled = np.zeros(matrix.shape, dtype=np.uint8) if peak <= 0 else \
        np.clip(np.rint(matrix * (255.0 / peak)), 0, 255).astype(np.uint8)
    h, w = scaled.shape
    if binary:
        path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + scaled.tobytes())
    else:
        body = "\n".join(" ".join(str(v) for v in line) for line in scaled)
        path.write_text(f"P2\n{w} {h}\n255\n{body}\n")


def export_attention(x: np.ndarray, params: dict[str, Tensor], config: SaEendConfig,
                     block: int, out_dir: str | Path, binary_pgm: bool = True
                     ) -> list[Path]:
    """Write each head's attention matrix of one block as PGM + CSV.

    `block` is 1-indexed. Returns the paths written (PGM then CSV per head).
    """
    if not 1 <= block <= config.blocks:
        raise ValueError(f"block must be in 1..{config.blocks}, got {block}")
    with no_grad():
        _, attentions = sa_eend_forward(x, params, config)
    heads = attentions[block - 1]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for h in range(heads.shape[0]):
        pgm = out / f"block{block}_head{h + 1}.pgm"
        _write_pgm(pgm, heads[h], binary_pgm)
        csv = out / f"block{block}_head{h + 1}.csv"
        np.savetxt(csv, heads[h], delimiter=",", fmt="%.17g")
        paths.extend([pgm, csv])
    return paths
