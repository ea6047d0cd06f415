"""RTTM files and collar-tolerant diarization error rate.

Scoring rasterizes reference and hypothesis segments onto a 10 ms grid using
integer nanosecond arithmetic (a frame belongs to a speaker when at least
half of it is covered by that speaker's segments), excludes frames whose
midpoints fall strictly within +-collar of any reference segment boundary,
and finds the error-minimizing one-to-one speaker mapping by exhaustive
search. Misses, false alarms and confusions are reported as percentages of
total reference speaker time; speech-activity miss/false-alarm percentages
use reference speech time (frames with any active speaker) as denominator.
`scored_time` is the reference speaker time inside the scored region, in
seconds (the DER denominator). Totals aggregate over recordings with one
speaker mapping per recording, reduced in sorted recording-id order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from itertools import permutations

import numpy as np

NS = 1_000_000_000
MAPPING_CAP = 8


class RttmError(ValueError):
    pass


@dataclass
class RttmRecord:
    file_id: str
    channel: str
    onset: float
    duration: float
    speaker: str

    def __post_init__(self):
        if self.duration <= 0:
            raise RttmError(f"duration must be positive, got {self.duration}")
        if self.onset < 0:
            raise RttmError(f"onset must be >= 0, got {self.onset}")


def parse_rttm(text: str) -> list[RttmRecord]:
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith(";"):
            continue
        parts = line.split()
        if len(parts) != 10 or parts[0] != "SPEAKER":
            raise RttmError(
                f"line {lineno}: expected 10 fields starting with SPEAKER, "
                f"got {len(parts)}: {line.strip()!r}")
        try:
            onset, dur = float(parts[3]), float(parts[4])
        except ValueError:
            raise RttmError(f"line {lineno}: non-numeric onset/duration") from None
        try:
            records.append(RttmRecord(parts[1], parts[2], onset, dur, parts[7]))
        except RttmError as exc:
            raise RttmError(f"line {lineno}: {exc}") from None
    return records


def emit_rttm(records: list[RttmRecord]) -> str:
    lines = [
        f"SPEAKER {r.file_id} {r.channel} {r.onset:.3f} {r.duration:.3f} "
        f"<NA> <NA> {r.speaker} <NA> <NA>"
        for r in records
    ]
    return "".join(line + "\n" for line in lines)


def segments_to_records(file_id: str, segments) -> list[RttmRecord]:
    """(speaker, start, end) triples to RTTM records, sorted by time."""
    recs = [RttmRecord(file_id, "1", start, end - start, spk)
            for spk, start, end in segments]
    recs.sort(key=lambda r: (r.onset, r.speaker))
    return recs


def records_to_segments(records: list[RttmRecord]) -> dict[str, list]:
    """Group records into {file_id: [(speaker, start, end), ...]}."""
    out: dict[str, list] = {}
    for r in records:
        out.setdefault(r.file_id, []).append((r.speaker, r.onset, r.onset + r.duration))
    return out


# ---------------------------------------------------------------------------
# frame rasterization (integer nanoseconds, exact)
# ---------------------------------------------------------------------------

def rasterize_segments(segments, n_frames: int, frame_period: float = 0.01
                       ) -> tuple[np.ndarray, list[str]]:
    """Binary (n_frames, n_speakers) activity; speakers in sorted name order.

    A frame counts as active when the speaker's merged segments cover at
    least half of it.
    """
    fp = round(frame_period * NS)
    speakers = sorted({spk for spk, _, _ in segments})
    index = {s: i for i, s in enumerate(speakers)}
    mat = np.zeros((n_frames, len(speakers)), dtype=np.uint8)
    cover = {s: [] for s in speakers}
    for spk, start, end in segments:
        cover[spk].append((round(start * NS), round(end * NS)))
    for spk, ivs in cover.items():
        ivs.sort()
        merged = []
        for s, e in ivs:
            if merged and s <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(merged[-1][1], e))
            else:
                merged.append((s, e))
        col = index[spk]
        for s, e in merged:
            if e <= s:
                continue
            first, last = s // fp, (e - 1) // fp
            for k in (first, last):
                if 0 <= k < n_frames:
                    cov = min(e, (k + 1) * fp) - max(s, k * fp)
                    if 2 * cov >= fp:
                        mat[k, col] = 1
            if last - first > 1:
                mat[max(first + 1, 0):min(last, n_frames), col] = 1
    return mat, speakers


def _collar_mask(segments, n_frames: int, collar: float, frame_period: float
                 ) -> np.ndarray:
    """True where a frame is scored (midpoint strictly outside all collars)."""
    scored = np.ones(n_frames, dtype=bool)
    if collar <= 0:
        return scored
    fp = round(frame_period * NS)
    col = round(collar * NS)
    half = fp // 2
    for _, start, end in segments:
        for b in (round(start * NS), round(end * NS)):
            # frame midpoint k*fp + half lies in (b - col, b + col)
            k_min = (b - col - half) // fp + 1
            k_max = -((-(b + col - half)) // fp) - 1
            if k_max >= 0 and k_min < n_frames:
                scored[max(k_min, 0):min(k_max, n_frames - 1) + 1] = False
    return scored


# ---------------------------------------------------------------------------
# DER
# ---------------------------------------------------------------------------

@dataclass
class DerReport:
    der: float
    miss: float
    false_alarm: float
    confusion: float
    sad_miss: float
    sad_fa: float
    scored_time: float

    def as_dict(self) -> dict:
        return {
            "der": self.der, "mi": self.miss, "fa": self.false_alarm,
            "cf": self.confusion, "sad_mi": self.sad_miss, "sad_fa": self.sad_fa,
            "scored_time": self.scored_time,
        }

    def as_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)

    def as_table(self) -> str:
        rows = [
            ("DER", self.der), ("  miss", self.miss),
            ("  false alarm", self.false_alarm), ("  confusion", self.confusion),
            ("SAD miss", self.sad_miss), ("SAD false alarm", self.sad_fa),
        ]
        width = max(len(name) for name, _ in rows)
        out = [f"{name:<{width}}  {val:7.2f} %" for name, val in rows]
        out.append(f"{'scored time':<{width}}  {self.scored_time:7.2f} s")
        return "\n".join(out)


def _pct(numer: float, denom: float) -> float:
    if denom == 0:
        return 0.0 if numer == 0 else math.inf
    return 100.0 * numer / denom


def der(reference: dict[str, list], hypothesis: dict[str, list],
        collar: float = 0.25, frame_step: float = 0.01) -> DerReport:
    """Collar-tolerant DER of hypothesis segments against a reference.

    Both arguments map recording ids to (speaker, start, end) lists; the id
    sets must match exactly. An empty segment list is a valid hypothesis.
    When the scored region contains no reference speech at all, rates are
    0 when the matching error count is zero and infinite otherwise.
    """
    if set(reference) != set(hypothesis):
        only_ref = sorted(set(reference) - set(hypothesis))
        only_hyp = sorted(set(hypothesis) - set(reference))
        raise ValueError(
            f"recording ids differ: only in reference {only_ref}, "
            f"only in hypothesis {only_hyp}")

    fp_ns = round(frame_step * NS)
    tot_ref = tot_mi = tot_fa = tot_cf = 0
    tot_speech = tot_sad_mi = tot_sad_fa = 0
    for rec_id in sorted(reference):
        ref_segs, hyp_segs = reference[rec_id], hypothesis[rec_id]
        ends = [round(e * NS) for _, _, e in ref_segs + hyp_segs]
        if not ends:
            continue
        n_frames = -(-max(ends) // fp_ns)
        ref_mat, ref_spk = rasterize_segments(ref_segs, n_frames, frame_step)
        hyp_mat, hyp_spk = rasterize_segments(hyp_segs, n_frames, frame_step)
        if len(ref_spk) > MAPPING_CAP or len(hyp_spk) > MAPPING_CAP:
            raise ValueError(
                f"{rec_id}: speaker mapping search capped at {MAPPING_CAP} "
                f"speakers, got {len(ref_spk)} ref / {len(hyp_spk)} hyp")
        scored = _collar_mask(ref_segs, n_frames, collar, frame_step)
        ref_mat = ref_mat[scored]
        hyp_mat = hyp_mat[scored]
        r = ref_mat.sum(axis=1).astype(np.int64)
        h = hyp_mat.sum(axis=1).astype(np.int64)
        tot_ref += int(r.sum())
        tot_mi += int(np.maximum(r - h, 0).sum())
        tot_fa += int(np.maximum(h - r, 0).sum())
        # confusion depends only on the speaker mapping: maximize matches
        matches = ref_mat.astype(np.int64).T @ hyp_mat.astype(np.int64)
        best = 0
        if ref_spk and hyp_spk:
            nr, nh = len(ref_spk), len(hyp_spk)
            if nr <= nh:
                for perm in permutations(range(nh), nr):
                    got = int(matches[np.arange(nr), perm].sum())
                    if got > best:
                        best = got
            else:
                for perm in permutations(range(nr), nh):
                    got = int(matches[perm, np.arange(nh)].sum())
                    if got > best:
                        best = got
        tot_cf += int(np.minimum(r, h).sum()) - best
        ref_speech = r > 0
        hyp_speech = h > 0
        tot_speech += int(ref_speech.sum())
        tot_sad_mi += int((ref_speech & ~hyp_speech).sum())
        tot_sad_fa += int((~ref_speech & hyp_speech).sum())

    miss = _pct(tot_mi, tot_ref)
    fa = _pct(tot_fa, tot_ref)
    cf = _pct(tot_cf, tot_ref)
    return DerReport(
        der=miss + fa + cf,
        miss=miss,
        false_alarm=fa,
        confusion=cf,
        sad_miss=_pct(tot_sad_mi, tot_speech),
        sad_fa=_pct(tot_sad_fa, tot_speech),
        scored_time=tot_ref * frame_step,
    )
