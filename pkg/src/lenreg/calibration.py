"""Expected calibration error sliced by input length, plus entropy profiles.

ECE uses M equal-width confidence bins over [0, 1]; a bin edge belongs to
the upper bin except 1.0, which stays in the top bin. Bin assignment
compares the confidence against the rational edges m/M with exact integer
arithmetic (floats are dyadic rationals), and the final sum is reduced with
``fractions.Fraction`` before a single float conversion, so the value is
the mathematically exact ECE of its inputs rounded once.

Length intervals follow the convention [lo, hi) for every interval except
the last, which is closed. The defaults are [10,50), [50,200), [200,512] at
maxlen 512, scaled proportionally (half-up rounding) for other maxlens.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .corpus import TokenSequence, Vocab, mask_batch
from .encoder import ModelParams, forward

__all__ = [
    "FORMAT_VERSION", "PredictionSample", "CalibrationBin", "CalibrationReport",
    "IntervalEntropy", "EntropyProfile", "ece", "default_intervals",
    "interval_label", "collect_predictions", "entropy_profile",
    "write_report_json", "write_report_csv", "write_reliability_csv",
]

FORMAT_VERSION = 1

_CANONICAL_EDGES = (10, 50, 200, 512)
_CANONICAL_MAXLEN = 512
DEFAULT_BINS = 10
DEFAULT_PER_INTERVAL_N = 1000


@dataclass(frozen=True)
class PredictionSample:
    confidence: float
    correct: bool
    input_length: int


@dataclass(frozen=True)
class CalibrationBin:
    lo: float
    hi: float
    count: int
    mean_confidence: float  # 0.0 when the bin is empty
    accuracy: float         # 0.0 when the bin is empty


@dataclass(frozen=True)
class CalibrationReport:
    n: int
    n_bins: int
    ece: float
    bins: tuple[CalibrationBin, ...]
    interval_label: str = ""


def _bin_index(confidence: float, n_bins: int) -> int:
    # Exact comparison of the dyadic rational confidence against edges m/M.
    p, q = float(confidence).as_integer_ratio()
    guess = min(n_bins - 1, int(confidence * n_bins))
    while guess < n_bins - 1 and p * n_bins >= (guess + 1) * q:
        guess += 1
    while guess > 0 and p * n_bins < guess * q:
        guess -= 1
    return guess


def ece(samples, n_bins: int = DEFAULT_BINS, interval_label: str = "") -> CalibrationReport:
    """Exact expected calibration error of a non-empty sample set."""
    if n_bins < 1:
        raise ValueError(f"n_bins must be positive, got {n_bins}")
    samples = list(samples)
    if not samples:
        raise ValueError("ece of an empty sample set is undefined")
    counts = [0] * n_bins
    corrects = [0] * n_bins
    conf_sums = [Fraction(0)] * n_bins
    for s in samples:
        c = float(s.confidence)
        if not (0.0 <= c <= 1.0):
            raise ValueError(f"confidence {c} outside [0, 1]")
        i = _bin_index(c, n_bins)
        counts[i] += 1
        corrects[i] += bool(s.correct)
        conf_sums[i] += Fraction(c)
    n = len(samples)
    total = Fraction(0)
    bins = []
    for m in range(n_bins):
        lo, hi = m / n_bins, (m + 1) / n_bins
        if counts[m] == 0:
            bins.append(CalibrationBin(lo, hi, 0, 0.0, 0.0))
            continue
        acc = Fraction(corrects[m], counts[m])
        conf = conf_sums[m] / counts[m]
        total += Fraction(counts[m], n) * abs(acc - conf)
        bins.append(CalibrationBin(lo, hi, counts[m], float(conf), float(acc)))
    return CalibrationReport(n=n, n_bins=n_bins, ece=float(total), bins=tuple(bins),
                             interval_label=interval_label)


def default_intervals(maxlen: int) -> list[tuple[int, int]]:
    """Length intervals scaled from the canonical maxlen-512 slicing."""
    if maxlen < len(_CANONICAL_EDGES):
        raise ValueError(f"maxlen {maxlen} too small for length slicing")
    scaled = [math.floor(e * maxlen / _CANONICAL_MAXLEN + 0.5) for e in _CANONICAL_EDGES]
    if len(set(scaled)) != len(scaled):
        raise ValueError(f"maxlen {maxlen} collapses the default intervals")
    return [(scaled[i], scaled[i + 1]) for i in range(len(scaled) - 1)]


def interval_label(lo: int, hi: int, closed: bool) -> str:
    return f"[{lo},{hi}]" if closed else f"[{lo},{hi})"


def _in_interval(length: int, lo: int, hi: int, closed: bool) -> bool:
    return lo <= length <= hi if closed else lo <= length < hi


def _validate_intervals(intervals) -> list[tuple[int, int]]:
    ivals = [(int(lo), int(hi)) for lo, hi in intervals]
    if not ivals:
        raise ValueError("need at least one length interval")
    for lo, hi in ivals:
        if lo < 1 or hi <= lo:
            raise ValueError(f"bad interval [{lo},{hi})")
    return ivals


def _eval_masked_positions(
    params: ModelParams,
    sequences: list[TokenSequence],
    vocab: Vocab,
    rng: np.random.Generator,
    batch_size: int = 64,
):
    """Yield (probs float64 (N,V), labels (N,), lengths (N,)) per eval batch."""
    for start in range(0, len(sequences), batch_size):
        chunk = sequences[start : start + batch_size]
        mb = mask_batch(chunk, vocab, rng, maxlen=params.config.maxlen)
        logits = forward(params, mb.ids, mb.pad_mask, head_positions=mb.mask_positions)
        z = np.asarray(logits, dtype=np.float64)
        z -= z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        probs = np.exp(logp)
        labels = mb.labels[mb.mask_positions]
        row_seq = np.nonzero(mb.mask_positions)[0]
        lengths = mb.true_lengths[row_seq]
        yield probs, labels, lengths


def _sample_interval_members(sequences, intervals, per_interval_n, rng):
    members_per_interval = []
    for idx, (lo, hi) in enumerate(intervals):
        closed = idx == len(intervals) - 1
        members = [s for s in sequences if _in_interval(s.length, lo, hi, closed)]
        if not members:
            members_per_interval.append([])
            continue
        take = min(per_interval_n, len(members))
        chosen = rng.choice(len(members), size=take, replace=False)
        members_per_interval.append([members[int(j)] for j in chosen])
    return members_per_interval


def collect_predictions(
    params: ModelParams,
    sequences: list[TokenSequence],
    vocab: Vocab,
    intervals=None,
    per_interval_n: int = DEFAULT_PER_INTERVAL_N,
    rng: np.random.Generator | None = None,
) -> dict[tuple[int, int], list[PredictionSample]]:
    """Masked-token predictions grouped by input-length interval.

    Uniformly samples up to ``per_interval_n`` sequences per interval, masks
    them with the given stream, and emits one sample per masked position
    (confidence = max probability, correct = argmax hits the original id).
    Intervals with no matching sequence map to empty lists.
    """
    if rng is None:
        raise ValueError("collect_predictions needs an rng stream")
    intervals = _validate_intervals(intervals if intervals is not None
                                    else default_intervals(params.config.maxlen))
    if per_interval_n < 1:
        raise ValueError("per_interval_n must be positive")
    out: dict[tuple[int, int], list[PredictionSample]] = {}
    members_per_interval = _sample_interval_members(sequences, intervals, per_interval_n, rng)
    for (lo, hi), members in zip(intervals, members_per_interval):
        samples: list[PredictionSample] = []
        for probs, labels, lengths in _eval_masked_positions(params, members, vocab, rng):
            conf = probs.max(axis=1)
            pred = probs.argmax(axis=1)
            for c, ok, ln in zip(conf, pred == labels, lengths):
                samples.append(PredictionSample(float(c), bool(ok), int(ln)))
        out[(lo, hi)] = samples
    return out


@dataclass(frozen=True)
class IntervalEntropy:
    lo: int
    hi: int
    closed: bool
    count: int
    mean: float | None
    std: float | None


@dataclass(frozen=True)
class EntropyProfile:
    intervals: tuple[IntervalEntropy, ...]


def entropy_profile(
    params: ModelParams,
    sequences: list[TokenSequence],
    vocab: Vocab,
    intervals=None,
    per_interval_n: int = DEFAULT_PER_INTERVAL_N,
    rng: np.random.Generator | None = None,
) -> EntropyProfile:
    """Mean/std of masked-position prediction entropy per length interval."""
    if rng is None:
        raise ValueError("entropy_profile needs an rng stream")
    intervals = _validate_intervals(intervals if intervals is not None
                                    else default_intervals(params.config.maxlen))
    members_per_interval = _sample_interval_members(sequences, intervals, per_interval_n, rng)
    rows = []
    for idx, ((lo, hi), members) in enumerate(zip(intervals, members_per_interval)):
        closed = idx == len(intervals) - 1
        ents: list[np.ndarray] = []
        for probs, _, _ in _eval_masked_positions(params, members, vocab, rng):
            with np.errstate(divide="ignore", invalid="ignore"):
                plogp = np.where(probs > 0, probs * np.log(probs), 0.0)
            ents.append(-plogp.sum(axis=1))
        if ents:
            all_e = np.concatenate(ents)
            rows.append(IntervalEntropy(lo, hi, closed, int(all_e.size),
                                        float(all_e.mean()), float(all_e.std())))
        else:
            rows.append(IntervalEntropy(lo, hi, closed, 0, None, None))
    return EntropyProfile(tuple(rows))


def _interval_payload(intervals, reports, profile):
    payload = []
    for idx, (lo, hi) in enumerate(intervals):
        closed = idx == len(intervals) - 1
        rep: CalibrationReport | None = reports[idx]
        ent: IntervalEntropy = profile.intervals[idx]
        payload.append({
            "label": interval_label(lo, hi, closed),
            "lo": lo, "hi": hi, "closed": closed,
            "n_samples": rep.n if rep is not None else 0,
            "ece": rep.ece if rep is not None else None,
            "entropy_count": ent.count,
            "entropy_mean": ent.mean,
            "entropy_std": ent.std,
            "bins": [
                {"lo": b.lo, "hi": b.hi, "count": b.count,
                 "mean_confidence": b.mean_confidence, "accuracy": b.accuracy}
                for b in rep.bins
            ] if rep is not None else [],
        })
    return payload


def write_report_json(path, intervals, reports, profile, meta: dict) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "ece_report",
        **meta,
        "intervals": _interval_payload(intervals, reports, profile),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def write_report_csv(path, intervals, reports, profile) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["format_version", "interval", "n_samples", "ece",
                    "entropy_count", "entropy_mean", "entropy_std"])
        for idx, (lo, hi) in enumerate(intervals):
            closed = idx == len(intervals) - 1
            rep = reports[idx]
            ent = profile.intervals[idx]
            w.writerow([
                FORMAT_VERSION, interval_label(lo, hi, closed),
                rep.n if rep is not None else 0,
                repr(rep.ece) if rep is not None else "",
                ent.count,
                repr(ent.mean) if ent.mean is not None else "",
                repr(ent.std) if ent.std is not None else "",
            ])


def write_reliability_csv(path, intervals, reports) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["format_version", "interval", "bin_lo", "bin_hi",
                    "count", "mean_confidence", "accuracy"])
        for idx, (lo, hi) in enumerate(intervals):
            closed = idx == len(intervals) - 1
            rep = reports[idx]
            if rep is None:
                continue
            for b in rep.bins:
                w.writerow([FORMAT_VERSION, interval_label(lo, hi, closed),
                            repr(b.lo), repr(b.hi), b.count,
                            repr(b.mean_confidence), repr(b.accuracy)])
