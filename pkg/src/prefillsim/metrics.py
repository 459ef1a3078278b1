"""Latency aggregation and the statistics used to compare serving runs.

Definitions fixed here so numbers in reports are unambiguous:

* encode latency of a request is the time from its arrival in the queue to
  the end of the step that emitted its first output token; decode latency
  is from that point to the end of its finishing step. Per-token values
  divide by prompt length and by requested output length respectively.
* percentiles are nearest-rank: the smallest sample value whose cumulative
  share is at least p percent.
* the signed-rank test ranks absolute differences with average ranks for
  ties and takes the smaller of the positive and negative rank sums. The
  two-sided p comes from the exact null distribution (a subset-sum over
  doubled ranks, so tied half-ranks stay integral) when at most 25 nonzero
  differences remain, otherwise from a normal approximation with tie
  correction and a continuity correction of one half. Zeros are dropped by
  default; the "pratt" policy ranks them but excludes them from both sums
  and always uses the approximation.
* the stratified paired test sums discordant counts over strata:
  X^2 = (|sum b_k - sum c_k| - 1)^2 / sum(b_k + c_k), referred to
  chi-squared with one degree of freedom. One stratum is the classical
  continuity-corrected McNemar test.
"""

from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError

__all__ = [
    "FinishReason",
    "LengthOutcome",
    "PairedSample",
    "RequestTiming",
    "LatencySummary",
    "MetricsReport",
    "WilcoxonResult",
    "CmhResult",
    "nearest_rank_percentile",
    "summarize",
    "aggregate",
    "wilcoxon_signed_rank",
    "cmh_test",
    "length_following_score",
    "truncation_rate",
    "word_count",
]


class FinishReason(enum.Enum):
    STOP = "stop"
    LENGTH_CAP = "length_cap"


@dataclass(frozen=True)
class LengthOutcome:
    """Requested and produced word counts of one generation."""

    requested: int
    generated: int
    finished_by: FinishReason

    def __post_init__(self) -> None:
        if self.requested < 1:
            raise DomainError("requested length must be positive")
        if self.generated < 0:
            raise DomainError("generated length must be non-negative")


@dataclass(frozen=True)
class PairedSample:
    """Treatment/control value pairs, optionally labelled by stratum.

    diffs feed the signed-rank test directly; by_stratum groups pair counts
    for the stratified test.
    """

    treatment: tuple[float, ...]
    control: tuple[float, ...]
    strata: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        t = tuple(float(v) for v in self.treatment)
        c = tuple(float(v) for v in self.control)
        object.__setattr__(self, "treatment", t)
        object.__setattr__(self, "control", c)
        if not t:
            raise DomainError("paired sample must be nonempty")
        if len(t) != len(c):
            raise DomainError("treatment and control lengths differ")
        if self.strata is not None and len(self.strata) != len(t):
            raise DomainError("stratum labels must cover every pair")
        if not all(math.isfinite(v) for v in t + c):
            raise DomainError("paired values must be finite")

    def diffs(self) -> tuple[float, ...]:
        return tuple(t - c for t, c in zip(self.treatment, self.control))

    def by_stratum(self) -> dict[str, list[tuple[float, float]]]:
        labels = self.strata if self.strata is not None else ("",) * len(self.treatment)
        groups: dict[str, list[tuple[float, float]]] = {}
        for label, t, c in zip(labels, self.treatment, self.control):
            groups.setdefault(label, []).append((t, c))
        return groups


@dataclass(frozen=True)
class RequestTiming:
    """Clock marks for one served request, in seconds from run start."""

    request_id: int
    prompt_len: int
    output_len: int
    t_arrival: float
    t_admit: float
    t_first_token: float
    t_finish: float

    def __post_init__(self) -> None:
        if self.prompt_len < 1 or self.output_len < 1:
            raise DomainError("lengths must be positive")
        marks = (self.t_arrival, self.t_admit, self.t_first_token, self.t_finish)
        if any(m < 0 for m in marks):
            raise DomainError("timestamps must be non-negative")
        if not (self.t_arrival <= self.t_admit <= self.t_first_token <= self.t_finish):
            raise DomainError("timestamps must be ordered")

    @property
    def encode_s(self) -> float:
        return self.t_first_token - self.t_arrival

    @property
    def decode_s(self) -> float:
        return self.t_finish - self.t_first_token


def nearest_rank_percentile(values: Sequence[float], pct: float) -> float:
    if not 0 < pct <= 100:
        raise DomainError("percentile must be in (0, 100]")
    arr = np.sort(np.asarray(values, dtype=np.float64))
    if arr.size == 0:
        raise DomainError("need at least one value")
    k = max(1, math.ceil(pct / 100.0 * arr.size))
    return float(arr[k - 1])


@dataclass(frozen=True)
class LatencySummary:
    mean: float
    sd: float
    p50: float
    p90: float
    p99: float

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "sd": self.sd,
            "p50": self.p50,
            "p90": self.p90,
            "p99": self.p99,
        }


def summarize(values: Sequence[float]) -> LatencySummary:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise DomainError("need at least one value")
    return LatencySummary(
        mean=float(arr.mean()),
        sd=float(arr.std()),
        p50=nearest_rank_percentile(arr, 50),
        p90=nearest_rank_percentile(arr, 90),
        p99=nearest_rank_percentile(arr, 99),
    )


@dataclass(frozen=True)
class MetricsReport:
    n_requests: int
    wall_s: float
    prefill_tokens: int
    decode_tokens: int
    throughput_tokens_per_s: float
    encode_per_request: LatencySummary
    decode_per_request: LatencySummary
    encode_per_token: LatencySummary
    decode_per_token: LatencySummary

    def to_dict(self) -> dict:
        return {
            "n_requests": self.n_requests,
            "wall_s": self.wall_s,
            "prefill_tokens": self.prefill_tokens,
            "decode_tokens": self.decode_tokens,
            "throughput_tokens_per_s": self.throughput_tokens_per_s,
            "encode_per_request_s": self.encode_per_request.to_dict(),
            "decode_per_request_s": self.decode_per_request.to_dict(),
            "encode_per_token_s": self.encode_per_token.to_dict(),
            "decode_per_token_s": self.decode_per_token.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [
            f"{'requests':<22}{self.n_requests}",
            f"{'wall clock [s]':<22}{self.wall_s!r}",
            f"{'prefill tokens':<22}{self.prefill_tokens}",
            f"{'decode tokens':<22}{self.decode_tokens}",
            f"{'throughput [tok/s]':<22}{self.throughput_tokens_per_s!r}",
            f"{'latency [s]':<22}{'mean':>13}{'sd':>13}{'p50':>13}{'p90':>13}{'p99':>13}",
        ]
        for name, summ in (
            ("encode/request", self.encode_per_request),
            ("decode/request", self.decode_per_request),
            ("encode/token", self.encode_per_token),
            ("decode/token", self.decode_per_token),
        ):
            lines.append(
                f"{name:<22}"
                f"{summ.mean:>13.6g}{summ.sd:>13.6g}{summ.p50:>13.6g}"
                f"{summ.p90:>13.6g}{summ.p99:>13.6g}"
            )
        return "\n".join(lines)


def aggregate(
    timings: Sequence[RequestTiming],
    wall_s: float,
    total_tokens: int | None = None,
) -> MetricsReport:
    """Fold per-request clock marks into a run-level report.

    total_tokens overrides the served-token count used for throughput;
    by default it is the sum of prompt and output lengths.
    """
    if not timings:
        raise DomainError("need at least one request")
    if wall_s <= 0:
        raise DomainError("wall_s must be positive")
    prefill = sum(t.prompt_len for t in timings)
    decode = sum(t.output_len for t in timings)
    if total_tokens is None:
        total_tokens = prefill + decode
    return MetricsReport(
        n_requests=len(timings),
        wall_s=wall_s,
        prefill_tokens=prefill,
        decode_tokens=decode,
        throughput_tokens_per_s=total_tokens / wall_s,
        encode_per_request=summarize([t.encode_s for t in timings]),
        decode_per_request=summarize([t.decode_s for t in timings]),
        encode_per_token=summarize([t.encode_s / t.prompt_len for t in timings]),
        decode_per_token=summarize([t.decode_s / t.output_len for t in timings]),
    )


# ---------------------------------------------------------------- ranking


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks starting at 1; tied values share the average of their ranks."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    svals = values[order]
    while i < values.size:
        j = i
        while j + 1 < values.size and svals[j + 1] == svals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    n_used: int
    p_value: float
    method: str
    mean_diff: float


def _exact_signed_rank_p(ranks: np.ndarray, w_small: float) -> float:
    # doubled ranks are exact integers even with .5 tie averages
    r2 = np.rint(2.0 * ranks).astype(np.int64)
    total = int(r2.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in r2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts += shifted
    w2 = int(np.rint(2.0 * w_small))
    tail = int(counts[: w2 + 1].sum())
    p = 2.0 * tail / float(2 ** ranks.size)
    return min(1.0, p)


def wilcoxon_signed_rank(
    x: Sequence[float],
    y: Sequence[float] | None = None,
    zero_policy: str = "drop",
    exact_limit: int = 25,
) -> WilcoxonResult:
    """Two-sided paired signed-rank test.

    Pass two samples for a paired comparison or a single sample of
    differences. zero_policy "drop" removes zero differences before
    ranking; "pratt" keeps them in the ranking but excludes their ranks
    from both sums (approximation only).
    """
    if zero_policy not in ("drop", "pratt"):
        raise DomainError(f"unknown zero_policy {zero_policy!r}")
    d = np.asarray(x, dtype=np.float64)
    if y is not None:
        b = np.asarray(y, dtype=np.float64)
        if b.shape != d.shape:
            raise DomainError("paired samples must have equal length")
        d = d - b
    if d.ndim != 1 or d.size == 0:
        raise DomainError("need a one-dimensional, non-empty sample")
    mean_diff = float(d.mean())
    if np.all(d == 0.0):
        raise DomainError("every difference is zero; the test is undefined")

    if zero_policy == "drop":
        nz = d[d != 0.0]
        n = nz.size
        ranks = _average_ranks(np.abs(nz))
        w_plus = float(ranks[nz > 0].sum())
        w_minus = float(ranks[nz < 0].sum())
        w = min(w_plus, w_minus)
        if n <= exact_limit:
            p = _exact_signed_rank_p(ranks, w)
            return WilcoxonResult(w, n, p, "exact", mean_diff)
        zero_count = 0
        tie_source = ranks
    else:
        ranks = _average_ranks(np.abs(d))
        nonzero = d != 0.0
        w_plus = float(ranks[d > 0].sum())
        w_minus = float(ranks[d < 0].sum())
        w = min(w_plus, w_minus)
        n = int(d.size)
        zero_count = int(d.size - nonzero.sum())
        tie_source = ranks[nonzero]

    z0 = zero_count
    mu = (n * (n + 1) - z0 * (z0 + 1)) / 4.0
    var = (n * (n + 1) * (2 * n + 1) - z0 * (z0 + 1) * (2 * z0 + 1)) / 24.0
    _, tie_counts = np.unique(tie_source, return_counts=True)
    var -= float(((tie_counts**3 - tie_counts) / 48.0).sum())
    if var <= 0:
        raise DomainError("zero variance; the test is undefined")
    z = (w - mu + 0.5) / math.sqrt(var)
    p = min(1.0, math.erfc(-z / math.sqrt(2.0)))
    n_used = n - z0
    return WilcoxonResult(w, n_used, p, "approx", mean_diff)


@dataclass(frozen=True)
class CmhResult:
    statistic: float
    p_value: float


def cmh_test(strata: Sequence[tuple[int, int]]) -> CmhResult:
    """Stratified matched-pair test on per-stratum discordant counts.

    Each stratum contributes (b_k, c_k): the pairs won by treatment and by
    control. A single stratum is the continuity-corrected McNemar test.
    """
    if not strata:
        raise DomainError("need at least one stratum")
    total_b = total_c = 0
    for b, c in strata:
        if b < 0 or c < 0:
            raise DomainError("counts must be non-negative")
        total_b += b
        total_c += c
    if total_b + total_c == 0:
        raise DomainError("no discordant pairs; the test is undefined")
    stat = (abs(total_b - total_c) - 1.0) ** 2 / (total_b + total_c)
    p = math.erfc(math.sqrt(stat / 2.0))
    return CmhResult(stat, min(1.0, p))


def length_following_score(requested: int, generated: int) -> float:
    """Score in [0, 100] for how well output length tracked the request.

    Overshoot is forgiven up to 4x the request, undershoot down to a third
    of it, both falling off linearly; an empty generation scores zero.
    """
    if requested < 1:
        raise DomainError("requested length must be positive")
    if generated < 0:
        raise DomainError("generated length must be non-negative")
    if generated == 0:
        return 0.0
    if generated >= requested:
        excess = generated / requested - 1.0
        return 100.0 * max(0.0, 1.0 - excess / 3.0)
    shortfall = requested / generated - 1.0
    return 100.0 * max(0.0, 1.0 - shortfall / 2.0)


def truncation_rate(outcomes: Sequence[LengthOutcome]) -> float:
    """Fraction of generations stopped by the decoding length cap."""
    if not outcomes:
        raise DomainError("need at least one outcome")
    capped = sum(1 for o in outcomes if o.finished_by is FinishReason.LENGTH_CAP)
    return capped / len(outcomes)


_LATIN_RUN = re.compile(r"[A-Za-z]+")


def _is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return (
        0x4E00 <= cp <= 0x9FFF
        or 0x3400 <= cp <= 0x4DBF
        or 0xF900 <= cp <= 0xFAFF
    )


def word_count(text: str) -> int:
    """Count words: each ideograph is one word, each letter run is one word."""
    cjk = sum(1 for ch in text if _is_cjk(ch))
    return cjk + len(_LATIN_RUN.findall(text))
