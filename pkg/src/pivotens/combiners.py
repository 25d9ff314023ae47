"""Per-step combination rules for multi-pivot ensemble decoding.

Four rules over K same-vocabulary next-token distributions:

* ``direct``: single-source scoring; the one distribution, unchanged.
* ``multiavg``: log of the arithmetic mean of probabilities per token.
* ``maxens``: elementwise maximum of log-probabilities per token, biasing
  the step toward the most confident pivot; unnormalized.
* ``logavg``: arithmetic mean of log-probabilities per token (geometric
  mean of probabilities); the rejected comparison variant; unnormalized.

Mean-based rules are computed on a per-token *sorted* stack with a max
shift.  This keeps them exactly invariant to pivot order and guarantees,
in floating point, that the averaged probability never exceeds the
per-token maximum (``exp`` of a non-positive shift is at most 1, the mean
of such terms is at most 1, and ``log`` of that is non-positive).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import CombinedStep, Combiner, StepDistribution


def _stack(dists: Sequence[StepDistribution]) -> np.ndarray:
    if len(dists) < 1:
        raise ValueError("at least one distribution is required")
    size = dists[0].size
    for d in dists[1:]:
        if d.size != size:
            raise ValueError(f"mismatched vector lengths: {d.size} != {size}")
    return np.stack([d.logprobs for d in dists])


def combine_direct(dists: Sequence[StepDistribution]) -> CombinedStep:
    """Single-source scoring: admits exactly one distribution."""
    if len(dists) != 1:
        raise ValueError(f"direct scoring admits one source only, got {len(dists)}")
    return CombinedStep(logscores=dists[0].logprobs, normalized=True)


def combine_multiavg(dists: Sequence[StepDistribution]) -> CombinedStep:
    """Log of the per-token arithmetic mean of probabilities across pivots."""
    stack = _stack(dists)
    k = stack.shape[0]
    srt = np.sort(stack, axis=0)
    top = srt[-1]
    out = np.full_like(top, -np.inf)
    finite = top > -np.inf
    if np.any(finite):
        shifted = np.exp(srt[:, finite] - top[finite])
        out[finite] = top[finite] + np.log(shifted.sum(axis=0) / k)
    return CombinedStep(logscores=out, normalized=True)


def combine_maxens(
    dists: Sequence[StepDistribution], renormalize: bool = False
) -> CombinedStep:
    """Per-token maximum log-probability across pivots, with provenance.

    Provenance records which pivot achieved the maximum at each token; exact
    ties break toward the lowest pivot index.  By default the output is
    left raw: an elementwise max of distributions generally sums above 1,
    and renormalizing would change beam rankings.  ``renormalize`` rescales
    to a proper distribution for callers that need one.
    """
    stack = _stack(dists)
    out = np.max(stack, axis=0)
    provenance = np.argmax(stack, axis=0)
    if renormalize:
        shifted = out - out.max()
        out = shifted - np.log(np.sum(np.exp(shifted)))
        return CombinedStep(logscores=out, normalized=True, provenance=provenance)
    return CombinedStep(logscores=out, normalized=False, provenance=provenance)


def combine_logavg(dists: Sequence[StepDistribution]) -> CombinedStep:
    """Per-token arithmetic mean of log-probabilities across pivots."""
    stack = _stack(dists)
    k = stack.shape[0]
    srt = np.sort(stack, axis=0)
    top = srt[-1]
    out = np.full_like(top, -np.inf)
    finite = top > -np.inf
    if np.any(finite):
        # Shift by the per-token max so identical inputs reproduce exactly.
        out[finite] = top[finite] + (srt[:, finite] - top[finite]).sum(axis=0) / k
    return CombinedStep(logscores=out, normalized=False)


_COMBINE_FNS: dict[Combiner, Callable[[Sequence[StepDistribution]], CombinedStep]] = {
    Combiner.DIRECT: combine_direct,
    Combiner.MULTIAVG: combine_multiavg,
    Combiner.MAXENS: combine_maxens,
    Combiner.LOGAVG: combine_logavg,
}


def combine(rule: Combiner | str, dists: Sequence[StepDistribution]) -> CombinedStep:
    """Apply the named combination rule to a list of step distributions."""
    return _COMBINE_FNS[Combiner(rule)](dists)
