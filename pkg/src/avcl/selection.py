"""Replay-guided patch selection.

Pure numpy, no autodiff: importance scoring from cross-attention maps,
importance-sorted query/key gathering, past-vs-current correlation scores,
probabilistic video patch selection, audio time-chunk selection, and the
final patch gather.

Randomness protocol (relied on by tests and by bit-exact replays): every
select_* call spawns one child generator per batch row via ``rng.spawn(B)``
and consumes, per row, first the Bernoulli exclusion draws (a single
``random(kappa)`` call — drawn even when correlation is absent so that a run
with no memory consumes the same stream as one with correlation forced to
zero), then the weighted draws-without-replacement one ``random()`` at a
time. Degenerate paths that select "everything with positive mass" skip the
weighted draws entirely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from avcl.data import PatchSet


class SelectionError(ValueError):
    pass


def kappa(count: int, ratio: float) -> int:
    """Patch budget: round-half-up of count*ratio, at least 1."""
    if not 0.0 < ratio <= 1.0:
        raise SelectionError(f"sampling ratio must be in (0, 1], got {ratio}")
    if count < 1:
        raise SelectionError("patch count must be positive")
    return max(1, int(np.floor(count * ratio + 0.5)))


@dataclass(frozen=True)
class SelectionConfig:
    audio_ratio: float = 0.5
    video_ratio: float = 0.5
    chunk_size: int = 4
    beta: float = 0.4

    def __post_init__(self):
        for name in ("audio_ratio", "video_ratio"):
            r = getattr(self, name)
            if not 0.0 < r <= 1.0:
                raise SelectionError(f"{name} must be in (0, 1], got {r}")
        if self.chunk_size < 1:
            raise SelectionError("chunk_size must be at least 1")
        if self.beta <= 0.0:
            raise SelectionError("beta must be positive")


@dataclass
class ScorePack:
    """Scores for one modality of one batch: importance over all patches,
    its full ascending argsort, and correlation + exclusion flags aligned to
    the top-kappa tail of that sort."""

    importance: np.ndarray  # (B, n) rows summing to 1
    order: np.ndarray  # (B, n) ascending stable argsort of importance
    correlation: np.ndarray  # (B, kappa) in [0, 1]
    flags: np.ndarray  # (B, kappa) bool, True = flagged for exclusion

    def __post_init__(self):
        b, n = self.importance.shape
        if self.order.shape != (b, n):
            raise SelectionError("order shape mismatch")
        k = self.correlation.shape[1]
        if self.correlation.shape != (b, k) or self.flags.shape != (b, k):
            raise SelectionError("correlation/flags shape mismatch")
        if not np.allclose(self.importance.sum(axis=1), 1.0, atol=1e-9):
            raise SelectionError("importance rows must sum to 1")
        if np.any(self.correlation < 0.0) or np.any(self.correlation > 1.0):
            raise SelectionError("correlation must lie in [0, 1]")
        if np.any(np.sort(self.order, axis=1) != np.arange(n)):
            raise SelectionError("order rows must be permutations")

    @property
    def scored(self) -> np.ndarray:
        """(B, kappa) patch ids the correlation columns refer to."""
        return self.order[:, -self.correlation.shape[1]:]


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def importance_scores(audio_map: np.ndarray, video_map: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Per-patch attention probabilities, averaged over heads and queries.

    audio_map (B,H,N,M) holds video-query/audio-key logits; softmax over its
    last axis and the mean over (heads, video queries) gives I_a (B,M).
    video_map (B,H,M,N) gives I_v (B,N) the same way. Rows sum to 1.
    """
    if not (np.isfinite(audio_map).all() and np.isfinite(video_map).all()):
        raise SelectionError("attention maps must be finite")
    return (_softmax(audio_map).mean(axis=(1, 2)),
            _softmax(video_map).mean(axis=(1, 2)))


@dataclass
class LocalizedQueries:
    pooled: np.ndarray  # (B, H, d) importance-weighted mean of top-k queries
    keys: np.ndarray  # (B, H, kappa, d) gathered keys, ascending importance
    indices: np.ndarray  # (B, kappa) source patch ids, ascending importance


def gather_localized(q: np.ndarray, k: np.ndarray, importance: np.ndarray,
                     kap: int) -> LocalizedQueries:
    """Sort patches by importance ascending, keep the top-kappa tail, pool
    the gathered queries with their importance values as weights."""
    b, h, n, d = q.shape
    if k.shape != q.shape or importance.shape != (b, n):
        raise SelectionError("query/key/importance shapes disagree")
    if not 1 <= kap <= n:
        raise SelectionError(f"kappa {kap} out of range for {n} patches")
    order = np.argsort(importance, axis=1, kind="stable")
    top = order[:, -kap:]  # ascending importance within the top block
    weights = np.take_along_axis(importance, top, axis=1)  # (B, kappa)
    totals = weights.sum(axis=1)
    if np.any(totals <= 0.0):
        raise SelectionError("gathered importance mass must be positive")
    qg = np.take_along_axis(q, top[:, None, :, None], axis=2)  # (B,H,kappa,d)
    kg = np.take_along_axis(k, top[:, None, :, None], axis=2)
    pooled = (qg * weights[:, None, :, None]).sum(axis=2) / totals[:, None, None]
    return LocalizedQueries(pooled, kg, top)


def _scaled_scores(pooled: np.ndarray, keys: np.ndarray, beta: float) -> np.ndarray:
    d = keys.shape[-1]
    return np.einsum("bhd,bhkd->bhk", pooled, keys) / (beta * np.sqrt(d))


def correlation_scores(keys: np.ndarray, q_now: np.ndarray,
                       q_past: np.ndarray, beta: float) -> np.ndarray:
    """Per-patch probability that the PAST pooled query attends the patch
    more strongly than the current one.

    For each head and gathered key, the current and past attention scores
    enter a two-way softmax; the past-side component, averaged over heads,
    is the correlation score. Computed as sigmoid(past - now) for stability.
    """
    if beta <= 0.0:
        raise SelectionError("beta must be positive")
    a_now = _scaled_scores(q_now, keys, beta)
    a_past = _scaled_scores(q_past, keys, beta)
    z = a_past - a_now
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out.mean(axis=1)


def _draw_without_replacement(rng: np.random.Generator, weights: np.ndarray,
                              count: int) -> list[int]:
    """Sequential multinomial-without-replacement by cumulative inversion."""
    w = weights.astype(np.float64).copy()
    out: list[int] = []
    for _ in range(count):
        cum = np.cumsum(w)
        total = cum[-1]  # sequential total so r < cum[-1] always holds
        if total <= 0.0:
            break
        r = rng.random() * total
        idx = int(np.searchsorted(cum, r, side="right"))
        out.append(idx)
        w[idx] = 0.0
    return out


def _fallback_fill(selected: np.ndarray, c_full: np.ndarray, need: int) -> list[int]:
    """Deterministic fill for degenerate rows: unselected patches ordered by
    ascending correlation (least past-correlated first), index-stable."""
    cand = np.flatnonzero(~selected)
    order = np.lexsort((cand, c_full[cand]))
    return list(cand[order][:need])


def _row_flags(rng: np.random.Generator, correlation: np.ndarray | None,
               kap: int) -> np.ndarray:
    draws = rng.random(kap)
    if correlation is None:
        return np.zeros(kap, dtype=bool)
    return draws < correlation


def select_video(importance: np.ndarray, correlation: np.ndarray | None,
                 kap: int, rng: np.random.Generator
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Draw kappa distinct video patches per row, proportional to importance
    with Bernoulli(correlation)-flagged patches zeroed out.

    correlation=None means "no memory yet": no patch is ever flagged, but
    the Bernoulli stream is still consumed so runs with and without stored
    correlation stay stream-aligned. Returns (ascending indices (B, kappa),
    full-length exclusion flags (B, n))."""
    b, n = importance.shape
    if not 1 <= kap <= n:
        raise SelectionError(f"kappa {kap} out of range for {n} patches")
    if correlation is not None and correlation.shape != (b, kap):
        raise SelectionError("correlation must be (B, kappa)")
    order = np.argsort(importance, axis=1, kind="stable")
    scored = order[:, -kap:]
    selected = np.empty((b, kap), dtype=np.int64)
    flags_full = np.zeros((b, n), dtype=bool)
    for row, child in enumerate(rng.spawn(b)):
        f = _row_flags(child, None if correlation is None else correlation[row], kap)
        flags_full[row, scored[row][f]] = True
        itil = importance[row].copy()
        itil[flags_full[row]] = 0.0
        c_full = np.zeros(n)
        if correlation is not None:
            c_full[scored[row]] = correlation[row]
        positive = itil > 0.0
        if positive.sum() >= kap:
            picks = _draw_without_replacement(child, itil, kap)
        else:
            picks = list(np.flatnonzero(positive))
        if len(picks) < kap:
            chosen = np.zeros(n, dtype=bool)
            chosen[picks] = True
            picks.extend(_fallback_fill(chosen, c_full, kap - len(picks)))
        selected[row] = np.sort(np.asarray(picks, dtype=np.int64))
    return selected, flags_full


def select_audio(importance: np.ndarray, correlation: np.ndarray | None,
                 kap: int, chunk_size: int, grid: tuple[int, int],
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Audio selection over whole time chunks.

    Per row: flag scored patches by Bernoulli(correlation); sum importance
    over frequency, average-pool over chunks of ``chunk_size`` time steps
    (a partial tail chunk is truncated away); draw a full chunk ordering by
    multinomial-without-replacement on chunk importance; accumulate each
    chunk's unflagged patches in flat order until the budget is met, pruning
    the final chunk's tail to land exactly on kappa. Rows that run out of
    unflagged chunk patches fall back to ascending-correlation fill.
    Returns (ascending indices (B, kappa), full-length flags (B, M))."""
    b, m = importance.shape
    num_time, num_freq = grid
    if num_time * num_freq != m:
        raise SelectionError("grid does not match importance width")
    if not 1 <= kap <= m:
        raise SelectionError(f"kappa {kap} out of range for {m} patches")
    if chunk_size < 1 or chunk_size > num_time:
        raise SelectionError("chunk_size must lie in [1, num_time]")
    if correlation is not None and correlation.shape != (b, kap):
        raise SelectionError("correlation must be (B, kappa)")
    order = np.argsort(importance, axis=1, kind="stable")
    scored = order[:, -kap:]
    num_chunks = num_time // chunk_size
    selected = np.empty((b, kap), dtype=np.int64)
    flags_full = np.zeros((b, m), dtype=bool)
    for row, child in enumerate(rng.spawn(b)):
        f = _row_flags(child, None if correlation is None else correlation[row], kap)
        flags_full[row, scored[row][f]] = True
        c_full = np.zeros(m)
        if correlation is not None:
            c_full[scored[row]] = correlation[row]
        time_mass = importance[row].reshape(num_time, num_freq).sum(axis=1)
        chunk_mass = time_mass[:num_chunks * chunk_size]
        chunk_mass = chunk_mass.reshape(num_chunks, chunk_size).mean(axis=1)
        chunk_order = _draw_without_replacement(child, chunk_mass, num_chunks)
        # zero-mass chunks (possible on generic inputs) keep a deterministic
        # ascending-index order at the end of the schedule
        if len(chunk_order) < num_chunks:
            rest = sorted(set(range(num_chunks)) - set(chunk_order))
            chunk_order.extend(rest)
        chosen = np.zeros(m, dtype=bool)
        count = 0
        for c in chunk_order:
            lo = c * chunk_size * num_freq
            hi = lo + chunk_size * num_freq
            kept = np.flatnonzero(~flags_full[row, lo:hi]) + lo
            take = kept[:kap - count]
            chosen[take] = True
            count += len(take)
            if count == kap:
                break
        picks = list(np.flatnonzero(chosen))
        if count < kap:
            picks.extend(_fallback_fill(chosen, c_full, kap - count))
        selected[row] = np.sort(np.asarray(picks, dtype=np.int64))
    return selected, flags_full


def gather_selected(ps: PatchSet, selected: np.ndarray) -> PatchSet:
    """Row-wise patch gather; indices metadata keeps the original grid ids."""
    b, kap = selected.shape
    if ps.patches.shape[0] != b:
        raise SelectionError("batch size mismatch")
    n = ps.patches.shape[1]
    if np.any(selected < 0) or np.any(selected >= n):
        raise SelectionError("selected index out of range")
    if any(len(np.unique(selected[i])) != kap for i in range(b)):
        raise SelectionError("selected indices must be distinct per row")
    patches = np.take_along_axis(ps.patches, selected[:, :, None], axis=1)
    indices = np.take_along_axis(ps.indices, selected, axis=1)
    return PatchSet(np.ascontiguousarray(patches), np.ascontiguousarray(indices),
                    ps.modality, ps.grid, ps.patch)


def trace_rows(step: int, modality: str, importance: np.ndarray,
               correlation: np.ndarray | None, flags_full: np.ndarray,
               selected: np.ndarray):
    """Yield per-patch diagnostic dicts (one per batch row and patch id)."""
    b, n = importance.shape
    order = np.argsort(importance, axis=1, kind="stable")
    for row in range(b):
        c_full = np.full(n, np.nan)
        if correlation is not None:
            kap = correlation.shape[1]
            c_full[order[row, -kap:]] = correlation[row]
        chosen = np.zeros(n, dtype=bool)
        chosen[selected[row]] = True
        for idx in range(n):
            yield {
                "step": step,
                "modality": modality,
                "row": row,
                "patch_index": idx,
                "importance": importance[row, idx],
                "correlation": "" if np.isnan(c_full[idx]) else repr(float(c_full[idx])),
                "flagged": int(flags_full[row, idx]),
                "selected": int(chosen[idx]),
            }
