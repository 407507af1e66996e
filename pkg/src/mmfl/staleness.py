"""Server-side memory of past client updates and staleness coefficients.

For each (client, model) the server keeps the last received update ``h``.
A stale update enters aggregation scaled by a coefficient beta; the exact
optimum is the projection of the fresh update onto ``h``:

    beta = (G . h) / ||h||^2

which needs the fresh update. When the client is inactive, beta is instead
extrapolated from the last participation interval: beta is taken as 1 right
after a refresh and decays linearly at the rate observed between the
previous refresh and the most recent exactly-computed beta. Extrapolations
clamp to [0, 2]; the exact projection is never clamped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

BETA_AT_REFRESH = 1.0
BETA_CLAMP = (0.0, 2.0)


def beta_opt(fresh: np.ndarray, stale: np.ndarray) -> float:
    """Scalar minimizing ||fresh - beta * stale||^2.

    Defined as 0 (fresh-only update) when the stale vector is zero.
    """
    denom = float(stale @ stale)
    if denom == 0.0:
        logger.warning("beta_opt called with zero stale update; using beta=0")
        return 0.0
    return float(fresh @ stale) / denom


@dataclass
class StaleEntry:
    update: np.ndarray  # h, slot-averaged client update
    last_refresh_round: int
    beta_at_refresh: float = BETA_AT_REFRESH
    beta_at_last_active: float | None = None
    last_active_round: int | None = None
    trend_slope: float = 0.0


@dataclass
class StaleStore:
    """Per (client, model) stale-update state. Mutated only by refresh."""

    entries: dict[tuple[int, int], StaleEntry] = field(default_factory=dict)

    def has(self, client_id: int, model_id: int) -> bool:
        return (client_id, model_id) in self.entries

    def stale_update(self, client_id: int, model_id: int) -> np.ndarray | None:
        entry = self.entries.get((client_id, model_id))
        return None if entry is None else entry.update

    @property
    def memory_slots(self) -> int:
        return len(self.entries)

    def refresh(self, client_id: int, model_id: int, update: np.ndarray, round_index: int) -> None:
        """Record a received update; h <- G.

        Also advances the beta trend: the projection of the new update onto
        the previous h is one exactly-observed beta, and together with the
        value 1 assumed right after the previous refresh it fixes the decay
        slope used while the client is inactive. Two refreshes in the same
        round are last-writer-wins.
        """
        key = (client_id, model_id)
        prev = self.entries.get(key)
        if prev is None:
            self.entries[key] = StaleEntry(update=update.copy(), last_refresh_round=round_index)
            return

        observed = beta_opt(update, prev.update) if np.any(prev.update) else 0.0
        gap = round_index - (prev.last_refresh_round + 1)
        slope = (prev.beta_at_refresh - observed) / (
            (prev.last_refresh_round + 1) - round_index
        ) if gap > 0 else 0.0
        self.entries[key] = StaleEntry(
            update=update.copy(),
            last_refresh_round=round_index,
            beta_at_refresh=BETA_AT_REFRESH,
            beta_at_last_active=observed,
            last_active_round=round_index,
            trend_slope=slope,
        )

    def beta_estimate(
        self,
        client_id: int,
        model_id: int,
        round_index: int,
        fresh_update: np.ndarray | None = None,
    ) -> float:
        """Staleness coefficient for this round.

        With the fresh update in hand (the client is active) this is the
        exact projection. Otherwise it is the linear trend value
        ``beta_hat + (round - last_refresh - 1) * slope`` clamped to [0, 2];
        before any observed pair the slope is zero and the estimate stays 1.
        """
        entry = self.entries.get((client_id, model_id))
        if entry is None:
            raise KeyError(f"no stale state for client {client_id}, model {model_id}")
        if fresh_update is not None:
            return beta_opt(fresh_update, entry.update)

        offset = round_index - entry.last_refresh_round - 1
        value = entry.beta_at_refresh + offset * entry.trend_slope
        clamped = min(max(value, BETA_CLAMP[0]), BETA_CLAMP[1])
        if clamped != value:
            logger.debug(
                "beta extrapolation %.4f clamped to %.1f for client %d model %d",
                value, clamped, client_id, model_id,
            )
        return clamped

    def dump(self, path: str | Path) -> None:
        """Diagnostics dump: client, model, refresh round, current slope."""
        lines = ["client,model,last_refresh_round,beta_at_refresh,trend_slope"]
        for (cid, mid), e in sorted(self.entries.items()):
            lines.append(
                f"{cid},{mid},{e.last_refresh_round},{e.beta_at_refresh!r},{e.trend_slope!r}"
            )
        Path(path).write_text("\n".join(lines) + "\n")
