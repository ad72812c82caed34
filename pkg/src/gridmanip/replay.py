"""Experience replay with stochastic rank-based prioritization.

Items are sampled without replacement with probability proportional to
(1/rank)^omega, ranks ordered by descending priority (ties broken by insert
order). The newest transition stays pending, and unsampleable, until the
following step's reward arrives to complete its bootstrap target.
"""

from dataclasses import dataclass, field

import numpy as np

PRIORITY_FLOOR = 1e-6


class ReplayError(RuntimeError):
    pass


class UnderfullError(ReplayError):
    """Fewer sampleable transitions than requested; skip the train step."""


@dataclass
class Transition:
    observation: object
    prev_action_context: object
    action: object
    r_t: float
    reward_map: object
    r_next: float | None = None     # pending until the next step finalizes it
    priority: float = 1.0
    insert_index: int = -1

    @property
    def pending(self):
        return self.r_next is None


@dataclass
class ReplayBuffer:
    capacity: int = 2000
    rank_exponent: float = 0.7
    _items: list = field(default_factory=list)
    _next_index: int = 0

    def __len__(self):
        return len(self._items)

    @property
    def has_pending(self):
        return bool(self._items) and self._items[-1].pending

    def pending_item(self):
        return self._items[-1] if self.has_pending else None

    def sampleable_count(self):
        return sum(not t.pending for t in self._items)

    def push(self, transition: Transition):
        """Store with priority equal to the current maximum (1.0 if empty)."""
        if self.has_pending:
            raise ReplayError("previous transition still pending; finalize first")
        transition.priority = max((t.priority for t in self._items), default=1.0)
        transition.insert_index = self._next_index
        self._next_index += 1
        self._items.append(transition)
        if len(self._items) > self.capacity:
            self._items.pop(0)

    def finalize_pending(self, r_next: float):
        """Attach the follow-up reward to the most recent transition."""
        if not self.has_pending:
            raise ReplayError("no pending transition to finalize")
        self._items[-1].r_next = float(r_next)

    def _rank_weights(self, items):
        """(1/rank)^omega per item, ranks by descending priority then insert
        order."""
        priorities = np.array([t.priority for t in items])
        inserted = np.array([t.insert_index for t in items])
        order = np.lexsort((inserted, -priorities))
        weights = np.empty(len(items))
        weights[order] = (1.0 / np.arange(1, len(items) + 1)) ** self.rank_exponent
        return weights

    def probabilities(self, items=None):
        """Normalized single-draw distribution over sampleable items."""
        items = items if items is not None else [t for t in self._items
                                                 if not t.pending]
        weights = self._rank_weights(items)
        return weights / weights.sum()

    def sample(self, k: int, rng: np.random.Generator):
        """Draw k distinct finalized transitions (sequential renormalized
        draws from the rank law); returns (items, ids)."""
        pool = [t for t in self._items if not t.pending]
        if len(pool) < k:
            raise UnderfullError(f"need {k} sampleable transitions, have {len(pool)}")
        weights = self._rank_weights(pool)
        chosen = []
        for _ in range(k):
            cdf = np.cumsum(weights)
            pos = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            pos = min(pos, len(pool) - 1)
            weights[pos] = 0.0
            chosen.append(pool[pos])
        return chosen, [t.insert_index for t in chosen]

    def update_priorities(self, ids, losses):
        """priority <- |loss| + floor; ids evicted in the meantime are skipped."""
        by_id = {t.insert_index: t for t in self._items}
        for insert_index, loss in zip(ids, losses):
            item = by_id.get(insert_index)
            if item is not None:
                item.priority = abs(float(loss)) + PRIORITY_FLOOR

    def dump_records(self):
        """Plain-dict view of the buffer for post-hoc inspection."""
        return [{"insert_index": t.insert_index, "r_t": t.r_t,
                 "r_next": t.r_next, "priority": t.priority,
                 "primitive": t.action.primitive.value,
                 "x": t.action.x, "y": t.action.y,
                 "theta_index": t.action.theta_index}
                for t in self._items]
