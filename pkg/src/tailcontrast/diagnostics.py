"""Process-wide counters for degenerate numeric events.

These never raise; they record how often a guarded fallback fired
(zero-norm features, skipped contrastive samples, ...) so runs can be
audited from the metrics stream.
"""
from collections import Counter

counters: Counter = Counter()


def bump(name: str, amount: int = 1) -> None:
    counters[name] += amount


def reset() -> None:
    counters.clear()
