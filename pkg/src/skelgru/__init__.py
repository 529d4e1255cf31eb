"""Skeleton-sequence gesture classifier: graph layers per frame, gated
recurrence across frames, attention pooling over time, trained end to end
on a hand-rolled tape."""

__version__ = "0.1.0"
