"""Serialized mutation: one re-entrant lock per control plane."""

from __future__ import annotations

from functools import wraps


def synchronized(fn):
    """Run a method while holding ``self.lock``.

    The lock is re-entrant, so a pipeline that steps the clock while it
    waits can call back into other synchronized methods.
    """

    @wraps(fn)
    def wrapper(self, *args, **kwargs):
        with self.lock:
            return fn(self, *args, **kwargs)

    return wrapper
