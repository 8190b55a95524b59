"""Deterministic-mode switch.

``MNLAB_DETERMINISTIC=1`` pins BLAS to one thread during training and forces
sweeps to run cells sequentially, so repeated runs are bitwise identical.
"""

from __future__ import annotations

import contextlib
import os

ENV_VAR = "MNLAB_DETERMINISTIC"


def deterministic() -> bool:
    return os.environ.get(ENV_VAR, "").strip().lower() in ("1", "true", "yes", "on")


@contextlib.contextmanager
def thread_limit(force: bool = False):
    if not (force or deterministic()):
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield
