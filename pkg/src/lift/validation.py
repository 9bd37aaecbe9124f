"""Argument checks shared by the estimator wrappers and the CLI."""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .builder import PromptExample
from .corpus import DATASETS, Timeline
from .errors import LayerOutOfRange


def check_timelines(X) -> list[Timeline]:
    """A non-empty list of :class:`Timeline`; a mapping of dataset -> timelines is flattened."""
    if isinstance(X, dict):
        X = [tl for tls in X.values() for tl in tls]
    X = list(X)
    if not X:
        raise ValueError("expected at least one timeline")
    bad = [type(x).__name__ for x in X if not isinstance(x, Timeline)]
    if bad:
        raise TypeError(f"expected Timeline objects, got {sorted(set(bad))}")
    return X


def check_examples(X, *, same_dataset: bool = False) -> list[PromptExample]:
    X = list(X)
    if not X:
        raise ValueError("expected at least one prompt example")
    bad = [type(x).__name__ for x in X if not isinstance(x, PromptExample)]
    if bad:
        raise TypeError(f"expected PromptExample objects, got {sorted(set(bad))}")
    if same_dataset and len({x.dataset_id for x in X}) > 1:
        raise ValueError("examples mix datasets; score one dataset at a time")
    return X


def check_dataset(dataset_id: str) -> str:
    if dataset_id not in DATASETS:
        raise ValueError(f"unknown dataset {dataset_id!r}; expected one of {', '.join(DATASETS)}")
    return dataset_id


def check_labels(y: Sequence, n: int) -> list[str]:
    y = [str(v) for v in y]
    if len(y) != n:
        raise ValueError(f"got {len(y)} labels for {n} examples")
    return y


def check_layers(layers: Iterable[int], n_layers: int) -> list[int]:
    """Layer indices into hidden states, 0 (embeddings) through ``n_layers`` (last block output)."""
    out = sorted({int(l) for l in layers})
    if not out:
        raise ValueError("no layers given")
    if out[0] < 0 or out[-1] > n_layers:
        raise LayerOutOfRange(f"layers must lie in 0..{n_layers}, got {out}")
    return out


def parse_layers(spec: str, n_layers: int) -> list[int]:
    """``"all"``, ``"a..b"`` (inclusive) or a comma list such as ``"0,2,4"``."""
    spec = spec.strip()
    if spec == "all":
        return list(range(n_layers + 1))
    if ".." in spec:
        a, b = spec.split("..", 1)
        return check_layers(range(int(a), int(b) + 1), n_layers)
    return check_layers((int(p) for p in spec.split(",") if p.strip()), n_layers)


def check_features(X, y=None) -> tuple[np.ndarray, np.ndarray | None]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("features contain NaN or inf")
    if y is None:
        return X, None
    y = np.asarray(y)
    if len(y) != len(X):
        raise ValueError(f"{len(X)} rows but {len(y)} labels")
    return X, y
