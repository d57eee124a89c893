# SPDX-License-Identifier: Apache-2.0
"""Loss change allocation for a micro seq2seq transformer.

Thin wrappers over the C++ core. Paths may be str or os.PathLike; structured
results come back as plain dicts and lists.
"""

from __future__ import annotations

import json
import os
from typing import Any, Mapping, Sequence

from . import _lca_scope as _core
from ._lca_scope import (
    DegenerateInputError,
    DimensionError,
    Error,
    FormatError,
    IoError,
    NumericError,
    UsageError,
    VersionError,
)

__version__ = "0.1.0"

__all__ = [
    "Error", "UsageError", "DimensionError", "DegenerateInputError", "FormatError",
    "VersionError", "IoError", "NumericError",
    "desk_preset", "load_config", "gen_data", "train", "validate",
    "report_cumulative", "report_interval", "report_buckets",
    "read_trace", "export", "interval_lca", "moment_lca", "kendall_tau",
    "rank_by_magnitude", "repro",
]

_SPEC_KEYS = {"vocab", "n_examples", "min_len", "max_len", "zipf_exponent", "task", "seed"}


def _config_text(config: Mapping[str, Any] | str | os.PathLike) -> tuple[str, str]:
    if isinstance(config, Mapping):
        return json.dumps(dict(config)), ""
    path = os.fspath(config)
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise IoError(f"cannot read config '{path}': {e.strerror}") from None
    return text, os.path.dirname(os.path.abspath(path))


def desk_preset() -> dict:
    return json.loads(_core.desk_preset())


def load_config(config) -> dict:
    """Parsed and defaulted config; relative corpus paths are resolved."""
    return json.loads(_core.normalize_config(*_config_text(config)))


def gen_data(out, *, test_examples: int = 200, **spec) -> dict:
    """Writes train.tsv and test.tsv (plus sidecars) under out.

    Keyword arguments override the corpus spec: vocab, n_examples, min_len,
    max_len, zipf_exponent, task, seed.
    """
    unknown = set(spec) - _SPEC_KEYS
    if unknown:
        raise UsageError(f"unknown corpus option(s): {', '.join(sorted(unknown))}")
    return json.loads(_core.gen_data(os.fspath(out), json.dumps(spec), test_examples))


def train(config, out, *, lca: str | None = None, steps: int | None = None, lr: float | None = None,
          timestamps: bool = False) -> dict:
    """Trains with the config's instrumentation; the trace goes to out and run
    metadata to out + '.run.json'."""
    text, base = _config_text(config)
    cfg = json.loads(text)
    if lca is not None:
        cfg.setdefault("lca", {})["mode"] = lca
    if steps is not None:
        cfg.setdefault("optimizer", {})["steps"] = steps
    if lr is not None:
        cfg.setdefault("optimizer", {})["lr"] = lr
    return json.loads(_core.train(json.dumps(cfg), base, os.fspath(out), timestamps))


def validate(exact, approx) -> dict:
    return json.loads(_core.validate(os.fspath(exact), os.fspath(approx)))


def report_cumulative(trace, *, normalize: bool = False, out=None) -> dict:
    return json.loads(_core.report_cumulative(os.fspath(trace), normalize, os.fspath(out or "")))


def report_interval(trace, *, segments: int = 10, out=None) -> dict:
    return json.loads(_core.report_interval(os.fspath(trace), segments, os.fspath(out or "")))


def report_buckets(trace, corpus, *, side: str = "encoder", buckets: int = 25, out=None) -> dict:
    return json.loads(_core.report_buckets(os.fspath(trace), os.fspath(corpus), side, buckets,
                                           os.fspath(out or "")))


def read_trace(path) -> dict:
    """Header, finalized flag and every record. Rows are [row, value] pairs."""
    return json.loads(_core.read_trace(os.fspath(path)))


def export(trace, out, format: str = "csv") -> None:
    if format == "csv":
        _core.export_csv(os.fspath(trace), os.fspath(out))
    elif format == "json":
        _core.export_json(os.fspath(trace), os.fspath(out))
    else:
        raise UsageError(f"unknown export format '{format}' (expected csv|json)")


def interval_lca(trace, t1: int, t2: int) -> dict[str, float]:
    names, values = _core.interval_lca(os.fspath(trace), t1, t2)
    return dict(zip(names, values))


def moment_lca(grad: Sequence[float], delta: Sequence[float]) -> list[float]:
    return _core.moment_lca(list(grad), list(delta))


def kendall_tau(a: Sequence[str], b: Sequence[str]) -> float:
    return _core.kendall_tau(list(a), list(b))


def rank_by_magnitude(names: Sequence[str], values: Sequence[float]) -> list[str]:
    return _core.rank_by_magnitude(list(names), list(values))


def repro(out, config=None, *, steps: int | None = None, examples: int | None = None,
          timing_repeats: int = 1, timestamps: bool = False) -> dict:
    """The full desk pipeline under out; config defaults to desk_preset()."""
    cfg = desk_preset() if config is None else json.loads(_config_text(config)[0])
    if steps is not None:
        cfg["optimizer"]["steps"] = steps
    if examples is not None:
        cfg["data"]["synthetic"]["n_examples"] = examples
    return json.loads(_core.repro(json.dumps(cfg), os.fspath(out), timing_repeats, timestamps))
