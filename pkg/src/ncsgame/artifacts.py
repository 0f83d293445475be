"""On-disk formats: gain container, CSV exports and atomic writes.

Gain container (UTF-8 text)::

    ncsgame-gains 1
    {"M": 2, "K": 1, "p": 2, "N": 50, "mode": "perfect", "seed": 0, ...}
    i k rows cols v_0 v_1 ... (row-major L_{i,k}, shortest round-trip reprs)

One matrix line per ``(i, k)``, ordered by ``k`` then ``i``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .discretization import PlantSpec
from .network import NetworkSpec

__all__ = [
    "CompatibilityError",
    "spec_hash",
    "atomic_write",
    "dump_schedule",
    "write_schedule",
    "read_schedule",
    "write_A_csv",
    "write_csv",
]

MAGIC = "ncsgame-gains 1"


class CompatibilityError(ValueError):
    """A stored artifact does not belong to the requested scenario."""


def _network_dict(network: NetworkSpec) -> dict:
    try:
        return network.to_dict()
    except ValueError:
        # non-uniform delay laws have no config form; hash their repr instead
        return {"p": network.p, "p_sc": network.p_sc.tolist(), "p_ca": network.p_ca.tolist(),
                "p_link": network.p_link.tolist(), "info_mode": network.info_mode,
                "delay_models": [repr(m) for m in network.delay_models]}


def spec_hash(plant: PlantSpec, network: NetworkSpec) -> str:
    """SHA-256 of the canonical JSON of the plant and network (information mode included)."""
    blob = json.dumps({"plant": plant.to_dict(), "network": _network_dict(network)},
                      sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def atomic_write(path, data: str) -> Path:
    """Write ``data`` to a temporary sibling and rename it over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(values))


def dump_schedule(schedule) -> str:
    header = {
        "M": schedule.M, "K": schedule.K, "p": schedule.p, "N": schedule.N,
        "mode": schedule.mode, "seed": schedule.seed, "n_samples": schedule.n_samples,
        "method": schedule.method, "spec_hash": schedule.spec_hash,
    }
    lines = [MAGIC, json.dumps(header, sort_keys=True)]
    for k, Lk in enumerate(schedule.L):
        for i in range(schedule.p):
            r, c = Lk[i].shape
            lines.append(f"{i} {k} {r} {c} {_fmt(Lk[i])}".rstrip())
    return "\n".join(lines) + "\n"


def write_schedule(schedule, path) -> Path:
    return atomic_write(path, dump_schedule(schedule))


def read_schedule(path, expect_hash: str | None = None):
    from .solver import GainSchedule

    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != MAGIC:
        raise ValueError(f"{path}: not a gain container (line 1)")
    try:
        head = json.loads(lines[1])
    except (IndexError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: malformed header on line 2: {exc}") from None
    if expect_hash is not None and head.get("spec_hash") != expect_hash:
        raise CompatibilityError(f"{path}: gains were solved for spec {head.get('spec_hash')}, "
                                 f"scenario is {expect_hash}")
    p, N = head["p"], head["N"]
    L = [np.zeros((p, head["K"], head["M"] + p * k * head["K"])) for k in range(N)]
    seen = set()
    for lineno, line in enumerate(lines[2:], start=3):
        parts = line.split()
        try:
            i, k, r, c = (int(v) for v in parts[:4])
            vals = np.array([float(v) for v in parts[4:]])
            L[k][i] = vals.reshape(r, c)
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}: bad matrix record on line {lineno}: {exc}") from None
        seen.add((i, k))
    if len(seen) != p * N:
        raise ValueError(f"{path}: expected {p * N} matrices, found {len(seen)}")
    return GainSchedule(M=head["M"], K=head["K"], p=p, N=N, mode=head["mode"], L=L,
                        seed=head.get("seed"), n_samples=head.get("n_samples"),
                        method=head.get("method", "mc"), spec_hash=head.get("spec_hash", ""))


def write_csv(path, header, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return atomic_write(path, buf.getvalue())


def write_A_csv(schedule, path) -> Path:
    """State-feedback blocks ``A_i^k`` as rows ``(i, k, r, c, value)``."""
    rows = []
    for k in range(schedule.N):
        for i in range(schedule.p):
            A = schedule.A(i, k)
            for r in range(A.shape[0]):
                for c in range(A.shape[1]):
                    rows.append((i + 1, k, r, c, float(A[r, c])))
    return write_csv(path, ["controller", "k", "row", "col", "value"], rows)
