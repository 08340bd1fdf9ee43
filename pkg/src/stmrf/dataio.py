"""Dataset ingestion, checkpoint persistence, manifests and table output.

The dataset format is long-form delimited text (comma or tab), one row
per (gene, region, period, replicate, value), with a required header; a
JSON sidecar declares the region vocabulary (with group labels) and the
period order, since replicate counts vary by (region, period) and a
rectangular matrix cannot express that.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import sys
import time
from dataclasses import asdict, is_dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .emission import ExpressionTensor, GmmEmissionParams
from .errors import CheckpointError, DataError
from .lattice import DeMrfParams, LatentGrid, LatticeShape, MrfParams
from .mcem import McemState, TraceEntry

log = logging.getLogger(__name__)

DATASET_COLUMNS = ("gene", "region", "period", "replicate", "value")


def fmt(x) -> str:
    """Full-precision, round-trippable decimal rendering of a number."""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def load_metadata(path):
    """Region names, group labels and period order from the JSON sidecar."""
    try:
        meta = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})") from e
    try:
        regions = [r["name"] for r in meta["regions"]]
        groups = np.array(
            [r.get("group", "neocortex") == "neocortex" for r in meta["regions"]]
        )
        periods = list(meta["periods"])
    except (KeyError, TypeError) as e:
        raise DataError(f"{path}: missing or malformed field {e}") from e
    if len(set(regions)) != len(regions) or len(set(periods)) != len(periods):
        raise DataError(f"{path}: duplicate region or period names")
    if not regions or not periods:
        raise DataError(f"{path}: regions and periods must be nonempty")
    return regions, groups, periods


def _sniff_delimiter(header_line: str) -> str:
    return "\t" if "\t" in header_line else ","


def load_dataset(path, metadata_path) -> ExpressionTensor:
    """Parse the long-form file into a padded tensor.

    Replicate counts are inferred per (region, period) and must not vary
    across genes. Genes are indexed by first appearance. Errors name the
    file, line and offending field.
    """
    regions, groups, periods = load_metadata(metadata_path)
    r_index = {r: i for i, r in enumerate(regions)}
    p_index = {p: i for i, p in enumerate(periods)}
    genes: dict[str, int] = {}
    rows: dict[tuple[int, int, int], list[tuple[str, float, int]]] = {}
    seen: set[tuple[str, str, str, str]] = set()

    with open(path, newline="") as fh:
        first = fh.readline()
        if not first:
            raise DataError(f"{path}: empty file")
        delim = _sniff_delimiter(first)
        header = [c.strip() for c in first.rstrip("\n").split(delim)]
        if sorted(header) != sorted(DATASET_COLUMNS):
            raise DataError(
                f"{path}:1: header must have columns {DATASET_COLUMNS}, got {header}"
            )
        reader = csv.DictReader(fh, fieldnames=header, delimiter=delim)
        for lineno, row in enumerate(reader, start=2):
            if row.get(None) or any(v is None for v in row.values()):
                raise DataError(f"{path}:{lineno}: wrong number of fields")
            key = (row["gene"], row["region"], row["period"], row["replicate"])
            if key in seen:
                raise DataError(
                    f"{path}:{lineno}: duplicate (gene, region, period, replicate) "
                    f"key {key}"
                )
            seen.add(key)
            if row["region"] not in r_index:
                raise DataError(f"{path}:{lineno}: unknown region {row['region']!r}")
            if row["period"] not in p_index:
                raise DataError(f"{path}:{lineno}: unknown period {row['period']!r}")
            try:
                value = float(row["value"])
            except ValueError:
                raise DataError(
                    f"{path}:{lineno}: non-numeric value {row['value']!r}"
                ) from None
            g = genes.setdefault(row["gene"], len(genes))
            b, t = r_index[row["region"]], p_index[row["period"]]
            rows.setdefault((b, g, t), []).append((row["replicate"], value, lineno))

    if not genes:
        raise DataError(f"{path}: no data rows")
    B, G, T = len(regions), len(genes), len(periods)
    n = np.zeros((B, T), dtype=np.int64)
    for (b, g, t), entries in rows.items():
        k = len(entries)
        if n[b, t] == 0:
            n[b, t] = k
        elif n[b, t] != k:
            raise DataError(
                f"{path}: replicate count for region {regions[b]!r} period "
                f"{periods[t]!r} varies across genes ({n[b, t]} vs {k} at line "
                f"{entries[0][2]})"
            )
    if (n == 0).any():
        b, t = np.argwhere(n == 0)[0]
        raise DataError(
            f"{path}: no data for region {regions[b]!r} period {periods[t]!r}"
        )
    missing = [
        (b, g, t)
        for b in range(B)
        for g in range(G)
        for t in range(T)
        if (b, g, t) not in rows
    ]
    if missing:
        b, g, t = missing[0]
        gene = next(k for k, v in genes.items() if v == g)
        raise DataError(
            f"{path}: gene {gene!r} has no replicates for region {regions[b]!r} "
            f"period {periods[t]!r}"
        )
    values = np.full((B, G, T, int(n.max())), np.nan)
    for (b, g, t), entries in rows.items():
        entries.sort(key=lambda e: e[0])  # deterministic replicate order
        values[b, g, t, : len(entries)] = [v for _, v, _ in entries]
    gene_names = [k for k, _ in sorted(genes.items(), key=lambda kv: kv[1])]
    return ExpressionTensor(values, n, regions, periods, gene_names, neocortex=groups)


def write_dataset(tensor: ExpressionTensor, path) -> None:
    """Long-form dump that round-trips bit-exactly through load_dataset."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DATASET_COLUMNS)
        B, G, T, _ = tensor.values.shape
        for g in range(G):
            for b in range(B):
                for t in range(T):
                    for k in range(tensor.n[b, t]):
                        w.writerow(
                            [
                                tensor.genes[g],
                                tensor.regions[b],
                                tensor.periods[t],
                                f"rep{k + 1}",
                                fmt(tensor.values[b, g, t, k]),
                            ]
                        )


def write_metadata(tensor: ExpressionTensor, path) -> None:
    groups = tensor.neocortex
    meta = {
        "regions": [
            {
                "name": r,
                "group": "neocortex" if groups is None or groups[i] else "non-neocortex",
            }
            for i, r in enumerate(tensor.regions)
        ],
        "periods": list(tensor.periods),
    }
    Path(path).write_text(json.dumps(meta, indent=2) + "\n")


def write_rows(path, rows, fields=None) -> None:
    """Delimited table from dataclasses or dicts, full-precision floats."""
    dicts = [asdict(r) if is_dataclass(r) else dict(r) for r in rows]
    if not dicts:
        raise ValueError("nothing to write")
    fields = fields or list(dicts[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for d in dicts:
            w.writerow([fmt(d[f]) for f in fields])


# -- checkpoints --------------------------------------------------------------


def _state_payload(state: McemState) -> dict[str, np.ndarray]:
    arrays = {
        "states": state.grid.states,
        "params": state.params.as_vector(),
        "trace_params": np.array([e.params for e in state.trace])
        if state.trace
        else np.zeros((0, len(state.params.as_vector()))),
        "trace_q": np.array(
            [[e.q_before, e.q_after] for e in state.trace]
        ).reshape(-1, 2),
        "trace_stage": np.array([e.stage for e in state.trace], dtype=np.int64),
    }
    if state.grid.mask is not None:
        arrays["mask"] = state.grid.mask
    if isinstance(state.params, DeMrfParams):
        arrays["neocortex"] = state.params.neocortex
    if state.theta is not None:
        th = state.theta
        arrays["theta"] = np.stack([th.mu1, th.sigma1, th.mu2, th.sigma2])
        arrays["theta_weight"] = (
            th.weight if th.weight is not None else np.full_like(th.mu1, np.nan)
        )
        arrays["sigma0"] = np.array([th.sigma0])
    return arrays


def _digest(arrays: dict[str, np.ndarray], meta: str) -> str:
    h = hashlib.sha256()
    h.update(meta.encode())
    for key in sorted(arrays):
        h.update(key.encode())
        h.update(np.ascontiguousarray(arrays[key]).tobytes())
    return h.hexdigest()


def save_checkpoint(state: McemState, path) -> None:
    """Serialize an MCEM state; written atomically via a temp file."""
    arrays = _state_payload(state)
    meta = json.dumps(
        {
            "kind": state.kind,
            "iteration": state.iteration,
            "seed": state.seed,
            "converged": state.converged,
            "conv_streak": state.conv_streak,
            "shape": state.grid.shape.dims,
            "version": __version__,
        },
        sort_keys=True,
    )
    arrays["meta"] = np.frombuffer(meta.encode(), dtype=np.uint8)
    arrays["digest"] = np.frombuffer(
        _digest({k: v for k, v in arrays.items() if k != "digest"}, "").encode(),
        dtype=np.uint8,
    )
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)


def load_checkpoint(path, expect_shape: LatticeShape | None = None) -> McemState:
    """Reload a checkpoint, verifying integrity before constructing state."""
    try:
        with np.load(path) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except (OSError, ValueError, KeyError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from e
    if "digest" not in arrays or "meta" not in arrays:
        raise CheckpointError(f"{path}: missing integrity fields")
    stored = bytes(arrays.pop("digest")).decode()
    recomputed = _digest(arrays, "")
    if stored != recomputed:
        raise CheckpointError(f"{path}: digest mismatch; refusing partial load")
    meta = json.loads(bytes(arrays.pop("meta")).decode())

    shape = LatticeShape(*meta["shape"])
    if expect_shape is not None and shape != expect_shape:
        raise CheckpointError(
            f"{path}: checkpoint lattice {shape.dims} does not match "
            f"expected {expect_shape.dims}"
        )
    mask = arrays.get("mask")
    grid = LatentGrid(shape, arrays["states"], mask)
    vec = arrays["params"]
    if meta["kind"] == "de":
        params = DeMrfParams.from_vector(vec, arrays["neocortex"])
    else:
        params = MrfParams.from_vector(vec)
    theta = None
    if "theta" in arrays:
        th = arrays["theta"]
        weight = arrays["theta_weight"]
        theta = GmmEmissionParams(
            th[0], th[1], th[2], th[3], float(arrays["sigma0"][0]),
            None if np.isnan(weight).all() else weight,
        )
    trace = [
        TraceEntry(i, int(arrays["trace_stage"][i]), arrays["trace_params"][i],
                   float(arrays["trace_q"][i, 0]), float(arrays["trace_q"][i, 1]))
        for i in range(len(arrays["trace_stage"]))
    ]
    return McemState(
        meta["kind"], params, theta, grid, int(meta["iteration"]), trace,
        int(meta["seed"]), bool(meta["converged"]), int(meta["conv_streak"]),
    )


# -- run manifests -------------------------------------------------------------


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def run_manifest(command: str, config: dict, seed, inputs: dict) -> dict:
    """Everything needed to reproduce a run: config, seed, input digests."""
    return {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {str(p): file_digest(p) for p in inputs.values() if p},
        "versions": {
            "stmrf": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
        },
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }


def write_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, default=str) + "\n")
