"""File formats: edge lists, dense CSV networks, fit artifacts and result tables.

Every file written here starts with a single header line

    # latentinf <kind> version=<v> seed=<seed> config=<sha256 of the config>

Reals are written with 17 significant digits so values round-trip exactly.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from . import __version__
from .model import Family, LatentState, ModelSpec, Network

log = logging.getLogger(__name__)


class EdgeListError(ValueError):
    pass


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "nan" if np.isnan(x) else f"{float(x):.17g}"
    if x is None:
        return ""
    return str(x)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def header_line(kind: str, config: dict, seed=None) -> str:
    return (f"# latentinf {kind} version={__version__} seed={'' if seed is None else seed} "
            f"config={config_hash(config)}\n")


# ---------------------------------------------------------------- edge lists

@dataclass
class IngestReport:
    lines: int = 0
    raw_edges: int = 0
    duplicates: int = 0
    self_loops: int = 0
    nodes_total: int = 0
    components: int = 0
    n: int = 0
    edges: int = 0


def _label_key(labels: Sequence[str]):
    try:
        [int(s) for s in labels]
    except ValueError:
        return lambda s: (1, s)
    return lambda s: (0, int(s))


def ingest_edge_list(path, family=Family.BERNOULLI, largest_component: bool = True,
                     report: Optional[IngestReport] = None) -> Network:
    """Read a whitespace-separated edge list into an undirected simple network.

    Lines are ``label label [weight]``; ``#`` starts a comment. Repeated pairs
    collapse to one edge (first weight kept), self-loops are dropped with a
    warning. Only the largest connected component is kept; among equally large
    components the one holding the smallest label wins (labels compare as
    integers when all are integers). Nodes keep their order of first appearance.
    """
    family = Family(family)
    report = report if report is not None else IngestReport()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise EdgeListError(f"cannot read {path}: {exc}") from exc

    index: dict = {}
    labels: List[str] = []
    pairs: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        report.lines += 1
        parts = line.split()
        if len(parts) not in (2, 3):
            raise EdgeListError(f"{path}:{lineno}: expected 2 or 3 fields, got {len(parts)}")
        weight = 1.0
        if len(parts) == 3:
            try:
                weight = float(parts[2])
            except ValueError:
                raise EdgeListError(f"{path}:{lineno}: weight {parts[2]!r} is not a number") from None
            if not np.isfinite(weight):
                raise EdgeListError(f"{path}:{lineno}: weight must be finite")
        if family is Family.BERNOULLI:
            weight = 1.0
        a, b = parts[0], parts[1]
        report.raw_edges += 1
        if a == b:
            report.self_loops += 1
            continue
        for lab in (a, b):
            if lab not in index:
                index[lab] = len(labels)
                labels.append(lab)
        key = tuple(sorted((index[a], index[b])))
        if key in pairs:
            report.duplicates += 1
            continue
        pairs[key] = weight
    if report.self_loops:
        log.warning("dropped %d self-loop line(s) from %s", report.self_loops, path)
    if not pairs:
        raise EdgeListError(f"{path}: no edges")

    N = len(labels)
    ij = np.array(list(pairs), dtype=int)
    w = np.array(list(pairs.values()), dtype=float)
    adj = coo_matrix((np.ones(len(w)), (ij[:, 0], ij[:, 1])), shape=(N, N))
    ncomp, comp = connected_components(adj, directed=False)
    report.nodes_total, report.components = N, int(ncomp)

    keep = np.arange(N)
    if largest_component and ncomp > 1:
        sizes = np.bincount(comp)
        key = _label_key(labels)
        smallest = [min((labels[i] for i in np.flatnonzero(comp == c)), key=key)
                    for c in range(ncomp)]
        best = min(range(ncomp), key=lambda c: (-sizes[c], key(smallest[c])))
        keep = np.flatnonzero(comp == best)
    pos = -np.ones(N, dtype=int)
    pos[keep] = np.arange(keep.size)
    A = np.zeros((keep.size, keep.size))
    for (i, j), v in zip(ij, w):
        if pos[i] >= 0 and pos[j] >= 0:
            A[pos[i], pos[j]] = A[pos[j], pos[i]] = v
    net = Network(A, family, tuple(labels[i] for i in keep))
    report.n, report.edges = net.n, net.n_edges
    return net


def _labels(net: Network):
    return net.labels if net.labels is not None else tuple(str(i) for i in range(net.n))


def write_edge_list(net: Network, path, header: str = "") -> None:
    labs = _labels(net)
    iu, ju = np.nonzero(np.triu(net.edges, 1))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header)
        for i, j in zip(iu, ju):
            if net.family is Family.BERNOULLI:
                fh.write(f"{labs[i]} {labs[j]}\n")
            else:
                fh.write(f"{labs[i]} {labs[j]} {fmt(net.edges[i, j])}\n")


def write_dense_csv(net: Network, path, header: str = "") -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        for row in net.edges:
            w.writerow([fmt(float(v)) for v in row])


def read_dense_csv(path, family=Family.BERNOULLI) -> Network:
    rows = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines()
            if ln.strip() and not ln.startswith("#")]
    A = np.array([[float(v) for v in ln.split(",")] for ln in rows])
    return Network(A, family)


def read_network(path, family=Family.BERNOULLI, fmt_: Optional[str] = None) -> Network:
    """Edge list unless the file name ends in ``.csv`` (or ``fmt_="dense"``)."""
    kind = fmt_ or ("dense" if str(path).endswith(".csv") else "edgelist")
    if kind == "dense":
        return read_dense_csv(path, family)
    return ingest_edge_list(path, family)


# ---------------------------------------------------------------- fit artifacts

def write_fit(path, net: Network, state: LatentState, spec: ModelSpec, meta: dict,
              header: str = "") -> None:
    labs = _labels(net)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(header)
        fh.write(f"# family={spec.family.value} r={spec.r} M={fmt(spec.M)} delta={fmt(spec.delta)} "
                 f"sparse={int(spec.sparse_mode)}\n")
        fh.write(f"# rho={fmt(state.rho)}\n")
        fh.write("# " + " ".join(f"{k}={fmt(v)}" for k, v in meta.items()) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"z{k + 1}" for k in range(state.r)] + ["alpha"])
        for i in range(state.n):
            w.writerow([labs[i]] + [fmt(v) for v in state.Z[i]] + [fmt(state.alpha[i])])


@dataclass
class FitArtifact:
    labels: tuple
    state: LatentState
    spec: ModelSpec
    meta: dict


def read_fit(path) -> FitArtifact:
    meta = {}
    body = []
    for ln in Path(path).read_text(encoding="utf-8").splitlines():
        if ln.startswith("#"):
            for tok in ln[1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    meta[k] = v
        elif ln.strip():
            body.append(ln)
    rows = list(csv.reader(body))
    head, rows = rows[0], rows[1:]
    r = len(head) - 2
    labels = tuple(row[0] for row in rows)
    vals = np.array([[float(v) for v in row[1:]] for row in rows]).reshape(len(rows), r + 1)
    spec = ModelSpec(family=meta.get("family", "bernoulli"), r=int(meta.get("r", r)),
                     M=float(meta.get("M", 10.0)), delta=float(meta.get("delta", 1.0)),
                     sparse_mode=meta.get("sparse", "0") == "1")
    state = LatentState(vals[:, :r], vals[:, r], float(meta.get("rho", 0.0)))
    return FitArtifact(labels, state, spec, meta)


# ---------------------------------------------------------------- tables

def write_table(path, rows: Iterable[dict], columns: Sequence[str], header: str = "") -> None:
    buf = _io.StringIO()
    buf.write(header)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(row.get(c)) for c in columns])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
