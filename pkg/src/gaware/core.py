"""Shared data model: estimate tables, raw studies, partitions and tree models.

Everything here is immutable after construction. Arrays are flagged
read-only so that tables can be handed to worker processes or threads
without defensive copies.
"""
from __future__ import annotations

import csv
import json
import math
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import FormatError, ValidationError

TREE_FORMAT_VERSION = 1
WEIGHT_RATIO_WARNING = 1e6


def _frozen(a, dtype=float, ndim=None) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TypeRow:
    type_id: str
    covariates: tuple
    weight: float
    phi_hat: tuple
    eta2_hat: tuple


@dataclass(frozen=True, eq=False)
class EstimateTable:
    """Per-type estimates: the common input of every fitter.

    Rows are stored column-wise. ``X`` has shape (n, r), ``phi`` and ``eta2``
    have shape (n, Q) and ``w`` holds the weights, renormalized to sum to one
    on construction.
    """

    type_ids: tuple
    X: np.ndarray
    w: np.ndarray
    phi: np.ndarray
    eta2: np.ndarray
    outcome_names: tuple
    covariate_names: tuple
    provenance: Mapping = field(default_factory=dict)

    def __post_init__(self):
        ids = tuple(str(t) for t in self.type_ids)
        X = _frozen(self.X, ndim=2)
        phi = _frozen(self.phi, ndim=2)
        eta2 = _frozen(self.eta2, ndim=2)
        w = np.array(self.w, dtype=float).ravel()
        n = len(ids)
        if n == 0:
            raise ValidationError("estimate table has no rows")
        onames = tuple(str(s) for s in self.outcome_names)
        cnames = tuple(str(s) for s in self.covariate_names)
        if X.shape != (n, len(cnames)):
            raise ValidationError(f"covariates have shape {X.shape}, expected {(n, len(cnames))}")
        if phi.shape != (n, len(onames)) or eta2.shape != phi.shape:
            raise ValidationError("estimate and variance columns must match the outcome names")
        if w.shape != (n,):
            raise ValidationError("one weight per row required")
        if len(set(ids)) != n:
            seen, dup = set(), []
            for t in ids:
                if t in seen:
                    dup.append(t)
                seen.add(t)
            raise ValidationError(f"duplicate type ids: {sorted(set(dup))[:5]}")
        for name, arr in (("covariate", X), ("phi_hat", phi), ("eta2_hat", eta2)):
            bad = ~np.isfinite(arr).all(axis=1)
            if bad.any():
                raise ValidationError(f"non-finite {name} value in row {int(np.argmax(bad)) + 1}")
        if not np.isfinite(w).all():
            raise ValidationError(f"non-finite weight in row {int(np.argmax(~np.isfinite(w))) + 1}")
        if (w <= 0).any():
            raise ValidationError(f"weight must be positive (row {int(np.argmax(w <= 0)) + 1})")
        if (eta2 < 0).any():
            raise ValidationError(f"negative variance in row {int(np.argmax((eta2 < 0).any(axis=1))) + 1}")
        total = float(w.sum())
        prov = dict(self.provenance)
        # already-normalized input is left untouched so that ingestion is idempotent
        if abs(total - 1.0) > 1e-12:
            w = w / total
            prov.setdefault("renormalization_factor", total)
        if w.max() / w.min() > WEIGHT_RATIO_WARNING:
            warnings.warn("max/min weight ratio exceeds 1e6", stacklevel=3)
        w.setflags(write=False)
        object.__setattr__(self, "type_ids", ids)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "eta2", eta2)
        object.__setattr__(self, "outcome_names", onames)
        object.__setattr__(self, "covariate_names", cnames)
        object.__setattr__(self, "provenance", prov)

    def __len__(self) -> int:
        return len(self.type_ids)

    @property
    def n_outcomes(self) -> int:
        return self.phi.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.X.shape[1]

    @property
    def rows(self) -> Iterator[TypeRow]:
        for i, t in enumerate(self.type_ids):
            yield TypeRow(t, tuple(self.X[i]), float(self.w[i]), tuple(self.phi[i]), tuple(self.eta2[i]))

    def index_of(self) -> dict:
        return {t: i for i, t in enumerate(self.type_ids)}

    def subset(self, idx, *, suffix_duplicates: bool = False) -> "EstimateTable":
        """Rows ``idx`` as a new table (weights renormalized).

        With ``suffix_duplicates`` repeated indices become distinct rows whose
        ids carry a ``#k`` suffix, which is how bootstrap resamples are built.
        """
        idx = np.asarray(idx, dtype=int)
        ids = [self.type_ids[i] for i in idx]
        if suffix_duplicates:
            seen: dict = {}
            out = []
            for t in ids:
                k = seen.get(t, 0)
                seen[t] = k + 1
                out.append(t if k == 0 else f"{t}#{k}")
            ids = out
        return EstimateTable(tuple(ids), self.X[idx], self.w[idx], self.phi[idx], self.eta2[idx],
                             self.outcome_names, self.covariate_names, {"parent_rows": len(self)})

    def with_weights(self, w) -> "EstimateTable":
        return EstimateTable(self.type_ids, self.X, w, self.phi, self.eta2,
                             self.outcome_names, self.covariate_names, dict(self.provenance))

    def equals(self, other: "EstimateTable") -> bool:
        """Exact equality of ids, names and every numeric field."""
        return (self.type_ids == other.type_ids
                and self.outcome_names == other.outcome_names
                and self.covariate_names == other.covariate_names
                and all(np.array_equal(a, b) for a, b in
                        ((self.X, other.X), (self.w, other.w), (self.phi, other.phi), (self.eta2, other.eta2))))


@dataclass(frozen=True, eq=False)
class RawStudy:
    """Unit-level experimental data.

    ``Y`` is (n, Q), ``D`` binary treatment, ``o`` the known propensity,
    ``X`` the (n, r) covariates and ``env`` an environment label per unit.
    """

    Y: np.ndarray
    D: np.ndarray
    o: np.ndarray
    X: np.ndarray
    env: tuple
    outcome_names: tuple
    covariate_names: tuple

    def __post_init__(self):
        Y = _frozen(self.Y, ndim=2)
        X = _frozen(self.X, ndim=2)
        D = _frozen(self.D).ravel()
        o = _frozen(self.o).ravel()
        n = Y.shape[0]
        env = tuple(str(e) for e in self.env)
        if not (X.shape[0] == D.shape[0] == o.shape[0] == len(env) == n):
            raise ValidationError("raw study columns have different lengths")
        if Y.shape[1] != len(self.outcome_names) or X.shape[1] != len(self.covariate_names):
            raise ValidationError("column names do not match data shape")
        if not np.isin(D, (0.0, 1.0)).all():
            raise ValidationError("treatment must be 0 or 1")
        bad = ~((o > 0) & (o < 1))
        if bad.any():
            raise ValidationError(f"propensity outside (0,1) for unit {int(np.argmax(bad)) + 1}")
        for name, arr in (("outcome", Y), ("covariate", X)):
            if not np.isfinite(arr).all():
                raise ValidationError(f"non-finite {name} for unit {int(np.argmax(~np.isfinite(arr).all(axis=1))) + 1}")
        for k, v in (("Y", Y), ("X", X), ("D", D), ("o", o), ("env", env)):
            object.__setattr__(self, k, v)
        object.__setattr__(self, "outcome_names", tuple(self.outcome_names))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))

    def __len__(self) -> int:
        return self.Y.shape[0]

    def subset(self, idx) -> "RawStudy":
        idx = np.asarray(idx, dtype=int)
        return RawStudy(self.Y[idx], self.D[idx], self.o[idx], self.X[idx],
                        tuple(self.env[i] for i in idx), self.outcome_names, self.covariate_names)


@dataclass(frozen=True, eq=False)
class Partition:
    """Assignment of type ids to labels 1..G; label 1 is the basin of ignorance."""

    type_ids: tuple
    labels: np.ndarray
    G: int

    def __post_init__(self):
        labels = np.array(self.labels, dtype=int).ravel()
        ids = tuple(str(t) for t in self.type_ids)
        if len(ids) != labels.size:
            raise ValidationError("one label per type id required")
        if self.G < 2:
            raise ValidationError("G must be at least 2")
        if labels.size and (labels.min() < 1 or labels.max() > self.G):
            raise ValidationError(f"labels must lie in 1..{self.G}")
        labels.setflags(write=False)
        object.__setattr__(self, "type_ids", ids)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_mapping(cls, mapping: Mapping, G: int) -> "Partition":
        ids = sorted(mapping)
        return cls(tuple(ids), np.array([mapping[t] for t in ids], dtype=int), G)

    def as_dict(self) -> dict:
        return dict(zip(self.type_ids, self.labels.tolist()))

    def aligned(self, table: EstimateTable) -> np.ndarray:
        """Labels in the row order of ``table``."""
        if self.type_ids == table.type_ids:
            return self.labels
        lookup = self.as_dict()
        try:
            return np.array([lookup[t] for t in table.type_ids], dtype=int)
        except KeyError as exc:
            raise ValidationError(f"partition has no label for type {exc.args[0]!r}") from None

    def predicted(self, table: EstimateTable) -> np.ndarray:
        return self.aligned(table) > 1


# -- tree model -------------------------------------------------------------

@dataclass(frozen=True)
class Node:
    var: int
    value: float
    left: tuple   # ("node" | "leaf", index)
    right: tuple


@dataclass(frozen=True)
class Leaf:
    ignorance: bool
    label: int
    prediction: tuple | None
    count: int = 0
    mass: float = 0.0


@dataclass(frozen=True)
class TreeModel:
    """Binary split tree with abstaining leaves.

    Types go left when ``x[var] <= value``. The root is node 0 when there is
    at least one branch node, otherwise leaf 0.
    """

    nodes: tuple
    leaves: tuple
    depth: int
    meta: Mapping = field(default_factory=dict)

    @property
    def root(self) -> tuple:
        return ("node", 0) if self.nodes else ("leaf", 0)

    def leaf_index(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.empty(X.shape[0], dtype=int)
        stack = [(self.root, np.arange(X.shape[0]))]
        while stack:
            (kind, i), rows = stack.pop()
            if kind == "leaf":
                out[rows] = i
                continue
            nd = self.nodes[i]
            go_left = X[rows, nd.var] <= nd.value
            stack.append((nd.left, rows[go_left]))
            stack.append((nd.right, rows[~go_left]))
        return out

    def partition(self, table: EstimateTable) -> Partition:
        G = int(self.meta.get("G", max([lf.label for lf in self.leaves] + [2])))
        leaf = self.leaf_index(table.X)
        labels = np.array([self.leaves[k].label for k in leaf], dtype=int)
        return Partition(table.type_ids, labels, G)

    def predict(self, X) -> np.ndarray:
        """Per-row predictions, NaN where the row falls in an ignorance leaf."""
        leaf = self.leaf_index(X)
        q = next((len(lf.prediction) for lf in self.leaves if lf.prediction is not None), 1)
        out = np.full((leaf.size, q), np.nan)
        for k, lf in enumerate(self.leaves):
            if lf.prediction is not None:
                out[leaf == k] = lf.prediction
        return out

    def used_variables(self) -> set:
        return {nd.var for nd in self.nodes}

    def validate(self, table: EstimateTable | None = None, atol: float = 1e-9) -> list:
        """Return a list of invariant violations (empty when the tree is valid)."""
        problems = []
        G = self.meta.get("G")
        seen_nodes, seen_leaves = set(), set()
        stack = [(self.root, 0)]
        max_depth = 0
        while stack:
            (kind, i), d = stack.pop()
            max_depth = max(max_depth, d)
            if kind == "leaf":
                if not 0 <= i < len(self.leaves):
                    problems.append(f"dangling leaf reference {i}")
                elif i in seen_leaves:
                    problems.append(f"leaf {i} referenced twice")
                seen_leaves.add(i)
                continue
            if kind != "node" or not 0 <= i < len(self.nodes):
                problems.append(f"dangling reference {(kind, i)}")
                continue
            if i in seen_nodes:
                problems.append(f"node {i} referenced twice")
                continue
            seen_nodes.add(i)
            nd = self.nodes[i]
            if not math.isfinite(nd.value):
                problems.append(f"node {i} has a non-finite split value")
            stack.append((tuple(nd.left), d + 1))
            stack.append((tuple(nd.right), d + 1))
        if len(seen_nodes) != len(self.nodes) or len(seen_leaves) != len(self.leaves):
            problems.append("unreachable nodes or leaves")
        if max_depth > self.depth:
            problems.append(f"tree depth {max_depth} exceeds {self.depth}")
        labels = [lf.label for lf in self.leaves if not lf.ignorance]
        if len(labels) != len(set(labels)):
            problems.append("archetype labels are not distinct")
        if any(lab < 2 for lab in labels):
            problems.append("archetype leaf carries label < 2")
        if G is not None and len(labels) > G - 1:
            problems.append(f"{len(labels)} archetype leaves exceed G-1 = {G - 1}")
        for k, lf in enumerate(self.leaves):
            if lf.ignorance and (lf.label != 1 or lf.prediction is not None):
                problems.append(f"ignorance leaf {k} must have label 1 and no prediction")
            if not lf.ignorance:
                if lf.prediction is None or not all(math.isfinite(v) for v in lf.prediction):
                    problems.append(f"archetype leaf {k} lacks a finite prediction")
                if G is not None and lf.label > G:
                    problems.append(f"leaf {k} label exceeds G")
        if table is not None and not problems:
            leaf = self.leaf_index(table.X)
            for k, lf in enumerate(self.leaves):
                if lf.ignorance:
                    continue
                m = leaf == k
                if not m.any():
                    problems.append(f"archetype leaf {k} has no members")
                    continue
                mean = table.w[m] @ table.phi[m] / table.w[m].sum()
                if not np.allclose(mean, lf.prediction, atol=atol, rtol=0):
                    problems.append(f"leaf {k} prediction differs from its group mean")
        return problems

    # serialization
    def to_dict(self) -> dict:
        return {
            "format_version": TREE_FORMAT_VERSION,
            "depth": self.depth,
            "meta": dict(self.meta),
            "nodes": [{"var": nd.var, "value": nd.value, "left": list(nd.left), "right": list(nd.right)}
                      for nd in self.nodes],
            "leaves": [{"ignorance": lf.ignorance, "label": lf.label,
                        "prediction": None if lf.prediction is None else list(lf.prediction),
                        "count": lf.count, "mass": lf.mass} for lf in self.leaves],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TreeModel":
        if not isinstance(d, Mapping):
            raise FormatError("tree document must be a JSON object")
        missing = {"meta", "nodes", "leaves"} - set(d)
        if missing:
            raise FormatError(f"tree document lacks keys {sorted(missing)}")
        if d.get("format_version") != TREE_FORMAT_VERSION:
            raise FormatError(f"unsupported tree format version {d.get('format_version')!r}")
        try:
            nodes = tuple(Node(int(n["var"]), float(n["value"]), (str(n["left"][0]), int(n["left"][1])),
                               (str(n["right"][0]), int(n["right"][1]))) for n in d["nodes"])
            leaves = tuple(Leaf(bool(lf["ignorance"]), int(lf["label"]),
                                None if lf["prediction"] is None else tuple(float(v) for v in lf["prediction"]),
                                int(lf.get("count", 0)), float(lf.get("mass", 0.0))) for lf in d["leaves"])
            depth = int(d.get("depth", d["meta"].get("depth", 0)))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise FormatError(f"malformed tree document: {exc}") from None
        model = cls(nodes, leaves, depth, dict(d["meta"]))
        problems = model.validate()
        if problems:
            raise FormatError("invalid tree: " + "; ".join(problems))
        return model


# -- file I/O ---------------------------------------------------------------

def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to ``path`` via a temporary file and rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.chmod(tmp, 0o666 & ~_umask())   # mkstemp creates 0600 files
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _rows_to_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    import io
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for row in rows:
        wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _columns_with_prefix(header, prefix):
    return [(i, h[len(prefix):]) for i, h in enumerate(header) if h.startswith(prefix)]


def _read_csv(path):
    if not os.path.exists(path):
        raise ValidationError(f"file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"empty file: {path}") from None
        body = [r for r in reader if r]
    return header, body


def _parse_float(text, row, col):
    try:
        v = float(text)
    except ValueError:
        raise ValidationError(f"row {row}: column {col!r} is not a number ({text!r})") from None
    if not math.isfinite(v):
        raise ValidationError(f"row {row}: non-finite value in column {col!r}")
    return v


def estimate_table_to_csv(table: EstimateTable) -> str:
    header = (["type_id", "w"] + [f"phi_hat_{q}" for q in table.outcome_names]
              + [f"eta2_hat_{q}" for q in table.outcome_names] + [f"x_{c}" for c in table.covariate_names])
    rows = ([t, float(table.w[i])] + [float(v) for v in table.phi[i]] + [float(v) for v in table.eta2[i]]
            + [float(v) for v in table.X[i]] for i, t in enumerate(table.type_ids))
    return _rows_to_csv(header, rows)


def save_estimate_table(table: EstimateTable, path) -> None:
    atomic_write_text(path, estimate_table_to_csv(table))


def load_estimate_table(path, format: str = "csv") -> EstimateTable:
    """Read and validate an estimate-table CSV."""
    if format != "csv":
        raise ValidationError(f"unsupported table format {format!r}")
    path = os.fspath(path)
    header, body = _read_csv(path)
    if "type_id" not in header or "w" not in header:
        raise ValidationError(f"{path}: header must contain type_id and w")
    phis = _columns_with_prefix(header, "phi_hat_")
    etas = _columns_with_prefix(header, "eta2_hat_")
    xs = _columns_with_prefix(header, "x_")
    if not phis or [n for _, n in phis] != [n for _, n in etas]:
        raise ValidationError(f"{path}: phi_hat_* and eta2_hat_* columns must name the same outcomes")
    if not xs:
        raise ValidationError(f"{path}: at least one x_* covariate column required")
    it, iw = header.index("type_id"), header.index("w")
    ids, w, phi, eta2, X = [], [], [], [], []
    for r, rec in enumerate(body, start=1):
        if len(rec) != len(header):
            raise ValidationError(f"row {r}: expected {len(header)} fields, found {len(rec)}")
        ids.append(rec[it])
        w.append(_parse_float(rec[iw], r, "w"))
        phi.append([_parse_float(rec[i], r, header[i]) for i, _ in phis])
        e = [_parse_float(rec[i], r, header[i]) for i, _ in etas]
        if min(e) < 0:
            raise ValidationError(f"row {r}: negative variance estimate")
        eta2.append(e)
        X.append([_parse_float(rec[i], r, header[i]) for i, _ in xs])
        if w[-1] <= 0:
            raise ValidationError(f"row {r}: weight must be positive")
    if not ids:
        raise ValidationError(f"{path}: no data rows")
    return EstimateTable(tuple(ids), np.array(X), np.array(w), np.array(phi), np.array(eta2),
                         tuple(n for _, n in phis), tuple(n for _, n in xs), {"source": path})


def raw_study_to_csv(study: RawStudy) -> str:
    header = ([f"y_{q}" for q in study.outcome_names] + ["d", "propensity", "env"]
              + [f"x_{c}" for c in study.covariate_names])
    rows = ([float(v) for v in study.Y[i]] + [int(study.D[i]), float(study.o[i]), study.env[i]]
            + [float(v) for v in study.X[i]] for i in range(len(study)))
    return _rows_to_csv(header, rows)


def save_raw_study(study: RawStudy, path) -> None:
    atomic_write_text(path, raw_study_to_csv(study))


def load_raw_study(path) -> RawStudy:
    path = os.fspath(path)
    header, body = _read_csv(path)
    ys = _columns_with_prefix(header, "y_")
    xs = _columns_with_prefix(header, "x_")
    for col in ("d", "propensity", "env"):
        if col not in header:
            raise ValidationError(f"{path}: missing column {col!r}")
    if not ys or not xs:
        raise ValidationError(f"{path}: need y_* and x_* columns")
    idd, io_, ie = header.index("d"), header.index("propensity"), header.index("env")
    Y, D, o, env, X = [], [], [], [], []
    for r, rec in enumerate(body, start=1):
        if len(rec) != len(header):
            raise ValidationError(f"row {r}: expected {len(header)} fields, found {len(rec)}")
        Y.append([_parse_float(rec[i], r, header[i]) for i, _ in ys])
        D.append(_parse_float(rec[idd], r, "d"))
        o.append(_parse_float(rec[io_], r, "propensity"))
        env.append(rec[ie])
        X.append([_parse_float(rec[i], r, header[i]) for i, _ in xs])
    if not Y:
        raise ValidationError(f"{path}: no data rows")
    return RawStudy(np.array(Y), np.array(D), np.array(o), np.array(X), tuple(env),
                    tuple(n for _, n in ys), tuple(n for _, n in xs))


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_json(obj) -> str:
    # json writes floats with repr(), the shortest string that round-trips exactly
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default, allow_nan=False) + "\n"


def save_tree(model: TreeModel, path) -> None:
    problems = model.validate()
    if problems:
        raise ValidationError("refusing to save invalid tree: " + "; ".join(problems))
    atomic_write_text(path, dumps_json(model.to_dict()))


def load_tree(path) -> TreeModel:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise ValidationError(f"file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON ({exc})") from None
    return TreeModel.from_dict(doc)
