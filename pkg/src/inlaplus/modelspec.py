"""File formats: JSON model specifications, graph files, CSV data tables.

A model specification is a JSON document with a ``components`` array, a
``likelihood`` block, and an optional ``priors`` block::

    {
      "components": [
        {"name": "intercept", "kind": "intercept"},
        {"name": "beta_t", "kind": "fixed_slope", "column": "t_center"},
        {"name": "time", "kind": "rw2", "size": 5, "column": "t_idx",
         "hyper": "tau_time"},
        {"name": "space", "kind": "besag", "graph": "space.graph",
         "column": "s_idx", "hyper": "tau_space"},
        {"name": "ts", "kind": "kron2",
         "parts": [{"kind": "rw2", "size": 5},
                   {"kind": "besag", "graph": "space.graph"}],
         "columns": ["t_idx", "s_idx"], "hyper": "tau_ts"}
      ],
      "likelihood": {"family": "poisson", "offset_column": "expected"},
      "priors": {"tau_time": {"kind": "pc_precision", "u": 1.0, "alpha": 0.01}},
      "response_column": "y"
    }

Random-effect components name a hyperparameter; the same name on several
components shares one precision.  Unnamed precisions can be pinned with
``log_prec``.  Hyperparameters are ordered by first appearance (components
first, then a Gaussian likelihood precision).

Graph files are adjacency lists, one line per node: ``node: nbr nbr ...``
with 0-based ids; every edge must appear from both endpoints.

Data tables are UTF-8 comma-separated files with a header row.  Index
columns are 0-based integers; floats are written with 17 significant digits
so values round-trip exactly.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from . import model as md
from .errors import DataMismatchError, ModelSpecError

DEFAULT_PC_PRIOR = {"kind": "pc_precision", "u": 1.0, "alpha": 0.01}
FLOAT_FORMAT = "%.17g"


# ---------------------------------------------------------------------------
# graph files


def write_graph_file(path, adjacency: np.ndarray) -> None:
    adjacency = np.asarray(adjacency)
    lines = []
    for i in range(adjacency.shape[0]):
        nbrs = " ".join(str(int(j)) for j in np.nonzero(adjacency[i])[0])
        lines.append(f"{i}: {nbrs}".rstrip())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_graph_file(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ModelSpecError(f"graph file not found: {path}")
    entries: Dict[int, list] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise ModelSpecError(f"{path}:{lineno}: expected 'node: neighbors'")
        head, _, tail = line.partition(":")
        try:
            node = int(head)
            nbrs = [int(x) for x in tail.split()]
        except ValueError as exc:
            raise ModelSpecError(f"{path}:{lineno}: non-integer node id") from exc
        entries[node] = nbrs
    if not entries:
        raise ModelSpecError(f"{path}: empty graph")
    n = max(entries) + 1
    adjacency = np.zeros((n, n))
    for node, nbrs in entries.items():
        for j in nbrs:
            if not (0 <= j < n):
                raise ModelSpecError(f"{path}: neighbor {j} out of range")
            adjacency[node, j] = 1.0
    if not np.array_equal(adjacency, adjacency.T):
        raise ModelSpecError(f"{path}: adjacency is not symmetric")
    return adjacency


# ---------------------------------------------------------------------------
# CSV tables


def write_csv(path, columns: Dict[str, np.ndarray]) -> None:
    names = list(columns)
    rows = zip(*(np.asarray(columns[c]).tolist() for c in names))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for row in rows:
            writer.writerow([FLOAT_FORMAT % v if isinstance(v, float) else v for v in row])


def read_csv(path) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise DataMismatchError(f"data file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataMismatchError(f"{path}: empty file") from None
        rows = [row for row in reader if row]
    if not rows:
        raise DataMismatchError(f"{path}: no data rows")
    out = {}
    for k, name in enumerate(header):
        try:
            out[name.strip()] = np.array([float(r[k]) for r in rows])
        except (ValueError, IndexError) as exc:
            raise DataMismatchError(f"{path}: bad value in column {name!r}") from exc
    return out


def _int_column(data: Dict[str, np.ndarray], name: str, size: int, what: str) -> np.ndarray:
    if name not in data:
        raise DataMismatchError(f"{what}: missing column {name!r}")
    col = data[name]
    idx = np.rint(col).astype(int)
    if np.any(np.abs(col - idx) > 1e-9):
        raise DataMismatchError(f"{what}: column {name!r} is not integer-valued")
    if np.any((idx < 0) | (idx >= size)):
        raise DataMismatchError(f"{what}: column {name!r} indexes outside 0..{size - 1}")
    return idx


# ---------------------------------------------------------------------------
# model specifications


def load_model_spec(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ModelSpecError(f"model spec not found: {path}")
    try:
        spec = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelSpecError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(spec, dict):
        raise ModelSpecError(f"{path}: top level must be an object")
    return spec


def _indicator_block(cs: dict, data: Dict[str, np.ndarray], n_obs: int,
                     size: int, name: str) -> np.ndarray:
    """Indicator design block for an indexed component.

    ``column`` names one index column; ``columns`` names several, each row
    then loads the sum of the indicated entries (an observation may read
    more than one element of the same effect).
    """
    columns = cs.get("columns")
    if columns is None:
        columns = [cs.get("column", "")]
    block = np.zeros((n_obs, size))
    for colname in columns:
        idx = _int_column(data, colname, size, f"component {name!r}")
        block[np.arange(n_obs), idx] += 1.0
    return block


def _part_component(part: dict, base_dir: Path, name: str) -> md.LatentComponent:
    kind = part.get("kind")
    if kind == "rw1":
        return md.rw1_component(name, int(part["size"]))
    if kind == "rw2":
        return md.rw2_component(name, int(part["size"]))
    if kind == "iid":
        return md.iid_component(name, int(part["size"]))
    if kind == "besag":
        return md.besag_component(name, read_graph_file(base_dir / part["graph"]))
    raise ModelSpecError(f"unsupported interaction part kind {kind!r}")


class SpecifiedModel:
    """A parsed model spec bound to a data table."""

    def __init__(self, model: md.LatentModel, y: np.ndarray,
                 hyper_names: list, spec: dict):
        self.model = model
        self.y = y
        self.hyper_names = hyper_names
        self.spec = spec


def build_model(spec: dict, data: Dict[str, np.ndarray],
                base_dir: Optional[Path] = None) -> SpecifiedModel:
    """Instantiate the latent model and design matrix a spec describes.

    Raises ModelSpecError for malformed specs and DataMismatchError when the
    table lacks required columns or indexes out of range.
    """
    base_dir = Path(base_dir) if base_dir is not None else Path(".")
    try:
        comp_specs = list(spec["components"])
        lik_spec = dict(spec["likelihood"])
    except (KeyError, TypeError) as exc:
        raise ModelSpecError(f"spec needs 'components' and 'likelihood': {exc}") from exc

    n_obs = None
    for col in data.values():
        n_obs = len(col) if n_obs is None else n_obs
        if len(col) != n_obs:
            raise DataMismatchError("data columns have unequal lengths")
    if n_obs is None:
        raise DataMismatchError("empty data table")

    hyper_names: list = []
    priors_spec = dict(spec.get("priors", {}))

    def hyper_index(name: Optional[str]) -> Optional[int]:
        if name is None:
            return None
        if name not in hyper_names:
            hyper_names.append(name)
        return hyper_names.index(name)

    components = []
    design_cols = []
    for cs in comp_specs:
        try:
            kind = cs["kind"]
            name = cs.get("name", kind)
        except TypeError as exc:
            raise ModelSpecError(f"component entries must be objects: {exc}") from exc
        hidx = hyper_index(cs.get("hyper"))
        log_prec = float(cs.get("log_prec", 0.0))
        if kind == "intercept":
            comp = md.intercept(name)
            design_cols.append(np.ones((n_obs, 1)))
        elif kind == "fixed_slope":
            col = cs.get("column")
            if col not in data:
                raise DataMismatchError(f"component {name!r}: missing column {col!r}")
            comp = md.fixed_slope(name)
            design_cols.append(data[col].reshape(-1, 1))
        elif kind in ("iid", "rw1", "rw2"):
            size = int(cs.get("size", 0))
            if size <= 0:
                raise ModelSpecError(f"component {name!r}: positive 'size' required")
            maker = {"iid": md.iid_component, "rw1": md.rw1_component,
                     "rw2": md.rw2_component}[kind]
            comp = maker(name, size, hidx, log_prec)
            design_cols.append(_indicator_block(cs, data, n_obs, size, name))
        elif kind == "besag":
            adjacency = read_graph_file(base_dir / cs["graph"])
            comp = md.besag_component(name, adjacency, hidx, log_prec)
            design_cols.append(_indicator_block(cs, data, n_obs, comp.size, name))
        elif kind in ("kron2", "kron3"):
            parts = cs.get("parts", [])
            want = 2 if kind == "kron2" else 3
            if len(parts) != want:
                raise ModelSpecError(f"component {name!r}: {kind} needs {want} parts")
            part_comps = [_part_component(p, base_dir, f"{name}.{i}")
                          for i, p in enumerate(parts)]
            if kind == "kron2":
                comp = md.kron2_component(name, *part_comps, hyper_index=hidx,
                                          log_prec=log_prec)
            else:
                comp = md.kron3_component(name, *part_comps, hyper_index=hidx,
                                          log_prec=log_prec)
            columns = cs.get("columns", [])
            if len(columns) != want:
                raise ModelSpecError(f"component {name!r}: needs {want} index columns")
            sizes = [p.size for p in part_comps]
            idx = _int_column(data, columns[0], sizes[0], f"component {name!r}")
            for colname, size in zip(columns[1:], sizes[1:]):
                nxt = _int_column(data, colname, size, f"component {name!r}")
                idx = idx * size + nxt
            block = np.zeros((n_obs, comp.size))
            block[np.arange(n_obs), idx] = 1.0
            design_cols.append(block)
        else:
            raise ModelSpecError(f"unknown component kind {kind!r}")
        components.append(comp)

    family = lik_spec.get("family")
    if family == "poisson":
        offset_col = lik_spec.get("offset_column")
        if offset_col is None:
            offsets = np.ones(n_obs)
        else:
            if offset_col not in data:
                raise DataMismatchError(f"likelihood: missing offset column {offset_col!r}")
            offsets = data[offset_col]
            if np.any(offsets <= 0):
                raise DataMismatchError("likelihood offsets must be positive")
        likelihood = md.PoissonLikelihood(offsets)
    elif family == "gaussian":
        hidx = hyper_index(lik_spec.get("hyper"))
        likelihood = md.GaussianLikelihood(hidx, float(lik_spec.get("fixed_prec", 1.0)))
    else:
        raise ModelSpecError(f"unknown likelihood family {family!r}")

    priors = []
    for name in hyper_names:
        ps = priors_spec.get(name, DEFAULT_PC_PRIOR)
        kind = ps.get("kind")
        if kind == "pc_precision":
            priors.append(md.PCPrecisionPrior(float(ps.get("u", 1.0)),
                                              float(ps.get("alpha", 0.01))))
        elif kind == "gaussian":
            priors.append(md.GaussianHyperPrior(float(ps.get("mean", 0.0)),
                                                float(ps.get("prec", 1.0))))
        else:
            raise ModelSpecError(f"prior {name!r}: unknown kind {kind!r}")

    response = spec.get("response_column", "y")
    if response not in data:
        raise DataMismatchError(f"missing response column {response!r}")
    y = data[response]
    if family == "poisson" and np.any(y < 0):
        raise DataMismatchError("Poisson response must be non-negative")

    design = np.hstack(design_cols) if design_cols else np.zeros((n_obs, 0))
    try:
        model = md.LatentModel(tuple(components), design, likelihood, tuple(priors))
    except ValueError as exc:
        raise ModelSpecError(str(exc)) from exc
    return SpecifiedModel(model, y, hyper_names, spec)


def load_specified_model(spec_path, data_path) -> SpecifiedModel:
    spec = load_model_spec(spec_path)
    data = read_csv(data_path)
    return build_model(spec, data, base_dir=Path(spec_path).parent)
