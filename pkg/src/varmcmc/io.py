"""Plain-text file formats: networks, datasets, variational states, CSV tables.

Networks and variational states use ``configparser`` INI text behind a
versioned first line. Floats are written with ``repr`` so they read back to
the same double.
"""

from __future__ import annotations

import configparser
import csv
import io
import os
import tempfile
from pathlib import Path

import numpy as np

from varmcmc.model import BeliefNetwork, Dataset, ModelError
from varmcmc.variational import VariationalState

NETWORK_HEADER = "# varmcmc-network 1"
STATE_HEADER = "# varmcmc-variational-state 1"


class FormatError(ValueError):
    pass


def atomic_write_text(path, text: str):
    """Write ``text`` to ``path`` through a temporary file and ``os.replace``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _floats(values) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(values))


def _parse_floats(text: str) -> np.ndarray:
    text = text.strip()
    return np.array([float(t) for t in text.split()], dtype=float) if text else np.zeros(0)


def _read_versioned(path, header: str) -> configparser.ConfigParser:
    text = Path(path).read_text()
    first = text.splitlines()[0].strip() if text else ""
    if first != header:
        raise FormatError(f"{path}: expected first line {header!r}")
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    return cp


def _dump(cp: configparser.ConfigParser, header: str, comments=()) -> str:
    buf = io.StringIO()
    buf.write(header + "\n")
    for c in comments:
        buf.write(f"# {c}\n")
    cp.write(buf)
    return buf.getvalue()


# networks


def network_to_text(net: BeliefNetwork, comments=()) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["network"] = {"alpha": repr(float(net.alpha)), "nodes": " ".join(net.nodes)}
    for node in net.nodes:
        sec = {"parents": " ".join(net.parents[node]), "hidden": str(bool(net.hidden.get(node, False))).lower()}
        if net.parents[node]:
            sec["theta"] = _floats(net.theta[node])
        if node in net.root_prob:
            sec["root_prob"] = repr(float(net.root_prob[node]))
        cp[f"node {node}"] = sec
    return _dump(cp, NETWORK_HEADER, comments)


def write_network(net: BeliefNetwork, path, comments=()):
    atomic_write_text(path, network_to_text(net, comments))


def read_network(path) -> BeliefNetwork:
    cp = _read_versioned(path, NETWORK_HEADER)
    try:
        nodes = cp["network"]["nodes"].split()
        alpha = float(cp["network"]["alpha"])
        parents, theta, hidden, root_prob = {}, {}, {}, {}
        for node in nodes:
            sec = cp[f"node {node}"]
            parents[node] = sec.get("parents", "").split()
            theta[node] = _parse_floats(sec.get("theta", ""))
            hidden[node] = sec.getboolean("hidden", False)
            if "root_prob" in sec:
                root_prob[node] = float(sec["root_prob"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: malformed network file ({exc})") from None
    return BeliefNetwork(nodes, parents, theta, alpha, hidden, root_prob)


# datasets


def dataset_to_text(data: Dataset, comments=()) -> str:
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(data.nodes)
    vals = np.ma.getdata(data.values)
    mask = np.ma.getmaskarray(data.values)
    for row, m in zip(vals, mask):
        w.writerow(["?" if mi else str(int(v)) for v, mi in zip(row, m)])
    return buf.getvalue()


def write_dataset(data: Dataset, path, comments=()):
    atomic_write_text(path, dataset_to_text(data, comments))


def read_dataset(path) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    if not rows:
        raise FormatError(f"{path}: empty dataset file")
    nodes = [h.strip() for h in rows[0]]
    body = rows[1:]
    vals = np.zeros((len(body), len(nodes)), dtype=np.int8)
    mask = np.zeros_like(vals, dtype=bool)
    for t, row in enumerate(body):
        if len(row) != len(nodes):
            raise FormatError(f"{path}: row {t + 2} has {len(row)} cells, expected {len(nodes)}")
        for k, cell in enumerate(row):
            cell = cell.strip()
            if cell == "?":
                mask[t, k] = True
            elif cell in ("1", "+1", "-1"):
                vals[t, k] = int(cell)
            else:
                raise FormatError(f"{path}: bad cell {cell!r} at row {t + 2}")
    try:
        return Dataset(nodes, np.ma.MaskedArray(vals, mask=mask))
    except ModelError as exc:
        raise FormatError(str(exc)) from None


# variational states


def state_to_text(state: VariationalState, net: BeliefNetwork, comments=()) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["state"] = {
        "nodes": " ".join(net.nodes),
        "hidden": " ".join(net.hidden_nodes),
        "T": str(state.xi.shape[1]),
    }
    for node in net.nodes:
        i = net.index(node)
        k = state.mu[node].size
        cp[f"node {node}"] = {
            "mu": _floats(state.mu[node]),
            "sigma": _floats(state.sigma[node].reshape(k * k)),
            "xi": _floats(state.xi[i]),
        }
    for j, node in enumerate(net.hidden_nodes):
        cp[f"node {node}"]["lambda"] = _floats(state.lam[j])
    return _dump(cp, STATE_HEADER, comments)


def write_state(state: VariationalState, net: BeliefNetwork, path, comments=()):
    atomic_write_text(path, state_to_text(state, net, comments))


def read_state(path, net: BeliefNetwork) -> VariationalState:
    cp = _read_versioned(path, STATE_HEADER)
    if cp["state"]["nodes"].split() != list(net.nodes):
        raise FormatError(f"{path}: node list does not match the network")
    T = int(cp["state"]["T"])
    mu, sigma = {}, {}
    xi = np.zeros((net.n_x, T))
    lam = np.zeros((len(net.hidden_nodes), T))
    for node in net.nodes:
        sec = cp[f"node {node}"]
        m = _parse_floats(sec["mu"])
        mu[node] = m
        sigma[node] = _parse_floats(sec["sigma"]).reshape(m.size, m.size)
        xi[net.index(node)] = _parse_floats(sec["xi"])
    for j, node in enumerate(net.hidden_nodes):
        lam[j] = _parse_floats(cp[f"node {node}"]["lambda"])
    return VariationalState(mu, sigma, xi, lam)


# tables


def table_text(header: list[str], rows, comments=()) -> str:
    """CSV text with leading ``# key=value`` comment lines."""
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        cells = [row.get(h) for h in header] if isinstance(row, dict) else row
        w.writerow([_cell(v) for v in cells])
    return buf.getvalue()


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return "" if v is None else str(v)


def write_table(path, header, rows, comments=()):
    atomic_write_text(path, table_text(header, rows, comments))


def read_table(path) -> tuple[dict, list[dict]]:
    """Return ``(comment key/values, rows)`` from a file written by ``write_table``."""
    meta, lines = {}, []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("# "):
                key, _, val = line[2:].rstrip("\n").partition("=")
                meta[key] = val
            else:
                lines.append(line)
    return meta, list(csv.DictReader(lines))
