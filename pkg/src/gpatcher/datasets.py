"""Dataset files, manifests and synthetic graph generators.

On-disk layout (all paths in a manifest are relative to the manifest):

* edges: two whitespace-separated integers per line, 0-indexed, undirected
* features: dense CSV (n rows of d values), or a triplet file whose first
  line is ``# shape n d`` followed by ``row col value`` lines
* labels: one integer per line
* masks: one file per split listing node ids, one per line
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import InfeasibleSpec, ManifestMismatch, ParseError
from .graph import Graph, node_heterophily

log = logging.getLogger(__name__)

HETEROPHILY_TOL = 0.02
DATA_DIR_ENV = "GPATCHER_DATA_DIR"
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DatasetManifest:
    """Where a dataset's files live and the statistics they must reproduce.

    ``expected`` may hold ``n``, ``edges``, ``classes``, ``features`` and
    ``heterophily``; absent keys are not checked.
    """

    name: str
    edges: str
    features: str
    labels: str
    masks: dict = field(default_factory=dict)
    expected: dict = field(default_factory=dict)
    features_format: str = "auto"
    base_dir: str = "."
    notes: str = ""

    @classmethod
    def from_file(cls, path, data_dir=None):
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"{path}: cannot read manifest ({exc})") from exc
        base = Path(data_dir) if data_dir is not None else path.parent
        try:
            return cls(name=doc["name"], edges=doc["edges"], features=doc["features"],
                       labels=doc["labels"], masks=dict(doc.get("masks", {})),
                       expected=dict(doc.get("expected", {})),
                       features_format=doc.get("features_format", "auto"),
                       base_dir=str(base), notes=doc.get("notes", ""))
        except KeyError as exc:
            raise ParseError(f"{path}: manifest lacks field {exc}") from exc

    def to_dict(self):
        d = {"name": self.name, "edges": self.edges, "features": self.features,
             "labels": self.labels, "masks": self.masks, "expected": self.expected,
             "features_format": self.features_format}
        if self.notes:
            d["notes"] = self.notes
        return d

    def path(self, rel):
        return Path(self.base_dir) / rel


def shipped_manifests():
    """Names of the bundled manifests (data files are not bundled)."""
    root = resources.files("gpatcher") / "manifests"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def shipped_manifest(name, data_dir=None) -> DatasetManifest:
    """A bundled manifest; files resolve under ``data_dir``/name.

    ``data_dir`` defaults to the ``GPATCHER_DATA_DIR`` environment variable.
    """
    root = resources.files("gpatcher") / "manifests" / f"{name.lower()}.json"
    if not root.is_file():
        raise ParseError(f"no bundled manifest named {name!r}")
    data_dir = data_dir or os.environ.get(DATA_DIR_ENV)
    base = Path(data_dir) / name.lower() if data_dir else None
    with resources.as_file(root) as p:
        m = DatasetManifest.from_file(p, data_dir=base)
    return m


def resolve_manifest(ref, data_dir=None) -> DatasetManifest:
    """Path to a manifest file, or the name of a bundled one."""
    p = Path(ref)
    if p.suffix == ".json" and p.exists():
        return DatasetManifest.from_file(p)
    if p.suffix == ".json":
        name = p.stem
    else:
        name = str(ref)
    return shipped_manifest(name, data_dir)


# readers

def _load_numbers(path, dtype, what, ndmin=1):
    path = Path(path)
    if not path.exists():
        raise ParseError(f"{what} file not found: {path}")
    try:
        if path.stat().st_size == 0:
            return np.zeros((0,) * ndmin, dtype=dtype)
        return np.loadtxt(path, dtype=dtype, comments="#", ndmin=ndmin)
    except ValueError as exc:
        raise ParseError(f"{path}: malformed {what} ({exc})") from exc


def read_edges(path):
    e = _load_numbers(path, np.int64, "edge", ndmin=2)
    if e.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if e.shape[1] != 2:
        raise ParseError(f"{path}: edge lines need exactly two columns")
    return e


def _triplet_shape(path):
    with open(path) as fh:
        first = fh.readline().split()
    if len(first) != 4 or first[:2] != ["#", "shape"]:
        raise ParseError(f"{path}: triplet file must start with '# shape n d'")
    try:
        return int(first[2]), int(first[3])
    except ValueError as exc:
        raise ParseError(f"{path}: bad shape header") from exc


def read_features(path, fmt="auto"):
    path = Path(path)
    if fmt == "auto":
        fmt = "dense" if path.suffix == ".csv" else "triplet"
    if fmt == "dense":
        if not path.exists():
            raise ParseError(f"feature file not found: {path}")
        try:
            return np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2, comments="#")
        except ValueError as exc:
            raise ParseError(f"{path}: malformed dense features ({exc})") from exc
    if fmt != "triplet":
        raise ParseError(f"unknown feature format {fmt!r}")
    if not path.exists():
        raise ParseError(f"feature file not found: {path}")
    n, d = _triplet_shape(path)
    t = _load_numbers(path, np.float64, "triplet", ndmin=2)
    X = np.zeros((n, d))
    if t.size:
        if t.shape[1] != 3:
            raise ParseError(f"{path}: triplet lines need three columns")
        r, c = t[:, 0].astype(np.int64), t[:, 1].astype(np.int64)
        if r.min() < 0 or r.max() >= n or c.min() < 0 or c.max() >= d:
            raise ParseError(f"{path}: triplet index outside declared shape")
        np.add.at(X, (r, c), t[:, 2])
    return X


def read_labels(path):
    return _load_numbers(path, np.int64, "label")


def read_ids(path):
    return _load_numbers(path, np.int64, "mask")


# loading / validation

def dataset_stats(g: Graph):
    return {"n": g.n, "edges": g.num_edges, "edges_directed": 2 * g.num_edges,
            "classes": g.num_classes, "features": g.num_features,
            "heterophily": node_heterophily(g).graph_level}


def validate(g: Graph, expected: dict):
    """Raise ManifestMismatch listing every declared statistic that disagrees."""
    found = dataset_stats(g)
    bad = []
    for key, want in expected.items():
        if key == "heterophily":
            got = found["heterophily"]
            if not np.isfinite(got) or abs(got - want) > HETEROPHILY_TOL:
                bad.append(f"heterophily: expected {want} +/- {HETEROPHILY_TOL}, found {got:.4f}")
        elif key == "edges":
            # the directed/undirected convention of published counts varies
            if want not in (found["edges"], found["edges_directed"]):
                bad.append(f"edges: expected {want}, found {found['edges']} undirected / "
                           f"{found['edges_directed']} directed")
        elif key in found:
            if want != found[key]:
                bad.append(f"{key}: expected {want}, found {found[key]}")
        else:
            bad.append(f"{key}: unknown statistic")
    if bad:
        raise ManifestMismatch(f"{g.name}: " + "; ".join(bad))
    return found


def load_dataset(m, data_dir=None, check=True) -> Graph:
    """Read a dataset described by a manifest (object, path or bundled name)."""
    if not isinstance(m, DatasetManifest):
        m = resolve_manifest(m, data_dir)
    X = read_features(m.path(m.features), m.features_format)
    y = read_labels(m.path(m.labels))
    n = X.shape[0]
    if y.shape[0] != n:
        raise ParseError(f"{m.name}: {y.shape[0]} labels for {n} feature rows")
    edges = read_edges(m.path(m.edges))
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise ParseError(f"{m.name}: edge endpoint outside [0, {n})")
    masks = {k: read_ids(m.path(v)) for k, v in m.masks.items()}
    C = m.expected.get("classes")
    if C is None or (y.size and y.max() >= C):
        C = None
    try:
        g = Graph.from_edges(n, edges, X, y, masks, num_classes=C, name=m.name,
                             meta={"manifest": m.to_dict()})
    except ValueError as exc:
        raise ParseError(f"{m.name}: {exc}") from exc
    if check:
        validate(g, m.expected)
    return g


def _fmt_float(x):
    return format(float(x), ".17g")


def write_dataset(g: Graph, directory, fmt="dense", expected=True) -> Path:
    """Write ``g`` in the on-disk layout and return the manifest path.

    Floats are written with 17 significant digits, so reloading gives
    bit-identical features.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    name = g.name
    np.savetxt(d / "edges.txt", g.edges, fmt="%d")
    if fmt == "dense":
        feat = "features.csv"
        with open(d / feat, "w") as fh:
            for row in g.features:
                fh.write(",".join(map(_fmt_float, row)) + "\n")
    elif fmt == "triplet":
        feat = "features.triplets"
        r, c = np.nonzero(g.features)
        with open(d / feat, "w") as fh:
            fh.write(f"# shape {g.n} {g.num_features}\n")
            for i, j in zip(r, c):
                fh.write(f"{i} {j} {_fmt_float(g.features[i, j])}\n")
    else:
        raise ValueError(f"unknown feature format {fmt!r}")
    np.savetxt(d / "labels.txt", g.labels, fmt="%d")
    masks = {}
    for split in SPLITS:
        ids = np.flatnonzero(g.mask(split))
        np.savetxt(d / f"{split}.txt", ids, fmt="%d")
        masks[split] = f"{split}.txt"
    doc = {"name": name, "edges": "edges.txt", "features": feat, "labels": "labels.txt",
           "masks": masks, "features_format": fmt}
    if expected:
        st = dataset_stats(g)
        doc["expected"] = {k: st[k] for k in ("n", "edges", "classes", "features")}
        if np.isfinite(st["heterophily"]):
            doc["expected"]["heterophily"] = round(st["heterophily"], 6)
    path = d / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# synthetic graphs

@dataclass(frozen=True)
class SynthSpec:
    """Synthetic node-classification graph.

    ``h`` is the probability that an edge joins endpoints of different
    classes (0 = fully homophilous, 1 = fully heterophilous).
    """

    n: int = 1000
    C: int = 2
    d: int = 16
    mean_degree: float = 10.0
    h: float = 0.5
    snr: float = 1.0
    seed: int = 0
    train: float = 0.6
    val: float = 0.2
    test: float = 0.2

    def __post_init__(self):
        if self.n < self.C or self.C < 1:
            raise InfeasibleSpec("need n >= C >= 1")
        if not 0.0 <= self.h <= 1.0:
            raise InfeasibleSpec("h must lie in [0, 1]")
        if min(self.train, self.val, self.test) < 0 or self.train + self.val + self.test > 1 + 1e-12:
            raise InfeasibleSpec("split fractions must be >= 0 and sum to <= 1")
        if self.d < self.C:
            raise InfeasibleSpec("need d >= C for separable class means")
        if self.mean_degree < 0:
            raise InfeasibleSpec("mean degree must be >= 0")


def _splits(rng, n, fracs):
    perm = rng.permutation(n)
    a = int(round(fracs[0] * n))
    b = a + int(round(fracs[1] * n))
    c = min(n, b + int(round(fracs[2] * n)))
    return {"train": perm[:a], "val": perm[a:b], "test": perm[b:c]}


def _collect_unique(rng, target, draw, max_rounds=200):
    """Draw candidate edge batches until ``target`` distinct edges are kept."""
    n_enc = None
    keys = np.zeros(0, dtype=np.int64)
    for _ in range(max_rounds):
        need = target - keys.size
        if need <= 0:
            break
        u, v, n_enc = draw(int(need * 1.2) + 16)
        ok = u != v
        lo, hi = np.minimum(u[ok], v[ok]), np.maximum(u[ok], v[ok])
        cand = np.concatenate([keys, lo * n_enc + hi])
        _, first = np.unique(cand, return_index=True)
        keys = cand[np.sort(first)]
    keys = keys[:target]
    if n_enc is None:
        return np.zeros((0, 2), dtype=np.int64)
    return np.stack([keys // n_enc, keys % n_enc], axis=1)


def generate_synthetic(spec: SynthSpec) -> Graph:
    rng = np.random.default_rng(spec.seed)
    n, C = spec.n, spec.C
    labels = rng.permutation(np.arange(n) % C)
    order = np.argsort(labels, kind="stable")
    sizes = np.bincount(labels, minlength=C)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    target = int(round(n * spec.mean_degree / 2))
    intra_cap = int(np.sum(sizes * (sizes - 1) // 2))
    inter_cap = n * (n - 1) // 2 - intra_cap
    if target and spec.h < 1 and intra_cap == 0:
        raise InfeasibleSpec("intra-class edges requested but every class has one node")
    if target and spec.h > 0 and inter_cap == 0:
        raise InfeasibleSpec("inter-class edges requested but there is one class")
    if target > (1.0 - spec.h) * intra_cap + spec.h * inter_cap + 1e-9:
        raise InfeasibleSpec(f"{target} edges exceed what n={n}, h={spec.h} allows")

    def draw(k):
        u = rng.integers(0, n, size=k)
        cu = labels[u]
        inter = rng.random(k) < spec.h
        if C > 1:
            shift = 1 + np.floor(rng.random(k) * (C - 1)).astype(np.int64)
        else:
            shift = np.zeros(k, dtype=np.int64)
        cv = np.where(inter, (cu + shift) % C, cu)
        pick = np.floor(rng.random(k) * sizes[cv]).astype(np.int64)
        return u, order[starts[cv] + pick], n

    edges = _collect_unique(rng, target, draw)
    means = np.zeros((C, spec.d))
    means[np.arange(C), np.arange(C)] = spec.snr
    X = means[labels] + rng.normal(size=(n, spec.d))
    masks = _splits(rng, n, (spec.train, spec.val, spec.test))
    name = f"synth-n{n}-h{spec.h:g}-s{spec.seed}"
    return Graph.from_edges(n, edges, X, labels, masks, num_classes=C, name=name,
                            meta={"synth": spec.__dict__.copy()}, warn=False)


def random_graph(n, mean_degree=10.0, seed=0, d=8, C=2):
    """Erdos-Renyi graph with the given expected mean degree.

    The edge count is binomial, then that many distinct pairs are drawn.
    """
    rng = np.random.default_rng(seed)
    pairs = n * (n - 1) // 2
    prob = min(1.0, mean_degree / max(n - 1, 1))
    m = int(rng.binomial(pairs, prob)) if pairs else 0
    if m > pairs // 2:
        iu = np.triu_indices(n, 1)
        pick = rng.choice(pairs, size=m, replace=False)
        edges = np.stack([iu[0][pick], iu[1][pick]], axis=1)
    else:
        edges = _collect_unique(rng, m, lambda k: (rng.integers(0, n, k), rng.integers(0, n, k), n))
    labels = rng.integers(0, C, size=n)
    X = rng.normal(size=(n, d))
    masks = _splits(rng, n, (0.6, 0.2, 0.2))
    return Graph.from_edges(n, edges, X, labels, masks, num_classes=C,
                            name=f"er-n{n}-s{seed}", warn=False)


def generate_scalability_suite(sizes, patch_sizes=None, seed=0, mean_degree=10.0):
    """One random graph per size (all at the same mean degree).

    ``patch_sizes`` is carried in each graph's meta for the timing grid.
    """
    out = []
    for i, n in enumerate(sizes):
        if n < 1:
            raise ValueError("sizes must be positive")
        g = random_graph(int(n), mean_degree, seed=[seed, i])
        if patch_sizes is not None:
            g.meta["patch_sizes"] = list(patch_sizes)
        out.append(g)
    return out
