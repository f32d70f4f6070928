"""Full-batch training, evaluation, baselines and ablation protocols."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import mixer
from .errors import EmptyMask
from .graph import Graph, induce_graph, normalize_adjacency
from .patcher import PatchSet, extract_patches, shuffle_patch_order
from .spectral import FilterSpec, eigendecompose

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.005
    weight_decay: float = 5e-4
    max_epochs: int = 500
    patience: int = 50
    hidden: int = 64
    layers: int = 2
    dropout: float = 0.5
    p: int = 32
    K: int = 10
    seed: int = 0
    extractor: str = "adaptive"
    c: float = 0.5
    drop_tol: float = 0.0
    candidates: tuple | None = None
    activation: str = "relu"
    aggregate: str = "mean"
    residual: bool = False
    two_layer: bool = False
    self_loops: bool = False
    shuffle_patches: bool = False

    def __post_init__(self):
        for name in ("lr", "max_epochs", "hidden", "layers", "p", "K"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.patience < 0:
            raise ValueError("weight_decay and patience must be >= 0")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")

    def to_dict(self):
        d = asdict(self)
        if self.candidates is not None:
            d["candidates"] = [c.to_dict() for c in self.candidates]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("candidates") is not None:
            d["candidates"] = tuple(FilterSpec.from_dict(c) for c in d["candidates"])
        return cls(**d)


@dataclass
class TrainReport:
    """Per-epoch curves and the best-validation outcome of one run.

    ``wall_time`` is excluded from equality so reruns compare equal.
    """

    train_loss: list
    val_loss: list
    train_acc: list
    val_acc: list
    best_epoch: int
    best_val_loss: float
    best_val_acc: float
    test_acc: float
    candidate: str = ""
    model_name: str = "gpatcher"
    wall_time: float = field(default=0.0, compare=False)

    @property
    def epochs(self):
        return len(self.train_loss)

    def summary(self):
        return {"model": self.model_name, "candidate": self.candidate,
                "epochs": self.epochs, "best_epoch": self.best_epoch,
                "best_val_loss": self.best_val_loss, "best_val_acc": self.best_val_acc,
                "test_acc": self.test_acc}


# optimization

class AdamW:
    """Adam with decoupled weight decay (decay applied before the Adam step)."""

    def __init__(self, params, lr=0.005, weight_decay=5e-4, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.wd, self.eps = lr, weight_decay, eps
        self.b1, self.b2 = betas
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            p = params[k]
            if self.wd:
                p *= 1.0 - self.lr * self.wd
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def softmax_xent(logits, labels, nodes):
    """Mean cross-entropy over ``nodes`` and its gradient w.r.t. all logits."""
    z = logits[nodes]
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = labels[nodes]
    loss = -float(logp[np.arange(nodes.size), y].mean())
    grad = np.zeros_like(logits)
    prob = np.exp(logp)
    prob[np.arange(nodes.size), y] -= 1.0
    grad[nodes] = prob / nodes.size
    return loss, grad


def accuracy(logits, labels, nodes):
    if nodes.size == 0:
        raise EmptyMask("accuracy over an empty node set")
    # np.argmax returns the lowest index among ties
    return float(np.mean(logits[nodes].argmax(axis=1) == labels[nodes]))


def _split_nodes(g: Graph):
    if g.labels is None:
        raise EmptyMask("graph has no labels")
    out = []
    for split in ("train", "val", "test"):
        nodes = np.flatnonzero(g.mask(split))
        if nodes.size == 0:
            raise EmptyMask(f"{split} mask is empty")
        out.append(nodes)
    return out


def _fit(params, loss_grad, predict, g, cfg: TrainConfig, name, candidate=""):
    """Shared loop: full-batch AdamW with early stopping on validation loss.

    ``loss_grad(params, rng)`` runs a training-mode pass and returns
    (logits, dL/dlogits function); ``predict(params)`` is the eval pass.
    """
    train, val, test = _split_nodes(g)
    labels = np.asarray(g.labels)
    rng = np.random.default_rng([cfg.seed, 1])
    opt = AdamW(params, cfg.lr, cfg.weight_decay)
    hist = {"train_loss": [], "val_loss": [], "train_acc": [], "val_acc": []}
    best = (np.inf, -1, None, 0.0)
    wait = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.max_epochs):
        grads = loss_grad(params, rng, lambda lg: softmax_xent(lg, labels, train))
        opt.step(params, grads)
        logits = predict(params)
        tl, _ = softmax_xent(logits, labels, train)
        vl, _ = softmax_xent(logits, labels, val)
        hist["train_loss"].append(tl)
        hist["val_loss"].append(vl)
        hist["train_acc"].append(accuracy(logits, labels, train))
        hist["val_acc"].append(accuracy(logits, labels, val))
        if vl < best[0]:
            best = (vl, epoch, {k: v.copy() for k, v in params.items()},
                    hist["val_acc"][-1])
            wait = 0
        else:
            wait += 1
        if wait >= cfg.patience:
            break
    params.update(best[2])
    logits = predict(params)
    report = TrainReport(best_epoch=best[1], best_val_loss=float(best[0]),
                         best_val_acc=float(best[3]),
                         test_acc=accuracy(logits, labels, test), candidate=candidate,
                         model_name=name, wall_time=time.perf_counter() - t0, **hist)
    log.info("%s %s: %d epochs, best epoch %d, val %.4f, test %.4f", name, candidate,
             report.epochs, report.best_epoch, report.best_val_acc, report.test_acc)
    return report


# GPatcher

def default_candidates(cfg: TrainConfig):
    """Extractor settings tried during validation search, per family."""
    K = cfg.K
    if cfg.extractor == "adaptive":
        return (FilterSpec.geometric(0.5, K, k0=0, label="lowpass(c=0.5)"),
                FilterSpec.geometric(-0.5, K, k0=0, label="alternating(c=-0.5)"))
    if cfg.extractor == "heat":
        return (FilterSpec("heat", K, t0=1.0, label="heat(t0=1)"),
                FilterSpec("heat", K, t0=-1.0, label="heat(t0=-1)"))
    if cfg.extractor == "bandpass":
        ramp = np.linspace(0.0, 1.0, K)
        return (FilterSpec("bandpass", K, weights=tuple(ramp), label="bandpass(low)"),
                FilterSpec("bandpass", K, weights=tuple(ramp[::-1]), label="bandpass(high)"))
    if cfg.extractor == "shared":
        return (FilterSpec("shared", K, weights=(1.0,), label="shared(w=1)"),
                FilterSpec("shared", K, weights=(-1.0,), label="shared(w=-1)"))
    if cfg.extractor == "ppr":
        return (FilterSpec("ppr", K, c=cfg.c, drop_tol=cfg.drop_tol, label=f"ppr(c={cfg.c:g})"),)
    raise ValueError(f"unknown extractor {cfg.extractor!r}")


def mixer_config(g: Graph, cfg: TrainConfig):
    return mixer.MixerConfig(d=g.num_features, p=cfg.p, num_classes=g.num_classes,
                             hidden=cfg.hidden, layers=cfg.layers, dropout=cfg.dropout,
                             activation=cfg.activation, aggregate=cfg.aggregate,
                             residual=cfg.residual, two_layer=cfg.two_layer)


def train_on_patches(g: Graph, ps: PatchSet, cfg: TrainConfig, candidate=""):
    """Train the mixer on fixed patches; returns (report, model)."""
    if cfg.shuffle_patches:
        ps = shuffle_patch_order(ps, [cfg.seed, 2])
    if ps.node_features is None and ps.tensor is None:
        ps = ps.with_features(g.features)
    model = mixer.init_params(mixer_config(g, cfg), cfg.seed)

    def loss_grad(params, rng, loss_fn):
        logits, trace = mixer.forward(model, ps, training=True, rng=rng)
        return mixer.backward(model, trace, loss_fn(logits)[1])

    def predict(params):
        return mixer.forward(model, ps, training=False)[0]

    report = _fit(model.params, loss_grad, predict, g, cfg, "gpatcher", candidate)
    return report, model


def candidate_patches(g: Graph, cfg: TrainConfig, decomposition=None):
    """Yield (label, PatchSet) for each validation-search candidate."""
    cands = cfg.candidates if cfg.candidates is not None else default_candidates(cfg)
    for spec in cands:
        if spec.family != "ppr" and decomposition is None:
            m = normalize_adjacency(g, self_loops=cfg.self_loops)
            decomposition = eigendecompose(m)
        ps = extract_patches(g, spec, cfg.p, decomposition=decomposition,
                             self_loops=cfg.self_loops)
        yield spec.label or spec.family, ps


def _better(a: TrainReport, b: TrainReport | None):
    if b is None:
        return True
    return (a.best_val_acc, -a.best_val_loss) > (b.best_val_acc, -b.best_val_loss)


def train(g: Graph, cfg: TrainConfig, patches=None, decomposition=None) -> TrainReport:
    """Extract patches for each candidate, train, keep the best on validation.

    ``patches`` (a PatchSet or a list of (label, PatchSet)) skips extraction.
    """
    _split_nodes(g)
    if patches is None:
        options = candidate_patches(g, cfg, decomposition)
    elif isinstance(patches, PatchSet):
        options = [("cached", patches)]
    else:
        options = patches
    best = None
    for label, ps in options:
        rep, _ = train_on_patches(g, ps, cfg, label)
        if _better(rep, best):
            best = rep
    return best


def evaluate(model: mixer.MixerModel, ps: PatchSet, g: Graph, mask) -> float:
    """Accuracy of argmax logits on the masked nodes."""
    nodes = np.flatnonzero(np.asarray(mask, dtype=bool))
    if nodes.size == 0:
        raise EmptyMask("evaluation mask is empty")
    if ps.node_features is None and ps.tensor is None:
        ps = ps.with_features(g.features)
    return accuracy(mixer.predict(model, ps), np.asarray(g.labels), nodes)


# baselines

def _glorot(rng, fan_in, fan_out):
    b = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-b, b, size=(fan_in, fan_out))


def _two_layer(g: Graph, cfg: TrainConfig, prop, name):
    """Two-layer net ``prop(relu(prop(X) W1 + b1)) W2 + b2`` (prop = identity for MLP)."""
    X = np.asarray(g.features, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    params = {"W1": _glorot(rng, X.shape[1], cfg.hidden), "b1": np.zeros(cfg.hidden),
              "W2": _glorot(rng, cfg.hidden, g.num_classes), "b2": np.zeros(g.num_classes)}
    PX = prop(X)
    keep_p = 1.0 - cfg.dropout

    def run(params, rng=None):
        H = PX @ params["W1"] + params["b1"]
        A = np.maximum(H, 0.0)
        drop = None
        if rng is not None and cfg.dropout > 0:
            drop = rng.random(A.shape) >= cfg.dropout
            A = A * drop / keep_p
        PA = prop(A)
        return PA @ params["W2"] + params["b2"], (H, drop, PA)

    def loss_grad(params, rng, loss_fn):
        logits, (H, drop, PA) = run(params, rng)
        dlog = loss_fn(logits)[1]
        grads = {"W2": PA.T @ dlog, "b2": dlog.sum(axis=0)}
        dA = prop(dlog @ params["W2"].T, transpose=True)
        if drop is not None:
            dA = dA * drop / keep_p
        dH = dA * (H > 0.0)
        grads["W1"] = PX.T @ dH
        grads["b1"] = dH.sum(axis=0)
        return grads

    return _fit(params, loss_grad, lambda p: run(p)[0], g, cfg, name)


def baseline_mlp(g: Graph, cfg: TrainConfig) -> TrainReport:
    return _two_layer(g, cfg, lambda x, transpose=False: x, "mlp")


def baseline_gcn(g: Graph, cfg: TrainConfig) -> TrainReport:
    """Two-layer GCN on the self-loop normalized adjacency (symmetric)."""
    A = normalize_adjacency(g, self_loops=True).matrix
    return _two_layer(g, cfg, lambda x, transpose=False: np.asarray(A @ x), "gcn")


# ablations

@dataclass
class AblationResult:
    kind: str
    columns: tuple
    rows: list
    timings: list = field(default_factory=list)


def _map(fn, items, jobs):
    """Order-preserving map, optionally over worker processes."""
    items = list(items)
    if jobs and jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def _stats(values):
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


def _seed_cfgs(cfg, seeds):
    return [replace(cfg, seed=int(s)) for s in seeds]


def _train_job(args):
    g, cfg = args
    return train(g, cfg).test_acc


def _baseline_job(args):
    g, cfg, which = args
    fn = baseline_gcn if which == "gcn" else baseline_mlp
    return fn(g, cfg).test_acc


def _scal_job(args):
    from .patcher import ppr_patches
    g, p, c, drop_tol = args
    m = normalize_adjacency(g)
    t0 = time.perf_counter()
    ps = ppr_patches(m, p, c=c, drop_tol=drop_tol)
    dt = time.perf_counter() - t0
    return dt, float(ps.steps.mean())


def run_ablation(kind, g, cfg: TrainConfig, seeds=(0, 1, 2, 3, 4), jobs=1, **grid):
    """Run one experimental protocol; one row per cell with mean/std over seeds.

    kinds: ``induced``, ``alt_filters``, ``patch_order``, ``sensitivity``,
    ``scalability``. Grid overrides: ``p_values``/``K_values`` (sensitivity),
    ``families`` (alt_filters), ``sizes``/``p_values``/``graphs``
    (scalability).
    """
    seeds = list(seeds)
    if kind == "patch_order":
        rows = []
        for order, shuffle in (("ranked", False), ("shuffled", True)):
            cfgs = _seed_cfgs(replace(cfg, shuffle_patches=shuffle), seeds)
            accs = _map(_train_job, [(g, c) for c in cfgs], jobs)
            rows.append((order, *_stats(accs), len(seeds)))
        return AblationResult(kind, ("order", "mean_acc", "std_acc", "seeds"), rows)
    if kind == "alt_filters":
        rows = []
        for fam in grid.get("families", ("adaptive", "heat", "bandpass", "shared", "ppr")):
            cfgs = _seed_cfgs(replace(cfg, extractor=fam, candidates=None), seeds)
            accs = _map(_train_job, [(g, c) for c in cfgs], jobs)
            rows.append((fam, *_stats(accs), len(seeds)))
        return AblationResult(kind, ("extractor", "mean_acc", "std_acc", "seeds"), rows)
    if kind == "sensitivity":
        rows = []
        for p in grid.get("p_values", (8, 16, 32, 64)):
            for K in grid.get("K_values", (10, 50, 100, 200)):
                cfgs = _seed_cfgs(replace(cfg, p=p, K=K), seeds)
                accs = _map(_train_job, [(g, c) for c in cfgs], jobs)
                rows.append((p, K, *_stats(accs), len(seeds)))
        return AblationResult(kind, ("p", "K", "mean_acc", "std_acc", "seeds"), rows)
    if kind == "induced":
        # GCN/MLP on the original graph vs on the graph induced by patches
        _, ps = next(candidate_patches(g, cfg))
        gi = induce_graph(g, ps)
        rows = []
        for gname, graph in (("original", g), ("induced", gi)):
            for model in ("gcn", "mlp"):
                cfgs = _seed_cfgs(cfg, seeds)
                accs = _map(_baseline_job, [(graph, c, model) for c in cfgs], jobs)
                rows.append((gname, model, graph.num_edges, *_stats(accs), len(seeds)))
        return AblationResult(kind, ("graph", "model", "edges", "mean_acc", "std_acc", "seeds"),
                              rows)
    if kind == "scalability":
        from .datasets import generate_scalability_suite
        graphs = grid.get("graphs")
        if graphs is None:
            graphs = generate_scalability_suite(grid.get("sizes", (10, 100, 1000, 10000)),
                                                seed=cfg.seed)
        rows, timings = [], []
        for gr in graphs:
            for p in grid.get("p_values", (8, 16, 32, 64)):
                runs = _map(_scal_job, [(gr, p, cfg.c, cfg.drop_tol)] * grid.get("repeats", 1),
                            jobs)
                secs = float(np.mean([r[0] for r in runs]))
                rows.append((gr.n, p, gr.num_edges, runs[0][1]))
                timings.append({"n": gr.n, "p": p, "edges": gr.num_edges, "seconds": secs})
        return AblationResult(kind, ("n", "p", "edges", "mean_steps"), rows, timings)
    raise ValueError(f"unknown ablation {kind!r}")
