"""Test-time adaptation over traversal permutations.

Offline, every candidate routing is scored by the mean predictive entropy of
the frozen model on calibration batches. Online, each of the K lowest-entropy
routings adapts a private copy of the SSM core parameters on the batch's own
pseudo-labels; the copies are averaged and the batch is predicted with the
averaged cores under the default routing.

Baselines share the same driver: ``source`` (no updates), ``tent`` (entropy
minimisation of the norm affines), ``ensemble`` (per-routing models whose
probabilities are averaged) and ``repetition`` (the default routing applied K
times in sequence, then weight-averaged).
"""
from __future__ import annotations

import logging
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .autodiff import Tensor, backward, log_softmax, no_grad, softmax_xent
from .checkpoint import Checkpoint
from .model import BATCH, NORM_AFFINES, RUNNING, SSM_CORES, MicroVMamba, param_view
from .optim import Adam
from .ss2d import IDENTITY, Permutation, all_permutations

logger = logging.getLogger(__name__)

METHODS = ("trust", "trust-naive", "tent", "source", "ensemble", "repetition")
MODES = ("online", "standard")
EXECUTIONS = ("sequential", "parallel")
POLARITIES = ("lowest", "highest")


class AdaptationError(FloatingPointError):
    pass


# -- entropy ranking ------------------------------------------------------------

def shannon_entropy(probs, axis: int = -1):
    """``-sum p log p`` in nats with ``0 log 0 = 0``."""
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=axis) - 1.0) > 1e-6):
        raise ValueError("probabilities must be non-negative and sum to 1")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    out = -terms.sum(axis=axis)
    return float(out) if np.ndim(out) == 0 else out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class EntropyRanking:
    entries: list[tuple[Permutation, float]]
    n_batches: int = 0
    n_samples: int = 0
    seed: int | None = None

    def __len__(self):
        return len(self.entries)

    @property
    def permutations(self) -> list[Permutation]:
        return [p for p, _ in self.entries]

    def entropy_of(self, perm: Permutation) -> float:
        return dict(self.entries)[perm]

    def to_dict(self) -> dict:
        return {
            "calibration": {"batches": self.n_batches, "samples": self.n_samples, "seed": self.seed},
            "ranking": [{"permutation": p.name, "mean_entropy": e} for p, e in self.entries],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EntropyRanking":
        cal = d.get("calibration", {})
        entries = [(Permutation.parse(r["permutation"]), float(r["mean_entropy"])) for r in d["ranking"]]
        return cls(entries, cal.get("batches", 0), cal.get("samples", 0), cal.get("seed"))


def rank_permutations(model: MicroVMamba, calibration: Iterable[np.ndarray],
                      pool: Sequence[Permutation] | None = None, *, norm_mode: str = BATCH,
                      seed: int | None = None) -> EntropyRanking:
    """Order ``pool`` by mean predictive entropy on ``calibration``; ties go lexicographic."""
    batches = [np.asarray(b) for b in calibration if len(b)]
    if not batches:
        raise ValueError("calibration set is empty")
    pool = list(all_permutations() if pool is None else pool)
    if not pool:
        raise ValueError("permutation pool is empty")
    if len(set(pool)) != len(pool):
        raise ValueError("permutation pool has duplicates")
    n = sum(len(b) for b in batches)
    scores = []
    with no_grad():
        for perm in pool:
            total = 0.0
            for b in batches:
                probs = softmax(model.forward(b, perm, norm_mode=norm_mode).data)
                total += float(np.sum(shannon_entropy(probs, axis=1)))
            scores.append((perm, total / n))
    scores.sort(key=lambda pe: (pe[1], pe[0].ordering))
    return EntropyRanking(scores, len(batches), n, seed)


def select_top_k(ranking: EntropyRanking, k: int, polarity: str = "lowest") -> list[Permutation]:
    if not 1 <= k <= len(ranking):
        raise ValueError(f"k={k} outside [1, {len(ranking)}]")
    perms = ranking.permutations
    if polarity == "lowest":
        return perms[:k]
    if polarity == "highest":
        return perms[-k:]
    raise ValueError(f"unknown polarity {polarity!r}")


def pseudo_labels(logits) -> np.ndarray:
    """Row-wise argmax (first index wins ties); carries no gradient."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(z, axis=-1)


# -- weight averaging -------------------------------------------------------

def _exact_mean(cols: np.ndarray) -> np.ndarray:
    """Correctly rounded mean over axis 0 of ``cols[K, M]``.

    Exact rounding makes the result independent of snapshot order and returns a
    snapshot unchanged when all K copies agree.
    """
    k = cols.shape[0]
    out = cols[0].copy()
    if k == 1:
        return out
    bits = cols.view(np.int64)
    differ = np.flatnonzero(np.any(bits != bits[0], axis=0))  # identical columns pass through, keeping -0.0
    for i, col in zip(differ, cols[:, differ].T.tolist()):
        try:
            q = math.fsum(col) / k
            resid = math.fsum(col + [-q] * k)  # E - k*q, rounded once
        except OverflowError:
            q, resid = 0.0, math.inf
        step = min(math.ulp(q), abs(q - math.nextafter(q, 0.0)) or math.ulp(q))
        if abs(resid) < 0.5 * k * step * (1.0 - 1e-9):
            out[i] = q
        else:
            out[i] = float(sum(map(Fraction, col), Fraction(0)) / k)
    return out


def average_weights(snapshots: Sequence[dict[str, np.ndarray]], weights: Sequence[float] | None = None
                    ) -> dict[str, np.ndarray]:
    """Per-name arithmetic mean of parameter snapshots (optionally weighted)."""
    snaps = [s.params if isinstance(s, Snapshot) else s for s in snapshots]
    if not snaps:
        raise ValueError("nothing to average")
    names = sorted(snaps[0])
    for s in snaps[1:]:
        if sorted(s) != names:
            raise ValueError("snapshots carry different parameter names")
    out = {}
    for name in names:
        shapes = {np.shape(s[name]) for s in snaps}
        if len(shapes) != 1:
            raise ValueError(f"shape mismatch for {name}: {sorted(shapes)}")
        cols = np.stack([np.asarray(s[name], dtype=np.float64).reshape(-1) for s in snaps])
        if weights is None:
            mean = _exact_mean(cols)
        else:
            w = np.asarray(weights, dtype=np.float64)
            mean = (w / w.sum()) @ cols
        out[name] = mean.reshape(shapes.pop())
    return out


@dataclass
class Snapshot:
    perm: Permutation
    params: dict[str, np.ndarray]
    loss_before: float = float("nan")
    loss_after: float = float("nan")


# -- single adaptation step ---------------------------------------------------

def adapt_step(model: MicroVMamba, images: np.ndarray, perm: Permutation, optimizer: Adam, *,
               start: dict[str, np.ndarray] | None = None, iters: int = 1,
               batch_id: int | None = None, track_loss: bool = False) -> Snapshot:
    """Pseudo-label cross-entropy step(s) on the SSM cores under routing ``perm``.

    Works on private copies of the cores (``start`` or the model's current
    values); the model itself is not modified, so several calls may run
    concurrently against one model.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    names = [n for n, _ in param_view(model, SSM_CORES)]
    start = model.get_arrays(names) if start is None else start
    trainable = {n: Tensor(np.array(start[n], copy=True), requires_grad=True) for n in names}
    frozen = model.frozen(names)
    loss_before = float("nan")
    labels = None
    for _ in range(iters):
        logits = model.forward(images, perm, norm_mode=BATCH, params={**frozen, **trainable})
        labels = pseudo_labels(logits)
        loss = softmax_xent(logits, labels)
        if not np.isfinite(loss.data):
            raise AdaptationError(f"non-finite loss under permutation {perm} on batch {batch_id}")
        if np.isnan(loss_before):
            loss_before = float(loss.data)
        Adam.zero_grad(trainable)
        backward(loss)
        optimizer.step(trainable)
    loss_after = float("nan")
    if track_loss:
        with no_grad():
            logits = model.forward(images, perm, norm_mode=BATCH, params={**frozen, **trainable})
        loss_after = float(softmax_xent(logits, labels).data)
    return Snapshot(perm, {n: t.data for n, t in trainable.items()}, loss_before, loss_after)


def _entropy_step(model: MicroVMamba, images, optimizer: Adam, iters: int, batch_id=None) -> None:
    names = [n for n, _ in param_view(model, NORM_AFFINES)]
    trainable = {n: model.params[n] for n in names}
    frozen = model.frozen(names)
    for _ in range(iters):
        logits = model.forward(images, IDENTITY, norm_mode=BATCH, params={**frozen, **trainable})
        logp = log_softmax(logits, axis=1)
        loss = -(logp.exp() * logp).sum() * (1.0 / len(images))
        if not np.isfinite(loss.data):
            raise AdaptationError(f"non-finite entropy on batch {batch_id}")
        Adam.zero_grad(trainable)
        backward(loss)
        optimizer.step(trainable)


# -- configuration & results -----------------------------------------------------

@dataclass
class AdaptationConfig:
    method: str = "trust"
    k: int = 6
    iters: int = 1
    lr: float = 1e-3
    batch_size: int = 32
    mode: str = "online"
    execution: str = "sequential"
    polarity: str = "lowest"
    n_calibration: int = 4
    weighting: str = "uniform"
    norm_mode: str = BATCH
    pool: tuple[str, ...] | None = None

    def validate(self) -> "AdaptationConfig":
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.execution not in EXECUTIONS:
            raise ValueError(f"unknown execution {self.execution!r}")
        if self.polarity not in POLARITIES:
            raise ValueError(f"unknown polarity {self.polarity!r}")
        if self.weighting not in ("uniform", "entropy"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.norm_mode not in (BATCH, RUNNING):
            raise ValueError(f"unknown norm mode {self.norm_mode!r}")
        if self.k < 1 or self.iters < 1 or self.batch_size < 1 or self.n_calibration < 1:
            raise ValueError("k, iters, batch_size and n_calibration must be positive")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pool"] = None if self.pool is None else list(self.pool)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptationConfig":
        d = dict(d)
        if d.get("pool") is not None:
            d["pool"] = tuple(d["pool"])
        return cls(**d)


@dataclass
class RunResult:
    predictions: np.ndarray
    batch_accuracy: list[float] = field(default_factory=list)
    accuracy: float = float("nan")
    ranking: EntropyRanking | None = None
    selected: list[Permutation] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    diversity: dict[str, dict[str, float]] = field(default_factory=dict)
    probe_accuracy: dict[str, float] = field(default_factory=dict)
    theta_bar: dict[str, np.ndarray] | None = None


def batches(x: np.ndarray, size: int) -> list[np.ndarray]:
    return [x[s:s + size] for s in range(0, len(x), size)]


# -- estimator --------------------------------------------------------------------

class TestTimeAdapter(ClassifierMixin, BaseEstimator):
    """Streaming test-time adaptation of a source checkpoint.

    ``fit(X)`` prepares the run: the model is reset to ``checkpoint`` and, for
    permutation-based methods, candidate routings are ranked on the first
    ``n_calibration`` batches of ``X``. ``partial_fit`` then adapts on one batch
    and ``fit_predict`` runs the whole stream, returning per-sample predictions
    made right after each batch's update. ``predict`` uses the current
    parameters without adapting.
    """

    __test__ = False  # keep pytest from collecting the class

    def __init__(self, checkpoint: Checkpoint | None = None, method: str = "trust", k: int = 6, iters: int = 1,
                 lr: float = 1e-3, batch_size: int = 32, mode: str = "online", execution: str = "sequential",
                 polarity: str = "lowest", n_calibration: int = 4, weighting: str = "uniform",
                 norm_mode: str = BATCH, pool=None, ranking: EntropyRanking | None = None,
                 probe_perms=None):
        self.checkpoint = checkpoint
        self.method = method
        self.k = k
        self.iters = iters
        self.lr = lr
        self.batch_size = batch_size
        self.mode = mode
        self.execution = execution
        self.polarity = polarity
        self.n_calibration = n_calibration
        self.weighting = weighting
        self.norm_mode = norm_mode
        self.pool = pool
        self.ranking = ranking
        self.probe_perms = probe_perms

    @classmethod
    def from_config(cls, checkpoint: Checkpoint, config: AdaptationConfig, **kw) -> "TestTimeAdapter":
        return cls(checkpoint, **config.to_dict(), **kw)

    def config(self) -> AdaptationConfig:
        pool = None if self.pool is None else tuple(str(p) for p in self.pool)
        return AdaptationConfig(self.method, self.k, self.iters, self.lr, self.batch_size, self.mode,
                                self.execution, self.polarity, self.n_calibration, self.weighting,
                                self.norm_mode, pool).validate()

    # -- setup ---------------------------------------------------------------
    def _pool(self) -> list[Permutation]:
        if self.method == "trust-naive":
            return [IDENTITY]
        if self.pool is None:
            return all_permutations()
        return [p if isinstance(p, Permutation) else Permutation.parse(p) for p in self.pool]

    def fit(self, X, y=None):
        cfg = self.config()
        if self.checkpoint is None:
            raise ValueError("a source checkpoint is required")
        X = np.asarray(X, dtype=np.float64)
        self.model_ = MicroVMamba.from_checkpoint(self.checkpoint)
        self.core_names_ = [n for n, _ in param_view(self.model_, SSM_CORES)]
        self.timings_ = {"rank": 0.0, "adapt": 0.0, "predict": 0.0}
        self.ranking_ = None
        self.selected_ = [IDENTITY]
        if cfg.method in ("trust", "trust-naive", "ensemble"):
            t0 = time.perf_counter()
            pool = self._pool()
            if self.ranking is not None and cfg.method != "trust-naive":
                self.ranking_ = self.ranking
            else:
                calib = batches(X, cfg.batch_size)[: cfg.n_calibration]
                self.ranking_ = rank_permutations(self.model_, calib, pool, norm_mode=cfg.norm_mode)
            k = min(cfg.k, len(self.ranking_)) if cfg.method == "trust-naive" else cfg.k
            self.selected_ = select_top_k(self.ranking_, k, cfg.polarity)
            self.timings_["rank"] = time.perf_counter() - t0
        self._fresh_state()
        self.n_batches_ = 0
        self.diversity_sum_: dict[str, np.ndarray] = {}
        self.probe_correct_: dict[str, int] = {}
        self.probe_total_ = 0
        self.theta_bar_ = None
        return self

    def _fresh_state(self):
        self.optimizers_ = {p: Adam(lr=self.lr) for p in self.selected_}
        self.shared_optimizer_ = Adam(lr=self.lr)
        if self.method == "ensemble":
            base = self.model_.get_arrays(self.core_names_)
            self.members_ = {p: {n: a.copy() for n, a in base.items()} for p in self.selected_}

    # -- per-batch work -------------------------------------------------------
    def partial_fit(self, X, y=None):
        """Adapt on one batch; predictions for it land in ``last_predictions_``."""
        check_is_fitted(self, "model_")
        X = np.asarray(X, dtype=np.float64)
        if self.mode == "standard":
            self.model_.reset(self.checkpoint)
            self._fresh_state()
        bid = self.n_batches_
        t0 = time.perf_counter()
        m = self.method
        if m in ("trust", "trust-naive"):
            snaps = self._adapt_permutations(X, bid)
            theta = average_weights(snaps, self._weights())
            self.model_.set_arrays(theta)
            self.theta_bar_ = theta
            self._record_diversity(snaps)
        elif m == "repetition":
            snaps, cur = [], None
            for _ in range(self.k):
                s = adapt_step(self.model_, X, IDENTITY, self.shared_optimizer_, start=cur,
                               iters=self.iters, batch_id=bid)
                snaps.append(s)
                cur = s.params
            theta = average_weights(snaps)
            self.model_.set_arrays(theta)
            self.theta_bar_ = theta
            self._record_diversity(snaps)
        elif m == "tent":
            _entropy_step(self.model_, X, self.shared_optimizer_, self.iters, batch_id=bid)
        elif m == "ensemble":
            snaps = self._adapt_permutations(X, bid, starts=self.members_)
            for s in snaps:
                self.members_[s.perm] = s.params
            self._record_diversity(snaps)
        self.timings_["adapt"] += time.perf_counter() - t0
        t0 = time.perf_counter()
        if m == "ensemble":
            self.last_proba_ = self._ensemble_proba(X)
        else:
            self.last_proba_ = self._predict_proba_default(X)
        self.last_predictions_ = self.last_proba_.argmax(axis=1)
        self.timings_["predict"] += time.perf_counter() - t0
        if self.probe_perms:
            self._probe(X)
        self.n_batches_ += 1
        return self

    def _weights(self):
        if self.weighting == "uniform" or self.ranking_ is None:
            return None
        ent = np.array([self.ranking_.entropy_of(p) for p in self.selected_])
        w = np.exp(-(ent - ent.min()))
        return w / w.sum()

    def _adapt_permutations(self, X, bid, starts=None) -> list[Snapshot]:
        base = None if starts is not None else self.model_.get_arrays(self.core_names_)

        def work(p):
            start = starts[p] if starts is not None else base
            return adapt_step(self.model_, X, p, self.optimizers_[p], start=start, iters=self.iters, batch_id=bid)

        if self.execution == "parallel" and len(self.selected_) > 1:
            with ThreadPoolExecutor(max_workers=len(self.selected_)) as pool:
                return list(pool.map(work, self.selected_))
        return [work(p) for p in self.selected_]

    def _predict_proba_default(self, X) -> np.ndarray:
        # evaluation always runs the default routing
        return self.model_.predict_proba(X, norm_mode=self.norm_mode)

    def _ensemble_proba(self, X) -> np.ndarray:
        probs = []
        with no_grad():
            for p in self.selected_:
                params = {n: Tensor(a) for n, a in self.members_[p].items()}
                probs.append(softmax(self.model_.forward(X, p, norm_mode=self.norm_mode, params=params).data))
        return np.mean(probs, axis=0)

    def _record_diversity(self, snaps: list[Snapshot]) -> None:
        for name in self.core_names_:
            norms = [float(np.linalg.norm(s.params[name])) for s in snaps]
            acc = self.diversity_sum_.setdefault(name, np.zeros(2))
            acc += (statistics.fmean(norms), statistics.pstdev(norms))

    def _probe(self, X) -> None:
        self._probe_batches = getattr(self, "_probe_batches", [])
        with no_grad():
            for p in self.probe_perms:
                p = p if isinstance(p, Permutation) else Permutation.parse(p)
                logits = self.model_.forward(X, p, norm_mode=self.norm_mode).data
                self._probe_batches.append((p.name, self.n_batches_, logits.argmax(axis=1)))

    # -- public prediction API -------------------------------------------------
    def fit_predict(self, X, y=None) -> np.ndarray:
        self.fit(X)
        preds = [self.partial_fit(b).last_predictions_ for b in batches(np.asarray(X), self.batch_size)]
        return np.concatenate(preds) if preds else np.empty(0, dtype=int)

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = np.asarray(X, dtype=np.float64)
        if self.method == "ensemble":
            return np.concatenate([self._ensemble_proba(b) for b in batches(X, self.batch_size)])
        return np.concatenate([self._predict_proba_default(b) for b in batches(X, self.batch_size)])

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def diversity(self) -> dict[str, dict[str, float]]:
        """Per-parameter mean/std of L2 norms across adapted copies, averaged over batches."""
        if not self.n_batches_:
            return {}
        return {n: {"norm_mean": float(v[0] / self.n_batches_), "norm_std": float(v[1] / self.n_batches_)}
                for n, v in self.diversity_sum_.items()}

    def audit_frozen(self) -> None:
        """Raise if anything outside the method's trainable set moved away from the checkpoint."""
        if self.method == "tent":
            allowed = {n for n, _ in param_view(self.model_, NORM_AFFINES)}
        else:
            allowed = set(self.core_names_) if self.method in ("trust", "trust-naive", "repetition") else set()
        for n, t in self.model_.params.items():
            if n not in allowed and t.data.tobytes() != self.checkpoint.params[n].tobytes():
                raise AssertionError(f"frozen parameter {n} changed during adaptation")
        for n, b in self.model_.buffers.items():
            if b.tobytes() != self.checkpoint.buffers[n].tobytes():
                raise AssertionError(f"running statistic {n} changed during adaptation")


# -- functional entry points ------------------------------------------------------

def run_stream(checkpoint: Checkpoint, images: np.ndarray, config: AdaptationConfig, labels=None, *,
               ranking: EntropyRanking | None = None, probe_perms=None) -> RunResult:
    """Run one method over a target stream and collect metrics."""
    config.validate()
    adapter = TestTimeAdapter.from_config(checkpoint, config, ranking=ranking, probe_perms=probe_perms)
    preds = adapter.fit_predict(images)
    adapter.audit_frozen()
    res = RunResult(preds, ranking=adapter.ranking_, selected=list(adapter.selected_),
                    timings=dict(adapter.timings_), diversity=adapter.diversity(), theta_bar=adapter.theta_bar_)
    if labels is not None:
        labels = np.asarray(labels)
        res.accuracy = float(np.mean(preds == labels)) if len(labels) else float("nan")
        res.batch_accuracy = [float(np.mean(p == l)) for p, l in
                              zip(batches(preds, config.batch_size), batches(labels, config.batch_size))]
        if probe_perms:
            lab = batches(labels, config.batch_size)
            hits: dict[str, list[float]] = {}
            for name, bid, pred in adapter._probe_batches:
                hits.setdefault(name, []).append(float(np.sum(pred == lab[bid])))
            res.probe_accuracy = {k: sum(v) / len(labels) for k, v in hits.items()}
    return res


def trust_run(checkpoint: Checkpoint, images: np.ndarray, config: AdaptationConfig | None = None, labels=None,
              **kw) -> RunResult:
    config = config or AdaptationConfig()
    if config.method not in ("trust", "trust-naive"):
        raise ValueError("trust_run expects method 'trust' or 'trust-naive'")
    return run_stream(checkpoint, images, config, labels, **kw)


def run_baseline(checkpoint: Checkpoint, images: np.ndarray, kind: str, config: AdaptationConfig | None = None,
                 labels=None, **kw) -> RunResult:
    if kind not in ("source", "tent", "ensemble", "repetition"):
        raise ValueError(f"unknown baseline {kind!r}")
    base = config or AdaptationConfig()
    cfg = AdaptationConfig.from_dict({**base.to_dict(), "method": kind})
    return run_stream(checkpoint, images, cfg, labels, **kw)
