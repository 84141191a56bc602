"""Micro VMamba-style image classifier.

patch embed -> n x [batch norm -> SS2D(perm) -> residual] -> batch norm
-> global average pool -> linear head
"""
from __future__ import annotations

import logging
from typing import Iterable

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .autodiff import Tensor, backward, no_grad, softmax_xent
from .checkpoint import Checkpoint, ConfigMismatchError, ModelConfig
from .optim import Adam
from .ss2d import IDENTITY, Permutation, init_ss2d_params, ss2d_forward

logger = logging.getLogger(__name__)

BATCH = "batch"
RUNNING = "running"

SSM_CORES = "ssm-cores"
NORM_AFFINES = "norm-affines"
ALL = "all"
SELECTORS = (SSM_CORES, NORM_AFFINES, ALL)


class TrainingDivergedError(FloatingPointError):
    pass


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[B, H, W, ch] -> [B, H/p, W/p, p*p*ch]``."""
    b, h, w, ch = images.shape
    x = images.reshape(b, h // patch, patch, w // patch, patch, ch)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, h // patch, w // patch, patch * patch * ch)


class MicroVMamba:
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._init(np.random.default_rng(seed))

    def _init(self, rng):
        c = self.config
        p = lambda a: Tensor(a, requires_grad=True)  # noqa: E731
        fan_in = c.patch_size * c.patch_size * c.channels
        self.params["patch_embed.weight"] = p(rng.normal(0, fan_in ** -0.5, size=(fan_in, c.embed_dim)))
        self.params["patch_embed.bias"] = p(np.zeros(c.embed_dim))
        for i in range(c.n_blocks):
            self._add_norm(f"blocks.{i}.norm")
            self.params.update(init_ss2d_params(c.embed_dim, c.d_inner, c.state_dim, rng,
                                                prefix=f"blocks.{i}.ss2d."))
        self._add_norm("norm_f")
        self.params["head.weight"] = p(rng.normal(0, c.embed_dim ** -0.5, size=(c.embed_dim, c.n_classes)))
        self.params["head.bias"] = p(np.zeros(c.n_classes))

    def _add_norm(self, name):
        d = self.config.embed_dim
        self.params[name + ".weight"] = Tensor(np.ones(d), requires_grad=True)
        self.params[name + ".bias"] = Tensor(np.zeros(d), requires_grad=True)
        self.buffers[name + ".running_mean"] = np.zeros(d)
        self.buffers[name + ".running_var"] = np.ones(d)

    # -- forward --------------------------------------------------------
    def _norm(self, x: Tensor, name: str, p: dict, norm_mode: str, update_stats: bool) -> Tensor:
        c = self.config
        if norm_mode == BATCH:
            mu = x.mean(axis=(0, 1, 2), keepdims=True)
            xc = x - mu
            var = (xc * xc).mean(axis=(0, 1, 2), keepdims=True)
            xhat = xc * (var + c.bn_eps) ** -0.5
            if update_stats:
                n = x.size // x.shape[-1]
                m = c.bn_momentum
                unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
                self.buffers[name + ".running_mean"] = (1 - m) * self.buffers[name + ".running_mean"] + m * mu.data.reshape(-1)
                self.buffers[name + ".running_var"] = (1 - m) * self.buffers[name + ".running_var"] + m * unbiased
        elif norm_mode == RUNNING:
            rm = self.buffers[name + ".running_mean"]
            rv = self.buffers[name + ".running_var"]
            xhat = (x - rm) * (1.0 / np.sqrt(rv + c.bn_eps))
        else:
            raise ValueError(f"unknown norm mode {norm_mode!r}")
        return xhat * p[name + ".weight"] + p[name + ".bias"]

    def forward(self, images, perm: Permutation = IDENTITY, *, norm_mode: str = RUNNING,
                params: dict[str, Tensor] | None = None, update_stats: bool = False) -> Tensor:
        """Logits ``[B, C]`` for ``images[B, H, W, ch]`` under routing ``perm``.

        ``params`` overrides entries of the model's own parameter map, which is
        how adaptation clones run against the shared trunk.
        """
        c = self.config
        images = np.asarray(images, dtype=np.float64)
        want = (c.image_size, c.image_size, c.channels)
        if images.ndim != 4 or images.shape[1:] != want:
            raise ValueError(f"expected images of shape [B, {want[0]}, {want[1]}, {want[2]}], got {images.shape}")
        p = self.params if params is None else {**self.params, **params}
        x = Tensor(patchify(images, c.patch_size)) @ p["patch_embed.weight"] + p["patch_embed.bias"]
        for i in range(c.n_blocks):
            u = self._norm(x, f"blocks.{i}.norm", p, norm_mode, update_stats)
            x = x + ss2d_forward(u, p, perm, prefix=f"blocks.{i}.ss2d.")
        x = self._norm(x, "norm_f", p, norm_mode, update_stats)
        pooled = x.mean(axis=(1, 2))
        return pooled @ p["head.weight"] + p["head.bias"]

    __call__ = forward

    def predict_proba(self, images, norm_mode: str = RUNNING, params=None) -> np.ndarray:
        """Class probabilities under the default routing."""
        with no_grad():
            logits = self.forward(images, IDENTITY, norm_mode=norm_mode, params=params).data
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    # -- parameter management -------------------------------------------
    def frozen(self, trainable: Iterable[str] = ()) -> dict[str, Tensor]:
        """Constant views of every parameter except ``trainable``."""
        trainable = set(trainable)
        return {n: Tensor(t.data) for n, t in self.params.items() if n not in trainable}

    def n_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def get_arrays(self, names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
        names = self.params if names is None else names
        return {n: self.params[n].data.copy() for n in names}

    def set_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for n, a in arrays.items():
            if n not in self.params:
                raise KeyError(f"unknown parameter {n!r}")
            if a.shape != self.params[n].shape:
                raise ValueError(f"shape mismatch for {n}: {a.shape} vs {self.params[n].shape}")
            self.params[n].data = np.array(a, dtype=np.float64, copy=True)

    def checkpoint(self, metadata: dict | None = None) -> Checkpoint:
        return Checkpoint(
            self.config,
            {n: t.data.copy() for n, t in self.params.items()},
            {n: b.copy() for n, b in self.buffers.items()},
            {k: str(v) for k, v in (metadata or {}).items()},
        )

    def reset(self, ckpt: Checkpoint) -> None:
        """Restore every parameter and running statistic from ``ckpt``."""
        if ckpt.config != self.config:
            raise ConfigMismatchError(f"checkpoint config {ckpt.config} does not match model {self.config}")
        if ckpt.params.keys() != self.params.keys() or ckpt.buffers.keys() != self.buffers.keys():
            raise ConfigMismatchError("checkpoint parameter names do not match the model")
        self.set_arrays(ckpt.params)
        for n, b in ckpt.buffers.items():
            if b.shape != self.buffers[n].shape:
                raise ValueError(f"shape mismatch for buffer {n}")
            self.buffers[n] = b.copy()

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "MicroVMamba":
        model = cls(ckpt.config)
        model.reset(ckpt)
        return model


def param_view(model: MicroVMamba, selector: str) -> list[tuple[str, Tensor]]:
    """Ordered ``(name, tensor)`` pairs picked by ``selector``.

    ``ssm-cores`` are the per-branch A_log, B/C projections, dt projection and
    skip gains; ``norm-affines`` the batch-norm scales and shifts.
    """
    if selector == SSM_CORES:
        keep = lambda n: ".ss2d.cores." in n  # noqa: E731
    elif selector == NORM_AFFINES:
        keep = lambda n: (".norm." in n or n.startswith("norm_f.")) and n.endswith((".weight", ".bias"))  # noqa: E731
    elif selector == ALL:
        keep = lambda n: True  # noqa: E731
    else:
        raise ValueError(f"unknown selector {selector!r}; expected one of {SELECTORS}")
    return [(n, t) for n, t in model.params.items() if keep(n)]


def accuracy(model: MicroVMamba, images, labels, batch_size: int = 256, norm_mode: str = RUNNING) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    correct = 0
    for s in range(0, len(labels), batch_size):
        probs = model.predict_proba(images[s:s + batch_size], norm_mode=norm_mode)
        correct += int((probs.argmax(axis=1) == labels[s:s + batch_size]).sum())
    return correct / len(labels)


def train_source(images, labels, config: ModelConfig | None = None, *, epochs: int = 30, lr: float = 3e-3,
                 batch_size: int = 32, seed: int = 0, eval_images=None, eval_labels=None) -> Checkpoint:
    """Supervised training of every parameter under the default routing.

    Records ``clean_accuracy`` (on the eval split if given, else the training
    set, running-statistics norm) in the checkpoint metadata.
    """
    config = config or ModelConfig()
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    init_seed, order_seed = np.random.SeedSequence([seed, 1]).generate_state(2)
    model = MicroVMamba(config, seed=int(init_seed))
    rng = np.random.default_rng(int(order_seed))
    opt = Adam(lr=lr)
    n = len(labels)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            if len(idx) < 2:
                continue
            logits = model.forward(images[idx], IDENTITY, norm_mode=BATCH, update_stats=True)
            loss = softmax_xent(logits, labels[idx])
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(f"non-finite loss {float(loss.data)} at epoch {epoch}, batch offset {s}")
            Adam.zero_grad(model.params)
            backward(loss)
            opt.step(model.params)
            total += float(loss.data) * len(idx)
        logger.debug("epoch %d loss %.4f", epoch, total / n)
    if eval_images is None:
        eval_images, eval_labels = images, labels
    acc = accuracy(model, eval_images, eval_labels)
    return model.checkpoint({"clean_accuracy": repr(acc), "epochs": epochs, "lr": repr(lr),
                             "batch_size": batch_size, "seed": seed})


class MicroVMambaClassifier(ClassifierMixin, BaseEstimator):
    """Estimator wrapper around :func:`train_source`.

    ``X`` is ``[n, H, W, ch]``; labels may be any sortable values and are
    mapped onto ``classes_``.
    """

    def __init__(self, embed_dim: int = 16, n_blocks: int = 2, state_dim: int = 4, patch_size: int = 4,
                 epochs: int = 15, lr: float = 3e-3, batch_size: int = 32, random_state: int = 0):
        self.embed_dim = embed_dim
        self.n_blocks = n_blocks
        self.state_dim = state_dim
        self.patch_size = patch_size
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state

    def _check_images(self, X) -> np.ndarray:
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.ndim != 4 or X.shape[1] != X.shape[2]:
            raise ValueError(f"expected square images [n, H, W, ch], got {X.shape}")
        return X

    def fit(self, X, y):
        X = self._check_images(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} images but {len(y)} labels")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need samples from at least two classes")
        config = ModelConfig(image_size=X.shape[1], channels=X.shape[3], patch_size=self.patch_size,
                             embed_dim=self.embed_dim, n_blocks=self.n_blocks, state_dim=self.state_dim,
                             n_classes=len(self.classes_))
        self.checkpoint_ = train_source(X, encoded, config, epochs=self.epochs, lr=self.lr,
                                        batch_size=self.batch_size, seed=self.random_state)
        self.model_ = MicroVMamba.from_checkpoint(self.checkpoint_)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = self._check_images(X)
        return np.concatenate([self.model_.predict_proba(X[s:s + 256]) for s in range(0, len(X), 256)])

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.predict_proba(X).argmax(axis=1)]
