"""scikit-learn style wrapper around the VAE classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .navigation import NavigationTrace, navigate
from .training import TrainConfig, TrainState, evaluate_split, train
from .vae import VAENet, hard_dice, preset


def check_voxels(X, size: int, channels: int = 2) -> np.ndarray:
    """Validate a ``[N, channels, size, size, size]`` batch with values in [0, 1]."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    want = (channels, size, size, size)
    if X.ndim != 5 or X.shape[1:] != want:
        raise ValueError(f"expected voxel batches shaped [N, {', '.join(map(str, want))}], got {X.shape}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("voxel values must lie in [0, 1]")
    return X


class LatentMorphClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """VAE + MLP shape classifier.

    ``transform`` returns latent means, ``inverse_transform`` decodes latent
    vectors back to two-channel soft segmentations, and :meth:`navigate`
    morphs a sample toward a target class.

    Parameters
    ----------
    preset : {"desk32", "paper80"}
        Architecture preset; fixes the input grid size.
    latent_dim : int or None
        Overrides the preset's latent dimension.
    alpha, beta : float
        Weights of the KL and classification terms.
    learning_rate, batch_size, max_iters, val_every, patience, seed
        Training controls; validation and early stopping only run when
        ``fit`` receives a validation set.
    """

    def __init__(
        self,
        preset: str = "desk32",
        latent_dim=None,
        alpha: float = 0.1,
        beta: float = 1.0,
        learning_rate: float = 1e-4,
        batch_size: int = 16,
        max_iters: int = 1200,
        val_every: int = 200,
        patience: int = 10,
        seed: int = 42,
        clip_grad: bool = False,
    ):
        self.preset = preset
        self.latent_dim = latent_dim
        self.alpha = alpha
        self.beta = beta
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_iters = max_iters
        self.val_every = val_every
        self.patience = patience
        self.seed = seed
        self.clip_grad = clip_grad

    def _model_config(self):
        return preset(self.preset, latent_dim=self.latent_dim, alpha=self.alpha, beta=self.beta)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_iters=self.max_iters,
            val_every=self.val_every,
            patience=self.patience,
            seed=self.seed,
            clip_grad=self.clip_grad,
        )

    def fit(self, X, y, X_val=None, y_val=None):
        cfg = self._model_config()
        X = check_voxels(X, cfg.input_size, cfg.channels)
        y = np.asarray(y, dtype=int).reshape(-1)
        if y.shape[0] != X.shape[0]:
            raise ValueError(f"{y.shape[0]} labels for {X.shape[0]} samples")
        if not set(np.unique(y)) <= {0, 1}:
            raise ValueError("labels must be 0 or 1")
        if X_val is not None:
            X_val = check_voxels(X_val, cfg.input_size, cfg.channels)
            y_val = np.asarray(y_val, dtype=int).reshape(-1)
        self.net_ = VAENet(cfg, seed=self.seed)
        best = {}

        def snapshot(state):
            best["params"] = [p.value.data.copy() for p in self.net_.params]

        self.state_ = train(self.net_, X, y, X_val, y_val, self._train_config(), on_best=snapshot)
        if "params" in best:
            # restore the best-validation weights
            for p, arr in zip(self.net_.params, best["params"]):
                p.value.data = arr
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    @classmethod
    def from_net(cls, net: VAENet, **params) -> "LatentMorphClassifier":
        """Wrap an already-trained network (e.g. loaded from a checkpoint)."""
        c = net.config
        est = cls(latent_dim=c.latent_dim, alpha=c.alpha, beta=c.beta, **params)
        est.net_ = net
        est.state_ = TrainState()
        est.classes_ = np.array([0, 1])
        est.n_features_in_ = c.channels * c.input_size**3
        return est

    def _checked(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        c = self.net_.config
        return check_voxels(X, c.input_size, c.channels)

    def _batched(self, X, fn, batch_size: int = 32):
        return np.concatenate([fn(X[i : i + batch_size]) for i in range(0, X.shape[0], batch_size)])

    def transform(self, X) -> np.ndarray:
        X = self._checked(X)
        return self._batched(X, lambda xb: self.net_.encode(xb).mu.data)

    def inverse_transform(self, Z) -> np.ndarray:
        check_is_fitted(self, "net_")
        Z = check_array(Z, dtype=np.float64)
        return self._batched(Z, lambda zb: self.net_.decode(zb).data)

    def reconstruct(self, X) -> np.ndarray:
        return self.inverse_transform(self.transform(X))

    def predict_proba(self, X) -> np.ndarray:
        mu = self.transform(X)
        return self.net_.classify(mu).probs

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def reconstruction_dice(self, X) -> float:
        X = self._checked(X)
        return hard_dice(X, self.reconstruct(X))

    def evaluate(self, X, y) -> dict:
        X = self._checked(X)
        return evaluate_split(self.net_, X, np.asarray(y, dtype=int))

    def navigate(self, x, target: int = 1, lam: float = 0.1, max_iters: int = 200, p_stop: float = 0.999, mode: str = "probability") -> NavigationTrace:
        """Morph one sample (``[2, S, S, S]`` or ``[1, 2, S, S, S]``) toward ``target``."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 4:
            x = x[None]
        mu0 = self.transform(x)[0]
        return navigate(self.net_, mu0, target=target, lam=lam, max_iters=max_iters, p_stop=p_stop, mode=mode)
