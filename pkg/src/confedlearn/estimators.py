"""scikit-learn compatible estimators backed by the numpy engine."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .cgan import CganHyperparams, fit_cgan, impute_matrix
from .exceptions import DegenerateLabelError, RejectedInputError
from .nn import BCE, init_params, mlp_arch
from .nn.fit import EarlyStopping, eval_bce, predict_in_chunks, run_epoch


def _validation_split(n, fraction, seed):
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(fraction * n)) if n >= 5 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


class NeuralNetClassifier(ClassifierMixin, BaseEstimator):
    """Binary MLP classifier trained with SGD on binary cross entropy.

    Early-stops on a held-out fraction of the training data and keeps the
    epoch with the lowest held-out loss.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
    batch_norm, dropout : per-hidden-layer flags/rates (scalars broadcast)
    learning_rate : float
    batch_size : int
    max_epochs : int
    patience : int
        Epochs without held-out improvement before stopping.
    validation_fraction : float
    random_state : int
    """

    def __init__(self, hidden_layer_sizes=(32,), batch_norm=False, dropout=0.0,
                 learning_rate=0.1, batch_size=64, max_epochs=100, patience=3,
                 validation_fraction=0.2, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.batch_norm = batch_norm
        self.dropout = dropout
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=None)
        y = np.asarray(y)
        if not np.isin(y, (0, 1)).all():
            raise RejectedInputError("labels must be 0/1")
        if y.min() == y.max():
            raise DegenerateLabelError(f"all {y.shape[0]} labels equal {y[0]}")
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        rng = np.random.default_rng(self.random_state)
        arch = mlp_arch(X.shape[1], tuple(self.hidden_layer_sizes), 1,
                        batch_norm=self.batch_norm, dropout=self.dropout)
        params = init_params(arch, int(rng.integers(2**63)))
        train, val = _validation_split(X.shape[0], self.validation_fraction,
                                       int(rng.integers(2**63)))
        stopper = EarlyStopping(self.patience)
        train_loss = []
        for _ in range(self.max_epochs):
            params, loss = run_epoch(params, X, y, BCE, self.learning_rate, self.batch_size,
                                     int(rng.integers(2**63)), rows=train)
            train_loss.append(loss)
            monitored = eval_bce(params, X[val], y[val]) if val.size else loss
            if stopper.update(monitored, params):
                break
        self.params_ = stopper.best_state
        self.history_ = {"train_loss": train_loss, "validation_loss": stopper.history,
                         "best_epoch": stopper.best_round}
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=None)
        if X.shape[1] != self.n_features_in_:
            raise RejectedInputError(
                f"expected {self.n_features_in_} features, got {X.shape[1]}")
        p = predict_in_chunks(self.params_, X)[:, 0]
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] > 0.5).astype(int)


class CGANImputer(TransformerMixin, BaseEstimator):
    """Conditional GAN mapping one code vector type to another.

    ``fit(X_src, X_tgt, paired=mask)``: rows with ``paired`` False have no
    observed target and only feed the adversarial game. ``transform``
    returns binarized imputations, ``predict_proba`` the generator output.
    """

    def __init__(self, generator_hidden=(128,), discriminator_hidden=(64,), noise_dim=100,
                 lambda_match=10.0, match_loss="l1", generator_lr=0.5, discriminator_lr=0.05,
                 batch_size=64, epochs=100, batch_norm=True, dropout=0.0,
                 validation_fraction=0.2, binarize="threshold", random_state=0):
        self.generator_hidden = generator_hidden
        self.discriminator_hidden = discriminator_hidden
        self.noise_dim = noise_dim
        self.lambda_match = lambda_match
        self.match_loss = match_loss
        self.generator_lr = generator_lr
        self.discriminator_lr = discriminator_lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.batch_norm = batch_norm
        self.dropout = dropout
        self.validation_fraction = validation_fraction
        self.binarize = binarize
        self.random_state = random_state

    def _hyperparams(self):
        return CganHyperparams(
            generator_hidden=tuple(self.generator_hidden),
            discriminator_hidden=tuple(self.discriminator_hidden),
            noise_dim=self.noise_dim, lambda_match=self.lambda_match,
            match_loss=self.match_loss,
            generator_lr=self.generator_lr, discriminator_lr=self.discriminator_lr,
            batch_size=self.batch_size, epochs=self.epochs, batch_norm=self.batch_norm,
            dropout=self.dropout, validation_fraction=self.validation_fraction,
            binarize=self.binarize)

    def fit(self, X_src, X_tgt, paired=None):
        X_src = check_array(X_src, dtype=None)
        X_tgt = np.asarray(X_tgt, dtype=float)
        if X_tgt.ndim != 2 or X_tgt.shape[0] != X_src.shape[0]:
            raise RejectedInputError("X_tgt must be a matrix with one row per X_src row")
        if paired is None:
            paired = ~np.isnan(X_tgt).any(axis=1)
        X_tgt = np.nan_to_num(X_tgt).astype(np.uint8)
        self.model_ = fit_cgan(X_src, X_tgt, np.asarray(paired, dtype=bool),
                               self._hyperparams(), self.random_state)
        self.n_features_in_ = X_src.shape[1]
        return self

    def predict_proba(self, X_src, z_seed=0):
        check_is_fitted(self, "model_")
        return impute_matrix(self.model_, check_array(X_src, dtype=None), z_seed)[0]

    def transform(self, X_src, z_seed=0):
        check_is_fitted(self, "model_")
        return impute_matrix(self.model_, check_array(X_src, dtype=None), z_seed)[1]
