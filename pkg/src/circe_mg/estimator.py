"""Scikit-learn style facade over the functional fitting API."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_consistent_length, column_or_1d

from .diagnostics import (
    fisher_information,
    nec,
    prediction_interval,
    standardized_residuals,
)
from .ecme import EcmeConfig, fit_multigroup, fit_regular
from .exceptions import CirceError
from .htests import aic, n_parameters, wald_test
from .model import ModelParams, log_likelihood, validate_dataset


class CirceEstimator(BaseEstimator):
    """Gaussian multiplicative-factor uncertainty estimator.

    Fits the marginal model y_i ~ N(x_i . m, sum_j x_ij^2 sigma2[s(i), j] +
    r_i) by multi-start ECME.  ``model="multigroup"`` estimates one variance
    vector per group label passed to :meth:`fit`; ``model="pooled"`` ignores
    the labels and estimates a single shared vector.

    After fitting: ``mean_`` (p,), ``variances_`` (q, p), ``raw_variances_``
    (signed pre-clamp values), ``clamped_``, ``loglik_``, ``converged_``,
    ``n_iter_``, ``group_labels_`` (original labels in compact order).
    """

    def __init__(
        self,
        model: str = "multigroup",
        max_iter: int = 10000,
        tol_loglik: float = 1e-10,
        tol_params: float = 1e-9,
        n_random_starts: int = 8,
        seed: int = 0,
        clamp_negative_variances: bool = True,
    ):
        self.model = model
        self.max_iter = max_iter
        self.tol_loglik = tol_loglik
        self.tol_params = tol_params
        self.n_random_starts = n_random_starts
        self.seed = seed
        self.clamp_negative_variances = clamp_negative_variances

    def _config(self) -> EcmeConfig:
        return EcmeConfig(
            max_iterations=self.max_iter,
            rel_loglik_tol=self.tol_loglik,
            param_tol=self.tol_params,
            n_random_starts=self.n_random_starts,
            seed=self.seed,
            clamp_negative_variances=self.clamp_negative_variances,
        )

    def fit(self, X, y, groups=None, noise_var=None):
        if self.model not in ("pooled", "multigroup"):
            raise CirceError(f"unknown model {self.model!r}")
        X = check_array(X, dtype=np.float64, ensure_2d=True)
        y = column_or_1d(y, dtype=np.float64)
        check_consistent_length(X, y)
        dataset = validate_dataset(y, X, noise_var, groups)
        cfg = self._config()
        result = fit_regular(dataset, cfg) if self.model == "pooled" else fit_multigroup(dataset, cfg)
        if self.model == "pooled":
            dataset = validate_dataset(dataset.y, dataset.h, dataset.r, None)
        self.dataset_ = dataset
        self.result_ = result
        self.mean_ = result.params.m
        self.variances_ = result.params.sigma2
        self.raw_variances_ = result.raw_sigma2
        self.clamped_ = result.clamped
        self.loglik_ = result.loglik
        self.converged_ = result.converged
        self.n_iter_ = result.iterations
        self.n_groups_ = dataset.q
        self.group_labels_ = dataset.group_labels
        return self

    def _check_fitted(self):
        if not hasattr(self, "result_"):
            raise NotFittedError(
                "This CirceEstimator instance is not fitted yet; call fit first."
            )

    def predict(self, X):
        """Expected responses X @ mean_."""
        self._check_fitted()
        X = check_array(X, dtype=np.float64, ensure_2d=True)
        if X.shape[1] != self.mean_.shape[0]:
            raise CirceError(
                f"X has {X.shape[1]} columns but the fit used {self.mean_.shape[0]}"
            )
        return X @ self.mean_

    def score(self, X, y, groups=None, noise_var=None):
        """Mean per-observation log-likelihood under the fitted parameters.

        New group labels must be among the labels seen at fit time (pooled
        fits accept anything and ignore the labels).
        """
        self._check_fitted()
        X = check_array(X, dtype=np.float64, ensure_2d=True)
        y = column_or_1d(y, dtype=np.float64)
        check_consistent_length(X, y)
        if self.model == "pooled":
            groups = None
        elif groups is not None:
            lookup = {lab: s + 1 for s, lab in enumerate(self.group_labels_)}
            try:
                groups = [lookup[int(g)] for g in np.asarray(groups).reshape(-1)]
            except KeyError as exc:
                raise CirceError(f"unseen group label {exc.args[0]!r}") from exc
        d = validate_dataset(y, X, noise_var, groups, n_groups=self.n_groups_)
        return log_likelihood(d, self.result_.params, strict=False) / d.n

    # -- diagnostics pass-throughs on the training data ---------------------

    def fisher_information(self):
        self._check_fitted()
        return fisher_information(self.dataset_, self.result_.params)

    def nec(self):
        self._check_fitted()
        return nec(self.fisher_information(), self.result_.params)

    def standardized_residuals(self):
        self._check_fitted()
        return standardized_residuals(self.dataset_, self.result_.params)

    def prediction_interval(self, group=0, factor=0, form="gaussian", confidence=0.95):
        self._check_fitted()
        return prediction_interval(
            self.result_.params, group, factor, form=form, confidence=confidence
        )

    def wald_test(self, s: int, s2: int, j: int = 0):
        self._check_fitted()
        return wald_test(self.fisher_information(), self.result_.params, s, s2, j)

    def aic(self):
        self._check_fitted()
        p = self.result_.params.p
        q = self.result_.params.q
        return aic(self.loglik_, n_parameters(p, q, self.model))

    def params(self) -> ModelParams:
        self._check_fitted()
        return self.result_.params
