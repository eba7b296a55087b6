"""Minimal estimator plumbing compatible with sklearn-style tooling."""

import inspect


class ParamsMixin:
    """Provides ``get_params``/``set_params`` derived from ``__init__``.

    Duck-type compatible with scikit-learn pipelines and grid search without
    pulling in the dependency; constructor arguments are the parameters,
    fitted state lives in trailing-underscore attributes.
    """

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [
            p.name
            for p in sig.parameters.values()
            if p.name != "self" and p.kind not in (p.VAR_POSITIONAL, p.VAR_KEYWORD)
        ]

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValueError(
                    f"unknown parameter {key!r} for {type(self).__name__}"
                )
            setattr(self, key, value)
        return self
