"""Combine trained ML models with dynamic models.

Two modes: replace named model variables with learned expressions
(``substitute``), or add a learned correction to a discrete one-step map,
x+ = f(x,u) + B^T m(x,u) (``additive``).
"""

from __future__ import annotations

import numpy as np

from .. import exprgraph as eg
from ..model import Model, ModelError
from .ann import AnnSpec, ann_expressions
from .gp import GpModel, gp_mean_expression


class UnresolvedFeature(Exception):
    def __init__(self, name):
        super().__init__(f"feature {name!r} does not name a model variable")
        self.name = name


class ShapeMismatch(Exception):
    pass


def _model_vars(model):
    out = {}
    for v in (
        list(model.states)
        + list(model.inputs)
        + list(model.parameters)
        + list(model.residual_variables)
    ):
        out[v.name] = v
    out[model.time_variable.name] = model.time_variable
    return out


def _ml_outputs(ml, feature_exprs):
    if isinstance(ml, AnnSpec):
        return ann_expressions(ml, feature_exprs)
    if isinstance(ml, GpModel):
        return [gp_mean_expression(ml, feature_exprs)]
    raise TypeError(f"cannot hybridize with {type(ml).__name__}")


def _rebuild(model, f, h):
    out = Model(
        states=model.states,
        odes=f,
        inputs=model.inputs,
        parameters=model.parameters,
        dt=model.dt,
        algebraic_residuals=model.q,
        residual_variables=model.residual_variables,
        measurements=h,
        time_variable=model.time_variable,
        discrete=model.time_domain == "discrete",
        x0=model.x0,
        name=model.name + "_hybrid",
    )
    out.output_names = list(model.output_names)
    if hasattr(model, "rk_order"):
        out.rk_order = model.rk_order
    return out


def hybridize(model, ml, mode, feature_names, varnames=None, B=None):
    """Return a new model with the ML model embedded.

    feature_names: model variable names fed to the ML model, in its
    feature order. substitute mode needs `varnames` (one per ML output);
    additive mode needs `B` of shape n_l x n_x and a discrete model.
    """
    names = _model_vars(model)
    feature_exprs = []
    for fname in feature_names:
        if fname not in names:
            raise UnresolvedFeature(fname)
        feature_exprs.append(eg.Var(names[fname]))
    outputs = _ml_outputs(ml, feature_exprs)

    if mode == "substitute":
        if varnames is None or len(varnames) != len(outputs):
            raise ShapeMismatch(
                f"need one target variable per ML output ({len(outputs)})"
            )
        subs = {}
        for vname, expr in zip(varnames, outputs):
            if vname not in names:
                raise UnresolvedFeature(vname)
            subs[names[vname]] = expr
        f = [eg.substitute(e, subs) for e in model.f]
        h = [eg.substitute(e, subs) for e in model.h]
        out = _rebuild(model, f, h)
        # substituted parameters are no longer free
        out.parameters = [p for p in out.parameters if p.name not in varnames]
        out._compile()
        return out

    if mode == "additive":
        if model.time_domain != "discrete":
            raise ModelError(
                "additive correction applies to discrete models; discretize first"
            )
        B = np.asarray(B, dtype=float)
        if B.shape != (len(outputs), model.n_x):
            raise ShapeMismatch(
                f"B must be {len(outputs)}x{model.n_x}, got {B.shape}"
            )
        f = []
        for i, fi in enumerate(model.f):
            acc = fi
            for j, mj in enumerate(outputs):
                if B[j, i] != 0.0:
                    acc = acc + float(B[j, i]) * mj
            f.append(acc)
        return _rebuild(model, f, model.h)

    raise ValueError(f"unknown mode {mode!r}")
