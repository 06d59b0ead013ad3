"""ADMM structured pruning and quantization.

Each constraint on a layer (sparsity or quantization) owns an auxiliary
copy ``Z`` and a scaled dual ``U``. A round runs SGD on the loss plus
``rho/2 * ||W - Z + U||^2`` for every pair, then sets ``Z = proj(W + U)``
and ``U = U + W - Z``. Masked retraining afterwards makes the sparsity
constraints hold exactly.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from .model import Model, QuantSpec
from .quantization import QuantConstraint, choose_frac_bits, quantize_project
from .model import sparsity_report
from .sparsity import SparsityConstraint, combined_mask, constraints_by_layer
from .trainer import (
    GradFn,
    NonFiniteLoss,
    evaluate,
    init_velocity,
    loss_and_gradients,
    run_epoch,
)

logger = logging.getLogger(__name__)

Constraint = Union[SparsityConstraint, QuantConstraint]


class AdmmError(RuntimeError):
    pass


@dataclass
class AdmmSchedule:
    admm_rounds: int = 10
    sgd_steps_per_round: Optional[int] = None  # None: one full pass over the data
    rho_initial: float = 1e-3
    rho_growth: float = 1.5
    learning_rate: float = 0.01
    lr_decay: float = 1.0
    batch_size: int = 32
    momentum: float = 0.0
    retrain_epochs: int = 5
    retrain_learning_rate: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.admm_rounds < 0 or self.retrain_epochs < 0:
            raise ValueError("round and epoch counts must be >= 0")
        if self.sgd_steps_per_round is not None and self.sgd_steps_per_round < 0:
            raise ValueError("sgd_steps_per_round must be >= 0")
        if self.rho_initial < 0 or self.rho_growth < 1:
            raise ValueError("need rho_initial >= 0 and rho_growth >= 1")
        if self.learning_rate < 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("need learning_rate >= 0 and lr_decay in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "AdmmSchedule":
        names = cls.__dataclass_fields__
        unknown = set(d) - set(names)
        if unknown:
            raise ValueError(f"unknown schedule fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdmmPair:
    layer: int
    constraint: Constraint
    Z: np.ndarray
    U: np.ndarray
    rho: float


@dataclass
class AdmmState:
    pairs: List[AdmmPair] = field(default_factory=list)

    @classmethod
    def init(cls, model: Model, constraints: Sequence[Constraint], rho: float) -> "AdmmState":
        pairs = []
        for c in constraints:
            if c.layer is None or not 0 <= c.layer < model.num_layers:
                raise AdmmError(f"constraint {c} does not name a layer of the model")
            w = model.layers[c.layer].weights
            if isinstance(c, SparsityConstraint):
                c.check(w.shape)
            pairs.append(AdmmPair(c.layer, c, c.project(w), np.zeros_like(w), rho))
        return cls(pairs)

    def check(self, model: Model) -> None:
        for p in self.pairs:
            shape = model.layers[p.layer].weights.shape
            if p.Z.shape != shape or p.U.shape != shape:
                raise AdmmError(f"layer {p.layer}: state shape {p.Z.shape} != weight shape {shape}")


def penalty_gradient(model: Model, state: AdmmState) -> List[np.ndarray]:
    """Per-layer sum of ``rho * (W - Z + U)`` over that layer's pairs."""
    state.check(model)
    out = [np.zeros_like(l.weights) for l in model.layers]
    for p in state.pairs:
        out[p.layer] += p.rho * (model.layers[p.layer].weights - p.Z + p.U)
    return out


def penalty_value(model: Model, state: AdmmState) -> float:
    return float(
        sum(0.5 * p.rho * np.sum((model.layers[p.layer].weights - p.Z + p.U) ** 2) for p in state.pairs)
    )


def augmented_loss_gradient(
    model: Model, x, y, state: AdmmState, grad_fn: GradFn = loss_and_gradients
):
    """Loss and gradients of ``f + sum rho/2 ||W - Z + U||^2``; biases get no penalty."""
    state.check(model)
    loss, grads = grad_fn(model, x, y)
    pen = penalty_gradient(model, state)
    return loss + penalty_value(model, state), [(dw + pw, db) for (dw, db), pw in zip(grads, pen)]


def primal_residual(state: AdmmState, model: Model) -> List[float]:
    """``||W - Z||_F`` for every pair, in state order."""
    return [float(np.linalg.norm(model.layers[p.layer].weights - p.Z)) for p in state.pairs]


def dual_update(model: Model, state: AdmmState) -> None:
    """``Z = proj(W + U)`` then ``U = U + W - Z`` for every pair."""
    for p in state.pairs:
        w = model.layers[p.layer].weights
        p.Z = p.constraint.project(w + p.U)
        p.U = p.U + w - p.Z


def admm_round(
    model: Model,
    state: AdmmState,
    data,
    sched: AdmmSchedule,
    *,
    rng: np.random.Generator,
    learning_rate: Optional[float] = None,
    grad_fn: GradFn = loss_and_gradients,
    velocity=None,
) -> float:
    """One ADMM round, updating ``model`` and ``state`` in place.

    Returns the mean augmented minibatch loss of the SGD phase.
    """
    x, y = data
    if len(x) == 0:
        raise AdmmError("empty dataset")
    lr = sched.learning_rate if learning_rate is None else learning_rate

    def aug(m, xb, yb):
        return augmented_loss_gradient(m, xb, yb, state, grad_fn)

    try:
        loss = run_epoch(
            model, x, y, learning_rate=lr, batch_size=sched.batch_size, rng=rng, grad_fn=aug,
            velocity=velocity, momentum=sched.momentum, max_steps=sched.sgd_steps_per_round,
        )
    except NonFiniteLoss as exc:
        raise AdmmError(f"ADMM diverged: {exc}") from None
    dual_update(model, state)
    return loss


def layer_masks(model: Model, constraints: Sequence[SparsityConstraint]) -> List[np.ndarray]:
    by_layer = constraints_by_layer(constraints, model.num_layers)
    return [combined_mask(l.weights, cs) for l, cs in zip(model.layers, by_layer)]


def _fit_loop(model, x, y, *, epochs, lr, sched, rng, masks, log, phase, grad_fn):
    velocity = init_velocity(model) if sched.momentum else None
    for epoch in range(epochs):
        loss = run_epoch(
            model, x, y, learning_rate=lr, batch_size=sched.batch_size, rng=rng, masks=masks,
            velocity=velocity, momentum=sched.momentum, grad_fn=grad_fn,
        )
        if not np.isfinite(loss):
            raise AdmmError(f"{phase}: non-finite loss")
        if log:
            log({"phase": phase, "epoch": epoch, "loss": loss})
        lr *= sched.lr_decay


def masked_retrain(
    model: Model,
    constraints: Sequence[SparsityConstraint],
    data,
    sched: AdmmSchedule,
    *,
    propagate: bool = True,
    rng: Optional[np.random.Generator] = None,
    log: Optional[Callable[[dict], None]] = None,
    grad_fn: GradFn = loss_and_gradients,
) -> Model:
    """Hard-prune with the combined masks, then fine-tune the surviving weights.

    Works on a copy. With ``propagate`` the zeroed filters/channels are
    pushed into the neighbouring layers before retraining.
    """
    from .mapper import propagate_pruning

    model = model.copy()
    masks = layer_masks(model, constraints)
    for layer, m in zip(model.layers, masks):
        layer.weights = np.where(m, layer.weights, 0.0)
    if propagate:
        model = propagate_pruning(model)
    # freeze every zero, including those introduced by propagation
    masks = [l.weights != 0 for l in model.layers]
    for i, layer in enumerate(model.layers):
        if not layer.weights.any():
            raise AdmmError(f"layer {i}: every weight was pruned")
    if sched.retrain_epochs:
        rng = rng if rng is not None else np.random.default_rng(sched.seed)
        x, y = data
        lr = sched.retrain_learning_rate or sched.learning_rate
        _fit_loop(model, x, y, epochs=sched.retrain_epochs, lr=lr, sched=sched, rng=rng,
                  masks=masks, log=log, phase="retrain", grad_fn=grad_fn)
    return model


def quantize_model(model: Model, specs: Sequence[Optional[QuantSpec]]) -> Model:
    """Snap every layer with a spec onto its grid and attach the spec."""
    model = model.copy()
    for layer, spec in zip(model.layers, specs):
        if spec is not None:
            layer.weights = quantize_project(layer.weights, QuantConstraint(spec))
            layer.quant = spec
    return model


def layer_quant_specs(model: Model, quant, *, auto_frac: bool = True) -> List[QuantSpec]:
    """One spec per layer; with ``auto_frac`` the fractional width fits each layer's range."""
    specs = []
    for layer in model.layers:
        frac = quant.frac_bits
        if auto_frac:
            frac = choose_frac_bits(layer.weights, quant.weight_bits, quant.signed)
        specs.append(
            QuantSpec(quant.weight_bits, quant.input_bits, frac, quant.signed, quant.input_frac_bits)
        )
    return specs


def compress(
    model: Model,
    constraints: Sequence[SparsityConstraint],
    quant: Optional[QuantSpec],
    data,
    sched: AdmmSchedule,
    *,
    auto_frac: bool = True,
    propagate: bool = True,
    eval_data=None,
    log: Optional[Callable[[dict], None]] = None,
) -> Model:
    """ADMM rounds -> masked retrain -> final quantization.

    Quantization, when requested, joins the ADMM run as one extra pair per
    layer. The returned model satisfies every sparsity constraint exactly
    and all its weights lie on the grid.
    """
    model = model.copy()
    model.validate()
    x, y = data
    if len(x) == 0:
        raise AdmmError("empty dataset")
    for c in constraints:
        if c.layer is None or not 0 <= c.layer < model.num_layers:
            raise AdmmError(f"constraint {c} does not name a layer of the model")
        c.check(model.layers[c.layer].weights.shape)

    specs = layer_quant_specs(model, quant, auto_frac=auto_frac) if quant is not None else None
    pairs: List[Constraint] = list(constraints)
    if specs is not None:
        pairs += [QuantConstraint(s, layer=i) for i, s in enumerate(specs)]

    rng = np.random.default_rng(sched.seed)
    if pairs and sched.admm_rounds:
        state = AdmmState.init(model, pairs, sched.rho_initial)
        velocity = init_velocity(model) if sched.momentum else None
        lr = sched.learning_rate
        for r in range(sched.admm_rounds):
            loss = admm_round(model, state, (x, y), sched, rng=rng, learning_rate=lr, velocity=velocity)
            entry = {
                "phase": "admm",
                "round": r,
                "loss": loss,
                "rho": state.pairs[0].rho,
                "residuals": primal_residual(state, model),
            }
            if eval_data is not None:
                entry["accuracy"] = evaluate(model, *eval_data)
            if log:
                log(entry)
            logger.info("admm round %d loss %.4f", r, loss)
            for p in state.pairs:
                p.rho *= sched.rho_growth
            lr *= sched.lr_decay

    model = masked_retrain(model, constraints, (x, y), sched, propagate=propagate, rng=rng, log=log)
    if specs is not None:
        # retraining may have grown a layer past its grid; narrow the fraction rather than saturate
        specs = [
            QuantSpec(s.weight_bits, s.input_bits,
                      min(s.frac_bits, choose_frac_bits(l.weights, s.weight_bits, s.signed)),
                      s.signed, s.input_frac_bits)
            for s, l in zip(specs, model.layers)
        ]
        model = quantize_model(model, specs)
    for c in constraints:
        if not c.is_feasible(model.layers[c.layer].weights):
            raise AdmmError(f"internal error: constraint {c} violated after compression")
    if log:
        final = {"phase": "final", "sparsity": sparsity_report(model).to_dict()}
        if eval_data is not None:
            final["accuracy"] = evaluate(model, *eval_data)
        log(final)
    return model
