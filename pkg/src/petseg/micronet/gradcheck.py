"""Central finite-difference check of the analytic parameter gradients.

Every scalar weight is perturbed by ``+eps`` and ``-eps``; the network is
re-run from the step that owns the weight and the loss difference is compared
with the backward pass. Two details keep the oracle sharp in float64:

* Leaky-ReLU gates are frozen at their base-point pattern during the
  perturbed runs. The frozen network coincides with the real one on a
  neighbourhood of the base point, so its derivative there is the same, but
  it is smooth, so a pre-activation that sits within ``eps`` of zero no longer
  turns the difference quotient into the average of two slopes. The number of
  weights whose perturbation would have flipped a gate is reported.
  ``freeze_gates=False`` gives the plain quotient.
* ``L(w+eps) - L(w-eps)`` is accumulated voxel by voxel before any reduction.
  This is algebraically the same quantity but avoids subtracting two O(1)
  sums that agree to ~1e-10.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from .layers import LeakyReLU, softmax
from .loss import LossSpec, loss_and_grad, one_hot

REL_FLOOR = 1e-8


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    n_checked: int
    n_gate_crossings: int
    per_param: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict, repr=False)
    seconds: float = 0.0

    def passed(self, tol: float = 1e-6) -> bool:
        return self.max_rel_error < tol

    def fraction_within(self, tol: float = 1e-6) -> float:
        allerr = np.concatenate([e for e in self.errors.values()]) if self.errors else np.zeros(0)
        return float((allerr < tol).mean()) if allerr.size else 1.0


def relative_error(fd, an, floor: float = REL_FLOOR):
    fd, an = np.asarray(fd, dtype=np.float64), np.asarray(an, dtype=np.float64)
    return np.abs(fd - an) / np.maximum(np.maximum(np.abs(fd), np.abs(an)), floor)


def analytic_gradients(net, x, target, spec: LossSpec = LossSpec()):
    loss, dz = loss_and_grad(net.forward_logits(x, keep_cache=True), target, spec)
    return loss, net.backward(dz)


def loss_difference(z_plus, z_minus, onehot, spec: LossSpec) -> float:
    """``L(z_plus) - L(z_minus)`` with the subtraction taken per voxel."""
    k = onehot.shape[1]
    lam = spec.dice_ce_mix
    axes = (0, 2, 3, 4)
    n_vox = onehot.size // k
    wt = (spec.weights(k).reshape(1, k, 1, 1, 1) * onehot).sum(axis=1)

    # log-softmax and softmax differences from the logit delta, via expm1/log1p
    dz = z_plus - z_minus
    p_m = softmax(z_minus)
    d_lse = np.log1p((p_m * np.expm1(dz)).sum(axis=1, keepdims=True))
    d_logp = dz - d_lse
    d_ce = -float((wt * (d_logp * onehot).sum(axis=1)).sum()) / n_vox

    dp = p_m * np.expm1(d_logp)
    inter_m = 2.0 * (p_m * onehot).sum(axis=axes) + spec.dice_epsilon
    denom_m = p_m.sum(axis=axes) + onehot.sum(axis=axes) + spec.dice_epsilon
    d_inter = 2.0 * (dp * onehot).sum(axis=axes)
    d_denom = dp.sum(axis=axes)
    d_ratio = (d_inter * denom_m - inter_m * d_denom) / ((denom_m + d_denom) * denom_m)
    d_dice = -float(np.mean(d_ratio[1:]))
    return lam * d_dice + (1.0 - lam) * d_ce


def _owners(net) -> dict:
    owners = {}
    for i, st in enumerate(net.steps):
        for key in st.layer.param_shapes():
            owners.setdefault(key, i)
    return owners


def _base_pass(net, x):
    acts = {"input": np.ascontiguousarray(x, dtype=net.dtype)}
    gates = {}
    for i, st in enumerate(net.steps):
        out, cache = st.layer.forward(net.params, *(acts[k] for k in st.inputs))
        acts[st.output] = out
        if isinstance(st.layer, LeakyReLU):
            gates[i] = cache
    return acts, gates


def _rerun(net, base_acts, start, gates, freeze):
    acts = dict(base_acts)
    flipped = False
    for i in range(start, len(net.steps)):
        st = net.steps[i]
        ins = [acts[k] for k in st.inputs]
        if i in gates:
            neg = ins[0] < 0
            flipped = flipped or not np.array_equal(neg, gates[i])
            if freeze:
                acts[st.output] = np.where(gates[i], ins[0] * st.layer.slope, ins[0])
                continue
        acts[st.output], _ = st.layer.forward(net.params, *ins)
    return acts["logits"], flipped


def finite_difference_check(
    net,
    x,
    target,
    spec: LossSpec = LossSpec(),
    epsilon: float = 1e-5,
    params=None,
    analytic: dict | None = None,
    freeze_gates: bool = True,
) -> GradCheckResult:
    """Compare every analytic weight gradient with a central difference.

    ``params`` restricts the check to some parameter names; ``analytic``
    substitutes precomputed gradients (used for fault injection). The network
    must run in float64 and its weights are restored bit-exactly afterwards.
    """
    if net.dtype != np.float64:
        raise ConfigError("gradient checking needs a float64 network")
    t0 = time.perf_counter()
    if analytic is None:
        _, analytic = analytic_gradients(net, x, target, spec)
    onehot = one_hot(np.asarray(target), net.num_classes)
    base_acts, gates = _base_pass(net, x)
    owners = _owners(net)
    names = sorted(owners, key=lambda k: (owners[k], k)) if params is None else list(params)

    worst = (-1.0, "", ())
    per_param, errors, n_checked, n_cross = {}, {}, 0, 0
    for name in names:
        w = net.params[name]
        flat = w.reshape(-1)
        an = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        errs = np.empty(flat.size)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            z_p, fp = _rerun(net, base_acts, owners[name], gates, freeze_gates)
            flat[j] = orig - epsilon
            z_m, fm = _rerun(net, base_acts, owners[name], gates, freeze_gates)
            flat[j] = orig
            fd = loss_difference(z_p, z_m, onehot, spec) / (2.0 * epsilon)
            errs[j] = relative_error(fd, an[j])
            n_cross += fp or fm
        n_checked += flat.size
        j = int(np.argmax(errs))
        per_param[name] = float(errs[j])
        errors[name] = errs
        if errs[j] > worst[0]:
            worst = (float(errs[j]), name, np.unravel_index(j, w.shape))
    return GradCheckResult(
        max_rel_error=worst[0],
        worst_param=worst[1],
        worst_index=tuple(int(i) for i in worst[2]),
        n_checked=n_checked,
        n_gate_crossings=int(n_cross),
        per_param=per_param,
        errors=errors,
        seconds=time.perf_counter() - t0,
    )
