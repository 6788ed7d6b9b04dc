"""Taylor predictors built around learned Jacobian networks.

The model never learns the dynamics map directly. One dense net per state
output learns the corresponding row of the Jacobian of the unknown
discrete-time update, evaluated at the previous sample z_prev = [x_prev;
u_prev]. Prediction is then a Taylor step about z_prev:

    first order   x_hat = x_curr + J(z_prev) dz
    second order  x_hat_j += 1/2 dz^T H_j(z_prev) dz

with dz = z_curr - z_prev and H_j the input-derivative of Jacobian row j
(one N x N block per state). Because x_curr is the measured state, the
expansion point is always the previous sample and the zero-increment case
returns x_curr exactly.

A direct net z_curr -> x_next serves as the no-structure baseline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import net as nn
from .constraints import MonoSpec, apply_sign_gate, gate_derivative_mask

Array = np.ndarray

BUNDLE_VERSION = "mtnn-v1"


@dataclass
class AugState:
    """The stacked model input z = [x; u]."""

    x: Array
    u: Array

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(-1)
        self.u = np.asarray(self.u, dtype=np.float64).reshape(-1)
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.u))):
            raise ValueError("augmented state entries must be finite")

    @property
    def z(self) -> Array:
        return np.concatenate([self.x, self.u])

    @classmethod
    def from_z(cls, z, nx: int) -> "AugState":
        z = np.asarray(z, dtype=np.float64).reshape(-1)
        return cls(z[:nx], z[nx:])


class TaylorOrder(str, Enum):
    FIRST = "first"
    SECOND = "second"


class GateMode(str, Enum):
    ARCHITECTURE = "architecture"
    SOFT = "soft"
    NONE = "none"


@dataclass
class MtnnModel:
    nets: list  # one N->N DenseNet per state output
    mono_spec: MonoSpec
    order: TaylorOrder = TaylorOrder.FIRST
    gate_mode: GateMode = GateMode.NONE
    symmetrize_hessian: bool = False

    def __post_init__(self):
        self.order = TaylorOrder(self.order)
        self.gate_mode = GateMode(self.gate_mode)
        if not self.nets:
            raise ValueError("need at least one Jacobian net")
        n = self.nets[0].n_in
        for j, net in enumerate(self.nets):
            if net.n_in != n or net.n_out != n:
                raise ValueError(
                    f"net {j} maps {net.n_in}->{net.n_out}, every net must map {n}->{n}"
                )
        if self.mono_spec.tags.shape != (len(self.nets), n):
            raise ValueError(
                f"mono spec {self.mono_spec.tags.shape} does not match "
                f"({len(self.nets)}, {n})"
            )

    @property
    def nx(self) -> int:
        return len(self.nets)

    @property
    def n(self) -> int:
        return self.nets[0].n_in

    @property
    def nu(self) -> int:
        return self.n - self.nx

    @property
    def gated(self) -> bool:
        return self.gate_mode == GateMode.ARCHITECTURE

    def copy(self) -> "MtnnModel":
        return MtnnModel(
            [net.copy() for net in self.nets],
            MonoSpec(self.mono_spec.tags.copy()),
            self.order,
            self.gate_mode,
            self.symmetrize_hessian,
        )


@dataclass
class BaselineModel:
    """Direct map z_curr -> x_next, no Taylor structure."""

    net: nn.DenseNet
    nx: int

    def __post_init__(self):
        if self.net.n_out != self.nx:
            raise ValueError(f"baseline net outputs {self.net.n_out}, nx = {self.nx}")

    @property
    def n(self) -> int:
        return self.net.n_in

    @property
    def nu(self) -> int:
        return self.n - self.nx

    def copy(self) -> "BaselineModel":
        return BaselineModel(self.net.copy(), self.nx)


def _as_z(z, n: int) -> Array:
    if isinstance(z, AugState):
        z = z.z
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != n:
        raise ValueError(f"z has width {z.shape[-1]}, model expects {n}")
    return z


def jacobian_matrix(model: MtnnModel, z_prev) -> Array:
    """Learned Jacobian at z_prev: (Nx, N), gated when the model is gated."""
    z = _as_z(z_prev, model.n)
    rows = np.stack([nn.forward(net, z) for net in model.nets])
    if model.gated:
        rows = apply_sign_gate(rows, model.mono_spec.tags)
    return rows


def jacobian_matrix_batch(model: MtnnModel, Z_prev) -> Array:
    """(B, N) -> (B, Nx, N)."""
    Z = _as_z(Z_prev, model.n)
    rows = np.stack([nn.forward(net, Z) for net in model.nets], axis=1)
    if model.gated:
        rows = apply_sign_gate(rows, model.mono_spec.tags)
    return rows


def hessian_stack(model: MtnnModel, z_prev) -> Array:
    """Input-derivatives of the (gated) Jacobian rows: (Nx, N, N).

    Under the architecture gate the block rows are masked by the gate
    derivative (a step function of the raw output), which is the almost-
    everywhere exact derivative of the gated rows.
    """
    z = _as_z(z_prev, model.n)
    blocks = np.stack([nn.input_jacobian(net, z) for net in model.nets])
    if model.gated:
        raw = np.stack([nn.forward(net, z) for net in model.nets])
        mask = gate_derivative_mask(raw, model.mono_spec.tags)
        blocks = mask[:, :, None] * blocks
    if model.symmetrize_hessian:
        blocks = 0.5 * (blocks + np.swapaxes(blocks, -1, -2))
    return blocks


def hessian_stack_batch(model: MtnnModel, Z_prev) -> Array:
    """(B, N) -> (B, Nx, N, N)."""
    Z = _as_z(Z_prev, model.n)
    blocks = np.stack([nn.input_jacobian(net, Z) for net in model.nets], axis=1)
    if model.gated:
        raw = np.stack([nn.forward(net, Z) for net in model.nets], axis=1)
        mask = gate_derivative_mask(raw, model.mono_spec.tags)
        blocks = mask[:, :, :, None] * blocks
    if model.symmetrize_hessian:
        blocks = 0.5 * (blocks + np.swapaxes(blocks, -1, -2))
    return blocks


def predict(model, z_curr, z_prev) -> Array:
    """Next-state prediction x_hat; dispatches on the model kind."""
    if isinstance(model, BaselineModel):
        z = _as_z(z_curr, model.n)
        return nn.forward(model.net, z)
    z_c = _as_z(z_curr, model.n)
    z_p = _as_z(z_prev, model.n)
    dz = z_c - z_p
    if not np.all(np.isfinite(dz)):
        raise ValueError("non-finite increment between z_curr and z_prev")
    x_curr = z_c[: model.nx]
    if not np.any(dz):
        return x_curr.copy()  # zero-increment fixpoint, exact by construction
    J = jacobian_matrix(model, z_p)
    x_hat = x_curr + J @ dz
    if model.order == TaylorOrder.SECOND:
        H = hessian_stack(model, z_p)
        x_hat = x_hat + 0.5 * np.einsum("m,jmn,n->j", dz, H, dz)
    return x_hat


def predict_batch(model, Z_curr, Z_prev) -> Array:
    """(B, N) pairs -> (B, Nx)."""
    if isinstance(model, BaselineModel):
        return nn.forward(model.net, _as_z(Z_curr, model.n))
    Z_c = _as_z(Z_curr, model.n)
    Z_p = _as_z(Z_prev, model.n)
    dz = Z_c - Z_p
    if not np.all(np.isfinite(dz)):
        raise ValueError("non-finite increment between z_curr and z_prev")
    J = jacobian_matrix_batch(model, Z_p)
    x_hat = Z_c[:, : model.nx] + np.einsum("bjn,bn->bj", J, dz)
    if model.order == TaylorOrder.SECOND:
        H = hessian_stack_batch(model, Z_p)
        x_hat = x_hat + 0.5 * np.einsum("bm,bjmn,bn->bj", dz, H, dz)
    # restore the exact fixpoint for rows with a literally zero increment
    zero = ~np.any(dz, axis=1)
    if zero.any():
        x_hat[zero] = Z_c[zero, : model.nx]
    return x_hat


def model_to_dict(model) -> dict:
    if isinstance(model, BaselineModel):
        return {
            "version": BUNDLE_VERSION,
            "kind": "baseline",
            "nx": model.nx,
            "net": nn.net_to_dict(model.net),
        }
    return {
        "version": BUNDLE_VERSION,
        "kind": "mtnn",
        "order": model.order.value,
        "gate_mode": model.gate_mode.value,
        "symmetrize_hessian": model.symmetrize_hessian,
        "mono_spec": model.mono_spec.to_symbols(),
        "nets": [nn.net_to_dict(net) for net in model.nets],
    }


def model_from_dict(d: dict):
    if d.get("version") != BUNDLE_VERSION:
        raise ValueError(f"unsupported bundle version {d.get('version')!r}")
    kind = d.get("kind")
    if kind == "baseline":
        return BaselineModel(nn.net_from_dict(d["net"]), int(d["nx"]))
    if kind == "mtnn":
        return MtnnModel(
            [nn.net_from_dict(nd) for nd in d["nets"]],
            MonoSpec.from_symbols(d["mono_spec"]),
            TaylorOrder(d["order"]),
            GateMode(d["gate_mode"]),
            bool(d["symmetrize_hessian"]),
        )
    raise ValueError(f"unknown bundle kind {kind!r}")


def save_bundle(model, path) -> None:
    with open(path, "w") as f:
        json.dump(model_to_dict(model), f, sort_keys=True)
        f.write("\n")


def load_bundle(path):
    with open(path) as f:
        return model_from_dict(json.load(f))
