"""Learned opacity decay.

A small MLP maps per-Gaussian attributes (scene-normalized position, stored
opacity, both rotation quaternions) to a multiplier tau in (0, 1) that scales
opacity during rendering. Closed-form fallback schedules (constant, pow, exp)
and the identity schedule share the same selection entry point; Gaussians
outside the visible set receive a fixed factor beta instead.

The backward pass is written out by hand so the full training chain has exact
reverse-mode gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError

INPUT_DIM = 12
HIDDEN_DIM = 64

DECAY_POLICIES = ("none", "constant", "pow", "exp", "neural")

CONSTANT_DECAY = 0.9


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class DecayNet:
    """12 -> 64 -> 64 -> 1 MLP, ReLU hidden activations, logistic output."""

    PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

    def __init__(self, rng: np.random.Generator | None = None, init_scale: float = 0.05,
                 final_bias: float = 4.0):
        if rng is None:
            rng = np.random.default_rng(0)
        self.w1 = rng.uniform(-init_scale, init_scale, size=(HIDDEN_DIM, INPUT_DIM))
        self.b1 = np.zeros(HIDDEN_DIM)
        self.w2 = rng.uniform(-init_scale, init_scale, size=(HIDDEN_DIM, HIDDEN_DIM))
        self.b2 = np.zeros(HIDDEN_DIM)
        self.w3 = rng.uniform(-init_scale, init_scale, size=(1, HIDDEN_DIM))
        # Bias the output so decay starts close to (but below) one.
        self.b3 = np.array([final_bias], dtype=np.float64)

    @property
    def n_params(self) -> int:
        return sum(getattr(self, n).size for n in self.PARAM_NAMES)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in self.PARAM_NAMES])

    def from_vector(self, vec: np.ndarray):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise InvalidParameterError(
                f"expected {self.n_params} parameters, got {vec.shape}"
            )
        pos = 0
        for name in self.PARAM_NAMES:
            arr = getattr(self, name)
            setattr(self, name, vec[pos : pos + arr.size].reshape(arr.shape).copy())
            pos += arr.size

    def forward(self, x: np.ndarray):
        """tau for a batch of inputs (B, 12). Returns (tau, cache)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != INPUT_DIM:
            raise InvalidParameterError(f"decay input must be (B, {INPUT_DIM})")
        z1 = x @ self.w1.T + self.b1
        h1 = np.maximum(z1, 0.0)
        z2 = h1 @ self.w2.T + self.b2
        h2 = np.maximum(z2, 0.0)
        z3 = (h2 @ self.w3.T + self.b3)[:, 0]
        tau = _sigmoid(z3)
        cache = {"x": x, "z1": z1, "h1": h1, "z2": z2, "h2": h2, "tau": tau}
        return tau, cache

    def backward(self, d_tau: np.ndarray, cache: dict):
        """Reverse-mode gradients.

        Returns (param_grads, d_x) where param_grads maps parameter name to an
        array shaped like the parameter (summed over the batch) and d_x is the
        gradient with respect to the inputs, shape (B, 12).
        """
        x, z1, h1, z2, h2, tau = (
            cache["x"], cache["z1"], cache["h1"], cache["z2"], cache["h2"], cache["tau"]
        )
        d_z3 = np.asarray(d_tau, dtype=np.float64) * tau * (1.0 - tau)  # (B,)
        grads = {}
        grads["w3"] = d_z3[None, :] @ h2  # (1, 64)
        grads["b3"] = np.array([d_z3.sum()])
        d_h2 = d_z3[:, None] * self.w3  # (B, 64)
        d_z2 = d_h2 * (z2 > 0.0)
        grads["w2"] = d_z2.T @ h1
        grads["b2"] = d_z2.sum(axis=0)
        d_h1 = d_z2 @ self.w2
        d_z1 = d_h1 * (z1 > 0.0)
        grads["w1"] = d_z1.T @ x
        grads["b1"] = d_z1.sum(axis=0)
        d_x = d_z1 @ self.w1
        return grads, d_x

    def grads_to_vector(self, grads: dict) -> np.ndarray:
        return np.concatenate([grads[n].ravel() for n in self.PARAM_NAMES])


def check_aabb(aabb: np.ndarray) -> np.ndarray:
    aabb = np.asarray(aabb, dtype=np.float64)
    if aabb.shape != (2, 3):
        raise InvalidParameterError("aabb must be (2, 3): rows are (lo, hi)")
    if not np.all(aabb[1] > aabb[0]):
        raise InvalidParameterError("aabb must have hi > lo on every axis")
    return aabb


def build_decay_inputs(positions, opacities, rot_left, rot_right, aabb):
    """Assemble the (B, 12) input block.

    Positions are mapped to [-1, 1] over the scene bounding box; rotations are
    passed through as stored.
    """
    aabb = check_aabb(aabb)
    lo, hi = aabb[0], aabb[1]
    pos_norm = 2.0 * (np.asarray(positions, dtype=np.float64) - lo) / (hi - lo) - 1.0
    return np.concatenate(
        [
            pos_norm,
            np.asarray(opacities, dtype=np.float64)[:, None],
            np.asarray(rot_left, dtype=np.float64),
            np.asarray(rot_right, dtype=np.float64),
        ],
        axis=1,
    )


def split_decay_input_grads(d_x: np.ndarray, aabb: np.ndarray):
    """Invert build_decay_inputs on the gradient side.

    Returns (d_positions, d_opacities, d_rot_left, d_rot_right).
    """
    aabb = check_aabb(aabb)
    scale = 2.0 / (aabb[1] - aabb[0])
    d_positions = d_x[:, 0:3] * scale
    d_opacities = d_x[:, 3]
    d_rot_left = d_x[:, 4:8]
    d_rot_right = d_x[:, 8:12]
    return d_positions, d_opacities, d_rot_left, d_rot_right


def variant_tau(policy: str, opacities: np.ndarray) -> np.ndarray:
    """Closed-form decay schedules for visible Gaussians."""
    o = np.asarray(opacities, dtype=np.float64)
    if policy == "none":
        return np.ones_like(o)
    if policy == "constant":
        return np.full_like(o, CONSTANT_DECAY)
    if policy == "pow":
        return 1.0 - 0.1 * (1.0 - o) ** 2
    if policy == "exp":
        return 1.0 - 0.1 * np.exp(-5.0 * o)
    raise InvalidParameterError(f"unknown closed-form decay policy {policy!r}")


def variant_tau_grad(policy: str, opacities: np.ndarray) -> np.ndarray:
    """d tau / d opacity for the closed-form schedules."""
    o = np.asarray(opacities, dtype=np.float64)
    if policy in ("none", "constant"):
        return np.zeros_like(o)
    if policy == "pow":
        return 0.2 * (1.0 - o)
    if policy == "exp":
        return 0.5 * np.exp(-5.0 * o)
    raise InvalidParameterError(f"unknown closed-form decay policy {policy!r}")


def select_tau(cloud, visible_mask: np.ndarray, policy: str, net: DecayNet | None,
               aabb, beta: float):
    """Per-Gaussian decay factor.

    Visible Gaussians get the policy's value (network output for "neural"),
    invisible ones get the constant beta. Returns (tau, cache); cache is None
    unless the network ran, and then also carries the visible index list.
    """
    if policy not in DECAY_POLICIES:
        raise InvalidParameterError(f"unknown decay policy {policy!r}")
    visible_mask = np.asarray(visible_mask, dtype=bool)
    n = len(cloud)
    if visible_mask.shape != (n,):
        raise InvalidParameterError("visible_mask must have one entry per Gaussian")
    tau = np.full(n, float(beta))
    cache = None
    idx = np.nonzero(visible_mask)[0]
    if idx.size:
        if policy == "neural":
            if net is None:
                raise InvalidParameterError("neural policy needs a DecayNet")
            x = build_decay_inputs(
                cloud.positions[idx],
                cloud.opacities[idx],
                cloud.rot_left[idx],
                cloud.rot_right[idx],
                aabb,
            )
            tau_vis, net_cache = net.forward(x)
            tau[idx] = tau_vis
            cache = {"net": net_cache, "idx": idx}
        else:
            tau[idx] = variant_tau(policy, cloud.opacities[idx])
    return tau, cache


def apply_decay(opacities: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """Effective opacity: elementwise tau * o."""
    return np.asarray(tau, dtype=np.float64) * np.asarray(opacities, dtype=np.float64)
