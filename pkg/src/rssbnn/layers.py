"""Variational fully connected layers and network assembly.

Each layer carries a (theta_pi, mu, rho) triple per weight and per bias.
Three posterior kinds are supported:

* ``spike_slab_radial`` - the full mixture posterior,
* ``gaussian``          - mean-field Gaussian baseline (inclusion fixed
                          at 1, Gaussian slab, closed-form KL),
* ``deterministic``     - plain fully connected baseline (forward always
                          uses mu, KL is zero).

One weight draw is shared across the batch per forward call.
"""

from __future__ import annotations

import base64
import json
import math
from enum import Enum
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import distributions as dist
from .autodiff import GraphNode, Tensor, constant, leaf
from .distributions import GumbelConfig, PriorConfig, SpikeSlabRadialParams
from .errors import InvalidConfig, SchemaMismatch, ShapeMismatch

__all__ = [
    "ForwardMode",
    "POSTERIOR_KINDS",
    "VariationalLinear",
    "BnnModel",
    "layer_forward",
    "model_kl",
    "predict_proba",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_SCHEMA_VERSION",
]

POSTERIOR_KINDS = ("spike_slab_radial", "gaussian", "deterministic")

INIT_SIGMA = 0.05
INIT_LAMBDA = 0.75
CHECKPOINT_SCHEMA_VERSION = 1


class ForwardMode(str, Enum):
    TRAIN_RELAXED = "train_relaxed"
    EVAL_HARD = "eval_hard"
    POSTERIOR_MEAN = "posterior_mean"


def _softplus_inverse(y: float) -> float:
    return math.log(math.expm1(y))


class VariationalLinear:
    """Affine layer y = x W^T + b with per-weight variational posteriors."""

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        prior: PriorConfig,
        posterior_kind: str = "spike_slab_radial",
        rng: np.random.Generator | None = None,
        deterministic_bias: bool = False,
        radial_group: str = "per_layer",
    ):
        if in_dim < 1 or out_dim < 1:
            raise InvalidConfig(f"layer dims must be positive, got {in_dim}x{out_dim}")
        if posterior_kind not in POSTERIOR_KINDS:
            raise InvalidConfig(f"unknown posterior kind {posterior_kind!r}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.prior = prior
        self.posterior_kind = posterior_kind
        self.deterministic_bias = deterministic_bias
        self.radial_group = radial_group

        if rng is None:
            rng = np.random.default_rng()
        bound = 1.0 / math.sqrt(in_dim)
        rho0 = _softplus_inverse(INIT_SIGMA)
        theta0 = math.log(INIT_LAMBDA / (1.0 - INIT_LAMBDA))

        self.mu_w = leaf(rng.uniform(-bound, bound, size=(out_dim, in_dim)))
        self.rho_w = leaf(np.full((out_dim, in_dim), rho0))
        self.theta_pi_w = leaf(np.full((out_dim, in_dim), theta0))
        self.mu_b = leaf(np.zeros(out_dim))
        self.rho_b = leaf(np.full(out_dim, rho0))
        self.theta_pi_b = leaf(np.full(out_dim, theta0))

    # -- parameter access ---------------------------------------------------

    def weight_params(self) -> SpikeSlabRadialParams:
        return SpikeSlabRadialParams(self.theta_pi_w, self.mu_w, self.rho_w)

    def bias_params(self) -> SpikeSlabRadialParams:
        return SpikeSlabRadialParams(self.theta_pi_b, self.mu_b, self.rho_b)

    def parameter_leaves(self) -> dict[str, GraphNode]:
        named = {
            "theta_pi_w": self.theta_pi_w,
            "mu_w": self.mu_w,
            "rho_w": self.rho_w,
            "theta_pi_b": self.theta_pi_b,
            "mu_b": self.mu_b,
            "rho_b": self.rho_b,
        }
        return named

    def trainable_leaves(self) -> list[GraphNode]:
        if self.posterior_kind == "deterministic":
            return [self.mu_w, self.mu_b]
        if self.posterior_kind == "gaussian":
            leaves = [self.mu_w, self.rho_w, self.mu_b]
        else:
            leaves = [self.theta_pi_w, self.mu_w, self.rho_w, self.mu_b]
            if not self.deterministic_bias:
                leaves.append(self.theta_pi_b)
        if not self.deterministic_bias:
            leaves.append(self.rho_b)
        return leaves

    # -- sampling -----------------------------------------------------------

    def _sample_tensor(
        self,
        which: str,
        mode: ForwardMode,
        cfg: GumbelConfig | None,
        rng: np.random.Generator | None,
    ) -> GraphNode:
        params = self.weight_params() if which == "w" else self.bias_params()
        mu = params.mu
        if self.posterior_kind == "deterministic" or (
            which == "b" and self.deterministic_bias
        ):
            return mu
        if mode == ForwardMode.POSTERIOR_MEAN:
            if self.posterior_kind == "spike_slab_radial":
                # unclamped: the clamp on lambda exists only for the KL logs
                return ad.sigmoid(params.inclusion.theta_pi) * mu
            return mu
        if rng is None:
            raise InvalidConfig(f"mode {mode.value} requires an rng")
        if self.posterior_kind == "gaussian":
            z = rng.standard_normal(params.shape)
            return mu + ad.softplus(params.rho) * constant(z)
        if mode == ForwardMode.TRAIN_RELAXED:
            if cfg is None:
                raise InvalidConfig("train_relaxed requires a GumbelConfig")
            return dist.sample_spike_slab(params, cfg, "relaxed", rng, self.radial_group)
        return dist.sample_spike_slab(params, GumbelConfig(), "hard", rng, self.radial_group)

    def forward(
        self,
        x,
        mode: ForwardMode,
        cfg: GumbelConfig | None = None,
        rng: np.random.Generator | None = None,
    ) -> GraphNode:
        x = ad.as_node(x)
        if len(x.shape) != 2 or x.shape[1] != self.in_dim:
            raise ShapeMismatch(
                f"expected input (batch, {self.in_dim}), got {x.shape}"
            )
        w = self._sample_tensor("w", mode, cfg, rng)
        b = self._sample_tensor("b", mode, cfg, rng)
        return ad.matmul(x, ad.transpose(w)) + b

    # -- KL -----------------------------------------------------------------

    def kl(self, n_samples: int, rng: np.random.Generator) -> GraphNode:
        """Summed KL over this layer's weights and biases.

        Spawns one child stream per parameter tensor so a layer's KL can
        be reproduced in isolation from the same parent stream.
        """
        if self.posterior_kind == "deterministic":
            return constant(0.0)
        rng_w, rng_b = rng.spawn(2)
        if self.posterior_kind == "gaussian":
            wp, bp = self.weight_params(), self.bias_params()
            total = ad.reduce_sum(
                dist.gaussian_kl_nats(wp.mu, ad.softplus(wp.rho), self.prior)
            )
            if not self.deterministic_bias:
                total = total + ad.reduce_sum(
                    dist.gaussian_kl_nats(bp.mu, ad.softplus(bp.rho), self.prior)
                )
            return total
        total = dist.kl_spike_slab(
            self.weight_params(), self.prior, n_samples, rng_w, self.radial_group
        )
        if not self.deterministic_bias:
            total = total + dist.kl_spike_slab(
                self.bias_params(), self.prior, n_samples, rng_b, self.radial_group
            )
        return total


class BnnModel:
    """Stack of variational affine layers with ReLU activations and a
    single-logit output head."""

    def __init__(
        self,
        layer_dims: list[int],
        prior: PriorConfig,
        posterior_kind: str = "spike_slab_radial",
        rng: np.random.Generator | None = None,
        deterministic_bias: bool = False,
        radial_group: str = "per_layer",
    ):
        if len(layer_dims) < 2:
            raise InvalidConfig("layer_dims needs at least input and output sizes")
        if layer_dims[-1] != 1:
            raise InvalidConfig(f"final out_dim must be 1, got {layer_dims[-1]}")
        self.layer_dims = list(layer_dims)
        self.prior = prior
        self.posterior_kind = posterior_kind
        self.deterministic_bias = deterministic_bias
        self.radial_group = radial_group
        self.layers = [
            VariationalLinear(
                layer_dims[i],
                layer_dims[i + 1],
                prior,
                posterior_kind,
                rng=rng,
                deterministic_bias=deterministic_bias,
                radial_group=radial_group,
            )
            for i in range(len(layer_dims) - 1)
        ]

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    def forward(
        self,
        x,
        mode: ForwardMode,
        cfg: GumbelConfig | None = None,
        rng: np.random.Generator | None = None,
    ) -> GraphNode:
        """Logits of shape (batch,); one weight draw shared per call."""
        h = ad.as_node(x)
        for i, layer in enumerate(self.layers):
            h = layer.forward(h, mode, cfg, rng)
            if i < len(self.layers) - 1:
                h = ad.relu(h)
        return ad.reshape(h, (h.shape[0],))

    def kl(self, n_samples: int, rng: np.random.Generator) -> GraphNode:
        """Mean-field KL: exact sum of per-layer KL terms, each fed by its
        own spawned rng stream."""
        streams = rng.spawn(len(self.layers))
        total = None
        for layer, stream in zip(self.layers, streams):
            term = layer.kl(n_samples, stream)
            total = term if total is None else total + term
        return total

    def predict_proba(
        self, x, n_draws: int, rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray]:
        """Posterior-predictive probabilities.

        Returns (mean over n_draws of sigmoid(logits), full score matrix
        of shape (n_draws, batch)).  Draws use hard inclusion and each
        gets an independent spawned stream.
        """
        if n_draws < 1:
            raise InvalidConfig(f"n_draws must be >= 1, got {n_draws}")
        x = ad.as_node(x)
        streams = rng.spawn(n_draws)
        rows = []
        for stream in streams:
            logits = self.forward(x, ForwardMode.EVAL_HARD, rng=stream)
            rows.append(dist.sigmoid_np(logits.value.array))
        matrix = np.stack(rows, axis=0)
        return matrix.mean(axis=0), matrix

    def parameters(self) -> list[GraphNode]:
        out: list[GraphNode] = []
        for layer in self.layers:
            out.extend(layer.trainable_leaves())
        return out

    def state_arrays(self) -> list[np.ndarray]:
        """Snapshot of every parameter leaf (including untrained ones)."""
        arrays = []
        for layer in self.layers:
            for name in ("theta_pi_w", "mu_w", "rho_w", "theta_pi_b", "mu_b", "rho_b"):
                arrays.append(layer.parameter_leaves()[name].value.array.copy())
        return arrays

    def load_state_arrays(self, arrays: list[np.ndarray]) -> None:
        it = iter(arrays)
        for layer in self.layers:
            for name in ("theta_pi_w", "mu_w", "rho_w", "theta_pi_b", "mu_b", "rho_b"):
                layer.parameter_leaves()[name].assign(Tensor(next(it)))


# Module-level aliases matching the operation names used elsewhere.


def layer_forward(layer: VariationalLinear, x, mode: ForwardMode, cfg=None, rng=None) -> GraphNode:
    return layer.forward(x, mode, cfg, rng)


def model_kl(model: BnnModel, n_samples: int, rng: np.random.Generator) -> GraphNode:
    return model.kl(n_samples, rng)


def predict_proba(model: BnnModel, x, n_draws: int, rng: np.random.Generator):
    return model.predict_proba(x, n_draws, rng)


# ---------------------------------------------------------------------------
# checkpoint file format
# ---------------------------------------------------------------------------


def _encode_array(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _decode_array(text: str, shape: tuple[int, ...]) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"))
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    expected = int(np.prod(shape)) if shape else 1
    if arr.size != expected:
        raise SchemaMismatch(f"array payload has {arr.size} values, expected {expected}")
    return arr.reshape(shape)


def save_checkpoint(model: BnnModel, path, rng_seed: int | None = None) -> None:
    """Write a self-describing JSON checkpoint; round trips bit-exactly."""
    layers_doc = []
    for layer in model.layers:
        named = layer.parameter_leaves()
        layers_doc.append(
            {name: _encode_array(node.value.array) for name, node in named.items()}
        )
    doc = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "architecture": {
            "layer_dims": model.layer_dims,
            "activation": "relu",
            "deterministic_bias": model.deterministic_bias,
            "radial_group": model.radial_group,
        },
        "posterior_kind": model.posterior_kind,
        "prior": {
            "lambda_p": model.prior.lambda_p,
            "mu_p": model.prior.mu_p,
            "sigma_p": model.prior.sigma_p,
        },
        "rng_seed": rng_seed,
        "layers": layers_doc,
    }
    text = json.dumps(doc, sort_keys=True, indent=2)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_checkpoint(path) -> BnnModel:
    """Rebuild a model from a checkpoint file.

    Rejects documents whose major schema version is unknown.
    """
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaMismatch(f"checkpoint is not valid JSON: {exc}") from exc
    version = doc.get("schema_version")
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise SchemaMismatch(
            f"unsupported checkpoint schema version {version!r} "
            f"(supported: {CHECKPOINT_SCHEMA_VERSION})"
        )
    arch = doc["architecture"]
    prior = PriorConfig(**doc["prior"])
    model = BnnModel(
        arch["layer_dims"],
        prior,
        posterior_kind=doc["posterior_kind"],
        rng=np.random.default_rng(0),
        deterministic_bias=arch.get("deterministic_bias", False),
        radial_group=arch.get("radial_group", "per_layer"),
    )
    if len(doc["layers"]) != len(model.layers):
        raise SchemaMismatch("layer count mismatch between architecture and payload")
    for layer, payload in zip(model.layers, doc["layers"]):
        for name, node in layer.parameter_leaves().items():
            if name not in payload:
                raise SchemaMismatch(f"missing parameter array {name!r}")
            node.assign(Tensor(_decode_array(payload[name], node.value.shape)))
    return model
