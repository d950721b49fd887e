"""Loss assembly, Adam, and the training loop.

The per-step objective is the negative ELBO (Gaussian reconstruction of
the patch's center pixel plus a weighted Dirichlet KL to the prior) plus
a weighted supervised MSE between ground-truth abundances and the
posterior-mean abundances.  Everything is driven by explicit seeded
generators so identical configs give bitwise-identical checkpoints.
"""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import stats
from . import tensor as T
from .data import patch_batch, split
from .errors import ContractError, TrainingDiverged
from .model import ModelConfig, decode, encode, init_params
from .tensor import Tape, Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 200
    batch_size: int = 256
    kl_weight: float = 1.0
    abundance_weight: float = 1.0
    seed: int = 0
    patch_size: int = 7
    concentration_scale: float = 10.0
    hidden_channels: int = 64
    decoder_hidden: int = 128
    mc_samples: int = 1
    split_fraction: float = 0.8
    prior: list | None = None  # Dirichlet prior concentrations; None -> Dir(1,...,1)

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ContractError("learning_rate must be > 0")
        if self.kl_weight < 0.0 or self.abundance_weight < 0.0:
            raise ContractError("loss weights must be >= 0")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        if not isinstance(d, dict):
            raise ContractError("train config must be a JSON object")
        valid = {f for f in cls.__dataclass_fields__}
        for key in d:
            if key not in valid:
                raise ContractError(f"unknown train config field: {key!r}")
        return cls(**d)


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def adam_step(params, state, lr):
    """Standard bias-corrected Adam update; missing grads count as zero."""
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.t
    bc2 = 1.0 - ADAM_BETA2 ** state.t
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else 0.0
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * (g * g)
        mhat = state.m[i] / bc1
        vhat = state.v[i] / bc2
        p.data -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_supervised(z_true, z_hat):
    """Mean squared error between simplex vectors, averaged over batch and K."""
    zt = z_true if isinstance(z_true, Tensor) else Tensor(z_true)
    zh = z_hat if isinstance(z_hat, Tensor) else Tensor(z_hat)
    return T.mean_all(T.square(T.sub(zh, zt)))


def loss_elbo(x_center, mu, sigma, alpha, prior, kl_weight=1.0):
    """Negative ELBO: -log p(x | mu, sigma) + kl_weight * KL(q || prior).

    Returns (total, nll, kl) scalar tensors so the trace can log the parts.
    """
    nll = T.mul(T.mean_all(stats.gaussian_loglik_op(mu, sigma, x_center)), -1.0)
    kl = T.mean_all(stats.dirichlet_kl_op(alpha, prior))
    return T.add(nll, T.mul(kl, kl_weight)), nll, kl


# ---------------------------------------------------------------------------
# dataset view
# ---------------------------------------------------------------------------

class SceneDataset:
    """Per-pixel (patch, center spectrum, abundance) triples over a cube."""

    def __init__(self, cube, abundances, patch_size, split_fraction=0.8, seed=0):
        self.cube = np.asarray(cube, dtype=np.float64)
        self.abundances = None if abundances is None else \
            np.asarray(abundances, dtype=np.float64).reshape(-1, abundances.shape[-1])
        self.patch_size = patch_size
        h, w, b = self.cube.shape
        self.centers = self.cube.reshape(-1, b)
        self.n_pixels = h * w
        self.train_idx, self.test_idx = split(self.n_pixels, split_fraction, seed)

    def batch(self, indices):
        patches = patch_batch(self.cube, self.patch_size, indices)  # (n,P,P,B)
        nbpp = np.ascontiguousarray(patches.transpose(0, 3, 1, 2))
        z = None if self.abundances is None else self.abundances[indices]
        return nbpp, self.centers[indices], z


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

TRACE_COLUMNS = ("epoch", "total", "recon", "kl", "abundance_mse")


def train(params, dataset, config):
    """Run the optimization loop; returns (params, trace).

    trace is a list of per-epoch rows (epoch, total, recon, kl,
    abundance_mse), each value averaged over the epoch's steps.  Raises
    TrainingDiverged as soon as any loss term goes non-finite.  BLAS is
    pinned to one thread for the duration: the kernels run fastest
    unthreaded at these sizes and the determinism contract wants a fixed
    reduction order.
    """
    with threadpool_limits(limits=1):
        return _train_loop(params, dataset, config)


def _train_loop(params, dataset, config):
    k = params.config.endmembers
    prior = np.ones(k) if config.prior is None else np.asarray(config.prior, dtype=np.float64)
    if prior.shape != (k,):
        raise ContractError(f"prior must have {k} components, got {prior.shape}")
    if config.abundance_weight > 0.0 and dataset.abundances is None:
        raise ContractError("supervised abundance loss requires ground-truth abundances")

    trainable = params.parameters()
    state = AdamState(trainable)
    ss = np.random.SeedSequence(config.seed)
    shuffle_rng, noise_rng = [np.random.default_rng(s) for s in ss.spawn(2)]

    trace = []
    step = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(dataset.train_idx)
        sums = np.zeros(4)
        n_steps = 0
        for start in range(0, order.size, config.batch_size):
            idx = order[start:start + config.batch_size]
            nbpp, x_center, z_true = dataset.batch(idx)
            params.zero_grad()
            with Tape() as tape:
                alpha = encode(params, nbpp, training=True)
                nll_terms = []
                kl_t = T.mean_all(stats.dirichlet_kl_op(alpha, prior))
                for _ in range(config.mc_samples):
                    u = noise_rng.random((idx.size, k))
                    z = stats.dirichlet_rsample_op(alpha, u)
                    mu, sigma = decode(params, z)
                    nll_terms.append(
                        T.mul(T.mean_all(stats.gaussian_loglik_op(mu, sigma, x_center)), -1.0))
                nll_t = nll_terms[0]
                for extra in nll_terms[1:]:
                    nll_t = T.add(nll_t, extra)
                if config.mc_samples > 1:
                    nll_t = T.mul(nll_t, 1.0 / config.mc_samples)
                total = T.add(nll_t, T.mul(kl_t, config.kl_weight))
                if config.abundance_weight > 0.0:
                    sup_t = loss_supervised(z_true, T.normalize_lastdim(alpha))
                    total = T.add(total, T.mul(sup_t, config.abundance_weight))
                else:
                    sup_t = None

            values = {
                "total": float(total.data),
                "recon": float(nll_t.data),
                "kl": float(kl_t.data),
                "abundance_mse": float(sup_t.data) if sup_t is not None else 0.0,
            }
            if not math.isfinite(values["total"]):
                bad = next((name for name, v in values.items()
                            if name != "total" and not math.isfinite(v)), "total")
                raise TrainingDiverged(step, bad, values)
            T.backward(total, tape)
            adam_step(trainable, state, config.learning_rate)
            sums += [values["total"], values["recon"], values["kl"], values["abundance_mse"]]
            n_steps += 1
            step += 1
        trace.append((epoch, *(sums / max(n_steps, 1))))
    return params, trace


def write_trace_csv(path, trace):
    with open(path, "w") as fh:
        fh.write(",".join(TRACE_COLUMNS) + "\n")
        for row in trace:
            fh.write(f"{int(row[0])}," + ",".join(repr(float(v)) for v in row[1:]) + "\n")


def build_model(config, bands, endmembers):
    """Instantiate model parameters sized for a scene, from a TrainConfig."""
    mc = ModelConfig(bands=bands, endmembers=endmembers,
                     hidden_channels=config.hidden_channels,
                     patch_size=config.patch_size,
                     concentration_scale=config.concentration_scale,
                     decoder_hidden=config.decoder_hidden)
    return init_params(mc, seed=config.seed)


def predict_abundances(params, dataset, indices):
    """Posterior-mean abundances at the given pixel indices (eval mode)."""
    out = np.empty((len(indices), params.config.endmembers))
    indices = np.asarray(indices)
    for start in range(0, indices.size, 512):
        idx = indices[start:start + 512]
        nbpp, _, _ = dataset.batch(idx)
        alpha = encode(params, nbpp, training=False).data
        out[start:start + idx.size] = alpha / alpha.sum(axis=1, keepdims=True)
    return out
