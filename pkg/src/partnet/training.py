"""Interleaved partitioned training.

Each iteration samples a partition index k from the chunk ratios, updates
partition k on a with-replacement minibatch from the chunk prefix D_{1:k}
through the level-k subnetwork, then (when any hyperparameter is learnable)
updates psi on an out-of-sample minibatch: a chunk index k >= 2 is drawn
with the ratios renormalized to exclude the first chunk, the batch comes
from that single chunk, and the gradient flows through the level-(k-1)
subnetwork, which never saw that chunk.

Per-partition optimizer state keeps sparse updates honest: moments and step
counters of partitions that were not touched are bit-unchanged.  Weight
decay is decoupled, pulls toward the default values, and is scaled per
partition by the reciprocal (or square root, via the exponent knob) of the
number of examples the partition trains on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff, hyper
from .autodiff import Tape, backward
from .data import ChunkedDataset
from .partition import (PartitionSpec, PartitionedParams, assign_nodes,
                        assign_random_weights, materialize_on_tape,
                        restrict_gradient)
from .rng import substream


class ConfigError(ValueError):
    pass


_ACTIVATIONS = {"gelu": autodiff.gelu, "relu": autodiff.relu}


@dataclass
class ModelSpec:
    """A plain MLP classifier, optionally fed by warped images and gated inputs."""

    in_dim: int
    hidden: tuple
    n_classes: int
    activation: str = "gelu"
    image_hw: tuple | None = None  # set for image inputs (enables warping)
    input_mask: np.ndarray | None = None  # fixed binary feature mask

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.image_hw is not None:
            h, w = self.image_hw
            if h * w != self.in_dim:
                raise ConfigError(f"image {self.image_hw} does not flatten to "
                                  f"{self.in_dim} features")
        if self.input_mask is not None:
            self.input_mask = np.asarray(self.input_mask, dtype=np.float64)
            if self.input_mask.shape != (self.in_dim,):
                raise ConfigError("input_mask length must equal in_dim")

    @property
    def layer_dims(self):
        return [self.in_dim, *self.hidden, self.n_classes]


def init_mlp_params(model: ModelSpec, spec: PartitionSpec, rng,
                    defaults: str = "init", scheme: str = "random") -> PartitionedParams:
    """Kaiming-uniform MLP weights with a partition assignment.

    defaults: "init" freezes the initialization values as the stand-ins for
    untrained partitions, "zero" prunes them instead.
    """
    dims = model.layer_dims
    values, names = [], []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = 1.0 / np.sqrt(d_in)
        values.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
        values.append(rng.uniform(-bound, bound, size=(d_out,)))
        names += [f"w{i}", f"b{i}"]
    shapes = [v.shape for v in values]
    if scheme == "random":
        assignment = assign_random_weights(shapes, spec.param_ratios, rng)
    elif scheme == "node":
        # weight matrices are (in, out): units live on axis 1; biases on axis 0
        out_axes = [1, 0] * (len(values) // 2)
        assignment = assign_nodes(shapes, out_axes, spec.param_ratios)
    else:
        raise ConfigError(f"unknown partitioning scheme {scheme!r}")
    if defaults == "init":
        dflt = [v.copy() for v in values]
    elif defaults == "zero":
        dflt = [np.zeros_like(v) for v in values]
    else:
        raise ConfigError(f"unknown defaults mode {defaults!r}")
    return PartitionedParams(values, dflt, assignment, names)


@dataclass
class TrainingConfig:
    spec: PartitionSpec
    iterations: int
    batch_size: int = 256
    lr: float = 1e-3
    hyper_lr: float = 1e-3
    weight_decay: float = 0.0
    wd_exponent: float = 1.0  # 1.0 = reciprocal of examples seen, 0.5 = square root
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    lr_schedule: str = "constant"  # or "cosine" (floor at lr/100)
    eval_interval: int = 250
    select_best_lml: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.wd_exponent not in (1.0, 0.5):
            raise ConfigError(f"wd_exponent must be 1.0 or 0.5, got {self.wd_exponent}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")


def sample_partition_index(chunk_ratios, rng) -> int:
    """k ~ Cat(u_1..u_C), 1-based."""
    u = np.asarray(chunk_ratios, dtype=np.float64)
    edges = np.cumsum(u) / u.sum()
    return int(np.searchsorted(edges, rng.random(), side="right")) + 1


def sample_batch_prefix(chunks: ChunkedDataset, k: int, batch_size: int, rng):
    """Uniform with-replacement minibatch from the union D_{1:k}."""
    n = chunks.prefix_size(k)
    if n < 1:
        raise ValueError(f"prefix D_1..D_{k} is empty")
    idx = rng.integers(0, n, size=batch_size)
    return chunks.features[idx], chunks.labels[idx]


def weight_decay_for(spec: PartitionSpec, chunks: ChunkedDataset, lam: float,
                     exponent: float, k: int) -> float:
    """Decay strength for partition k: lambda / (examples in D_{1:k})^rho."""
    if lam == 0.0:
        return 0.0
    return lam / float(chunks.prefix_size(k)) ** exponent


class PartitionAdam:
    """Adam with first/second moments and step counters kept per partition."""

    def __init__(self, params: PartitionedParams, betas=(0.9, 0.999), eps=1e-8):
        self.m = [np.zeros_like(v) for v in params.values]
        self.v = [np.zeros_like(v) for v in params.values]
        self.t = np.zeros(params.n_partitions + 1, dtype=np.int64)  # 1-based
        self.b1, self.b2 = betas
        self.eps = eps

    def step(self, params: PartitionedParams, grads, j: int, lr: float,
             weight_decay: float = 0.0) -> None:
        """Update partition j only; every other element and moment is untouched."""
        self.t[j] += 1
        t = self.t[j]
        bc1 = 1.0 - self.b1 ** t
        bc2 = 1.0 - self.b2 ** t
        for i, w in enumerate(params.values):
            mask = params.assignment.layers[i] == j
            if not mask.any():
                continue
            g = grads[i][mask]
            m = self.b1 * self.m[i][mask] + (1.0 - self.b1) * g
            v = self.b2 * self.v[i][mask] + (1.0 - self.b2) * g * g
            self.m[i][mask] = m
            self.v[i][mask] = v
            upd = w[mask] - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if weight_decay:
                upd = upd - lr * weight_decay * (w[mask] - params.defaults[i][mask])
            w[mask] = upd


class Adam:
    """Plain Adam over a dict of named arrays (the hyperparameter optimizer)."""

    def __init__(self, arrays: dict, lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(a) for k, a in arrays.items()}
        self.v = {k: np.zeros_like(a) for k, a in arrays.items()}

    def step(self, arrays: dict, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for key, a in arrays.items():
            g = grads[key]
            self.m[key] = self.b1 * self.m[key] + (1.0 - self.b1) * g
            self.v[key] = self.b2 * self.v[key] + (1.0 - self.b2) * g * g
            a -= self.lr * (self.m[key] / bc1) / (np.sqrt(self.v[key] / bc2) + self.eps)


# ---------------------------------------------------------------------------
# forward graph

def build_loss(tape: Tape, eff_nodes, x, y, model: ModelSpec,
               hp: hyper.HyperParams | None, psi_nodes: dict, noise: dict | None):
    """Mean negative log-likelihood of a batch on the tape.

    `eff_nodes` are the materialized weight nodes ([w0, b0, w1, b1, ...]).
    `psi_nodes` carries tape nodes for whichever psi fields exist.  `noise`
    holds pre-drawn arrays ("eps", "mask_u", "dropout_u"); deterministic
    gates are used for entries that are None or missing.

    Returns (loss node, class-probability array of shape (B, K)).
    """
    n_batch = x.shape[0]
    act = _ACTIVATIONS[model.activation]
    noise = noise or {}

    augmented = hp is not None and hp.affine_ranges is not None
    if augmented:
        s = hp.n_aug_samples
        eps = noise.get("eps")
        if eps is None:
            raise ValueError("augmentation requires eps noise")
        theta = psi_nodes["affine"]
        mats = autodiff.affine_matrices(theta, eps)
        imgs = tape.constant(np.repeat(x, s, axis=0))
        warped = autodiff.bilinear_warp(imgs, mats)
        feats = autodiff.reshape(warped, (n_batch * s, model.in_dim))
    else:
        s = 1
        feats = tape.constant(x.reshape(n_batch, -1))

    if model.input_mask is not None:
        feats = feats * tape.constant(model.input_mask)

    if hp is not None and hp.mask_logits is not None:
        gates = hyper.gate_nodes(tape, psi_nodes["mask"], hp.temperature,
                                 noise.get("mask_u"))
        feats = feats * gates

    h = feats
    for layer in range(len(model.hidden)):
        w, b = eff_nodes[2 * layer], eff_nodes[2 * layer + 1]
        h = act((h @ w) + b)
        if hp is not None and hp.dropout_logits is not None:
            drop_u = noise.get("dropout_u")
            gates = hyper.gate_nodes(tape, psi_nodes["dropout"][layer],
                                     hp.temperature,
                                     None if drop_u is None else drop_u[layer])
            h = h * gates
    w, b = eff_nodes[-2], eff_nodes[-1]
    logits = (h @ w) + b

    if augmented:
        probs = autodiff.softmax_rows(logits)
        mean_p = autodiff.mean_axis(
            autodiff.reshape(probs, (n_batch, s, model.n_classes)), 1)
        picked = autodiff.pick_columns(mean_p, y)
        loss = autodiff.neg(autodiff.mean_all(autodiff.log(picked)))
        return loss, mean_p.value
    loss = autodiff.softmax_cross_entropy(logits, y)
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    p = np.exp(z)
    return loss, p / p.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# trainer

class Trainer:
    """Owns the parameters, optimizer state and rng streams for one run."""

    def __init__(self, params: PartitionedParams, chunks: ChunkedDataset,
                 model: ModelSpec, config: TrainingConfig,
                 hp: hyper.HyperParams | None = None, test_data=None):
        if chunks.n_chunks != config.spec.n_partitions:
            raise ConfigError(f"{chunks.n_chunks} data chunks vs "
                              f"{config.spec.n_partitions} partitions")
        self.params = params
        self.chunks = chunks
        self.model = model
        self.cfg = config
        self.hp = hp
        self.test_data = test_data
        self.opt = PartitionAdam(params, config.betas, config.adam_eps)
        self.hyper_opt = None
        if hp is not None and hp.trainable:
            self.hyper_opt = Adam(self._psi_arrays(), config.hyper_lr,
                                  config.betas, config.adam_eps)
        self.rng_train = substream(config.seed, "training")
        self.rng_hyper = substream(config.seed, "hyper")
        self.rng_aug = substream(config.seed, "augmentation")
        self.iteration = 0

    # -- psi plumbing -------------------------------------------------------

    def _psi_arrays(self) -> dict:
        out = {}
        if self.hp.mask_logits is not None:
            out["mask"] = self.hp.mask_logits
        if self.hp.affine_ranges is not None:
            out["affine"] = self.hp.affine_ranges
        if self.hp.dropout_logits is not None:
            for i, a in enumerate(self.hp.dropout_logits):
                out[f"dropout{i}"] = a
        return out

    def _psi_nodes(self, tape: Tape, trainable: bool) -> dict:
        if self.hp is None:
            return {}
        mk = tape.leaf if trainable else tape.constant
        nodes = {}
        if self.hp.mask_logits is not None:
            nodes["mask"] = mk(self.hp.mask_logits)
        if self.hp.affine_ranges is not None:
            nodes["affine"] = mk(self.hp.affine_ranges)
        if self.hp.dropout_logits is not None:
            nodes["dropout"] = [mk(a) for a in self.hp.dropout_logits]
        return nodes

    def _draw_noise(self, n_rows: int, rng) -> dict:
        if self.hp is None:
            return {}
        noise = {}
        if self.hp.affine_ranges is not None:
            rows = n_rows * self.hp.n_aug_samples
            noise["eps"] = hyper.affine_noise(rng, rows)
        else:
            rows = n_rows
        if self.hp.mask_logits is not None:
            noise["mask_u"] = hyper.noise_uniform(rng, (rows, self.model.in_dim))
        if self.hp.dropout_logits is not None:
            noise["dropout_u"] = [hyper.noise_uniform(rng, (rows, h))
                                  for h in self.model.hidden]
        return noise

    def _eval_noise(self, n_rows: int, tag: int) -> dict:
        """Deterministic eps draws for eval-mode augmentation averaging."""
        if self.hp is None or self.hp.affine_ranges is None:
            return {}
        rng = substream(self.cfg.seed, "eval", tag, n_rows)
        return {"eps": hyper.affine_noise(rng, n_rows * self.hp.n_aug_samples)}

    # -- steps --------------------------------------------------------------

    def lr_at(self, iteration: int) -> float:
        if self.cfg.lr_schedule == "constant":
            return self.cfg.lr
        lo = self.cfg.lr / 100.0
        frac = iteration / max(1, self.cfg.iterations)
        return lo + 0.5 * (self.cfg.lr - lo) * (1.0 + np.cos(np.pi * frac))

    def partition_step(self, k: int | None = None, batch=None) -> int:
        cfg = self.cfg
        if k is None:
            k = sample_partition_index(cfg.spec.chunk_ratios, self.rng_train)
        if not 1 <= k <= cfg.spec.n_partitions:
            raise ValueError(f"partition index {k} outside [1, {cfg.spec.n_partitions}]")
        if batch is None:
            batch = sample_batch_prefix(self.chunks, k, cfg.batch_size, self.rng_train)
        x, y = batch
        tape = Tape()
        eff, leaves = materialize_on_tape(tape, self.params, k, trainable=True)
        psi = self._psi_nodes(tape, trainable=False)
        loss, _ = build_loss(tape, eff, x, y, self.model, self.hp, psi,
                             self._draw_noise(x.shape[0], self.rng_aug))
        grads = backward(loss)
        glist = restrict_gradient([grads[leaf] for leaf in leaves],
                                  self.params.assignment, k)
        wd = weight_decay_for(cfg.spec, self.chunks, cfg.weight_decay,
                              cfg.wd_exponent, k)
        self.opt.step(self.params, glist, k, self.lr_at(self.iteration), wd)
        return k

    def sample_hyper_chunk(self) -> int:
        u = np.asarray(self.cfg.spec.chunk_ratios[1:], dtype=np.float64)
        edges = np.cumsum(u) / u.sum()
        return int(np.searchsorted(edges, self.rng_hyper.random(), side="right")) + 2

    def hyper_step(self) -> int:
        """One psi update on an out-of-sample chunk; parameters stay untouched."""
        if self.cfg.spec.n_partitions < 2:
            raise ConfigError("hyperparameter optimization requires >= 2 chunks")
        if self.hyper_opt is None:
            raise ConfigError("no learnable hyperparameters configured")
        k = self.sample_hyper_chunk()
        xs, ys = self.chunks.chunk(k)
        idx = self.rng_hyper.integers(0, xs.shape[0], size=self.cfg.batch_size)
        x, y = xs[idx], ys[idx]
        tape = Tape()
        eff, _ = materialize_on_tape(tape, self.params, k - 1, trainable=False)
        psi = self._psi_nodes(tape, trainable=True)
        loss, _ = build_loss(tape, eff, x, y, self.model, self.hp, psi,
                             self._draw_noise(x.shape[0], self.rng_hyper))
        grads = backward(loss)
        flat_grads = {}
        if "mask" in psi:
            flat_grads["mask"] = grads[psi["mask"]]
        if "affine" in psi:
            flat_grads["affine"] = grads[psi["affine"]]
        if "dropout" in psi:
            for i, node in enumerate(psi["dropout"]):
                flat_grads[f"dropout{i}"] = grads[node]
        self.hyper_opt.step(self._psi_arrays(), flat_grads)
        return k

    # -- evaluation ---------------------------------------------------------

    def _forward_eval(self, x, y, level: int, tag: int = 0):
        tape = Tape()
        eff, _ = materialize_on_tape(tape, self.params, level, trainable=False)
        psi = self._psi_nodes(tape, trainable=False)
        loss, probs = build_loss(tape, eff, x, y, self.model, self.hp, psi,
                                 self._eval_noise(x.shape[0], tag))
        return float(loss.value), probs

    def evaluate(self, features, labels, level: int | None = None,
                 batch: int = 256):
        """(accuracy, mean log-likelihood) in eval mode at the given level."""
        level = self.params.n_partitions if level is None else level
        n = labels.shape[0]
        correct = 0
        loglik = 0.0
        for lo in range(0, n, batch):
            x = features[lo:lo + batch]
            y = labels[lo:lo + batch]
            _, probs = self._forward_eval(x, y, level, tag=lo)
            correct += int((probs.argmax(axis=1) == y).sum())
            loglik += float(np.log(probs[np.arange(y.size), y] + 1e-300).sum())
        return correct / n, loglik / n

    def evaluate_lml(self) -> float:
        """Full-dataset out-of-sample objective:
        sum_{k=2..C} sum_{D_k} log p(y | x, subnetwork k-1, psi)."""
        total = 0.0
        for k in range(2, self.chunks.n_chunks + 1):
            xs, ys = self.chunks.chunk(k)
            for lo in range(0, ys.shape[0], 256):
                x, y = xs[lo:lo + 256], ys[lo:lo + 256]
                _, probs = self._forward_eval(x, y, k - 1, tag=1000 + k)
                total += float(np.log(probs[np.arange(y.size), y] + 1e-300).sum())
        return total

    # -- loop ---------------------------------------------------------------

    def metrics_row(self) -> dict:
        row = {"iteration": self.iteration, "lml": self.evaluate_lml()}
        tr_acc, tr_ll = self.evaluate(self.chunks.features, self.chunks.labels)
        row["train_acc"], row["train_loglik"] = tr_acc, tr_ll
        if self.test_data is not None:
            te_acc, te_ll = self.evaluate(*self.test_data)
            row["test_acc"], row["test_loglik"] = te_acc, te_ll
        if self.hp is not None:
            row.update(self.hp.scalar_columns())
        return row

    def train(self, progress=None):
        """Run the configured number of iterations; returns (rows, summary).

        Emits one metrics row every eval_interval iterations plus a final
        one.  With select_best_lml the parameters (and psi) with the best
        out-of-sample objective seen at an evaluation point are restored at
        the end, and the summary reports that point.
        """
        cfg = self.cfg
        rows = [self.metrics_row()]
        do_hyper = self.hyper_opt is not None
        best = None
        for _ in range(cfg.iterations):
            self.iteration += 1
            self.partition_step()
            if do_hyper:
                self.hyper_step()
            if self.iteration % cfg.eval_interval == 0 or self.iteration == cfg.iterations:
                row = self.metrics_row()
                rows.append(row)
                if cfg.select_best_lml and (best is None or row["lml"] > best[0]):
                    best = (row["lml"], self.params.copy(),
                            None if self.hp is None else self.hp.copy(), dict(row))
                if progress is not None:
                    progress(row)
        if cfg.select_best_lml and best is not None:
            _, self.params, self.hp, best_row = best
            summary = dict(best_row)
            summary["selected_iteration"] = best_row["iteration"]
        else:
            summary = dict(rows[-1])
        summary["final_iteration"] = self.iteration
        return rows, summary
