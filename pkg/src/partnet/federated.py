"""Deterministic federated simulator with partition-aware uploads.

Clients are pre-assigned to chunks; a chunk is the union of its clients'
datasets.  In a round, a chunk-k client updates each partition j in k..C
independently (every other partition reset to the server values), uploads
only those partition deltas plus a hypergradient computed through the
level-(k-1) subnetwork, and the server averages per partition over exactly
the clients that uploaded it.  Partitions below a client's chunk are never
uploaded, which is where the communication saving comes from.

Everything is a pure function of (server snapshot, per-round client rng
streams), so rounds replay bit-identically and client work could run in any
order; aggregation iterates clients sorted by id.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import hyper
from .autodiff import Tape, backward
from .data import ImageDataset
from .partition import (PartitionAssignment, PartitionedParams,
                        largest_remainder, materialize_on_tape,
                        restrict_gradient)
from .rng import substream
from .training import (Adam, ConfigError, ModelSpec, PartitionAdam, build_loss)


@dataclass
class FedConfig:
    n_clients: int
    chunk_ratios: tuple  # client mass per chunk (length C)
    rounds: int
    local_lr: float = 5e-2
    local_epochs: int = 1
    local_batch_size: int = 64
    server_lr: float = 1e-3
    server_hyper_lr: float = 3e-3
    server_opt: str = "adam"  # or "sgd"
    alpha: float = 0.1  # Dirichlet concentration for non-i.i.d. sharding
    eval_interval: int = 10
    participation: float = 1.0
    hyper_batch_size: int | None = None  # None = full local batch
    seed: int = 0

    def __post_init__(self):
        r = np.asarray(self.chunk_ratios, dtype=np.float64)
        if abs(r.sum() - 1.0) > 1e-9 or np.any(r < 0):
            raise ConfigError(f"chunk ratios must be non-negative and sum to 1, "
                              f"got {list(self.chunk_ratios)}")
        if self.n_clients < r.size:
            raise ConfigError(f"{self.n_clients} clients cannot cover {r.size} chunks")
        if self.alpha <= 0:
            raise ConfigError(f"Dirichlet concentration must be positive, got {self.alpha}")
        if not 0 < self.participation <= 1:
            raise ConfigError(f"participation must be in (0, 1], got {self.participation}")
        if self.server_opt not in ("adam", "sgd"):
            raise ConfigError(f"unknown server optimizer {self.server_opt!r}")

    @property
    def n_chunks(self) -> int:
        return len(self.chunk_ratios)


@dataclass
class Client:
    cid: int
    features: np.ndarray
    labels: np.ndarray
    chunk: int = 1

    def __post_init__(self):
        if self.labels.shape[0] == 0:
            raise ValueError(f"client {self.cid} has an empty dataset")

    def __len__(self):
        return self.labels.shape[0]


@dataclass
class ClientUpdate:
    cid: int
    chunk: int
    deltas: dict  # partition j -> list of per-layer arrays, zero outside j
    upload_count: int
    hyper_grad: dict | None  # field name -> array, None for chunk-1 clients

    def __post_init__(self):
        bad = [j for j in self.deltas if j < self.chunk]
        if bad:
            raise ValueError(f"client {self.cid} (chunk {self.chunk}) carries "
                             f"deltas for earlier partitions {bad}")


class ServerState:
    """Global model, global psi, and the server-side optimizers."""

    def __init__(self, params: PartitionedParams, hp: hyper.HyperParams | None,
                 cfg: FedConfig, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.hp = hp
        self.cfg = cfg
        self.round = 0
        if cfg.server_opt == "adam":
            self.opt_w = PartitionAdam(params, betas, eps)
        else:
            self.opt_w = None  # plain per-partition SGD
        self.opt_psi = None
        if hp is not None and hp.trainable:
            self.opt_psi = Adam(_psi_arrays(hp), cfg.server_hyper_lr, betas, eps)

    def psi_arrays(self) -> dict:
        return _psi_arrays(self.hp) if self.hp is not None else {}


def _psi_arrays(hp: hyper.HyperParams) -> dict:
    out = {}
    if hp.mask_logits is not None:
        out["mask"] = hp.mask_logits
    if hp.affine_ranges is not None:
        out["affine"] = hp.affine_ranges
    if hp.dropout_logits is not None:
        for i, a in enumerate(hp.dropout_logits):
            out[f"dropout{i}"] = a
    return out


def _psi_nodes(tape: Tape, hp: hyper.HyperParams | None, trainable: bool) -> dict:
    if hp is None:
        return {}
    mk = tape.leaf if trainable else tape.constant
    nodes = {}
    if hp.mask_logits is not None:
        nodes["mask"] = mk(hp.mask_logits)
    if hp.affine_ranges is not None:
        nodes["affine"] = mk(hp.affine_ranges)
    if hp.dropout_logits is not None:
        nodes["dropout"] = [mk(a) for a in hp.dropout_logits]
    return nodes


def _draw_noise(hp: hyper.HyperParams | None, model: ModelSpec, n_rows: int, rng) -> dict:
    if hp is None:
        return {}
    noise = {}
    rows = n_rows
    if hp.affine_ranges is not None:
        rows = n_rows * hp.n_aug_samples
        noise["eps"] = hyper.affine_noise(rng, rows)
    if hp.mask_logits is not None:
        noise["mask_u"] = hyper.noise_uniform(rng, (rows, model.in_dim))
    if hp.dropout_logits is not None:
        noise["dropout_u"] = [hyper.noise_uniform(rng, (rows, h))
                              for h in model.hidden]
    return noise


# ---------------------------------------------------------------------------
# non-i.i.d. sharding

def _dirichlet_split(class_indices, n_total: int, n_clients: int, alpha: float, rng):
    """Reddi-style label-skew split: per client, a Dirichlet draw over classes
    sets desired counts; shortfalls are refilled from the global residual."""
    pools = [list(rng.permutation(idx)) for idx in class_indices]
    quotas = largest_remainder(n_total, [1.0 / n_clients] * n_clients)
    k = len(pools)
    out = []
    for i in range(n_clients):
        want = rng.multinomial(quotas[i], rng.dirichlet(np.full(k, alpha)))
        got = []
        for c in range(k):
            take = min(int(want[c]), len(pools[c]))
            got.extend(pools[c][:take])
            del pools[c][:take]
        deficit = int(quotas[i]) - len(got)
        if deficit > 0:
            residual = np.concatenate([np.asarray(p, dtype=np.int64) for p in pools
                                       if p]) if any(pools) else np.array([], dtype=np.int64)
            picks = rng.choice(residual, size=deficit, replace=False)
            chosen = set(int(x) for x in picks)
            for c in range(k):
                pools[c] = [x for x in pools[c] if int(x) not in chosen]
            got.extend(sorted(chosen))
        out.append(np.asarray(got, dtype=np.int64))
    return out


def shard_label_skew(features: np.ndarray, labels: np.ndarray, n_clients: int,
                     alpha: float, rng) -> list:
    """Split rows into n_clients label-skewed datasets (Dirichlet alpha)."""
    classes = np.unique(labels)
    class_indices = [np.flatnonzero(labels == c) for c in classes]
    parts = _dirichlet_split(class_indices, len(labels), n_clients, alpha, rng)
    return [Client(i, features[idx], labels[idx]) for i, idx in enumerate(parts)]


ROTATION_BINS = 10


def rotation_bin(angles: np.ndarray) -> np.ndarray:
    """Bin angles in [-pi, pi] into 1..10 equal-width bins (pi folds into 10)."""
    width = 2.0 * np.pi / ROTATION_BINS
    return np.clip(np.floor((np.asarray(angles) + np.pi) / width).astype(np.int64),
                   0, ROTATION_BINS - 1) + 1


def shard_rotation_bins(dataset: ImageDataset, n_clients: int, alpha: float,
                        rng) -> list:
    """Label-skew recipe applied to rotation-angle bins as pseudo-labels."""
    if dataset.angles is None:
        raise ValueError("rotation sharding requires per-example angles")
    bins = rotation_bin(dataset.angles)
    occupied = np.unique(bins)
    class_indices = [np.flatnonzero(bins == b) for b in occupied]
    parts = _dirichlet_split(class_indices, len(dataset), n_clients, alpha, rng)
    return [Client(i, dataset.images[idx], dataset.labels[idx])
            for i, idx in enumerate(parts)]


def assign_chunks(clients: list, chunk_ratios, rng) -> None:
    """Assign exactly largest-remainder(n_clients * ratio) clients per chunk,
    uniformly at random among clients (in place)."""
    counts = largest_remainder(len(clients), chunk_ratios)
    ids = np.repeat(np.arange(1, len(counts) + 1), counts)
    rng.shuffle(ids)
    for client, chunk in zip(clients, ids):
        client.chunk = int(chunk)


# ---------------------------------------------------------------------------
# one round

def expected_upload_fraction(chunk_client_ratios, param_ratios) -> float:
    """sum_k u_k * sum_{j>=k} p_j: the analytic per-round upload fraction."""
    u = np.asarray(chunk_client_ratios, dtype=np.float64)
    p = np.asarray(param_ratios, dtype=np.float64)
    if u.shape != p.shape:
        raise ValueError(f"ratio lengths differ: {u.shape} vs {p.shape}")
    tail = np.cumsum(p[::-1])[::-1]
    return float(np.dot(u, tail))


def client_update(server_params: PartitionedParams, hp: hyper.HyperParams | None,
                  client: Client, model: ModelSpec, cfg: FedConfig,
                  rng) -> ClientUpdate:
    """Local work of one client against a server snapshot (pure function).

    Each partition j in [chunk, C] is trained independently for the local
    epochs with all other partitions held at the server values; only those
    deltas and the psi gradient are returned.
    """
    c = server_params.n_partitions
    k = client.chunk
    partition_sizes = server_params.assignment.counts()
    deltas = {}
    for j in range(k, c + 1):
        work = server_params.copy()
        for _ in range(cfg.local_epochs):
            order = rng.permutation(len(client))
            for lo in range(0, len(client), cfg.local_batch_size):
                idx = order[lo:lo + cfg.local_batch_size]
                x, y = client.features[idx], client.labels[idx]
                tape = Tape()
                eff, leaves = materialize_on_tape(tape, work, j, trainable=True)
                psi = _psi_nodes(tape, hp, trainable=False)
                loss, _ = build_loss(tape, eff, x, y, model, hp, psi,
                                     _draw_noise(hp, model, x.shape[0], rng))
                grads = backward(loss)
                glist = restrict_gradient([grads[leaf] for leaf in leaves],
                                          work.assignment, j)
                for i, w in enumerate(work.values):
                    mask = work.assignment.layers[i] == j
                    if mask.any():
                        w[mask] -= cfg.local_lr * glist[i][mask]
        deltas[j] = [w - s for w, s in zip(work.values, server_params.values)]

    hyper_grad = None
    if hp is not None and hp.trainable and k >= 2:
        updated = server_params.copy()
        for j, dl in deltas.items():
            for i in range(len(updated.values)):
                updated.values[i] += dl[i]
        n_h = len(client) if cfg.hyper_batch_size is None else cfg.hyper_batch_size
        idx = (np.arange(len(client)) if cfg.hyper_batch_size is None
               else rng.integers(0, len(client), size=n_h))
        x, y = client.features[idx], client.labels[idx]
        tape = Tape()
        eff, _ = materialize_on_tape(tape, updated, k - 1, trainable=False)
        psi = _psi_nodes(tape, hp, trainable=True)
        loss, _ = build_loss(tape, eff, x, y, model, hp, psi,
                             _draw_noise(hp, model, x.shape[0], rng))
        grads = backward(loss)
        hyper_grad = {}
        if "mask" in psi:
            hyper_grad["mask"] = grads[psi["mask"]]
        if "affine" in psi:
            hyper_grad["affine"] = grads[psi["affine"]]
        if "dropout" in psi:
            for i, node in enumerate(psi["dropout"]):
                hyper_grad[f"dropout{i}"] = grads[node]

    upload = int(partition_sizes[k - 1:].sum())
    return ClientUpdate(client.cid, k, deltas, upload, hyper_grad)


def server_round(state: ServerState, updates: list) -> dict:
    """Aggregate one round of updates into the server model and psi.

    Per partition, deltas are averaged over exactly the uploading clients
    and fed (negated) to the server optimizer; partitions nobody uploaded
    are untouched.  Clients are processed in sorted-id order so the result
    is independent of arrival order.
    """
    if not updates:
        raise ValueError("server_round needs at least one participant")
    updates = sorted(updates, key=lambda u: u.cid)
    cfg = state.cfg
    c = state.params.n_partitions
    for j in range(1, c + 1):
        uploaders = [u for u in updates if u.chunk <= j]
        if not uploaders:
            continue
        avg = [np.zeros_like(v) for v in state.params.values]
        for u in uploaders:
            for i, d in enumerate(u.deltas[j]):
                avg[i] += d
        grads = [-(a / len(uploaders)) for a in avg]
        if state.opt_w is not None:
            state.opt_w.step(state.params, grads, j, cfg.server_lr)
        else:
            for i, w in enumerate(state.params.values):
                mask = state.params.assignment.layers[i] == j
                if mask.any():
                    w[mask] -= cfg.server_lr * grads[i][mask]

    submitting = [u for u in updates if u.hyper_grad is not None]
    if submitting and state.opt_psi is not None:
        arrays = state.psi_arrays()
        mean = {key: np.zeros_like(a) for key, a in arrays.items()}
        for u in submitting:
            for key in mean:
                mean[key] += u.hyper_grad[key]
        for key in mean:
            mean[key] /= len(submitting)
        state.opt_psi.step(arrays, mean)

    state.round += 1
    total = state.params.n_params()
    uploaded = sum(u.upload_count for u in updates)
    return {
        "round": state.round,
        "n_participants": len(updates),
        "upload_fraction": uploaded / (len(updates) * total),
    }


def evaluate_global(state: ServerState, model: ModelSpec, features, labels,
                    batch: int = 256) -> float:
    """Full-model (level C) accuracy with eval-mode gates."""
    c = state.params.n_partitions
    n = labels.shape[0]
    correct = 0
    for lo in range(0, n, batch):
        x, y = features[lo:lo + batch], labels[lo:lo + batch]
        tape = Tape()
        eff, _ = materialize_on_tape(tape, state.params, c, trainable=False)
        psi = _psi_nodes(tape, state.hp, trainable=False)
        noise = {}
        if state.hp is not None and state.hp.affine_ranges is not None:
            rng = substream(state.cfg.seed, "eval", state.round, lo)
            noise["eps"] = hyper.affine_noise(rng, x.shape[0] * state.hp.n_aug_samples)
        _, probs = build_loss(tape, eff, x, y, model, state.hp, psi, noise)
        correct += int((probs.argmax(axis=1) == y).sum())
    return correct / n


def run_federated(state: ServerState, clients: list, model: ModelSpec,
                  test_data, progress=None) -> list:
    """Run cfg.rounds rounds; one metrics row per evaluation point.

    Rows carry the round, global-model accuracy, a moving average of the
    last 10 evaluations, the measured upload fraction, and psi columns.
    """
    cfg = state.cfg
    rows = []
    acc_window = []
    for _ in range(cfg.rounds):
        rnd = state.round
        participants = clients
        if cfg.participation < 1.0:
            take = max(1, int(round(cfg.participation * len(clients))))
            pick = substream(cfg.seed, "federated", rnd).choice(
                len(clients), size=take, replace=False)
            participants = [clients[i] for i in sorted(pick)]
        updates = [
            client_update(state.params, state.hp, cl, model, cfg,
                          substream(cfg.seed, "federated", rnd, cl.cid))
            for cl in participants
        ]
        report = server_round(state, updates)
        if state.round % cfg.eval_interval == 0 or state.round == cfg.rounds:
            acc = evaluate_global(state, model, *test_data)
            acc_window.append(acc)
            row = {
                "round": state.round,
                "eval_accuracy": acc,
                "moving_avg_accuracy": float(np.mean(acc_window[-10:])),
                "upload_fraction": report["upload_fraction"],
            }
            if state.hp is not None:
                row.update(state.hp.scalar_columns())
            rows.append(row)
            if progress is not None:
                progress(row)
    return rows
