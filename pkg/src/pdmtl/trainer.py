"""Personalized decentralized training over a dynamic communication graph.

One epoch, in order:

1. head phase: every client takes ``k1`` Adam steps on its private head per
   private minibatch, encoder frozen;
2. every client evaluates its own task loss and encoder gradient on a common
   shared batch, and the approximate transference matrix is formed;
3. the transference is clustered into a block mixing matrix and accumulated;
   every ``h`` epochs the accumulated evidence becomes the new topology;
4. encoder phase: per private minibatch, ``k2`` gossip rounds, each a local
   Adam step on the encoder followed by mixing with the current topology;
5. per-task train/test losses and the topology are recorded.

``steps_per_epoch`` controls how many private minibatches each phase
consumes; by default one pass over the client's shard.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Sequence

import numpy as np

from . import topology as topo
from .datagen import COVARIANCES, ClientView, make_dataset, partition_for_clients
from .nn import AdamState, ConfigurationError, Mlp, adam_step, encoder_head_grads, encoder_head_loss
from .transference import TransferenceMatrix, approx_transference

log = logging.getLogger(__name__)

TOPOLOGY_MODES = ("dynamic", "fully_connected", "fixed")
AVERAGING = ("average_V", "average_Z")
TABLE_I_ENCODER = (10, 64, 128, 256, 512, 256, 128)


@dataclass
class DataConfig:
    covariance: str = "four_task"
    n_train: int = 30_000
    n_test: int = 10_000
    n_shared: int = 10_000
    seed: Optional[int] = None  # None: follow the run seed

    def validate(self):
        if self.covariance not in COVARIANCES:
            raise ConfigurationError(
                f"covariance: unknown {self.covariance!r}, choose from {sorted(COVARIANCES)}"
            )
        for name in ("n_train", "n_test", "n_shared"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name}: must be >= 1")


@dataclass
class RunConfig:
    n_clients: int = 4
    epochs: int = 40
    lr: float = 2e-5
    k1: int = 1
    k2: int = 2
    h: int = 5
    topology_mode: str = "dynamic"
    fixed_w: Optional[List[List[float]]] = None
    topology_freeze_epoch: Optional[int] = None
    seed: int = 0
    batch_size: int = 64
    shared_batch_size: int = 256
    steps_per_epoch: Optional[int] = None
    eigen_threshold: float = 1.0
    transference_scale: float = 1.0
    averaging: str = "average_V"
    encoder_dims: List[int] = field(default_factory=lambda: list(TABLE_I_ENCODER))
    hidden_activation: str = "relu"
    n_classes: int = 2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "RunConfig":
        for name in ("k1", "k2", "h", "epochs", "n_clients", "batch_size", "shared_batch_size", "n_classes"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name}: must be >= 1, got {getattr(self, name)}")
        if not self.lr > 0:
            raise ConfigurationError(f"lr: must be > 0, got {self.lr}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigurationError("steps_per_epoch: must be >= 1 or null")
        if self.topology_mode not in TOPOLOGY_MODES:
            raise ConfigurationError(f"topology_mode: must be one of {TOPOLOGY_MODES}")
        if self.averaging not in AVERAGING:
            raise ConfigurationError(f"averaging: must be one of {AVERAGING}")
        if self.topology_mode == "fixed":
            if self.fixed_w is None:
                raise ConfigurationError("fixed_w: required when topology_mode is 'fixed'")
            w = np.asarray(self.fixed_w, dtype=np.float64)
            if w.shape != (self.n_clients, self.n_clients):
                raise ConfigurationError(f"fixed_w: must be {self.n_clients}x{self.n_clients}")
            try:
                topo.check_doubly_stochastic(w)
            except topo.StochasticityError as exc:
                raise ConfigurationError(f"fixed_w: {exc}") from None
        if self.topology_freeze_epoch is not None and self.topology_freeze_epoch < 1:
            raise ConfigurationError("topology_freeze_epoch: must be >= 1 or null")
        if len(self.encoder_dims) < 2:
            raise ConfigurationError("encoder_dims: need at least input and output width")
        if self.transference_scale <= 0:
            raise ConfigurationError("transference_scale: must be > 0")
        self.data.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        data = d.pop("data", None) or {}
        if isinstance(data, DataConfig):
            data_cfg = data
        else:
            dknown = {f.name for f in fields(DataConfig)}
            bad = set(data) - dknown
            if bad:
                raise ConfigurationError(f"unknown config keys: {sorted('data.' + b for b in bad)}")
            data_cfg = DataConfig(**data)
        return cls(data=data_cfg, **d)

    @property
    def data_seed(self) -> int:
        return self.seed if self.data.seed is None else self.data.seed


class BatchStream:
    """Endless seeded minibatches over one client's shard, reshuffled per pass."""

    def __init__(self, x, y, batch_size, rng):
        self.x, self.y = x, y
        self.batch_size = min(batch_size, len(x))
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def __len__(self):
        return -(-len(self.x) // self.batch_size)

    def next(self):
        if self._pos >= len(self._order):
            self._order = self.rng.permutation(len(self.x))
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.x[idx], self.y[idx]


@dataclass
class ClientState:
    client_id: int
    encoder: Mlp
    head: Mlp
    adam_encoder: AdamState
    adam_head: AdamState
    view: Optional[ClientView] = None
    batches: Optional[BatchStream] = None


def init_clients(views: Sequence[ClientView], config: RunConfig) -> List[ClientState]:
    """Identical encoder initialization everywhere; per-client heads and streams."""
    root = np.random.SeedSequence(config.seed)
    enc_seq, *client_seqs = root.spawn(1 + len(views))
    n_hidden = len(config.encoder_dims) - 1
    enc_acts = [config.hidden_activation] * n_hidden
    encoder0 = Mlp.init(config.encoder_dims, np.random.default_rng(enc_seq), enc_acts)
    kw = dict(beta1=config.adam_beta1, beta2=config.adam_beta2, epsilon=config.adam_epsilon)
    clients = []
    for k, (view, seq) in enumerate(zip(views, client_seqs)):
        head_seq, batch_seq = seq.spawn(2)
        head = Mlp.init(
            [config.encoder_dims[-1], config.n_classes], np.random.default_rng(head_seq), ["identity"]
        )
        encoder = encoder0.copy()
        clients.append(
            ClientState(
                client_id=k,
                encoder=encoder,
                head=head,
                adam_encoder=AdamState.zeros(encoder.n_params, **kw),
                adam_head=AdamState.zeros(head.n_params, **kw),
                view=view,
                batches=BatchStream(view.train_x, view.train_y, config.batch_size, np.random.default_rng(batch_seq)),
            )
        )
    return clients


def local_head_update(client: ClientState, batch, lr: float, k1: int = 1) -> float:
    """``k1`` Adam steps on the head only; returns the loss before the first step."""
    x, y = batch
    if len(x) == 0:
        raise ConfigurationError("empty batch for head update")
    first = None
    for _ in range(k1):
        loss, _, g_head = encoder_head_grads(client.encoder, client.head, x, y, encoder_grad=False)
        client.head.params = adam_step(client.head.params, g_head, client.adam_head, lr)
        first = loss if first is None else first
    return first


def local_encoder_step(client: ClientState, batch, lr: float) -> float:
    x, y = batch
    if len(x) == 0:
        raise ConfigurationError("empty batch for encoder step")
    loss, g_enc, _ = encoder_head_grads(client.encoder, client.head, x, y, head_grad=False)
    client.encoder.params = adam_step(client.encoder.params, g_enc, client.adam_encoder, lr)
    return loss


def mix_encoders(clients: Sequence[ClientState], w) -> None:
    """Replace every encoder by the ``w``-weighted average of all encoders."""
    w = np.asarray(getattr(w, "w", w))
    topo.check_doubly_stochastic(w)
    stacked = np.stack([c.encoder.params for c in clients])
    mixed = w @ stacked
    for c, row in zip(clients, mixed):
        c.encoder.params = row


def gossip_round(clients: Sequence[ClientState], w, batches, lr: float) -> List[float]:
    """One local encoder step per client, then one mixing step.  Heads frozen."""
    w = np.asarray(getattr(w, "w", w))
    topo.check_doubly_stochastic(w)
    losses = [local_encoder_step(c, b, lr) for c, b in zip(clients, batches)]
    mix_encoders(clients, w)
    return losses


def shared_gradients(clients: Sequence[ClientState], shared_x, shared_y):
    """Own-task loss and flat encoder gradient of every client on one batch."""
    losses, grads = [], []
    for k, c in enumerate(clients):
        loss, g, _ = encoder_head_grads(c.encoder, c.head, shared_x, shared_y[:, k], head_grad=False)
        losses.append(loss)
        grads.append(g)
    return np.array(losses), np.stack(grads)


def evaluate(client: ClientState, x, y, chunk=5000) -> float:
    total = 0.0
    for start in range(0, len(x), chunk):
        xb, yb = x[start : start + chunk], y[start : start + chunk]
        total += encoder_head_loss(client.encoder, client.head, xb, yb) * len(xb)
    return total / len(x)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: List[float]
    test_loss: List[float]
    w: np.ndarray
    window_closed: bool
    z: Optional[np.ndarray] = None
    eigenvalues: Optional[np.ndarray] = None
    chosen_k: Optional[int] = None
    clusters: Optional[topo.Partition] = None
    wall_clock: float = 0.0

    @property
    def partition(self) -> topo.Partition:
        """Who actually communicates this epoch: components of ``w``'s support."""
        return topo.support_partition(self.w)

    def topology_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "window_closed": self.window_closed,
            "w": self.w.tolist(),
            "partition": [list(c) for c in self.partition],
            "z": None if self.z is None else self.z.tolist(),
            "eigenvalues": None if self.eigenvalues is None else self.eigenvalues.tolist(),
            "chosen_k": self.chosen_k,
            "clusters": None if self.clusters is None else [list(c) for c in self.clusters],
        }


@dataclass
class RunMetrics:
    config: RunConfig
    epochs: List[EpochRecord] = field(default_factory=list)

    def loss_array(self, kind="test") -> np.ndarray:
        """``(epochs, n_tasks)`` array of per-epoch losses."""
        return np.array([getattr(r, f"{kind}_loss") for r in self.epochs])

    def window_partitions(self):
        """``(epoch, partition)`` for every epoch where a new topology was set."""
        return [(r.epoch, r.partition) for r in self.epochs if r.window_closed]


class Trainer:
    """Holds the client states and topology accumulator across epochs."""

    def __init__(self, config: RunConfig, views: Sequence[ClientView], shared_x, shared_y):
        self.config = config.validate()
        if len(views) != config.n_clients:
            raise ConfigurationError(f"{len(views)} client views for n_clients={config.n_clients}")
        self.clients = init_clients(views, config)
        self.shared_x = np.asarray(shared_x, dtype=np.float64)
        self.shared_y = np.asarray(shared_y)
        seq = np.random.SeedSequence([config.seed, 0x5A])
        self._shared_rng = np.random.default_rng(seq)
        n = config.n_clients
        if config.topology_mode == "fixed":
            self.w = topo.MixingMatrix(np.asarray(config.fixed_w, dtype=np.float64))
        else:
            self.w = topo.uniform_mixing(n)
        self._window: list = []
        self.epoch = 0

    @property
    def steps(self) -> int:
        if self.config.steps_per_epoch is not None:
            return self.config.steps_per_epoch
        return max(len(c.batches) for c in self.clients)

    def _topology_active(self, epoch) -> bool:
        cfg = self.config
        if cfg.topology_mode != "dynamic":
            return False
        return cfg.topology_freeze_epoch is None or epoch < cfg.topology_freeze_epoch

    def run_epoch(self) -> EpochRecord:
        cfg = self.config
        self.epoch += 1
        t = self.epoch
        started = time.perf_counter()
        steps = self.steps

        head_losses = np.zeros(cfg.n_clients)
        for _ in range(steps):
            for k, c in enumerate(self.clients):
                head_losses[k] += local_head_update(c, c.batches.next(), cfg.lr, cfg.k1)
        head_losses /= steps

        rec = dict(z=None, eigenvalues=None, chosen_k=None, clusters=None)
        window_closed = False
        if self._topology_active(t):
            idx = self._shared_rng.choice(len(self.shared_x), size=min(cfg.shared_batch_size, len(self.shared_x)), replace=False)
            losses, grads = shared_gradients(self.clients, self.shared_x[idx], self.shared_y[idx])
            z = approx_transference(grads, losses, epoch=t, scale=cfg.transference_scale, strict=False).z
            clusters, report = topo.spectral_cluster(topo.symmetrize_clamp(z), cfg.eigen_threshold)
            rec.update(z=z, eigenvalues=report.eigenvalues, chosen_k=report.chosen_k, clusters=clusters)
            if cfg.averaging == "average_V":
                self._window.append(topo.mixing_from_clusters(clusters, cfg.n_clients))
            else:
                self._window.append(z)
            if t % cfg.h == 0:
                if cfg.averaging == "average_V":
                    self.w = topo.average_mixing(self._window)
                else:
                    zbar = np.mean(self._window, axis=0)
                    parts, _ = topo.spectral_cluster(topo.symmetrize_clamp(zbar), cfg.eigen_threshold)
                    self.w = topo.mixing_from_clusters(parts, cfg.n_clients)
                self._window = []
                window_closed = True
        topo.check_doubly_stochastic(self.w)

        enc_losses = np.zeros(cfg.n_clients)
        for _ in range(steps):
            for _ in range(cfg.k2):
                batches = [c.batches.next() for c in self.clients]
                enc_losses += gossip_round(self.clients, self.w, batches, cfg.lr)
        enc_losses /= steps * cfg.k2

        test = [evaluate(c, c.view.test_x, c.view.test_y) for c in self.clients]
        record = EpochRecord(
            epoch=t,
            train_loss=[float(v) for v in enc_losses],
            test_loss=[float(v) for v in test],
            w=self.w.w.copy(),
            window_closed=window_closed,
            wall_clock=time.perf_counter() - started,
            **rec,
        )
        log.info(
            "epoch %d  test %s  partition %s",
            t,
            " ".join(f"{v:.4f}" for v in test),
            [list(p) for p in record.partition],
        )
        return record

    def run(self, epochs=None) -> RunMetrics:
        metrics = RunMetrics(self.config)
        for _ in range(self.config.epochs if epochs is None else epochs):
            metrics.epochs.append(self.run_epoch())
        return metrics


def build_trainer(config: RunConfig, dataset=None) -> Trainer:
    config.validate()
    if dataset is None:
        make_spec, coords = COVARIANCES[config.data.covariance]
        dataset = make_dataset(
            make_spec(),
            coords,
            config.data.n_train,
            config.data.n_test,
            config.data.n_shared,
            seed=config.data_seed,
        )
    views = partition_for_clients(dataset, config.n_clients)
    return Trainer(config, views, dataset.shared.x, dataset.shared.labels)


def run_experiment(config: RunConfig, dataset=None) -> RunMetrics:
    return build_trainer(config, dataset).run()
