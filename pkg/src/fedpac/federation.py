"""Round engine for FedAvg, FedSOA and FedPAC.

One round: sample S of N clients, run K local preconditioned steps on each,
then average parameter deltas (and, with alignment, optimizer states) on the
server. FedPAC additionally mixes every local step with the previous round's
global direction g_G.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import FederatedTask
from .linalg import make_rng
from .metrics import RoundReport, comm_cost, drift_report
from .models import Batch, evaluate
from .preconditioners import (
    CompressedState,
    OptimizerHyper,
    PreconditionerState,
    apply_precond,
    compress_state,
    decompress_state,
    default_hyper,
    init_state,
    serialize_state,
    state_average,
    state_nbytes,
    update_state,
    write_tensor,
)

ENGINES = ("fedavg", "fedsoa", "fedpac")

# Stream tags so client sampling and client work never share an RNG stream.
_SAMPLE_TAG = 0
_CLIENT_TAG = 1
_INIT_TAG = 2

DIVERGENCE_LOSS = 1e6


class DivergenceError(RuntimeError):
    def __init__(self, message: str, round: int | None = None, step: int | None = None, client: int | None = None):
        super().__init__(message)
        self.round = round
        self.step = step
        self.client = client


@dataclass(frozen=True)
class RoundConfig:
    n_clients: int = 10
    participation: int = 10
    local_steps: int = 20
    rounds: int = 50
    local_lr: float = 0.01
    server_lr: float = 1.0
    beta_mix: float = 0.5
    align_states: bool = True
    correct_updates: bool = True
    compress: float | None = None
    weight_decay: float = 0.01
    batch_size: int = 32
    seed: int = 42
    optimizer: str = "soap"
    hyper: OptimizerHyper | None = None
    lr_schedule: str = "constant"
    persist_local_state: bool = False
    threads: int = 1

    def __post_init__(self):
        if not 1 <= self.participation <= self.n_clients:
            raise ValueError("participation must satisfy 1 <= S <= N")
        if self.local_steps < 1 or self.rounds < 1 or self.batch_size < 1:
            raise ValueError("local_steps, rounds and batch_size must be >= 1")
        if not 0.0 <= self.beta_mix <= 1.0:
            raise ValueError("beta_mix out of [0,1]")
        if self.local_lr <= 0 or self.server_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.compress is not None and not 0.0 < self.compress <= 1.0:
            raise ValueError("compress must lie in (0, 1]")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def optimizer_hyper(self) -> OptimizerHyper:
        return self.hyper if self.hyper is not None else default_hyper(self.optimizer)

    def lr_at(self, round_idx: int) -> float:
        if self.lr_schedule == "cosine":
            return self.local_lr * 0.5 * (1.0 + math.cos(math.pi * round_idx / self.rounds))
        return self.local_lr


@dataclass
class ServerState:
    x: list
    g_G: list
    theta_global: PreconditionerState | None = None
    round: int = 0
    # per-client states kept between rounds by FedSOA's persist-local-state mode
    client_states: dict = field(default_factory=dict)


@dataclass
class ClientUpdate:
    client: int
    delta_x: list
    theta_final: PreconditionerState | None = None  # the client's true end-of-round state
    upload: PreconditionerState | CompressedState | None = None  # what the server receives
    upload_bytes: int = 0


def engine_flags(engine: str, cfg: RoundConfig) -> tuple[bool, bool]:
    """(align_states, correct_updates) actually in force for ``engine``."""
    if engine == "fedpac":
        return cfg.align_states, cfg.correct_updates and cfg.beta_mix > 0.0
    if engine in ("fedsoa", "fedavg"):
        return False, False
    raise ValueError(f"unknown engine {engine!r}")


def sample_clients(N: int, S: int, round_idx: int, seed: int) -> list[int]:
    """Uniform sample of S client ids without replacement, sorted."""
    if S > N:
        raise ValueError(f"cannot sample {S} of {N} clients")
    if S == N:
        return list(range(N))
    rng = make_rng(seed, _SAMPLE_TAG, round_idx)
    return sorted(int(i) for i in rng.choice(N, size=S, replace=False))


def _sample_batch(shard: Batch, size: int, rng: np.random.Generator) -> Batch:
    return shard.take(rng.integers(0, len(shard), size=size))


def client_round(
    task: FederatedTask,
    client: int,
    x_init: list,
    theta_init: PreconditionerState | None,
    g_G: list,
    cfg: RoundConfig,
    rng: np.random.Generator,
    engine: str = "fedpac",
    lr: float | None = None,
    round_idx: int = 0,
) -> ClientUpdate:
    """K local steps on one client, returning Delta x and the end-of-round state.

    ``theta_init`` is the state the round starts from; ``None`` means a zero
    state. ``engine="fedavg"`` ignores it and steps along the raw gradient.
    """
    model = task.model
    shard = task.client_shards[client]
    lr = cfg.local_lr if lr is None else lr
    align, correct = engine_flags(engine, cfg)
    beta = cfg.beta_mix
    wd = cfg.weight_decay
    second_order = engine != "fedavg"
    x = [p.copy() for p in x_init]

    state = None
    if second_order:
        state = theta_init if theta_init is not None else init_state(cfg.optimizer, model.shapes(), cfg.optimizer_hyper())

    for k in range(cfg.local_steps):
        batch = _sample_batch(shard, cfg.batch_size, rng)
        rep = model.loss_grad(x, batch)
        if not np.isfinite(rep.loss) or rep.loss > DIVERGENCE_LOSS:
            raise DivergenceError(f"divergence at round {round_idx} step {k} on client {client}: loss={rep.loss}",
                                  round=round_idx, step=k, client=client)
        grads = rep.grads
        if second_order:
            xk = x
            oracle = (lambda v, xk=xk, batch=batch: model.hvp(xk, batch, v)) if state.variant == "sophia" else None
            state = update_state(state, grads, oracle, rng)
            direction = apply_precond(state, grads)
        else:
            direction = grads
        if correct:
            direction = [(1.0 - beta) * d + beta * gg for d, gg in zip(direction, g_G)]
        x = [p - lr * (d + wd * p) for p, d in zip(x, direction)]
        if not all(np.all(np.isfinite(p)) for p in x):
            raise DivergenceError(f"divergence at round {round_idx} step {k} on client {client}: non-finite params",
                                  round=round_idx, step=k, client=client)

    delta = [p - p0 for p, p0 in zip(x, x_init)]
    param_bytes = 8 * sum(p.size for p in x)
    upload = None
    upload_bytes = param_bytes
    if second_order and align:
        if cfg.compress is not None:
            upload, nbytes = compress_state(state, cfg.compress)
        else:
            upload, nbytes = state, state_nbytes(state)
        upload_bytes += nbytes
    return ClientUpdate(client, delta, state, upload, upload_bytes)


def server_aggregate(updates: list[ClientUpdate], server: ServerState, cfg: RoundConfig,
                     engine: str = "fedpac", lr: float | None = None) -> ServerState:
    """Average deltas into x, rebuild g_G, and average uploaded states when aligning."""
    if not updates:
        raise ValueError("no client updates to aggregate")
    lr = cfg.local_lr if lr is None else lr
    S = len(updates)
    K = cfg.local_steps
    shapes = [p.shape for p in server.x]
    for u in updates:
        if [d.shape for d in u.delta_x] != shapes:
            raise ValueError(f"shape mismatch in update from client {u.client}")
    total = [np.sum(np.stack([u.delta_x[j] for u in updates]), axis=0) for j in range(len(shapes))]
    mean = [t / S for t in total]
    x_new = [p + cfg.server_lr * m for p, m in zip(server.x, mean)]
    g_new = [-t / (S * K * lr) for t in total]

    theta = server.theta_global
    align, _ = engine_flags(engine, cfg)
    if align and engine != "fedavg":
        received = []
        for u in updates:
            if isinstance(u.upload, CompressedState):
                received.append(decompress_state(u.upload, server.theta_global))
            elif u.upload is not None:
                received.append(u.upload)
        if received:
            theta = state_average(received)
    return ServerState(x_new, g_new, theta, server.round + 1, server.client_states)


def global_objective(task: FederatedTask, x: list):
    """Loss and gradient of F = (1/N) sum_i F_i over full client shards."""
    loss = 0.0
    grads = [np.zeros_like(p) for p in x]
    for shard in task.client_shards:
        rep = task.model.loss_grad(x, shard)
        loss += rep.loss
        grads = [g + h for g, h in zip(grads, rep.grads)]
    n = task.n_clients
    return loss / n, [g / n for g in grads]


def _grad_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def initial_server(task: FederatedTask, cfg: RoundConfig) -> ServerState:
    x0 = task.model.init_params(make_rng(cfg.seed, _INIT_TAG))
    return ServerState(x0, [np.zeros_like(p) for p in x0], None, 0)


def write_checkpoint(server: ServerState, path) -> None:
    """Server params followed by the serialized global state (if any)."""
    buf = bytearray(b"FPCK")
    buf += int(server.round).to_bytes(8, "little")
    buf += len(server.x).to_bytes(4, "little")
    for p in server.x:
        write_tensor(buf, p)
    if server.theta_global is not None:
        buf += serialize_state(server.theta_global)
    Path(path).write_bytes(bytes(buf))


def run_federated(task: FederatedTask, cfg: RoundConfig, engine: str = "fedpac",
                  checkpoint_dir=None, on_round=None) -> list[RoundReport]:
    """Run ``cfg.rounds`` rounds and return one report per round.

    Reports evaluate the post-aggregation model x^{r+1}. Drift is measured over
    the participating clients' end-of-round states.
    """
    if engine not in ENGINES:
        raise ValueError(f"unknown engine {engine!r}")
    if cfg.n_clients != task.n_clients:
        raise ValueError(f"config has {cfg.n_clients} clients, task has {task.n_clients}")
    server = initial_server(task, cfg)
    align, correct = engine_flags(engine, cfg)
    second_order = engine != "fedavg"
    _, down = comm_cost("fedpac" if engine == "fedpac" else engine, cfg.optimizer if second_order else None,
                        task.model.shapes(), align_states=align, correct_updates=correct, convention="exact")
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    reports = []
    try:
        for r in range(cfg.rounds):
            t0 = time.perf_counter()
            lr = cfg.lr_at(r)
            ids = sample_clients(cfg.n_clients, cfg.participation, r, cfg.seed)

            def work(i, server=server, lr=lr, r=r):
                if align:
                    theta0 = server.theta_global
                elif cfg.persist_local_state:
                    theta0 = server.client_states.get(i)
                else:
                    theta0 = None
                return client_round(task, i, server.x, theta0, server.g_G, cfg, make_rng(cfg.seed, _CLIENT_TAG, r, i),
                                    engine=engine, lr=lr, round_idx=r)

            try:
                updates = list(pool.map(work, ids)) if pool else [work(i) for i in ids]
            except DivergenceError as err:
                err.round = r
                raise
            server = server_aggregate(updates, server, cfg, engine, lr)
            if cfg.persist_local_state and not align and second_order:
                states = dict(server.client_states)
                for u in updates:
                    states[u.client] = u.theta_final
                server.client_states = states

            train_loss, grads = global_objective(task, server.x)
            if not np.isfinite(train_loss) or train_loss > DIVERGENCE_LOSS:
                raise DivergenceError(f"divergence after aggregation in round {r}: loss={train_loss}", round=r)
            test_loss, test_acc = evaluate(task.model, server.x, task.test_set)
            drift_f = drift_s = None
            if second_order:
                drift_f, drift_s = drift_report([u.theta_final for u in updates])
            report = RoundReport(
                round=r,
                train_loss=train_loss,
                test_loss=test_loss,
                test_acc=test_acc,
                grad_norm=_grad_norm(grads),
                drift_frobenius=drift_f,
                drift_spectral_per_layer=drift_s,
                upload_bytes=sum(u.upload_bytes for u in updates),
                download_bytes=down * len(ids),
                wall_seconds=time.perf_counter() - t0,
            )
            reports.append(report)
            if checkpoint_dir is not None:
                write_checkpoint(server, Path(checkpoint_dir) / f"round_{r:04d}.ckpt")
            if on_round is not None:
                on_round(report, server)
    finally:
        if pool:
            pool.shutdown()
    return reports


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("FEDPAC_THREADS", "1")))
    except ValueError:
        return 1
