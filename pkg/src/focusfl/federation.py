"""Federated rounds: credibility scoring, weighted aggregation, baselines.

One round of the credibility-weighted protocol ("focus") does, in order:

1. broadcast the global model; every participant runs local SGD on its shard;
2. the server scores each returned model on its benchmark set (``LS``);
3. the server aggregates the returned models using the weights computed at
   the *previous* round (stale-weight schedule);
4. each participant scores the fresh global model on its own shard and
   reports that single scalar back (``LL``);
5. the server forms the mutual cross-entropy ``E = LS + LL`` per client,
   turns it into credibilities ``C = 1 - softmax(alpha * E)``, and computes
   the weights ``W_k = n_k C_k / sum_i n_i C_i`` to be used next round.

Every participant therefore exchanges exactly two logical messages per
round: one model down, one model (plus, for "focus", one scalar) up.

The FedAvg baseline (:func:`fedavg_round`) skips steps 2, 4, and 5 and
always aggregates with the fixed sample-proportional weights.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import learner
from .data import Dataset
from .errors import (
    DegenerateCredibilityError,
    InvalidInputError,
    RoundError,
    TrainingDivergenceError,
)
from .learner import ArchSpec, ModelParams, SgdConfig

# Magic prefix of the binary model checkpoint container (version 1).
MODEL_MAGIC = b"FOCUSMP1"

CRED_CSV_HEADER = "round,client,ls,ll,e,c,w"


def _frozen_f64(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).copy()
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ClientState:
    """One participant: an id, its private shard, and its latest local model."""

    id: int
    data: Dataset
    local_model: ModelParams

    def __post_init__(self):
        if self.data.n < 1:
            raise InvalidInputError(f"client {self.id} has an empty data shard")
        arch = self.local_model.arch
        if self.data.dim != arch.input_dim or self.data.num_classes != arch.num_classes:
            raise InvalidInputError(
                f"client {self.id}: shard shape ({self.data.dim} features, "
                f"{self.data.num_classes} classes) does not match the model "
                f"({arch.input_dim} features, {arch.num_classes} classes)"
            )

    @property
    def n_k(self) -> int:
        """Sample count of this client's shard."""
        return self.data.n


@dataclass(frozen=True)
class ServerState:
    """The server side of the protocol between rounds.

    ``weights`` and ``credibilities`` are per-client vectors aligned with the
    client list by position.  ``weights`` always sums to 1; ``round`` counts
    completed rounds (0 before any round has run).  ``standardize_e`` selects
    whether mutual cross-entropies are divided by their per-round mean before
    the softmax (the default) or fed in raw.
    """

    global_model: ModelParams
    benchmark: Dataset
    weights: np.ndarray
    credibilities: np.ndarray
    alpha: float = 1.0
    reduction: str = "mean"
    standardize_e: bool = True
    round: int = 0

    def __post_init__(self):
        weights = _frozen_f64(self.weights, "weights")
        creds = _frozen_f64(self.credibilities, "credibilities")
        if weights.shape != creds.shape or weights.size < 1:
            raise InvalidInputError(
                f"weights {weights.shape} and credibilities {creds.shape} must be "
                "equal-length and non-empty"
            )
        if np.any(weights < 0) or abs(float(weights.sum()) - 1.0) > 1e-9:
            raise InvalidInputError(
                f"weights must be non-negative and sum to 1, got sum {weights.sum()!r}"
            )
        if np.any(creds < 0) or np.any(creds > 1):
            raise InvalidInputError("credibilities must lie in [0, 1]")
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise InvalidInputError(f"alpha must be positive, got {self.alpha}")
        if self.reduction not in ("mean", "sum"):
            raise InvalidInputError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")
        if int(self.round) != self.round or self.round < 0:
            raise InvalidInputError(f"round must be a non-negative integer, got {self.round}")
        if self.benchmark.n < 1:
            raise InvalidInputError("benchmark set is empty")
        arch = self.global_model.arch
        if self.benchmark.dim != arch.input_dim or self.benchmark.num_classes != arch.num_classes:
            raise InvalidInputError("benchmark set does not match the global model's architecture")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "credibilities", creds)

    @property
    def num_clients(self) -> int:
        return self.weights.size


@dataclass(frozen=True)
class CredReport:
    """Per-client scoring record produced by one "focus" round.

    Arrays are aligned with ``client_ids`` (the positions of that round's
    participants).  ``e`` is exactly ``ls + ll``; ``w`` holds the stored
    next-round weights, which sum to 1 when every client participated.
    """

    client_ids: Tuple[int, ...]
    ls: np.ndarray
    ll: np.ndarray
    e: np.ndarray
    c: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        ids = tuple(int(i) for i in self.client_ids)
        if len(set(ids)) != len(ids) or not ids:
            raise InvalidInputError(f"client_ids must be non-empty and unique, got {ids}")
        object.__setattr__(self, "client_ids", ids)
        arrays = {}
        for name in ("ls", "ll", "e", "c", "w"):
            arr = _frozen_f64(getattr(self, name), name)
            if arr.shape != (len(ids),):
                raise InvalidInputError(f"{name} has shape {arr.shape}, expected ({len(ids)},)")
            arrays[name] = arr
        if np.any(arrays["ls"] < 0) or np.any(arrays["ll"] < 0):
            raise InvalidInputError("cross-entropy scores must be non-negative")
        if not np.array_equal(arrays["e"], arrays["ls"] + arrays["ll"]):
            raise InvalidInputError("e must equal ls + ll exactly as computed")
        if np.any(arrays["c"] < 0) or np.any(arrays["c"] > 1):
            raise InvalidInputError("credibilities must lie in [0, 1]")
        if np.any(arrays["w"] < 0) or float(arrays["w"].sum()) > 1.0 + 1e-9:
            raise InvalidInputError("weights must be non-negative and sum to at most 1")
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class MessageRecord:
    """One logical protocol message, for communication accounting.

    ``param_count`` is the number of model parameters carried;
    ``scalar_count`` is the number of extra standalone scalars (the local
    cross-entropy report rides up with the model as one scalar).
    """

    round: int
    direction: str  # "down" (server -> client) or "up" (client -> server)
    client: int
    param_count: int
    scalar_count: int


def model_test(m: ModelParams, d: Dataset, reduction: str = "mean") -> float:
    """Cross-entropy of model ``m`` on dataset ``d``.

    Computes ``-log p(y_i | x_i)`` with probabilities clamped at
    ``learner.PROB_FLOOR``, reduced by ``reduction`` ("mean" averages over
    rows, "sum" adds them up).  This is the scoring primitive used both
    server-side (benchmark) and client-side (own shard).
    """
    if reduction not in ("mean", "sum"):
        raise InvalidInputError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    if d.n < 1:
        raise InvalidInputError("cannot score an empty dataset")
    probs = learner.predict_proba(m, d.features)
    if d.num_classes != m.arch.num_classes:
        raise InvalidInputError(
            f"dataset has {d.num_classes} classes but the model expects {m.arch.num_classes}"
        )
    picked = np.clip(probs[np.arange(d.n), d.labels], learner.PROB_FLOOR, None)
    loss = -float(np.log(picked).sum())
    if reduction == "mean":
        loss /= d.n
    return loss


def mutual_cross_entropy(ls: float, ll: float) -> float:
    """Combine the two scoring directions into one evaluation score.

    ``ls`` is the client's model scored on the server's benchmark; ``ll`` is
    the global model scored on the client's shard.  Their sum is low only
    when both directions agree the data and model are sound.
    """
    ls = float(ls)
    ll = float(ll)
    if not (math.isfinite(ls) and math.isfinite(ll)):
        raise InvalidInputError(f"cross-entropy terms must be finite, got ls={ls}, ll={ll}")
    if ls < 0 or ll < 0:
        raise InvalidInputError(f"cross-entropy terms must be non-negative, got ls={ls}, ll={ll}")
    return ls + ll


def credibilities(e, alpha: float = 1.0) -> np.ndarray:
    """Map evaluation scores to credibilities: ``C = 1 - softmax(alpha * e)``.

    Higher ``e`` (worse agreement) means lower credibility.  The softmax is
    computed with the usual max-shift; when every score is equal the result
    is exactly ``1 - 1/K`` per client.  A single client is fully credible
    (``C = (1,)``) since there is no one to compare against.
    """
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 1 or e.size == 0:
        raise InvalidInputError(f"e must be a non-empty 1-D vector, got shape {e.shape}")
    if not np.all(np.isfinite(e)):
        raise InvalidInputError("e contains non-finite entries")
    if not (math.isfinite(alpha) and alpha > 0):
        raise InvalidInputError(f"alpha must be positive, got {alpha}")
    if e.size == 1:
        return np.ones(1)
    z = alpha * e
    z = z - z.max()
    s = np.exp(z)
    s = s / s.sum()
    return 1.0 - s


def aggregation_weights(n, c) -> np.ndarray:
    """Sample-size-and-credibility weights ``W_k = n_k C_k / sum_i n_i C_i``.

    When all credibilities are equal this reduces exactly to the
    sample-proportional FedAvg weights ``n_k / sum_i n_i`` (the equal factor
    is cancelled symbolically, not numerically).  If every product is zero
    the weights are undefined and :class:`DegenerateCredibilityError` is
    raised.
    """
    n = np.asarray(n, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if n.shape != c.shape or n.ndim != 1 or n.size == 0:
        raise InvalidInputError(
            f"n {n.shape} and c {c.shape} must be equal-length non-empty vectors"
        )
    if np.any(n <= 0) or np.any(n != np.floor(n)):
        raise InvalidInputError("sample counts must be positive integers")
    if not np.all(np.isfinite(c)) or np.any(c < 0):
        raise InvalidInputError("credibilities must be finite and non-negative")
    raw = n * c
    denom = float(raw.sum())
    if denom <= 0.0:
        raise DegenerateCredibilityError(
            f"all {n.size} credibility-weighted sample counts are zero; weights are undefined"
        )
    if np.all(c == c[0]):
        return n / n.sum()
    return raw / denom


def aggregate(models: Sequence[ModelParams], w) -> ModelParams:
    """Coordinatewise convex combination of parameter vectors.

    All models must share one architecture; ``w`` must be non-negative and
    sum to 1 (within 1e-6).  Every output coordinate lies between the
    per-coordinate min and max of the inputs.
    """
    if not models:
        raise InvalidInputError("aggregate requires at least one model")
    arch = models[0].arch
    if any(m.arch != arch for m in models):
        raise InvalidInputError("all models must share one architecture")
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (len(models),):
        raise InvalidInputError(f"w has shape {w.shape}, expected ({len(models)},)")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise InvalidInputError("aggregation weights must be finite and non-negative")
    if abs(float(w.sum()) - 1.0) > 1e-6:
        raise InvalidInputError(f"aggregation weights must sum to 1, got {w.sum()!r}")
    stacked = np.stack([m.values for m in models])
    return ModelParams(arch, (w[:, None] * stacked).sum(axis=0))


def init_server(
    global_model: ModelParams,
    benchmark: Dataset,
    clients: Sequence[ClientState],
    alpha: float = 1.0,
    reduction: str = "mean",
    standardize_e: bool = True,
) -> ServerState:
    """Server state before round 1.

    Initial weights are sample-proportional (``n_k / sum n``) since no
    scoring has happened yet; initial credibilities are the no-information
    value ``1 - 1/K`` (or 1 for a single client).
    """
    if not clients:
        raise InvalidInputError("at least one client is required")
    n = np.array([c.n_k for c in clients], dtype=np.float64)
    k = len(clients)
    creds = np.ones(k) if k == 1 else np.full(k, 1.0 - 1.0 / k)
    return ServerState(
        global_model=global_model,
        benchmark=benchmark,
        weights=n / n.sum(),
        credibilities=creds,
        alpha=alpha,
        reduction=reduction,
        standardize_e=standardize_e,
        round=0,
    )


def _check_round_args(
    server: ServerState, clients: Sequence[ClientState], participants: Optional[Sequence[int]]
) -> Tuple[int]:
    if len(clients) != server.num_clients:
        raise InvalidInputError(
            f"server tracks {server.num_clients} clients but {len(clients)} were given"
        )
    arch = server.global_model.arch
    for c in clients:
        if c.local_model.arch != arch:
            raise InvalidInputError(f"client {c.id} model architecture differs from the global model")
        if c.data.dim != arch.input_dim or c.data.num_classes != arch.num_classes:
            raise InvalidInputError(f"client {c.id} shard does not match the global model")
    if participants is None:
        return tuple(range(len(clients)))
    part = tuple(sorted(int(p) for p in participants))
    if not part or len(set(part)) != len(part):
        raise InvalidInputError(f"participants must be non-empty and unique, got {participants}")
    if part[0] < 0 or part[-1] >= len(clients):
        raise InvalidInputError(f"participants out of range for {len(clients)} clients: {part}")
    return part


def _train_participants(
    server: ServerState,
    clients: Sequence[ClientState],
    sgd: SgdConfig,
    part: Tuple[int, ...],
    message_log: Optional[List[MessageRecord]],
    t: int,
) -> List[ModelParams]:
    pcount = server.global_model.arch.parameter_count()
    locals_: List[ModelParams] = []
    for k in part:
        if message_log is not None:
            message_log.append(MessageRecord(t, "down", k, pcount, 0))
        locals_.append(learner.client_update(server.global_model, clients[k].data, sgd))
    return locals_


def focus_round(
    server: ServerState,
    clients: Sequence[ClientState],
    sgd: SgdConfig,
    participants: Optional[Sequence[int]] = None,
    message_log: Optional[List[MessageRecord]] = None,
) -> Tuple[ServerState, Tuple[ClientState, ...], CredReport]:
    """Run one credibility-weighted round; states are inputs, not mutated.

    Aggregation uses the weights stored on ``server`` (computed at the end of
    the previous round); the weights computed here are stored for the *next*
    round.  With partial participation, only participants train and are
    re-scored; their previous collective weight mass is redistributed among
    them for aggregation, and absent clients keep their stored weight and
    credibility.

    Training divergence and degenerate credibilities are re-raised as
    :class:`RoundError` with this round's 1-based index attached.
    """
    part = _check_round_args(server, clients, participants)
    t = server.round + 1
    pcount = server.global_model.arch.parameter_count()
    try:
        local_models = _train_participants(server, clients, sgd, part, message_log, t)

        ls = np.array([model_test(m, server.benchmark, server.reduction) for m in local_models])

        w_prev = server.weights[list(part)]
        if len(part) == len(clients):
            # Full participation: the stored weights are used exactly.
            mass = 1.0
            w_agg = w_prev
        else:
            mass = float(w_prev.sum())
            if mass <= 0.0:
                raise DegenerateCredibilityError(
                    f"participants {part} carry no aggregation weight from the previous round"
                )
            w_agg = w_prev / mass
        new_global = aggregate(local_models, w_agg)

        ll = np.empty(len(part))
        for j, k in enumerate(part):
            ll[j] = model_test(new_global, clients[k].data, server.reduction)
            if message_log is not None:
                message_log.append(MessageRecord(t, "up", k, pcount, 1))

        e = np.array([mutual_cross_entropy(ls[j], ll[j]) for j in range(len(part))])
        e_mean = float(e.mean())
        e_scaled = e / e_mean if (server.standardize_e and e_mean > 0) else e
        c_part = credibilities(e_scaled, server.alpha)
        n_part = np.array([clients[k].n_k for k in part], dtype=np.float64)
        w_part = aggregation_weights(n_part, c_part) * mass
    except (TrainingDivergenceError, DegenerateCredibilityError) as exc:
        raise RoundError(f"round {t} failed: {exc}", round_index=t) from exc

    new_weights = np.array(server.weights)
    new_creds = np.array(server.credibilities)
    new_weights[list(part)] = w_part
    new_creds[list(part)] = c_part
    new_server = replace(
        server, global_model=new_global, weights=new_weights, credibilities=new_creds, round=t
    )
    new_clients = list(clients)
    for j, k in enumerate(part):
        new_clients[k] = replace(clients[k], local_model=local_models[j])
    report = CredReport(client_ids=part, ls=ls, ll=ll, e=e, c=c_part, w=w_part)
    return new_server, tuple(new_clients), report


def fedavg_round(
    server: ServerState,
    clients: Sequence[ClientState],
    sgd: SgdConfig,
    participants: Optional[Sequence[int]] = None,
    message_log: Optional[List[MessageRecord]] = None,
) -> Tuple[ServerState, Tuple[ClientState, ...], None]:
    """Run one FedAvg round: train locally, average by sample counts.

    No scoring happens in either direction, so the uplink carries the model
    and nothing else, and the stored weights never change.
    """
    part = _check_round_args(server, clients, participants)
    t = server.round + 1
    pcount = server.global_model.arch.parameter_count()
    try:
        local_models = _train_participants(server, clients, sgd, part, message_log, t)
    except TrainingDivergenceError as exc:
        raise RoundError(f"round {t} failed: {exc}", round_index=t) from exc
    n_part = np.array([clients[k].n_k for k in part], dtype=np.float64)
    new_global = aggregate(local_models, n_part / n_part.sum())
    for k in part:
        if message_log is not None:
            message_log.append(MessageRecord(t, "up", k, pcount, 0))
    new_server = replace(server, global_model=new_global, round=t)
    new_clients = list(clients)
    for j, k in enumerate(part):
        new_clients[k] = replace(clients[k], local_model=local_models[j])
    return new_server, tuple(new_clients), None


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_model(m: ModelParams, path: str) -> None:
    """Write a model checkpoint (magic ``FOCUSMP1``).

    Layout, all little-endian: magic, u32 input_dim, u32 hidden layer count,
    u32 per hidden width, u32 num_classes, then the flat float64 vector.
    """
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        arch = m.arch
        fh.write(struct.pack("<II", arch.input_dim, len(arch.hidden_dims)))
        for h in arch.hidden_dims:
            fh.write(struct.pack("<I", h))
        fh.write(struct.pack("<I", arch.num_classes))
        fh.write(m.values.astype("<f8").tobytes())


def load_model(path: str) -> ModelParams:
    """Read a checkpoint written by :func:`save_model`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MODEL_MAGIC) + 12 or blob[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise InvalidInputError(f"{path}: not a model checkpoint (bad magic or truncated)")
    offset = len(MODEL_MAGIC)
    input_dim, n_hidden = struct.unpack_from("<II", blob, offset)
    offset += 8
    if len(blob) < offset + 4 * (n_hidden + 1):
        raise InvalidInputError(f"{path}: truncated checkpoint header")
    hidden = struct.unpack_from(f"<{n_hidden}I", blob, offset) if n_hidden else ()
    offset += 4 * n_hidden
    (num_classes,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    arch = ArchSpec(input_dim=input_dim, hidden_dims=tuple(hidden), num_classes=num_classes)
    expected = offset + arch.parameter_count() * 8
    if len(blob) != expected:
        raise InvalidInputError(
            f"{path}: checkpoint is {len(blob)} bytes, expected {expected} for {arch.layer_dims}"
        )
    values = np.frombuffer(blob, dtype="<f8", offset=offset)
    return ModelParams(arch, values)


def cred_csv_rows(round_index: int, report: CredReport) -> List[str]:
    """CSV rows ``round,client,ls,ll,e,c,w`` for one round's report."""
    rows = []
    for j, k in enumerate(report.client_ids):
        rows.append(
            ",".join(
                [str(int(round_index)), str(int(k))]
                + [repr(float(v)) for v in (report.ls[j], report.ll[j], report.e[j], report.c[j], report.w[j])]
            )
        )
    return rows
