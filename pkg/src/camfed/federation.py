"""Federated round engine: partitioned local updates, weighted delta
aggregation, client selection, top-k compression and straggler handling.

One round = broadcast the shared slice -> selected clients train locally
(two learning rates over the private/public split, from a single backward
pass by default) -> upload compressed deltas -> drop stragglers -> weighted
aggregation of survivors. A client's private slice never leaves the client:
deltas carry flat public indices only, which makes that auditable.

Everything is a pure function of (configuration, master seed): every random
draw comes from a stream keyed by round and purpose, so client-level
parallelism cannot change results.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .masking import amcm_mask
from .metrics import iou
from .model import ModelConfig, PartitionPolicy, ToyBevt, init_params, split_params
from .netsim import CommLedger, NetworkProfile, StragglerPlan
from .optim import AdamW, NonFiniteGradientError, sgd_step
from .params import ParamStore
from .seeding import derive_rng, derive_seed
from .world import CameraRig, ClientDataset

VALUE_BITS = 64
INDEX_BITS = 32


@dataclass
class Delta:
    """A client's public-slice update, addressed by flat parameter index."""
    indices: np.ndarray      # int64, strictly increasing
    values: np.ndarray       # float64, parallel to indices
    dense: bool
    bits_upload: int

    def __post_init__(self):
        if self.indices.shape != self.values.shape:
            raise ValueError("indices and values must be parallel")
        if self.indices.size > 1 and not np.all(np.diff(self.indices) > 0):
            raise ValueError("delta indices must be strictly increasing")


def dense_delta(public_idx: np.ndarray, diff: np.ndarray) -> Delta:
    return Delta(indices=public_idx.astype(np.int64), values=diff,
                 dense=True, bits_upload=VALUE_BITS * int(diff.size))


def compress_topk(delta: Delta, retention: float) -> Delta:
    """Keep the ceil(retention * n) largest-magnitude entries.

    Ties break toward the lower index. retention == 1 is a dense
    passthrough.
    """
    if not (0.0 < retention <= 1.0):
        raise ValueError("retention must be in (0, 1]")
    if retention == 1.0:
        return delta
    n = delta.values.size
    k = int(math.ceil(retention * n))
    # lexsort uses the last key as primary: magnitude desc, then index asc
    order = np.lexsort((delta.indices, -np.abs(delta.values)))
    keep = np.sort(order[:k])
    return Delta(indices=delta.indices[keep], values=delta.values[keep],
                 dense=False, bits_upload=k * (INDEX_BITS + VALUE_BITS))


def secure_agg_stub(deltas):
    """Identity transport hook standing in for a secure-aggregation protocol.

    Exists so compress -> secure -> aggregate stays a single interception
    pipeline; the engine's telemetry marks it as a stub.
    """
    return list(deltas)


def client_selection(client_ids, m: int, rng: np.random.Generator):
    """Uniform sample without replacement of m clients, returned sorted."""
    ids = sorted(client_ids)
    if not (1 <= m <= len(ids)):
        raise ValueError(f"selection size {m} out of range 1..{len(ids)}")
    if m == len(ids):
        return ids
    chosen = rng.choice(np.asarray(ids), size=m, replace=False)
    return sorted(int(c) for c in chosen)


def lr_schedule(round_no: int, base_lr: float, warmup_rounds: int,
                total_rounds: int) -> float:
    """Constant through warm-up, then cosine annealing down to zero at T."""
    if round_no > total_rounds:
        raise ValueError("round_no exceeds total_rounds")
    if total_rounds <= warmup_rounds or round_no <= warmup_rounds:
        return base_lr
    progress = (round_no - warmup_rounds) / (total_rounds - warmup_rounds)
    return base_lr * (1.0 + math.cos(math.pi * progress)) / 2.0


def aggregate(entries, base_values: np.ndarray, public_idx: np.ndarray,
              normalization: str = "selected",
              total_weight: float | None = None) -> np.ndarray:
    """Weighted-mean update of the shared slice from client deltas.

    entries: (client_id, Delta, weight) triples; summation runs in client-id
    order so results do not depend on arrival order. With
    normalization="selected", weights are divided by the selected subset's
    weight sum, which leaves the base point fixed when all deltas vanish.
    normalization="all_clients" divides by `total_weight` (the whole
    registry) and scales the base shared slice by the participating weight
    fraction, i.e. a literal subset-weighted average of the client
    parameter vectors; with partial participation that average is pulled
    toward zero, which is why it is not the default.
    """
    if not entries:
        raise ValueError("aggregate needs at least one delta")
    if any(w <= 0 for _, _, w in entries):
        raise ValueError("aggregation weights must be positive")
    entries = sorted(entries, key=lambda e: e[0])
    selected_weight = float(sum(w for _, _, w in entries))
    if normalization == "selected":
        denom = selected_weight
    elif normalization == "all_clients":
        if total_weight is None:
            raise ValueError("total_weight required for all_clients mode")
        denom = float(total_weight)
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    acc = np.zeros_like(base_values)
    for _, delta, weight in entries:
        acc[delta.indices] += (weight / denom) * delta.values
    out = base_values.copy()
    if normalization == "all_clients":
        out[public_idx] *= selected_weight / denom
    out[public_idx] += acc[public_idx]
    return out


@dataclass
class ClientState:
    client_id: int
    rig: CameraRig
    dataset: ClientDataset
    n_points: int                       # aggregation weight
    seed: int
    local_epochs: int = 1
    batch_size: int = 4
    private_values: np.ndarray | None = None
    mask: np.ndarray | None = None
    optimizer: AdamW | None = None
    first_selected_round: int | None = None

    def __post_init__(self):
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("local_epochs and batch_size must be >= 1")


@dataclass
class RoundRecord:
    round: int
    client_id: int
    selected: bool
    straggler: bool
    train_loss: float
    val_iou: float
    bits_up: int
    bits_down: int
    grad_norm: float = float("nan")
    aborted: bool = False


@dataclass
class EngineOptions:
    optimizer: str = "adamw"                 # "adamw" | "sgd"
    lr_u: float = 5e-3
    lr_v: float = 5e-3
    warmup_rounds: int = 0
    weight_normalization: str = "selected"   # "selected" | "all_clients"
    two_pass_updates: bool = False
    persist_optimizer_state: bool = False
    count_masked_query_cells: bool = True
    topk_retention: float = 1.0
    select_m: int | None = None
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    use_amcm: bool = True
    amcm_max_range: float | None = None

    def __post_init__(self):
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError("optimizer must be 'adamw' or 'sgd'")


class FederationEngine:
    """Runs the communication rounds for one experiment."""

    def __init__(self, model_config: ModelConfig, policy: PartitionPolicy,
                 clients: list, total_rounds: int, master_seed: int,
                 options: EngineOptions | None = None,
                 network: NetworkProfile | None = None,
                 keep_deltas: bool = False):
        if not clients:
            raise ValueError("need at least one client")
        self.config = model_config
        self.policy = policy
        self.options = options or EngineOptions()
        self.network = network or NetworkProfile()
        self.total_rounds = total_rounds
        self.master_seed = master_seed
        self.clients = sorted(clients, key=lambda c: c.client_id)
        ids = [c.client_id for c in self.clients]
        if len(set(ids)) != len(ids):
            raise ValueError("client ids must be unique")

        self.store = init_params(model_config, derive_seed(master_seed, "init"))
        self.public_idx, self.private_idx = split_params(self.store, policy)
        self.round = 0
        self.ledger = CommLedger()
        self.records: list = []
        self.delta_log: list | None = [] if keep_deltas else None
        self.straggler_plan = StragglerPlan(self.network, ids, master_seed)
        self.hooks = {
            "secure_aggregation": "identity-stub",
            "compression": ("topk" if self.options.topk_retention < 1.0
                            else "none"),
        }

        for c in self.clients:
            if len(c.dataset.train) == 0:
                raise ValueError(f"client {c.client_id} has an empty train set")
            c.private_values = self.store.values[self.private_idx].copy()
            if c.mask is None:
                c.mask = (amcm_mask(c.rig, model_config.bev_grid,
                                    model_config.world_extent,
                                    self.options.amcm_max_range)
                          if self.options.use_amcm
                          else np.ones(model_config.bev_grid))

    # -- per-client bit accounting -------------------------------------------

    def _masked_query_param_idx(self, client: ClientState) -> np.ndarray:
        """Flat indices of bev_query rows whose cells are masked off."""
        off_cells = np.nonzero(client.mask.ravel() == 0.0)[0]
        if off_cells.size == 0:
            return np.empty(0, dtype=np.int64)
        base = self.store.slice_of("bev_query").start
        f = self.config.feat_dim
        return (base + (off_cells[:, None] * f +
                        np.arange(f)[None, :]).ravel()).astype(np.int64)

    def _bits_down(self, client: ClientState) -> int:
        n = self.public_idx.size
        if not self.options.count_masked_query_cells:
            n -= self._masked_query_param_idx(client).size
        return VALUE_BITS * int(n)

    def _bits_up(self, client: ClientState, delta: Delta) -> int:
        if self.options.count_masked_query_cells:
            return delta.bits_upload
        excluded = self._masked_query_param_idx(client)
        counted = int(np.sum(~np.isin(delta.indices, excluded)))
        per_entry = VALUE_BITS + (0 if delta.dense else INDEX_BITS)
        return counted * per_entry

    # -- local training -------------------------------------------------------

    def _build_local_store(self, client: ClientState) -> ParamStore:
        values = self.store.values.copy()
        values[self.private_idx] = client.private_values
        return ParamStore([(s.name, s.length) for s in self.store.segments],
                          values=values)

    def _make_optimizer(self, client: ClientState) -> AdamW | None:
        if self.options.optimizer != "adamw":
            return None
        if self.options.persist_optimizer_state and client.optimizer is not None:
            return client.optimizer
        opt = AdamW(self.store.n, betas=self.options.adam_betas,
                    eps=self.options.adam_eps,
                    weight_decay=self.options.weight_decay)
        if self.options.persist_optimizer_state:
            client.optimizer = opt
        return opt

    def _step(self, local: ParamStore, opt: AdamW | None, lr: float,
              idx: np.ndarray) -> None:
        if idx.size == 0:
            return
        if opt is None:
            sgd_step(local, lr=lr, idx=idx)
        else:
            opt.step(local, lr=lr, idx=idx)

    def _batch_backward(self, model: ToyBevt, client: ClientState,
                        batch) -> float:
        model.zero_grads()
        logits = model.forward_batch([p.views for p in batch], client.rig,
                                     client.mask)
        losses = [model.loss(lg, p.bev_gt, client.mask)
                  for lg, p in zip(logits, batch)]
        total = ad.scale(ad.add_n(losses), 1.0 / len(losses))
        model.backward(total, client.mask)
        return total.item()

    def local_update(self, client: ClientState, lr_u: float, lr_v: float,
                     round_no: int):
        """One client's epochs for the round; returns (Delta, loss, grad_norm).

        The two-stage update applies lr_v to the private slice and lr_u to
        the public slice. By default both stages share one backward pass;
        with two_pass_updates the gradient is recomputed after the private
        stage.
        """
        if len(client.dataset.train) == 0:
            raise ValueError("empty dataset")
        local = self._build_local_store(client)
        model = ToyBevt(self.config, local)
        opt = self._make_optimizer(client)
        rng = derive_rng(self.master_seed, "batch", round_no, client.seed)
        train = client.dataset.train
        losses, grad_norms = [], []
        for _ in range(client.local_epochs):
            order = rng.permutation(len(train))
            for lo in range(0, len(order), client.batch_size):
                batch = [train[i] for i in order[lo:lo + client.batch_size]]
                loss = self._batch_backward(model, client, batch)
                if not math.isfinite(loss):
                    raise NonFiniteGradientError("non-finite training loss")
                losses.append(loss)
                grad_norms.append(float(np.linalg.norm(local.grads)))
                self._step(local, opt, lr_v, self.private_idx)
                if self.options.two_pass_updates:
                    self._batch_backward(model, client, batch)
                self._step(local, opt, lr_u, self.public_idx)
        diff = local.values[self.public_idx] - self.store.values[self.public_idx]
        client.private_values = local.values[self.private_idx].copy()
        delta = dense_delta(self.public_idx, diff)
        return delta, float(np.mean(losses)), float(np.mean(grad_norms))

    # -- evaluation -----------------------------------------------------------

    def personalized_values(self, client: ClientState) -> np.ndarray:
        values = self.store.values.copy()
        values[self.private_idx] = client.private_values
        return values

    def evaluate_client(self, client: ClientState) -> float:
        """Mean IoU of the client's personalized model on its test split."""
        if not client.dataset.test:
            return float("nan")
        local = ParamStore([(s.name, s.length) for s in self.store.segments],
                           values=self.personalized_values(client))
        model = ToyBevt(self.config, local)
        scores = []
        test = client.dataset.test
        for lo in range(0, len(test), 16):   # chunked to bound graph size
            chunk = test[lo:lo + 16]
            logits = model.forward_batch([p.views for p in chunk],
                                         client.rig, client.mask)
            scores.extend(iou(lg.data, p.bev_gt, client.mask)
                          for lg, p in zip(logits, chunk))
        return float(np.mean(scores))

    # -- the round loop ---------------------------------------------------------

    def run_round(self, workers: int = 1) -> list:
        """Advance one communication round; returns this round's records."""
        if self.round >= self.total_rounds:
            raise ValueError("experiment already ran its total_rounds")
        t = self.round + 1
        opts = self.options
        lr_u = lr_schedule(t, opts.lr_u, opts.warmup_rounds, self.total_rounds)
        lr_v = lr_schedule(t, opts.lr_v, opts.warmup_rounds, self.total_rounds)

        ids = [c.client_id for c in self.clients]
        m = opts.select_m if opts.select_m is not None else len(ids)
        selected = client_selection(ids, m, derive_rng(self.master_seed,
                                                       "select", t))
        selected_set = set(selected)
        by_id = {c.client_id: c for c in self.clients}
        for cid in selected:
            if by_id[cid].first_selected_round is None:
                by_id[cid].first_selected_round = t

        def work(cid):
            try:
                return cid, self.local_update(by_id[cid], lr_u, lr_v, t), None
            except NonFiniteGradientError as err:
                return cid, None, err

        if workers > 1 and len(selected) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = dict()
                for cid, payload, err in pool.map(work, selected):
                    results[cid] = (payload, err)
        else:
            results = {}
            for cid in selected:
                _, payload, err = work(cid)
                results[cid] = (payload, err)

        aborted = {cid for cid, (payload, err) in results.items()
                   if err is not None}
        uploaders = [cid for cid in selected if cid not in aborted]
        survivors = self.straggler_plan.survivors(uploaders, t)
        survivor_set = set(survivors)

        deltas = {}
        for cid in uploaders:
            delta, _, _ = results[cid][0]
            if opts.topk_retention < 1.0:
                delta = compress_topk(delta, opts.topk_retention)
            deltas[cid] = delta

        transported = secure_agg_stub([deltas[cid] for cid in survivors])
        entries = [(cid, d, float(by_id[cid].n_points))
                   for cid, d in zip(survivors, transported)]
        if self.delta_log is not None:
            self.delta_log.extend((t, cid, d) for cid, d, _ in entries)

        if entries:
            self.store.values = aggregate(
                entries, self.store.values, self.public_idx,
                normalization=opts.weight_normalization,
                total_weight=float(sum(c.n_points for c in self.clients)))

        records = []
        for c in self.clients:
            cid = c.client_id
            sel = cid in selected_set
            bits_down = self._bits_down(c) if sel else 0
            is_straggler = sel and cid not in survivor_set and cid not in aborted
            bits_up = (self._bits_up(c, deltas[cid])
                       if sel and cid in survivor_set else 0)
            if sel:
                self.ledger.account(t, cid, bits_up, bits_down)
            if sel and cid not in aborted:
                _, loss, gnorm = results[cid][0]
            else:
                loss, gnorm = float("nan"), float("nan")
            records.append(RoundRecord(
                round=t, client_id=cid, selected=sel, straggler=is_straggler,
                train_loss=loss, val_iou=self.evaluate_client(c),
                bits_up=bits_up, bits_down=bits_down, grad_norm=gnorm,
                aborted=cid in aborted))
        self.records.extend(records)
        self.round = t
        return records

    def run(self, workers: int = 1, on_round=None) -> list:
        """Run rounds until total_rounds or the bit budget is exhausted.

        `on_round(engine)` fires after each completed round (checkpointing,
        progress reporting).
        """
        while self.round < self.total_rounds:
            self.run_round(workers=workers)
            if on_round is not None:
                on_round(self)
            if self.ledger.over_budget(self.network.bits_budget):
                break
        return self.records
