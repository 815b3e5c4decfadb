"""Server side: weighted averaging, SNR-driven pruning, broadcast."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import one_hot
from .channel import ChannelRealization
from .energy import DEFAULT_BANDWIDTH_HZ, P_MAX_W, LinkBudget, model_payload_bits, upload
from .errors import ContractError, ProtocolError, PSFLError, RoundAbort
from .metrics import batch_psnr, batch_ssim
from .params import ParameterSet
from .pld import TAU_FLOOR, pld_local_train, solo_losses

log = logging.getLogger(__name__)

ZETA_CAP = 0.95


def fedavg_aggregate(client_params, sample_counts):
    """``sum_k N_k w_k / sum_k N_k`` per tensor; the result has an all-active mask."""
    if not client_params:
        raise ProtocolError("no client models to aggregate")
    counts = np.asarray(sample_counts, dtype=np.float64)
    if counts.shape != (len(client_params),):
        raise ProtocolError("need one sample count per client")
    if np.any(counts <= 0):
        raise ProtocolError("sample counts must be positive")
    ref = client_params[0]
    for p in client_params[1:]:
        ref.check_compatible(p)
    total = counts.sum()
    out = {}
    for name in ref:
        acc = np.zeros(ref[name].shape)
        for n_k, p in zip(counts, client_params):
            acc += n_k * p[name].data
        out[name] = acc / total
    return ParameterSet(out, prunable=ref.prunable)


def compute_prune_ratio(snr_db_per_client, psi_max=25.0, psi_min=0.0, units="db"):
    """``(psi_max - mean snr) / (psi_max - psi_min)``; out-of-range draws are clamped.

    The affine map is evaluated on dB values by default; ``units="linear"``
    converts draws and bounds to power ratios first.
    """
    if not psi_min < psi_max:
        raise ContractError("psi_min must be below psi_max")
    if units not in ("db", "linear"):
        raise ContractError(f"units must be 'db' or 'linear', not {units!r}")
    snr = np.asarray(snr_db_per_client, dtype=np.float64)
    if snr.size == 0:
        raise ContractError("no SNR draws")
    if np.any(snr < psi_min) or np.any(snr > psi_max):
        log.warning("SNR draws outside [%g, %g] dB clamped", psi_min, psi_max)
        snr = np.clip(snr, psi_min, psi_max)
    if units == "linear":
        snr, psi_min, psi_max = (10.0 ** (np.asarray(v) / 10.0) for v in (snr, psi_min, psi_max))
    return float((psi_max - snr.mean()) / (psi_max - psi_min))


def target_pruned(zeta, n):
    """Number of positions a ratio ``zeta`` masks out of ``n``: floor(zeta * n)."""
    # guard against 0.95 * 20 == 18.999999999999996 style rounding
    return int(math.floor(zeta * n + 1e-9))


def _check_ratio(zeta, cap):
    if not 0.0 <= zeta <= cap + 1e-12:
        raise ContractError(f"prune ratio {zeta} outside [0, {cap}]")


def magnitude_prune(params, zeta, cap=ZETA_CAP):
    """Mask the ``floor(zeta * n)`` smallest-magnitude prunable weights globally.

    Ties in magnitude are broken by flat position (earlier first), with
    prunable tensors laid out in parameter order. Any existing mask is
    replaced. Returns a new ParameterSet.
    """
    _check_ratio(zeta, cap)
    out = params.copy()
    w = params.flat()
    k = target_pruned(zeta, w.size)
    mask = np.ones(w.size, dtype=bool)
    if k:
        order = np.argsort(np.abs(w), kind="stable")
        mask[order[:k]] = False
    out.masks = {n: np.ones(t.shape, dtype=bool) for n, t in out.tensors.items()}
    out.set_flat_mask(mask)
    return out


def adjust_mask(params, zeta_prev, zeta_new, rng, cap=ZETA_CAP):
    """Move the current mask from ratio ``zeta_prev`` to ``zeta_new``.

    A rising ratio prunes more of the smallest-magnitude active weights; a
    falling ratio reactivates uniformly chosen masked positions at value 0.
    Positions restored in this call are never pruned in the same call.
    """
    _check_ratio(zeta_prev, cap)
    _check_ratio(zeta_new, cap)
    out = params.copy()
    if zeta_new == zeta_prev:
        return out
    mask = params.flat_mask()
    n = mask.size
    target = target_pruned(zeta_new, n)
    pruned = int((~mask).sum())
    if target > pruned:
        w = np.abs(params.flat())
        active = np.flatnonzero(mask)
        order = active[np.argsort(w[active], kind="stable")]
        mask[order[:target - pruned]] = False
    elif target < pruned:
        masked = np.flatnonzero(~mask)
        pick = rng.choice(masked, size=pruned - target, replace=False)
        mask[np.sort(pick)] = True
    out.set_flat_mask(mask)
    return out


def broadcast_update(global_params, clients):
    """Replace every client's student weights and mask with the global set."""
    for c in clients:
        c.student.params.check_compatible(global_params)
    for c in clients:
        c.student.params.assign(global_params)


# ---------------------------------------------------------------------------
# the round loop


@dataclass
class FLSettings:
    """Knobs of the round loop. ``use_pld``/``use_agp`` select the ablation."""

    rounds: int = 30
    epochs: int = 2
    lr: float = 0.01
    mentor_lr: float | None = None
    batch_size: int = 8
    momentum: float = 0.0
    clip_norm: float | None = None
    tau: float = TAU_FLOOR
    detach: bool = True
    use_pld: bool = True
    use_agp: bool = True
    zeta_cap: float = ZETA_CAP
    psi_min: float = 0.0
    psi_max: float = 25.0
    prune_units: str = "db"
    client_masking: bool = True
    bandwidth_hz: float = DEFAULT_BANDWIDTH_HZ
    power_w: float = P_MAX_W
    bits_per_weight: int = 32
    bitmap_overhead: bool = False
    training_seed: int = 0
    parallel: bool = False
    eval_clients: bool = True
    train_snr_db: float | None = None


@dataclass
class ClientState:
    index: int
    shard: object
    student: object
    mentor: object = None

    @property
    def samples(self):
        return len(self.shard)


@dataclass(frozen=True)
class EvalResult:
    loss: float
    accuracy: float
    psnr: float
    ssim: float
    classifier_accuracy: float


@dataclass
class ClientRound:
    index: int
    snr_db: float
    samples: int
    payload_bits: int
    rate_bps: float
    delay_s: float
    energy_j: float
    student: object
    mentor: object = None
    evaluation: EvalResult | None = None


@dataclass
class RoundRecord:
    t: int
    snr_db: tuple
    zeta: float
    zeta_raw: float
    clients: list
    global_loss: float
    global_acc: float
    global_psnr: float
    global_ssim: float
    global_evals: list = field(default_factory=list)
    trace: list = field(default_factory=list)

    @property
    def mean_snr_db(self):
        return float(np.mean(self.snr_db))

    @property
    def payload_bits_per_client(self):
        return float(np.mean([c.payload_bits for c in self.clients]))

    @property
    def delay_s(self):
        # uploads run in parallel, so the round waits for the slowest client
        return max(c.delay_s for c in self.clients)

    @property
    def energy_j(self):
        return float(sum(c.energy_j for c in self.clients))

    @property
    def student_loss(self):
        return float(np.mean([c.student.total for c in self.clients]))

    @property
    def mentor_loss(self):
        vals = [c.mentor.total for c in self.clients if c.mentor is not None]
        return float(np.mean(vals)) if vals else None


def evaluate_model(model, test_set, snr_db, seed_seq, probe=None):
    """Transmit the whole test set once at ``snr_db`` and score the result."""
    rng = np.random.default_rng(seed_seq)
    ch = ChannelRealization.sample((len(test_set), model.semantic_dim), snr_db, rng)
    out = model.forward(test_set.images, ch)
    loss = solo_losses(test_set.images, one_hot(test_set.labels, test_set.classes), out).task.item()
    m_hat = out.m_hat.data
    cls_acc = float((out.y_hat.data.argmax(axis=1) == test_set.labels).mean())
    acc = probe.score(m_hat, test_set.labels) if probe is not None else cls_acc
    return EvalResult(loss, acc, batch_psnr(test_set.images, m_hat), batch_ssim(test_set.images, m_hat), cls_acc)


def _with_mask(params, masks):
    out = params.copy()
    out.masks = {n: m.copy() for n, m in masks.items()}
    out.apply_mask()
    return out


def _server_step(global_params, t, zeta_prev, zeta, settings):
    if not settings.use_agp:
        return global_params
    if t == 0:
        return magnitude_prune(global_params, zeta, settings.zeta_cap)
    rng = np.random.default_rng(np.random.SeedSequence([settings.training_seed, t, 0xA6]))
    return adjust_mask(global_params, zeta_prev, zeta, rng, settings.zeta_cap)


def _client_round(c, t, snr, settings, test_set, probe):
    ss = np.random.SeedSequence([settings.training_seed, t, c.index])
    # a fixed training SNR decouples local training from the scheduled draw;
    # the draw still sets the uplink rate, the evaluation channel and zeta
    train_snr = snr if settings.train_snr_db is None else settings.train_snr_db
    _, _, trace = pld_local_train(
        c.mentor, c.student, c.shard, settings.epochs, settings.lr, train_snr, ss,
        batch_size=settings.batch_size, tau=settings.tau, momentum=settings.momentum,
        detach=settings.detach, use_mentor=settings.use_pld, mentor_lr=settings.mentor_lr,
        clip_norm=settings.clip_norm)
    bits = model_payload_bits(c.student.params, settings.bits_per_weight, settings.bitmap_overhead)
    rec = upload(bits, LinkBudget(settings.bandwidth_hz, settings.power_w, snr))
    last = {r.model: r.losses for r in trace if r.epoch == settings.epochs - 1}
    ev = None
    if settings.eval_clients and test_set is not None:
        ev = evaluate_model(c.student, test_set, snr,
                            np.random.SeedSequence([settings.training_seed, t, c.index, 1]), probe)
    cr = ClientRound(c.index, float(snr), c.samples, int(bits), rec.rate_bps, rec.delay_s,
                     rec.energy_j, last["student"], last.get("mentor"), ev)
    return cr, trace


def run_psfl(settings, clients, schedule, test_set=None, probe=None, init_params=None, on_round=None):
    """Run ``settings.rounds`` federated rounds and return one RoundRecord per round.

    Per round: derive the prune ratio from the round's SNR draws, prune or
    adjust the global mask, broadcast, train every client locally (with or
    without its mentor), charge the uplink energy, aggregate, and evaluate
    the aggregate on ``test_set`` at every client's SNR.

    ``on_round(record, global_params, clients)`` is called after each
    round. A failing round raises :class:`RoundAbort` carrying the records
    of the rounds that completed.
    """
    if settings.rounds < 1:
        raise ContractError("need at least one round")
    if not clients:
        raise ProtocolError("no clients")
    if schedule.rounds < settings.rounds or schedule.clients != len(clients):
        raise ProtocolError(f"schedule is {schedule.rounds}x{schedule.clients}, "
                            f"need {settings.rounds}x{len(clients)}")
    if settings.use_pld and any(c.mentor is None for c in clients):
        raise ProtocolError("PLD needs a mentor on every client")
    counts = [c.samples for c in clients]
    global_params = (init_params or clients[0].student.params).copy()
    zeta_prev = 0.0
    records = []
    pool = ThreadPoolExecutor(max_workers=len(clients)) if settings.parallel else None
    try:
        for t in range(settings.rounds):
            try:
                rec = _one_round(t, settings, clients, schedule, counts, global_params, zeta_prev,
                                 test_set, probe, pool)
            except (PSFLError, ArithmeticError, ValueError) as exc:
                raise RoundAbort(t, exc, records) from exc
            record, global_params = rec
            zeta_prev = record.zeta
            records.append(record)
            if on_round is not None:
                on_round(record, global_params, clients)
    finally:
        if pool is not None:
            pool.shutdown()
    return records


def _one_round(t, settings, clients, schedule, counts, global_params, zeta_prev, test_set, probe, pool):
    snrs = [float(v) for v in schedule.draws[t]]
    zeta_raw = compute_prune_ratio(snrs, settings.psi_max, settings.psi_min, settings.prune_units)
    zeta = min(zeta_raw, settings.zeta_cap) if settings.use_agp else 0.0
    global_params = _server_step(global_params, t, zeta_prev, zeta, settings)
    broadcast_update(global_params, clients)
    if not settings.client_masking:
        for c in clients:
            c.student.params.masks = {n: np.ones(m.shape, dtype=bool) for n, m in c.student.params.masks.items()}

    def work(c):
        return _client_round(c, t, snrs[c.index], settings, test_set, probe)

    results = list(pool.map(work, clients)) if pool is not None else [work(c) for c in clients]
    client_rounds = [r[0] for r in results]
    trace = [(c.index, row) for c, (_, tr) in zip(clients, results) for row in tr]

    agg = fedavg_aggregate([c.student.params for c in clients], counts)
    agg = _with_mask(agg, global_params.masks)
    evals = []
    if test_set is not None:
        model = clients[0].student.copy()
        model.params = agg
        evals = [evaluate_model(model, test_set, snrs[k],
                                np.random.SeedSequence([settings.training_seed, t, k, 2]), probe)
                 for k in range(len(clients))]
    nan = float("nan")
    record = RoundRecord(
        t=t, snr_db=tuple(snrs), zeta=float(zeta), zeta_raw=float(zeta_raw), clients=client_rounds,
        global_loss=float(np.mean([e.loss for e in evals])) if evals else nan,
        global_acc=float(np.mean([e.accuracy for e in evals])) if evals else nan,
        global_psnr=float(np.mean([e.psnr for e in evals])) if evals else nan,
        global_ssim=float(np.mean([e.ssim for e in evals])) if evals else nan,
        global_evals=evals, trace=trace)
    return record, agg
