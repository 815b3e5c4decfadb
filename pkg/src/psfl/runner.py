"""Run one configured experiment end to end and compare finished runs.

Artifacts written to the output directory:

    effective_config.ini   every config key with its resolved value
    rounds.csv             one row per round
    clients.csv            one row per client per round
    loss_trace.csv         per-epoch loss components of every trained model
    evaluation.csv         PSNR/SSIM/accuracy of local students and the aggregate
    checkpoints/           global model (and final mentors)
    manifest.json          status, completed rounds, failure round if any

Each CSV starts with a ``# psfl-<name> v1`` comment, then a header row.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path

import numpy as np

from .channel import sample_schedule
from .data import dirichlet_partition, load_idx, reference_weights, synth_dataset, train_test_split
from .errors import AlignmentError, ProtocolError, RoundAbort
from .federation import ClientState, run_psfl
from .metrics import LinearProbe
from .models import ImageSpec, build_model, desk_profile, save_checkpoint

log = logging.getLogger(__name__)

ROUND_COLUMNS = ["t", "mean_snr_db", "zeta", "zeta_raw", "payload_bits_per_client", "delay_s",
                 "energy_j", "global_loss", "global_acc", "global_psnr", "global_ssim", "student_loss"]
CLIENT_COLUMNS = ["t", "client", "snr_db", "samples", "payload_bits", "rate_bps", "delay_s",
                  "energy_j", "student_task", "student_dis", "student_sem", "student_total"]
MENTOR_COLUMNS = ["mentor_task", "mentor_dis", "mentor_sem", "mentor_total"]
TRACE_COLUMNS = ["round", "client", "epoch", "task", "dis", "sem", "total", "model"]
EVAL_COLUMNS = ["round", "scope", "client", "snr_db", "loss", "accuracy", "psnr", "ssim",
                "classifier_accuracy"]
COMPARE_METRICS = ["zeta", "energy_j", "global_loss", "global_acc"]


def fmt(v):
    """Stable text form of a CSV cell."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".12g")
    return str(v)


class CsvSink:
    """Append-only CSV with a version comment; rows are flushed as written."""

    def __init__(self, path, name, columns):
        self.columns = list(columns)
        self._f = open(path, "w", newline="", encoding="utf-8")
        self._f.write(f"# psfl-{name} v1\n")
        self._w = csv.writer(self._f, lineterminator="\n")
        self._w.writerow(self.columns)

    def write(self, row):
        self._w.writerow([fmt(v) for v in row])
        self._f.flush()

    def close(self):
        self._f.close()


def read_csv(path):
    """Parse one of our CSVs into ``(columns, rows)`` with rows as dicts of strings."""
    with open(path, encoding="utf-8") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    return reader.fieldnames, list(reader)


# ---------------------------------------------------------------------------
# setup


def load_data(cfg):
    d = cfg.data
    seed = cfg.seeds.data
    if d.source == "synthetic":
        ds = synth_dataset(d.n_train + d.n_test, d.classes, noise=d.noise, seed=seed)
        return train_test_split(ds, d.n_test, seed)
    train = load_idx(d.train_images, d.train_labels, d.classes)
    test = load_idx(d.test_images, d.test_labels, d.classes)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1D8]))
    if 0 < d.n_train < len(train):
        train = train.subset(np.sort(rng.choice(len(train), d.n_train, replace=False)))
    if 0 < d.n_test < len(test):
        test = test.subset(np.sort(rng.choice(len(test), d.n_test, replace=False)))
    return train, test


def build_clients(cfg, train):
    K = cfg.federation.clients
    weights = reference_weights(K) if cfg.data.weighted_volumes else None
    parts = dirichlet_partition(train.labels, K, cfg.data.dirichlet_r, cfg.seeds.data, weights)
    empty = [k for k, p in enumerate(parts) if len(p) == 0]
    if empty:
        raise ProtocolError(f"clients {empty} received no training samples; "
                            "raise data.n_train or data.dirichlet_r")
    image = _image_spec(train)
    student = build_model(desk_profile(cfg.clients.student), image, cfg.seeds.init)
    clients = []
    for k, fam in enumerate(cfg.clients.profiles):
        mentor = None
        if cfg.use_pld:
            seed = cfg.seeds.init * 1009 + (0 if cfg.clients.mentor_init == "shared" else k + 1)
            mentor = build_model(desk_profile(fam), image, seed)
        clients.append(ClientState(k, train.subset(parts[k]), student.copy(), mentor))
    return clients


def _image_spec(ds):
    n, h, w, c = ds.images.shape
    return ImageSpec(h, w, c, ds.classes)


# ---------------------------------------------------------------------------
# run


def _write_manifest(out, **fields):
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump({"format": "psfl-manifest v1", **fields}, f, indent=2, sort_keys=True)
        f.write("\n")


def run_experiment(cfg, out_dir=None):
    """Execute ``cfg`` and write its artifacts; returns the output directory.

    On failure the CSVs keep every completed round, the manifest records
    the failing round, and the original error is re-raised.
    """
    out = Path(out_dir or cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "effective_config.ini").write_text(cfg.to_ini(), encoding="utf-8")
    _write_manifest(out, status="running", scheme=cfg.run.scheme, rounds_completed=0)

    has_mentor = cfg.use_pld
    rounds = CsvSink(out / "rounds.csv", "round-ledger",
                     ROUND_COLUMNS + (["mentor_loss"] if has_mentor else []))
    clients_csv = CsvSink(out / "clients.csv", "client-ledger",
                          CLIENT_COLUMNS + (MENTOR_COLUMNS if has_mentor else []))
    trace_csv = CsvSink(out / "loss_trace.csv", "loss-trace", TRACE_COLUMNS)
    eval_csv = CsvSink(out / "evaluation.csv", "evaluation", EVAL_COLUMNS)
    sinks = (rounds, clients_csv, trace_csv, eval_csv)
    done = []

    def on_round(rec, global_params, clients):
        row = [rec.t, rec.mean_snr_db, rec.zeta, rec.zeta_raw, rec.payload_bits_per_client,
               rec.delay_s, rec.energy_j, rec.global_loss, rec.global_acc, rec.global_psnr,
               rec.global_ssim, rec.student_loss]
        rounds.write(row + ([rec.mentor_loss] if has_mentor else []))
        for c in rec.clients:
            s = c.student
            row = [rec.t, c.index, c.snr_db, c.samples, c.payload_bits, c.rate_bps, c.delay_s,
                   c.energy_j, s.task, s.dis, s.sem, s.total]
            if has_mentor:
                m = c.mentor
                row += [m.task, m.dis, m.sem, m.total]
            clients_csv.write(row)
            if c.evaluation is not None:
                e = c.evaluation
                eval_csv.write([rec.t, "client", c.index, c.snr_db, e.loss, e.accuracy, e.psnr,
                                e.ssim, e.classifier_accuracy])
        for k, e in enumerate(rec.global_evals):
            eval_csv.write([rec.t, "global", k, rec.snr_db[k], e.loss, e.accuracy, e.psnr, e.ssim,
                            e.classifier_accuracy])
        for k, tr in rec.trace:
            b = tr.losses
            trace_csv.write([rec.t, k, tr.epoch, b.task, b.dis, b.sem, b.total, tr.model])
        every = cfg.run.checkpoint_every
        if every and (rec.t + 1) % every == 0:
            save_checkpoint(out / "checkpoints" / f"global_t{rec.t:04d}.ckpt", global_params,
                            clients[0].student.profile, clients[0].student.image, {"round": rec.t})
        done.append(rec.t)
        _write_manifest(out, status="running", scheme=cfg.run.scheme, rounds_completed=len(done))

    try:
        train, test = load_data(cfg)
        clients = build_clients(cfg, train)
        probe = LinearProbe.fit(train.images, train.labels, train.classes)
        schedule = sample_schedule(cfg.run.rounds, len(clients), cfg.channel.snr_min_db,
                                   cfg.channel.snr_max_db, cfg.seeds.schedule)
        final = {}

        def keep(rec, global_params, cl):
            final["params"] = global_params
            on_round(rec, global_params, cl)

        run_psfl(cfg.fl_settings(), clients, schedule, test, probe, on_round=keep)
    except RoundAbort as exc:
        for s in sinks:
            s.close()
        _write_manifest(out, status="failed", scheme=cfg.run.scheme, rounds_completed=len(done),
                        failure_round=exc.round, error=str(exc.cause))
        raise
    except Exception as exc:
        for s in sinks:
            s.close()
        _write_manifest(out, status="failed", scheme=cfg.run.scheme, rounds_completed=len(done),
                        failure_round=None, error=str(exc))
        raise
    for s in sinks:
        s.close()
    st = clients[0].student
    save_checkpoint(out / "checkpoints" / "global_final.ckpt", final["params"], st.profile, st.image,
                    {"round": cfg.run.rounds - 1})
    for c in clients:
        if c.mentor is not None:
            save_checkpoint(out / "checkpoints" / f"mentor_{c.index}.ckpt", c.mentor.params,
                            c.mentor.profile, c.mentor.image, {"client": c.index})
    _write_manifest(out, status="ok", scheme=cfg.run.scheme, rounds_completed=len(done))
    return out


# ---------------------------------------------------------------------------
# compare


def _labels(dirs):
    names = [Path(d).name or str(d) for d in dirs]
    out = []
    for i, n in enumerate(names):
        out.append(n if names.count(n) == 1 else f"{n}#{i}")
    return out


def compare_runs(dirs):
    """Align round ledgers of several runs; returns ``(columns, rows)``.

    Per-round rows carry each run's zeta, energy, loss and accuracy plus
    its difference from the first run. Three summary rows follow, keyed
    ``final_acc``, ``total_energy_j`` and ``energy_var`` in the ``t``
    column, with each value under the matching metric column (energy
    variance is the population variance across rounds).
    """
    if len(dirs) < 2:
        raise AlignmentError("need at least two run directories")
    ledgers = []
    for d in dirs:
        path = Path(d) / "rounds.csv"
        if not path.exists():
            raise AlignmentError(f"{d}: no rounds.csv")
        _, rows = read_csv(path)
        ledgers.append(rows)
    n = len(ledgers[0])
    for d, rows in zip(dirs, ledgers):
        if len(rows) != n:
            raise AlignmentError(f"{d} has {len(rows)} rounds, {dirs[0]} has {n}")
        if [r["t"] for r in rows] != [r["t"] for r in ledgers[0]]:
            raise AlignmentError(f"{d}: round indices differ from {dirs[0]}")
    labels = _labels(dirs)
    columns = ["t"]
    for lab in labels:
        columns += [f"{lab}.{m}" for m in COMPARE_METRICS]
    for lab in labels[1:]:
        columns += [f"{lab}.delta_{m}" for m in COMPARE_METRICS]
    table = []
    for i in range(n):
        vals = [{m: float(rows[i][m]) for m in COMPARE_METRICS} for rows in ledgers]
        row = [ledgers[0][i]["t"]]
        for v in vals:
            row += [v[m] for m in COMPARE_METRICS]
        for v in vals[1:]:
            row += [v[m] - vals[0][m] for m in COMPARE_METRICS]
        table.append(row)
    summaries = []
    for rows in ledgers:
        e = np.array([float(r["energy_j"]) for r in rows])
        summaries.append({"final_acc": float(rows[-1]["global_acc"]),
                          "total_energy_j": float(e.sum()),
                          "energy_var": float(e.var())})
    for key, metric in (("final_acc", "global_acc"), ("total_energy_j", "energy_j"),
                        ("energy_var", "energy_j")):
        row = [key] + [""] * (len(columns) - 1)
        for lab, s in zip(labels, summaries):
            row[columns.index(f"{lab}.{metric}")] = s[key]
        for lab, s in zip(labels[1:], summaries[1:]):
            row[columns.index(f"{lab}.delta_{metric}")] = s[key] - summaries[0][key]
        table.append(row)
    return columns, table


def write_comparison(columns, rows, stream):
    stream.write("# psfl-comparison v1\n")
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(v) for v in r])
