"""Experiment configuration: INI files with a fixed schema, env overrides, presets.

A config needs only ``run.scheme`` and the four ``seeds`` keys; every
other key has a default. Environment variables named
``PSFL__<SECTION>__<KEY>`` override file values.
"""
from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass
from types import SimpleNamespace

from .energy import BITS_PER_WEIGHT, P_MAX_W
from .errors import ConfigError
from .models import FAMILIES

ENV_PREFIX = "PSFL__"
SCHEMES = {
    # name: (use_pld, use_agp)
    "psfl": (True, True),
    "no_pld": (False, True),
    "no_agp": (True, False),
    "fedavg": (False, False),
}
# Table-I style assignment: four small, three large, two huge mentors.
DEFAULT_PROFILES = ("GSC-M",) * 4 + ("GSC-L",) * 3 + ("GSC-H",) * 2
REQUIRED = object()


@dataclass(frozen=True)
class Key:
    kind: str
    default: object = REQUIRED
    help: str = ""


SCHEMA = {
    "run": {
        "scheme": Key("choice:" + ",".join(SCHEMES), help="psfl, no_pld, no_agp or fedavg"),
        "rounds": Key("int", 30, "communication rounds T"),
        "output_dir": Key("str", "runs/out", "artifact directory (CLI -o wins)"),
        "checkpoint_every": Key("int", 0, "save the global model every n rounds; 0 = final only"),
        "parallel": Key("bool", False, "train clients on a thread pool"),
        "eval_clients": Key("bool", True, "score each local student every round"),
    },
    "data": {
        "source": Key("choice:synthetic,idx", "synthetic"),
        "n_train": Key("int", 500, "training samples (idx: subsample when > 0)"),
        "n_test": Key("int", 200, "server test samples (idx: subsample when > 0)"),
        "classes": Key("int", 10),
        "noise": Key("float", 0.1, "synthetic pixel noise"),
        "train_images": Key("str", ""),
        "train_labels": Key("str", ""),
        "test_images": Key("str", ""),
        "test_labels": Key("str", ""),
        "dirichlet_r": Key("float", 0.9, "Dirichlet concentration; smaller is more skewed"),
        "weighted_volumes": Key("bool", True, "skew client volumes like the nine-client reference"),
    },
    "channel": {
        "snr_min_db": Key("float", 0.0),
        "snr_max_db": Key("float", 25.0),
        "train_snr_db": Key("optfloat", None, "empty = train at each round's sampled SNR"),
    },
    "training": {
        "epochs": Key("int", 2, "local epochs G"),
        "lr": Key("float", 0.01),
        "mentor_lr": Key("optfloat", None, "empty = same as lr"),
        "batch_size": Key("int", 8),
        "momentum": Key("float", 0.0),
        "clip_norm": Key("optfloat", None, "empty = no gradient clipping"),
        "tau": Key("float", 1e-3, "floor for loss-ratio denominators"),
        "detach_counterpart": Key("bool", True),
        "client_masking": Key("bool", True, "clients keep pruned weights at zero while training"),
    },
    "federation": {
        "clients": Key("int", 9),
        "zeta_cap": Key("float", 0.95),
        "psi_min": Key("float", 0.0, "prune-ratio lower SNR bound (dB)"),
        "psi_max": Key("float", 25.0, "prune-ratio upper SNR bound (dB)"),
        "prune_units": Key("choice:db,linear", "db"),
    },
    "energy": {
        "bandwidth_hz": Key("float", 1e6),
        "power_w": Key("float", P_MAX_W),
        "p_max_w": Key("float", P_MAX_W),
        "bits_per_weight": Key("int", 32),
        "bitmap_overhead": Key("bool", False),
    },
    "seeds": {
        "data": Key("int"),
        "schedule": Key("int"),
        "init": Key("int"),
        "training": Key("int"),
    },
    "clients": {
        "student": Key("str", "CSC"),
        "profiles": Key("list", ",".join(DEFAULT_PROFILES), "one mentor family per client"),
        "mentor_init": Key("choice:independent,shared", "independent",
                           "shared = one initialization per mentor family"),
    },
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(raw, spec, path):
    raw = raw.strip()
    kind = spec.kind
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "optfloat":
            return None if raw in ("", "none") else float(raw)
    except ValueError:
        raise ConfigError(f"expected {kind.replace('opt', 'optional ')}, got {raw!r}", path) from None
    if kind == "bool":
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}", path)
    if kind == "list":
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    if kind.startswith("choice:"):
        options = kind[7:].split(",")
        if raw not in options:
            raise ConfigError(f"must be one of {options}, got {raw!r}", path)
    return raw


def _format(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    return str(value)


class ExperimentConfig:
    """Validated settings; sections are attributes (``cfg.training.lr``)."""

    def __init__(self, values):
        self.values = values
        for section, keys in values.items():
            setattr(self, section, SimpleNamespace(**keys))

    @property
    def use_pld(self):
        return SCHEMES[self.run.scheme][0]

    @property
    def use_agp(self):
        return SCHEMES[self.run.scheme][1]

    def replace(self, **overrides):
        """Copy with ``{"section.key": value}`` overrides (re-validated)."""
        vals = {s: dict(k) for s, k in self.values.items()}
        for path, v in overrides.items():
            s, k = path.split(".", 1)
            if s not in SCHEMA or k not in SCHEMA[s]:
                raise ConfigError("unknown key", path)
            vals[s][k] = v
        return _validate(vals)

    def to_ini(self):
        """Effective config: every key with its resolved value and its default."""
        out = io.StringIO()
        out.write("# psfl effective config v1\n")
        for section, keys in SCHEMA.items():
            out.write(f"\n[{section}]\n")
            for key, spec in keys.items():
                if spec.help:
                    out.write(f"# {spec.help}\n")
                if spec.default is not REQUIRED:
                    out.write(f"# default: {_format(spec.default)}\n")
                out.write(f"{key} = {_format(self.values[section][key])}\n")
        return out.getvalue()

    def fl_settings(self):
        from .federation import FLSettings

        tr, fed, en = self.training, self.federation, self.energy
        return FLSettings(
            rounds=self.run.rounds, epochs=tr.epochs, lr=tr.lr, mentor_lr=tr.mentor_lr,
            batch_size=tr.batch_size, momentum=tr.momentum, clip_norm=tr.clip_norm, tau=tr.tau,
            detach=tr.detach_counterpart, use_pld=self.use_pld, use_agp=self.use_agp,
            zeta_cap=fed.zeta_cap, psi_min=fed.psi_min, psi_max=fed.psi_max,
            prune_units=fed.prune_units, client_masking=tr.client_masking,
            bandwidth_hz=en.bandwidth_hz, power_w=en.power_w, bits_per_weight=en.bits_per_weight,
            bitmap_overhead=en.bitmap_overhead, training_seed=self.seeds.training,
            parallel=self.run.parallel, eval_clients=self.run.eval_clients,
            train_snr_db=self.channel.train_snr_db)


def _check(cond, message, key):
    if not cond:
        raise ConfigError(message, key)


def _validate(vals):
    r, d, ch, tr, fed, en, cl = (vals[s] for s in
                                 ("run", "data", "channel", "training", "federation", "energy", "clients"))
    _check(r["rounds"] >= 1, "must be at least 1", "run.rounds")
    _check(r["checkpoint_every"] >= 0, "must be non-negative", "run.checkpoint_every")
    _check(d["classes"] >= 2, "need at least two classes", "data.classes")
    _check(d["dirichlet_r"] > 0, "must be positive", "data.dirichlet_r")
    _check(d["noise"] >= 0, "must be non-negative", "data.noise")
    if d["source"] == "synthetic":
        _check(d["n_train"] >= d["classes"], "need one sample per class", "data.n_train")
        _check(d["n_test"] >= 1, "must be at least 1", "data.n_test")
    else:
        for k in ("train_images", "train_labels", "test_images", "test_labels"):
            _check(d[k] != "", "required when data.source = idx", f"data.{k}")
    _check(ch["snr_min_db"] <= ch["snr_max_db"],
           "channel.snr_min_db must not exceed channel.snr_max_db", "channel.snr_min_db/channel.snr_max_db")
    _check(tr["epochs"] >= 1, "must be at least 1", "training.epochs")
    _check(tr["lr"] >= 0, "must be non-negative", "training.lr")
    _check(tr["mentor_lr"] is None or tr["mentor_lr"] >= 0, "must be non-negative", "training.mentor_lr")
    _check(tr["batch_size"] >= 1, "must be at least 1", "training.batch_size")
    _check(0 <= tr["momentum"] < 1, "must lie in [0, 1)", "training.momentum")
    _check(tr["clip_norm"] is None or tr["clip_norm"] > 0, "must be positive", "training.clip_norm")
    _check(tr["tau"] > 0, "must be positive", "training.tau")
    _check(fed["clients"] >= 1, "must be at least 1", "federation.clients")
    _check(0 <= fed["zeta_cap"] < 1, "must lie in [0, 1)", "federation.zeta_cap")
    _check(fed["psi_min"] < fed["psi_max"],
           "federation.psi_min must be below federation.psi_max", "federation.psi_min/federation.psi_max")
    _check(en["bandwidth_hz"] > 0, "must be positive", "energy.bandwidth_hz")
    _check(en["p_max_w"] > 0, "must be positive", "energy.p_max_w")
    _check(0 < en["power_w"] <= en["p_max_w"], "must lie in (0, energy.p_max_w]", "energy.power_w")
    _check(en["bits_per_weight"] in BITS_PER_WEIGHT, f"must be one of {BITS_PER_WEIGHT}",
           "energy.bits_per_weight")
    _check(cl["student"] == "CSC", "the shared student must be CSC", "clients.student")
    profiles = cl["profiles"]
    _check(len(profiles) == fed["clients"],
           f"{len(profiles)} profiles for {fed['clients']} clients", "clients.profiles")
    for p in profiles:
        _check(p in FAMILIES and p != "CSC", f"unknown mentor family {p!r}", "clients.profiles")
    return ExperimentConfig(vals)


def parse_config_text(text, env=None, source="<string>"):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from None
    raw = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError("unknown section", section)
        for key, value in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError("unknown key", f"{section}.{key}")
            raw[(section, key)] = value
    env = os.environ if env is None else env
    for name, value in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX):].lower().split("__")
        path = ".".join(parts)
        if len(parts) != 2 or parts[0] not in SCHEMA or parts[1] not in SCHEMA[parts[0]]:
            raise ConfigError(f"unknown key in environment variable {name}", path)
        raw[(parts[0], parts[1])] = value
    vals = {}
    for section, keys in SCHEMA.items():
        vals[section] = {}
        for key, spec in keys.items():
            path = f"{section}.{key}"
            if (section, key) in raw:
                vals[section][key] = _convert(raw[(section, key)], spec, path)
            elif spec.default is REQUIRED:
                raise ConfigError("missing required key", path)
            elif spec.kind == "list":
                vals[section][key] = _convert(spec.default, spec, path)
            else:
                vals[section][key] = spec.default
    return _validate(vals)


def parse_config(path, env=None):
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    return parse_config_text(text, env, str(path))
