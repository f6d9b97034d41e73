"""Experiment configuration: INI files, presets and environment overrides."""
from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field

from .core import HyperParams, InvalidArgument
from .diagnostic import DiagnosticConfig
from .harness import SETTINGS, ErrorCriteria, ProblemSpec
from .schedule import ScheduleConfig

ENV_PREFIX = "SGDM_DIAG_"
KINDS = ("error_rates", "table1", "distributions", "autolr", "ablation", "theory")
DATASETS = ("synthetic", "mnist", "news")


class ConfigError(InvalidArgument):
    """Invalid configuration. ``field`` names the offending key or flag."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


def _floats(text):
    return tuple(float(t) for t in str(text).replace(",", " ").split())


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text):
    return None if str(text).strip().lower() in ("", "none", "epoch") else int(text)


def _opt_float(text):
    return None if str(text).strip().lower() in ("", "none") else float(text)


def _fmt(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


# section -> key -> parser
SCHEMA = {
    "experiment": {"kind": str, "preset": str, "setting": str, "seed": int, "runs": int, "jobs": int,
                   "out": str, "data": str, "dataset": str, "betas": _floats, "mc_samples": int},
    "problem": {"kind": str, "p": int, "N": int, "noise_sd": float},
    "hyper": {"gamma": float, "beta": float, "beta_final": float, "batch_size": int, "epochs": int},
    "diagnostic": {"threshold_T": float, "check_period_c": _opt_int, "burnin": _opt_int,
                   "heuristic_kind": str, "beta_final": _opt_float, "relative": _bool},
    "schedule": {"gamma0s": _floats, "gamma_min_factor": float, "rho": float, "max_epochs": int},
    "criteria": {"eta": float, "kappa": float, "reference_run_epochs": int},
}


@dataclass
class ExperimentConfig:
    kind: str
    preset: str | None = None
    setting: str | None = None
    seed: int = 0
    runs: int = 100
    jobs: int = field(default_factory=lambda: os.cpu_count() or 1)
    out: str = "results"
    data: str | None = None
    dataset: str = "synthetic"
    betas: tuple = ()
    mc_samples: int = 1_000_000
    problem: ProblemSpec = field(default_factory=ProblemSpec)
    hp: HyperParams = field(default_factory=lambda: HyperParams(gamma=1e-2))
    diag: DiagnosticConfig = field(default_factory=DiagnosticConfig)
    schedule: dict | None = None
    criteria: ErrorCriteria | None = None

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"experiment.kind must be one of {KINDS}, got {self.kind!r}", "experiment.kind")
        if self.runs < 1:
            raise ConfigError("experiment.runs must be >= 1", "experiment.runs")
        if self.jobs < 1:
            raise ConfigError("experiment.jobs must be >= 1", "experiment.jobs")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("experiment.seed must be a 64-bit unsigned integer", "experiment.seed")
        if self.dataset not in DATASETS:
            raise ConfigError(f"experiment.dataset must be one of {DATASETS}", "experiment.dataset")
        if self.dataset != "synthetic" and not self.data:
            raise ConfigError(f"dataset {self.dataset!r} needs a data path (--data)", "--data")
        if self.kind == "error_rates" and self.setting not in (None, "custom") and self.setting not in SETTINGS:
            raise ConfigError(f"unknown setting {self.setting!r}", "experiment.setting")
        for b in self.betas:
            if not 0 <= b < 1:
                raise ConfigError(f"experiment.betas entries must lie in [0, 1), got {b}", "experiment.betas")
        if self.schedule is not None:
            self.schedule_configs()
        bf = self.diag.beta_final if self.diag.beta_final is not None else self.hp.beta_final
        if self.hp.beta > 0 and bf >= self.hp.beta:
            raise ConfigError(f"diagnostic.beta_final ({bf}) must be below hyper.beta ({self.hp.beta})",
                              "diagnostic.beta_final")
        return self

    def schedule_configs(self):
        s = self.schedule
        out = []
        for g0 in s["gamma0s"]:
            try:
                out.append(ScheduleConfig(gamma0=g0, gamma_min=g0 * s["gamma_min_factor"], rho=s["rho"],
                                          max_epochs=s["max_epochs"], diag=self.diag,
                                          hp=dataclasses.replace(self.hp, gamma=g0)))
            except InvalidArgument as err:
                raise ConfigError(str(err), "schedule") from None
        return out

    def to_ini(self):
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp["experiment"] = {k: _fmt(getattr(self, k)) for k in SCHEMA["experiment"]
                            if getattr(self, k) is not None and getattr(self, k) != ()}
        cp["problem"] = {k: _fmt(getattr(self.problem, k)) for k in SCHEMA["problem"]}
        cp["hyper"] = {k: _fmt(getattr(self.hp, k)) for k in SCHEMA["hyper"]}
        cp["diagnostic"] = {k: _fmt(getattr(self.diag, k)) for k in SCHEMA["diagnostic"]}
        if self.schedule is not None:
            cp["schedule"] = {k: _fmt(v) for k, v in self.schedule.items()}
        if self.criteria is not None:
            cp["criteria"] = {k: _fmt(getattr(self.criteria, k)) for k in SCHEMA["criteria"]}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def to_dict(self):
        return dataclasses.asdict(self)


def _parse_sections(text, source="<config>"):
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as err:
        raise ConfigError(f"{source}: {err}") from None
    out = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]", sec)
        out[sec] = {}
        for key, raw in cp[sec].items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {sec}.{key}", f"{sec}.{key}")
            try:
                out[sec][key] = SCHEMA[sec][key](raw)
            except ValueError as err:
                raise ConfigError(f"{sec}.{key}: {err}", f"{sec}.{key}") from None
    return out


def _preset_sections(name):
    """Preset values in the same nested-dict shape a parsed file produces."""
    base_sched = {"gamma0s": (1.0, 0.1, 0.01), "gamma_min_factor": 1e-3, "rho": 0.1, "max_epochs": 5}
    autolr_hyper = {"gamma": 1.0, "beta": 0.8, "beta_final": 0.2, "batch_size": 20, "epochs": 20}
    table2 = {"table2-qlow": "Q-Low", "table2-qhigh": "Q-High", "table2-prlow": "PR-Low",
              "table2-prhigh": "PR-High"}
    if name in table2:
        s = SETTINGS[table2[name]]
        return {
            "experiment": {"kind": "error_rates", "setting": s.name, "runs": 100},
            "problem": dataclasses.asdict(s.problem),
            "hyper": dataclasses.asdict(s.hp),
            "diagnostic": dataclasses.asdict(s.diag),
            "criteria": dataclasses.asdict(s.criteria),
        }
    presets = {
        "table1": {"experiment": {"kind": "table1", "runs": 25, "betas": (0.2, 0.8)},
                   "hyper": {"gamma": 1e-2, "beta": 0.2, "beta_final": 0.0, "batch_size": 25, "epochs": 50},
                   "diagnostic": {"threshold_T": 0.0}},
        "fig1-3-distributions": {"experiment": {"kind": "distributions", "runs": 25, "betas": (0.2, 0.8)},
                                 "hyper": {"gamma": 1e-2, "beta": 0.2, "beta_final": 0.0, "batch_size": 20,
                                           "epochs": 100},
                                 "diagnostic": {"threshold_T": 0.0}},
        "fig4-6-autolr": {"experiment": {"kind": "autolr", "runs": 1, "betas": (0.2, 0.4, 0.6, 0.8)},
                          "problem": {"kind": "logistic", "p": 20, "N": 5000, "noise_sd": 0.0},
                          "hyper": autolr_hyper, "diagnostic": {"threshold_T": 0.5}, "schedule": base_sched},
        "fig5-mnist": {"experiment": {"kind": "autolr", "runs": 1, "dataset": "mnist"},
                       "problem": {"kind": "logistic"}, "hyper": autolr_hyper,
                       "diagnostic": {"threshold_T": 0.5}, "schedule": base_sched},
        "fig5-news": {"experiment": {"kind": "autolr", "runs": 1, "dataset": "news"},
                      "problem": {"kind": "logistic"},
                      "hyper": dict(autolr_hyper, gamma=10.0), "diagnostic": {"threshold_T": 0.5},
                      "schedule": dict(base_sched, gamma0s=(10.0, 1.0, 0.1))},
        "fig7-9-ablation": {"experiment": {"kind": "ablation", "runs": 1, "betas": (0.2, 0.4, 0.6, 0.8)},
                            "problem": {"kind": "logistic", "p": 20, "N": 5000, "noise_sd": 0.0},
                            "hyper": {"gamma": 0.1, "beta": 0.8, "beta_final": 0.2, "batch_size": 20,
                                      "epochs": 20},
                            "diagnostic": {"threshold_T": 0.5}},
        "theory-checks": {"experiment": {"kind": "theory", "runs": 20, "mc_samples": 1_000_000},
                          "hyper": {"gamma": 1e-2, "beta": 0.2, "beta_final": 0.0, "batch_size": 20,
                                    "epochs": 50},
                          "diagnostic": {"threshold_T": 0.0}},
    }
    if name not in presets:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}", "--preset")
    return presets[name]


PRESETS = ("table1", "table2-qlow", "table2-qhigh", "table2-prlow", "table2-prhigh", "fig1-3-distributions",
           "fig4-6-autolr", "fig5-mnist", "fig5-news", "fig7-9-ablation", "theory-checks")


def _merge(base, over):
    out = {k: dict(v) for k, v in base.items()}
    for sec, vals in over.items():
        out.setdefault(sec, {}).update(vals)
    return out


def env_overrides(environ=None):
    environ = os.environ if environ is None else environ
    out = {}
    for key in ("preset", "seed", "runs", "jobs", "out", "data", "dataset"):
        raw = environ.get(ENV_PREFIX + key.upper())
        if raw is not None and raw != "":
            try:
                out[key] = SCHEMA["experiment"][key](raw)
            except ValueError as err:
                raise ConfigError(f"{ENV_PREFIX}{key.upper()}: {err}", ENV_PREFIX + key.upper()) from None
    return out


def _build(sections):
    exp = dict(sections.get("experiment", {}))
    if "kind" not in exp:
        raise ConfigError("experiment.kind is required (or use --preset)", "experiment.kind")
    try:
        problem = ProblemSpec(**sections.get("problem", {}))
        hp = HyperParams(**sections.get("hyper", {"gamma": 1e-2}))
        diag = DiagnosticConfig(**sections.get("diagnostic", {}))
        crit = ErrorCriteria(**sections["criteria"]) if "criteria" in sections else None
    except TypeError as err:
        raise ConfigError(str(err)) from None
    except InvalidArgument as err:
        raise ConfigError(str(err), str(err).split(":")[0]) from None
    sched = None
    if "schedule" in sections:
        sched = {"gamma0s": (hp.gamma,), "gamma_min_factor": 1e-3, "rho": 0.1, "max_epochs": 20}
        sched.update(sections["schedule"])
    cfg = ExperimentConfig(problem=problem, hp=hp, diag=diag, schedule=sched, criteria=crit, **exp)
    return cfg.validate()


def load_config(preset=None, config_text=None, overrides=None, environ=None, source="<config>"):
    """Resolve a config. Precedence: ``overrides`` > environment > file > preset defaults."""
    env = env_overrides(environ)
    preset = (overrides or {}).get("preset") or preset or env.get("preset")
    sections = {}
    if config_text is not None:
        sections = _parse_sections(config_text, source)
        preset = preset or sections.get("experiment", {}).get("preset")
    if preset:
        sections = _merge(_preset_sections(preset), sections)
        sections.setdefault("experiment", {})["preset"] = preset
    flat = {k: v for k, v in env.items() if k != "preset"}
    flat.update({k: v for k, v in (overrides or {}).items() if v is not None and k != "preset"})
    sections.setdefault("experiment", {}).update(flat)
    return _build(sections)
