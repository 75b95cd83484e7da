"""Experiment configuration: TOML or JSON files, presets, validation and object construction."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .control import Communication, CostFamily, DenseNN, LinearPI, NeuralPI, Phi, ZeroController
from .dynamics import MonotoneEdges, SineEdges, nodes_from_dict, SystemModel, TanhEdges, make_power_model, make_vehicle_model
from .graph import Graph, complete_graph, line_graph, random_regular, ring_graph
from .monotone import init as mono_init, linear_params
from .train import EdgeOnlyLoss, TrainConfig, power_tracking, vehicle_tracking

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "parse_config", "PRESETS"]


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every violated field."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


FAMILIES = ("vehicle", "power")
VARIANTS = ("linear", "dense", "neural-pi", "neural-pi-comm", "zero")
GRAPH_KINDS = ("line", "ring", "complete", "regular")

# paper-scale and desk-scale hyperparameters, per family
PRESETS = {
    "paper": {
        "vehicle": {"system": {"n": 20}, "train": {"episodes": 400, "batch": 300, "K": 300, "dt": 0.02},
                    "simulate": {"dt": 0.02, "T": 40.0, "sample_time": 20.0}},
        "power": {"system": {"n": 10}, "train": {"episodes": 600, "batch": 300, "K": 400, "dt": 0.01},
                  "simulate": {"dt": 0.01, "T": 60.0, "sample_time": 30.0}},
    },
    "desk": {
        "vehicle": {"system": {"n": 5}, "train": {"episodes": 50, "batch": 16, "K": 150, "dt": 0.02},
                    "simulate": {"dt": 0.02, "T": 40.0, "sample_time": 20.0}},
        "power": {"system": {"n": 5}, "train": {"episodes": 50, "batch": 16, "K": 200, "dt": 0.01},
                  "simulate": {"dt": 0.02, "T": 60.0, "sample_time": 30.0}},
    },
}

DEFAULTS = {
    "system": {"family": "vehicle", "n": 5, "seed": 0, "y_bar": None, "graph": {"kind": None},
               "edges": None, "nodes": None},
    "controller": {"variant": "neural-pi", "d": 10, "init_scale": 0.2, "init_center": 1.0, "seed": 0,
                   "comm_graph": {"kind": None}, "phi": "identity", "dense_hidden": 20},
    "cost": {"p": None, "c_range": None, "seed": 0, "literal": True},
    "train": {"episodes": 50, "batch": 16, "K": 150, "dt": 0.02, "lr": 0.05, "decay": 0.7,
              "decay_every": 50, "seed": 0, "checkpoint_every": 10, "mode": "controller"},
    "simulate": {"T": 40.0, "dt": 0.02, "scheme": "rk4", "runs": 4, "seed": 1, "eps": 1e-2,
                 "sample_time": 20.0, "init": "random"},
    "verify": {"lemma_draws": 1000, "kkt_tol": 1e-3, "eq_tol": 1e-9, "tol_coef": 0.05},
    "out": "out",
}

FAMILY_DEFAULTS = {
    "vehicle": {"y_bar": 5.2, "graph": "line", "edges": "linear", "p": 2, "c_range": [0.025, 0.075],
                "comm_graph": "regular"},
    "power": {"y_bar": 60.0, "graph": "ring", "edges": "sine", "p": 4, "c_range": [0.25, 0.75],
              "comm_graph": "complete"},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_config(text: str, fmt: str | None = None) -> dict:
    """Parse TOML or JSON text into a plain dict (JSON is tried first when ``fmt`` is None)."""
    if fmt == "json" or (fmt is None and text.lstrip().startswith("{")):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"invalid JSON: {exc}"]) from exc
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"invalid TOML: {exc}"]) from exc


def load_config(path, preset: str | None = None, seed: int | None = None) -> "ExperimentConfig":
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
    fmt = {".json": "json", ".toml": "toml"}.get(path.suffix.lower())
    return ExperimentConfig.from_dict(parse_config(text, fmt), preset=preset, seed=seed)


@dataclass
class ExperimentConfig:
    data: dict

    @classmethod
    def from_dict(cls, raw: dict, preset: str | None = None, seed: int | None = None) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError(["config must be a table/object"])
        family = raw.get("system", {}).get("family", "vehicle")
        data = copy.deepcopy(DEFAULTS)
        preset = preset or raw.get("preset")
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError([f"preset: unknown preset {preset!r} (expected paper|desk)"])
            if family in PRESETS[preset]:
                data = _merge(data, PRESETS[preset][family])
        data = _merge(data, {k: v for k, v in raw.items() if k != "preset"})
        if seed is not None:
            for sec in ("system", "controller", "cost", "train", "simulate"):
                data[sec]["seed"] = int(seed)
        cfg = cls(data)
        cfg._fill_family_defaults()
        cfg.validate()
        return cfg

    def _fill_family_defaults(self):
        d = self.data
        fam = d["system"].get("family")
        if fam not in FAMILY_DEFAULTS:
            return
        fd = FAMILY_DEFAULTS[fam]
        if d["system"].get("y_bar") is None:
            d["system"]["y_bar"] = fd["y_bar"]
        if d["system"]["graph"].get("kind") is None:
            d["system"]["graph"]["kind"] = fd["graph"]
        if d["system"].get("edges") is None:
            d["system"]["edges"] = fd["edges"]
        if d["cost"].get("p") is None:
            d["cost"]["p"] = fd["p"]
        if d["cost"].get("c_range") is None:
            d["cost"]["c_range"] = fd["c_range"]
        cg = d["controller"]["comm_graph"]
        if cg.get("kind") is None:
            kind = fd["comm_graph"]
            n = d["system"].get("n")
            if kind == "regular" and not (isinstance(n, int) and n > 3 and n % 2 == 0):
                kind = "ring"  # no 3-regular graph on an odd node count
            if kind == "ring" and isinstance(n, int) and n < 3:
                kind = "line"
            cg["kind"] = kind
            if kind == "regular":
                cg.setdefault("degree", 3)

    # ------------------------------------------------------------ validation

    def validate(self):
        d, errs = self.data, []
        sy, ct, co, tr, si = d["system"], d["controller"], d["cost"], d["train"], d["simulate"]
        fam = sy.get("family")
        if fam not in FAMILIES:
            errs.append(f"system.family: must be one of {FAMILIES}, got {fam!r}")
        if not isinstance(sy.get("n"), int) or sy["n"] < 2:
            errs.append(f"system.n: must be an integer >= 2, got {sy.get('n')!r}")
        graphs = [("system.graph", sy.get("graph", {}))]
        if ct.get("variant") == "neural-pi-comm":
            graphs.append(("controller.comm_graph", ct.get("comm_graph", {})))
        for sec, g in graphs:
            if g.get("kind") is None and fam not in FAMILIES:
                continue  # family-dependent default; the family error already explains it
            if g.get("kind") not in GRAPH_KINDS:
                errs.append(f"{sec}.kind: must be one of {GRAPH_KINDS}, got {g.get('kind')!r}")
            elif g["kind"] == "ring" and isinstance(sy.get("n"), int) and sy["n"] < 3:
                errs.append(f"{sec}.kind: a ring needs n >= 3, got n={sy['n']}")
            elif g["kind"] == "regular" and isinstance(sy.get("n"), int):
                deg = g.get("degree", 3)
                if not isinstance(deg, int) or deg < 1 or deg >= sy["n"] or (deg * sy["n"]) % 2:
                    errs.append(f"{sec}.degree: no {deg}-regular graph on n={sy['n']} nodes")
        nodes = sy.get("nodes")
        if nodes is not None and fam in FAMILIES:
            need = {"vehicle": ("kappa", "v0", "v1"), "power": ("rho", "p_m", "d")}[fam]
            if not isinstance(nodes, dict):
                errs.append("system.nodes: must be a table of per-node parameter lists")
            else:
                for key in need:
                    v = nodes.get(key)
                    if not (isinstance(v, list) and len(v) == sy.get("n")
                            and all(isinstance(x, (int, float)) for x in v)):
                        errs.append(f"system.nodes.{key}: must be a list of {sy.get('n')} numbers")
                for key in set(nodes) - set(need):
                    errs.append(f"system.nodes.{key}: unknown parameter for family {fam!r}")
        edges = sy.get("edges")
        allowed = {"vehicle": ("linear", "learnable", "tanh"), "power": ("sine",)}.get(fam, ())
        if fam == "power" and edges == "learnable":
            errs.append("system.edges: power networks cannot use learnable edge functions "
                        "(line flows are fixed by physics)")
        elif fam in FAMILIES and edges not in allowed:
            errs.append(f"system.edges: must be one of {allowed} for family {fam!r}, got {edges!r}")
        if ct.get("variant") not in VARIANTS:
            errs.append(f"controller.variant: must be one of {VARIANTS}, got {ct.get('variant')!r}")
        if not isinstance(ct.get("d"), int) or ct["d"] < 1:
            errs.append(f"controller.d: must be an integer >= 1, got {ct.get('d')!r}")
        if ct.get("phi") not in ("identity", "tanh"):
            errs.append(f"controller.phi: must be identity or tanh, got {ct.get('phi')!r}")
        p = co.get("p")
        if p is None and fam not in FAMILIES:
            pass
        elif not isinstance(p, int) or p < 2 or p % 2:
            errs.append(f"cost.p: must be an even integer >= 2, got {p!r}")
        cr = co.get("c_range")
        if cr is None and fam not in FAMILIES:
            pass
        elif not (isinstance(cr, (list, tuple)) and len(cr) == 2 and all(isinstance(v, (int, float)) for v in cr)
                and 0 < cr[0] <= cr[1]):
            errs.append(f"cost.c_range: must be [lo, hi] with 0 < lo <= hi, got {cr!r}")
        for k in ("episodes",):
            if not isinstance(tr.get(k), int) or tr[k] < 0:
                errs.append(f"train.{k}: must be an integer >= 0, got {tr.get(k)!r}")
        for k in ("batch", "K", "decay_every", "checkpoint_every"):
            if not isinstance(tr.get(k), int) or tr[k] < 1:
                errs.append(f"train.{k}: must be an integer >= 1, got {tr.get(k)!r}")
        for sec, k in (("train", "dt"), ("train", "lr"), ("simulate", "dt"), ("simulate", "T"),
                       ("simulate", "eps")):
            v = d[sec].get(k)
            if not isinstance(v, (int, float)) or not v > 0:
                errs.append(f"{sec}.{k}: must be a positive number, got {v!r}")
        dec = tr.get("decay")
        if not isinstance(dec, (int, float)) or not 0 < dec <= 1:
            errs.append(f"train.decay: must lie in (0, 1], got {dec!r}")
        if tr.get("mode") not in ("controller", "edges"):
            errs.append(f"train.mode: must be controller or edges, got {tr.get('mode')!r}")
        elif tr["mode"] == "edges" and edges != "learnable":
            errs.append("train.mode: edge training needs system.edges = 'learnable'")
        if si.get("scheme") not in ("euler", "rk4"):
            errs.append(f"simulate.scheme: must be euler or rk4, got {si.get('scheme')!r}")
        if si.get("init") not in ("random", "equilibrium"):
            errs.append(f"simulate.init: must be random or equilibrium, got {si.get('init')!r}")
        if not isinstance(si.get("runs"), int) or si["runs"] < 1:
            errs.append(f"simulate.runs: must be an integer >= 1, got {si.get('runs')!r}")
        if errs:
            raise ConfigError(errs)

    # ------------------------------------------------------------ accessors

    def __getitem__(self, key):
        return self.data[key]

    @property
    def family(self) -> str:
        return self.data["system"]["family"]

    @property
    def n(self) -> int:
        return self.data["system"]["n"]

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True)

    def _graph(self, spec: dict, seed: int) -> Graph:
        n, kind = self.n, spec["kind"]
        if kind == "line":
            return line_graph(n)
        if kind == "ring":
            return ring_graph(n)
        if kind == "complete":
            return complete_graph(n)
        return random_regular(n, spec.get("degree", 3), spec.get("seed", seed))

    def cost_coefficients(self) -> np.ndarray:
        """Coefficients as written in the transient/steady costs (``sum c_i w_i^p``)."""
        co = self.data["cost"]
        lo, hi = co["c_range"]
        return np.random.default_rng(co["seed"]).uniform(lo, hi, self.n)

    def cost_family(self) -> CostFamily:
        co = self.data["cost"]
        c = self.cost_coefficients()
        # C_i = (c'_i / p) w^p with c' = p c reproduces sum c_i w_i^p
        return CostFamily(co["p"], co["p"] * c if co.get("literal", True) else c)

    def loss_spec(self):
        if self.data["train"]["mode"] == "edges":
            return EdgeOnlyLoss()
        c = self.cost_coefficients()
        return vehicle_tracking(c) if self.family == "vehicle" else power_tracking(c)

    def train_config(self) -> TrainConfig:
        tr = self.data["train"]
        return TrainConfig(tr["episodes"], tr["batch"], tr["K"], float(tr["dt"]), float(tr["lr"]),
                           float(tr["decay"]), tr["decay_every"], tr["seed"], tr["checkpoint_every"],
                           tr["mode"] == "edges")

    def build_model(self) -> SystemModel:
        sy = self.data["system"]
        graph = self._graph(sy["graph"], sy["seed"])
        if self.family == "vehicle":
            kind = sy["edges"]
            if kind == "linear":
                edges = MonotoneEdges(linear_params(1.0, channels=(graph.m,)), 2.0)
            elif kind == "learnable":
                ct = self.data["controller"]
                edges = MonotoneEdges(mono_init(ct["d"], sy["seed"] + 7, ct["init_scale"], (graph.m,),
                                                center=ct["init_center"]), 2.0)
            else:
                edges = TanhEdges(np.ones(graph.m), 2.0)
            model = make_vehicle_model(self.n, sy["seed"], graph=graph, edges=edges, y_bar=sy["y_bar"])
        else:
            model = make_power_model(self.n, sy["seed"], graph=graph, x_bar=sy["y_bar"])
        if sy.get("nodes") is not None:
            extra = {"x_bar": sy["y_bar"]} if self.family == "power" else {}
            try:
                model = model.with_nodes(nodes_from_dict({"family": self.family, **sy["nodes"], **extra}))
            except ValueError as exc:
                raise ConfigError([f"system.nodes: {exc}"]) from exc
        return model

    def build_controller(self):
        ct = self.data["controller"]
        n, v = self.n, ct["variant"]
        if self.data["train"]["mode"] == "edges" or v == "zero":
            return ZeroController()
        if v == "linear":
            return LinearPI.unit(n)
        if v == "dense":
            return DenseNN.init(n, ct["seed"], hidden=ct["dense_hidden"])
        comm = None
        if v == "neural-pi-comm":
            comm = Communication(self._graph(ct["comm_graph"], ct["seed"]), self.cost_family(), Phi(ct["phi"]))
        rng = np.random.default_rng(ct["seed"])
        s1, s2 = (int(s) for s in rng.integers(2**31 - 1, size=2))
        return NeuralPI(mono_init(ct["d"], s1, ct["init_scale"], (n,), center=ct["init_center"]),
                        mono_init(ct["d"], s2, ct["init_scale"], (n,), center=ct["init_center"]), comm)
