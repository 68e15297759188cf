"""Command-line pipeline: cover -> collect -> train -> estimate -> certify -> synthesize -> rollout -> report.

Configs are INI files (see ``simgap/configs``).  Every stage writes its
artifacts plus a ``manifest_<stage>.json`` recording a hash of the config
sections it depends on, the hashes of the upstream artifacts it consumed and
the hashes of what it produced.  ``all`` skips stages whose manifest is still
current; a single-stage command always recomputes that stage and refuses to
run on missing or stale upstream artifacts.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np

from . import certificate as certmod
from . import covering, dataset, lipestimate, lipnet, symctrl, trainer
from .dynamics import Box, DomainError, SystemPair, make_pair

log = logging.getLogger("simgap")

STAGES = ("cover", "collect", "train", "estimate", "certify", "synthesize", "rollout", "report")
# config sections each stage reads (besides everything upstream)
_SECTIONS = {
    "cover": ("scenario", "system", "cover"),
    "collect": (),
    "train": ("train",),
    "estimate": ("estimate",),
    "certify": ("certify",),
    "synthesize": ("synth",),
    "rollout": ("rollout",),
    "report": (),
}
_UPSTREAM = {
    "cover": (),
    "collect": ("cover",),
    "train": ("collect",),
    "estimate": ("cover",),
    "certify": ("collect", "train", "estimate"),
    "synthesize": ("certify",),
    "rollout": ("synthesize", "certify"),
    "report": ("certify", "synthesize", "rollout", "train", "estimate"),
}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


# -- configuration ------------------------------------------------------------------

def _floats(text: str) -> list[float]:
    return [float(t) for t in text.replace(";", ",").split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _box(text: str) -> Box:
    """``lo, hi; lo, hi`` (one interval per dimension)."""
    rows = [_floats(part) for part in text.split(";") if part.strip()]
    if not rows or any(len(r) != 2 for r in rows):
        raise ConfigError(f"malformed box {text!r}; expected 'lo, hi; lo, hi'")
    return Box.from_bounds(*rows)


@dataclass
class RunConfig:
    name: str
    system: str
    seed: int
    system_params: dict
    eps_x: float
    eps_u: float
    train: trainer.TrainConfig
    n_anchors: int = 32
    n_pairs: int = 100_000
    inflation: float = 1.1
    lip_method: str = "max"
    n_probe: int = 100_000
    probe_mode: str = "random"
    state_counts: tuple = ()
    input_counts: tuple = ()
    spec: object = None
    steps: int = 2000
    n_random: int = 100
    start: np.ndarray | None = None
    adversarial_start: np.ndarray | None = None
    out: Path | None = None
    max_centers: int = covering.DEFAULT_MAX_CENTERS
    parser: configparser.ConfigParser = field(default=None, repr=False)

    def pair(self) -> SystemPair:
        return make_pair(self.system, **self.system_params)

    def section_hash(self, stage: str) -> str:
        """Hash of every section the stage (and its upstream stages) depends on, plus the seed."""
        names = set()
        todo = [stage]
        while todo:
            s = todo.pop()
            names.update(_SECTIONS[s])
            todo.extend(_UPSTREAM[s])
        blob = {sec: dict(self.parser[sec]) for sec in sorted(names) if self.parser.has_section(sec)}
        blob["seed"] = self.seed
        return _sha(json.dumps(blob, sort_keys=True).encode())


def preset_names() -> list[str]:
    root = resources.files("simgap") / "configs"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".ini"))


def resolve_config(path_or_name: str) -> Path:
    p = Path(path_or_name)
    if p.is_file():
        return p
    candidate = resources.files("simgap") / "configs" / f"{path_or_name}.ini"
    if candidate.is_file():
        return Path(str(candidate))
    raise ConfigError(f"no config file or preset named {path_or_name!r}; presets: {', '.join(preset_names())}")


def parse_config(text: str, seed: int | None = None, out=None) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text)
        return _build(cp, seed, out)
    except ConfigError:
        raise
    except (configparser.Error, KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{type(exc).__name__}: {exc}") from exc


def load_config(path_or_name: str, seed: int | None = None, out=None) -> RunConfig:
    path = resolve_config(path_or_name)
    return parse_config(path.read_text(), seed, out)


def _build(cp, seed_override, out_override) -> RunConfig:
    for sec in ("scenario", "cover", "train", "synth"):
        if not cp.has_section(sec):
            raise ConfigError(f"missing section [{sec}]")
    sc = cp["scenario"]
    if "seed" not in sc and seed_override is None:
        raise ConfigError("[scenario] seed is required")
    seed = int(seed_override if seed_override is not None else sc["seed"])
    if not 0 <= seed < 2 ** 64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    if seed_override is not None:
        sc["seed"] = str(seed)
    system_params = {k: float(v) for k, v in cp["system"].items()} if cp.has_section("system") else {}
    try:
        pair = make_pair(sc["system"], **system_params)
    except TypeError as exc:
        raise ConfigError(f"[system]: {exc}") from exc
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc

    cv = cp["cover"]
    eps_x, eps_u = float(cv["eps_x"]), float(cv["eps_u"])
    if not (eps_x > 0 and eps_u > 0):
        raise ConfigError("eps_x and eps_u must be positive")

    tr = cp["train"]
    kw = {}
    for key, conv in (("c1", float), ("c2", float), ("c", float), ("margin", float), ("lr", float),
                      ("lr_decay", float), ("max_epochs", int), ("batch_size", int),
                      ("bisect_tol", float), ("bisect_max_iter", int), ("eta_init", float),
                      ("rho_convention", str)):
        if key in tr:
            kw[key] = conv(tr[key])
    if "hidden" in tr:
        kw["hidden"] = tuple(_ints(tr["hidden"]))
    if "L1" in tr:
        L1 = _floats(tr["L1"])
        if len(L1) not in (1, pair.n) or min(L1) <= 0:
            raise ConfigError("[train] L1 needs one positive value or one per state coordinate")
        kw["L1"] = L1[0] if len(L1) == 1 else tuple(L1)
    tcfg = trainer.TrainConfig(seed=seed, **kw)

    cfg = RunConfig(sc.get("name", "run"), sc["system"], seed, system_params, eps_x, eps_u, tcfg, parser=cp)
    cfg.max_centers = int(cv.get("max_centers", covering.DEFAULT_MAX_CENTERS))
    if cp.has_section("estimate"):
        es = cp["estimate"]
        cfg.n_anchors = int(es.get("n_anchors", cfg.n_anchors))
        cfg.n_pairs = int(es.get("n_pairs", cfg.n_pairs))
        cfg.inflation = float(es.get("inflation", cfg.inflation))
        cfg.lip_method = es.get("method", cfg.lip_method)
    if cp.has_section("certify"):
        ce = cp["certify"]
        cfg.n_probe = int(ce.get("n_probe", cfg.n_probe))
        cfg.probe_mode = ce.get("mode", cfg.probe_mode)

    sy = cp["synth"]
    cfg.state_counts = tuple(_ints(sy["state_counts"]))
    cfg.input_counts = tuple(_ints(sy["input_counts"]))
    if len(cfg.state_counts) != pair.n or len(cfg.input_counts) != pair.m:
        raise ConfigError("[synth] grid counts must match the state and input dimensions")
    X = pair.state_box
    kind = sy.get("spec", "invariance")
    if kind == "invariance":
        cfg.spec = symctrl.InvarianceSpec(_box(sy["safe"]))
        boxes = [cfg.spec.safe]
    elif kind == "reach_avoid":
        obstacles = tuple(_box(v) for k, v in sorted(sy.items()) if k.startswith("obstacle"))
        cfg.spec = symctrl.ReachAvoidSpec(_box(sy["target"]), obstacles)
        boxes = [cfg.spec.target, *obstacles]
    else:
        raise ConfigError(f"[synth] unknown spec {kind!r}")
    for b in boxes:
        if b.dim != pair.n or not X.contains_box(b):
            raise ConfigError(f"specification box {b} does not lie inside the state box {X}")

    if cp.has_section("rollout"):
        ro = cp["rollout"]
        cfg.steps = int(ro.get("steps", cfg.steps))
        cfg.n_random = int(ro.get("n_random", cfg.n_random))
        for key in ("start", "adversarial_start"):
            if key in ro:
                v = np.array(_floats(ro[key]))
                if v.size != pair.n or not X.contains(v):
                    raise ConfigError(f"[rollout] {key} must be a point of the state box")
                setattr(cfg, key, v)
    if out_override is not None:
        cfg.out = Path(out_override)
    elif "out" in sc:
        cfg.out = Path(sc["out"])
    else:
        cfg.out = Path("runs") / cfg.name
    return cfg


# -- artifact bookkeeping -----------------------------------------------------------

def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _file_hash(path: Path) -> str:
    return _sha(path.read_bytes())


def _manifest_path(out: Path, stage: str) -> Path:
    return out / f"manifest_{stage}.json"


def _read_manifest(out: Path, stage: str) -> dict | None:
    p = _manifest_path(out, stage)
    return json.loads(p.read_text()) if p.is_file() else None


def _outputs_intact(out: Path, man: dict) -> bool:
    return all((out / name).is_file() and _file_hash(out / name) == h for name, h in man["outputs"].items())


def _upstream_state(cfg: RunConfig, stage: str) -> dict:
    """Hashes of upstream outputs; raises when an upstream stage is missing or stale."""
    state = {}
    for up in _UPSTREAM[stage]:
        man = _read_manifest(cfg.out, up)
        if man is None:
            raise StageError(stage, f"missing artifacts of stage {up!r}; run it first")
        if man["config"] != cfg.section_hash(up) or not _outputs_intact(cfg.out, man):
            raise StageError(stage, f"artifacts of stage {up!r} are stale; rerun it")
        state[up] = man["outputs"]
    return state


def _is_current(cfg: RunConfig, stage: str) -> bool:
    man = _read_manifest(cfg.out, stage)
    if man is None or man["config"] != cfg.section_hash(stage) or not _outputs_intact(cfg.out, man):
        return False
    try:
        return man["upstream"] == _upstream_state(cfg, stage)
    except StageError:
        return False


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- stages ---------------------------------------------------------------------------

def _covers(cfg: RunConfig):
    pair = cfg.pair()
    return (covering.build_cover(pair.state_box, cfg.eps_x, cfg.max_centers),
            covering.build_cover(pair.input_box, cfg.eps_u, cfg.max_centers))


def stage_cover(cfg, workers):
    sc, ic = _covers(cfg)
    sc.to_csv(cfg.out / "state_cover.csv", [f"x{k + 1}" for k in range(sc.box.dim)])
    ic.to_csv(cfg.out / "input_cover.csv", [f"u{k + 1}" for k in range(ic.box.dim)])
    _write_json(cfg.out / "cover.json", dict(
        state=dict(epsilon=sc.epsilon, counts=list(sc.per_dim_counts), size=len(sc), spacing=sc.spacing.tolist()),
        input=dict(epsilon=ic.epsilon, counts=list(ic.per_dim_counts), size=len(ic), spacing=ic.spacing.tolist())))
    return ["state_cover.csv", "input_cover.csv", "cover.json"]


def stage_collect(cfg, workers):
    sc, ic = _covers(cfg)
    ds = dataset.generate(cfg.pair(), sc, ic)
    dataset.save(ds, cfg.out, seed=cfg.seed)
    return ["dataset.csv", "dataset.json"]


def stage_train(cfg, workers):
    ds = dataset.load(cfg.out)
    results = trainer.train_all(ds, cfg.train, workers=workers)
    names = []
    for r in results:
        lipnet.save_net(cfg.out / f"gap_i{r.coordinate}.net", r.net, r.lam)
        s = r.summary()
        s["max_target"] = float(dataset.gap_targets(ds, r.coordinate).max())
        s["config"] = trainer.config_dict(cfg.train)
        s["wall_time"] = r.wall_time
        _write_json(cfg.out / f"train_i{r.coordinate}.json", s)
        names += [f"gap_i{r.coordinate}.net", f"train_i{r.coordinate}.json"]
    return names


def _train_summaries(cfg):
    out, i = [], 0
    while (cfg.out / f"train_i{i}.json").is_file():
        out.append(json.loads((cfg.out / f"train_i{i}.json").read_text()))
        i += 1
    return out


def _load_train(cfg):
    results = []
    for s in _train_summaries(cfg):
        net, lam = lipnet.load_net(cfg.out / f"gap_i{s['coordinate']}.net")
        results.append(trainer.TrainResult(s["coordinate"], s["eta"], net, lam, s["verified"]))
    return results


def stage_estimate(cfg, workers):
    pair = cfg.pair()
    est = dict(L2x=[], L2u=[])
    for i in range(pair.n):
        kw = dict(n_anchors=cfg.n_anchors, n_pairs=cfg.n_pairs, inflation=cfg.inflation,
                  seed=cfg.seed, method=cfg.lip_method, workers=workers)
        est["L2x"].append(lipestimate.estimate_L2x(pair, i, **kw).to_dict())
        est["L2u"].append(lipestimate.estimate_L2u(pair, i, **kw).to_dict())
    _write_json(cfg.out / "lipschitz.json", est)
    return ["lipschitz.json"]


def stage_certify(cfg, workers):
    pair = cfg.pair()
    ds = dataset.load(cfg.out)
    results = _load_train(cfg)
    est = json.loads((cfg.out / "lipschitz.json").read_text())
    lips = {k: [e["value"] for e in v] for k, v in est.items()}
    cert = certmod.assemble(results, lips, ds.state_cover, ds.input_cover)
    certmod.save(cert, cfg.out / "certificate.bin")
    rep = certmod.validate(cert, pair, n_probe=cfg.n_probe, seed=cfg.seed, mode=cfg.probe_mode)
    scp = []
    for r in results:
        g = dataset.gap_targets(ds, r.coordinate)
        gam = r.net(ds.inputs)
        scp.append(dict(coordinate=r.coordinate, above_eta=int(np.sum(gam > r.eta)),
                        below_target=int(np.sum(gam < g))))
    _write_json(cfg.out / "certificate_report.json", dict(
        eta=cert.eta.tolist(), L1=cert.L1.tolist(), L2x=cert.L2x.tolist(), L2u=cert.L2u.tolist(),
        eps_x=cert.eps_x, eps_u=cert.eps_u, L_const=cert.L_const.tolist(),
        validation=rep.to_dict(), sampled_constraints=scp))
    return ["certificate.bin", "certificate_report.json"]


def _systems(cfg, cert, scale=1.0):
    pair = cfg.pair()
    return (symctrl.UncertainSystem(pair.nominal, cert, scale),
            symctrl.UncertainSystem(pair.nominal, None))


def _grids(cfg):
    pair = cfg.pair()
    return (symctrl.StateGrid(pair.state_box, cfg.state_counts),
            symctrl.InputGrid(pair.input_box, cfg.input_counts))


def stage_synthesize(cfg, workers):
    cert = certmod.load(cfg.out / "certificate.bin")
    aware, free = _systems(cfg, cert)
    sg, ig = _grids(cfg)
    info = {}
    for label, sys_ in (("aware", aware), ("free", free),
                        ("double", symctrl.UncertainSystem(aware.nominal, cert, 2.0))):
        ctl = symctrl.synthesize(symctrl.abstract(sys_, sg, ig), cfg.spec)
        info[label] = dict(winning=ctl.size, iterations=ctl.iterations)
        if label == "double":
            ref = symctrl.load_controller(cfg.out / "controller.bin")
            info[label]["subset_of_aware"] = bool(np.all(ref.winning[ctl.winning]))
            continue
        suffix = "" if label == "aware" else "_free"
        symctrl.save_controller(ctl, cfg.out / f"controller{suffix}.bin")
        symctrl.write_winning_csv(ctl, cfg.out / f"winning{suffix}.csv")
    info["cells"] = sg.size
    info["inputs"] = ig.size
    _write_json(cfg.out / "synth.json", info)
    return ["controller.bin", "winning.csv", "controller_free.bin", "winning_free.csv", "synth.json"]


def stage_rollout(cfg, workers):
    pair = cfg.pair()
    aware = symctrl.load_controller(cfg.out / "controller.bin")
    free = symctrl.load_controller(cfg.out / "controller_free.bin")
    runs = {}
    names = []

    def run(label, ctl, system, x0):
        traj = symctrl.rollout(ctl, system, x0, cfg.steps)
        traj.to_csv(cfg.out / f"traj_{label}.csv")
        names.append(f"traj_{label}.csv")
        runs[label] = dict(x0=[float(v) for v in x0], steps=int(traj.inputs.shape[0]), **traj.verdict.to_dict())

    if cfg.start is not None:
        run("aware_surrogate", aware, pair.surrogate, cfg.start)
        run("aware_nominal", aware, pair.nominal, cfg.start)
    if cfg.adversarial_start is not None:
        run("free_surrogate", free, pair.surrogate, cfg.adversarial_start)
        run("aware_surrogate_adversarial", aware, pair.surrogate, cfg.adversarial_start)
    rng = np.random.default_rng([cfg.seed, 7])
    cells = np.flatnonzero(aware.winning)
    random = dict(trajectories=0, violations=0, satisfied=0)
    if cells.size and cfg.n_random > 0:
        picks = rng.choice(cells, size=cfg.n_random, replace=True)
        sg = aware.sgrid
        starts = sg.centers(picks) + rng.uniform(-0.5, 0.5, (cfg.n_random, sg.dim)) * sg.widths
        verdicts = [symctrl.rollout(aware, pair.surrogate, x0, cfg.steps).verdict for x0 in starts]
        random = dict(trajectories=len(verdicts),
                      violations=sum(v.first_violation is not None for v in verdicts),
                      satisfied=sum(v.satisfied for v in verdicts))
    _write_json(cfg.out / "rollout.json", dict(bundled=runs, random_starts=random))
    return names + ["rollout.json"]


def build_report(cfg) -> dict:
    cr = json.loads((cfg.out / "certificate_report.json").read_text())
    tr = _train_summaries(cfg)
    sy = json.loads((cfg.out / "synth.json").read_text())
    ro = json.loads((cfg.out / "rollout.json").read_text())
    return dict(
        scenario=cfg.name, system=cfg.system, seed=cfg.seed,
        eta=cr["eta"], L_const=cr["L_const"], L1=cr["L1"], L2x=cr["L2x"], L2u=cr["L2u"],
        max_target=[c["max_target"] for c in tr],
        verified=[c["verified"] for c in tr],
        validation_violations=cr["validation"]["violations"],
        validation_min_margin=cr["validation"]["min_margin"],
        validation_probes=cr["validation"]["probes"],
        winning_aware=sy["aware"]["winning"], winning_free=sy["free"]["winning"],
        winning_double=sy["double"]["winning"], cells=sy["cells"],
        rollouts={k: dict(satisfied=v["satisfied"], reason=v["reason"],
                          first_violation=v["first_violation"], reached_at=v["reached_at"])
                  for k, v in sorted(ro["bundled"].items())},
        random_rollouts=ro["random_starts"])


def stage_report(cfg, workers):
    rep = build_report(cfg)
    rep["timestamp"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    _write_json(cfg.out / "report.json", rep)
    with open(cfg.out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        for k, v in _flatten(rep):
            if k != "timestamp":
                w.writerow([k, v])
    return ["report.json", "report.csv"]


def _flatten(obj, prefix=""):
    if isinstance(obj, dict):
        for k in sorted(obj):
            yield from _flatten(obj[k], f"{prefix}{k}.")
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            yield from _flatten(v, f"{prefix}{i}.")
    else:
        yield prefix[:-1], obj


_RUNNERS = {s: globals()[f"stage_{s}"] for s in STAGES}


def run_stage(cfg: RunConfig, stage: str, workers: int = 1, force: bool = True) -> bool:
    """Run one stage; returns False when skipped because its artifacts are current."""
    cfg.out.mkdir(parents=True, exist_ok=True)
    if not force and stage != "report" and _is_current(cfg, stage):
        log.info("%s: up to date", stage)
        return False
    upstream = _upstream_state(cfg, stage)
    t0 = time.perf_counter()
    try:
        outputs = _RUNNERS[stage](cfg, workers)
    except (trainer.TrainingError, certmod.CertificateError, DomainError, OSError,
            np.linalg.LinAlgError, KeyError, ValueError) as exc:
        raise StageError(stage, exc) from exc
    man = dict(stage=stage, config=cfg.section_hash(stage), upstream=upstream,
               outputs={name: _file_hash(cfg.out / name) for name in outputs})
    _write_json(_manifest_path(cfg.out, stage), man)
    log.info("%s: done in %.1f s", stage, time.perf_counter() - t0)
    return True


def run_pipeline(cfg: RunConfig, workers: int = 1) -> None:
    for stage in STAGES:
        run_stage(cfg, stage, workers, force=False)


# -- entry point ------------------------------------------------------------------------

def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="simgap", description=__doc__.splitlines()[0])
    ap.add_argument("stage", choices=STAGES + ("all",))
    ap.add_argument("--config", required=True, help="INI file or bundled preset name")
    ap.add_argument("--out", help="run directory (overrides the config)")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--seed", type=int, help="overrides [scenario] seed")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.workers < 1:
        print("config error: --workers must be at least 1", file=sys.stderr)
        return 2
    try:
        if args.stage == "all":
            run_pipeline(cfg, args.workers)
        else:
            run_stage(cfg, args.stage, args.workers)
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
