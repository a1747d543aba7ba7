"""Command-line driver: simulate, train, rjmcmc, evaluate, sweep, oracle.

Exit codes: 0 success, 2 config error, 3 numeric divergence, 4 missing input.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .targets import MISSPECIFICATION, DagTarget, RobustVsTarget, simulate_dag, simulate_robustvs
from .trainer import TrainingDivergence, Trainer, VtiConfig

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISSING = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class MissingInput(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# experiment config

# misspec selects the data-generating noise; the likelihood keeps (lik_sigma1, lik_sigma2)
TARGET_KEYS = {
    "kind": "robustvs", "misspec": "mid", "n": 50, "p": 7, "alpha": 0.1, "sigma_beta": 1.5,
    "lik_sigma1": 1.0, "lik_sigma2": 10.0,
    "N": 4, "hidden": 4, "rho_edge": 0.5, "sigma": 1.0, "lambda_s": 0.0, "bias": False, "sigma_w": 1.0,
    "path": None, "standardize": True,
}
RJ_KEYS = {"n_steps": 200_000, "burn_in": 20_000, "thin": 10, "p_jump": 0.5, "birth": "redraw"}
METRIC_KEYS = {"oracle": "auto", "nodes": 64, "max_quad_dim": 4, "n_posterior": 1000, "min_per_model": 50}
SWEEP_KEYS = {"p_values": [9, 10, 11, 12], "iterations": 500}
TOP_KEYS = {"target", "trainer", "rjmcmc", "metrics", "sweep", "seed", "output"}


def default_config() -> dict:
    return {
        "target": dict(TARGET_KEYS), "trainer": VtiConfig().to_dict(), "rjmcmc": dict(RJ_KEYS),
        "metrics": dict(METRIC_KEYS), "sweep": dict(SWEEP_KEYS), "seed": 0, "output": "out",
    }


def _merge(base: dict, upd: dict, where: str):
    for k, v in upd.items():
        if k not in base:
            raise ConfigError(f"unknown key {where}{k!r}")
        if isinstance(base[k], dict) and base[k] and isinstance(v, dict):
            _merge(base[k], v, f"{where}{k}.")
        else:
            base[k] = v


def validate_config(cfg: dict) -> dict:
    t = cfg["target"]
    if t["kind"] not in ("robustvs", "dag", "sachs"):
        raise ConfigError(f"target.kind must be robustvs, dag or sachs, got {t['kind']!r}")
    if t["kind"] == "robustvs" and t["misspec"] not in MISSPECIFICATION:
        raise ConfigError(f"unknown misspec {t['misspec']!r}; valid names: {', '.join(sorted(MISSPECIFICATION))}")
    if int(t["n"]) < 1 or int(t["p"]) < 0 or int(t["N"]) < 2:
        raise ConfigError("target sizes out of range")
    try:
        VtiConfig.from_dict(cfg["trainer"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["trainer"]["flow"] not in ("affine", "spline", "diag"):
        raise ConfigError("trainer.flow must be affine, spline or diag")
    if cfg["trainer"]["sampler"] not in ("categorical", "madeplus", "neural", "surrogate"):
        raise ConfigError("trainer.sampler must be categorical, madeplus/neural or surrogate")
    rj = cfg["rjmcmc"]
    if rj["n_steps"] <= rj["burn_in"] or rj["thin"] < 1:
        raise ConfigError("rjmcmc needs n_steps > burn_in and thin >= 1")
    return cfg


def load_config(path=None, overrides=None) -> dict:
    cfg = default_config()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise MissingInput(f"config file not found: {p}")
        with open(p) as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ConfigError("config file must be a mapping")
        _merge(cfg, user, "")
    for dotted, v in (overrides or {}).items():
        if v is None:
            continue
        sec, _, key = dotted.rpartition(".")
        _merge(cfg, {sec: {key: v}} if sec else {key: v}, "")
    if cfg["trainer"]["seed"] != cfg["seed"]:
        cfg["trainer"]["seed"] = cfg["seed"]
    return validate_config(cfg)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def stamp(cfg: dict) -> dict:
    return {"config_hash": config_hash(cfg), "seed": cfg["seed"], "version": __version__}


def output_dir(cfg: dict, override=None) -> Path:
    out = Path(override if override is not None else cfg["output"])
    root = os.environ.get("VTI_OUTPUT_ROOT")
    if root and not out.is_absolute():
        out = Path(root) / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.ndarray, torch.Tensor)):
        return np.asarray(o).tolist()
    raise TypeError(type(o))


def _fmt(v) -> str:
    if isinstance(v, (np.floating, np.integer)):
        v = v.item()
    if isinstance(v, float):
        if math.isnan(v):
            return "NA"
        return repr(v)
    return str(v)


def _write_csv(path: Path, header, rows, st: dict | None = None):
    extra = list(st) if st else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header) + extra)
        for r in rows:
            w.writerow([_fmt(v) for v in r] + [st[k] for k in extra])


# ---------------------------------------------------------------------------
# datasets


def read_dataset(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"dataset not found: {path}")
    meta_path = path.with_suffix(".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data, meta


def build_target(cfg: dict, data: np.ndarray):
    t = cfg["target"]
    if t["kind"] == "robustvs":
        return RobustVsTarget(data[:, 1:], data[:, 0], alpha=t["alpha"], sigma_beta=t["sigma_beta"],
                              sigma1=t["lik_sigma1"], sigma2=t["lik_sigma2"])
    return DagTarget(data, hidden=t["hidden"], sigma=t["sigma"], lambda_s=t["lambda_s"], bias=t["bias"],
                     sigma_w=t["sigma_w"])


def _data_path(cfg, args, out: Path) -> Path:
    return Path(args.data) if getattr(args, "data", None) else out / "data.csv"


def _model_filter(args, layout):
    """Canonical strings for the --model values, or None when no filter was given."""
    names = getattr(args, "model", None)
    if not names:
        return None
    try:
        return {layout.format(layout.parse(m)[None]) for m in names}
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"bad --model value: {exc}") from exc


def cmd_simulate(cfg: dict, args) -> int:
    out = output_dir(cfg, args.out)
    t = cfg["target"]
    st = stamp(cfg)
    if t["kind"] == "robustvs":
        d = simulate_robustvs(t["misspec"], n=t["n"], p=t["p"], seed=cfg["seed"], alpha=t["alpha"])
        header = ["y"] + [f"x{j + 1}" for j in range(t["p"])]
        rows = np.column_stack([d.y, d.X])
        from .modelspace import VariableSelectionLayout

        m_str = VariableSelectionLayout(t["p"]).format(torch.as_tensor(d.gamma[None]))
        meta = {"kind": "robustvs", "truth": {"gamma": d.gamma, "beta": d.beta, "model": m_str}, **d.meta}
    elif t["kind"] == "dag":
        d = simulate_dag(N=t["N"], hidden=t["hidden"], n=t["n"], rho_edge=t["rho_edge"], sigma=t["sigma"],
                         bias=t["bias"], seed=cfg["seed"])
        header = [f"x{j}" for j in range(t["N"])]
        rows = d.X
        from .modelspace import DagLayout

        m_str = DagLayout(t["N"], t["hidden"], t["bias"]).format(d.model[None])
        meta = {"kind": "dag", "truth": {"A": d.A, "model": m_str}, **d.meta}
    else:
        from .targets import load_sachs

        if not t["path"] or not Path(t["path"]).exists():
            raise MissingInput(f"sachs csv not found: {t['path']}")
        X, names = load_sachs(t["path"], t["standardize"])
        header, rows, meta = names, X, {"kind": "sachs", "source": str(t["path"])}
    path = out / "data.csv"
    _write_csv(path, header, rows.tolist())
    _write_json(path.with_suffix(".meta.json"), {**meta, **st})
    print(f"wrote {path} ({rows.shape[0]} rows)")
    return EXIT_OK


def _q_dump(trainer, out: Path, st: dict):
    sp = trainer.target.space
    if sp.size > 2 ** 16:
        return
    models = sp.enumerate()
    with torch.no_grad():
        lq = trainer.sampler.log_mass(models).numpy()
    fmt = trainer.target.layout.format
    rows = [(fmt(models[i: i + 1]), float(np.exp(lq[i])), float(lq[i])) for i in range(sp.size)]
    _write_csv(out / "q_psi.csv", ["model", "q", "log_q"], rows, st)


def cmd_train(cfg: dict, args) -> int:
    out = output_dir(cfg, args.out)
    data, _ = read_dataset(_data_path(cfg, args, out))
    target = build_target(cfg, data)
    tc = VtiConfig.from_dict(cfg["trainer"])
    tr = Trainer(target, tc)
    st = stamp(cfg)
    log_path = out / "metrics.jsonl"
    mode = "w"
    if args.resume:
        ck = Path(args.resume)
        if not ck.exists():
            raise MissingInput(f"checkpoint not found: {ck}")
        tr.load_state_dict(json.loads(ck.read_text()))
        mode = "a"
    remaining = args.more if (args.resume and args.more) else tc.iterations - tr.t
    with open(log_path, mode) as fh:
        def cb(rec):
            fh.write(json.dumps({**rec, **st}) + "\n")
            fh.flush()

        try:
            tr.run(max(0, remaining), callback=cb)
        except TrainingDivergence as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
    state = tr.state_dict()
    state.update({"target": cfg["target"], **st})
    _write_json(out / "checkpoint.json", state)
    _q_dump(tr, out, st)
    tail = tr.losses[-100:]
    print(f"t={tr.t} loss={np.mean(tail):.4f} entropy={tr.entropy():.4f}")
    return EXIT_OK


def load_checkpoint(path, cfg: dict, data: np.ndarray) -> Trainer:
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"checkpoint not found: {p}")
    st = json.loads(p.read_text())
    c2 = copy.deepcopy(cfg)
    c2["trainer"] = st["config"]
    c2["target"] = st.get("target", cfg["target"])
    tr = Trainer(build_target(c2, data), VtiConfig.from_dict(st["config"]))
    tr.load_state_dict(st)
    return tr


def cmd_rjmcmc(cfg: dict, args) -> int:
    from .baselines import rj_run

    out = output_dir(cfg, args.out)
    if cfg["target"]["kind"] != "robustvs":
        raise ConfigError("rjmcmc supports the robustvs target only")
    data, _ = read_dataset(_data_path(cfg, args, out))
    target = build_target(cfg, data)
    rj = cfg["rjmcmc"]
    res = rj_run(target, rj["n_steps"], rj["burn_in"], rj["thin"], seed=cfg["seed"], p_jump=rj["p_jump"],
                 birth=rj["birth"])
    st = stamp(cfg)
    models = torch.as_tensor(res.gamma, dtype=torch.long)
    fmt = target.layout.format
    rows = [[fmt(models[i: i + 1])] + list(res.theta[i]) for i in range(models.shape[0])]
    header = ["model"] + [f"theta{j}" for j in range(target.d_max)]
    _write_csv(out / "rj_samples.csv", header, rows, st)
    _write_json(out / "rj_stats.json", {**res.stats, **st})
    print(f"wrote {len(rows)} samples; jump acceptance {res.stats['jump_accept']:.3f}")
    return EXIT_OK


def read_samples(path, target):
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"sample file not found: {p}")
    models, theta = [], []
    with open(p) as fh:
        r = csv.reader(fh)
        header = next(r)
        k = sum(h.startswith("theta") for h in header)
        for row in r:
            models.append(target.layout.parse(row[0]))
            theta.append([float("nan") if v == "NA" else float(v) for v in row[1: 1 + k]])
    return torch.stack(models), np.nan_to_num(np.asarray(theta, dtype=np.float64))


def cmd_evaluate(cfg: dict, args) -> int:
    from . import metrics as M

    out = output_dir(cfg, args.out)
    data, meta = read_dataset(_data_path(cfg, args, out))
    tr = load_checkpoint(args.checkpoint or out / "checkpoint.json", cfg, data)
    target = tr.target
    st = stamp(cfg)
    report = {"t": tr.t, **st}
    if cfg["target"]["kind"] == "robustvs":
        if args.samples or (out / "rj_samples.csv").exists():
            models, theta = read_samples(args.samples or out / "rj_samples.csv", target)
        else:
            # self-samples from q
            g = torch.Generator().manual_seed(cfg["seed"])
            models = tr.sampler.sample(cfg["metrics"]["n_posterior"], g)
            with torch.no_grad():
                theta, _ = tr.flow.sample(models.shape[0], target.mask(models), target.context(models), g)
            report["samples"] = "self"
        res = M.cross_entropy_nll(models, theta, tr.flow, tr.sampler, target,
                                  min_per_model=cfg["metrics"]["min_per_model"])
        report.update({k: res[k] for k in ("nll", "se", "n", "n_infinite")})
        fmt = target.layout.format
        sp = target.space
        rows = [(fmt(sp.from_index([k])), v["count"], v["cross_entropy"] if v["cross_entropy"] is not None else math.nan)
                for k, v in sorted(res["per_model"].items())]
        keep = _model_filter(args, target.layout)
        if keep is not None:
            rows = [r for r in rows if r[0] in keep]
        _write_csv(out / "per_model_ce.csv", ["model", "count", "cross_entropy"], rows, st)
        if sp.size <= 2 ** 10:
            orc = M.oracle_model_posterior(target, method=cfg["metrics"]["oracle"], nodes=cfg["metrics"]["nodes"],
                                           max_quad_dim=cfg["metrics"]["max_quad_dim"], flow=tr.flow)
            q = tr.sampler.probs().detach().numpy()
            null_idx = 0
            dgp_idx = None
            if "truth" in meta:
                dgp_idx = int(sp.to_index(torch.as_tensor(np.asarray([meta["truth"]["gamma"]])))[0])
            sc = M.model_prob_scatter(q, orc.post, sp.enumerate(), fmt, null_idx, dgp_idx)
            _write_csv(out / "scatter.csv", ["model", "pi", "q", "log_pi", "log_q", "is_null", "is_dgp"],
                       [list(r.values()) for r in sc["rows"]], st)
            report.update({"tv": sc["tv"], "spearman": sc["spearman"]})
    else:
        n = cfg["metrics"]["n_posterior"]
        g = torch.Generator().manual_seed(cfg["seed"])
        models = tr.sampler.sample(n, g)
        A = target.layout.adjacency(models).numpy()
        probs = M.edge_probabilities(A)
        _write_csv(out / "edge_probs.csv", [f"x{j}" for j in range(target.N)], probs.tolist(), st)
        if "truth" in meta:
            report.update(M.dag_metrics(np.asarray(meta["truth"]["A"]), probs))
    _write_json(out / "evaluation.json", report)
    print(json.dumps({k: v for k, v in report.items() if not isinstance(v, (dict, list))}, default=_jsonable))
    return EXIT_OK


def cmd_oracle(cfg: dict, args) -> int:
    from .metrics import oracle_model_posterior

    out = output_dir(cfg, args.out)
    data, _ = read_dataset(_data_path(cfg, args, out))
    target = build_target(cfg, data)
    m = cfg["metrics"]
    orc = oracle_model_posterior(target, method=m["oracle"], nodes=m["nodes"], max_quad_dim=m["max_quad_dim"])
    fmt = target.layout.format
    rows = [(fmt(orc.models[i: i + 1]), float(orc.log_Z[i]), float(orc.log_prior[i]), float(orc.post[i]),
             orc.method[i], float(orc.entropy[i])) for i in range(len(orc.post))]
    keep = _model_filter(args, target.layout)
    if keep is not None:
        rows = [r for r in rows if r[0] in keep]
    _write_csv(out / "oracle.csv", ["model", "log_Z", "log_prior", "pi", "method", "entropy"], rows, stamp(cfg))
    print(f"wrote {out / 'oracle.csv'} ({len(rows)} models)")
    return EXIT_OK


def cmd_sweep(cfg: dict, args) -> int:
    """Cardinality sweep: |M| = 2^p robust-VS problems, short fixed-budget runs."""
    out = output_dir(cfg, args.out)
    sw = cfg["sweep"]
    st = stamp(cfg)
    rows = []
    for p in sw["p_values"]:
        t = cfg["target"]
        d = simulate_robustvs(t["misspec"], n=t["n"], p=int(p), seed=cfg["seed"], alpha=t["alpha"])
        target = RobustVsTarget(d.X, d.y, alpha=t["alpha"], sigma_beta=t["sigma_beta"],
                                sigma1=t["lik_sigma1"], sigma2=t["lik_sigma2"])
        tc = VtiConfig.from_dict({**cfg["trainer"], "iterations": int(sw["iterations"]), "log_every": 0})
        tr = Trainer(target, tc)
        t0 = time.time()
        try:
            tr.run()
        except TrainingDivergence as exc:
            print(f"error at p={p}: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        dgp = int(target.space.to_index(torch.as_tensor(d.gamma[None]))[0])
        with torch.no_grad():
            q_dgp = float(tr.sampler.log_mass(target.space.from_index([dgp]))[0].exp())
        tail = tr.losses[-max(1, len(tr.losses) // 10):]
        rows.append((int(p), 2 ** int(p), tc.sampler, tc.flow, float(np.mean(tail)), tr.entropy(), q_dgp,
                     time.time() - t0))
        print(f"p={p} loss={rows[-1][4]:.3f} q(dgp)={q_dgp:.3g}")
    _write_csv(out / "sweep.csv", ["p", "n_models", "sampler", "flow", "final_loss", "entropy", "q_dgp",
                                   "seconds"], rows, st)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "rjmcmc": cmd_rjmcmc, "evaluate": cmd_evaluate,
            "sweep": cmd_sweep, "oracle": cmd_oracle}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vti", description="Transdimensional variational inference")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML experiment file")
        sp.add_argument("--out", help="output directory (relative paths go under $VTI_OUTPUT_ROOT)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--target", dest="target.kind", choices=["robustvs", "dag", "sachs"])
        sp.add_argument("--misspec", dest="target.misspec")
        sp.add_argument("--n", dest="target.n", type=int)
        sp.add_argument("--p", dest="target.p", type=int)
        sp.add_argument("--nodes", dest="target.N", type=int)
        sp.add_argument("--data", help="dataset CSV (default <out>/data.csv)")
        sp.add_argument("--flow", dest="trainer.flow")
        sp.add_argument("--sampler", dest="trainer.sampler")
        sp.add_argument("--iterations", dest="trainer.iterations", type=int)
        sp.add_argument("--batch-size", dest="trainer.batch_size", type=int)
        if name == "train":
            sp.add_argument("--resume", help="checkpoint to continue from")
            sp.add_argument("--more", type=int, help="iterations to add when resuming")
        if name in ("evaluate", "oracle"):
            sp.add_argument("--model", action="append", help="restrict per-model tables to this model string")
        if name == "evaluate":
            sp.add_argument("--checkpoint")
            sp.add_argument("--samples", help="reference sample CSV (rjmcmc output)")
        if name == "rjmcmc":
            sp.add_argument("--steps", dest="rjmcmc.n_steps", type=int)
            sp.add_argument("--burn-in", dest="rjmcmc.burn_in", type=int)
            sp.add_argument("--thin", dest="rjmcmc.thin", type=int)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    torch.set_num_threads(max(1, args.threads))
    overrides = {k: v for k, v in vars(args).items() if "." in k}
    overrides["seed"] = args.seed
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingInput as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingDivergence, FloatingPointError) as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
