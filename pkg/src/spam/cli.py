"""Command-line experiment runner.

Verbs: ``run``, ``grid``, ``mc-study``, ``robustness``, ``csbm-verify``, ``check``.
Every verb except ``check`` reads a JSON config (schema in ``CONFIG_KEYS``)
and writes CSV tables plus an echo of the config into its output directory.
``SPAM_NUM_THREADS`` sets the torch thread count (default 1, deterministic).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .csbm import CsbmConfig, generate, margin_growth_check, orthogonal_means, posterior_consistency_trend, support_recovery_rate
from .graphcore import GraphDataset, load_dataset, make_split
from .robustness import KINDS, CurveRow, PerturbationSpec, robustness_curve, write_curve
from .training import ConfigError, TrainConfig, TrainResult, gcn_train, save_checkpoint, train

log = logging.getLogger("spam")

THREADS_ENV = "SPAM_NUM_THREADS"
METRIC_COLUMNS = ["epoch", "cls_loss", "sparse_loss", "struct_loss", "total_loss", "val_acc"]

CONFIG_KEYS = {
    "tag": "run label written into summary rows (default 'run')",
    "output_dir": "directory for all outputs (required)",
    "seeds": "list of integer seeds (default [0])",
    "model": "'spam' or 'gcn' (default 'spam')",
    "dataset": "exactly one of {'path': dir} or {'csbm': {...}}",
    "split": "train/val/test fractions (default [0.6, 0.2, 0.2])",
    "train": "TrainConfig overrides",
    "perturbation": "optional {'kind', 'magnitude'} applied before training",
    "checkpoint": "write per-seed checkpoints (default true)",
    "grid": "for 'grid': {'lam_sp': [...], 'lam_st': [...]}",
    "K_list": "for 'mc-study': ascending list of MC sample counts",
    "robustness": "for 'robustness': {'kind', 'grid'}",
}
CSBM_KEYS = {"n", "C", "d", "p_in", "p_out", "s", "mean_scale", "seed"}


@dataclass
class ExperimentConfig:
    output_dir: Path
    dataset: dict
    tag: str = "run"
    seeds: list = field(default_factory=lambda: [0])
    model: str = "spam"
    split: tuple = (0.6, 0.2, 0.2)
    train: TrainConfig = field(default_factory=TrainConfig)
    perturbation: PerturbationSpec | None = None
    checkpoint: bool = True
    grid: dict | None = None
    K_list: list | None = None
    robustness: dict | None = None
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(CONFIG_KEYS)
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        if "output_dir" not in d:
            raise ConfigError("missing required field 'output_dir'")
        ds = d.get("dataset")
        if not isinstance(ds, dict) or len(ds) != 1 or next(iter(ds)) not in ("path", "csbm"):
            raise ConfigError("field 'dataset' must hold exactly one of 'path' or 'csbm'")
        if "csbm" in ds:
            bad = set(ds["csbm"]) - CSBM_KEYS
            if bad:
                raise ConfigError(f"unknown field(s) in 'dataset.csbm': {sorted(bad)}")
        seeds = d.get("seeds", [0])
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("field 'seeds' must be a non-empty list of integers")
        model = d.get("model", "spam")
        if model not in ("spam", "gcn"):
            raise ConfigError("field 'model' must be 'spam' or 'gcn'")
        train_cfg = TrainConfig.from_dict(d.get("train", {}))
        pert = None
        if d.get("perturbation") is not None:
            p = d["perturbation"]
            if set(p) - {"kind", "magnitude"}:
                raise ConfigError("field 'perturbation' takes only 'kind' and 'magnitude'")
            try:
                pert = PerturbationSpec(p["kind"], float(p["magnitude"]))
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"field 'perturbation': {exc}") from exc
        grid = d.get("grid")
        if grid is not None:
            if set(grid) != {"lam_sp", "lam_st"} or not grid["lam_sp"] or not grid["lam_st"]:
                raise ConfigError("field 'grid' needs non-empty 'lam_sp' and 'lam_st' lists")
        K_list = d.get("K_list")
        if K_list is not None:
            if not K_list or any(k < 1 for k in K_list) or sorted(K_list) != list(K_list):
                raise ConfigError("field 'K_list' must be an ascending list of integers >= 1")
        rob = d.get("robustness")
        if rob is not None:
            if set(rob) != {"kind", "grid"} or rob["kind"] not in KINDS:
                raise ConfigError(f"field 'robustness' needs 'kind' in {KINDS} and 'grid'")
        return cls(
            output_dir=Path(d["output_dir"]),
            dataset=ds,
            tag=str(d.get("tag", "run")),
            seeds=seeds,
            model=model,
            split=tuple(d.get("split", (0.6, 0.2, 0.2))),
            train=train_cfg,
            perturbation=pert,
            checkpoint=bool(d.get("checkpoint", True)),
            grid=grid,
            K_list=K_list,
            robustness=rob,
            raw=d,
        )


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


def csbm_config(spec: dict, seed: int) -> CsbmConfig:
    C = spec.get("C", 2)
    d = spec.get("d", 8)
    return CsbmConfig(
        n=spec.get("n", 400),
        C=C,
        p_in=spec.get("p_in", 0.05),
        p_out=spec.get("p_out", 0.2),
        means=orthogonal_means(C, d, spec.get("mean_scale", 1.0)),
        s=spec.get("s", 0.5),
        seed=spec.get("seed", seed),
    )


def build_dataset(cfg: ExperimentConfig, seed: int) -> GraphDataset:
    """Dataset for one seed; a CSBM without a fixed seed is redrawn per run."""
    if "path" in cfg.dataset:
        g = load_dataset(cfg.dataset["path"])
    else:
        g, _ = generate(csbm_config(cfg.dataset["csbm"], seed))
    if cfg.perturbation is not None:
        g = replace(cfg.perturbation, seed=seed).apply(g)
    return g


def fit(g: GraphDataset, seed: int, model: str, train_cfg: TrainConfig, split_fr=(0.6, 0.2, 0.2)) -> tuple[TrainResult, np.ndarray]:
    split = make_split(g, split_fr, seed=seed)
    cfg = replace(train_cfg, seed=seed)
    res = train(g, split, cfg) if model == "spam" else gcn_train(g, split, cfg)
    return res, split.test


def write_metrics(path: Path, history: list) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in METRIC_COLUMNS[1:]])


def summary_rows(tag: str, accs: dict) -> list[list]:
    """Per-seed rows followed by ``mean`` and ``std`` (sample, ddof=1) rows."""
    vals = np.array(list(accs.values()), dtype=np.float64)
    rows = [[tag, s, repr(float(a))] for s, a in accs.items()]
    ok = vals[~np.isnan(vals)]
    mean = float(ok.mean()) if len(ok) else math.nan
    std = float(ok.std(ddof=1)) if len(ok) > 1 else 0.0
    rows.append([tag, "mean", repr(mean)])
    rows.append([tag, "std", repr(std)])
    return rows


def write_csv(path: Path, header: list, rows: list) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def echo_config(cfg: ExperimentConfig, verb: str) -> None:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    echo = dict(cfg.raw)
    echo["train"] = asdict(cfg.train)
    echo["verb"] = verb
    (cfg.output_dir / "config.json").write_text(json.dumps(echo, indent=2, default=str), encoding="utf-8")


def run_seeds(cfg: ExperimentConfig, out: Path, train_cfg: TrainConfig | None = None) -> dict:
    train_cfg = train_cfg or cfg.train
    accs = {}
    for seed in cfg.seeds:
        g = build_dataset(cfg, seed)
        res, test = fit(g, seed, cfg.model, train_cfg, cfg.split)
        cell = out / f"seed_{seed}"
        write_metrics(cell / "metrics.csv", res.history)
        if cfg.checkpoint:
            save_checkpoint(cell / "checkpoint", res.model, res.cfg, res.best_epoch, res.best_val)
        accs[seed] = res.evaluate(test)
        log.info("%s seed %d: test accuracy %.4f", cfg.tag, seed, accs[seed])
    return accs


# -- verbs --------------------------------------------------------------------


def cmd_run(cfg: ExperimentConfig) -> int:
    echo_config(cfg, "run")
    accs = run_seeds(cfg, cfg.output_dir)
    write_csv(cfg.output_dir / "summary.csv", ["tag", "seed", "test_acc"], summary_rows(cfg.tag, accs))
    return 0


def cmd_grid(cfg: ExperimentConfig) -> int:
    if cfg.grid is None:
        raise ConfigError("verb 'grid' needs field 'grid'")
    echo_config(cfg, "grid")
    rows = []
    for a in cfg.grid["lam_sp"]:
        for b in cfg.grid["lam_st"]:
            tc = replace(cfg.train, lam_sp=float(a), lam_st=float(b))
            cell = cfg.output_dir / f"lam_sp={a}_lam_st={b}"
            accs = run_seeds(cfg, cell, tc)
            vals = np.array(list(accs.values()))
            std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            rows.append([cfg.tag, repr(float(a)), repr(float(b)), repr(float(vals.mean())), repr(std), len(vals)])
    write_csv(cfg.output_dir / "grid.csv", ["tag", "lam_sp", "lam_st", "mean_acc", "std_acc", "n_seeds"], rows)
    return 0


def mc_study(cfg: ExperimentConfig) -> dict:
    """Train once per seed, then evaluate the test accuracy at every K."""
    if cfg.model != "spam":
        raise ConfigError("mc-study needs model 'spam'")
    table = {K: [] for K in cfg.K_list}
    for seed in cfg.seeds:
        g = build_dataset(cfg, seed)
        res, test = fit(g, seed, "spam", cfg.train, cfg.split)
        for K in cfg.K_list:
            table[K].append(res.evaluate(test, K=K))
    return table


def cmd_mc_study(cfg: ExperimentConfig) -> int:
    if cfg.K_list is None:
        raise ConfigError("verb 'mc-study' needs field 'K_list'")
    echo_config(cfg, "mc-study")
    table = mc_study(cfg)
    rows = []
    for K, accs in table.items():
        std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
        rows.append([cfg.tag, K, repr(float(np.mean(accs))), repr(std), len(accs)])
    write_csv(cfg.output_dir / "mc_study.csv", ["tag", "K", "mean_acc", "std_acc", "n_seeds"], rows)
    return 0


def cmd_robustness(cfg: ExperimentConfig) -> int:
    if cfg.robustness is None:
        raise ConfigError("verb 'robustness' needs field 'robustness'")
    echo_config(cfg, "robustness")
    base = replace(cfg, perturbation=None)
    kind, grid = cfg.robustness["kind"], cfg.robustness["grid"]
    rows_all = []
    for seed in cfg.seeds:
        g = build_dataset(base, seed)

        def trainer(pg, s, seed=seed):
            res, test = fit(pg, seed, cfg.model, cfg.train, cfg.split)
            return res.evaluate(test)

        rows_all.append(robustness_curve(g, trainer, kind, grid, [seed]))
    # merge per-seed curves into one table
    merged = []
    for k, mag in enumerate(grid):
        accs = [r[k].accs[0] for r in rows_all]
        ok = [a for a in accs if not math.isnan(a)]
        merged.append(
            CurveRow(
                float(mag),
                float(np.mean(ok)) if ok else math.nan,
                float(np.std(ok, ddof=1)) if len(ok) > 1 else (0.0 if ok else math.nan),
                len(ok),
                accs,
            )
        )
    write_curve(cfg.output_dir / "robustness.csv", merged, cfg.tag)
    return 0


def cmd_csbm_verify(cfg: ExperimentConfig | None, trials: int = 20, out: Path | None = None) -> int:
    spec = {} if cfg is None or "csbm" not in cfg.dataset else cfg.dataset["csbm"]
    base = csbm_config({**{"n": 400, "C": 2}, **spec}, 0)
    d = base.d
    rate = margin_growth_check(base, np.eye(d), np.eye(d), np.eye(d), trials)
    # separated regime: |mu| = 3, s = |mu| / 8, threshold at the signal energy |mu|^2
    sep = replace(base, means=orthogonal_means(base.C, d, 3.0), s=3.0 / 8)
    prec, rec = support_recovery_rate(sep, lam=9.0, trials=trials)
    rows = [["margin_growth_rate", repr(rate)], ["support_precision", repr(prec)], ["support_recall", repr(rec)]]
    if cfg is not None:
        kls = posterior_consistency_trend(base, (0.1, 0.3, 0.6), cfg.train, seeds=cfg.seeds)
        rows += [[f"posterior_kl@{f}", repr(k)] for f, k in zip((0.1, 0.3, 0.6), kls)]
    for name, val in rows:
        print(f"{name},{val}")
    if out is not None:
        write_csv(out / "csbm_verify.csv", ["check", "value"], rows)
    return 0


def cmd_check() -> int:
    """Quick gradient and LASSO oracle checks; exit 1 on any failure."""
    from .sparsecode import LassoProblem, kkt_residual, solve_lasso_cd

    rng = np.random.default_rng(0)
    worst_kkt = 0.0
    for _ in range(50):
        k, dv = int(rng.integers(1, 5)), int(rng.integers(1, 7))
        p = LassoProblem(rng.standard_normal(dv), rng.standard_normal((dv, k)), float(rng.uniform(0.01, 1.0)))
        worst_kkt = max(worst_kkt, kkt_residual(p, solve_lasso_cd(p).alpha))
    err = gradient_check_error()
    ok_kkt, ok_grad = worst_kkt < 1e-6, err < 1e-4
    print(f"lasso_kkt_residual,{worst_kkt!r},{'pass' if ok_kkt else 'FAIL'}")
    print(f"gradient_rel_error,{err!r},{'pass' if ok_grad else 'FAIL'}")
    return 0 if ok_kkt and ok_grad else 1


def gradient_check_error(seed: int = 0) -> float:
    """Finite-difference check of the full training loss on a 6-node graph."""
    from .diffmath import grad_check
    from .posterior import gumbel_noise
    from .training import SpaM, TrainContext, loss_total

    rng = np.random.default_rng(seed)
    edges = [(0, 1), (0, 2), (1, 3), (2, 4), (3, 5), (4, 5), (1, 4)]
    g = GraphDataset.from_raw(rng.standard_normal((6, 3)), np.array([0, 1, 0, 1, 0, 1]), edges, C=2)
    split = make_split(g, (0.5, 0.0, 0.5), seed=seed)
    cfg = TrainConfig(n_layers=2, K=2, hidden=4, d_val=3, enc_hidden=4, dec_hidden=4, dropout=0.0, seed=seed)
    torch.manual_seed(seed)
    model = SpaM(g.d, g.C, cfg)
    for layer in model.net.layers:
        # finite differences see the step size move with the weights
        layer.differentiable_step = True
    ctx = TrainContext(g, split)
    gen = torch.Generator().manual_seed(seed)
    noise = [gumbel_noise(g.m, gen) for _ in range(cfg.K)]

    def f():
        return loss_total(model, ctx, cfg, tau=0.5, noise=noise, hard=False, training=False).total

    return grad_check(f, list(model.parameters()), h=1e-6)


# -- entry point --------------------------------------------------------------


def set_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    torch.set_num_threads(n)
    return n


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spam", description="Sparse signed message passing experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb in ("run", "grid", "mc-study", "robustness"):
        sp = sub.add_parser(verb)
        sp.add_argument("config", help="JSON experiment config")
    sp = sub.add_parser("csbm-verify", help="margin growth, support recovery and posterior checks")
    sp.add_argument("config", nargs="?", help="optional JSON config; enables the posterior trend check")
    sp.add_argument("--trials", type=int, default=20)
    sub.add_parser("check", help="gradient and LASSO oracle checks")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        set_threads()
        if args.verb == "check":
            return cmd_check()
        if args.verb == "csbm-verify":
            cfg = load_config(args.config) if args.config else None
            return cmd_csbm_verify(cfg, args.trials, cfg.output_dir if cfg else None)
        cfg = load_config(args.config)
        handler = {"run": cmd_run, "grid": cmd_grid, "mc-study": cmd_mc_study, "robustness": cmd_robustness}[args.verb]
        return handler(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.exception("run aborted")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
