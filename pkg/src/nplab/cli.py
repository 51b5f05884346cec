"""Batch front-end: train, eval, oracle, and simulate subcommands.

Configuration is a flat ``key=value`` file; command-line flags override file
values.  Every stdout line is machine parseable as space-separated
``key=value`` tokens.  Exit codes: 0 success, 1 configuration error,
2 numerical abort, 3 reference-check failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

_MODEL_CHOICES = ("cnp", "gnp", "convcnp", "convgnp", "fullconvgnp")
_PROCESS_CHOICES = ("eq", "matern52", "weakly-periodic", "sawtooth", "mixture", "lv")
_SPLIT_CHOICES = ("int", "ooid", "ext")
_METRIC_CHOICES = ("kl", "loglik")

# Keys accepted in config files; flags use the same names.
_CONFIG_KEYS = {
    "model": str, "process": str, "split": str, "metric": str,
    "epochs": int, "seed": int, "out": str, "checkpoint": str,
    "n": int, "n_tasks": int, "dt": float, "sigma": float,
    "learning_rate": float, "batch_tasks": int, "tasks_per_epoch": int,
    "crossval_tasks": int,
    "points_per_unit": float, "margin": float, "unet_channels": int,
    "unet_levels": int, "rank": int, "enc_dim": int, "enc_width": int,
    "enc_layers": int, "dec_width": int, "dec_layers": int,
    "perturb": int, "iters": int,
}

_MODEL_KEYS = ("points_per_unit", "margin", "unet_channels", "unet_levels",
               "rank", "enc_dim", "enc_width", "enc_layers", "dec_width", "dec_layers")


class ConfigError(ValueError):
    pass


def _emit(**kwargs) -> None:
    print(" ".join(f"{k}={v}" for k, v in kwargs.items()), flush=True)


def _apply_thread_cap() -> None:
    cap = os.environ.get("NPLAB_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _read_config_file(path: str) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _CONFIG_KEYS[key](value.strip())
        except ValueError as e:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {e}") from e
    return values


def _merge_config(args: argparse.Namespace) -> dict:
    values = {}
    if getattr(args, "config", None):
        values.update(_read_config_file(args.config))
    for key in _CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return values


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nplab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")

    p_train = sub.add_parser("train", help="train a model and keep the best checkpoint")
    common(p_train)
    p_train.add_argument("--model", choices=_MODEL_CHOICES)
    p_train.add_argument("--process", choices=_PROCESS_CHOICES)
    p_train.add_argument("--split", choices=_SPLIT_CHOICES)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--learning-rate", dest="learning_rate", type=float)
    p_train.add_argument("--batch-tasks", dest="batch_tasks", type=int)
    p_train.add_argument("--tasks-per-epoch", dest="tasks_per_epoch", type=int)
    p_train.add_argument("--crossval-tasks", dest="crossval_tasks", type=int)
    for key in _MODEL_KEYS:
        p_train.add_argument(f"--{key.replace('_', '-')}", dest=key, type=_CONFIG_KEYS[key])

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint against references")
    common(p_eval)
    p_eval.add_argument("--checkpoint")
    p_eval.add_argument("--model", choices=_MODEL_CHOICES,
                        help="expected variant; must match the checkpoint")
    p_eval.add_argument("--process", choices=_PROCESS_CHOICES)
    p_eval.add_argument("--split", help="comma-separated subset of int,ooid,ext")
    p_eval.add_argument("--metric", help="comma-separated subset of kl,loglik")
    p_eval.add_argument("--n-tasks", dest="n_tasks", type=int)

    p_oracle = sub.add_parser("oracle", help="run the reference self-test battery")
    common(p_oracle)
    p_oracle.add_argument("--perturb", action="store_const", const=1,
                          help="inject a perturbation so the chain-rule check fails")
    p_oracle.add_argument("--iters", type=int)

    p_sim = sub.add_parser("simulate", help="emit predator-prey trajectories and tasks")
    common(p_sim)
    p_sim.add_argument("--n", type=int)
    p_sim.add_argument("--dt", type=float)
    p_sim.add_argument("--sigma", type=float, help="override the noise magnitude")
    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    args = _build_parser().parse_args(argv)
    try:
        cfg = _merge_config(args)
    except (ConfigError, OSError) as e:
        _emit(event="error", stage="config", message=repr(str(e)))
        return 1
    handler = {"train": cmd_train, "eval": cmd_eval,
               "oracle": cmd_oracle, "simulate": cmd_simulate}[args.command]
    try:
        return handler(cfg)
    except ConfigError as e:
        _emit(event="error", stage="config", message=repr(str(e)))
        return 1
    except (FloatingPointError, ArithmeticError) as e:
        _emit(event="error", stage="numerical", message=repr(str(e)))
        return 2


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg.get("out", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(cfg: dict, key: str, choices=None):
    if key not in cfg:
        raise ConfigError(f"missing required setting {key!r}")
    value = cfg[key]
    if choices and value not in choices:
        raise ConfigError(f"invalid {key}={value!r}; valid choices: {', '.join(choices)}")
    return value


def _model_config(cfg: dict, variant: str):
    from .models import ModelConfig

    kwargs = {key: cfg[key] for key in _MODEL_KEYS if key in cfg}
    return ModelConfig(variant=variant, seed=cfg.get("seed", 0), **kwargs)


def cmd_train(cfg: dict) -> int:
    from . import data as dat
    from .models import build_model
    from .train import TrainConfig, train_loop

    variant = _require(cfg, "model", _MODEL_CHOICES)
    process = _require(cfg, "process", _PROCESS_CHOICES)
    if process == "lv":
        raise ConfigError("training on the predator-prey simulator is not wired into the CLI; "
                          "use a synthetic process")
    split = dat.SPLITS[cfg.get("split", "int")]
    seed = cfg.get("seed", 0)
    tc_kwargs = {k: cfg[k] for k in ("learning_rate", "batch_tasks", "tasks_per_epoch",
                                     "crossval_tasks", "epochs") if k in cfg}
    tconfig = TrainConfig(seed=seed, **tc_kwargs)
    model = build_model(_model_config(cfg, variant))
    out = _out_dir(cfg)

    def log(line):
        print(f"event=epoch {line}", flush=True)

    _, history = train_loop(model, dat.PROCESSES[process], tconfig, split=split, log=log)
    ckpt = out / "best.ckpt"
    hist = out / "history.csv"
    model.save(ckpt)
    history.write_csv(hist)
    _emit(event="train", model=variant, process=process, split=split.name,
          epochs=tconfig.epochs, seed=seed, best_epoch=history.best_epoch,
          best_cv=f"{history.best_score:.6f}" if history.epochs else "nan",
          history=hist, checkpoint=ckpt)
    return 0


def cmd_eval(cfg: dict) -> int:
    from . import data as dat
    from . import evaluate as ev
    from .models import load_model
    from .train import STREAM_EVAL, seed_rng

    ckpt = _require(cfg, "checkpoint")
    if not Path(ckpt).exists():
        raise ConfigError(f"checkpoint {ckpt!r} does not exist")
    model = load_model(ckpt)
    if "model" in cfg and cfg["model"] != model.variant:
        raise ConfigError(f"checkpoint holds a {model.variant!r} model, not {cfg['model']!r}")
    process = _require(cfg, "process", _PROCESS_CHOICES)
    if process == "lv":
        raise ConfigError("eval on the predator-prey simulator is not wired into the CLI")
    proc = dat.PROCESSES[process]
    splits = [s.strip() for s in str(cfg.get("split", "int")).split(",")]
    metrics = [m.strip() for m in str(cfg.get("metric", "kl,loglik")).split(",")]
    for s in splits:
        if s not in _SPLIT_CHOICES:
            raise ConfigError(f"invalid split {s!r}; valid choices: {', '.join(_SPLIT_CHOICES)}")
    for m in metrics:
        if m not in _METRIC_CHOICES:
            raise ConfigError(f"invalid metric {m!r}; valid choices: {', '.join(_METRIC_CHOICES)}")
    if "kl" in metrics and not proc.is_gaussian:
        raise ConfigError(f"kl requested but {process!r} has no Gaussian reference")
    n_tasks = cfg.get("n_tasks", 512)
    seed = cfg.get("seed", 0)
    out = _out_dir(cfg)

    reports = []
    for k, split_name in enumerate(splits):
        rng = seed_rng(seed, STREAM_EVAL, k)
        tasks = [dat.sample_task(proc, dat.SPLITS[split_name], rng) for _ in range(n_tasks)]
        if "kl" in metrics:
            reports.append(ev.kl_metric(model, proc, tasks, mode="diagonal",
                                        model_name=model.variant, split_name=split_name))
            oracle_map = _diagonal_oracle(proc)
            reports.append(ev.kl_metric(oracle_map, proc, tasks, mode="diagonal",
                                        model_name="diagonal-oracle", split_name=split_name))
            reports.append(_trivial_kl(proc, tasks, split_name))
        if "loglik" in metrics:
            reports.append(ev.loglik_metric(model, tasks, process_name=proc.name,
                                            model_name=model.variant, split_name=split_name))
            if proc.is_gaussian:
                oracle_map = _diagonal_oracle(proc)
                reports.append(ev.loglik_metric(oracle_map, tasks, process_name=proc.name,
                                                model_name="diagonal-oracle",
                                                split_name=split_name))
            reports.append(ev.trivial_baseline(tasks, process_name=proc.name,
                                               split_name=split_name))
    path = out / "metrics.csv"
    ev.write_reports(path, reports)
    for r in reports:
        _emit(event="report", process=r.process, split=r.split, model=r.model,
              metric=r.metric, value=f"{r.value:.6f}", ci95=f"{r.ci95:.6f}",
              n_tasks=r.n_tasks)
    _emit(event="eval", checkpoint=ckpt, out=path, rows=len(reports))
    return 0


def _diagonal_oracle(proc):
    from . import gp

    return gp.diagonal_map(proc.kernel(), proc.noise_var)


def _trivial_kl(proc, tasks, split_name):
    import numpy as np

    from . import evaluate as ev
    from . import gp

    pooled = np.concatenate([t.y_t for t in tasks])
    mu, var = float(pooled.mean()), max(float(pooled.var()), ev.STD_FLOOR**2)

    def trivial_map(x_c, y_c, x_t):
        n = np.asarray(x_t).shape[0]
        return gp.MeanFieldPrediction(np.full(n, mu), np.full(n, var), 0.0)

    return ev.kl_metric(trivial_map, proc, tasks, mode="diagonal",
                        model_name="trivial", split_name=split_name)


def cmd_oracle(cfg: dict) -> int:
    import numpy as np

    from . import ar
    from . import data as dat
    from . import gp
    from .train import STREAM_EVAL, seed_rng

    seed = cfg.get("seed", 0)
    perturb = bool(cfg.get("perturb", 0))
    rng = seed_rng(seed, STREAM_EVAL)
    failures = 0

    # KL identities.
    kernel = gp.EQ(0.25)
    x = np.sort(rng.uniform(-2, 2, 5))
    joint = gp.posterior(kernel, x[:2], rng.standard_normal(2), x, 0.05)
    self_kl = gp.gaussian_kl(joint, joint)
    ok = abs(self_kl) < 1e-10
    failures += not ok
    _emit(check="kl_self", result="pass" if ok else "fail", value=f"{self_kl:.3e}")
    p = gp.GaussianJoint(np.zeros(1), np.eye(1), 0.0)
    q = gp.GaussianJoint(np.zeros(1), 2.0 * np.eye(1), 0.0)
    expected = 0.5 * (np.log(2.0) + 0.5 - 1.0)
    err = abs(gp.gaussian_kl(p, q) - expected)
    ok = err < 1e-12
    failures += not ok
    _emit(check="kl_closed_form", result="pass" if ok else "fail", error=f"{err:.3e}")

    # Chained one-point conditionals reproduce the joint density.
    noise = 0.05
    pmap = gp.diagonal_map(kernel, noise)
    if perturb:
        base = pmap

        def pmap(x_c, y_c, x_t):
            pred = base(x_c, y_c, x_t)
            return gp.MeanFieldPrediction(pred.mean + 0.05, pred.var, pred.noise_var)

    worst = 0.0
    for _ in range(20):
        n_c = int(rng.integers(0, 6))
        x_c = rng.uniform(-2, 2, n_c)
        y_c = gp.sample_prior(kernel, x_c, noise, rng) if n_c else np.zeros(0)
        x_t = rng.uniform(-2, 2, 5)
        joint = gp.posterior(kernel, x_c, y_c, x_t, noise)
        y_t = rng.standard_normal(5)
        chain = ar.ar_loglik(pmap, x_c, y_c, x_t, y_t, rng.permutation(5))
        worst = max(worst, abs(chain - gp.joint_logpdf(joint, y_t)))
    ok = worst < 1e-8
    failures += not ok
    _emit(check="chain_rule", result="pass" if ok else "fail", max_error=f"{worst:.3e}")

    # Jacobi iteration versus the dense solve on a strictly convergent
    # instance: observations midway between grid points keep the iteration
    # matrix well inside the unit spectral radius.
    grid = np.arange(64) / 8.0
    kern = gp.EQ(1.0 / 32.0)
    x_c = grid[np.arange(4, 60, 8)] + 1.0 / 16.0
    y_c = rng.standard_normal(x_c.shape[0])
    x_t = grid[np.arange(0, 64, 8)]
    iters = int(cfg.get("iters", 20))
    result = gp.sparse_mean_jacobi(kern, grid, x_c, y_c, x_t, iters)
    direct = gp.sparse_mean_direct(kern, grid, x_c, y_c, x_t)
    err = float(np.max(np.abs(result.mean - direct)))
    for i, res in enumerate(result.residuals):
        _emit(check="jacobi_residual", iter=i, residual=f"{res:.6e}")
    monotone = bool(np.all(np.diff(result.residuals) <= 1e-12))
    ok = err < 1e-6 and monotone
    failures += not ok
    _emit(check="jacobi", result="pass" if ok else "fail", error=f"{err:.3e}",
          monotone=str(monotone).lower())

    _emit(event="oracle", checks=4, failures=failures)
    return 3 if failures else 0


def cmd_simulate(cfg: dict) -> int:
    import dataclasses

    import numpy as np

    from . import data as dat
    from .train import STREAM_SIM, seed_rng

    n = cfg.get("n", 4)
    seed = cfg.get("seed", 0)
    dt = cfg.get("dt", 0.01)
    out = _out_dir(cfg)
    all_positive = True
    for i in range(n):
        rng = seed_rng(seed, STREAM_SIM, i)
        params = dat.sample_lv_params(rng)
        if "sigma" in cfg:
            params = dataclasses.replace(params, sigma=float(cfg["sigma"]))
        traj = dat.lv_simulate(params, dt=dt, rng=rng)
        all_positive &= bool(np.all(traj.prey > 0) and np.all(traj.predator > 0))
        path = out / f"trajectory_{i:03d}.csv"
        with open(path, "w") as fh:
            fh.write("t,prey,predator\n")
            for t, xv, yv in zip(traj.t, traj.prey, traj.predator):
                fh.write(f"{float(t)!r},{float(xv)!r},{float(yv)!r}\n")
        for kind in dat.LV_TASK_KINDS:
            task = dat.lv_make_tasks(traj, kind, rng)
            (out / f"task_{i:03d}_{kind}.csv").write_text(dat.task_to_csv(task))
        _emit(event="trajectory", index=i, file=path, sigma=f"{params.sigma:.4f}",
              positive=str(all_positive).lower())
    _emit(event="simulate", n=n, seed=seed, out=out, positive=str(all_positive).lower())
    return 0


if __name__ == "__main__":
    sys.exit(main())
