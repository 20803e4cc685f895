"""Command line pipeline: simulate -> train -> predict / evaluate / ablate / search / bench.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import ballsim, evalkit, tvae
from . import neuralkit as nk
from .trajkit import DataError, Dataset, TimeGrid, first_observed_prefix, make_prefix, read_dataset, \
    resample_to_grid, write_dataset

log = logging.getLogger("trajvae")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
VERBS = ("simulate", "train", "predict", "evaluate", "ablate", "search", "bench")
PHYSICS_KEYS = {f.name for f in fields(ballsim.PhysicsParams)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_usage()}")


def _add_train_flags(p):
    p.add_argument("--k", type=int, help="latent dimension (default 16)")
    p.add_argument("--hidden", type=int, help="hidden width (default 64)")
    p.add_argument("--ci", action=argparse.BooleanOptionalAction, help="decoder ignores the prefix")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--mc", type=int, help="Monte-Carlo samples per training element")
    p.add_argument("--p-miss", type=float)
    p.add_argument("--p-outlier", type=float)
    p.add_argument("--prefix-recon", type=float, help="weight of the prefix-sampled reconstruction term")
    p.add_argument("--kl-stop-grad", action=argparse.BooleanOptionalAction)


def build_parser() -> argparse.ArgumentParser:
    top = _Parser(prog="trajvae", description="Trajectory VAE pipeline for ball flight prediction.")
    top.add_argument("--seed", type=int, help="seed for all randomness (default 0)")
    top.add_argument("--config", help="key = value file; flags given on the command line win")
    top.add_argument("-v", "--verbose", action="store_true", default=None)
    sub = top.add_subparsers(dest="verb", metavar="verb", parser_class=_Parser)
    common = _Parser(add_help=False)
    # SUPPRESS keeps a value given before the verb from being reset by the subcommand
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS)

    p = sub.add_parser("simulate", parents=[common], help="write a simulated dataset")
    p.add_argument("--count", type=int, help="total trajectories (test share round(count/11))")
    p.add_argument("--test-count", type=int)
    p.add_argument("--noise-std", type=float, help="sensor noise std in metres (default 0.01)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model on the train split")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="model file; the history goes to <out>.history.csv")
    _add_train_flags(p)

    p = sub.add_parser("predict", parents=[common], help="sample futures for each trajectory in a prefix file")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="prefix file in the dataset line format")
    p.add_argument("--out", required=True)
    p.add_argument("--given", type=int, help="keep only the first GIVEN observations of each record")
    p.add_argument("--samples", type=int, help="ensemble size L (default 30)")
    p.add_argument("--moments", action="store_true", default=None, help="write mean + per-step covariance instead of samples")
    p.add_argument("--sigma-zero", action="store_true", default=None, help="debug: decode the latent mean only")

    p = sub.add_parser("evaluate", parents=[common], help="error curves on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--model", help="also evaluate this model next to the physics baseline")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--given", type=int, help="prefix length for the error-vs-future-step curve (default 30)")
    p.add_argument("--samples", type=int)
    p.add_argument("--region", choices=("trajectory", "future"), help="error-vs-given averaging region")

    p = sub.add_parser("ablate", parents=[common], help="train CI and full decoders and compare")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--given", type=int)
    p.add_argument("--samples", type=int)
    _add_train_flags(p)

    p = sub.add_parser("search", parents=[common], help="grid search over latent size and hidden width")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="table file")
    p.add_argument("--ks", help="comma-separated latent sizes (default 16,32,64,128)")
    p.add_argument("--hiddens", help="comma-separated widths (default 64,128,256,512)")
    _add_train_flags(p)

    p = sub.add_parser("bench", parents=[common], help="prediction latency")
    p.add_argument("--model", help="model file (default: untrained model at --k/--hidden)")
    p.add_argument("--k", type=int, help="latent size of the default model (64)")
    p.add_argument("--hidden", type=int, help="hidden width of the default model (256)")
    p.add_argument("--samples", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--given", type=int)
    p.add_argument("--out", help="also write the report here")
    return top


DEFAULTS = {
    "seed": 0, "count": 2200, "test_count": None, "noise_std": 0.01,
    "given": 30, "samples": 30, "region": "trajectory", "reps": 30,
    "ks": "16,32,64,128", "hiddens": "64,128,256,512",
}
BENCH_DEFAULTS = {"k": 64, "hidden": 256, "given": 40}
TRAIN_KEYS = {"k": "latent_dim", "hidden": "hidden", "ci": "ci", "epochs": "epochs", "batch": "batch_size",
              "lr": "lr", "mc": "mc_samples", "p_miss": "p_miss", "p_outlier": "p_outlier",
              "prefix_recon": "prefix_recon", "kl_stop_grad": "kl_stop_grad"}


def _coerce(key, text, parser):
    """Convert a config-file string with the type the matching flag would use."""
    for action in parser._actions:
        if action.dest == key:
            if isinstance(action, argparse.BooleanOptionalAction) or action.const is True:
                low = text.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise UsageError(f"config: {key} expects a boolean, got {text!r}")
                return low in ("true", "1", "yes")
            try:
                return action.type(text) if action.type else text
            except ValueError:
                raise UsageError(f"config: bad value for {key}: {text!r}") from None
    return None


def resolve(argv):
    """Parse ``argv`` and merge defaults < config file < flags. Returns (verb, settings, physics)."""
    parser = build_parser()
    ns = parser.parse_args(argv)
    if ns.verb is None:
        raise UsageError(parser.format_help())
    sub = parser._subparsers._group_actions[0].choices[ns.verb]
    flags = {k: v for k, v in vars(ns).items() if v is not None}
    known = {a.dest for a in sub._actions} | {"seed"}
    settings = dict(DEFAULTS)
    if ns.verb == "bench":
        settings.update(BENCH_DEFAULTS)
    physics = {}
    if ns.config:
        try:
            text = Path(ns.config).read_text(encoding="utf-8")
        except OSError as e:
            raise DataError(f"cannot read config {ns.config}: {e.strerror}") from None
        for key, value in ballsim.parse_key_values(text).items():
            if key in PHYSICS_KEYS:
                physics[key] = value
            elif key in known:
                settings[key] = _coerce(key, value, sub if key != "seed" else parser)
            else:
                raise UsageError(f"config: unknown key {key!r} for '{ns.verb}'")
    settings.update(flags)
    settings = {k: v for k, v in settings.items() if k in known or k in ("config", "verbose")}
    return ns.verb, settings, ballsim.params_from_mapping(physics)


def _print_config(verb, settings, physics):
    print(f"# trajvae {verb}")
    for key in sorted(settings):
        print(f"{key} = {settings[key]}")
    if verb in ("train", "ablate", "search"):
        print("# training")
        for key, value in _train_config(settings).as_dict().items():
            print(f"{key} = {value}")
    if verb in ("simulate", "evaluate"):
        print("# physics")
        sys.stdout.write(ballsim.dump_params(physics))
    sys.stdout.flush()


def _train_config(s) -> tvae.TrainConfig:
    kw = {TRAIN_KEYS[k]: s[k] for k in TRAIN_KEYS if s.get(k) is not None}
    return tvae.TrainConfig(seed=s["seed"], **kw)


def _out_dir(path) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _ints(text, name):
    try:
        vals = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--{name} expects comma-separated integers") from None
    if not vals:
        raise UsageError(f"--{name} is empty")
    return vals


# ---------------------------------------------------------------- verbs


def cmd_simulate(s, physics):
    count = s["count"]
    n_test = s["test_count"] if s["test_count"] is not None else int(round(count / 11))
    if count < 1 or not 0 <= n_test <= count:
        raise UsageError("--count must be >= 1 and --test-count within [0, count]")
    ds = ballsim.synth_dataset(count - n_test, n_test, p=physics, noise_std=s["noise_std"], seed=s["seed"])
    write_dataset(s["out"], ds)
    sizes = ds.split_sizes()
    print(f"wrote {len(ds)} trajectories to {s['out']} (train {sizes['train']}, test {sizes['test']})")


def cmd_train(s, physics):
    ds = read_dataset(s["data"])
    cfg = _train_config(s)
    model, hist = tvae.train(ds, cfg)
    tvae.save_model(s["out"], model)
    hist_path = f"{s['out']}.history.csv"
    Path(hist_path).write_text(hist.to_csv(), encoding="utf-8")
    print(f"wrote {s['out']} and {hist_path} (best epoch {hist.best_epoch})")


def _check_prefix_grid(tr, grid: TimeGrid):
    if len(tr.t) > 1:
        step = float(np.median(np.diff(tr.t)))
        if abs(step - grid.dt) > 0.25 * grid.dt:
            raise DataError(f"trajectory {tr.id}: sample interval {step:.6g} s does not match model grid "
                            f"dt {grid.dt:.6g} s")
    if tr.t[-1] - tr.t[0] > grid.dt * (grid.steps - 0.5):
        raise DataError(f"trajectory {tr.id}: prefix spans {tr.t[-1] - tr.t[0]:.3f} s, longer than the "
                        f"model horizon {grid.dt * grid.steps:.3f} s")


def cmd_predict(s, physics):
    model = tvae.load_model(s["model"])
    ds = read_dataset(s["data"])
    n_samples = s["samples"]
    if n_samples < 1 or (s.get("moments") and n_samples < 2):
        raise UsageError("--samples must be >= 1 (>= 2 with --moments)")
    rng = np.random.default_rng(s["seed"])
    lines = []
    for tr in sorted(ds, key=lambda tr: tr.id):
        _check_prefix_grid(tr, model.grid)
        grid = model.grid.shifted(float(tr.t[0]))
        obs = resample_to_grid(tr, grid)
        given = s.get("given")
        prefix = first_observed_prefix(obs, given) if given is not None else make_prefix(obs, obs.length)
        ens = tvae.predict_ensemble(model, prefix, n_samples, rng, sigma_zero=s.get("sigma_zero", False))
        times = grid.times.tolist()
        base = {"id": tr.id, "t": times, "split": tr.split, "cut": prefix.cut}
        if s.get("moments"):
            mean, cov = tvae.ensemble_moments(ens)
            lines.append(json.dumps({**base, "pos": mean.tolist(), "cov": cov.tolist()}, separators=(",", ":")))
        else:
            for i, sample in enumerate(ens.samples):
                lines.append(json.dumps({**base, "sample": i, "pos": sample.tolist()}, separators=(",", ":")))
    Path(s["out"]).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    print(f"wrote {len(lines)} records to {s['out']}")


def _write_curve(d: Path, name: str, curve: evalkit.ErrorCurve) -> Path:
    path = d / f"{name}.csv"
    path.write_text(curve.to_csv(), encoding="utf-8")
    return path


def cmd_evaluate(s, physics):
    from . import plotting

    ds = read_dataset(s["data"])
    test = ds.split("test")
    if not test:
        raise DataError("dataset has no test split")
    d = _out_dir(s["out"])
    grid = TimeGrid()
    preds = [evalkit.physics_predictor(grid, physics)]
    if s.get("model"):
        model = tvae.load_model(s["model"])
        grid = model.grid
        preds = [evalkit.physics_predictor(grid, physics), evalkit.tvae_predictor(model, s["samples"], s["seed"])]
    future, given = [], []
    summary = []
    for pred in preds:
        fut = evalkit.error_vs_future_step(pred, test, s["given"], grid)
        vs = evalkit.error_vs_given(pred, test, grid=grid, region=s["region"])
        _write_curve(d, f"{pred.tag}_future_step", fut)
        _write_curve(d, f"{pred.tag}_given", vs)
        future.append(fut)
        given.append(vs)
        summary.append(f"{pred.tag}: mean future error given {s['given']} = {fut.overall():.4f} m; "
                       f"error at 5/30/50 given = " + "/".join(
                           f"{vs.at(g):.4f}" if g in vs.abscissa else "n/a" for g in (5, 30, 50)))
    plotting.plot_curves(future, d / "future_step.png", "steps into the future",
                         f"prediction error, {s['given']} observations given")
    plotting.plot_curves(given, d / "given.png", "number of given observations", f"{s['region']} error")
    evalkit.write_summary(d / "summary.txt", summary)
    print("\n".join(summary))


def cmd_ablate(s, physics):
    from . import plotting

    ds = read_dataset(s["data"])
    if not ds.split("test"):
        raise DataError("dataset has no test split")
    d = _out_dir(s["out"])
    cfg = _train_config(s)
    res = evalkit.ablation_ci(ds, cfg, s["given"], s["samples"])
    _write_curve(d, "ci_future_step", res.ci)
    _write_curve(d, "full_future_step", res.full)
    plotting.plot_curves([res.ci, res.full], d / "ablation.png", "steps into the future", "CI ablation")
    evalkit.write_summary(d / "summary.txt", [res.summary()])
    print(res.summary())


def cmd_search(s, physics):
    ds = read_dataset(s["data"])
    best, rows = tvae.hyper_search(ds, _train_config(s), _ints(s["ks"], "ks"), _ints(s["hiddens"], "hiddens"))
    lines = ["latent_dim,hidden,val_loss,best_epoch"]
    lines += [f"{r['latent_dim']},{r['hidden']},{r['val_loss']!r},{r['best_epoch']}" for r in rows]
    Path(s["out"]).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"best: latent_dim = {best.latent_dim}, hidden = {best.hidden}")


def cmd_bench(s, physics):
    if s.get("model"):
        model = tvae.load_model(s["model"])
    else:
        rng = np.random.default_rng(s["seed"])
        model = tvae.TvaeModel.create(TimeGrid(), s["k"], s["hidden"], rng=rng)
    tr = ballsim.synth_dataset(1, 0, grid=model.grid, seed=s["seed"]).trajectories[0]
    prefix = first_observed_prefix(resample_to_grid(tr, model.grid), s["given"])
    report = evalkit.latency_bench(model, prefix, s["samples"], s["reps"], seed=s["seed"])
    print(report)
    if s.get("out"):
        Path(s["out"]).write_text(str(report) + "\n", encoding="utf-8")


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "predict": cmd_predict, "evaluate": cmd_evaluate,
            "ablate": cmd_ablate, "search": cmd_search, "bench": cmd_bench}


def dispatch(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        verb, settings, physics = resolve(argv)
    except UsageError as e:
        print(str(e).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=logging.INFO if settings.get("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    _print_config(verb, settings, physics)
    try:
        COMMANDS[verb](settings, physics)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, nk.FormatError, nk.ShapeError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (tvae.NumericError, nk.ExplodedError, ballsim.DivergedError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
