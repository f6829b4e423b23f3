"""``gradlayer`` command line: training, generation, evaluation and demos.

Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure,
4 I/O failure. Every failure prints an ``error_code=N`` line on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import datasets, diagnostics, seeding, wgan
from .gradient_layer import StackFormatError, load, read_meta, save, write_meta
from .nn_core import Activation, DenseNet, NetSpec, init_net
from .optim import NonFiniteGradient, make_settings
from .ot_oracle import brute_force_wasserstein, wasserstein

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code, message, **fields):
        super().__init__(message)
        self.code = code
        self.fields = fields


# --- config -----------------------------------------------------------------

# key -> parser; every key here must appear in a training config
TRAIN_KEYS = {
    "dataset": str, "batch": int, "T": int, "T0": int, "lam": float, "penalty": str,
    "eta": float, "optimizer": str, "noise_std": float, "seed": int,
}
OPTIMIZER_KEYS = {
    "adam": {"alpha": float, "beta1": float, "beta2": float},
    "rmsprop": {"lr": float, "decay": float},
    "sgd_momentum": {"lr": float, "momentum": float},
}
OPTIONAL_KEYS = {
    "data_size": (int, None), "critic_hidden": (str, "128,128,128"),
    "critic_activation": (str, "leaky_relu(0.2)"), "squash": (str, "tanh"),
    "adam_eps": (float, 1e-8), "rms_eps": (float, 1e-8), "n_eval": (int, None),
    # assist mode
    "assist_layers": (int, 0), "noise_dim": (int, 2), "generator_hidden": (str, "128,128,128"),
    "generator_activation": (str, "leaky_relu(0.2)"), "generator_output": (str, "tanh"),
}


def parse_cfg_text(text: str, source="config") -> dict:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(EXIT_CONFIG, f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in raw:
            raise CliError(EXIT_CONFIG, f"{source}:{lineno}: duplicate key {key!r}", key=key)
        raw[key] = value
    return raw


def _convert(key, value, typ):
    try:
        return typ(value)
    except ValueError:
        raise CliError(EXIT_CONFIG, f"bad value for {key}: {value!r}", key=key) from None


def resolve_config(raw: dict, seed_override=None) -> dict:
    """Typed, complete config; missing or unknown keys are configuration errors."""
    cfg = {}
    for key, typ in TRAIN_KEYS.items():
        if key not in raw:
            raise CliError(EXIT_CONFIG, f"missing config key: {key}", missing_key=key)
        cfg[key] = _convert(key, raw[key], typ)
    opt_keys = OPTIMIZER_KEYS.get(cfg["optimizer"])
    if opt_keys is None:
        raise CliError(EXIT_CONFIG, f"unknown optimizer {cfg['optimizer']!r}", key="optimizer")
    for key, typ in opt_keys.items():
        if key not in raw:
            raise CliError(EXIT_CONFIG, f"missing config key: {key}", missing_key=key)
        cfg[key] = _convert(key, raw[key], typ)
    for key, (typ, default) in OPTIONAL_KEYS.items():
        cfg[key] = _convert(key, raw[key], typ) if key in raw else default
    unknown = sorted(set(raw) - set(cfg))
    if unknown:
        raise CliError(EXIT_CONFIG, f"unknown config key: {unknown[0]}", key=unknown[0])
    if seed_override is not None:
        cfg["seed"] = seed_override
    if not 0 <= cfg["seed"] < 2 ** 64:
        raise CliError(EXIT_CONFIG, "seed must be a u64", key="seed")
    if cfg["dataset"] not in datasets.TOY_SIZES:
        raise CliError(EXIT_CONFIG, f"unknown dataset {cfg['dataset']!r}", key="dataset")
    if cfg["data_size"] is None:
        cfg["data_size"] = datasets.TOY_SIZES[cfg["dataset"]]
    return cfg


def load_config(path, seed_override=None) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config {path}: {exc}") from None
    return resolve_config(parse_cfg_text(text, str(path)), seed_override)


def optimizer_settings(cfg):
    kind = cfg["optimizer"]
    if kind == "adam":
        return make_settings(kind, alpha=cfg["alpha"], beta1=cfg["beta1"], beta2=cfg["beta2"],
                             eps=cfg["adam_eps"])
    if kind == "rmsprop":
        return make_settings(kind, lr=cfg["lr"], decay=cfg["decay"], eps=cfg["rms_eps"])
    return make_settings(kind, lr=cfg["lr"], momentum=cfg["momentum"])


def train_config(cfg) -> wgan.TrainConfig:
    try:
        return wgan.TrainConfig(batch=cfg["batch"], T=cfg["T"], T0=cfg["T0"], lam=cfg["lam"],
                                eta=cfg["eta"], penalty=cfg["penalty"],
                                optimizer=optimizer_settings(cfg), seed=cfg["seed"],
                                assist_layers=cfg["assist_layers"])
    except (ValueError, TypeError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None


def _dims(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _activation(key, text):
    try:
        return Activation.parse(text)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"{key}: {exc}", key=key) from None


def critic_spec(cfg, dim=2) -> NetSpec:
    return NetSpec((dim,) + _dims(cfg["critic_hidden"]) + (1,),
                   _activation("critic_activation", cfg["critic_activation"]))


def config_hash(cfg) -> str:
    """sha256 over every resolved key plus the dataset geometry constants."""
    items = dict(cfg)
    items.update({f"geometry.{k}": v for k, v in datasets.toy_geometry(cfg["dataset"]).items()})
    text = "".join(f"{k}={items[k]!r}\n" for k in sorted(items))
    return hashlib.sha256(text.encode()).hexdigest()


def manifest(cfg, status, command, artifacts, extra=None) -> dict:
    m = {"status": status, "command": command, "seed": cfg["seed"], "config_hash": config_hash(cfg)}
    m.update({f"config.{k}": v for k, v in sorted(cfg.items())})
    m.update({f"geometry.{k}": v for k, v in datasets.toy_geometry(cfg["dataset"]).items()})
    m["artifacts"] = ",".join(artifacts)
    m.update(extra or {})
    return m


def _snapshots(text):
    try:
        return tuple(sorted({int(s) for s in text.split(",") if s.strip()}))
    except ValueError:
        raise CliError(EXIT_CONFIG, f"bad --snapshots value {text!r}") from None


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create {out}: {exc}") from None
    return out


def _data(cfg):
    return datasets.toy(cfg["dataset"], cfg["data_size"], seeding.stream(cfg["seed"], seeding.DATA))


# --- commands ---------------------------------------------------------------

def cmd_finetune(args) -> int:
    cfg = load_config(args.config, args.seed)
    tc = train_config(cfg)
    spec = critic_spec(cfg)
    squash = _activation("squash", cfg["squash"])
    out = _out_dir(args.out)
    snaps = [s for s in _snapshots(args.snapshots) if s <= tc.T]
    artifacts = ["stack.glstk", "stack.meta", "metrics.csv"] + [f"snap_{s:03d}.svg" for s in snaps]
    write_meta(out / "manifest.meta", manifest(cfg, "incomplete", "finetune", artifacts))

    data = _data(cfg)
    critic = init_net(spec, seeding.stream(cfg["seed"], seeding.CRITIC_INIT))
    sampler = wgan.GaussianSampler(data.dim, cfg["noise_std"])

    def snapshot(k, samples):
        diagnostics.emit_scatter_svg([("data", data), ("generated", samples)], out / f"snap_{k:03d}.svg")

    res = wgan.finetune(tc, data, sampler, critic, squash=squash, w1_every=args.w1_every,
                        snapshots=snaps, on_snapshot=snapshot, n_eval=cfg["n_eval"])
    save(res.stack, out / "stack.glstk", meta={
        "seed": cfg["seed"], "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "config_hash": config_hash(cfg), "noise_std": repr(cfg["noise_std"]), "noise_dim": data.dim})
    (out / "metrics.csv").write_text(wgan.format_metrics_csv(res.metrics))
    extra = {"layers": len(res.stack)}
    if res.final_w1 is not None:
        extra.update(initial_w1=repr(res.initial_w1), final_w1=repr(res.final_w1))
    write_meta(out / "manifest.meta", manifest(cfg, "complete", "finetune", artifacts, extra))
    if res.final_w1 is not None:
        print(f"final_w1={res.final_w1!r}")
    return EXIT_OK


def _noise_from_meta(stack_path, override):
    if override is not None:
        return override
    meta_file = Path(stack_path).with_suffix(".meta")
    if not meta_file.exists():
        raise CliError(EXIT_CONFIG, f"{meta_file} missing; pass --noise-std")
    meta = read_meta(meta_file)
    if "noise_std" not in meta:
        raise CliError(EXIT_CONFIG, f"{meta_file} lacks noise_std", missing_key="noise_std")
    return float(meta["noise_std"])


def _write_points(path, points, dim):
    header = ("x", "y") if dim == 2 else tuple(f"x{i}" for i in range(dim))
    datasets.write_csv(path, np.asarray(points).reshape(-1, dim), header)


def cmd_generate(args) -> int:
    if args.n < 0:
        raise CliError(EXIT_CONFIG, "n must be nonnegative")
    stack = load(args.stack)
    std = _noise_from_meta(args.stack, args.noise_std)
    if args.n == 0:
        _write_points(args.out, np.zeros((0, stack.dim)), stack.dim)
        return EXIT_OK
    sample = wgan.generate(stack, args.n, wgan.GaussianSampler(stack.dim, std), args.seed)
    _write_points(args.out, sample.points, stack.dim)
    return EXIT_OK


def _save_net(path, net: DenseNet):
    spec = net.spec
    np.savez(path, params=net.params, dims=np.array(spec.layer_dims),
             hidden=str(spec.hidden_activation), output=str(spec.output_activation))


def _load_net(path) -> DenseNet:
    with np.load(path) as z:
        spec = NetSpec(tuple(int(v) for v in z["dims"]), Activation.parse(str(z["hidden"])),
                       Activation.parse(str(z["output"])))
        return DenseNet(spec, z["params"])


def cmd_assist(args) -> int:
    cfg = load_config(args.config, args.seed)
    tc = train_config(cfg)
    out = _out_dir(args.out)
    artifacts = ["critic.npz", "generator.npz", "assist.meta", "metrics.csv"]
    write_meta(out / "manifest.meta", manifest(cfg, "incomplete", "assist", artifacts))
    data = _data(cfg)
    noise = wgan.GaussianSampler(cfg["noise_dim"], cfg["noise_std"])
    critic = init_net(critic_spec(cfg, data.dim), seeding.stream(cfg["seed"], seeding.CRITIC_INIT))
    gen_spec = NetSpec((cfg["noise_dim"],) + _dims(cfg["generator_hidden"]) + (data.dim,),
                       _activation("generator_activation", cfg["generator_activation"]),
                       _activation("generator_output", cfg["generator_output"]))
    gen = init_net(gen_spec, seeding.stream(cfg["seed"], seeding.GENERATOR_INIT))
    res = wgan.assist_train(tc, data, noise, critic, gen)
    _save_net(out / "critic.npz", res.critic)
    _save_net(out / "generator.npz", res.generator)
    write_meta(out / "assist.meta", {"eta": repr(tc.eta), "layers": tc.assist_layers,
                                     "noise_std": repr(cfg["noise_std"]), "noise_dim": cfg["noise_dim"]})
    (out / "metrics.csv").write_text(wgan.format_metrics_csv(res.metrics))
    write_meta(out / "manifest.meta", manifest(cfg, "complete", "assist", artifacts))
    return EXIT_OK


def cmd_generate_assist(args) -> int:
    if args.n < 0:
        raise CliError(EXIT_CONFIG, "n must be nonnegative")
    run = Path(args.run)
    meta = read_meta(run / "assist.meta")
    critic, gen = _load_net(run / "critic.npz"), _load_net(run / "generator.npz")
    layers = int(meta["layers"]) if args.layers is None else args.layers
    dim = gen.spec.output_dim
    if args.n == 0:
        _write_points(args.out, np.zeros((0, dim)), dim)
        return EXIT_OK
    noise = wgan.GaussianSampler(int(meta["noise_dim"]), float(meta["noise_std"]))
    sample = wgan.generate_assist(critic, gen, float(meta["eta"]), layers, args.n, noise, args.seed)
    _write_points(args.out, sample.points, dim)
    return EXIT_OK


def flow_report(oracle, res, metrics, eta, T) -> list:
    lines = [f"oracle={oracle.name}", f"eta={eta!r}", f"T={T}"]
    if T >= 1:
        rep = diagnostics.theorem1_audit(metrics, eta, T, oracle.floor)
        lines += [f"bound_lhs={rep.lhs!r}", f"bound_rhs={rep.rhs!r}",
                  f"bound_satisfied={str(rep.satisfied).lower()}"]
    flags = diagnostics.descent_audit(metrics, eta)
    failed = [k for k, ok in enumerate(flags) if not ok]
    lines += [f"descent_steps={len(flags)}", f"descent_failures={len(failed)}",
              f"descent_satisfied={str(not failed).lower()}"]
    if failed:
        lines.append("descent_failed_steps=" + ",".join(map(str, failed)))
    if oracle.name == "quadratic":
        c = np.array([0.5, -0.25])
        dist = [float(np.mean(np.linalg.norm(X - c, axis=1))) for X in res.trajectory]
        lines.append(f"mean_distance_decreasing={str(all(b < a for a, b in zip(dist, dist[1:]))).lower()}")
        lines.append(f"mean_distance_final={dist[-1]!r}")
    return lines


def cmd_flow_demo(args) -> int:
    if not args.eta > 0:
        raise CliError(EXIT_CONFIG, f"eta must be positive, got {args.eta}", key="eta")
    if args.T < 0 or args.n < 1:
        raise CliError(EXIT_CONFIG, "T must be nonnegative and n positive")
    make = wgan.EXACT_ORACLES.get(args.oracle)
    if make is None:
        raise CliError(EXIT_CONFIG, f"unknown oracle {args.oracle!r}", key="oracle")
    oracle = make()
    out = _out_dir(args.out)
    X0 = np.random.default_rng(args.seed).standard_normal((args.n, 2))
    res = wgan.fgd(oracle, X0, args.eta, args.T)
    metrics = wgan.fgd_metrics(res)
    metrics.to_csv(out / "metrics.csv")
    lines = flow_report(oracle, res, metrics, args.eta, args.T)
    (out / "audit.txt").write_text("\n".join(lines) + "\n")
    for s in _snapshots(args.snapshots):
        if s <= args.T:
            diagnostics.emit_scatter_svg([("particles", res.trajectory[s])], out / f"snap_{s:03d}.svg")
    print("\n".join(lines))
    return EXIT_OK


def cmd_eval_w1(args) -> int:
    A, B = datasets.read_csv(args.a), datasets.read_csv(args.b)
    try:
        plan = (brute_force_wasserstein if args.brute else wasserstein)(args.p, A, B)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    print(repr(plan.cost))
    if args.plan:
        with open(args.plan, "w", newline="\n") as fh:
            fh.write("source,target\n")
            for i, j in enumerate(plan.permutation):
                fh.write(f"{i},{int(j)}\n")
    return EXIT_OK


def cmd_datasets_dump(args) -> int:
    if args.dataset not in datasets.TOY_SIZES:
        raise CliError(EXIT_CONFIG, f"unknown dataset {args.dataset!r}")
    m = datasets.toy(args.dataset, args.n, seeding.stream(args.seed, seeding.DATA))
    _write_points(args.out, m.points, m.dim)
    return EXIT_OK


# --- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gradlayer", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("finetune", help="stack gradient layers on a toy dataset")
    f.add_argument("--config", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--seed", type=int)
    f.add_argument("--snapshots", default="0,25,50,100")
    f.add_argument("--w1-every", type=int, default=0, help="log W1 every N outer steps (0: off)")
    f.set_defaults(func=cmd_finetune)

    a = sub.add_parser("assist", help="WGAN-GP training with gradient layers below the generator")
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_assist)

    g = sub.add_parser("generate", help="sample from a saved stack")
    g.add_argument("--stack", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--noise-std", type=float, help="override the stack sidecar")
    g.set_defaults(func=cmd_generate)

    ga = sub.add_parser("generate-assist", help="sample from an assist run directory")
    ga.add_argument("--run", required=True)
    ga.add_argument("--n", type=int, required=True)
    ga.add_argument("--seed", type=int, default=0)
    ga.add_argument("--layers", type=int)
    ga.add_argument("--out", required=True)
    ga.set_defaults(func=cmd_generate_assist)

    fd = sub.add_parser("flow-demo", help="functional gradient descent with an exact critic")
    fd.add_argument("--oracle", default="quadratic", choices=sorted(wgan.EXACT_ORACLES))
    fd.add_argument("--eta", type=float, default=0.1)
    fd.add_argument("--T", type=int, default=50)
    fd.add_argument("--n", type=int, default=200)
    fd.add_argument("--seed", type=int, default=0)
    fd.add_argument("--snapshots", default="0,25,50")
    fd.add_argument("--out", required=True)
    fd.set_defaults(func=cmd_flow_demo)

    e = sub.add_parser("eval-w1", help="exact Wasserstein distance between two CSV point sets")
    e.add_argument("a")
    e.add_argument("b")
    e.add_argument("--p", type=int, default=1, choices=(1, 2))
    e.add_argument("--brute", action="store_true", help="exhaustive search (n <= 8)")
    e.add_argument("--plan", help="write the optimal assignment here")
    e.set_defaults(func=cmd_eval_w1)

    d = sub.add_parser("datasets-dump", help="write a toy dataset as CSV")
    d.add_argument("--dataset", required=True)
    d.add_argument("--n", type=int)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_datasets_dump)
    return p


def _fail(code, message, **fields):
    extra = "".join(f" {k}={v}" for k, v in fields.items())
    print(f"error_code={code}{extra} message={message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except CliError as exc:
        return _fail(exc.code, str(exc), **exc.fields)
    except (wgan.TrainingError, FloatingPointError, NonFiniteGradient) as exc:
        return _fail(EXIT_NUMERIC, str(exc))
    except StackFormatError as exc:
        return _fail(EXIT_IO, f"bad stack file: {exc}")
    except OSError as exc:
        return _fail(EXIT_IO, str(exc))
    except ValueError as exc:
        return _fail(EXIT_CONFIG, str(exc))


if __name__ == "__main__":
    sys.exit(main())
