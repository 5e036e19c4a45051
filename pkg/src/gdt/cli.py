"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Status messages go
to stderr; data goes to stdout or to the files named on the command line.
The GDT_SEED environment variable overrides every seed a command would
otherwise take from flags or config files.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import evalrollout, graphrep
from . import trainer
from . import trajstore as ts
from .graphformer import ConfigError, GDTModel, ModelConfig
from .ndcore import finite_difference_check


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; our contract reserves 2 for
    runtime failures, so usage problems are remapped to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _env_seed() -> int | None:
    raw = os.environ.get("GDT_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"GDT_SEED must be an integer, got {raw!r}") from None


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------- dataset

def _cmd_dataset_synth(args) -> int:
    seed = _env_seed()
    if seed is None:
        seed = args.seed
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    ds = ts.generate_synthetic(args.env, args.eps, args.episodes, seed, args.out)
    _say(f"wrote {len(ds.episodes)} episodes ({ds.total_steps} steps) to {args.out}")
    return 0


def _cmd_dataset_validate(args) -> int:
    ds = ts.load_dataset(args.file)
    warnings = ts.validate_dataset(ds)
    for w in warnings:
        print(f"warning: {w}")
    if warnings:
        _say(f"{args.file}: {len(warnings)} warning(s)")
        return 2
    print(f"ok: {len(ds.episodes)} episodes, {ds.total_steps} steps")
    return 0


def _cmd_dataset_stats(args) -> int:
    ds = ts.load_dataset(args.file)
    for key, value in ts.dataset_summary(ds).items():
        if isinstance(value, float):
            print(f"{key}={value:.6g}")
        else:
            print(f"{key}={value}")
    return 0


# ------------------------------------------------------------------ graph

def _cmd_graph_dump(args) -> int:
    graph = graphrep.build_adjacency(args.K, args.reward, args.mode,
                                     p=args.p, seed=args.seed)
    sys.stdout.write(graphrep.dump_graph(graph))
    return 0


# -------------------------------------------------------------- configure

def _load_config_file(path: str) -> dict[str, str]:
    flat = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, "
                                  f"got {line!r}")
            key, _, value = line.partition("=")
            flat[key.strip()] = value.strip()
    return flat


def _resolve_configs(args):
    flat = _load_config_file(args.config) if args.config else {}
    flat.update(trainer.parse_overrides(args.overrides))
    mcfg, tcfg = trainer.configs_from_flat(flat, args.preset)
    seed = _env_seed()
    if seed is not None:
        mcfg = replace(mcfg, seed=seed)
        tcfg = replace(tcfg, seed=seed)
    return mcfg, tcfg


def _write_snapshot(path: str, mcfg, tcfg) -> None:
    flat = {}
    flat.update(mcfg.to_flat())
    flat.update(tcfg.to_flat())
    with open(path, "w") as f:
        for key in sorted(flat):
            f.write(f"{key}={flat[key]}\n")


# ------------------------------------------------------------------ train

def _cmd_train(args) -> int:
    mcfg, tcfg = _resolve_configs(args)
    tcfg = replace(tcfg, out_dir=args.out)
    ds = ts.load_dataset(args.data)
    result = trainer.train(ds, mcfg, tcfg, resume_from=args.resume,
                           progress=args.progress)
    _say(f"final loss {result.final_loss:.6g}; checkpoints in {args.out}")
    return 0


def _cmd_ablate(args) -> int:
    mcfg, tcfg = _resolve_configs(args)
    tcfg = replace(tcfg, out_dir=args.out)
    ds = ts.load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    _write_snapshot(os.path.join(args.out, "config.txt"), mcfg, tcfg)
    rows = trainer.ablate(ds, mcfg, tcfg, args.axis,
                          eval_episodes=args.episodes, progress=args.progress)
    print("axis,value,final_loss,mean_return")
    for r in rows:
        print(f"{r['axis']},{r['value']},{r['final_loss']:.6g},"
              f"{r['mean_return']:.6g}")
    return 0


# ------------------------------------------------------------------- eval

def _cmd_eval(args) -> int:
    model, ck = trainer.load_model_checkpoint(args.ckpt)
    meta = ck.metadata
    std = ts.Standardizer.from_metadata(meta)
    env_spec = args.env or meta.get("env")
    if not env_spec:
        raise ConfigError("no env to roll out in: pass --env or use a "
                          "checkpoint whose dataset recorded one")
    if args.rtg is not None:
        rtg = args.rtg
    elif "score.expert" in meta:
        rtg = float(meta["score.expert"])
    else:
        raise ConfigError("no conditioning target: pass --rtg or use a "
                          "checkpoint whose dataset recorded score.expert")
    seed = _env_seed()
    if seed is None:
        seed = args.seed
    seeds = list(range(seed, seed + args.seeds))
    rows = evalrollout.eval_report(
        model, env_spec, std, rtg, seeds, args.episodes,
        out_csv=args.out_csv, baselines=evalrollout.baselines_from_metadata(meta),
        argmax=not args.sample)
    evalrollout.write_report_csv(rows, sys.stdout)
    if args.out_csv:
        _say(f"wrote {args.out_csv}")
    return 0


# -------------------------------------------------------------- gradcheck

def _gradcheck_config(module: str, seed: int) -> ModelConfig:
    base = dict(state_kind="vector", state_shape=(3,), action_kind="discrete",
                action_dim=3, d=8, heads=2, layers=1, K=2, max_timestep=8,
                dropout=0.0, seed=seed, dtype="float64")
    if module == "graphformer":
        return ModelConfig(**base)
    if module == "seqformer":
        return ModelConfig(seq_enabled=True, seq_method="fusion", seq_d=8,
                           seq_heads=2, seq_layers=1, **base)
    raise ConfigError(f"unknown module {module!r}; "
                      f"choose graphformer or seqformer")


def _gradcheck_batch(cfg: ModelConfig, rng: np.random.Generator) -> dict:
    b, k = 2, cfg.K
    return {
        "states": rng.standard_normal((b, k) + cfg.state_shape).astype(np.float32),
        "actions": rng.integers(0, cfg.action_dim, size=(b, k)),
        "rtg": rng.uniform(0.0, 4.0, size=(b, k)).astype(np.float32),
        "prev_rewards": rng.uniform(0.0, 1.0, size=(b, k)).astype(np.float32),
        "timesteps": np.tile(np.arange(k, dtype=np.int64), (b, 1)),
        "mask": np.ones((b, k), dtype=bool),
    }


def _cmd_gradcheck(args) -> int:
    seed = _env_seed()
    if seed is None:
        seed = args.seed
    cfg = _gradcheck_config(args.module, seed)
    model = GDTModel(cfg)
    batch = _gradcheck_batch(cfg, np.random.default_rng(seed))

    def loss_fn():
        out = model.forward(batch, train=False)
        return trainer.compute_loss(out.pred, batch, "ce")

    errs = finite_difference_check(model.params, loss_fn, h=args.h)
    for name in sorted(errs):
        print(f"{name} {errs[name]:.3e}")
    worst = max(errs, key=errs.get)
    _say(f"worst {worst} {errs[worst]:.3e} over {len(errs)} parameter groups")
    return 0


# ------------------------------------------------------------------ wiring

def _add_config_flags(p: _Parser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--preset", help="named hyperparameter set "
                                    "(atari, atari-plus, gym, gym-plus)")
    p.add_argument("--data", required=True, help="trajectory dataset file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--progress", action="store_true",
                   help="log progress lines to stdout")
    p.add_argument("overrides", nargs="*", metavar="key=value",
                   help="config overrides, e.g. train.epochs=2")


def build_parser() -> _Parser:
    parser = _Parser(prog="gdt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_ds = sub.add_parser("dataset", help="create, check, or summarize datasets")
    ds_sub = p_ds.add_subparsers(dest="subcommand", required=True)

    p = ds_sub.add_parser("synth", help="roll a scripted policy into a dataset")
    p.add_argument("--env", required=True,
                   help='env spec, e.g. chain or "chain:length=8,noise=0.1"')
    p.add_argument("--eps", type=float, default=0.1,
                   help="probability of a random action (default 0.1)")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_dataset_synth)

    p = ds_sub.add_parser("validate", help="check a dataset file for problems")
    p.add_argument("file")
    p.set_defaults(fn=_cmd_dataset_validate)

    p = ds_sub.add_parser("stats", help="print summary statistics")
    p.add_argument("file")
    p.set_defaults(fn=_cmd_dataset_stats)

    p_graph = sub.add_parser("graph", help="inspect token graphs")
    g_sub = p_graph.add_subparsers(dest="subcommand", required=True)
    p = g_sub.add_parser("dump", help="print the edge list and adjacency")
    p.add_argument("--K", type=int, required=True, help="context length in steps")
    p.add_argument("--mode", default="causal",
                   choices=sorted(graphrep.CONNECTION_MODES))
    p.add_argument("--reward", default="rtg", choices=("rtg", "step", "none"))
    p.add_argument("--p", type=float, default=None,
                   help="edge probability for random mode")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_graph_dump)

    p = sub.add_parser("train", help="train a model on a dataset")
    _add_config_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("ablate", help="sweep one design axis and compare")
    p.add_argument("--axis", required=True,
                   choices=sorted(trainer.ABLATION_AXES))
    p.add_argument("--episodes", type=int, default=20,
                   help="rollout episodes per trained model")
    _add_config_flags(p)
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("eval", help="roll out a checkpoint and report returns")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--env", help="env spec; defaults to the checkpoint's")
    p.add_argument("--rtg", type=float, default=None,
                   help="conditioning target; defaults to the dataset's expert score")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seeds", type=int, default=3,
                   help="number of evaluation seeds")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--sample", action="store_true",
                   help="sample actions instead of taking the argmax")
    p.add_argument("--out-csv", help="also write the report to this file")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="compare tape gradients with finite differences")
    p.add_argument("--module", default="graphformer",
                   choices=("graphformer", "seqformer"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5,
                   help="finite-difference step")
    p.set_defaults(fn=_cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_help(sys.stderr)
        return 1
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # noqa: BLE001 -- the contract maps every runtime failure to 2
        msg = str(e) or type(e).__name__
        print(f"gdt: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
