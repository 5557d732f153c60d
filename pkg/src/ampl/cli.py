"""Command-line interface.

Every command reads an optional flat ``key = value`` config file; flags
override file values. Exit codes: 0 success, 2 config error, 3 data error,
4 golden-value mismatch (``toy``).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .adapt import (
    AdaptConfig,
    TargetBuilder,
    alpha_grid,
    ampl_run,
    grid_tradeoff,
    simulate_training_pairs,
    write_grid_csv,
    write_trajectory_csv,
)
from .adversary import (
    SoftmaxConfig,
    TrainConfig,
    TrainingDiverged,
    default_softmax_config,
    load_reconstructor,
    save_reconstructor,
    train_reconstructor,
)
from .audit import LearnedAttacker, audit, format_report, joint_release_target, single_release_target
from .fixtures import TOY_EPS, TOY_JOINT_MPL, TOY_SINGLE_MPL, toy
from .inference import posterior_joint_exact, posterior_single
from .leakage import mpl_histogram, mpl_value, write_histogram_csv
from .mechanism import compose_levels, sample_many
from .remap import bayes_remap, read_remap_csv, write_remap_csv
from .space import DataError, build_space, cost_matrix, read_counts, read_embeddings, read_joint, read_tiers

log = logging.getLogger("ampl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_MISMATCH = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    embeddings: str | None = None
    tiers: str | None = None
    counts: str | None = None
    joint: str | None = None
    position: int = 0
    smoothing: float = 1.0
    eps: float = 1.0
    delta: float | None = None
    alpha: list[float] | None = None
    samples: int = 10000
    seed: int = 0
    out: str = "."
    attacker: str = "exact"
    masked: bool = False
    remap: str | None = None
    y_mode: str = "mechanism"
    # attacker training
    model_kind: str = "mlp"
    hidden: list[int] = field(default_factory=lambda: [32])
    epochs: int = 100
    learning_rate: float = 1e-3
    n_train: int = 4000
    retrain_every: int = 5
    tau: float = 1.0
    gamma_floor: float = 1e-6
    # adaptation
    lambda1: float = 1.0
    lambda2: float = 1.0
    eta0: float = 0.2
    decay: float = 0.75
    max_iters: int = 20
    tol: float = 1e-4
    probe: float = 0.05
    # grid
    grid_lo: float = 0.1
    grid_hi: float = 1.0
    grid_step: float = 0.1


def _convert(name: str, raw):
    f = {f.name: f for f in dataclasses.fields(RunConfig)}[name]
    kind = str(f.type)
    if raw is None or isinstance(raw, bool):
        return raw
    text = str(raw).strip()
    try:
        if kind.startswith("list[float]"):
            return [float(v) for v in text.replace(",", " ").split()]
        if kind.startswith("list[int]"):
            return [int(v) for v in text.replace(",", " ").split()]
        if kind == "bool":
            if text.lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("1", "true", "yes")
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None
    return text


def read_config_file(path: str | Path) -> dict:
    known = {f.name for f in dataclasses.fields(RunConfig)}
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, value)
    return values


def build_config(args: argparse.Namespace) -> RunConfig:
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    for f in dataclasses.fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None and v is not False:
            values[f.name] = _convert(f.name, v) if not isinstance(v, bool) else v
    for pair in getattr(args, "set", None) or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in {f.name for f in dataclasses.fields(RunConfig)}:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _convert(key, value)
    cfg = RunConfig(**values)
    if cfg.eps <= 0:
        raise ConfigError("eps must be positive")
    if cfg.samples < 1:
        raise ConfigError("samples must be >= 1")
    if cfg.delta is not None and not 0 < cfg.delta <= 1:
        raise ConfigError("delta must lie in (0, 1]")
    if cfg.alpha is not None and any(not 0 < a <= 1 for a in cfg.alpha):
        raise ConfigError("alpha entries must lie in (0, 1]")
    if cfg.y_mode not in ("mechanism", "uniform"):
        raise ConfigError("y_mode must be 'mechanism' or 'uniform'")
    for key in ("embeddings", "tiers", "counts", "joint", "remap"):
        p = getattr(cfg, key)
        if p is not None and not Path(p).exists():
            raise ConfigError(f"{key} file not found: {p}")
    return cfg


# ---------------------------------------------------------------- helpers


def load_space(cfg: RunConfig):
    if cfg.embeddings is None:
        raise ConfigError("an embeddings file is required")
    emb = read_embeddings(cfg.embeddings)
    tiers = read_tiers(cfg.tiers) if cfg.tiers else None
    counts = read_counts(cfg.counts) if cfg.counts else None
    space = build_space(emb, tiers, counts, cfg.smoothing)
    joint = read_joint(cfg.joint, space) if cfg.joint else None
    return emb, space, joint


def _alpha(cfg: RunConfig, space) -> list[float]:
    alpha = cfg.alpha or [1.0] * space.n_tiers
    if len(alpha) != space.n_tiers:
        raise ConfigError(f"alpha has {len(alpha)} entries but the space has {space.n_tiers} tiers")
    return alpha


def _softmax(cfg: RunConfig, space) -> SoftmaxConfig:
    base = default_softmax_config(space.embeddings, cfg.gamma_floor)
    return SoftmaxConfig(base.tau_base, cfg.tau, cfg.gamma_floor)


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        model_kind=cfg.model_kind,
        hidden_dims=tuple(cfg.hidden),
        learning_rate=cfg.learning_rate,
        max_epochs=cfg.epochs,
        seed=cfg.seed,
    )


def _attacker(cfg: RunConfig, space):
    if cfg.masked or cfg.attacker == "masked":
        return "masked"
    if cfg.attacker == "exact":
        return "exact"
    path = Path(cfg.attacker)
    if not path.exists():
        raise ConfigError(f"attacker must be exact, masked, or a checkpoint path; got {cfg.attacker!r}")
    try:
        model = load_reconstructor(path)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    return LearnedAttacker(model, space, _softmax(cfg, space))


def _builder(cfg: RunConfig, space, joint) -> TargetBuilder:
    kind = "masked" if cfg.masked else cfg.attacker
    if kind not in ("exact", "masked", "learned"):
        raise ConfigError("adapt/grid need attacker = exact, masked or learned")
    return TargetBuilder(
        space,
        kind,
        joint=joint,
        ell=cfg.position,
        train_config=_train_config(cfg),
        n_train=cfg.n_train,
        retrain_every=cfg.retrain_every,
        softmax=_softmax(cfg, space),
    )


def _out(cfg: RunConfig, name: str) -> Path:
    d = Path(cfg.out)
    d.mkdir(parents=True, exist_ok=True)
    return d / name


# ---------------------------------------------------------------- commands


def cmd_toy(args) -> int:
    eps = TOY_EPS if args.eps is None else float(args.eps)
    t = toy()
    prior = t.space.prior
    d = float(t.space.distances[0, 1])
    singles = []
    for y in range(t.channel.n_outputs):
        singles.append(mpl_value(prior, posterior_single(t.channel, prior, y), 0, 1, d))
    post = posterior_joint_exact(t.joint, [t.channel, t.channel], (0, 1), 0)
    joint_mpl = mpl_value(t.joint.marginal(0), post, 0, 1, d)
    print(f"{'observation':<28}{'mPL':>10}  verdict (eps={eps:g})")
    for y, v in enumerate(singles):
        verdict = "violation" if v > eps else "pass"
        print(f"{'single y' + str(y + 1):<28}{v:>10.4f}  {verdict}")
    verdict = "violation" if joint_mpl > eps else "pass"
    print(f"{'joint (y1, y2)':<28}{joint_mpl:>10.4f}  {verdict}")
    ok = all(abs(v - TOY_SINGLE_MPL) <= 1e-3 for v in singles) and abs(joint_mpl - TOY_JOINT_MPL) <= 1e-3
    print("golden values:", "match" if ok else "MISMATCH")
    return EXIT_OK if ok else EXIT_MISMATCH


def cmd_audit(args) -> int:
    cfg = build_config(args)
    _, space, joint = load_space(cfg)
    mech = compose_levels(space, cfg.eps, _alpha(cfg, space))
    attacker = _attacker(cfg, space)
    if joint is not None:
        target = joint_release_target(mech, space, joint, cfg.position, attacker)
    else:
        target = single_release_target(mech, space, attacker, y_mode=cfg.y_mode)
    report, draws = audit(target, cfg.samples, cfg.eps, cfg.seed, cfg.delta)
    _out(cfg, "audit_report.json").write_text(report.to_json(), encoding="utf-8")
    write_histogram_csv(_out(cfg, "mpl_histogram.csv"), mpl_histogram(draws.mpl, cfg.eps))
    print(format_report(report))
    return EXIT_OK


def cmd_perturb(args) -> int:
    cfg = build_config(args)
    _, space, _ = load_space(cfg)
    mech = compose_levels(space, cfg.eps, _alpha(cfg, space))
    full = mech.full_channel(space)
    table = read_remap_csv(cfg.remap) if cfg.remap else None
    remap = table.label_map() if table is not None else None
    rng = np.random.default_rng(cfg.seed)
    lookup = {label: k for k, label in enumerate(space.candidates)}
    src = open(args.input, encoding="utf-8") if args.input else sys.stdin
    dst = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
    try:
        for line in src:
            tokens = line.split()
            out = []
            for tok in tokens:
                k = lookup.get(tok)
                if k is None:
                    out.append(tok)
                    continue
                y = full.output_labels[int(sample_many(full, np.array([k]), np.array([rng.random()]))[0])]
                if remap is not None:
                    if y not in remap:
                        raise DataError(f"remap table has no entry for {y!r}")
                    y = remap[y]
                out.append(y)
            dst.write(" ".join(out) + "\n")
    finally:
        if args.input:
            src.close()
        if args.output:
            dst.close()
    return EXIT_OK


def cmd_train_attacker(args) -> int:
    cfg = build_config(args)
    _, space, joint = load_space(cfg)
    mech = compose_levels(space, cfg.eps, _alpha(cfg, space))
    rng = np.random.default_rng(cfg.seed)
    x, y = simulate_training_pairs(mech, space, cfg.n_train, rng, joint, cfg.position)
    model = train_reconstructor(x, y, _train_config(cfg))
    save_reconstructor(model, _out(cfg, "attacker.ckpt"))
    with open(_out(cfg, "training_log.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_mse", "val_mse", "learning_rate"])
        for epoch, tr, va, lr in model.training_log:
            w.writerow([epoch, f"{tr:.12g}", f"{va:.12g}", f"{lr:.6g}"])
    best = min(r[2] for r in model.training_log)
    print(f"trained {model.model_kind} {model.layer_dims}: best val mse {best:.6g}, test mse {model.test_mse:.6g}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = build_config(args)
    _, space, joint = load_space(cfg)
    cost = cost_matrix(space)
    acfg = AdaptConfig(
        eps=cfg.eps,
        lambda1=cfg.lambda1,
        lambda2=cfg.lambda2,
        audit_S=cfg.samples,
        eta0=cfg.eta0,
        decay=cfg.decay,
        max_iters=cfg.max_iters,
        tol=cfg.tol,
        probe=cfg.probe,
        delta_target=cfg.delta,
        seed=cfg.seed,
    )
    state = ampl_run(acfg, space, cost, _builder(cfg, space, joint), _alpha(cfg, space))
    write_trajectory_csv(_out(cfg, "trajectory.csv"), state)
    b = state.best
    print(f"stop: {state.stop_reason}; best alpha {', '.join(f'{a:.4f}' for a in b.alpha)}")
    print(f"privacy {b.privacy:.6f}  utility {b.utility:.6f}  composite {b.composite:.6f}")
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg = build_config(args)
    _, space, joint = load_space(cfg)
    cost = cost_matrix(space)
    alphas = alpha_grid(space.n_tiers, cfg.grid_lo, cfg.grid_hi, cfg.grid_step)
    rows = grid_tradeoff(space, cost, _builder(cfg, space, joint), cfg.eps, cfg.samples, cfg.seed, alphas)
    write_grid_csv(_out(cfg, "grid.csv"), rows)
    print(f"wrote {len(rows)} grid rows")
    return EXIT_OK


def cmd_remap_build(args) -> int:
    cfg = build_config(args)
    _, space, _ = load_space(cfg)
    mech = compose_levels(space, cfg.eps, _alpha(cfg, space))
    table = bayes_remap(mech, space, cost_matrix(space))
    write_remap_csv(_out(cfg, "remap.csv"), table)
    moved = int(np.sum(table.mapping != np.arange(len(table.mapping))))
    print(f"remap table: {len(table.labels)} outputs, {moved} remapped, {len(table.unreachable)} unreachable")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--eps", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--samples", type=int)
    p.add_argument("--alpha", help="comma-separated per-tier strengths")
    p.add_argument("--out", help="output directory")
    p.add_argument("--remap", help="remap table CSV")
    p.add_argument("--masked", action="store_true", default=None, help="audit a masked release")
    p.add_argument("--embeddings")
    p.add_argument("--tiers")
    p.add_argument("--counts")
    p.add_argument("--joint")
    p.add_argument("--attacker", help="exact, masked, learned, or a checkpoint path")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ampl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy", help="two-secret counterexample: single vs joint leakage")
    p.add_argument("--eps", type=float)
    p.set_defaults(func=cmd_toy)

    for name, func, helptext in (
        ("audit", cmd_audit, "estimate the mPL violation rate with a Hoeffding certificate"),
        ("train-attacker", cmd_train_attacker, "train a reconstruction attacker and save a checkpoint"),
        ("adapt", cmd_adapt, "calibrate per-tier strengths"),
        ("grid", cmd_grid, "violation ratio vs utility loss over an alpha lattice"),
        ("remap-build", cmd_remap_build, "build the Bayesian remap table"),
    ):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("perturb", help="perturb sensitive tokens in a whitespace-separated stream")
    _common(p)
    p.add_argument("--input", help="input text file (default stdin)")
    p.add_argument("--output", help="output text file (default stdout)")
    p.set_defaults(func=cmd_perturb)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, KeyError, OSError, TrainingDiverged) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
