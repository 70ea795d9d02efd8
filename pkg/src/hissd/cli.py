"""Command-line entry point.

Subcommands: gen-data, train, eval, export-skills, verify. Every command
exits 0 on success and nonzero with a one-line diagnostic otherwise; exit
codes distinguish configuration problems (2), missing files (3), and
violated runtime preconditions (4).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import datagen as dg
from . import evaluation as ev
from . import figures, oracle
from .config import RunConfig, derive_seed, echo_config, load_config
from .datagen import Quality, dumps_record
from .errors import ConfigError, PreconditionError
from .losses import LossConfig
from .nets import NetConfig, build_model, load_checkpoint, save_checkpoint
from .trainer import train

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_PRECONDITION = 4


def _prepare(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg,
            seed=args.seed,
            train=dataclasses.replace(
                cfg.train, seed=derive_seed(args.seed, "train")
            ),
        )
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    echo_config(cfg, Path(cfg.out_dir))
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _prepare(args)
    out_dir = Path(cfg.out_dir)
    calibrated: dict[str, tuple[float, float]] = {}
    for entry in cfg.datasets:
        spec = cfg.spec(entry.task)
        epsilon = entry.epsilon
        quality = Quality(entry.quality)
        if quality is not Quality.EXPERT and epsilon is None:
            if entry.task not in calibrated:
                calibrated[entry.task] = dg.calibrate_medium(
                    spec, derive_seed(cfg.seed, f"calibrate:{entry.task}")
                )
                eps, rate = calibrated[entry.task]
                print(f"calibrated {entry.task}: epsilon={eps:.6f} "
                      f"medium win rate={rate:.3f}")
            epsilon = calibrated[entry.task][0]
        path = out_dir / entry.path
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = dg.generate(
            spec, quality, entry.episodes,
            derive_seed(cfg.seed, f"datagen:{entry.task}:{entry.quality}"),
            path, epsilon=epsilon,
        )
        print(f"wrote {path}: {meta['episodes']} episodes, "
              f"win rate {meta['win_rate']:.3f}, "
              f"mean return {meta['mean_return']:.3f}")
    return 0


def _load_training_datasets(cfg: RunConfig) -> dict:
    datasets = {}
    for entry in cfg.datasets:
        if entry.task in datasets:
            raise ConfigError(
                f"duplicate training dataset for task '{entry.task}'"
            )
        path = Path(cfg.out_dir) / entry.path
        if not path.exists():
            raise FileNotFoundError(f"dataset file not found: {path}")
        datasets[entry.task] = dg.load(path)
    if not datasets:
        raise ConfigError("no datasets configured")
    return datasets


def cmd_train(args) -> int:
    cfg = _prepare(args)
    out_dir = Path(cfg.out_dir)
    datasets = _load_training_datasets(cfg)
    metrics_path = out_dir / "metrics.jsonl"
    checkpoint_path = out_dir / "checkpoint.bin"
    result = train(datasets, cfg.train, metrics_path=metrics_path,
                   checkpoint_path=checkpoint_path)
    figdir = out_dir / "figures"
    figdir.mkdir(exist_ok=True)
    if result.records:
        figures.plot_loss_curves(result.records, figdir / "loss_curves.png")
    print(f"trained {cfg.train.mode} for {cfg.train.steps} steps "
          f"on {sorted(result.task_draws)}")
    print(f"checkpoint: {checkpoint_path}")
    print(f"metrics:    {metrics_path}")
    return 0


def _load_model(args):
    path = Path(args.checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, step = load_checkpoint(path)
    return model, step, str(path)


def cmd_eval(args) -> int:
    cfg = _prepare(args)
    out_dir = Path(cfg.out_dir)
    model, _, ckpt_id = _load_model(args)
    specs = [cfg.spec(n) for n in cfg.eval.source_tasks]
    specs += [cfg.spec(n) for n in cfg.eval.unseen_tasks]
    if not specs:
        raise ConfigError("eval section lists no tasks")
    report = ev.evaluate(
        lambda: ev.ModelPolicy(model, greedy=cfg.eval.greedy),
        specs,
        episodes=cfg.eval.episodes,
        base_seed=derive_seed(cfg.seed, "eval"),
        unseen=set(cfg.eval.unseen_tasks),
        checkpoint_id=ckpt_id,
        greedy=cfg.eval.greedy,
    )
    (out_dir / "report.txt").write_text(report.to_table() + "\n", encoding="utf-8")
    with open(out_dir / "report.jsonl", "w", encoding="utf-8") as fh:
        for rec in report.to_records():
            fh.write(dumps_record(rec) + "\n")
    figdir = out_dir / "figures"
    figdir.mkdir(exist_ok=True)
    figures.plot_win_rates(report, figdir / "win_rates.png")
    print(report.to_table())
    return 0


def cmd_export_skills(args) -> int:
    cfg = _prepare(args)
    out_dir = Path(cfg.out_dir)
    model, _, _ = _load_model(args)
    names = list(cfg.eval.source_tasks) + list(cfg.eval.unseen_tasks)
    if not names:
        raise ConfigError("eval section lists no tasks")
    out_path = out_dir / "skills.csv"
    rows = ev.export_skills(
        model, [cfg.spec(n) for n in names], cfg.eval.export_episodes,
        out_path, base_seed=derive_seed(cfg.seed, "export"),
        greedy=cfg.eval.greedy,
    )
    print(f"wrote {out_path}: {rows} rows")
    return 0


def cmd_verify(args) -> int:
    results = oracle.verify_random_worlds(args.seed, args.worlds)
    held = sum(r.holds for r in results)
    worst_lhs = min(r.margin_lhs for r in results)
    worst_kl = min(r.margin_kl for r in results)
    print(f"contrastive/KL bound: {held}/{len(results)} hold "
          f"(worst margins: bound {worst_lhs:.3e}, kl {worst_kl:.3e})")

    rng = np.random.default_rng(args.seed)
    worst_gap = 0.0
    checks = 0
    for _ in range(20):
        xs = rng.normal(rng.uniform(-3, 3), rng.uniform(0.2, 3.0), size=rng.integers(2, 50))
        for eps in (0.1, 0.5, 0.9):
            minimizer, root = oracle.expectile_identity_check(xs, eps)
            worst_gap = max(worst_gap, abs(minimizer - root))
            checks += 1
    expectile_ok = worst_gap < 1e-6
    print(f"expectile identity: {checks} checks, worst gap {worst_gap:.3e}")

    grad_worst = _quick_gradient_suite(args.seed)
    grads_ok = grad_worst < 1e-4
    print(f"gradient spot checks: worst relative error {grad_worst:.3e}")

    ok = held == len(results) and expectile_ok and grads_ok
    print("verification " + ("PASSED" if ok else "FAILED"))
    return 0 if ok else EXIT_PRECONDITION


def _quick_gradient_suite(seed: int) -> float:
    """One small finite-difference pass over every objective."""
    from . import gridbattle as gb
    from . import losses as Lo
    from . import nets

    spec = gb.TaskSpec("2v2", 2, 2, 8)
    episodes = []
    for i in range(2):
        ep = dg.run_episode(spec, dg.scripted_policy(0.3, seed + i), seed + i, 0.3)
        episodes.append(ep)
    batch = nets.TorchBatch(dg.make_batch(spec, episodes))
    model = build_model(NetConfig(), seed)
    cfg = LossConfig()
    negs = torch.randn(3, 64, generator=torch.Generator().manual_seed(seed),
                       dtype=torch.float64)
    negs = negs / negs.norm(dim=-1, keepdim=True)
    groups = model.param_groups()

    import hissd.nets as N

    h_val = N.value_hidden_states(model.value, batch)
    h_enc = N.encoder_hidden_states(model.encoder, batch)
    with torch.no_grad():
        skills0 = N.encode_common(model.encoder, batch, hidden_seq=h_enc)
        _, v_now = N.value_sequence(model.value, batch, hidden_seq=h_val)
        s_pred, local = model.predictor(skills0, spec.n_enemies)
        v_next = Lo._next_value_estimate(batch, model.value_target, local, cfg)
        weights = Lo.advantage_weight(batch.rewards, v_next, v_now, cfg)
    h_dec = N.decoder_hidden_states(model.decoder, batch, skills0)

    with torch.no_grad():
        _, v_tot_target = N.value_sequence(model.value_target, batch,
                                           include_final=True)

    worst = 0.0
    checks = [
        (groups["value"],
         lambda: Lo.value_loss(
             batch, model.value, model.value_target, cfg,
             v_tot=N.value_sequence(model.value, batch, hidden_seq=h_val)[1],
             v_tot_target=v_tot_target)),
        (groups["planner"],
         lambda: Lo.planner_loss(batch, model.encoder, model.predictor,
                                 model.value, model.value_target, cfg,
                                 skills=N.encode_common(model.encoder, batch, hidden_seq=h_enc),
                                 weights=weights)[0]),
        (groups["planner"],
         lambda: Lo.planner_loss_explicit(batch, model.encoder, model.predictor,
                                          model.value_target, cfg,
                                          skills=N.encode_common(model.encoder, batch, hidden_seq=h_enc))),
        (groups["controller"],
         lambda: Lo.controller_loss(batch, model.decoder, model.encoder,
                                    model.task_encoder, model.task_momentum,
                                    negs, cfg, np.random.default_rng(seed),
                                    skills=skills0,
                                    hidden_seq=h_dec)[0]),
    ]
    for params, closure in checks:
        worst = max(worst, oracle.gradcheck(closure, params, max_entries=40,
                                            seed=seed))
    return worst


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="hissd",
        description="Offline multi-task multi-agent skill learning on a "
                    "desk-scale battle grid.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, checkpoint=False):
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default=None, help="override the output dir")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    add_common(sub.add_parser("gen-data", help="generate configured datasets"))
    add_common(sub.add_parser("train", help="run offline training"))
    add_common(sub.add_parser("eval", help="evaluate a checkpoint"), checkpoint=True)
    add_common(sub.add_parser("export-skills", help="dump skill embeddings"),
               checkpoint=True)
    verify = sub.add_parser("verify", help="run the verification oracles")
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--worlds", type=int, default=100)

    args = parser.parse_args(argv)
    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "eval": cmd_eval,
        "export-skills": cmd_export_skills,
        "verify": cmd_verify,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except PreconditionError as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except Exception as exc:  # pragma: no cover - defensive
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
