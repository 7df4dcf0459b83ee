"""Command-line experiment runner: one config file per experiment."""

from __future__ import annotations

from pathlib import Path

import click

from . import experiments
from .config import load_config
from .demogen import write_demos
from .experiments import write_csv, _meta
from .gridmdp import mdp_cache_key


def _common(func):
    func = click.option("--config", "config_path", required=True,
                        type=click.Path(exists=True, dir_okay=False),
                        help="Experiment YAML file.")(func)
    func = click.option("--seed", type=int, default=None,
                        help="Override the config seed.")(func)
    func = click.option("--out", "out_dir", type=click.Path(file_okay=False),
                        default=None, help="Output directory.")(func)
    func = click.option("--threads", type=int, default=None,
                        help="Worker threads for demo generation.")(func)
    func = click.option("--cache", "cache_dir", type=click.Path(file_okay=False),
                        default=None, help="Transition-table cache directory.")(func)
    return func


def _load(config_path, seed, out_dir):
    config = load_config(config_path, overrides={"seed": seed,
                                                 "out_dir": out_dir})
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return config, out


@click.group()
def main():
    """Constraint inference on grid-discretized continuous dynamics."""


@main.command("build-mdp")
@_common
def build_mdp_cmd(config_path, seed, out_dir, threads, cache_dir):
    """Precompute the transition table and store it in the cache."""
    config, out = _load(config_path, seed, out_dir)
    cache = cache_dir or out / "cache"
    mdp, hypotheses, _ = experiments.build_model(config, cache_dir=cache)
    key = mdp_cache_key(config.system, config.grid(), config.actions(),
                        config.dt, hypotheses, config.substeps)
    click.echo(f"states={mdp.n_states} actions={mdp.n_actions} "
               f"hypotheses={mdp.n_hypotheses} diverged={mdp.diverged}")
    click.echo(f"cached under key {key[:16]} in {cache}")


@main.command("gen-demos")
@_common
def gen_demos_cmd(config_path, seed, out_dir, threads, cache_dir):
    """Generate demonstrations and write demos.csv plus the pair log."""
    config, out = _load(config_path, seed, out_dir)
    demos, records = experiments.acquire_demos(config, threads=threads)
    write_demos(out / "demos.csv", demos, config.system)
    write_csv(out / "pairs.csv",
              _meta(config, units="goal_error=span-normalized distance"),
              ["pair", "accepted", "reason", "goal_error", "cost"],
              [(r.pair_index, int(r.accepted), r.reason, r.goal_error, r.cost)
               for r in records])
    rejected = sum(1 for r in records if not r.accepted)
    click.echo(f"accepted {len(demos)} demos, rejected {rejected} pairs "
               f"-> {out / 'demos.csv'}")


@main.command("infer")
@_common
def infer_cmd(config_path, seed, out_dir, threads, cache_dir):
    """Run constraint inference; writes report.csv and summary.txt."""
    config, out = _load(config_path, seed, out_dir)
    report, elapsed = experiments.run_inference(config, out,
                                                cache_dir=cache_dir,
                                                threads=threads)
    click.echo(report.summary())
    click.echo(f"inference took {elapsed:.2f}s -> {out / 'report.csv'}")


@main.command("accuracy")
@_common
def accuracy_cmd(config_path, seed, out_dir, threads, cache_dir):
    """Dynamics-accuracy sweep over grid sizes and transition intervals."""
    config, out = _load(config_path, seed, out_dir)
    rows, path = experiments.run_accuracy_experiment(config, out,
                                                     cache_dir=cache_dir)
    for cells, dt, err, used, skipped in rows:
        click.echo(f"cells={cells:5d} dt={dt:<5} mean_error={err:.4f} "
                   f"(used {used}, skipped {skipped})")
    click.echo(f"-> {path}")


@main.command("ranking")
@_common
def ranking_cmd(config_path, seed, out_dir, threads, cache_dir):
    """Mean rank of the true constraint vs number of demonstrations."""
    config, out = _load(config_path, seed, out_dir)
    rows, path = experiments.run_ranking_experiment(config, out,
                                                    cache_dir=cache_dir,
                                                    threads=threads)
    for row in rows:
        click.echo(f"N={row[0]:2d} mean_rank={row[1]:.2f} "
                   f"range=[{row[2]}, {row[3]}]")
    click.echo(f"-> {path}")


@main.command("distance")
@_common
def distance_cmd(config_path, seed, out_dir, threads, cache_dir):
    """Violation-distribution distance across hyperparameters."""
    config, out = _load(config_path, seed, out_dir)
    rows, path = experiments.run_distance_experiment(config, out,
                                                     cache_dir=cache_dir,
                                                     threads=threads)
    for cells, dt, dist, used, skipped in rows:
        click.echo(f"cells={cells:5d} dt={dt:<5} mean_distance={dist:.4f} "
                   f"(trials {used}, skipped {skipped})")
    click.echo(f"-> {path}")


@main.command("tip")
@_common
def tip_cmd(config_path, seed, out_dir, threads, cache_dir):
    """Telescoping-pendulum experiment; reports the top-2 regions."""
    config, out = _load(config_path, seed, out_dir)
    report, rows, elapsed = experiments.run_tip_experiment(config, out,
                                                           cache_dir=cache_dir,
                                                           threads=threads)
    for rank, region, tl, tu, ll, lu, hit in rows:
        click.echo(f"rank {rank}: region {region} theta=[{tl:.2f},{tu:.2f}] "
                   f"length=[{ll:.2f},{lu:.2f}] intersects_truth={bool(hit)}")
    click.echo(f"inference took {elapsed:.1f}s -> {out / 'tip_top2.csv'}")


@main.command("confidence")
@_common
def confidence_cmd(config_path, seed, out_dir, threads, cache_dir):
    """Posterior of the top region as demonstrations accumulate."""
    config, out = _load(config_path, seed, out_dir)
    rows, path = experiments.run_confidence_report(config, out,
                                                   cache_dir=cache_dir,
                                                   threads=threads)
    for n, post, region in rows:
        click.echo(f"N={n:2d} posterior={post:.4f} (region {region})")
    click.echo(f"-> {path}")


@main.command("compare")
@_common
@click.option("--demo-id", type=int, default=0, show_default=True,
              help="Which demonstration to compare against.")
def compare_cmd(config_path, seed, out_dir, threads, cache_dir, demo_id):
    """Dump one demo and one sampled discrete trajectory side by side."""
    config, out = _load(config_path, seed, out_dir)
    sample_seed = seed if seed is not None else config.seed
    _, path = experiments.compare_trajectories(config, demo_id, sample_seed,
                                               out, cache_dir=cache_dir)
    click.echo(f"-> {path}")


if __name__ == "__main__":
    main()
