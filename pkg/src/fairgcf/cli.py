"""Experiment command line: prepare, filter, train, eval, sweep.

Configuration comes from an optional JSON file (``--config``) overlaid with
command-line flags; flags win. All artifacts are plain delimited text or
JSON except checkpoints, which use the documented ``.npz`` embedding format.
One master seed (``--seed``) feeds named substreams for splitting, training
and sweep arms, so arms of a comparison share the identical split.

Artifact layout under the output directory::

    split.tsv           user <TAB> item <TAB> rating <TAB> part
    stats.json          corpus statistics written by prepare
    users.tsv/items.tsv dense index -> raw key mappings
    graph_edges.tsv     filtered training graph (user <TAB> item)
    filter_report.json  audit record of the quality filter
    checkpoint.npz      trained embeddings
    trace.tsv           per-epoch loss / validation NDCG / seconds
    eval_report.json    full metric report
    eval_metrics.tsv    plot-ready rows: cutoff <TAB> metric <TAB> value
    sweep.tsv           one row per sweep arm
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from fairgcf.data import RatingDataset, Split, k_core_filter, load_interactions, split_per_user
from fairgcf.graph import build_graph, graph_from_edges
from fairgcf.metrics import evaluate_split
from fairgcf.propagation import load_checkpoint, save_checkpoint
from fairgcf.quality import filter_low_quality
from fairgcf.seeding import derive_seed
from fairgcf.training import TrainConfig
from fairgcf.training import fit as train_fit

DEFAULTS = {
    "dataset": None,
    "delimiter": "\t",
    "k_core": 10,
    "fractions": (0.7, 0.1, 0.2),
    "seed": 0,
    "lambda": 0.1,
    "gamma": 20,
    "objective": "cost_sensitive_ce",
    "dim": 64,
    "n_layers": 3,
    "learning_rate": 1e-3,
    "batch_size": 2048,
    "max_epochs": 500,
    "patience": 20,
    "val_cutoff": 100,
    "optimizer": "adam",
    "propagation_refresh": "batch",
    "cutoffs": (100, 300),
    "use_filtered": True,
}


def _load_settings(config_path, **overrides) -> dict:
    settings = dict(DEFAULTS)
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise click.ClickException(f"cannot read config {config_path}: {exc}")
        if "lambda_" in loaded:
            loaded["lambda"] = loaded.pop("lambda_")
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise click.ClickException(f"unknown config keys: {sorted(unknown)}")
        settings.update(loaded)
    for key, value in overrides.items():
        if value is not None:
            settings[key] = value
    settings["fractions"] = tuple(settings["fractions"])
    settings["cutoffs"] = tuple(int(c) for c in settings["cutoffs"])
    return settings


def _train_config(settings: dict, seed: int) -> TrainConfig:
    return TrainConfig(
        lambda_=float(settings["lambda"]),
        gamma=int(settings["gamma"]),
        dim=int(settings["dim"]),
        n_layers=int(settings["n_layers"]),
        learning_rate=float(settings["learning_rate"]),
        batch_size=int(settings["batch_size"]),
        max_epochs=int(settings["max_epochs"]),
        patience=int(settings["patience"]),
        seed=seed,
        objective=settings["objective"],
        val_cutoff=int(settings["val_cutoff"]),
        optimizer=settings["optimizer"],
        propagation_refresh=settings["propagation_refresh"],
    )


def _write_labels(path: Path, labels) -> None:
    lines = [f"{idx}\t{label}" for idx, label in enumerate(labels)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_split(out_dir: Path, split: Split, k_core: int) -> None:
    rows = []
    for part, ds in (("train", split.train), ("validation", split.validation), ("test", split.test)):
        for u, i, r in zip(ds.users, ds.items, ds.ratings):
            rows.append(f"{int(u)}\t{int(i)}\t{float(r)!r}\t{part}")
    (out_dir / "split.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")

    total = len(split.train) + len(split.validation) + len(split.test)
    stats = {
        "num_users": split.num_users,
        "num_items": split.num_items,
        "num_interactions": total,
        "density": total / (split.num_users * split.num_items),
        "rating_scale": list(split.train.rating_scale),
        "k_core": k_core,
        "seed": split.seed,
        "train_interactions": len(split.train),
        "validation_interactions": len(split.validation),
        "test_interactions": len(split.test),
        "train_only_users": split.train_only_users,
    }
    (out_dir / "stats.json").write_text(
        json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    if split.train.user_labels is not None:
        _write_labels(out_dir / "users.tsv", split.train.user_labels)
    if split.train.item_labels is not None:
        _write_labels(out_dir / "items.tsv", split.train.item_labels)


def read_split(out_dir: Path) -> Split:
    split_path = out_dir / "split.tsv"
    stats_path = out_dir / "stats.json"
    if not split_path.exists() or not stats_path.exists():
        raise click.ClickException(
            f"no prepared split under {out_dir}; run 'fairgcf prepare' first"
        )
    stats = json.loads(stats_path.read_text(encoding="utf-8"))
    parts = {"train": ([], [], []), "validation": ([], [], []), "test": ([], [], [])}
    for line in split_path.read_text(encoding="utf-8").splitlines():
        u, i, r, part = line.split("\t")
        parts[part][0].append(int(u))
        parts[part][1].append(int(i))
        parts[part][2].append(float(r))

    def as_dataset(cols) -> RatingDataset:
        return RatingDataset(
            users=np.array(cols[0], dtype=np.int64),
            items=np.array(cols[1], dtype=np.int64),
            ratings=np.array(cols[2], dtype=np.float64),
            num_users=stats["num_users"],
            num_items=stats["num_items"],
            rating_scale=tuple(stats["rating_scale"]),
        )

    return Split(
        train=as_dataset(parts["train"]),
        validation=as_dataset(parts["validation"]),
        test=as_dataset(parts["test"]),
        seed=stats["seed"],
        train_only_users=stats["train_only_users"],
    )


def _read_filtered_graph(out_dir: Path, split: Split):
    path = out_dir / "graph_edges.tsv"
    if not path.exists():
        raise click.ClickException(
            f"no filtered graph under {out_dir}; run 'fairgcf filter' first "
            f"or pass --no-use-filtered"
        )
    pairs = np.loadtxt(path, dtype=np.int64, delimiter="\t", ndmin=2)
    if pairs.size == 0:
        pairs = pairs.reshape(0, 2)
    return graph_from_edges(split.num_users, split.num_items, pairs[:, 0], pairs[:, 1])


def _out_dir(out) -> Path:
    if out is None:
        raise click.ClickException("no output directory; pass --out or set FAIRGCF_OUT")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


out_option = click.option(
    "--out", envvar="FAIRGCF_OUT", default=None, help="Output directory (env: FAIRGCF_OUT)."
)
config_option = click.option("--config", default=None, help="JSON config file; flags win.")
seed_option = click.option("--seed", type=int, default=None, help="Master seed.")


@click.group()
def main():
    """Fairness-aware graph collaborative filtering experiments."""


@main.command()
@config_option
@click.option("--dataset", default=None, help="Delimited rating file.")
@click.option("--delimiter", default=None, help="Field delimiter (default tab).")
@click.option("--k-core", "k_core", type=int, default=None, help="k-core threshold.")
@seed_option
@out_option
def prepare(config, dataset, delimiter, k_core, seed, out):
    """Load ratings, apply the k-core filter, and write per-user splits."""
    settings = _load_settings(
        config, dataset=dataset, delimiter=delimiter, k_core=k_core, seed=seed
    )
    if settings["dataset"] is None:
        raise click.ClickException("no dataset; pass --dataset or set it in the config")
    out_dir = _out_dir(out)
    try:
        ratings = load_interactions(settings["dataset"], delimiter=settings["delimiter"])
        filtered = k_core_filter(ratings, settings["k_core"])
        split = split_per_user(
            filtered,
            settings["fractions"],
            seed=derive_seed(settings["seed"], "split"),
        )
    except ValueError as exc:
        raise click.ClickException(str(exc))
    write_split(out_dir, split, settings["k_core"])
    total = len(split.train) + len(split.validation) + len(split.test)
    click.echo(
        f"prepared: users={split.num_users} items={split.num_items} "
        f"interactions={total} "
        f"density={total / (split.num_users * split.num_items):.6g} "
        f"train_only_users={split.train_only_users}"
    )


@main.command("filter")
@config_option
@click.option("--gamma", type=int, default=None, help="Degree threshold of the filter.")
@out_option
def filter_cmd(config, gamma, out):
    """Apply the quality filter to the prepared train graph."""
    settings = _load_settings(config, gamma=gamma)
    out_dir = _out_dir(out)
    split = read_split(out_dir)
    graph = build_graph(split.train)
    try:
        filtered, report = filter_low_quality(graph, split.train, settings["gamma"])
    except ValueError as exc:
        raise click.ClickException(str(exc))
    rows = [f"{u}\t{i}" for u, i in zip(filtered.users, filtered.items)]
    (out_dir / "graph_edges.tsv").write_text(
        ("\n".join(rows) + "\n") if rows else "", encoding="utf-8"
    )
    (out_dir / "filter_report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    click.echo(
        f"filtered: gamma={report.gamma} removed_items={len(report.removed_items)} "
        f"removed_edges={report.removed_edges} "
        f"disconnected_users={len(report.disconnected_users)}"
    )


@main.command()
@config_option
@click.option("--objective", default=None, type=click.Choice(["cost_sensitive_ce", "plain_ce", "bpr"]))
@click.option("--lambda", "lambda_", type=float, default=None, help="Cost-sensitivity weight.")
@click.option("--gamma", type=int, default=None, help="Filter threshold (metadata only here).")
@click.option("--use-filtered/--no-use-filtered", default=None, help="Train on the filtered graph.")
@click.option("--dim", type=int, default=None)
@click.option("--n-layers", type=int, default=None)
@click.option("--learning-rate", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--max-epochs", type=int, default=None)
@click.option("--patience", type=int, default=None)
@seed_option
@out_option
def train(config, objective, lambda_, gamma, use_filtered, dim, n_layers,
          learning_rate, batch_size, max_epochs, patience, seed, out):
    """Train one arm and persist its best checkpoint and trace."""
    settings = _load_settings(
        config,
        objective=objective,
        gamma=gamma,
        use_filtered=use_filtered,
        dim=dim,
        n_layers=n_layers,
        learning_rate=learning_rate,
        batch_size=batch_size,
        max_epochs=max_epochs,
        patience=patience,
        seed=seed,
        **{"lambda": lambda_},
    )
    out_dir = _out_dir(out)
    split = read_split(out_dir)
    graph = _read_filtered_graph(out_dir, split) if settings["use_filtered"] else None
    train_seed = derive_seed(settings["seed"], "train")
    cfg = _train_config(settings, train_seed)
    try:
        state, trace = train_fit(split, cfg, graph=graph)
    except (ValueError, RuntimeError) as exc:
        raise click.ClickException(str(exc))
    save_checkpoint(out_dir / "checkpoint.npz", state, seed=train_seed)
    (out_dir / "trace.tsv").write_text(trace.to_tsv(), encoding="utf-8")
    click.echo(
        f"trained: objective={cfg.objective} epochs={trace.n_epochs} "
        f"best_epoch={trace.best_epoch} best_val_ndcg={trace.best_val_ndcg:.6f}"
    )


@main.command("eval")
@config_option
@click.option("--checkpoint", default=None, help="Checkpoint path (default <out>/checkpoint.npz).")
@click.option("--cutoffs", default=None, help="Comma-separated ranking cutoffs.")
@out_option
def eval_cmd(config, checkpoint, cutoffs, out):
    """Evaluate a checkpoint: utility and fairness metrics per cutoff."""
    parsed_cutoffs = None
    if cutoffs is not None:
        parsed_cutoffs = tuple(int(c) for c in cutoffs.split(",") if c.strip())
    settings = _load_settings(config, cutoffs=parsed_cutoffs)
    out_dir = _out_dir(out)
    split = read_split(out_dir)
    ckpt_path = Path(checkpoint) if checkpoint else out_dir / "checkpoint.npz"
    if not ckpt_path.exists():
        raise click.ClickException(f"checkpoint not found: {ckpt_path}")
    state, _ = load_checkpoint(ckpt_path)
    try:
        report = evaluate_split(state, split, cutoffs=settings["cutoffs"])
    except ValueError as exc:
        raise click.ClickException(str(exc))
    (out_dir / "eval_report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    plot_lines = ["cutoff\tmetric\tvalue"]
    for cutoff, metric, value in report.plot_rows():
        plot_lines.append(f"{cutoff}\t{metric}\t{'' if value is None else repr(float(value))}")
    (out_dir / "eval_metrics.tsv").write_text("\n".join(plot_lines) + "\n", encoding="utf-8")
    for cutoff in report.cutoffs:
        block = report.metrics[cutoff]
        rendered = " ".join(
            f"{name}={'NA' if block[name] is None else format(block[name], '.6f')}"
            for name in ("recall", "ndcg", "mrr", "map", "pru", "pri", "eo")
        )
        click.echo(f"eval@{cutoff}: {rendered}")


@main.command()
@config_option
@click.option(
    "--parameter", type=click.Choice(["lambda", "gamma"]), required=True,
    help="Hyperparameter to sweep.",
)
@click.option("--values", required=True, help="Comma-separated sweep values.")
@click.option("--objective", default=None, type=click.Choice(["cost_sensitive_ce", "plain_ce", "bpr"]))
@click.option("--cutoffs", default=None, help="Comma-separated ranking cutoffs.")
@seed_option
@out_option
def sweep(config, parameter, values, objective, cutoffs, seed, out):
    """Train and evaluate one arm per value, collecting a sweep table."""
    parsed_cutoffs = None
    if cutoffs is not None:
        parsed_cutoffs = tuple(int(c) for c in cutoffs.split(",") if c.strip())
    settings = _load_settings(config, objective=objective, seed=seed, cutoffs=parsed_cutoffs)
    out_dir = _out_dir(out)
    split = read_split(out_dir)
    try:
        parsed = [float(v) if parameter == "lambda" else int(v) for v in values.split(",") if v.strip()]
    except ValueError as exc:
        raise click.ClickException(f"bad sweep values {values!r}: {exc}")
    if not parsed:
        raise click.ClickException("no sweep values given")

    base_graph = build_graph(split.train)
    rows = []
    for arm_index, value in enumerate(parsed):
        arm_settings = dict(settings)
        arm_settings["lambda" if parameter == "lambda" else "gamma"] = value
        arm_dir = out_dir / "sweep" / f"{parameter}_{value:g}"
        arm_dir.mkdir(parents=True, exist_ok=True)
        try:
            graph = None
            if arm_settings["use_filtered"]:
                graph, report = filter_low_quality(
                    base_graph, split.train, int(arm_settings["gamma"])
                )
                (arm_dir / "filter_report.json").write_text(
                    report.to_json() + "\n", encoding="utf-8"
                )
            arm_seed = derive_seed(settings["seed"], "sweep", arm_index)
            cfg = _train_config(arm_settings, arm_seed)
            state, trace = train_fit(split, cfg, graph=graph)
            save_checkpoint(arm_dir / "checkpoint.npz", state, seed=arm_seed)
            (arm_dir / "trace.tsv").write_text(trace.to_tsv(), encoding="utf-8")
            report = evaluate_split(state, split, cutoffs=settings["cutoffs"])
            (arm_dir / "eval_report.json").write_text(report.to_json() + "\n", encoding="utf-8")
            first = settings["cutoffs"][0]
            block = report.metrics[first]
            rows.append((value, block["ndcg"], block["pru"], block["pri"], block["eo"], ""))
        except Exception as exc:  # record the arm failure, keep sweeping
            rows.append((value, None, None, None, None, str(exc)))

    lines = [f"{parameter}\tndcg\tpru\tpri\teo\terror"]
    for value, ndcg, pru, pri, eo_val, error in rows:
        cells = [f"{value:g}"]
        for metric in (ndcg, pru, pri, eo_val):
            cells.append("" if metric is None else repr(float(metric)))
        cells.append(error)
        lines.append("\t".join(cells))
    (out_dir / "sweep.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    failures = sum(1 for r in rows if r[5])
    click.echo(f"sweep: parameter={parameter} arms={len(rows)} failures={failures}")
    if failures == len(rows):
        sys.exit(1)


if __name__ == "__main__":
    main()
