"""``mnlab`` command line. Every subcommand takes ``--config <json>``; keys matching an
option name become that option's default, command-line flags still win."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import arch
from .audit import appendix_csv, audit as run_audit, parse_resolution
from .data import Dataset, load_dataset, read_indices, save_npz, subsample_indices, synth_dataset, write_indices
from .engine import load_checkpoint
from .transform import TransformConfig, mn_transform

log = logging.getLogger("mnlab")


def _load_config(ctx, param, value):
    if value is None:
        ctx.meta["config"] = {}
        return None
    try:
        cfg = json.loads(Path(value).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise click.BadParameter(f"cannot read {value}: {e}") from None
    if not isinstance(cfg, dict):
        raise click.BadParameter(f"{value}: top level must be a JSON object")
    ctx.meta["config"] = cfg
    names = {p.name for p in ctx.command.params}
    ctx.default_map = {**(ctx.default_map or {}), **{k: _as_option(v) for k, v in cfg.items() if k in names}}
    return value


def _as_option(v):
    # option values are strings: objects stay JSON, lists become comma lists
    if isinstance(v, dict):
        return json.dumps(v)
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    return v


config_option = click.option(
    "--config", type=click.Path(dir_okay=False), is_eager=True, expose_value=False, callback=_load_config,
    help="JSON file of option defaults.",
)


def _extra_config(ctx) -> dict:
    """Config keys that are not options of the current command."""
    names = {p.name for p in ctx.command.params}
    return {k: v for k, v in ctx.meta.get("config", {}).items() if k not in names}


def _dump(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _load_data(path, variant, indices=None) -> Dataset:
    ds = load_dataset(path, variant)
    if indices:
        idx = read_indices(indices)
        if idx.size and (idx.min() < 0 or idx.max() >= len(ds)):
            raise click.ClickException(f"{indices}: index out of range for {len(ds)} samples")
        ds = ds.take(idx)
        hist = ds.class_histogram()
        ipc = int(hist[0]) if hist.size and (hist == hist[0]).all() else None
        ds = Dataset(ds.images, ds.labels, ds.class_count, ipc=ipc,
                     provenance=dict(ds.provenance, indices=str(indices)))
    return ds


@click.group()
@click.option("-v", "--verbose", count=True)
def main(verbose):
    """Multi-Narrow transformation workbench."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")


# -- graphs -----------------------------------------------------------------------------


@main.command()
@config_option
@click.option("--builder", "builder", type=click.Choice(sorted(arch.BUILDERS)), required=True)
@click.option("--args", "args", default="{}", help="Builder keyword arguments as JSON.")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def build(builder, args, out):
    """Write a baseline graph from a builder."""
    kw = json.loads(args)
    g = arch.build(builder, **kw)
    g.save(out)
    click.echo(f"{g.name}: {len(g.layers)} layers -> {out}")


@main.command()
@config_option
@click.option("--in", "src", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--r", "r", type=int, required=True)
@click.option("--norm-policy", type=click.Choice(["per_path", "per_path_block"]), default="per_path")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def transform(src, r, norm_policy, out):
    """Apply the MN transformation with width divisor R."""
    g = mn_transform(arch.ArchGraph.load(src), TransformConfig(r, norm_policy))
    g.save(out)
    click.echo(f"r={g.r} M={g.M}: {len(g.layers)} layers -> {out}")


@main.command()
@config_option
@click.option("--in", "src", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--baseline", type=click.Path(exists=True, dir_okay=False))
@click.option("--resolution", default="32x32")
@click.option("--batch", type=int, default=128)
@click.option("--bytes-per-element", type=int, default=4)
@click.option("--sweep-r", "sweep_r", default=None, help="Comma list of r; audits T(g, r) for each (g must be a baseline).")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--csv", "csv_out", type=click.Path(dir_okay=False), help="Also write the appendix-style CSV table.")
def audit(src, baseline, resolution, batch, bytes_per_element, sweep_r, out, csv_out):
    """Parameter, MACs and activation audit of a graph."""
    g = arch.ArchGraph.load(src)
    res = parse_resolution(resolution)
    base = arch.ArchGraph.load(baseline) if baseline else None
    if sweep_r:
        rs = [int(x) for x in str(sweep_r).split(",")]
        base = base or g
        reports = [run_audit(mn_transform(g, r), res, batch, base, bytes_per_element) for r in rs]
        _dump({"reports": [rep.to_dict() for rep in reports]}, out)
    else:
        reports = [run_audit(g, res, batch, base, bytes_per_element)]
        _dump(reports[0].to_dict(), out)
    if csv_out:
        Path(csv_out).write_text(appendix_csv(reports))
    for rep in reports:
        gain = "" if rep.gain_vs_baseline_percent is None else f" gain {rep.gain_vs_baseline_percent:+.2f}%"
        click.echo(f"r={rep.r}: params {rep.total_params} macs {rep.total_macs_per_batch}{gain}")


# -- data ---------------------------------------------------------------------------------


@main.group()
def data():
    """Dataset subsampling and synthetic data."""


@data.command("subsample")
@config_option
@click.option("--in", "src", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--variant", type=click.Choice(["10", "100"]), default="10")
@click.option("--ipc", type=int, required=True)
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def data_subsample(src, variant, ipc, seed, out):
    """Write a class-balanced index file (sorted JSON array)."""
    ds = load_dataset(src, variant)
    idx = subsample_indices(ds.labels, ipc, seed, ds.class_count)
    write_indices(out, idx)
    click.echo(f"{idx.size} indices ({ipc}/class, seed {seed}) -> {out}")


@data.command("synth")
@config_option
@click.option("--classes", type=int, default=4)
@click.option("--per-class", "per_class", type=int, default=32)
@click.option("--resolution", type=int, default=8)
@click.option("--channels", type=int, default=3)
@click.option("--noise", type=float, default=0.15)
@click.option("--family", type=click.Choice(["grating", "blob"]), default="grating")
@click.option("--seed", type=int, default=0)
@click.option("--template-seed", "template_seed", type=int, default=0)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def data_synth(classes, per_class, resolution, channels, noise, family, seed, template_seed, out):
    """Write a synthetic pattern dataset as .npz."""
    ds = synth_dataset(classes, per_class, resolution, channels, noise, family, seed, template_seed)
    save_npz(out, ds)
    click.echo(f"{len(ds)} images -> {out}")


# -- training and diagnostics -------------------------------------------------------------


@main.command()
@config_option
@click.option("--graph", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--variant", type=click.Choice(["10", "100"]), default="10")
@click.option("--indices", type=click.Path(exists=True, dir_okay=False))
@click.option("--val-data", "val_data", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.pass_context
def train(ctx, graph, data_path, variant, indices, val_data, out):
    """Train a graph; non-option keys of --config form the TrainConfig."""
    from .train import TrainConfig, train as run_train

    tcfg = TrainConfig.from_dict(_extra_config(ctx))
    g = arch.ArchGraph.load(graph)
    ds = _load_data(data_path, variant, indices)
    val = load_dataset(val_data, variant) if val_data else None
    res = run_train(g, ds, val, tcfg, out_dir=out)
    f = res.final
    click.echo(f"epoch {f['epoch']}: train_acc {f['train_acc']:.4f} val_acc {f['val_acc']:.4f} -> {out}")


@main.command()
@config_option
@click.option("--run", "run_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--variant", type=click.Choice(["10", "100"]), default="10")
@click.option("--indices", type=click.Path(exists=True, dir_okay=False))
@click.option("--layers", default=None, help="Comma list of layer ids for CKA (default: every ReLU).")
@click.option("--ref-groups", "ref_groups", type=int, default=4)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def diagnose(run_dir, data_path, variant, indices, layers, ref_groups, out):
    """Group CKA, dead-neuron ratio, per-path, oracle and cumulative-path accuracy."""
    from .data import standardize
    from .diagnostics import diagnose as run_diagnose, write_diagnostics

    g, state, extra = load_checkpoint(Path(run_dir) / "checkpoint.mnck")
    ds = _load_data(data_path, variant, indices)
    if "norm_mean" in extra:
        ds = standardize(ds, extra["norm_mean"], extra["norm_std"])
    sel = layers.split(",") if layers else None
    rep = run_diagnose(g, state, ds, sel, ref_groups, extra.get("aggregation", "logit"))
    write_diagnostics(rep, out)
    click.echo(f"aggregated {rep.aggregated_accuracy:.4f} oracle {rep.oracle_accuracy:.4f} "
               f"best path {max(rep.per_path_accuracy):.4f} -> {out}")


# -- sweeps -------------------------------------------------------------------------------


@main.command()
@config_option
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Overrides out_dir.")
@click.option("--parallelism", type=int, default=None)
@click.option("--report/--no-report", "with_report", default=True)
@click.pass_context
def sweep(ctx, out_dir, parallelism, with_report):
    """Run an (r x IPC x seed) sweep described by --config; reruns skip finished cells."""
    from .sweep import SweepConfig, emit_report, run_sweep

    d = dict(_extra_config(ctx))
    if out_dir:
        d["out_dir"] = out_dir
    if parallelism is not None:
        d["parallelism"] = parallelism
    if "out_dir" not in d:
        raise click.UsageError("out_dir must be given in --config or with --out")
    outcome = run_sweep(SweepConfig.from_dict(d))
    click.echo(f"completed {len(outcome.completed)}, skipped {len(outcome.skipped)}, failed {len(outcome.failures)}")
    if outcome.table.rows and with_report:
        emit_report(d["out_dir"])
    if outcome.failures:
        for cid, msg in sorted(outcome.failures.items()):
            click.echo(f"FAILED {cid}: {msg}", err=True)
        sys.exit(1)


@main.command()
@config_option
@click.option("--results", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
def report(results, out):
    """Emit matrices, cost table and summary.json from a sweep directory."""
    from .sweep import emit_report

    paths = emit_report(results, out)
    for p in paths.values():
        click.echo(str(p))


def run(argv=None) -> int:
    """Call the CLI and return its exit code; library errors become exit code 1."""
    try:
        main.main(args=argv, prog_name="mnlab", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.exceptions.Abort:
        return 1
    except SystemExit as e:
        return int(e.code or 0)
    except (ValueError, OSError, RuntimeError, KeyError) as e:
        click.echo(f"error: {e}", err=True)
        return 1
    return 0


def entry() -> None:
    sys.exit(run())


if __name__ == "__main__":
    entry()
