"""``ufl`` command line: file-mediated pipeline from chips to hierarchies.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
failure.  Every command accepts ``--config FILE.toml``; keys are option names
with underscores (``batch_size = 16``), either at top level or in a table
named after the command.  Flags given on the command line win over the file.
Commands that write an output directory also write ``config.toml`` holding
the fully resolved settings, which can be fed back with ``--config``.
"""

from __future__ import annotations

import csv
import json
import logging
import sys
import time
from pathlib import Path

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from . import autodiff as ad
from .data import fileio
from .data.augment import AugmentConfig
from .data.chips import extract_chips
from .data.synth import SynthConfig, synth_dataset
from .hierarchy import agglomerate, export_dendrogram, similarity_from_confusion, to_text
from .knn import evaluate, load_confusion_csv, random_baseline, save_confusion_csv
from .models import Encoder, EncoderConfig, FormatError, load_encoder, save_checkpoint
from .retrieval import (
    flag_outliers,
    intra_class_nn_distances,
    nearest_instances,
    pca_project,
    write_projection_csv,
    write_retrieval_manifest,
)
from .train import MemoryBank, TrainConfig, train, train_autoencoder, train_supervised, write_loss_log

log = logging.getLogger("ufl")

THREADS_ENV = "UFL_THREADS"


class JsonLinesFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        out = {"ts": round(record.created, 3), "level": record.levelname.lower(), "logger": record.name,
               "msg": record.getMessage()}
        out.update(getattr(record, "fields", {}))
        return json.dumps(out)


def _event(msg: str, **fields) -> None:
    log.info(msg, extra={"fields": fields})


def _setup_logging(verbose: bool) -> None:
    root = logging.getLogger()
    if not any(getattr(h, "_ufl", False) for h in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(JsonLinesFormatter())
        handler._ufl = True
        root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


# -- config plumbing ----------------------------------------------------------


def _load_config(ctx: click.Context, param: click.Parameter, value):
    if value is None:
        return None
    try:
        with open(value, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise click.BadParameter(f"{value}: {exc}", ctx=ctx, param=param)
    section = data.pop(ctx.info_name, {})
    flat = {k: v for k, v in data.items() if not isinstance(v, dict)}
    flat.update(section if isinstance(section, dict) else {})
    known = {p.name for p in ctx.command.params}
    unknown = sorted(set(flat) - known)
    if unknown:
        raise click.BadParameter(f"{value}: unknown keys {unknown}", ctx=ctx, param=param)
    ctx.default_map = {**(ctx.default_map or {}), **flat}
    return value


def _common(fn):
    fn = click.option("--threads", type=click.IntRange(min=1), envvar=THREADS_ENV, show_envvar=True,
                      default=None, help="Cap on BLAS worker threads.")(fn)
    fn = click.option("--verbose", is_flag=True, help="Debug-level logs.")(fn)
    fn = click.option("--config", type=click.Path(exists=True, dir_okay=False), callback=_load_config,
                      is_eager=True, expose_value=True, help="TOML file with option defaults.")(fn)
    return fn


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return json.dumps(str(v))


def resolved_config(ctx: click.Context) -> dict:
    return {k: v for k, v in ctx.params.items() if k not in ("config", "verbose", "threads") and v is not None}


def write_resolved_config(ctx: click.Context, out_dir: Path) -> None:
    cfg = resolved_config(ctx)
    lines = [f"# ufl {__version__} {ctx.info_name}"]
    lines += [f"{k} = {_toml_value(v)}" for k, v in sorted(cfg.items())]
    (out_dir / "config.toml").write_text("\n".join(lines) + "\n")


def _start(ctx: click.Context, verbose: bool, threads: int | None) -> None:
    _setup_logging(verbose)
    if threads:
        from threadpoolctl import threadpool_limits

        threadpool_limits(threads)
    _event("start", command=ctx.info_name, config=resolved_config(ctx), threads=threads)


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _outfile(path) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


# -- shared loaders -----------------------------------------------------------


def _chip_paths(data: str) -> list[str]:
    p = Path(data)
    index = p / "index.csv" if p.is_dir() else p
    with open(index, newline="") as fh:
        return [str(index.parent / row["chip_path"]) for row in csv.DictReader(fh)]


def _load_model(model: str) -> tuple[Encoder, dict]:
    enc, header, _ = load_encoder(model)
    return enc, header


def _load_data(data: str, encoder: Encoder | None = None):
    side = encoder.config.input_shape[0] if encoder is not None else None
    return fileio.load_dataset(data, side=side)


def _split_bank(ds, enc: Encoder, split: str, tau: float) -> MemoryBank:
    rows = np.flatnonzero(ds.split == split)
    if len(rows) == 0:
        raise ValueError(f"dataset has no '{split}' rows")
    return MemoryBank(enc.embed(ds.chips[rows]), ids=rows.astype(np.uint64), labels=ds.labels[rows], tau=tau)


# -- commands -----------------------------------------------------------------


@click.group()
@click.version_option(__version__, prog_name="ufl")
def cli() -> None:
    """Unsupervised feature learning on image chips."""


@cli.command()
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), required=True,
              help="JSON-lines annotations {image, bbox, class_id}.")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output directory.")
@click.option("--split", default="train", show_default=True, help="Value of the index split column.")
@_common
@click.pass_context
def chip(ctx, manifest, out, split, config, verbose, threads):
    """Cut square chips centred on each annotation; log discards."""
    _start(ctx, verbose, threads)
    anns = fileio.read_manifest(manifest)
    result = extract_chips(anns)
    out = _outdir(out)
    fileio.write_chips(out, result.chips, split)
    with open(out / "discards.jsonl", "w") as fh:
        for d in result.discarded:
            fh.write(json.dumps({"index": d.index, "image": d.annotation.image, "bbox": list(d.annotation.bbox),
                                 "reason": d.reason}) + "\n")
    write_resolved_config(ctx, out)
    _event("chips", kept=len(result.chips), discarded=len(result.discarded))
    click.echo(f"kept {len(result.chips)} discarded {len(result.discarded)}")


@cli.command()
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output dataset directory.")
@click.option("--classes", "num_classes", type=click.IntRange(min=1), default=8, show_default=True)
@click.option("--total", type=click.IntRange(min=2), default=5000, show_default=True)
@click.option("--imbalance-ratio", type=click.FloatRange(min=1.0), default=100.0, show_default=True,
              help="Largest-to-smallest class population ratio.")
@click.option("--side", "chip_side", type=click.IntRange(min=8), default=32, show_default=True)
@click.option("--test-fraction", type=click.FloatRange(0.0, 1.0, max_open=True), default=0.2, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@_common
@click.pass_context
def synth(ctx, out, num_classes, total, imbalance_ratio, chip_side, test_fraction, seed, config, verbose, threads):
    """Render a seeded synthetic chip dataset with a long-tailed class distribution."""
    _start(ctx, verbose, threads)
    cfg = SynthConfig(num_classes=num_classes, total=total,
                      imbalance=SynthConfig.exponent_for_ratio(num_classes, imbalance_ratio),
                      chip_side=chip_side, test_fraction=test_fraction, seed=seed)
    ds = synth_dataset(cfg)
    out = _outdir(out)
    fileio.save_dataset(out, ds)
    write_resolved_config(ctx, out)
    digest = ds.checksum()
    _event("synth", instances=len(ds), checksum=digest)
    click.echo(digest)


@cli.command("train")
@click.option("--data", type=click.Path(exists=True), required=True, help="Dataset directory (index.csv).")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output directory.")
@click.option("--mode", type=click.Choice(["ufl", "autoencoder", "supervised"]), default="ufl", show_default=True)
@click.option("--nce/--exact", default=False, show_default=True, help="UFL objective: NCE or exact softmax.")
@click.option("--epochs", type=click.IntRange(min=1), default=30, show_default=True)
@click.option("--batch-size", type=click.IntRange(min=1), default=16, show_default=True)
@click.option("--lr", type=click.FloatRange(min=0, min_open=True), default=None,
              help="Learning rate [default: 0.03, or 0.01 with --nce].")
@click.option("--tau", type=click.FloatRange(min=0, min_open=True), default=0.07, show_default=True)
@click.option("--nce-m", type=click.IntRange(min=1), default=64, show_default=True)
@click.option("--embed-dim", type=click.IntRange(min=2), default=128, show_default=True)
@click.option("--side", type=click.IntRange(min=8), default=32, show_default=True, help="Encoder input side.")
@click.option("--augment/--no-augment", default=True, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@_common
@click.pass_context
def train_cmd(ctx, data, out, mode, nce, epochs, batch_size, lr, tau, nce_m, embed_dim, side, augment, seed,
              config, verbose, threads):
    """Train an encoder; writes model.ckpt, bank.bin, losses.csv, config.toml."""
    if lr is None:
        lr = ctx.params["lr"] = 0.01 if nce and mode == "ufl" else 0.03
    _start(ctx, verbose, threads)
    ds = fileio.load_dataset(data, side=side)
    rows = np.flatnonzero(ds.split == "train")
    if len(rows) == 0:
        raise ValueError(f"{data}: no training rows")
    chips, labels = ds.chips[rows], ds.labels[rows]
    enc = Encoder(EncoderConfig(input_shape=(side, side, 3), embed_dim=embed_dim, seed=seed))
    tc = TrainConfig(tau=tau, lr=lr, epochs=epochs, batch_size=batch_size, mode="nce" if nce else "exact",
                     nce_m=nce_m, augment=AugmentConfig() if augment else AugmentConfig.disabled(), seed=seed)

    def progress(rec):
        _event("epoch", epoch=rec.epoch, mean_loss=rec.mean_loss, lr=rec.lr)

    t0 = time.time()
    extras = {"mode": mode, "train": tc.to_dict()}
    extra_params = []
    if mode == "ufl":
        res = train(chips, enc, tc, labels=labels, callback=progress)
        extras.update(res.extra)
    elif mode == "autoencoder":
        res = train_autoencoder(chips, enc, tc, callback=progress)
        extra_params = res.extra["decoder"].parameters()
    else:
        num_classes = len(ds.class_names)
        res = train_supervised(chips, labels, enc, tc, num_classes=num_classes, callback=progress)
        extras["num_classes"] = num_classes
        extra_params = res.extra["head"].parameters()
    out = _outdir(out)
    save_checkpoint(out / "model.ckpt", enc, extras, extra_params)
    bank = res.bank
    if bank is None:
        bank = MemoryBank(enc.embed(chips), labels=labels, tau=tau)
    bank = MemoryBank(bank.vectors, ids=rows.astype(np.uint64), labels=labels, tau=tau)
    fileio.save_bank(out / "bank.bin", bank)
    write_loss_log(out / "losses.csv", res.losses)
    write_resolved_config(ctx, out)
    _event("trained", seconds=round(time.time() - t0, 2), final_loss=res.losses[-1].mean_loss)
    click.echo(f"final loss {res.losses[-1].mean_loss:.6f}")


@cli.command("eval")
@click.option("--model", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--bank", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Labelled bank file; default re-embeds the train split.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--k", type=click.IntRange(min=1), default=50, show_default=True)
@click.option("--tau", type=click.FloatRange(min=0, min_open=True), default=0.07, show_default=True)
@_common
@click.pass_context
def eval_cmd(ctx, model, data, bank, out, k, tau, config, verbose, threads):
    """Weighted-KNN top-1/top-5 accuracy on the test split."""
    _start(ctx, verbose, threads)
    enc, _ = _load_model(model)
    ds = _load_data(data, enc)
    mb = fileio.load_bank(bank, tau) if bank else _split_bank(ds, enc, "train", tau)
    test = ds.subset("test")
    if len(test) == 0:
        raise ValueError(f"{data}: no test rows")
    report = evaluate(mb, enc.embed(test.chips), test.labels, k=min(k, mb.n), tau=tau,
                      num_classes=len(ds.class_names), class_names=ds.class_names)
    out = _outdir(out)
    report.save_json(out / "report.json")
    report.save_per_class_csv(out / "per_class.csv")
    save_confusion_csv(out / "confusion_top1.csv", report.confusion_top1, ds.class_names)
    save_confusion_csv(out / "confusion_top5.csv", report.confusion_top5, ds.class_names)
    write_resolved_config(ctx, out)
    summary = {key: round(getattr(report, key), 4)
               for key in ("top1_instance", "top5_instance", "top1_class", "top5_class")}
    _event("eval", **summary)
    click.echo(json.dumps(summary))


@cli.command()
@click.option("--model", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--query-id", "query_ids", type=int, multiple=True, help="Dataset row ids (default: test split).")
@click.option("--k", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="JSON-lines result manifest.")
@_common
@click.pass_context
def search(ctx, model, data, query_ids, k, out, config, verbose, threads):
    """Nearest training chips for each query chip."""
    _start(ctx, verbose, threads)
    enc, _ = _load_model(model)
    ds = _load_data(data, enc)
    paths = _chip_paths(data)
    mb = _split_bank(ds, enc, "train", 0.07)
    queries = list(query_ids) or np.flatnonzero(ds.split == "test").tolist()
    bad = [q for q in queries if not 0 <= q < len(ds)]
    if bad:
        raise ValueError(f"query ids {bad} outside [0, {len(ds)})")
    emb = enc.embed(ds.chips[queries]) if queries else np.zeros((0, enc.config.embed_dim))
    results = []
    for q, v in zip(queries, emb):
        hits = nearest_instances(mb, v, min(k, mb.n))
        results.append({"query": q, "query_chip": paths[q], "ids": [i for i, _ in hits],
                        "similarities": [s for _, s in hits], "chips": [paths[i] for i, _ in hits]})
    write_retrieval_manifest(_outfile(out), results)
    write_resolved_config(ctx, Path(out).parent)
    _event("search", queries=len(results))


@cli.command()
@click.option("--model", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--split", default="train", show_default=True)
@click.option("--sigmas", type=float, default=2.0, show_default=True)
@click.option("--ddof", type=click.IntRange(0, 1), default=0, show_default=True,
              help="0 population std, 1 sample std.")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="JSON report.")
@_common
@click.pass_context
def outliers(ctx, model, data, split, sigmas, ddof, out, config, verbose, threads):
    """Flag instances far from their nearest same-class neighbour."""
    _start(ctx, verbose, threads)
    enc, _ = _load_model(model)
    ds = _load_data(data, enc)
    mb = _split_bank(ds, enc, split, 0.07)
    report = flag_outliers(intra_class_nn_distances(mb), sigmas=sigmas, ddof=ddof)
    report.save_json(_outfile(out), ds.class_names)
    write_resolved_config(ctx, Path(out).parent)
    _event("outliers", flagged=len(report.flagged_ids))
    click.echo(f"flagged {len(report.flagged_ids)}")


@cli.command()
@click.option("--confusion", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Confusion CSV as written by eval.")
@click.option("--linkage", type=click.Choice(["average", "single", "complete"]), default="average",
              show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@_common
@click.pass_context
def hierarchy(ctx, confusion, linkage, out, config, verbose, threads):
    """Cluster classes by mutual confusion; writes tree.nwk, tree.json, tree.txt."""
    _start(ctx, verbose, threads)
    M, names = load_confusion_csv(confusion)
    dg = agglomerate(similarity_from_confusion(M), linkage)
    newick, js = export_dendrogram(dg, names)
    out = _outdir(out)
    (out / "tree.nwk").write_text(newick + "\n")
    (out / "tree.json").write_text(js + "\n")
    text = to_text(dg, names)
    (out / "tree.txt").write_text(text)
    write_resolved_config(ctx, out)
    click.echo(text, nl=False)


@cli.command()
@click.option("--model", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--data", type=click.Path(exists=True), default=None)
@click.option("--bank", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Project a bank file instead of embedding a dataset split.")
@click.option("--split", default="train", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="CSV id,x,y,label.")
@_common
@click.pass_context
def project(ctx, model, data, bank, split, seed, out, config, verbose, threads):
    """2-D principal-component projection of embeddings."""
    _start(ctx, verbose, threads)
    if bank:
        mb = fileio.load_bank(bank)
    elif model and data:
        enc, _ = _load_model(model)
        mb = _split_bank(_load_data(data, enc), enc, split, 0.07)
    else:
        raise click.UsageError("give --bank, or both --model and --data")
    coords = pca_project(mb, 2, seed=seed)
    write_projection_csv(_outfile(out), mb.ids, coords, mb.labels)
    write_resolved_config(ctx, Path(out).parent)
    _event("project", points=mb.n)


@cli.command()
@click.option("--populations", type=click.Path(exists=True, dir_okay=False), default=None,
              help="CSV class,train_count,test_count (default: bundled xView table).")
@click.option("--top", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--averaging", type=click.Choice(["instance", "class", "both"]), default="both", show_default=True)
@click.option("--model", "draw_model", type=click.Choice(["independent", "without_replacement"]),
              default="independent", show_default=True, help="How the n guesses are drawn.")
@click.option("--weights", "truth_weights", type=click.Choice(["test", "train"]), default="test",
              show_default=True, help="Population weighting instance-averaged scores.")
@_common
@click.pass_context
def baseline(ctx, populations, top, averaging, draw_model, truth_weights, config, verbose, threads):
    """Expected accuracy of guessing classes from training frequencies."""
    _start(ctx, verbose, threads)
    rows = fileio.read_populations(populations)
    scores = random_baseline([r[1] for r in rows], [r[2] for r in rows], n=top, model=draw_model,
                             truth_weights=truth_weights)
    keys = ["instance", "class"] if averaging == "both" else [averaging]
    for key in keys:
        click.echo(f"top-{top} {key}-averaged {scores[key]:.2f}")


# -- entry point --------------------------------------------------------------


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="ufl", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except (FloatingPointError, ad.DomainError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return 3
    except (FormatError, ad.ShapeError, ValueError, KeyError, OSError) as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
