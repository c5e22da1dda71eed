"""Command-line entry point: train, evaluate, attack, ablate, heatmap, synth."""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import attacks as A
from . import data as D
from . import trainer as T
from .config import OUTPUT_ROOT_ENV, RunConfig
from .errors import ConfigError, ETNDError
from .evaluation import RankingResult
from .model import ReIDModel

log = logging.getLogger("etndnet")

CONFIG_ECHO = "config.txt"
# (erase, transform, noise) defenses: baseline, singles, pairs, all three
ABLATION_FLAGS = sorted(itertools.product((False, True), repeat=3), key=lambda f: (sum(f), [not v for v in f]))


@contextmanager
def locked(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise ConfigError("output_dir", f"{out} is in use by another process") from None
    try:
        yield out
    finally:
        lock.release()


def write_echo(cfg: RunConfig, out: Path) -> None:
    (out / CONFIG_ECHO).write_text(cfg.to_text())


def write_json(path: Path, blob) -> None:
    path.write_text(json.dumps(blob, indent=2) + "\n")


def check_compatible(model, index: D.DatasetIndex) -> None:
    train = index.split("train")
    if train and index.num_train_ids != model.cfg.num_classes:
        raise ConfigError("checkpoint", f"model was trained on {model.cfg.num_classes} identities but the dataset's "
                                        f"training split has {index.num_train_ids}")
    if not index.split("query") or not index.split("gallery"):
        raise ConfigError("data_dir", "dataset needs query and gallery splits")


def plot_cmc(curves: dict, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for label, cmc in curves.items():
        ranks = np.arange(1, len(cmc) + 1)
        ax.plot(ranks, np.asarray(cmc) * 100, marker="o", markersize=3, label=label)
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate (%)")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def format_table(header: list[str], rows: list[list]) -> str:
    cells = [header] + [[f"{v:.4f}" if isinstance(v, float) else str(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------- commands

def train_run(cfg: RunConfig, index: D.DatasetIndex, out: Path, seed: int | None = None):
    tcfg = cfg.train_config(seed)
    model_cfg = cfg.model_config(index.num_train_ids)
    (out / "train_log.jsonl").unlink(missing_ok=True)
    state, _ = T.train(tcfg, index, model_cfg, out_dir=out, log_file=out / "train_log.jsonl")
    T.save_checkpoint(state, out / "checkpoint.pt", tcfg)
    return state


def cmd_train(cfg: RunConfig, args) -> dict:
    index = cfg.dataset()
    with locked(cfg.resolve_output("train")) as out:
        write_echo(cfg, out)
        index.save_id_map(out / "id_map.json")
        state = train_run(cfg, index, out)
    return {"checkpoint": str(out / "checkpoint.pt"), "iterations": state.iteration, "output_dir": str(out)}


def evaluate_model(cfg: RunConfig, model, index) -> RankingResult:
    return A.clean_eval(model, index, cfg.metric, cfg.cross_camera_filter, cfg.max_rank)


def cmd_evaluate(cfg: RunConfig, args) -> dict:
    model = T.load_model(args.checkpoint)
    index = cfg.dataset()
    check_compatible(model, index)
    with locked(cfg.resolve_output("evaluate")) as out:
        write_echo(cfg, out)
        result = evaluate_model(cfg, model, index)
        result.info["checkpoint"] = str(args.checkpoint)
        result.save(out / "result.json")
        plot_cmc({"clean": result.cmc}, out / "cmc.png")
    return {"rank1": result.rank1, "map": result.map, "output_dir": str(out)}


def attack_spec(cfg: RunConfig) -> A.AttackSpec:
    try:
        return A.AttackSpec(cfg.attack_kind, cfg.perturbation(), cfg.attack_seed, cfg.attack_apply_to)
    except ValueError as err:
        raise ConfigError("attack_kind" if "kind" in str(err) else "attack_apply_to", str(err)) from None


def cmd_attack(cfg: RunConfig, args) -> dict:
    spec = attack_spec(cfg)
    model = T.load_model(args.checkpoint)
    index = cfg.dataset()
    check_compatible(model, index)
    with locked(cfg.resolve_output("attack")) as out:
        write_echo(cfg, out)
        clean = evaluate_model(cfg, model, index)
        attacked = A.attack_eval(model, index, spec, cfg.metric, cfg.cross_camera_filter, cfg.max_rank)
        clean.save(out / "clean.json")
        attacked.save(out / "attacked.json")
        rows = [["clean", clean.rank1, clean.map],
                [spec.kind, attacked.rank1, attacked.map],
                ["change", attacked.rank1 - clean.rank1, attacked.map - clean.map]]
        (out / "summary.txt").write_text(format_table(["setting", "rank1", "mAP"], rows))
        plot_cmc({"clean": clean.cmc, spec.kind: attacked.cmc}, out / "cmc.png")
    return {"clean_map": clean.map, "attacked_map": attacked.map, "output_dir": str(out)}


def flag_name(ed: bool, td: bool, nd: bool) -> str:
    parts = [n for n, on in zip(("ED", "TD", "ND"), (ed, td, nd)) if on]
    return "B+" + "+".join(parts) if parts else "B"


def cmd_ablate(cfg: RunConfig, args) -> dict:
    index = cfg.dataset()
    base = cfg.loss_weights()
    rows = []
    with locked(cfg.resolve_output("ablate")) as out:
        write_echo(cfg, out)
        for seed in cfg.seeds():
            for flags in ABLATION_FLAGS:
                name = flag_name(*flags)
                w = T.with_weights(cfg.train_config(), *flags, base=base).loss_weights
                run_cfg = RunConfig(**{**vars(cfg), "lambda1": w.lambda1, "lambda2": w.lambda2,
                                       "lambda3": w.lambda3, "seed": seed})
                run_dir = out / f"seed{seed}" / name.replace("+", "_")
                run_dir.mkdir(parents=True, exist_ok=True)
                write_echo(run_cfg, run_dir)
                state = train_run(run_cfg, index, run_dir)
                result = evaluate_model(run_cfg, state.model, index)
                result.save(run_dir / "result.json")
                rows.append({"seed": seed, "combination": name, "rank1": result.rank1, "map": result.map,
                             "weights": list(w.as_tuple())})
                log.info("seed %d %s rank1 %.4f mAP %.4f", seed, name, result.rank1, result.map)
        means = []
        for flags in ABLATION_FLAGS:
            name = flag_name(*flags)
            sel = [r for r in rows if r["combination"] == name]
            means.append({"combination": name, "rank1": float(np.mean([r["rank1"] for r in sel])),
                          "map": float(np.mean([r["map"] for r in sel]))})
        write_json(out / "ablation.json", {"rows": rows, "means": means})
        table = [[r["seed"], r["combination"], r["rank1"], r["map"]] for r in rows]
        table += [["mean", m["combination"], m["rank1"], m["map"]] for m in means]
        (out / "ablation.txt").write_text(format_table(["seed", "combination", "rank1", "mAP"], table))
    return {"means": means, "output_dir": str(out)}


def cmd_heatmap(cfg: RunConfig, args) -> dict:
    if args.checkpoint:
        model = T.load_model(args.checkpoint)
    else:
        import torch

        torch.manual_seed(cfg.seed)
        model = ReIDModel(cfg.model_config(1))
    if args.images:
        from PIL import Image

        items = []
        for p in args.images:
            with Image.open(p) as im:
                items.append((Path(p).stem, np.asarray(im.convert("RGB"))))
    else:
        index = cfg.dataset()
        ids = index.split("query")[:cfg.heatmap_count] or index.split("train")[:cfg.heatmap_count]
        items = [(f"image{n:03d}", index.image(i)) for n, i in enumerate(ids)]
    written = []
    with locked(cfg.resolve_output("heatmap")) as out:
        write_echo(cfg, out)
        for name, img in items:
            path = out / f"heatmap_{name}.png"
            A.export_heatmap(model, img, path, cfg.heatmap_statistic, cfg.heatmap_alpha)
            written.append(str(path))
    return {"heatmaps": written, "output_dir": str(out)}


def cmd_synth(cfg: RunConfig, args) -> dict:
    index = D.synth_generate(cfg.synth_spec())
    with locked(cfg.resolve_output("synth")) as out:
        write_echo(cfg, out)
        D.write_directory(index, out)
        write_json(out / "synth_spec.json", {**cfg.synth_spec().to_dict(), "digest": D.dataset_digest(index)})
    return {"images": len(index.records), "output_dir": str(out)}


COMMANDS = {
    "train": (cmd_train, "train a model (checkpoint, JSON-lines log, config echo)"),
    "evaluate": (cmd_evaluate, "rank query against gallery (result JSON, CMC plot)"),
    "attack": (cmd_attack, "evaluate under a perturbation attack (clean vs attacked summary)"),
    "ablate": (cmd_ablate, "train and evaluate all eight defense combinations per seed"),
    "heatmap": (cmd_heatmap, "write feature-activation heatmaps over input images"),
    "synth": (cmd_synth, "render the synthetic occluded dataset to a directory"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="etndnet",
        description="Feature-perturbation adversarial training for occluded person re-identification.",
        epilog=f"Outputs go to output_dir, or ${OUTPUT_ROOT_ENV}/<command> (default root: ./runs). "
               "Run any command with --print-config to see every config key and its default.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("-c", "--config", help="key = value config file")
        p.add_argument("-s", "--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable; wins over the file)")
        p.add_argument("-o", "--output-dir", help="shortcut for --set output_dir=...")
        p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        if name in ("train", "ablate"):
            p.add_argument("--mode", choices=("etnd", "baseline"),
                           help="etnd: default defense weights; baseline: all defense weights zero")
        if name in ("evaluate", "attack"):
            p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
        if name == "attack":
            p.add_argument("--kind", help="shortcut for --set attack_kind=...")
            p.add_argument("--apply-to", help="shortcut for --set attack_apply_to=...")
        if name == "heatmap":
            p.add_argument("--checkpoint", help="checkpoint; an untrained model is used when omitted")
            p.add_argument("images", nargs="*", help="image files (default: query images of the dataset)")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.output_dir:
        overrides.append(f"output_dir={args.output_dir}")
    if getattr(args, "kind", None):
        overrides.append(f"attack_kind={args.kind}")
    if getattr(args, "apply_to", None):
        overrides.append(f"attack_apply_to={args.apply_to}")
    cfg = RunConfig.load(args.config, overrides)
    if getattr(args, "mode", None):
        cfg = cfg.with_mode(args.mode)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.print_config:
            sys.stdout.write(cfg.to_text())
            return 0
        summary = COMMANDS[args.command][0](cfg, args)
    except ConfigError as err:
        _report(err, field=err.field)
        return 2
    except (ETNDError, OSError, ValueError) as err:
        _report(err)
        return 1
    print(json.dumps(summary))
    return 0


def _report(err: Exception, field: str | None = None) -> None:
    blob = {"error": type(err).__name__, "message": str(err)}
    if field is not None:
        blob["field"] = field
    print(json.dumps(blob), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
