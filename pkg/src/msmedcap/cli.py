"""Command-line entry point: ``msmedcap <command>``.

Every command reads one JSON config (``--config``; defaults fill the gaps),
applies ``--seed``/``--out``, writes a resolved-config snapshot next to its
artifacts and exits with 0 or the error class's code (config 2, data 3,
numeric 4, artifact 5).

Layout under the output root::

    data/            manifest.jsonl, general.jsonl, medical.jsonl, images/
    lm/              frozen toy LM checkpoint
    pretrain/        stage-1 checkpoint      finetune/  stage-2 checkpoint
    logs/            JSONL loss records
    predictions.jsonl, report.json, report.txt
    ablation/        report.json, report.txt, per-cell predictions
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import generate_synthetic_corpus
from .errors import ArtifactError, ConfigError, DataError, MSMedCapError
from .metrics import METRIC_COLUMNS, ScoreReport, format_table, load_predictions, pairs_from
from . import training as T

log = logging.getLogger("msmedcap")

ENV_OUT = "MSMEDCAP_OUT"


class Workspace:
    def __init__(self, cfg: RunConfig, root: Path):
        self.cfg = cfg
        self.root = root
        data = Path(cfg.data_dir)
        self.data = data if data.is_absolute() else root / data

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def snapshot(self, command: str) -> Path:
        p = self.path("config", f"{command}.json")
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(self.cfg.dumps())
        return p

    def require(self, path: Path, what: str) -> Path:
        if not path.exists():
            raise ArtifactError(f"missing {what}: {path} (run the earlier pipeline step first)")
        return path

    def corpus(self) -> T.CorpusData:
        self.require(self.data / "manifest.jsonl", "corpus manifest")
        return T.CorpusData.load(self.data, self.cfg)

    def lm(self, data: T.CorpusData):
        ckpt = load_checkpoint(self.require(self.path("lm"), "frozen LM checkpoint"))
        return T.lm_from_checkpoint(ckpt, self.cfg, data)


def _resolve(args) -> Workspace:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed).validate()
    root = args.out or os.environ.get(ENV_OUT) or cfg.out_dir
    cfg = cfg.replace(out_dir=str(root))
    return Workspace(cfg, Path(root))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(ws: Workspace, args) -> int:
    _, manifest = generate_synthetic_corpus(ws.cfg.corpus, ws.cfg.seed, ws.data)
    for domain in ("general", "medical"):
        manifest.filter(domain).save(ws.data / f"{domain}.jsonl")
    ws.snapshot("gen-data")
    for key, n in manifest.counts().items():
        print(f"{key}: {n}")
    print(f"wrote {len(manifest)} samples to {ws.data}")
    return 0


def cmd_pretrain(ws: Workspace, args) -> int:
    data = ws.corpus()
    if not (ws.path("lm") / "manifest.json").exists():
        log.info("fitting the toy language model on training captions")
        save_checkpoint(T.lm_checkpoint(T.train_lm(ws.cfg, data), ws.cfg, data), ws.path("lm"))
    logger = T.JsonlLog(ws.path("logs", "pretrain.jsonl"))
    ckpt = T.run_pretrain(ws.cfg.pretrain, ws.cfg, data, log_fn=logger)
    save_checkpoint(ckpt, ws.path("pretrain"))
    ws.snapshot("pretrain")
    for branch, losses in ckpt.meta["epoch_losses"].items():
        print(f"{branch}: epoch losses " + " ".join(f"{v:.4f}" for v in losses))
    return 0


def cmd_finetune(ws: Workspace, args) -> int:
    data = ws.corpus()
    fps = T.encoder_fingerprints(ws.cfg)
    pre = load_checkpoint(ws.require(ws.path("pretrain"), "pretrain checkpoint"), fps)
    lm = ws.lm(data)
    resume = None
    if args.resume:
        resume = load_checkpoint(ws.require(Path(args.resume), "resume checkpoint"), {**fps, "lm": lm.fingerprint()})
    logger = T.JsonlLog(ws.path("logs", "finetune.jsonl"))
    ckpt, _ = T.run_finetune(ws.cfg.finetune, pre, lm, ws.cfg, data, log_fn=logger, resume=resume, stop_after=args.stop_after)
    save_checkpoint(ckpt, ws.path("finetune"))
    ws.snapshot("finetune")
    print("epoch losses " + " ".join(f"{v:.4f}" for v in ckpt.meta["epoch_losses"]))
    print("trained groups: " + ", ".join(ckpt.meta["changed_groups"]))
    return 0


def cmd_generate(ws: Workspace, args) -> int:
    data = ws.corpus()
    lm = ws.lm(data)
    ckpt = load_checkpoint(
        ws.require(ws.path("finetune"), "finetune checkpoint"), {**T.encoder_fingerprints(ws.cfg), "lm": lm.fingerprint()}
    )
    model = T.model_from_checkpoint(ckpt, ws.cfg, data)
    manifest = data.by_name(args.split)
    records = T.caption_manifest(model, lm, ws.cfg, data, manifest)
    out = T.write_predictions(records, Path(args.predictions) if args.predictions else ws.path("predictions.jsonl"))
    ws.snapshot("generate")
    print(f"wrote {len(records)} captions to {out}")
    return 0


def cmd_evaluate(ws: Workspace, args) -> int:
    pred_path = Path(args.predictions) if args.predictions else ws.path("predictions.jsonl")
    predictions = load_predictions(ws.require(pred_path, "predictions"))
    if args.references:
        from .data import load_manifest

        refs_manifest = load_manifest(args.references, check_images=False).filter(split=args.split)
    else:
        refs_manifest = ws.corpus().test
    records = [{"image": k, "prediction": v} for k, v in predictions.items()]
    if not refs_manifest.samples:
        raise DataError("no reference captions to evaluate against")
    pairs_from(predictions, T.references_of(refs_manifest))  # fails early on missing images
    raw = T.score_predictions(records, refs_manifest)
    report = ScoreReport(raw)
    doc = {"rows": [{"name": args.name, **report.to_dict()}]}
    ws.path("report.json").parent.mkdir(parents=True, exist_ok=True)
    ws.path("report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    table = format_table([(args.name, report)])
    ws.path("report.txt").write_text(table)
    ws.snapshot("evaluate")
    print(table, end="")
    return 0


def _parse_seeds(text: str | None, default) -> list[int]:
    if not text:
        return list(default)
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, got {text!r}") from None


def ablation_report(rows: list[T.AblationRow]) -> tuple[dict, str]:
    doc = {"rows": [r.to_dict() for r in rows]}
    table = format_table([(r.cell.name, None if r.error else ScoreReport(r.median)) for r in rows])
    seeds = sorted({s for r in rows for s in r.per_seed})
    if seeds:
        lines = ["", "per-seed CIDEr (x10^3):"]
        for r in rows:
            vals = " ".join("failed" if r.error else f"{r.per_seed[s]['CIDEr'] * 1e3:.1f}" for s in seeds if r.error or s in r.per_seed)
            lines.append(f"  {r.cell.name}: {vals}")
        table += "\n".join(lines) + "\n"
    return doc, table


def cmd_ablate(ws: Workspace, args) -> int:
    cells = T.select_cells(args.grid)
    seeds = _parse_seeds(args.seeds, ws.cfg.ablation_seeds)
    data = ws.corpus()
    lm = ws.lm(data) if (ws.path("lm") / "manifest.json").exists() else None
    if lm is None:
        lm = T.train_lm(ws.cfg, data)
        save_checkpoint(T.lm_checkpoint(lm, ws.cfg, data), ws.path("lm"))
    out = ws.path("ablation")
    rows = T.run_ablation(cells, ws.cfg, data, lm, seeds, out_dir=out)
    doc, table = ablation_report(rows)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text(table)
    ws.snapshot("ablate")
    print(table, end="")
    return 0


def cmd_report(ws: Workspace, args) -> int:
    path = Path(args.input) if args.input else None
    if path is None:
        for candidate in (ws.path("ablation", "report.json"), ws.path("report.json")):
            if candidate.exists():
                path = candidate
                break
    if path is None or not path.exists():
        raise ArtifactError(f"missing report JSON under {ws.root} (run evaluate or ablate first)")
    try:
        doc = json.loads(path.read_text())
        rows = []
        for r in doc["rows"]:
            raw = r["median"] if "status" in r else r["raw"]
            rows.append((r["name"], None if raw is None else ScoreReport({k: raw.get(k) for k in METRIC_COLUMNS})))
    except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
        raise ArtifactError(f"{path}: not a report file ({exc})") from None
    print(format_table(rows), end="")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    def globals_(p, default):
        p.add_argument("--config", default=default, help="JSON run config (partial documents are merged over defaults)")
        p.add_argument("--seed", type=int, default=default, help="override the config seed")
        p.add_argument("--out", default=default, help=f"output root (default: ${ENV_OUT}, else the config's out_dir)")
        p.add_argument("-v", "--verbose", action="store_true", default=default or False)

    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    globals_(common, argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="msmedcap", description=__doc__.split("\n")[0])
    globals_(parser, None)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic corpus")
    sub.add_parser("pretrain", parents=[common], help="fit the toy LM if needed, then stage-1 Q-Former training")
    p = sub.add_parser("finetune", parents=[common], help="stage-2 training through the frozen LM")
    p.add_argument("--resume", help="finetune checkpoint directory to continue from")
    p.add_argument("--stop-after", type=int, help="stop after this many total steps")
    p = sub.add_parser("generate", parents=[common], help="caption a split with the finetuned model")
    p.add_argument("--split", default="test", choices=("test", "medical", "general"))
    p.add_argument("--predictions", help="output JSONL path")
    p = sub.add_parser("evaluate", parents=[common], help="score predictions against references")
    p.add_argument("--predictions", help="predictions JSONL (default: <out>/predictions.jsonl)")
    p.add_argument("--references", help="reference manifest (default: the corpus test split)")
    p.add_argument("--split", default="test", help="split of --references to use")
    p.add_argument("--name", default="MSMedCap", help="row label in the report")
    p = sub.add_parser("ablate", parents=[common], help="run the ablation grid")
    p.add_argument("--grid", action="append", help='cell name, e.g. "MSMedCap(G,G+M)"; repeatable (default: all rows)')
    p.add_argument("--seeds", help="comma-separated seeds (default: config ablation_seeds)")
    p = sub.add_parser("report", parents=[common], help="print a saved report as a table")
    p.add_argument("--input", help="report JSON (default: ablation report, else evaluation report)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    torch.set_num_threads(1)
    try:
        ws = _resolve(args)
        return COMMANDS[args.command](ws, args)
    except MSMedCapError as exc:
        print(f"msmedcap {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
