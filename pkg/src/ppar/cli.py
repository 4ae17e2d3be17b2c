"""Command-line pipeline: scan-factors -> build-prototypes -> train -> eval -> report.

Exit codes: 0 ok, 2 data/config, 3 text provider, 4 non-finite loss, 5 artifact or hash mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, canonical_hash, toy_spec
from .datasets import generate_toy_domain, stack_dataset
from .errors import ArtifactError, HashMismatchError, NonFiniteLossError, ProviderError, ValidationError
from .evaluation import CrossDomainReport, DomainResult, cross_domain_eval, emit_figures
from .text_prototypes import (
    FACTOR_TEXTURE,
    build_otp,
    build_vtp,
    load_prototypes,
    make_provider,
    read_prototype_doc,
    save_prototypes,
)
from .training import ABLATION_ROWS, PrototypeBundle, baseline_config, fit, load_checkpoint, model_from_checkpoint
from .visual_factors import VisualFactorTable, scan_dataset_factors

log = logging.getLogger("ppar")

EXIT_OK, EXIT_DATA, EXIT_PROVIDER, EXIT_NUMERIC, EXIT_ARTIFACT = 0, 2, 3, 4, 5

SWEEPS = {
    "ablation": list(ABLATION_ROWS),
    "baselines": [f"{form}-{src}" for form in ("spa", "mpa") for src in ("np", "otp", "vtp")],
    "shallow-stages": ["S1", "S2", "S3", "S1+S2"],
}


# ---------------------------------------------------------------------------
# artifact paths and stamps


def factors_path(cfg: RunConfig) -> Path:
    return cfg.output_dir / "factors.json"


def prototype_paths(cfg: RunConfig) -> dict[str, Path]:
    d = cfg.output_dir / "prototypes"
    return {"otp": d / "otp.json", "vtp": d / "vtp.json", "vtp_texture": d / "vtp_texture.json"}


def _stamp(cfg: RunConfig, **section_hashes) -> dict:
    return {"config_hash": cfg.hash, "catalog_hash": cfg.catalog().digest(), **section_hashes}


def _require_hash(where, doc: dict, key: str, expected: str) -> None:
    got = doc.get(key)
    if got != expected:
        raise HashMismatchError(f"{where}: {key} {str(got)[:12]} does not match the active config ({expected[:12]}); rerun the producing step")


def load_factor_table(cfg: RunConfig) -> VisualFactorTable:
    path = factors_path(cfg)
    if not path.exists():
        raise ArtifactError(f"{path} not found; run scan-factors first")
    try:
        table = VisualFactorTable.load(path)
    except (ValueError, KeyError) as exc:
        raise ArtifactError(f"{path}: unreadable factor table ({exc})") from exc
    _require_hash(path, dict(table.extra), "factors_hash", cfg.factors_hash)
    return table


def load_bundle(cfg: RunConfig) -> PrototypeBundle:
    sets = {}
    for key, path in prototype_paths(cfg).items():
        if not path.exists():
            if key == "vtp_texture":
                continue
            raise ArtifactError(f"{path} not found; run build-prototypes first")
        _require_hash(path, read_prototype_doc(path), "prototypes_hash", cfg.prototypes_hash)
        sets[key] = load_prototypes(path)
    return PrototypeBundle(sets["otp"], sets["vtp"], sets.get("vtp_texture"))


# ---------------------------------------------------------------------------
# commands


def cmd_scan_factors(cfg: RunConfig) -> Path:
    catalog = cfg.catalog()
    dataset = cfg.source_samples()
    table = scan_dataset_factors(dataset, catalog, dataset_id=cfg.doc["dataset"]["id"])
    table = replace(table, extra=tuple(sorted(_stamp(cfg, factors_hash=cfg.factors_hash).items())))
    path = factors_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.save(path)
    print(f"{'id':>3}  {'class':<16} {'color':<8} {'texture':>7} {'color px':>9} {'tex px':>9}")
    for row in table.rows:
        print(
            f"{row.class_id:>3}  {catalog.name(row.class_id):<16} {row.color_hex or '-':<8} "
            f"{'-' if row.texture_code is None else row.texture_code:>7} {row.color_support:>9} {row.texture_support:>9}"
        )
    print(f"wrote {path}")
    return path


def cmd_build_prototypes(cfg: RunConfig, workers: int = 1) -> dict[str, Path]:
    catalog = cfg.catalog()
    provider = make_provider(cfg.doc["provider"])
    enabled = cfg.enabled_factors
    factors = load_factor_table(cfg) if enabled else None
    sets = {"otp": build_otp(catalog, provider, workers=workers), "vtp": build_vtp(catalog, factors, enabled, provider, workers)}
    if FACTOR_TEXTURE in enabled:
        sets["vtp_texture"] = build_vtp(catalog, factors, [FACTOR_TEXTURE], provider, workers)
    paths = prototype_paths(cfg)
    paths["otp"].parent.mkdir(parents=True, exist_ok=True)
    stale = paths["vtp_texture"]
    if "vtp_texture" not in sets and stale.exists():
        stale.unlink()
    stamp = _stamp(cfg, prototypes_hash=cfg.prototypes_hash)
    written = {}
    for key, pset in sets.items():
        save_prototypes(pset, paths[key], extra=stamp)
        written[key] = paths[key]
        for cid, text in zip(pset.class_ids, pset.texts):
            print(f"{key.upper():<12} {cid:>3}  {text}")
    for p in written.values():
        print(f"wrote {p}")
    return written


def _sweep_configs(cfg: RunConfig, sweep: str):
    """(row name, TrainConfig) for every row of a sweep."""
    base = cfg.train_config()
    out = []
    for name in SWEEPS[sweep]:
        if sweep == "ablation":
            tc = replace(base, baseline="none", **ABLATION_ROWS[name])
        elif sweep == "baselines":
            form, src = name.split("-")
            tc = baseline_config(base, form, src)
        else:
            tc = replace(base, shallow_stages=tuple(name.split("+")))
        out.append((name, tc))
    return out


def _bundle_for(cfg: RunConfig, tc, catalog, provider, factors) -> PrototypeBundle:
    otp = build_otp(catalog, provider)
    enabled = list(tc.enabled_factors) if tc.ppa else cfg.enabled_factors
    vtp = build_vtp(catalog, factors, enabled, provider)
    tex = build_vtp(catalog, factors, [FACTOR_TEXTURE], provider) if len(tc.shallow_stages) > 1 else None
    return PrototypeBundle(otp, vtp, tex)


def cmd_train(cfg: RunConfig, resume=None, sweep: str | None = None) -> list[Path]:
    catalog = cfg.catalog()
    images, masks, _ = stack_dataset(cfg.source_samples())
    outdir = cfg.output_dir / "train"
    if sweep is None:
        runs = [("", cfg.train_config(), load_bundle(cfg))]
    else:
        provider = make_provider(cfg.doc["provider"])
        factors = load_factor_table(cfg)
        runs = [(name, tc, _bundle_for(cfg, tc, catalog, provider, factors)) for name, tc in _sweep_configs(cfg, sweep)]
    finals = []
    for name, tc, bundle in runs:
        run_dir = outdir / name if name else outdir
        run_hash = cfg.hash if not name else _run_hash(cfg, tc)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "run_config.json").write_text(
            json.dumps({"config_hash": run_hash, "run_config": cfg.doc, "train_config": tc.to_dict()}, indent=2, sort_keys=True) + "\n"
        )
        log.info("training %s (%d iterations)", name or "run", tc.max_iters)
        result = fit(
            images, masks, bundle, tc, catalog.num_classes, catalog.ignore_index,
            outdir=run_dir, resume=resume, catalog_hash=catalog.digest(), config_hash=run_hash,
        )
        final = result.checkpoints[-1]
        print(f"{name + ': ' if name else ''}final checkpoint {final}")
        finals.append(final)
    return finals


def _run_hash(cfg: RunConfig, tc) -> str:
    return canonical_hash({"config_hash": cfg.hash, "train_config": tc.to_dict()})


def _target_arrays(cfg: RunConfig) -> dict:
    domains = {}
    for name, samples in cfg.target_samples().items():
        images, masks, _ = stack_dataset(samples)
        domains[name] = (images, masks)
    if not domains:
        raise ValidationError("evaluation.targets is empty")
    return domains


def cmd_eval(cfg: RunConfig, checkpoints: list | None = None) -> list[Path]:
    catalog = cfg.catalog()
    if not checkpoints:
        checkpoints = sorted((cfg.output_dir / "train").rglob("final.pt"))
        if not checkpoints:
            raise ArtifactError(f"no final.pt under {cfg.output_dir / 'train'}; pass --checkpoint")
    loaded = []
    for ckpt_path in checkpoints:
        ckpt = load_checkpoint(ckpt_path)
        _require_hash(ckpt_path, ckpt, "catalog_hash", catalog.digest())
        if ckpt["num_classes"] != catalog.num_classes:
            raise HashMismatchError(f"{ckpt_path}: {ckpt['num_classes']} classes, catalog has {catalog.num_classes}")
        loaded.append((Path(ckpt_path), ckpt))
    domains = _target_arrays(cfg)
    written = []
    for ckpt_path, ckpt in loaded:
        model = model_from_checkpoint(ckpt)
        report = cross_domain_eval(model, domains, catalog.num_classes, cfg.doc["dataset"]["id"], catalog.ignore_index, ckpt["config_hash"])
        run = ckpt_path.parent.name if ckpt_path.parent != cfg.output_dir / "train" else "run"
        report.extra = {"run": run, "checkpoint": _display_path(ckpt_path, cfg.output_dir), "iteration": int(ckpt["iteration"])}
        outdir = cfg.output_dir / "eval" / run
        paths = emit_figures(report, outdir, catalog.names)
        raw = outdir / f"confusions_{report.config_hash[:12]}.json"
        raw.write_text(json.dumps({t.domain: t.confusion.tolist() for t in report.targets}) + "\n")
        written.extend(paths + [raw])
        for t in report.targets:
            print(f"{run}: {report.train_domain} -> {t.domain}  mIoU {t.miou:.4f}")
        print(f"{run}: avg mIoU {report.avg_miou:.4f}  ({paths[-1]})")
    return written


def _display_path(path: Path, root: Path) -> str:
    try:
        return Path(path).resolve().relative_to(Path(root).resolve()).as_posix()
    except ValueError:
        return str(path)


def _load_report(path: Path) -> CrossDomainReport:
    doc = json.loads(path.read_text())
    cms_path = path.with_name(path.name.replace("report_", "confusions_"))
    cms = json.loads(cms_path.read_text()) if cms_path.exists() else {}
    targets = []
    for t in doc["targets"]:
        iou = np.array([np.nan if c["iou"] is None else c["iou"] for c in t["per_class"]])
        cm = np.array(cms.get(t["domain"], np.zeros((len(iou), len(iou)))), dtype=np.int64)
        targets.append(DomainResult(t["domain"], t["miou"] if t["miou"] is not None else np.nan, iou, cm))
    extra = {k: v for k, v in doc.items() if k not in ("train_domain", "targets", "avg_miou", "config_hash")}
    return CrossDomainReport(doc["train_domain"], targets, doc["config_hash"], extra)


def cmd_report(cfg: RunConfig) -> Path:
    reports = sorted((cfg.output_dir / "eval").rglob("report_*.json"))
    if not reports:
        raise ArtifactError(f"no evaluation reports under {cfg.output_dir / 'eval'}; run eval first")
    loaded = [_load_report(p) for p in reports]
    domains = sorted({t.domain for r in loaded for t in r.targets})
    header = ["run"] + domains + ["avg"]
    rows = []
    for r in loaded:
        by = {t.domain: t.miou for t in r.targets}
        rows.append([r.extra.get("run", "run")] + [f"{100 * by[d]:.1f}" if d in by else "-" for d in domains] + [f"{100 * r.avg_miou:.1f}"])
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(x).ljust(w) for x, w in zip(line, widths)) for line in [header] + rows]
    print("\n".join(lines))
    summary = {
        "config_hash": cfg.hash,
        "runs": [{"run": r.extra.get("run", "run"), "config_hash": r.config_hash, "avg_miou": r.avg_miou, "targets": {t.domain: t.miou for t in r.targets}} for r in loaded],
    }
    out = cfg.output_dir / f"summary_{cfg.hash[:12]}.json"
    out.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}")
    return out


def cmd_generate_toy(preset: str, out, count: int, size: int, seed: int | None) -> Path:
    toy = {"preset": preset}
    if seed is not None:
        toy["spec"] = {"seed": seed}
    root = generate_toy_domain(toy_spec(toy), count, size, out)
    print(f"wrote {count} {preset} scenes to {root}")
    return root


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppar", description="Prototype alignment and reweighting for generalizable segmentation")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="run configuration JSON")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        return p

    common(sub.add_parser("scan-factors", help="mine per-class color and LBP texture modes"))
    p = common(sub.add_parser("build-prototypes", help="embed OTP/VTP class texts"))
    p.add_argument("--workers", type=int, default=1)
    p = common(sub.add_parser("train", help="train one configuration or an ablation sweep"))
    p.add_argument("--checkpoint", default=None, help="resume from this checkpoint")
    p.add_argument("--sweep", choices=sorted(SWEEPS), default=None, help="run every row of a predefined sweep")
    p = common(sub.add_parser("eval", help="cross-domain evaluation with heatmaps"))
    p.add_argument("--checkpoint", action="append", default=None, help="checkpoint to evaluate (repeatable); default: every final.pt")
    common(sub.add_parser("report", help="summarize evaluation reports"))
    p = sub.add_parser("generate-toy", help="write a synthetic domain in folder layout")
    p.add_argument("--preset", choices=("source", "target"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=None)
    return parser


def run(args) -> int:
    if args.command == "generate-toy":
        cmd_generate_toy(args.preset, args.out, args.count, args.size, args.seed)
        return EXIT_OK
    cfg = RunConfig.load(args.config).with_overrides(seed=args.seed, output_dir=args.out)
    if args.command == "scan-factors":
        cmd_scan_factors(cfg)
    elif args.command == "build-prototypes":
        cmd_build_prototypes(cfg, args.workers)
    elif args.command == "train":
        cmd_train(cfg, args.checkpoint, args.sweep)
    elif args.command == "eval":
        cmd_eval(cfg, args.checkpoint)
    elif args.command == "report":
        cmd_report(cfg)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ProviderError as exc:
        where = f" (class {exc.class_id} {exc.class_name!r})" if exc.class_id is not None else ""
        print(f"error: text provider failed{where}: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except NonFiniteLossError as exc:
        print(f"error: {exc}; diagnostics: {exc.dump_path}", file=sys.stderr)
        return EXIT_NUMERIC
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
