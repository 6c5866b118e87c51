"""Command-line surface. See FORMATS.md for the artifact formats.

Exit codes: 0 success, 2 config error, 3 training divergence, 4 gate failure.
"""

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import build_tokenizer
from .errors import ConfigError, DivergenceError
from .masking import analyze_pair
from .metrics import evaluate_checkpoint
from .pipeline import (ExperimentConfig, GateError, run_pipeline, run_sweep,
                       stage_corpus, stage_pretrain, stage_report,
                       stage_retrain, stage_unlearn)
from .quantizer import QuantSpec, quantize_model


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qforget",
                                description="unlearning vs. quantization lab")
    p.add_argument("--config", type=Path, required=True, help="experiment JSON")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--jobs", type=int, default=1, help="sweep worker processes")
    p.add_argument("command", choices=[
        "pretrain", "retrain", "unlearn", "quantize", "analyze", "eval",
        "report", "sweep", "run"])
    p.add_argument("args", nargs="*", help="command-specific arguments")
    return p


def _load_config(ns) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(ns.config)
    if ns.seed is not None:
        cfg.seed = ns.seed
    return cfg


def _dispatch(ns) -> None:
    cfg = _load_config(ns)
    out = Path(ns.out)
    if ns.command == "run":
        report = run_pipeline(cfg, out)
        print(f"report written: {out / 'report.csv'} "
              f"({len(report['rows'])} rows, {len(report['missing'])} missing)")
    elif ns.command == "pretrain":
        split = stage_corpus(cfg, out)
        ck = stage_pretrain(cfg, out, split)
        print(f"target saved: {out / 'target'} (provenance {ck.provenance!r})")
    elif ns.command == "retrain":
        split = stage_corpus(cfg, out)
        ck = stage_retrain(cfg, out, split)
        print(f"retrain baseline saved: {out / 'retrain'}")
    elif ns.command == "unlearn":
        if not ns.args:
            raise ConfigError("unlearn needs a method (and optional mode) argument")
        method, mode = ns.args[0], (ns.args[1] if len(ns.args) > 1 else "full_ft")
        matches = [r for r in cfg.runs
                   if r["method"] == method and r.get("mode", "full_ft") == mode]
        if not matches:
            raise ConfigError(f"no configured run for method={method} mode={mode}")
        split = stage_corpus(cfg, out)
        target = stage_pretrain(cfg, out, split)
        ck = stage_unlearn(cfg, out, split, target, matches[0])
        print(f"unlearned checkpoint saved (provenance {ck.provenance!r})")
    elif ns.command == "quantize":
        if len(ns.args) < 2:
            raise ConfigError("quantize needs a checkpoint stem and a bit width")
        stem, bits = ns.args[0], int(ns.args[1])
        group = int(ns.args[2]) if len(ns.args) > 2 else None
        ck = load_checkpoint(stem)
        if ck.provenance.startswith("unlearn") and ":lora" in ck.provenance \
                and ":merged" not in ck.provenance:
            raise ConfigError("refusing to quantize an unmerged adapter run; merge first")
        qck = quantize_model(ck, QuantSpec(bits, group))
        save_checkpoint(qck, f"{stem}_int{bits}")
        print(f"quantized checkpoint saved: {stem}_int{bits}")
    elif ns.command == "analyze":
        if len(ns.args) < 2:
            raise ConfigError("analyze needs two checkpoint stems")
        ck0 = load_checkpoint(ns.args[0])
        cku = load_checkpoint(ns.args[1])
        report = analyze_pair(ck0, cku, cfg.quant_specs())
        out.mkdir(parents=True, exist_ok=True)
        (out / "masking.csv").write_text(report.to_csv())
        (out / "masking.json").write_text(report.to_json())
        print(f"masking report written under {out}")
    elif ns.command == "eval":
        if not ns.args:
            raise ConfigError("eval needs a checkpoint stem")
        stem = ns.args[0]
        split = stage_corpus(cfg, out)
        tok = build_tokenizer(split)
        ck = load_checkpoint(stem)
        retrain = load_checkpoint(out / "retrain") \
            if (out / "retrain.json").exists() else None
        cell = evaluate_checkpoint(ck, split, tok, retrain, cfg.protocol())
        print(json.dumps(cell, indent=1, sort_keys=True))
    elif ns.command == "report":
        report = stage_report(cfg, out)
        print(f"report written: {out / 'report.csv'} "
              f"({len(report['rows'])} rows, {len(report['missing'])} missing)")
    elif ns.command == "sweep":
        summary = run_sweep(cfg, out, ns.jobs)
        print(f"sweep summary written: {out / 'sweep.json'} "
              f"({len(summary['cells'])} cells)")


def main(argv=None) -> int:
    ns = _parser().parse_args(argv)
    try:
        _dispatch(ns)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"training diverged at step {exc.step}: {exc} "
              f"(last losses {exc.last_losses})", file=sys.stderr)
        return 3
    except GateError as exc:
        print(f"gate failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
