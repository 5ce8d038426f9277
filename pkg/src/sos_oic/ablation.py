"""Desk-scale ablation harness for the SOS x LT-loss and init x objective grids.

Stage I (generic pre-training on a large external corpus) is emulated by a
held-out synthetic distribution: the same generator with a shifted seed, so
its object templates differ from the target ones. Every row is fine-tuned
and scored on the target validation split.

Table "sos_lt" (class-balanced accuracy, overall and tail):
    A  Stage I SwAV init, plain CE      B  Stage I SwAV init, LT loss
    C  + on-domain SwAV-S, plain CE     D  + on-domain SwAV-S, LT loss

Table "components" (top-1 accuracy, overall and tail):
    A  supervised Stage I init          B  SwAV Stage I init
    C  B + on-domain SwAV               D  B + on-domain SwAV-S
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from .finetune import FinetuneConfig, finetune
from .fusion import ALL_SPACES, EvalReport, evaluate_dataset
from .pretrain.checkpoint import Checkpoint, save_checkpoint
from .pretrain.engine import PretrainConfig, train
from .synth import SynthSpec, generate

log = logging.getLogger(__name__)

SIGNIFICANCE = 0.005
FOOTNOTE = ("Differences below 0.5% are not deemed relevant; seed-to-seed variation "
            "at this scale is often larger.")

SOS_LT_ROWS = {
    "A": {"sos": False, "lt": False},
    "B": {"sos": False, "lt": True},
    "C": {"sos": True, "lt": False},
    "D": {"sos": True, "lt": True},
}
COMPONENT_ROWS = {
    "A": {"init": "supervised", "od": None},
    "B": {"init": "swav", "od": None},
    "C": {"init": "swav", "od": "swav"},
    "D": {"init": "swav", "od": "swav_s"},
}


@dataclass
class AblationResult:
    sos_lt: dict        # row -> {"overall": {space: acc}, "tail": {space: acc}}
    components: dict    # same layout, top-1 accuracies
    reports: dict       # "table/row" -> EvalReport dict

    def to_dict(self) -> dict:
        return {"sos_lt": self.sos_lt, "components": self.components, "reports": self.reports,
                "significance": SIGNIFICANCE, "footnote": FOOTNOTE}

    def table(self) -> str:
        return "\n\n".join([
            _format("SOS x LT loss (class-balanced accuracy)", self.sos_lt,
                    lambda r: f"SOS {'y' if SOS_LT_ROWS[r]['sos'] else 'n'}  LT {'y' if SOS_LT_ROWS[r]['lt'] else 'n'}"),
            _format("Components (top-1 accuracy of OIC alone)", self.components,
                    lambda r: f"{COMPONENT_ROWS[r]['init']:<10} OD {COMPONENT_ROWS[r]['od'] or '-':<6}"),
            "* " + FOOTNOTE,
        ])


def _format(title: str, rows: dict, describe) -> str:
    def fmt(x):
        return "  n/a" if x is None else f"{100 * x:5.1f}"

    cols = [f"{sub[:4]}-{s}" for sub in ("overall", "tail") for s in ALL_SPACES]
    head = f"{'row':<4}{'setting':<22}" + " ".join(f"{c:>12}" for c in cols)
    lines = [title, head, "-" * len(head)]
    for row in sorted(rows):
        vals = [rows[row][sub][s] for sub in ("overall", "tail") for s in ALL_SPACES]
        lines.append(f"{row:<4}{describe(row):<22}" + " ".join(f"{fmt(v):>12}" for v in vals))
    return "\n".join(lines)


def _cells(report: EvalReport, metric: str) -> dict:
    out = {}
    for sub in ("overall", "tail"):
        if metric == "top1":
            out[sub] = {s: (report.topk[sub][s] or {}).get("top1") for s in ALL_SPACES}
        else:
            out[sub] = {s: report.class_balanced[sub][s] for s in ALL_SPACES}
    return out


def run_ablation(spec: SynthSpec, pretrain: PretrainConfig, tune: FinetuneConfig, pretrain_epochs: int,
                 finetune_epochs: int, heldout_seed_offset: int = 1000, out_dir=None) -> AblationResult:
    out = Path(out_dir) if out_dir else None
    target = generate(spec).to_dataset()
    heldout_spec = replace(spec, seed=spec.seed + heldout_seed_offset)
    heldout = generate(heldout_spec).to_dataset()
    base_pre = replace(copy.deepcopy(pretrain), epochs=pretrain_epochs)
    base_pre.encoder.init = "random"
    base_tune = replace(copy.deepcopy(tune), epochs=finetune_epochs)

    def keep(name: str, ckpt: Checkpoint) -> Checkpoint:
        if out is not None:
            save_checkpoint(out / "checkpoints" / f"{name}.ckpt", ckpt)
        return ckpt

    # Stage I emulation on the held-out distribution
    log.info("stage I: supervised")
    stage1_sup = keep("stage1_supervised", finetune(heldout, None, replace(base_tune, pilot_fraction=0.0)).checkpoint)
    log.info("stage I: swav")
    stage1_ssl = keep("stage1_swav", train(heldout.region_sets, heldout.frames,
                                           replace(base_pre, objective="swav")).checkpoint)

    # Stage II: on-domain pre-training from the Stage I SwAV encoder, using every target video
    od = {}
    for objective in ("swav", "swav_s"):
        log.info("stage II: %s", objective)
        cfg = replace(copy.deepcopy(base_pre), objective=objective)
        od[objective] = keep(f"od_{objective}", train(target.region_sets, target.frames, cfg,
                                                      init_checkpoint=stage1_ssl).checkpoint)

    inits = {"supervised": stage1_sup, "swav": stage1_ssl}
    cache: dict = {}
    reports: dict = {}

    def score(init: Checkpoint, init_name: str, lt: bool) -> EvalReport:
        key = (init_name, lt)
        if key not in cache:
            log.info("fine-tune from %s, lt=%s", init_name, lt)
            result = finetune(target, init, replace(base_tune, lt_loss=lt))
            cache[key] = evaluate_dataset(result.records["val"], target.header, target.labels,
                                          model_tag=f"{init_name}/lt={lt}")
        return cache[key]

    components = {}
    for row, setting in COMPONENT_ROWS.items():
        name = setting["init"] if setting["od"] is None else f"od_{setting['od']}"
        init = inits[setting["init"]] if setting["od"] is None else od[setting["od"]]
        report = score(init, name, tune.lt_loss)
        components[row] = _cells(report, "top1")
        reports[f"components/{row}"] = report.to_dict()
    sos_lt = {}
    for row, setting in SOS_LT_ROWS.items():
        name, init = ("od_swav_s", od["swav_s"]) if setting["sos"] else ("swav", stage1_ssl)
        report = score(init, name, setting["lt"])
        sos_lt[row] = _cells(report, "class_balanced")
        reports[f"sos_lt/{row}"] = report.to_dict()

    result = AblationResult(sos_lt, components, reports)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
        (out / "ablation.txt").write_text(result.table() + "\n")
    return result
