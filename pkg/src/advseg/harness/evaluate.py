"""Clean evaluation, attack sweeps, and report/image output."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .. import data as D
from ..attack import AttackConfig, run_attack
from ..model import ModelConfig, ModelParams, check_compatible, forward_batch
from ..objective import LossWeights, binarize, dsc, iou, per_sample_loss
from ..tensor import Tensor, reduce

CSV_HEADER = ("dataset", "attack", "epsilon", "dsc_pct", "iou_pct", "n_samples", "seed")


@dataclass
class SampleRecord:
    id: str
    dsc: float
    iou: float
    loss_before: float
    loss_after: float
    linf: float


@dataclass
class ReportRow:
    dataset: str
    attack: str  # "none" for the clean row
    epsilon: float
    dsc_pct: float
    iou_pct: float
    n_samples: int
    seed: int
    records: list = field(default_factory=list)


@dataclass
class EvalReport:
    rows: list
    provenance: dict
    dumps: list = field(default_factory=list)

    def row(self, attack: str, epsilon: float = 0.0) -> ReportRow:
        for r in self.rows:
            if r.attack == attack and r.epsilon == epsilon:
                return r
        raise KeyError((attack, epsilon))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            eps = "0" if r.attack == "none" else format_epsilon(r.epsilon)
            w.writerow([r.dataset, r.attack, eps, f"{r.dsc_pct:.4f}", f"{r.iou_pct:.4f}", r.n_samples, r.seed])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "provenance": self.provenance,
            "rows": [asdict(r) for r in self.rows],
            "image_dumps": self.dumps,
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    def write(self, out_dir, stem: str = "report") -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.csv").write_text(self.to_csv(), encoding="utf-8")
        (out_dir / f"{stem}.json").write_text(self.to_json(), encoding="utf-8")


def read_report_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def format_epsilon(eps: float) -> str:
    return repr(float(eps))


def digest_bytes(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def _aggregate(records: Sequence[SampleRecord], dataset: str, attack: str, eps: float, seed: int) -> ReportRow:
    # records are in stable sample order; fsum keeps the mean order-independent
    n = len(records)
    mean_dsc = math.fsum(r.dsc for r in records) / n if n else 0.0
    mean_iou = math.fsum(r.iou for r in records) / n if n else 0.0
    return ReportRow(dataset, attack, float(eps), 100.0 * mean_dsc, 100.0 * mean_iou, n, seed, list(records))


class _Scorer:
    """Batched forward/loss helpers bound to one model and sample list."""

    def __init__(self, params: ModelParams, config: ModelConfig, samples, weights: LossWeights, batch_size: int):
        self.leaves = params.leaves()
        self.config = config
        self.samples = list(samples)
        self.weights = weights
        self.batch_size = batch_size
        self.chunks = [self.samples[i:i + batch_size] for i in range(0, len(self.samples), batch_size)]

    def batch(self, k: int):
        return D.stack(self.chunks[k], self.config.np_dtype)

    def loss_fn(self, toks, masks):
        def fn(x: Tensor) -> Tensor:
            logits = forward_batch(x, toks, self.leaves, self.config)
            return reduce("sum", per_sample_loss(logits, masks, self.weights))
        return fn

    def score(self, images, toks, masks):
        logits = forward_batch(images, toks, self.leaves, self.config)
        losses = per_sample_loss(logits, masks, self.weights).data
        preds = binarize(logits)[:, 0]
        return preds, losses


def evaluate(params: ModelParams, samples: Sequence[D.Sample], config: ModelConfig,
             weights: LossWeights = LossWeights(), dataset: str = "synthetic", seed: int = 0,
             batch_size: int = 25, provenance: Optional[dict] = None) -> EvalReport:
    """Clean-row report: mean per-sample DSC/IoU (as percentages)."""
    check_compatible(params, config)
    scorer = _Scorer(params, config, samples, weights, batch_size)
    records = []
    for k, chunk in enumerate(scorer.chunks):
        imgs, toks, masks = scorer.batch(k)
        preds, losses = scorer.score(imgs, toks, masks)
        for s, p, l in zip(chunk, preds, losses):
            records.append(SampleRecord(s.id, dsc(p, s.mask), iou(p, s.mask), float(l), float(l), 0.0))
    return EvalReport([_aggregate(records, dataset, "none", 0.0, seed)], dict(provenance or {}))


def _chunk_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def attack_sweep(params: ModelParams, samples: Sequence[D.Sample], config: ModelConfig, sweep,
                 weights: LossWeights = LossWeights(), dataset: str = "synthetic", seed: int = 0,
                 dump_dir=None, provenance: Optional[dict] = None) -> EvalReport:
    """Clean row plus one row per (attack, epsilon); optionally dumps images.

    ``sweep`` supplies ``attacks``, ``epsilons``, ``steps``, ``alpha``,
    ``random_start``, ``dump_images`` and ``batch_size``.
    """
    report = evaluate(params, samples, config, weights, dataset, seed, sweep.batch_size, provenance)
    scorer = _Scorer(params, config, samples, weights, sweep.batch_size)
    n_dump = min(sweep.dump_images, len(scorer.samples)) if dump_dir is not None else 0
    if n_dump:
        Path(dump_dir).mkdir(parents=True, exist_ok=True)
    for a_idx, kind in enumerate(sweep.attacks):
        for e_idx, eps in enumerate(sweep.epsilons):
            records = []
            for k, chunk in enumerate(scorer.chunks):
                imgs, toks, masks = scorer.batch(k)
                cfg = AttackConfig(kind=kind, epsilon=float(eps), alpha=sweep.alpha, steps=sweep.steps,
                                   random_start=sweep.random_start, seed=_chunk_seed(seed, a_idx, e_idx, k))
                result = run_attack(scorer.loss_fn(toks, masks), imgs, cfg)
                adv = result.adversarial_image
                _, before = scorer.score(imgs, toks, masks)
                preds, after = scorer.score(adv, toks, masks)
                linf = np.abs(adv - imgs).reshape(len(chunk), -1).max(axis=1)
                for j, s in enumerate(chunk):
                    records.append(SampleRecord(s.id, dsc(preds[j], s.mask), iou(preds[j], s.mask),
                                                float(before[j]), float(after[j]), float(linf[j])))
                    index = k * sweep.batch_size + j
                    if index < n_dump:
                        report.dumps.append(dump_images(dump_dir, s.id, kind, float(eps), imgs[j], adv[j]))
            report.rows.append(_aggregate(records, dataset, kind, eps, seed))
    return report


def dump_images(out_dir, sample_id: str, attack: str, eps: float, original: np.ndarray,
                adversarial: np.ndarray) -> dict:
    """Write orig/adv/diff PPMs; the difference is stretched to the full 8-bit range."""
    out_dir = Path(out_dir)
    stem = f"{sample_id}.{attack}.{format_epsilon(eps)}"
    diff = adversarial.astype(np.float64) - original.astype(np.float64)
    peak = float(np.abs(diff).max())
    scale = 127.5 / peak if peak > 0 else 0.0
    D.write_ppm(out_dir / f"{stem}.orig.ppm", original)
    D.write_ppm(out_dir / f"{stem}.adv.ppm", adversarial)
    D.write_ppm(out_dir / f"{stem}.diff.ppm", np.clip(np.rint(127.5 + scale * diff), 0, 255).astype(np.uint8))
    return {"id": sample_id, "attack": attack, "epsilon": float(eps), "stem": stem,
            "diff_scale": scale, "diff_peak": peak}
