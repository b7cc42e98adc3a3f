"""Metrics, heuristic baselines, and report generation (JSON, CSV, figures)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .config import config_fingerprint
from .cues import ConfigurationError, compute_cue_series, make_sentence_embedder, mean_cue_scores
from .data_model import Clip
from .inference import rank
from .scene_synth import OracleLabel

REPORT_SCHEMA_VERSION = 1

HEURISTIC_CUES = ("centrality", "area", "clarity")

#: Category subset treated as "indoor" in breakdowns; policy, editable.
INDOOR_CATEGORIES = ("Office", "Classroom", "Conference", "Restaurant",
                     "Home", "Courtroom", "Laboratory")


@dataclass
class EvalReport:
    rank1: float
    rank2: float
    rank3: float
    count: int
    per_category: dict[str, dict]
    description_mean: Optional[float] = None
    description_variance: Optional[float] = None
    description_count: int = 0
    baseline_table: dict[str, dict] = field(default_factory=dict)
    config_fingerprint: str = ""

    def to_json_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "rank1": self.rank1, "rank2": self.rank2, "rank3": self.rank3,
            "count": self.count,
            "per_category": {k: self.per_category[k] for k in sorted(self.per_category)},
            "description_mean": self.description_mean,
            "description_variance": self.description_variance,
            "description_count": self.description_count,
            "baseline_table": {k: self.baseline_table[k] for k in sorted(self.baseline_table)},
            "config_fingerprint": self.config_fingerprint,
        }


def rank_k_accuracy(ranked_lists: Sequence[Sequence[int]],
                    truths: Sequence[int], k: int) -> float:
    """Fraction of samples whose true VIP appears in the top-k predictions."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(ranked_lists) != len(truths):
        raise ValueError("predictions and truths differ in length")
    hits = sum(1 for ranked, truth in zip(ranked_lists, truths) if truth in list(ranked)[:k])
    return hits / max(len(truths), 1)


def heuristic_baseline(clip: Clip, cue: str) -> list[int]:
    """Rank persons by mean per-frame cue score over their valid frames."""
    if cue not in HEURISTIC_CUES:
        raise ValueError(f"heuristic cue must be one of {HEURISTIC_CUES}, got {cue!r}")
    if cue == "clarity" and "clarity" not in clip.cue_channels and clip.frames is None:
        raise ConfigurationError(
            f"clip {clip.clip_id}: clarity baseline needs pixels or a precomputed channel")
    series = compute_cue_series(clip)
    means = mean_cue_scores(series)[cue]
    means = np.where(series.mask.person_valid, means, -np.inf)
    ids = [t.person_id for t in clip.persons]
    return [pid for pid, _ in sorted(zip(ids, means), key=lambda kv: (-kv[1], kv[0]))]


def description_similarity(pred_texts: Sequence[str], truth_texts: Sequence[str],
                           embedder=None) -> tuple[float, float]:
    """Per-sample cosine similarity of embeddings; mean and population variance."""
    if len(pred_texts) != len(truth_texts):
        raise ValueError("prediction and truth lists differ in length")
    embedder = embedder or make_sentence_embedder()

    def cos(a, b):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        return float(np.dot(a, b) / (na * nb)) if na > 0 and nb > 0 else 0.0

    sims = [cos(embedder.embed(p), embedder.embed(t))
            for p, t in zip(pred_texts, truth_texts)]
    return float(np.mean(sims)), float(np.var(sims))


def evaluate(predict_fn: Callable[[Clip], Sequence[int]],
             corpus: Sequence[tuple[Clip, Optional[OracleLabel]]],
             split: Optional[str] = None,
             baselines: Sequence[str] = (),
             descriptions: Optional[dict[str, str]] = None,
             fingerprint: str = "") -> EvalReport:
    """Run a ranker over a corpus and assemble the report.

    ``predict_fn`` maps a clip to ranked person ids. ``descriptions``
    optionally maps clip_id to generated rationale text; description quality
    is scored on correctly predicted clips only.
    """
    selected = [(c, o) for c, o in corpus if split is None or c.split == split]
    if not selected:
        raise ValueError(f"no clips in split {split!r}")

    ranked_lists, truths, categories = [], [], []
    for clip, _ in selected:
        ranked_lists.append(list(predict_fn(clip)))
        truths.append(clip.vip_person_id)
        categories.append(clip.category)

    report = EvalReport(
        rank1=rank_k_accuracy(ranked_lists, truths, 1),
        rank2=rank_k_accuracy(ranked_lists, truths, 2),
        rank3=rank_k_accuracy(ranked_lists, truths, 3),
        count=len(selected),
        per_category={},
        config_fingerprint=fingerprint or config_fingerprint({"split": split}),
    )
    for cat in sorted(set(categories)):
        idx = [i for i, c in enumerate(categories) if c == cat]
        sub_ranked = [ranked_lists[i] for i in idx]
        sub_truth = [truths[i] for i in idx]
        report.per_category[cat] = {
            "count": len(idx),
            "rank1": rank_k_accuracy(sub_ranked, sub_truth, 1),
            "rank2": rank_k_accuracy(sub_ranked, sub_truth, 2),
            "rank3": rank_k_accuracy(sub_ranked, sub_truth, 3),
            "indoor": cat in INDOOR_CATEGORIES,
        }

    for cue in baselines:
        b_ranked = [heuristic_baseline(clip, cue) for clip, _ in selected]
        report.baseline_table[f"max_{cue}"] = {
            "rank1": rank_k_accuracy(b_ranked, truths, 1),
            "rank2": rank_k_accuracy(b_ranked, truths, 2),
            "rank3": rank_k_accuracy(b_ranked, truths, 3),
        }

    if descriptions is not None:
        preds, refs = [], []
        for (clip, _), ranked in zip(selected, ranked_lists):
            if ranked[0] == clip.vip_person_id and clip.clip_id in descriptions \
                    and clip.rationale_text.strip():
                preds.append(descriptions[clip.clip_id])
                refs.append(clip.rationale_text)
        if preds:
            mean, var = description_similarity(preds, refs)
            report.description_mean = mean
            report.description_variance = var
            report.description_count = len(preds)
    return report


# ---------------------------------------------------------------------------
# Report output: JSON + delimited table + figures
# ---------------------------------------------------------------------------

def write_report(report: EvalReport, outdir, figures: bool = True) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "report.json").write_text(
        json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")

    lines = ["metric,category,value"]
    for k in (1, 2, 3):
        lines.append(f"rank{k},overall,{getattr(report, f'rank{k}'):.6f}")
    for cat in sorted(report.per_category):
        for k in (1, 2, 3):
            lines.append(f"rank{k},{cat},{report.per_category[cat][f'rank{k}']:.6f}")
    for name in sorted(report.baseline_table):
        for k in (1, 2, 3):
            lines.append(f"rank{k},{name},{report.baseline_table[name][f'rank{k}']:.6f}")
    if report.description_mean is not None:
        lines.append(f"description_mean,overall,{report.description_mean:.6f}")
        lines.append(f"description_variance,overall,{report.description_variance:.6f}")
    (outdir / "report.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    if figures:
        render_report_figures(report, outdir)


def render_report_figures(report: EvalReport, outdir) -> list[Path]:
    """Bar charts for rank-k accuracy and the per-category breakdown."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    outdir = Path(outdir)
    written = []

    fig, ax = plt.subplots(figsize=(5, 3.2))
    labels = ["Rank-1", "Rank-2", "Rank-3"]
    values = [report.rank1, report.rank2, report.rank3]
    x = np.arange(3)
    width = 0.8 / (1 + len(report.baseline_table))
    ax.bar(x, values, width, label="model")
    for j, name in enumerate(sorted(report.baseline_table), start=1):
        row = report.baseline_table[name]
        ax.bar(x + j * width, [row["rank1"], row["rank2"], row["rank3"]], width, label=name)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(labels)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("accuracy")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = outdir / "rank_accuracy.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    if report.per_category:
        cats = sorted(report.per_category)
        fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(cats)), 3.2))
        ax.bar(range(len(cats)), [report.per_category[c]["rank1"] for c in cats])
        ax.set_xticks(range(len(cats)))
        ax.set_xticklabels(cats, rotation=45, ha="right", fontsize=7)
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("Rank-1")
        fig.tight_layout()
        path = outdir / "per_category_rank1.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def write_overlays(clip: Clip, predicted_id: int, outdir) -> list[Path]:
    """Annotated frames with the predicted person's box highlighted."""
    if clip.frames is None:
        return []
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Rectangle

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    for t in range(clip.num_frames):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.imshow(clip.frames[t])
        for track in clip.persons:
            if not track.present[t]:
                continue
            x1, y1, x2, y2 = track.boxes[t]
            color = "lime" if track.person_id == predicted_id else "red"
            ax.add_patch(Rectangle((x1, y1), x2 - x1, y2 - y1,
                                   fill=False, edgecolor=color, linewidth=2))
        ax.axis("off")
        path = outdir / f"{clip.clip_id}_{t}.png"
        fig.savefig(path, dpi=80, bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    return written
