"""Multi-term objective, optimizer schedule, checkpointing, and the
finite-difference gradient verifier."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .config import ModelConfig, TrainConfig, config_fingerprint
from .cues import make_sentence_embedder
from .data_model import Clip, read_array, write_array
from .model import ClipFeatures, ForwardResult, VIPNet, featurize
from .inference import per_cue_percentile_ranks, rank
from .rationale import make_rationale


class TrainingError(Exception):
    """Raised when the objective degenerates (e.g. NaN in a named term)."""


class DataError(Exception):
    """Ground-truth annotation inconsistent with the clip."""


@dataclass
class LossBreakdown:
    total: float
    cls: float
    text: float
    cont: float
    reg: float
    lambda_text: float
    lambda_cont: float
    lambda_reg: float


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------

def masked_log_prob(logits: torch.Tensor, person_valid: torch.Tensor,
                    target_index: int) -> torch.Tensor:
    """Log probability of the target under the mask-aware softmax."""
    if not bool(person_valid[target_index]):
        raise DataError(f"ground-truth person index {target_index} is masked out")
    idx = torch.nonzero(person_valid, as_tuple=False).squeeze(-1)
    sub = torch.log_softmax(logits[idx], dim=0)
    return sub[(idx == target_index).nonzero().item()]


def loss_cls(results: Sequence[ForwardResult], target_indices: Sequence[int]) -> torch.Tensor:
    """Batch-mean negative log probability of the true VIP."""
    terms = [
        -masked_log_prob(r.logits, r.person_valid, t)
        for r, t in zip(results, target_indices)
    ]
    return torch.stack(terms).mean()


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def loss_text(pred_text: str, truth_text: str, embedder) -> Optional[float]:
    """1 - cosine similarity of the sentence embeddings; None when the truth
    text is empty (term skipped with weight 0)."""
    if not truth_text.strip():
        return None
    return 1.0 - cosine_similarity(embedder.embed(pred_text), embedder.embed(truth_text))


def loss_cont(anchor: torch.Tensor, positive: torch.Tensor,
              negatives: torch.Tensor, tau: float) -> torch.Tensor:
    """InfoNCE over cosine similarities, positive included in the denominator.

    With no negatives the term is zero.
    """
    if negatives.numel() == 0:
        return torch.zeros((), dtype=anchor.dtype)
    a = torch.nn.functional.normalize(anchor, dim=0)
    p = torch.nn.functional.normalize(positive, dim=0)
    n = torch.nn.functional.normalize(negatives, dim=1)
    sims = torch.cat([(a * p).sum().unsqueeze(0), n @ a]) / tau
    return -torch.log_softmax(sims, dim=0)[0]


def loss_reg(model: VIPNet) -> torch.Tensor:
    return sum((p ** 2).sum() for p in model.parameters())


# ---------------------------------------------------------------------------
# Learning-rate schedule
# ---------------------------------------------------------------------------

def learning_rate(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup to base_lr, then cosine decay to zero at total_steps."""
    if total_steps <= 0:
        return base_lr
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(step - warmup_steps, span) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Batched objective
# ---------------------------------------------------------------------------

def _view_windows(rng: np.random.Generator, num_frames: int, fraction: float):
    """Two temporal-crop-jitter windows (boolean over T)."""
    width = max(2, int(round(fraction * num_frames)))
    width = min(width, num_frames)
    windows = []
    for _ in range(2):
        start = int(rng.integers(0, num_frames - width + 1))
        w = np.zeros(num_frames, dtype=bool)
        w[start:start + width] = True
        windows.append(w)
    return windows


def batch_losses(model: VIPNet, batch: Sequence[ClipFeatures], cfg: TrainConfig,
                 rng: Optional[np.random.Generator] = None,
                 embedder=None) -> tuple[torch.Tensor, LossBreakdown]:
    """Compute the full objective over a batch of clip features.

    Contrastive positives are the VIP embeddings of two jittered views of the
    same clip; negatives are all valid non-VIP persons in the batch. The text
    term compares the template rationale for the predicted VIP against the
    ground-truth rationale and is treated as a fixed (non-differentiated)
    signal.
    """
    rng = rng or np.random.default_rng(cfg.seed)
    use_cont = cfg.lambda_cont != 0.0
    results, alt_results, targets = [], [], []
    for feats in batch:
        if feats.vip_person_id not in feats.person_ids:
            raise DataError(f"{feats.clip_id}: vip {feats.vip_person_id} not in persons")
        target = feats.person_ids.index(feats.vip_person_id)
        if use_cont:
            w1, w2 = _view_windows(rng, feats.frame_valid.shape[1], cfg.view_fraction)
            results.append(model(feats, frame_window=w1))
            alt_results.append(model(feats, frame_window=w2))
        else:
            results.append(model(feats))
            alt_results.append(None)
        targets.append(target)

    cls = loss_cls(results, targets)

    cont = torch.zeros((), dtype=model.dtype)
    if use_cont:
        negatives = []
        for r, t in zip(results, targets):
            for i in range(r.embeddings.shape[0]):
                if i != t and bool(r.person_valid[i]):
                    negatives.append(r.embeddings[i])
        negatives = torch.stack(negatives) if negatives else torch.zeros((0, model.config.dim), dtype=model.dtype)
        terms = [
            loss_cont(r.embeddings[t], a.embeddings[t], negatives, cfg.tau_cont)
            for r, a, t in zip(results, alt_results, targets)
        ]
        cont = torch.stack(terms).mean()

    text_val = 0.0
    if cfg.lambda_text != 0.0:
        embedder = embedder or make_sentence_embedder()
        vals = []
        for feats, r in zip(batch, results):
            if not feats.rationale_text.strip():
                continue
            pred_idx = int(np.argmax(r.probabilities.detach().numpy()))
            ranks = _feature_ranks(feats, pred_idx)
            template = make_rationale(ranks).template_text
            vals.append(loss_text(template, feats.rationale_text, embedder))
        text_val = float(np.mean([v for v in vals if v is not None])) if vals else 0.0

    reg = loss_reg(model)
    total = cls + cfg.lambda_cont * cont + cfg.lambda_reg * reg + cfg.lambda_text * float(text_val)

    # decomposition recomposed in float64 so the identity holds exactly
    cls_f, cont_f, reg_f = float(cls.detach()), float(cont.detach()), float(reg.detach())
    total_f = cls_f + cfg.lambda_text * text_val + cfg.lambda_cont * cont_f + cfg.lambda_reg * reg_f
    breakdown = LossBreakdown(
        total=total_f, cls=cls_f, text=float(text_val), cont=cont_f, reg=reg_f,
        lambda_text=cfg.lambda_text, lambda_cont=cfg.lambda_cont, lambda_reg=cfg.lambda_reg)
    for name in ("cls", "text", "cont", "reg"):
        if not math.isfinite(getattr(breakdown, name)):
            raise TrainingError(f"loss term {name!r} is not finite: {getattr(breakdown, name)}")
    return total, breakdown


def _feature_ranks(feats: ClipFeatures, vip_index: int) -> dict[str, float]:
    """Percentile ranks straight from the stored raw series."""
    from .inference import percentile_rank
    fv = feats.frame_valid
    counts = np.maximum(fv.sum(axis=1), 1)
    valid = fv.any(axis=1)
    return {
        cue: percentile_rank((arr * fv).sum(axis=1) / counts, vip_index, valid)
        for cue, arr in feats.series.items()
    }


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def rank1_accuracy(model: VIPNet, featset: Sequence[ClipFeatures]) -> float:
    correct = 0
    with torch.no_grad():
        for feats in featset:
            r = model(feats)
            ranked = rank(r.probabilities.numpy(), feats.person_ids)
            correct += ranked[0] == feats.vip_person_id
    return correct / max(len(featset), 1)


def train(corpus: Sequence[Clip], cfg: TrainConfig,
          model: Optional[VIPNet] = None,
          model_config: Optional[ModelConfig] = None,
          val_corpus: Sequence[Clip] = (),
          log_path=None) -> tuple[VIPNet, list[dict]]:
    """Train on a clip corpus; deterministic per seed.

    Returns the trained model and the per-epoch metric log.
    """
    if not corpus:
        raise DataError("training corpus is empty")
    torch.manual_seed(cfg.seed)
    if model is None:
        mc = model_config or ModelConfig(seed=cfg.seed)
        model = VIPNet(mc)
    features = [featurize(c) for c in corpus]
    val_features = [featurize(c) for c in val_corpus]
    embedder = make_sentence_embedder()

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.base_lr,
                                 weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(features) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch

    rng = np.random.default_rng(cfg.seed)
    metrics: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(features))
        epoch_losses: list[LossBreakdown] = []
        for b in range(steps_per_epoch):
            batch = [features[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            lr = learning_rate(step, total_steps, warmup_steps, cfg.base_lr)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad()
            total, breakdown = batch_losses(model, batch, cfg, rng, embedder)
            if not math.isfinite(float(total.detach())):
                raise TrainingError(f"total loss is not finite at epoch {epoch}")
            total.backward()
            optimizer.step()
            step += 1
            epoch_losses.append(breakdown)

        entry = {
            "epoch": epoch,
            "lr": learning_rate(step - 1, total_steps, warmup_steps, cfg.base_lr),
            "loss": {k: float(np.mean([getattr(bd, k) for bd in epoch_losses]))
                     for k in ("total", "cls", "text", "cont", "reg")},
        }
        if val_features:
            entry["val_rank1"] = rank1_accuracy(model, val_features)
        metrics.append(entry)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return model, metrics


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: VIPNet, cfg: TrainConfig, path) -> None:
    """Parameter arrays in the raw binary format plus a config manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = []
    for name, param in model.state_dict().items():
        fname = name.replace(".", "__")
        write_array(path / f"{fname}.bin", param.detach().cpu().numpy())
        names.append(name)
    manifest = {
        "model_config": asdict(model.config),
        "train_config": asdict(cfg),
        "parameters": names,
        "fingerprint": config_fingerprint(model.config, cfg),
    }
    (path / "checkpoint.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")


def load_checkpoint(path) -> tuple[VIPNet, TrainConfig]:
    path = Path(path)
    manifest = json.loads((path / "checkpoint.json").read_text(encoding="utf-8"))
    model = VIPNet(ModelConfig(**manifest["model_config"]))
    state = {}
    for name in manifest["parameters"]:
        arr = read_array(path / (name.replace(".", "__") + ".bin"))
        state[name] = torch.from_numpy(np.ascontiguousarray(arr))
    model.load_state_dict(state)
    return model, TrainConfig(**manifest["train_config"])


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def grad_check(model: VIPNet, batch: Sequence[ClipFeatures], cfg: TrainConfig,
               step: float = 1e-4, samples_per_param: int = 12,
               seed: int = 0) -> dict[str, float]:
    """Central finite differences vs autograd for the full objective.

    The model must be in 64-bit mode. A seeded subset of elements is probed
    in every parameter tensor; the per-group maximum relative error is
    returned (groups are top-level submodule names).
    """
    if model.dtype != torch.float64:
        raise TrainingError("grad_check requires a model in 64-bit mode (.double())")
    rng = np.random.default_rng(seed)

    # frozen view rng per evaluation: the objective is a deterministic
    # function of the parameters alone
    def objective():
        return batch_losses(model, batch, cfg, np.random.default_rng(seed + 1))[0]

    loss = objective()
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)

    errors: dict[str, float] = {}
    for (name, param), grad in zip(params, grads):
        group = name.split(".")[0]
        numel = param.numel()
        k = min(samples_per_param, numel)
        idx = rng.choice(numel, size=k, replace=False)
        flat = param.data.view(-1)
        for i in idx:
            i = int(i)
            orig = flat[i].item()
            flat[i] = orig + step
            hi = float(objective().detach())
            flat[i] = orig - step
            lo = float(objective().detach())
            flat[i] = orig
            fd = (hi - lo) / (2 * step)
            an = 0.0 if grad is None else float(grad.view(-1)[i])
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-3)
            errors[group] = max(errors.get(group, 0.0), rel)
    return errors
