"""Training loop, four-step inference, evaluation, checkpointing, and config."""

from __future__ import annotations

import io
import json
import math
import os
import random
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from . import attributes as attr
from .alignment import PairSets, build_pairs, deep_dice_loss, multiscale_sim_loss
from .attributes import (
    ASPECTS,
    AttributeSchema,
    EmbeddingBank,
    HashedSubwordProvider,
    KnowledgeTable,
    default_knowledge_table,
    default_schema,
    description_text,
    query_disease,
)
from .cmki import build_seg_targets, ensemble, predict_masks, seg_loss, total_loss
from .errors import (
    ConfigError,
    DivergenceError,
    FormatError,
    HashMismatchError,
    ShapeError,
)
from .maskdecoder import bipartite_match, upsample_logits
from .metrics import MetricReport, dsc, nsd, pair_lesions
from .model import MaleniaModel
from .phantom import Sample, SEEN_CLASSES, UNSEEN_CLASSES

_CKPT_MAGIC = b"MLNC"
_CKPT_VERSION = 1

DETERMINISTIC_ENV = "MALENIA_DETERMINISTIC"


@dataclass
class Config:
    """Hyperparameters and paths; defaults follow the reference settings."""

    shape: tuple[int, int, int] = (32, 32, 32)
    num_tokens: int = 16
    token_dim: int = 32
    provider_dim: int = 64
    provider_seed: int = 0
    widths: tuple[int, ...] = (8, 16, 32, 32, 32, 32)
    heads: int = 1
    masked_attention: bool = False
    normalize_tokens: bool = False
    tau_init: float = 0.07
    beta1: float = 0.5
    beta2: float = 0.5
    alpha1: float = 2.0
    alpha2: float = 2.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    w_dice: float = 1.0
    w_bce: float = 1.0
    lr: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 40
    warmup_epochs: int | None = None  # None: the 40/4000 reference ratio, >= 1
    batch_size: int = 2
    seed: int = 0
    precision: str = "float32"
    nsd_tolerance: float = 1.0
    seen_classes: tuple[str, ...] = SEEN_CLASSES
    unseen_classes: tuple[str, ...] = UNSEEN_CLASSES

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.widths = tuple(int(w) for w in self.widths)
        self.seen_classes = tuple(self.seen_classes)
        self.unseen_classes = tuple(self.unseen_classes)
        if any(s % 32 for s in self.shape):
            raise ConfigError(f"shape {self.shape} not divisible by 32")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if set(self.seen_classes) & set(self.unseen_classes):
            raise ConfigError("seen and unseen class sets overlap")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "float64" else torch.float32

    def resolved_warmup(self) -> int:
        if self.warmup_epochs is not None:
            return max(0, int(self.warmup_epochs))
        return max(1, round(self.epochs * 40 / 4000))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**known)

    @classmethod
    def from_file(cls, path) -> "Config":
        values = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, raw = (part.strip() for part in line.split("=", 1))
                try:
                    values[key] = json.loads(raw)
                except json.JSONDecodeError:
                    values[key] = raw
        return cls.from_dict(values)


def deterministic_mode() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "") == "1"


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic_mode():
        torch.use_deterministic_algorithms(True)


def make_model(config: Config, schema: AttributeSchema | None = None) -> MaleniaModel:
    schema = schema or default_schema()
    model = MaleniaModel(
        schema=schema,
        num_tokens=config.num_tokens,
        token_dim=config.token_dim,
        provider_dim=config.provider_dim,
        widths=config.widths,
        tau_init=config.tau_init,
        heads=config.heads,
        masked_attention=config.masked_attention,
        normalize_tokens=config.normalize_tokens,
    )
    return model.to(config.dtype)


def provider_matrix(schema: AttributeSchema, provider) -> np.ndarray:
    """(R, D) raw text embeddings in schema order."""
    rows = [
        provider.embed(description_text(aspect, value))
        for aspect, value in schema.pairs()
    ]
    return np.stack(rows)


def attach_provider(model: MaleniaModel, provider) -> None:
    model.set_provider_vectors(provider_matrix(model.schema, provider))


def sample_tensor(sample: Sample, dtype: torch.dtype) -> torch.Tensor:
    return torch.as_tensor(sample.volume.data, dtype=dtype)[None, None]


def _subset_pairs(pairs: PairSets, idx: list[int]) -> PairSets:
    return PairSets(
        positives=tuple(pairs.positives[j] for j in idx),
        negatives=tuple(pairs.negatives[j] for j in idx),
    )


def _balanced_sim_loss(block_tokens, bank, pairs, assignment, model):
    """Alignment loss with matched and background tokens weighted equally.

    A flat token average lets the many easy background-token terms drown out
    the few lesion tokens (one matched token contributes 1/N of the loss),
    which starves the mask-attribute alignment of gradient.
    """
    matched = sorted(assignment.matched_tokens)
    background = [j for j in range(model.num_tokens)
                  if j not in assignment.matched_tokens]
    if not matched or not background:
        return multiscale_sim_loss(block_tokens, bank, pairs, model.tau)
    matched_term = multiscale_sim_loss(
        [t[matched] for t in block_tokens], bank,
        _subset_pairs(pairs, matched), model.tau)
    background_term = multiscale_sim_loss(
        [t[background] for t in block_tokens], bank,
        _subset_pairs(pairs, background), model.tau)
    return 0.5 * (matched_term + background_term)


def compute_losses(model: MaleniaModel, batch: list[Sample], config: Config):
    """Forward a batch and return the three loss components (batch means)."""
    dtype = next(model.parameters()).dtype
    x = torch.cat([sample_tensor(s, dtype) for s in batch], dim=0)
    pyramid, tokens_per_block, logits_per_block = model(x)
    bank = model.bank_vectors()
    full = tuple(x.shape[2:])
    deep_terms, sim_terms, seg_terms = [], [], []
    for b, sample in enumerate(batch):
        masks = [m for _, m in sample.lesions]
        gt = (
            torch.as_tensor(np.stack(masks), dtype=dtype)
            if masks
            else torch.zeros((0, *full), dtype=dtype)
        )
        final_logits = logits_per_block[-1][b]
        with torch.no_grad():
            up = torch.sigmoid(upsample_logits(final_logits, full))
            assignment = bipartite_match(up, gt, config.w_dice, config.w_bce)
        pairs = build_pairs(
            assignment, sample.attribute_labels, model.bank_index, model.num_tokens
        )
        block_tokens = [tokens_per_block[i][b] for i in range(len(tokens_per_block))]
        sim_terms.append(
            _balanced_sim_loss(block_tokens, bank, pairs, assignment, model)
        )
        block_props = [
            torch.sigmoid(logits_per_block[i][b]) for i in range(len(logits_per_block))
        ]
        deep_terms.append(deep_dice_loss(block_props, assignment, gt))

        aggregated = model.aggregator(bank, pairs)
        fused = model.fusion(block_tokens[-1][None], aggregated[None])
        q_m, q_t, k = model.projections(
            fused.m_hat, fused.t_hat, pyramid.f4[b : b + 1]
        )
        mask_m, mask_t = predict_masks(q_m, q_t, k)
        bundle = ensemble(mask_m, mask_t, config.beta1, config.beta2,
                          model.ensemble_head)
        with torch.no_grad():
            t0_sim = block_tokens[-1] @ bank[0]
            unmatched = [
                j for j in range(model.num_tokens)
                if j not in assignment.matched_tokens
            ] or list(range(model.num_tokens))
            background = max(unmatched, key=lambda j: float(t0_sim[j]))
        targets = build_seg_targets(assignment, gt, background, full)
        active = sorted(assignment.matched_tokens | {background})
        seg_terms.append(
            seg_loss(bundle.mask[0], targets, config.alpha1, config.alpha2, active)
        )
    l_deep = torch.stack(deep_terms).mean()
    l_sim = torch.stack(sim_terms).mean()
    l_seg = torch.stack(seg_terms).mean()
    return l_deep, l_sim, l_seg


@dataclass
class TrainResult:
    model: MaleniaModel
    history: list[dict] = field(default_factory=list)
    config: Config = None

    def checkpoint_payload(self, optimizer=None, epoch: int | None = None) -> dict:
        return build_checkpoint(self.model, self.config, optimizer=optimizer,
                                epoch=epoch if epoch is not None
                                else len(self.history))


def _warmup_cosine(epoch: int, warmup: int, total: int) -> float:
    if warmup > 0 and epoch < warmup:
        return (epoch + 1) / warmup
    span = max(1, total - warmup)
    progress = min(1.0, (epoch - warmup) / span)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def train(config: Config, train_set: list[Sample],
          schema: AttributeSchema | None = None,
          provider=None, log=None) -> TrainResult:
    """Optimize the full objective over the training set."""
    if not train_set:
        raise ConfigError("training set is empty")
    seen = set(config.seen_classes)
    for sample in train_set:
        stray = sample.classes - seen
        if stray:
            raise ConfigError(
                f"training sample contains non-seen classes {sorted(stray)}"
            )
    seed_everything(config.seed)
    schema = schema or default_schema()
    provider = provider or HashedSubwordProvider(
        dim=config.provider_dim, seed=config.provider_seed
    )
    model = make_model(config, schema)
    attach_provider(model, provider)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.lr, betas=(0.9, 0.999),
        weight_decay=config.weight_decay,
    )
    warmup = config.resolved_warmup()
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda e: _warmup_cosine(e, warmup, config.epochs)
    )
    generator = torch.Generator().manual_seed(config.seed)
    result = TrainResult(model=model, config=config)
    last_good = None
    for epoch in range(config.epochs):
        order = torch.randperm(len(train_set), generator=generator).tolist()
        sums = {"deep": 0.0, "sim": 0.0, "seg": 0.0, "total": 0.0}
        batches = 0
        model.train()
        for start in range(0, len(order), config.batch_size):
            batch = [train_set[i] for i in order[start : start + config.batch_size]]
            l_deep, l_sim, l_seg = compute_losses(model, batch, config)
            loss = total_loss(l_deep, l_sim, l_seg,
                              config.lambda1, config.lambda2, config.lambda3)
            if not torch.isfinite(loss):
                err = DivergenceError(f"non-finite loss at epoch {epoch}")
                err.checkpoint = last_good
                raise err
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            model.clamp_temperature()
            sums["deep"] += float(l_deep.detach())
            sums["sim"] += float(l_sim.detach())
            sums["seg"] += float(l_seg.detach())
            sums["total"] += float(loss.detach())
            batches += 1
        record = {"epoch": epoch, "lr": scheduler.get_last_lr()[0]}
        scheduler.step()
        record.update({k: v / batches for k, v in sums.items()})
        result.history.append(record)
        if log:
            log(record)
        last_good = build_checkpoint(model, config, optimizer=optimizer, epoch=epoch)
    return result


# --- checkpointing -------------------------------------------------------------

def build_checkpoint(model: MaleniaModel, config: Config, optimizer=None,
                     epoch: int = 0) -> dict:
    bank = model.bank_vectors().detach().to(torch.float32).cpu().numpy()
    return {
        "config": config.to_dict(),
        "schema": {
            "aspects": list(model.schema.aspects),
            "vocab": {a: list(model.schema.vocab[a]) for a in model.schema.aspects},
        },
        "schema_hash": model.schema.hash(),
        "epoch": epoch,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "bank_vectors": bank,
        "tau": float(model.tau.detach()),
    }


def save_checkpoint(payload: dict, path) -> None:
    buf = io.BytesIO()
    torch.save(payload, buf)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(_CKPT_VERSION.to_bytes(4, "little"))
        fh.write(buf.getvalue())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if head[:4] != _CKPT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic {head[:4]!r}")
        version = int.from_bytes(head[4:8], "little")
        if version != _CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        blob = fh.read()
    try:
        return torch.load(io.BytesIO(blob), weights_only=False)
    except Exception as exc:
        raise FormatError(f"{path}: corrupt checkpoint payload") from exc


def model_from_checkpoint(payload: dict) -> tuple[MaleniaModel, Config]:
    config = Config.from_dict(payload["config"])
    schema = AttributeSchema(
        aspects=tuple(payload["schema"]["aspects"]),
        vocab={a: tuple(v) for a, v in payload["schema"]["vocab"].items()},
    )
    model = make_model(config, schema)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, config


def export_bank(payload: dict) -> EmbeddingBank:
    """Frozen embedding bank from a checkpoint; inference needs no provider."""
    schema = AttributeSchema(
        aspects=tuple(payload["schema"]["aspects"]),
        vocab={a: tuple(v) for a, v in payload["schema"]["vocab"].items()},
    )
    index = {pair: i + 1 for i, pair in enumerate(schema.pairs())}
    return EmbeddingBank(
        vectors=np.asarray(payload["bank_vectors"], dtype=np.float32),
        index=index,
        schema_hash=payload["schema_hash"],
    )


# --- inference -----------------------------------------------------------------

@dataclass
class InferenceResult:
    bundle_labels: np.ndarray  # (H, W, D) argmax token index
    mask_m: np.ndarray
    mask_t: np.ndarray
    mask: np.ndarray
    foreground_tokens: list[int]
    lesions: list[dict]  # token, mask, attributes, disease ranking
    segmentation: np.ndarray  # (H, W, D) bool union of foreground lesions


def infer(model: MaleniaModel, volume_data, bank: EmbeddingBank,
          table: KnowledgeTable | None = None,
          config: Config | None = None) -> InferenceResult:
    """Four-step inference using only the stored embedding bank.

    Step I: tokens partition the volume.  Step II: each token picks its
    best-matching value per aspect; a token is foreground when its best
    attribute similarity beats the background similarity.  Step III: fusion
    and ensembled mask prediction.  Step IV: knowledge-table query per
    foreground lesion.
    """
    config = config or Config()
    if bank.schema_hash != model.schema.hash():
        raise HashMismatchError(
            f"bank schema {bank.schema_hash[:12]}... does not match model "
            f"schema {model.schema.hash()[:12]}..."
        )
    table = table or default_knowledge_table(model.schema)
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(volume_data), dtype=dtype)
    if x.ndim == 3:
        x = x[None, None]
    model.eval()
    with torch.no_grad():
        pyramid, tokens_per_block, _ = model(x)
        final_tokens = tokens_per_block[-1][0]  # (N, C)
        bank_t = torch.as_tensor(bank.vectors, dtype=dtype)
        sims = final_tokens @ bank_t.T  # (N, R+1); temperature cannot move argmax
        aspect_ids = {a: model.bank_index.ids_for_aspect(a) for a in ASPECTS}
        positives, negatives, assignments = [], [], []
        all_ids = set(range(bank.num_descriptions + 1))
        foreground_tokens = []
        for j in range(model.num_tokens):
            best_attr = float(sims[j, 1:].max())
            chosen = {}
            pos = []
            for aspect in ASPECTS:
                ids = aspect_ids[aspect]
                best = max(ids, key=lambda i: float(sims[j, i]))
                chosen[aspect] = bank.value_of(best)[1]
                pos.append(best)
            if best_attr > float(sims[j, 0]):
                foreground_tokens.append(j)
                positives.append(tuple(pos))
            else:
                positives.append((0,))
            negatives.append(tuple(sorted(all_ids - set(positives[-1]))))
            assignments.append(chosen)
        pairs = PairSets(positives=tuple(positives), negatives=tuple(negatives))
        aggregated = model.aggregator(bank_t, pairs)
        fused = model.fusion(final_tokens[None], aggregated[None])
        q_m, q_t, k = model.projections(fused.m_hat, fused.t_hat, pyramid.f4)
        mask_m, mask_t = predict_masks(q_m, q_t, k)
        bundle = ensemble(mask_m, mask_t, config.beta1, config.beta2,
                          model.ensemble_head)
    labels = bundle.labels[0].cpu().numpy()
    lesions = []
    segmentation = np.zeros(labels.shape, dtype=bool)
    for j in foreground_tokens:
        mask = labels == j
        if not mask.any():
            continue
        segmentation |= mask
        ranking = query_disease(assignments[j], table)
        lesions.append(
            {
                "token": j,
                "mask": mask,
                "attributes": assignments[j],
                "disease": ranking,
            }
        )
    return InferenceResult(
        bundle_labels=labels,
        mask_m=bundle.mask_m[0].cpu().numpy(),
        mask_t=bundle.mask_t[0].cpu().numpy(),
        mask=bundle.mask[0].cpu().numpy(),
        foreground_tokens=foreground_tokens,
        lesions=lesions,
        segmentation=segmentation,
    )


# --- evaluation ----------------------------------------------------------------

def evaluate(model: MaleniaModel, test_set: list[Sample], bank: EmbeddingBank,
             table: KnowledgeTable | None = None,
             config: Config | None = None,
             zero_shot_classes=()) -> MetricReport:
    """Per-class overlap metrics plus per-aspect attribute matching."""
    if not test_set:
        raise ConfigError("evaluation set is empty")
    config = config or Config()
    zero_shot = set(zero_shot_classes)
    class_scores: dict[str, list[tuple[float, float]]] = {}
    aspect_counts = {a: {"correct": 0, "n_pred": 0, "n_gt": 0} for a in ASPECTS}
    for sample in test_set:
        result = infer(model, sample.volume.data, bank, table, config)
        pred_masks = [l["mask"] for l in result.lesions]
        gt_masks = [m.astype(bool) for _, m in sample.lesions]
        pairs = pair_lesions(pred_masks, gt_masks)
        pred_for_gt = {g: p for p, g, _ in pairs}
        paired_preds = {p for p, _, _ in pairs}
        # false positives (unpaired predictions) count against every lesion
        # in the scan; otherwise a model that marks everything foreground
        # would score perfectly on overlap
        false_positive = np.zeros(sample.volume.data.shape, dtype=bool)
        for p, mask in enumerate(pred_masks):
            if p not in paired_preds:
                false_positive |= mask
        spacing = sample.volume.spacing
        for g, ((spec, gt_mask), labels) in enumerate(
            zip(sample.lesions, sample.attribute_labels)
        ):
            if g in pred_for_gt:
                pm = pred_masks[pred_for_gt[g]] | false_positive
            else:
                pm = false_positive
            scores = (
                dsc(pm, gt_mask),
                nsd(pm, gt_mask, config.nsd_tolerance, spacing),
            )
            class_scores.setdefault(spec.class_name, []).append(scores)
        for aspect in ASPECTS:
            counts = aspect_counts[aspect]
            counts["n_pred"] += len(pred_masks)
            counts["n_gt"] += len(gt_masks)
            counts["correct"] += sum(
                1
                for p, g, _ in pairs
                if result.lesions[p]["attributes"][aspect]
                == sample.attribute_labels[g][aspect]
            )
    report = MetricReport()
    for name, scores in sorted(class_scores.items()):
        arr = np.asarray(scores)
        report.per_class[name] = {
            "dsc": float(arr[:, 0].mean()),
            "nsd": float(arr[:, 1].mean()),
            "support": len(scores),
            "zero_shot": name in zero_shot,
        }
    for aspect in ASPECTS:
        counts = aspect_counts[aspect]
        report.per_aspect[aspect] = {
            "precision": (counts["correct"] / counts["n_pred"]
                          if counts["n_pred"] else None),
            "recall": (counts["correct"] / counts["n_gt"]
                       if counts["n_gt"] else None),
            "n_pred": counts["n_pred"],
            "n_gt": counts["n_gt"],
        }
    return report
