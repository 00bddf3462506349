"""Joint training loop, evaluation, model selection and the ablation harness."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from cgn import attention_feedback as af
from cgn import losses
from cgn import metrics
from cgn.model_zoo import (
    CGN,
    FusionClassifier,
    Generator,
    ModelConfig,
    build_backbone,
    build_discriminator,
    generator_input,
    to_input,
)
from cgn.synth_data import load_split, read_manifest

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VariantSpec:
    """Wiring of one ablation variant.

    fusion: classifier inputs (``residual``, ``bilateral`` or ``single``).
    gen_mode: generator input (``adain``, ``target``, ``bilateral``) or None.
    adversarial: ``none``, ``full`` or ``masked`` (Ω-masked inputs to D).
    feedback: ``none``, ``triplet`` or ``fc`` (plain lesion-free distance).
    omega_source: ``cam`` (live classifier feedback) or ``distance``.
    drc_reference: map compared to H_C in the chamfer term (``reference`` or ``target``).
    """

    fusion: str
    gen_mode: str | None = None
    adversarial: str = "none"
    ne: bool = False
    feedback: str = "none"
    cls: bool = True
    omega_source: str = "cam"
    drc_reference: str = "reference"


VARIANTS = {
    "vanilla": VariantSpec("single"),
    "sbf": VariantSpec("bilateral"),
    "tf_gan": VariantSpec("residual", "target", "full"),
    "bf_gan": VariantSpec("residual", "bilateral", "full"),
    "adain_gan": VariantSpec("residual", "adain", "full"),
    "no_ft": VariantSpec("residual", "adain", "full", ne=True),
    "no_ne": VariantSpec("residual", "adain", "full", feedback="triplet"),
    "non_feedback": VariantSpec("residual", "adain", "full", ne=True, feedback="triplet", omega_source="distance"),
    "no_bilateral": VariantSpec("residual", "target", "none", ne=True, feedback="triplet", drc_reference="target"),
    "full": VariantSpec("residual", "adain", "full", ne=True, feedback="triplet"),
    "variant1": VariantSpec("residual", "adain", "masked", ne=True),
    "variant2": VariantSpec("residual", "adain", "full", ne=True, feedback="fc"),
}

TERMS = ("l_cls", "l_ad_g", "l_ne", "l_ft", "d_tc", "d_rc", "total_g", "l_ad_d")

# how often each optional component ran, for wiring checks
CALLS = Counter()


class TrainConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, epoch, step, term):
        super().__init__(f"non-finite loss term {term!r} at epoch {epoch}, step {step}")
        self.epoch, self.step, self.term = epoch, step, term


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-5
    epochs: int = 50
    batch_size: int = 16
    alpha: float = 0.5
    beta: float = 1.0
    seed: int = 0
    variant: str = "full"
    omega_variant: str = "minmax"
    d_steps_per_g: int = 1
    weight_decay: float = 0.0
    grad_clip: float | None = 5.0
    d_lr: float | None = None
    frozen_omega: bool = False
    distance_denominator: str = "hw-1"
    backbone: str = "small-conv"
    feature_channels: int = 16
    generator_blocks: int = 9
    discriminator_depth: int = 2
    fusion_channels: int = 32
    backbone_width: int = 16
    snapshot_every: int = 10
    snapshot_samples: int = 16

    def __post_init__(self):
        if not self.lr > 0:
            raise TrainConfigError("lr must be > 0")
        if self.epochs < 1 or self.batch_size < 1 or self.d_steps_per_g < 0:
            raise TrainConfigError("epochs and batch_size must be >= 1, d_steps_per_g >= 0")
        if self.variant not in VARIANTS:
            raise TrainConfigError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if self.omega_variant not in af.OMEGA_VARIANTS:
            raise TrainConfigError(f"unknown omega_variant {self.omega_variant!r}")
        if self.snapshot_every < 1:
            raise TrainConfigError("snapshot_every must be >= 1")
        self.model_config()

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            backbone=self.backbone,
            feature_channels=self.feature_channels,
            generator_blocks=self.generator_blocks,
            alpha=self.alpha,
            discriminator_depth=self.discriminator_depth,
            fusion_channels=self.fusion_channels,
            backbone_width=self.backbone_width,
        )

    def replace(self, **kw):
        d = asdict(self)
        d.update(kw)
        return TrainConfig(**d)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise TrainConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise TrainConfigError(f"{path}: not valid JSON ({exc})") from exc


@dataclass
class RunRecord:
    config: TrainConfig
    epoch_losses: list = field(default_factory=list)
    val_auc: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_auc: float = float("nan")
    checkpoint_path: str | None = None
    test_metrics: dict = field(default_factory=dict)
    seconds: float = 0.0


# -- data --------------------------------------------------------------------------


@dataclass
class SplitTensors:
    """A split held as pooled network inputs plus what evaluation needs."""

    ids: list
    pooled_t: torch.Tensor
    pooled_r: torch.Tensor
    labels: torch.Tensor
    bboxes: np.ndarray
    masks: np.ndarray
    x_t: np.ndarray
    x_r: np.ndarray

    def __len__(self):
        return len(self.ids)


def _pool_images(images, pool):
    out = []
    for k in range(0, len(images), 256):
        out.append(pool(to_input(images[k:k + 256])))
    return torch.cat(out)


def prepare_split(loaded, pool) -> SplitTensors:
    """Mirror the reference into target orientation and cache the pooled inputs."""
    x_r = np.ascontiguousarray(loaded.x_r[:, :, ::-1])
    return SplitTensors(
        ids=list(loaded.ids),
        pooled_t=_pool_images(loaded.x_t, pool),
        pooled_r=_pool_images(x_r, pool),
        labels=torch.as_tensor(loaded.labels, dtype=torch.long),
        bboxes=np.asarray(loaded.bboxes),
        masks=np.asarray(loaded.masks),
        x_t=loaded.x_t,
        x_r=x_r,
    )


def load_splits(data_dir, pool, names=("train", "val", "test")):
    return {s: prepare_split(load_split(data_dir, s), pool) for s in names}


# -- model construction ------------------------------------------------------------------


def build_models(config: TrainConfig):
    """Model and discriminator with per-component seeds, so shared parts start equal across variants."""
    spec = VARIANTS[config.variant]
    mc = config.model_config()
    torch.manual_seed(config.seed)
    model = CGN(mc, spec.fusion)
    # rebuild each part under its own seed so that e.g. the extractor init does not
    # depend on which other parts a variant has
    torch.manual_seed(config.seed * 1009 + 1)
    model.extractor = build_backbone(mc)
    if model.generator is not None:
        torch.manual_seed(config.seed * 1009 + 2)
        model.generator = Generator(mc.feature_channels, mc.generator_blocks, mc.zero_init_residual)
    torch.manual_seed(config.seed * 1009 + 3)
    model.classifier = FusionClassifier(model.classifier.fusion.in_channels, mc.fusion_channels)
    disc = None
    if spec.adversarial != "none":
        torch.manual_seed(config.seed * 1009 + 4)
        disc = build_discriminator(mc)
    return model, disc


# -- forward pass -------------------------------------------------------------------------


@dataclass
class ForwardOut:
    logits: torch.Tensor
    fused: torch.Tensor
    h_t: torch.Tensor
    h_r: torch.Tensor
    h_c: torch.Tensor | None
    omega: torch.Tensor | None


def forward(model, spec: VariantSpec, config: TrainConfig, pt, pr, frozen_omega=None):
    if spec.fusion == "single":
        h_t = model.features(pt)
        with torch.no_grad():
            h_r = model.features(pr)
    else:
        # one extractor call for both sides (shared weights)
        h_t, h_r = model.features(torch.cat([pt, pr])).split(pt.shape[0])
    if spec.fusion != "residual":
        logits, fused = model.classify_from(h_t, h_r=h_r)
        return ForwardOut(logits, fused, h_t, h_r, None, None)
    CALLS["generator"] += 1
    h_c = model.generator(generator_input(h_t, h_r, config.alpha, spec.gen_mode))
    logits, fused = model.classify_from(h_t, h_c)
    if frozen_omega is not None:
        omega = frozen_omega
    elif spec.omega_source == "distance":
        omega = af.nonfeedback_omega(h_t.detach(), h_c.detach())
    else:
        cam = model.classifier.class_cams(fused.detach())[:, 1]
        omega = af.omega_from_cam(cam, config.omega_variant)
    return ForwardOut(logits, fused, h_t, h_r, h_c, omega.detach())


def _ne_logits(model, h_c):
    """Classifier on ``(zero residual, H_C)``."""
    logits, _ = model.classifier(torch.zeros_like(h_c), h_c)
    return logits


def generator_terms(model, disc, spec, config, out: ForwardOut, labels):
    """Per-sample G-side terms as a dict of (N,) tensors."""
    n = labels.shape[0]
    zero = out.h_t.new_zeros(n)
    terms = {k: zero for k in ("l_cls", "l_ad_g", "l_ne", "l_ft", "d_tc", "d_rc")}
    if spec.cls:
        terms["l_cls"] = losses.cls_loss_from_logits(out.logits, labels)
    if out.h_c is None:
        return terms
    h_t, h_c, h_r = out.h_t.detach(), out.h_c, out.h_r.detach()
    if spec.adversarial != "none":
        CALLS["discriminator"] += 1
        if spec.adversarial == "masked":
            terms["l_ad_g"], _ = losses.variant1_region_losses_from_logits(h_c, h_r, out.omega, disc)
        else:
            terms["l_ad_g"] = F.softplus(-disc.logits(h_c))
    if spec.ne:
        CALLS["negative_embedding"] += 1
        terms["l_ne"] = losses.negative_embedding_from_logits(_ne_logits(model, h_c))
    if spec.feedback != "none":
        u_t, u_c = losses.unit_normalize(h_t), losses.unit_normalize(h_c)
        terms["d_tc"] = losses.d_tc(u_t, u_c, out.omega, config.distance_denominator)
        if spec.feedback == "triplet":
            CALLS["triplet"] += 1
            ref = h_r if spec.drc_reference == "reference" else h_t
            terms["d_rc"] = losses.d_rc(losses.unit_normalize(ref), u_c, method="matmul")
            terms["l_ft"] = losses.feedback_triplet(terms["d_tc"], terms["d_rc"], config.beta)
        else:
            CALLS["fc"] += 1
            terms["l_ft"] = terms["d_tc"]
    return terms


def discriminator_loss(disc, spec, out: ForwardOut):
    h_r, h_c = out.h_r.detach(), out.h_c.detach()
    if spec.adversarial == "masked":
        _, l_d = losses.variant1_region_losses_from_logits(h_c, h_r, out.omega, disc)
    else:
        l_d, _ = losses.adversarial_losses_from_logits(disc.logits(h_r), disc.logits(h_c))
    return l_d


def backward_generator(model, means):
    """Accumulate gradients of the G-side objective.

    The auxiliary terms (adversarial, negative embedding, feedback) stop at the
    generator and classifier; the extractor learns from classification only,
    which also reaches it through H_C.
    """
    aux = means["l_ad_g"] + means["l_ne"] + means["l_ft"]
    if model.generator is not None and aux.requires_grad:
        params = list(model.generator.parameters()) + list(model.classifier.parameters())
        aux.backward(inputs=params, retain_graph=True)
    means["l_cls"].backward()


def _check_finite(values: dict, epoch, step):
    for k, v in values.items():
        if not math.isfinite(v):
            raise TrainingAborted(epoch, step, k)


# -- evaluation ------------------------------------------------------------------------------


@torch.no_grad()
def predict(model, config: TrainConfig, split: SplitTensors, batch_size=256):
    """Eval-mode outputs for a split as numpy arrays."""
    spec = VARIANTS[config.variant]
    was = model.training
    model.eval()
    parts = {k: [] for k in ("p", "h_t", "h_r", "h_c", "cam_mal", "cam_ben", "omega")}
    for k in range(0, len(split), batch_size):
        out = forward(model, spec, config, split.pooled_t[k:k + batch_size], split.pooled_r[k:k + batch_size])
        cams = model.classifier.class_cams(out.fused)
        parts["p"].append(torch.softmax(out.logits, 1)[:, 1])
        parts["h_t"].append(out.h_t)
        parts["h_r"].append(out.h_r)
        parts["h_c"].append(out.h_c if out.h_c is not None else out.h_t)
        parts["cam_mal"].append(cams[:, 1])
        parts["cam_ben"].append(cams[:, 0])
        parts["omega"].append(out.omega if out.omega is not None else af.omega_from_cam(cams[:, 1], config.omega_variant))
    model.train(was)
    res = {k: torch.cat(v).numpy() for k, v in parts.items()}
    res["pred"] = (res["p"] > 0.5).astype(np.int64)
    res["cam_pred"] = np.where(res["pred"][:, None, None] == 1, res["cam_mal"], res["cam_ben"])
    res["has_counterfactual"] = spec.fusion == "residual"
    return res


def localization_rows(pred, split: SplitTensors, image_size=224):
    rows = []
    truths = [(int(y), tuple(b)) for y, b in zip(split.labels.numpy(), split.bboxes)]
    boxes = [af.cam_to_bbox(c, image_size) for c in pred["cam_pred"]]
    hits = af.localization_hits([(int(p), b) for p, b in zip(pred["pred"], boxes)], truths)
    for sid, p, (y, _), b, (v, ok) in zip(split.ids, pred["pred"], truths, boxes, hits):
        rows.append({"id": sid, "label_pred": int(p), "label_gt": y, "iou": v, "correct": int(ok),
                     "bbox": b.as_tuple()})
    return rows


def split_metrics(model, config, split: SplitTensors, with_fid=True):
    pred = predict(model, config, split)
    labels = split.labels.numpy()
    report = {"n": len(split), "auc": metrics.auc(pred["p"], labels)}
    rows = localization_rows(pred, split)
    report["localization_error"] = 1.0 - sum(r["correct"] for r in rows) / len(rows)
    inside, outside = af.omega_mass_inside_outside(pred["omega"], split.masks)
    report["omega_inside"] = inside
    report["omega_outside"] = outside
    if with_fid and pred["has_counterfactual"]:
        report.update(metrics.fid_quartet(pred["h_t"], pred["h_r"], pred["h_c"], split.masks).as_dict())
    return report, pred, rows


# -- checkpoints --------------------------------------------------------------------------------


def save_checkpoint(path, model, disc, config, epoch, val_auc):
    torch.save({
        "config": config.to_dict(),
        "model": model.state_dict(),
        "discriminator": disc.state_dict() if disc is not None else None,
        "epoch": epoch,
        "val_auc": val_auc,
    }, path)


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, weights_only=True)
    config = TrainConfig.from_dict(blob["config"])
    model, disc = build_models(config)
    model.load_state_dict(blob["model"])
    if disc is not None and blob["discriminator"] is not None:
        disc.load_state_dict(blob["discriminator"])
    return model, disc, config, blob


# -- training ---------------------------------------------------------------------------------------


LOG_FIELDS = ("epoch", "step") + TERMS + ("val_auc",)


def _snapshot_due(epoch, config):
    return epoch % config.snapshot_every == 0 or (epoch == config.epochs and config.snapshot_every > config.epochs)


def train(config: TrainConfig, data, out_dir=None, evaluate_test=True) -> RunRecord:
    """Train one variant.

    ``data`` is a dataset directory or a dict of prepared splits
    (``train``, ``val`` and optionally ``test``). With ``out_dir`` the run
    writes ``train_log.csv``, ``checkpoint.pt``, ``features.npz``,
    ``cam_snapshots.npz``, ``config.json`` and ``metrics.json``.
    """
    t0 = time.perf_counter()
    spec = VARIANTS[config.variant]
    torch.use_deterministic_algorithms(True, warn_only=True)
    model, disc = build_models(config)
    if not isinstance(data, dict):
        data = load_splits(data, model.extractor.pool)
    for s in ("train", "val"):
        if s not in data or len(data[s]) == 0:
            raise ValueError(f"dataset has no {s!r} split")
    train_set, val_set = data["train"], data["val"]
    test_set = data.get("test")

    g_opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    d_opt = None
    if disc is not None:
        d_opt = torch.optim.Adam(disc.parameters(), lr=config.d_lr or config.lr, betas=(0.5, 0.999))

    out = Path(out_dir) if out_dir is not None else None
    log_fh = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config.save(out / "config.json")
        log_fh = open(out / "train_log.csv", "w", newline="")
        writer = csv.DictWriter(log_fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        writer.writeheader()

    record = RunRecord(config)
    best_state = None
    snapshots, snapshot_epochs = [], []
    snap_set = test_set if test_set is not None else val_set
    n_snap = min(config.snapshot_samples, len(snap_set))
    order_gen = torch.Generator().manual_seed(config.seed * 7919 + 17)
    step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            model.train()
            perm = torch.randperm(len(train_set), generator=order_gen)
            sums = Counter()
            n_steps = 0
            rows = []
            for k in range(0, len(perm), config.batch_size):
                idx = perm[k:k + config.batch_size]
                pt, pr, y = train_set.pooled_t[idx], train_set.pooled_r[idx], train_set.labels[idx]
                step += 1
                fo = forward(model, spec, config, pt, pr)
                terms = generator_terms(model, disc, spec, config, fo, y)
                means = {k2: v.mean() for k2, v in terms.items()}
                vals = {k2: float(v.detach()) for k2, v in means.items()}
                vals["total_g"] = vals["l_ad_g"] + vals["l_ne"] + vals["l_ft"] + vals["l_cls"]
                _check_finite(vals, epoch, step)
                g_opt.zero_grad(set_to_none=True)
                backward_generator(model, means)
                if config.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                g_opt.step()

                vals["l_ad_d"] = 0.0
                if disc is not None:
                    for _ in range(config.d_steps_per_g):
                        d_opt.zero_grad(set_to_none=True)
                        l_d = discriminator_loss(disc, spec, fo).mean()
                        vals["l_ad_d"] = float(l_d.detach())
                        _check_finite({"l_ad_d": vals["l_ad_d"]}, epoch, step)
                        l_d.backward()
                        d_opt.step()
                    d_opt.zero_grad(set_to_none=True)
                for k2, v in vals.items():
                    sums[k2] += v
                n_steps += 1
                rows.append({"epoch": epoch, "step": step, **vals, "val_auc": ""})

            val_pred = predict(model, config, val_set)
            v_auc = metrics.auc(val_pred["p"], val_set.labels.numpy())
            record.val_auc.append(v_auc)
            record.epoch_losses.append({k2: sums[k2] / n_steps for k2 in TERMS})
            if rows:
                rows[-1]["val_auc"] = v_auc
            if writer is not None:
                writer.writerows(rows)
            if best_state is None or v_auc > record.best_val_auc:
                record.best_val_auc = v_auc
                record.best_epoch = epoch
                best_state = (copy.deepcopy(model.state_dict()),
                              copy.deepcopy(disc.state_dict()) if disc is not None else None)
            if _snapshot_due(epoch, config):
                sp = predict(model, config, _head(snap_set, n_snap))
                snapshots.append((sp["cam_pred"], sp["cam_mal"], sp["omega"]))
                snapshot_epochs.append(epoch)
            log.info("epoch %d total_g %.4f val_auc %.4f", epoch, record.epoch_losses[-1]["total_g"], v_auc)
    finally:
        if log_fh is not None:
            log_fh.close()

    model.load_state_dict(best_state[0])
    if disc is not None:
        disc.load_state_dict(best_state[1])
    if out is not None:
        ckpt = out / "checkpoint.pt"
        save_checkpoint(ckpt, model, disc, config, record.best_epoch, record.best_val_auc)
        record.checkpoint_path = str(ckpt)
        np.savez_compressed(
            out / "cam_snapshots.npz",
            epochs=np.array(snapshot_epochs),
            ids=np.array(snap_set.ids[:n_snap]),
            cam_pred=np.stack([s[0] for s in snapshots]),
            cam_mal=np.stack([s[1] for s in snapshots]),
            omega=np.stack([s[2] for s in snapshots]),
            bboxes=snap_set.bboxes[:n_snap],
            labels=snap_set.labels.numpy()[:n_snap],
            x_t=snap_set.x_t[:n_snap],
            x_r=snap_set.x_r[:n_snap],
        )
    if evaluate_test and test_set is not None:
        report, pred, loc_rows = split_metrics(model, config, test_set)
        record.test_metrics = report
        if out is not None:
            save_features(out / "features.npz", test_set, pred)
            write_localization_csv(out / "localization.csv", loc_rows, report["localization_error"])
    record.seconds = time.perf_counter() - t0
    if out is not None:
        summary = {"best_epoch": record.best_epoch, "best_val_auc": record.best_val_auc,
                   "val_auc": record.val_auc, "test": record.test_metrics}
        (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return record


def _head(split: SplitTensors, n):
    return SplitTensors(split.ids[:n], split.pooled_t[:n], split.pooled_r[:n], split.labels[:n],
                        split.bboxes[:n], split.masks[:n], split.x_t[:n], split.x_r[:n])


def save_features(path, split: SplitTensors, pred):
    np.savez_compressed(
        path,
        ids=np.array(split.ids),
        labels=split.labels.numpy(),
        bboxes=split.bboxes,
        masks=split.masks.astype(np.uint8),
        x_t=split.x_t,
        x_r=split.x_r,
        has_counterfactual=np.array(pred["has_counterfactual"]),
        **{k: pred[k] for k in ("p", "pred", "h_t", "h_r", "h_c", "cam_pred", "cam_mal", "cam_ben", "omega")},
    )


def write_localization_csv(path, rows, error):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id", "label_pred", "label_gt", "iou", "correct"))
        for r in rows:
            w.writerow((r["id"], r["label_pred"], r["label_gt"], f"{r['iou']:.6f}", r["correct"]))
        w.writerow(("__aggregate__", "", "", "", f"{error:.6f}"))


def read_train_log(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in LOG_FIELDS:
            if r[k] == "":
                r[k] = None
            elif k in ("epoch", "step"):
                r[k] = int(r[k])
            else:
                r[k] = float(r[k])
    return rows


def evaluate(checkpoint, data, split="test", with_fid=True):
    """Metrics of a saved checkpoint on one split: AUC, localization error, Ω mass and FIDs."""
    model, _, config, _ = load_checkpoint(checkpoint)
    if not isinstance(data, dict):
        data = load_splits(data, model.extractor.pool, names=(split,))
    report, pred, rows = split_metrics(model, config, data[split], with_fid)
    report["split"] = split
    return report, pred, rows


# -- ablation and k-fold ---------------------------------------------------------------------------------


ABLATION_FIELDS = ("variant", "seed", "status", "test_auc", "val_auc", "localization_error", "seconds", "error")


def run_ablation(base_config: TrainConfig, data, out_dir=None, variants=None, seeds=None):
    """Train each variant on one fixed dataset and seed list; returns the ablation rows.

    A failing variant becomes a ``failed`` row and the sweep continues.
    """
    variants = list(variants or VARIANTS)
    seeds = list(seeds if seeds is not None else [base_config.seed])
    if not isinstance(data, dict):
        data = load_splits(data, build_models(base_config)[0].extractor.pool)
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    for v in variants:
        for s in seeds:
            cfg = base_config.replace(variant=v, seed=s)
            run_dir = out / f"{v}_seed{s}" if out is not None else None
            try:
                rec = train(cfg, data, run_dir)
                rows.append({"variant": v, "seed": s, "status": "ok", "test_auc": rec.test_metrics.get("auc"),
                             "val_auc": rec.best_val_auc,
                             "localization_error": rec.test_metrics.get("localization_error"),
                             "seconds": round(rec.seconds, 2), "error": ""})
            except Exception as exc:  # recorded as a failed row by contract
                log.exception("variant %s seed %s failed", v, s)
                rows.append({"variant": v, "seed": s, "status": "failed", "test_auc": None, "val_auc": None,
                             "localization_error": None, "seconds": None, "error": f"{type(exc).__name__}: {exc}"})
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_ablation_csv(out / "ablation.csv", rows)
    return rows


def write_ablation_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in ABLATION_FIELDS})


def read_ablation_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"] = int(r["seed"])
        for k in ("test_auc", "val_auc", "localization_error", "seconds"):
            r[k] = float(r[k]) if r[k] != "" else None
    return rows


def median_auc_by_variant(rows):
    by = {}
    for r in rows:
        if r["status"] == "ok":
            by.setdefault(r["variant"], []).append(r["test_auc"])
    return {v: float(np.median(a)) for v, a in by.items()}


def kfold_folds(patient_ids, k=5, seed=0):
    """Patient-level fold index per sample."""
    unique = sorted(set(patient_ids))
    order = np.random.default_rng([seed, 11]).permutation(len(unique))
    fold_of = {unique[i]: r % k for r, i in enumerate(order)}
    return np.array([fold_of[p] for p in patient_ids])


def _subset(split: SplitTensors, idx):
    idx = np.asarray(idx)
    t = torch.as_tensor(idx)
    return SplitTensors([split.ids[i] for i in idx], split.pooled_t[t], split.pooled_r[t], split.labels[t],
                        split.bboxes[idx], split.masks[idx], split.x_t[idx], split.x_r[idx])


def cross_validate(config: TrainConfig, data_dir, k=5):
    """k-fold driver: fold i is the test set, fold i+1 validation, the rest training."""
    model, _ = build_models(config)
    rows = read_manifest(data_dir)
    by_split = load_splits(data_dir, model.extractor.pool)
    ids = sum((by_split[s].ids for s in ("train", "val", "test")), [])
    whole = SplitTensors(
        ids,
        torch.cat([by_split[s].pooled_t for s in ("train", "val", "test")]),
        torch.cat([by_split[s].pooled_r for s in ("train", "val", "test")]),
        torch.cat([by_split[s].labels for s in ("train", "val", "test")]),
        np.concatenate([by_split[s].bboxes for s in ("train", "val", "test")]),
        np.concatenate([by_split[s].masks for s in ("train", "val", "test")]),
        np.concatenate([by_split[s].x_t for s in ("train", "val", "test")]),
        np.concatenate([by_split[s].x_r for s in ("train", "val", "test")]),
    )
    patient = {r["id"]: r["patient_id"] for r in rows}
    folds = kfold_folds([patient[i] for i in ids], k, config.seed)
    aucs = []
    for i in range(k):
        test_idx = np.flatnonzero(folds == i)
        val_idx = np.flatnonzero(folds == (i + 1) % k)
        train_idx = np.flatnonzero((folds != i) & (folds != (i + 1) % k))
        rec = train(config, {"train": _subset(whole, train_idx), "val": _subset(whole, val_idx),
                             "test": _subset(whole, test_idx)})
        aucs.append(rec.test_metrics["auc"])
    return {"fold_auc": aucs, "mean_auc": float(np.mean(aucs))}
