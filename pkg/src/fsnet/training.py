"""Training loop (Adam + BCE), evaluation, cross-training, and ablation.

Training follows the published protocol: Adam at learning rate 1e-3,
binary cross-entropy on logits, batch size 2, checkpoint kept at the
lowest validation loss.  Everything is seeded through one SeedSequence,
so identical configs reproduce identical loss traces, checkpoints, and
prediction maps bit for bit.  The default path is desk scale (small
square crops); full-resolution training is gated behind a flag.
"""

from __future__ import annotations

import dataclasses
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as data_mod
from . import metrics as metrics_mod
from . import postprocess as post
from . import synth as synth_mod
from .model import FSNet, ModelConfig, checkpoint_load, checkpoint_save, coerce_field
from .tensor import Tensor, accumulate_grad, make_op, no_grad
from .ops import stable_sigmoid


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    learning_rate: float = 1e-3
    batch_size: int = 2
    epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    dataset: str = "synthetic"
    data_root: str = ""
    augmentations: tuple = ()
    rotation_mode: str = "continuous"
    val_fraction: float = 0.1
    train_size: int = 48
    full_resolution: bool = False
    synthetic_count: int = 4
    fold: int = 0
    optimum_mode: str = "global"
    out_dir: str = "runs/latest"

    def validate(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        unknown = set(self.augmentations) - set(data_mod.AUGMENT_OPS)
        if unknown:
            raise ValueError(f"unknown augmentations {sorted(unknown)}")
        self.model.validate()
        return self

    def to_fields(self):
        fields = self.model.to_fields()
        for f in dataclasses.fields(self):
            if f.name == "model":
                continue
            value = getattr(self, f.name)
            if f.name == "augmentations":
                fields[f.name] = ",".join(value)
            elif isinstance(value, bool):
                fields[f.name] = str(value).lower()
            else:
                fields[f.name] = str(value)
        return fields

    @classmethod
    def from_fields(cls, fields):
        model_names = {f.name for f in dataclasses.fields(ModelConfig)}
        own = {f.name: f for f in dataclasses.fields(cls) if f.name != "model"}
        model_fields = {}
        kwargs = {}
        for key, raw in fields.items():
            if key in model_names:
                model_fields[key] = raw
            elif key in own:
                if key == "augmentations":
                    kwargs[key] = tuple(p.strip() for p in str(raw).split(",") if p.strip())
                else:
                    kwargs[key] = coerce_field(own[key].type, raw, key)
            else:
                raise ValueError(f"unknown train config field {key!r}")
        kwargs["model"] = ModelConfig.from_fields(model_fields)
        return cls(**kwargs).validate()


@dataclass
class RunRecord:
    train_losses: list
    val_losses: list
    best_epoch: int
    best_val_loss: float
    wall_time: float
    checkpoint_path: str
    final_train: metrics_mod.MetricsReport | None = None
    final_val: metrics_mod.MetricsReport | None = None


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy in the numerically stable logits form.

    loss_i = max(z, 0) - z*t + log(1 + exp(-|z|)); the gradient with
    respect to the logits is (sigmoid(z) - t) / count.
    """
    t = np.asarray(targets, dtype=logits.data.dtype)
    if t.shape != logits.shape:
        raise ValueError(f"targets shape {t.shape} != logits shape {logits.shape}")
    z = logits.data
    per_pixel = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out_data = np.asarray(per_pixel.mean(), dtype=z.dtype)
    count = z.dtype.type(z.size)

    def bwd(g):
        accumulate_grad(logits, g * (stable_sigmoid(z).astype(z.dtype) - t) / count)

    return make_op(out_data, (logits,), bwd)


def adam_step(param, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on ``param`` and the moments."""
    if t < 1:
        raise ValueError(f"adam_step: step counter must be >= 1, got {t}")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam with bias correction over a list of parameter tensors."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self._v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]

    def step(self):
        self.t += 1
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            update = p.data.astype(np.float64)
            adam_step(update, p.grad.astype(np.float64), m, v, self.t,
                      self.lr, self.beta1, self.beta2, self.eps)
            p.data[...] = update.astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# sample preparation


def _prepare(samples, cfg):
    """Resize samples for training: desk-scale square or published size."""
    if cfg.full_resolution:
        spec = data_mod.DATASETS.get(data_mod.canonical_tag(cfg.dataset))
        if spec is None or spec.resize_to is None:
            return list(samples)
        th, tw = spec.resize_to[1], spec.resize_to[0]
    else:
        th = tw = cfg.train_size
    out = []
    for s in samples:
        image = data_mod.resize(s.image, th, tw, "bilinear")
        mask = data_mod.resize(s.mask, th, tw, "nearest")
        fov = data_mod.resize(s.fov, th, tw, "nearest") if s.fov is not None else None
        out.append(replace(s, image=image, mask=mask, fov=fov))
    return out


def _load_split_samples(cfg):
    """Load the configured dataset and return (train, val, test) samples."""
    tag = data_mod.canonical_tag(cfg.dataset)
    if tag == "synthetic":
        pool = synth_mod.make_vessel_set(cfg.synthetic_count, cfg.train_size, cfg.seed)
        ids = [s.sample_id for s in pool]
        plan = data_mod.make_splits(tag, ids, val_fraction=cfg.val_fraction)
        by = {s.sample_id: s for s in pool}
        return ([by[i] for i in plan.train], [by[i] for i in plan.val],
                [by[i] for i in plan.test])
    root = data_mod.dataset_dir(cfg.data_root, tag)
    samples = data_mod.load_dataset(root, tag)
    ids = [s.sample_id for s in samples]
    plan = data_mod.make_splits(tag, ids, fold=cfg.fold, val_fraction=cfg.val_fraction)
    return (data_mod.select_samples(samples, plan.train),
            data_mod.select_samples(samples, plan.val),
            data_mod.select_samples(samples, plan.test))


def _batch_arrays(samples):
    images = np.stack([np.asarray(s.image, dtype=np.float32) for s in samples])[:, None]
    masks = np.stack([np.asarray(s.mask, dtype=np.float32) for s in samples])[:, None]
    return images, masks


def _carve_validation_cfg_samples(cfg, samples):
    """Split an in-memory pool into (train, val) per the config fraction."""
    pool = _prepare(samples, cfg)
    train_ids, val_ids = data_mod._carve_validation(
        [s.sample_id for s in pool], cfg.val_fraction
    )
    by = {s.sample_id: s for s in pool}
    return [by[i] for i in train_ids], [by[i] for i in val_ids]


def _mean_loss(model, samples, batch_size):
    """Validation loss in eval mode, no gradients, deterministic order."""
    total = 0.0
    count = 0
    model.eval()
    with no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            x, t = _batch_arrays(chunk)
            logits = model.forward(Tensor(x))
            loss = bce_with_logits(logits, t)
            total += loss.item() * len(chunk)
            count += len(chunk)
    model.train()
    return total / count


def train(cfg: TrainConfig, samples=None, out_dir=None) -> RunRecord:
    """Run the full training loop and keep the best-validation checkpoint.

    ``samples`` may inject an in-memory training pool (validation is
    carved from its tail per ``val_fraction``); otherwise the configured
    dataset is loaded from disk.
    """
    cfg.validate()
    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    started = time.perf_counter()

    if samples is not None:
        train_samples, val_samples = _carve_validation_cfg_samples(cfg, samples)
    else:
        train_samples, val_samples, _ = _load_split_samples(cfg)
        train_samples = _prepare(train_samples, cfg)
        val_samples = _prepare(val_samples, cfg)
    if not train_samples:
        raise ValueError("train: empty training split")
    if not val_samples:
        val_samples = train_samples  # validation falls back to the train set

    seq = np.random.SeedSequence(cfg.seed)
    model_seed, order_seed, augment_seed, dropout_seed = seq.spawn(4)
    model = FSNet(cfg.model, seed=np.random.default_rng(model_seed))
    opt = Adam(model.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    order_rng = np.random.default_rng(order_seed)
    augment_rng = np.random.default_rng(augment_seed)
    dropout_rng = np.random.default_rng(dropout_seed)

    ckpt_path = os.path.join(out_dir, "best.ckpt")
    record = RunRecord([], [], best_epoch=0, best_val_loss=np.inf,
                       wall_time=0.0, checkpoint_path=ckpt_path)

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        perm = order_rng.permutation(len(train_samples))
        epoch_loss = 0.0
        seen = 0
        for start in range(0, len(perm), cfg.batch_size):
            chunk = [train_samples[i] for i in perm[start : start + cfg.batch_size]]
            if cfg.augmentations:
                chunk = [
                    data_mod.augment(s, cfg.augmentations, augment_rng, cfg.rotation_mode)
                    for s in chunk
                ]
            x, t = _batch_arrays(chunk)
            logits = model.forward(Tensor(x), rng=dropout_rng)
            loss = bce_with_logits(logits, t)
            model.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item() * len(chunk)
            seen += len(chunk)
        record.train_losses.append(epoch_loss / seen)
        val_loss = _mean_loss(model, val_samples, cfg.batch_size)
        record.val_losses.append(val_loss)
        if val_loss < record.best_val_loss:
            record.best_val_loss = val_loss
            record.best_epoch = epoch
            checkpoint_save(model, ckpt_path)

    best_model = checkpoint_load(ckpt_path)
    record.final_train = evaluate_samples(best_model, train_samples, use_adaptive=False).pooled
    record.final_val = evaluate_samples(best_model, val_samples, use_adaptive=False).pooled
    record.wall_time = time.perf_counter() - started
    return record


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class ImageResult:
    sample_id: str
    counts: metrics_mod.ConfusionCounts
    report: metrics_mod.MetricsReport
    prob: post.ProbabilityMap
    mask: np.ndarray


@dataclass
class EvalResult:
    per_image: list
    pooled: metrics_mod.MetricsReport
    averaged: metrics_mod.MetricsReport
    threshold_mode: str


def predict_probability(model, sample) -> post.ProbabilityMap:
    """Eval-mode forward pass plus sigmoid smoothing for one sample."""
    x = np.asarray(sample.image, dtype=np.float32)[None, None]
    model.eval()
    with no_grad():
        logits = model.forward(Tensor(x))
    plane = logits.data[0, 0].astype(np.float64)
    if model.config.enable_smoothing:
        values = stable_sigmoid(plane)
    else:
        values = np.clip(plane, 0.0, 1.0)  # diagnostic mode: raw logits, clamped
    return post.ProbabilityMap(values, model_id="fsnet", sample_id=sample.sample_id)


def evaluate_samples(model, samples, use_adaptive, optimum=None,
                     threshold_cfg: post.ThresholdSearchConfig | None = None,
                     optimum_mode="global") -> EvalResult:
    """Per-image metrics plus pooled and averaged aggregates.

    ``use_adaptive`` switches between the adaptive ratio-matching search
    and the fixed 0.5 threshold.  ``optimum`` (the target
    background-to-foreground ratio) is required for the adaptive path
    unless ``threshold_cfg`` or per-image mode is given.
    """
    if not samples:
        raise ValueError("evaluate_samples: no samples")
    per_image = []
    pooled_probs = []
    pooled_truth = []
    for sample in samples:
        prob = predict_probability(model, sample)
        if use_adaptive:
            if optimum_mode == "per_image":
                target = post.estimate_optimum_ratio(
                    [sample.mask], [sample.fov] if sample.fov is not None else None
                )
                cfg = post.ThresholdSearchConfig(optimum=target)
            elif threshold_cfg is not None:
                cfg = threshold_cfg
            else:
                if optimum is None:
                    raise ValueError("adaptive evaluation needs an optimum ratio")
                cfg = post.ThresholdSearchConfig(optimum=optimum)
            result = post.adaptive_threshold(prob, cfg)
            mask, theta = result.mask, result.theta
        else:
            theta = 0.5
            mask = post.fixed_threshold(prob, theta)
        counts = metrics_mod.confusion(mask, sample.mask, sample.fov)
        report = metrics_mod.scalar_metrics(counts, threshold=theta)
        report = dataclasses.replace(
            report, auc=metrics_mod.auc(prob.values, sample.mask, sample.fov)
        )
        per_image.append(ImageResult(sample.sample_id, counts, report, prob, mask))
        fov = sample.fov
        pooled_probs.append(metrics_mod._flatten_masked(prob.values, fov))
        pooled_truth.append(metrics_mod._flatten_masked(np.asarray(sample.mask), fov))

    pooled_auc = metrics_mod.auc(np.concatenate(pooled_probs), np.concatenate(pooled_truth))
    counts_list = [r.counts for r in per_image]
    reports = [r.report for r in per_image]
    pooled = metrics_mod.aggregate(counts_list, reports, "pooled", pooled_auc=pooled_auc)
    averaged = metrics_mod.aggregate(counts_list, reports, "averaged")
    return EvalResult(per_image, pooled, averaged,
                      threshold_mode="adaptive" if use_adaptive else "fixed")


def dataset_optimum(cfg: TrainConfig, train_samples) -> float:
    """Target background-to-foreground ratio from the training masks."""
    masks = [s.mask for s in train_samples]
    fovs = [s.fov for s in train_samples]
    if any(f is None for f in fovs):
        fovs = None
    return post.estimate_optimum_ratio(masks, fovs, mode="pooled")


def evaluate_checkpoint(ckpt_path, cfg: TrainConfig, split="test",
                        use_adaptive=False) -> EvalResult:
    """Load a checkpoint and evaluate one split of the configured dataset."""
    model = checkpoint_load(ckpt_path)
    train_samples, val_samples, test_samples = _load_split_samples(cfg)
    chosen = {"train": train_samples, "val": val_samples, "test": test_samples}[split]
    if not chosen:
        raise ValueError(f"split {split!r} is empty")
    optimum = None
    if use_adaptive and cfg.optimum_mode == "global":
        optimum = dataset_optimum(cfg, train_samples)
    return evaluate_samples(model, chosen, use_adaptive, optimum,
                            optimum_mode=cfg.optimum_mode)


def cross_train(train_tag, test_tag, cfg: TrainConfig):
    """Train on one dataset's training split, test on another's test split.

    The optimum ratio for the adaptive threshold comes from the training
    dataset's masks.  Returns (RunRecord, EvalResult).
    """
    train_cfg = replace(cfg, dataset=train_tag,
                        out_dir=os.path.join(cfg.out_dir, f"cross_{train_tag}_{test_tag}"))
    train_cfg.validate()
    record = train(train_cfg)

    test_cfg = replace(cfg, dataset=test_tag)
    _, _, test_samples = _load_split_samples(test_cfg)
    if not test_samples:
        raise ValueError(f"cross_train: test split of {test_tag!r} is empty")
    train_samples, _, _ = _load_split_samples(train_cfg)
    optimum = dataset_optimum(train_cfg, train_samples)

    model = checkpoint_load(record.checkpoint_path)
    use_adaptive = cfg.model.enable_adaptive_threshold
    result = evaluate_samples(model, test_samples, use_adaptive, optimum)
    return record, result


ABLATION_STAGES = ("BL", "BL+EB", "BL+EB+BE", "BL+EB+BE+SE", "BL+EB+BE+SE+AT")


def _stage_model_config(base: ModelConfig, stage) -> ModelConfig:
    eb = "EB" in stage
    be = "BE" in stage
    se = "SE" in stage
    at = "AT" in stage
    return replace(base, enable_encoder_booster=eb, enable_bottleneck_enhancement=be,
                   enable_se=se, enable_adaptive_threshold=at, enable_smoothing=True)


def ablate(cfg: TrainConfig, stages=ABLATION_STAGES, samples=None, test_samples=None):
    """Run the ablation ladder with a shared seed and shared data.

    Sigmoid smoothing stays on in every stage; the adaptive threshold is
    toggled only in the final stage, which reuses the previous stage's
    checkpoint so only the post-processing differs.  Returns a list of
    (stage name, checkpoint path, EvalResult).
    """
    results = []
    prev_ckpt = None
    prev_model_cfg = None
    for stage in stages:
        stage_model = _stage_model_config(cfg.model, stage)
        stage_cfg = replace(cfg, model=stage_model,
                            out_dir=os.path.join(cfg.out_dir, stage.replace("+", "_")))
        reuse = (
            prev_ckpt is not None
            and prev_model_cfg is not None
            and replace(stage_model, enable_adaptive_threshold=False)
            == replace(prev_model_cfg, enable_adaptive_threshold=False)
        )
        if reuse:
            ckpt = prev_ckpt
        else:
            record = train(stage_cfg, samples=samples)
            ckpt = record.checkpoint_path
        model = checkpoint_load(ckpt)

        if test_samples is not None:
            eval_pool = _prepare(test_samples, stage_cfg)
        elif samples is not None:
            eval_pool = _prepare(samples, stage_cfg)
        else:
            _, _, eval_pool = _load_split_samples(stage_cfg)
            eval_pool = _prepare(eval_pool, stage_cfg)

        if stage_model.enable_adaptive_threshold:
            if samples is not None:
                optimum = dataset_optimum(stage_cfg, _prepare(samples, stage_cfg))
            else:
                train_s, _, _ = _load_split_samples(stage_cfg)
                optimum = dataset_optimum(stage_cfg, _prepare(train_s, stage_cfg))
            result = evaluate_samples(model, eval_pool, True, optimum)
        else:
            result = evaluate_samples(model, eval_pool, False)
        results.append((stage, ckpt, result))
        prev_ckpt = ckpt
        prev_model_cfg = stage_model
    return results
