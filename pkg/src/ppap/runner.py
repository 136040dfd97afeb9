"""Training loop, evaluation, zero-shot protocol and qualitative plots."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import cv2
import numpy as np
import torch
import torch.nn as nn

from ppap.backbone import HeatmapTarget, decode_keypoints, make_target_heatmap
from ppap.config import TrainConfig
from ppap.data import (AugmentConfig, InstanceRecord, apply_affine, augment, crop_affine, default_species,
                       default_vocab, generate_synthetic, invert_affine, load_dataset, warp_image)
from ppap.errors import InvalidArgument, InvalidState
from ppap.metrics import EvalResult, evaluate_predictions
from ppap.model import FEATURE_STRIDE, PPAPModel
from ppap.prompt_bank import KeypointVocab

logger = logging.getLogger(__name__)


@dataclass
class Crop:
    image: np.ndarray  # (3, S, S)
    keypoints: np.ndarray  # (K, 3) in crop pixels
    matrix: np.ndarray  # original -> crop


@dataclass
class TrainResult:
    model: PPAPModel
    checkpoint: dict
    best_checkpoint: dict | None
    history: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    initial_fingerprint: str = ""


def build_dataset(cfg: TrainConfig, species: Sequence[str] | None = None, seed: int | None = None
                  ) -> tuple[list[InstanceRecord], KeypointVocab]:
    """Records named by the config: a dataset directory if set, else fresh synthetic data."""
    d = cfg.data
    if d.dataset:
        records, vocab = load_dataset(d.dataset)
        if species is not None:
            records = [r for r in records if r.species in set(species)]
        return records, vocab
    catalog = default_species()
    names = list(species if species is not None else d.species)
    missing = [n for n in names if n not in catalog]
    if missing:
        raise InvalidArgument(f"unknown synthetic species {missing}; available {sorted(catalog)}")
    records = generate_synthetic([catalog[n] for n in names], d.n_per_species, d.image_size,
                                 d.noise_level, d.seed if seed is None else seed)
    return records, default_vocab()


def make_crop(rec: InstanceRecord, size: int, padding: float) -> Crop:
    matrix = crop_affine(rec.bbox, size, padding)
    return Crop(warp_image(rec.load_image(), matrix, size), apply_affine(matrix, rec.keypoints, size), matrix)


def _targets(keypoints: np.ndarray, size: int, cells: int, sigma_px: float) -> HeatmapTarget:
    stride = size / cells
    maps, weights = zip(*(
        (t.heatmaps, t.weights)
        for t in (make_target_heatmap(kp, (cells, cells), sigma_px, stride) for kp in keypoints)
    ))
    return HeatmapTarget(torch.stack(maps), torch.stack(weights))


def make_batch(model: PPAPModel, images: Sequence[np.ndarray], keypoints: Sequence[np.ndarray]):
    size = model.input_size
    h = model.grid[0]
    kps = np.stack(keypoints)
    imgs = torch.from_numpy(np.stack(images)).float()
    spatial = _targets(kps, size, 2 * h, model.sigma_px)
    pred = _targets(kps, size, 4 * h, model.sigma_px)
    return imgs, torch.from_numpy(kps).float(), spatial, pred


def build_optimizer(model: nn.Module, lr: float, weight_decay: float) -> torch.optim.AdamW:
    """AdamW with normalization gains and all biases excluded from weight decay."""
    no_decay = set()
    for module in model.modules():
        if isinstance(module, (nn.LayerNorm, nn.GroupNorm)):
            no_decay.update(id(p) for p in module.parameters(recurse=False))
    decay, plain = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (plain if id(p) in no_decay or name.endswith("bias") else decay).append(p)
    return torch.optim.AdamW([
        {"params": decay, "weight_decay": weight_decay},
        {"params": plain, "weight_decay": 0.0},
    ], lr=lr)


def make_checkpoint(model: PPAPModel, epoch: int, generator: torch.Generator | None = None,
                    np_rng: np.random.Generator | None = None) -> dict:
    return {
        "state": {k: v.detach().clone() for k, v in model.learnable_state().items()},
        "encoder_fingerprint": model.encoder_fingerprint(),
        "config": model.cfg.to_dict(),
        "vocab": model.vocab.to_dict(),
        "epoch": epoch,
        "rng_state": {
            "torch": generator.get_state() if generator is not None else None,
            "numpy": np_rng.bit_generator.state if np_rng is not None else None,
        },
    }


def save_checkpoint(ckpt: dict, path) -> None:
    torch.save(ckpt, path)


def load_checkpoint(ckpt) -> PPAPModel:
    """Rebuild a model from a checkpoint dict or path and check the frozen encoder."""
    if not isinstance(ckpt, dict):
        ckpt = torch.load(ckpt, map_location="cpu", weights_only=False)
    cfg = TrainConfig.from_dict(ckpt["config"])
    model = PPAPModel(cfg, KeypointVocab.from_dict(ckpt["vocab"]))
    missing, unexpected = model.load_state_dict(ckpt["state"], strict=False)
    if unexpected or any(not k.startswith("text_encoder.") for k in missing):
        raise InvalidArgument(f"checkpoint does not match model: missing={missing} unexpected={unexpected}")
    if model.encoder_fingerprint() != ckpt["encoder_fingerprint"]:
        raise InvalidState("frozen text encoder fingerprint mismatch")
    model.eval()
    return model


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    t = cfg.train
    drops = sum(1 for m in t.lr_milestones if epoch >= m)
    return t.lr * t.lr_factor**drops


def train(cfg: TrainConfig, records: Sequence[InstanceRecord], vocab: KeypointVocab,
          out_dir=None, eval_every: int = 10, eval_alpha: float | None = None,
          log_fn: Callable[[dict], None] | None = None) -> TrainResult:
    """Optimize every non-frozen parameter with AdamW and a step-wise LR schedule."""
    if not records:
        raise InvalidArgument("training set is empty")
    if any(len(r.keypoints) != vocab.num_keypoints for r in records):
        raise InvalidArgument("record keypoint count does not match the vocabulary")
    t = cfg.train
    torch.manual_seed(t.seed)
    model = PPAPModel(cfg, vocab)
    fingerprint = model.encoder_fingerprint()
    opt = build_optimizer(model, t.lr, t.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(t.lr_milestones), gamma=t.lr_factor)
    gen = torch.Generator().manual_seed(t.seed)
    rng = np.random.default_rng(t.seed)
    crops = [make_crop(r, model.input_size, cfg.data.padding) for r in records]
    aug_cfg = AugmentConfig(cfg.aug.rotation_max_deg, tuple(cfg.aug.scale_range), cfg.aug.flip_prob)
    alpha = eval_alpha if eval_alpha is not None else cfg.eval.alpha
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")
        log_file = open(out / "metrics.jsonl", "w")
    else:
        log_file = None

    history, step_losses = [], []
    best, best_pck, step = None, -1.0, 0
    try:
        for epoch in range(t.epochs):
            model.train()
            order = rng.permutation(len(crops))
            sums: dict[str, float] = {}
            n_batches = 0
            for start in range(0, len(order), t.batch_size):
                if t.max_steps is not None and step >= t.max_steps:
                    break
                idx = order[start:start + t.batch_size]
                imgs, kps = [], []
                for i in idx:
                    img, kp = crops[i].image, crops[i].keypoints
                    if cfg.aug.enabled:
                        img, kp = augment(img, kp, vocab, aug_cfg, rng)
                    imgs.append(img)
                    kps.append(kp)
                images, keypoints, spatial_t, pred_t = make_batch(model, imgs, kps)
                out_ = model(images, target=spatial_t.heatmaps, generator=gen)
                parts = model.losses(out_, keypoints, spatial_t, pred_t)
                opt.zero_grad(set_to_none=True)
                parts.total.backward()
                opt.step()
                step += 1
                step_losses.append(float(parts.total.detach()))
                for k_, v in parts.as_floats().items():
                    sums[k_] = sums.get(k_, 0.0) + v
                n_batches += 1
            if n_batches == 0:
                break
            if model.encoder_fingerprint() != fingerprint:
                raise InvalidState(f"frozen text encoder changed during epoch {epoch}")
            entry = {k_: v / n_batches for k_, v in sums.items()}
            entry.update(epoch=epoch, step=step, lr=opt.param_groups[0]["lr"])
            sched.step()
            last = epoch == t.epochs - 1 or (t.max_steps is not None and step >= t.max_steps)
            if eval_every and ((epoch + 1) % eval_every == 0 or last):
                res = evaluate(model, records, alpha=alpha, vocab=vocab)
                entry["train_pck"] = res.pck
                if res.pck > best_pck:
                    best_pck = res.pck
                    best = make_checkpoint(model, epoch, gen, rng)
            history.append(entry)
            if log_file:
                log_file.write(json.dumps(entry) + "\n")
                log_file.flush()
            if log_fn:
                log_fn(entry)
            logger.info("epoch %d step %d total %.5f", epoch, step, entry["total"])
    finally:
        if log_file:
            log_file.close()

    ckpt = make_checkpoint(model, len(history) - 1, gen, rng)
    if out:
        save_checkpoint(ckpt, out / "final.pt")
        save_checkpoint(best or ckpt, out / "best.pt")
    return TrainResult(model, ckpt, best, history, step_losses, fingerprint)


@torch.no_grad()
def predict_heatmaps(model: PPAPModel, images: torch.Tensor, stochastic: int = 0, seed: int = 0) -> torch.Tensor:
    """Eval-mode heatmaps: ``eps = 0`` by default, else the mean of ``stochastic`` sampled passes."""
    model.eval()
    if stochastic <= 0:
        return model(images, deterministic=True).heatmaps
    gen = torch.Generator().manual_seed(seed)
    return torch.stack([model(images, generator=gen).heatmaps for _ in range(stochastic)]).mean(dim=0)


def evaluate(model, records: Sequence[InstanceRecord], alpha: float = 0.05, stochastic_eval: int = 0,
             seed: int = 0, vocab: KeypointVocab | None = None, batch_size: int = 64,
             predictor: Callable[[torch.Tensor, list[Crop]], torch.Tensor] | None = None) -> EvalResult:
    """Crop by ground-truth box, predict, decode, map back and score.

    ``model`` may be a model, a checkpoint dict or a checkpoint path.
    ``predictor(images, crops)`` overrides the model's heatmaps.
    """
    if not isinstance(model, PPAPModel):
        model = load_checkpoint(model)
    vocab = vocab or model.vocab
    if vocab.names != model.vocab.names:
        raise InvalidArgument("dataset vocabulary does not match the checkpoint")
    if any(len(r.keypoints) != vocab.num_keypoints for r in records):
        raise InvalidArgument("record keypoint count does not match the vocabulary")
    cfg = model.cfg
    preds = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        crops = [make_crop(r, model.input_size, cfg.data.padding) for r in chunk]
        images = torch.from_numpy(np.stack([c.image for c in crops])).float()
        if predictor is not None:
            heat = predictor(images, crops)
        else:
            heat = predict_heatmaps(model, images, stochastic_eval, seed)
        decoded = decode_keypoints(heat, model.pred_stride).double().numpy()
        for c, d in zip(crops, decoded):
            pts = np.concatenate([d[:, :2], np.ones((len(d), 1))], axis=1)
            preds.append(apply_affine(invert_affine(c.matrix), pts)[:, :2])
    gts = np.stack([r.keypoints for r in records])
    bboxes = np.array([r.bbox for r in records])
    return evaluate_predictions(np.stack(preds), gts, bboxes, alpha=alpha, kappas=cfg.data.kappa)


def zero_shot_protocol(cfg: TrainConfig, train_species: Sequence[str], test_species: Sequence[str],
                       control: bool = False, alpha: float | None = None, out_dir=None) -> dict:
    """Train on ``train_species`` only; report train- and test-species results separately.

    Species lists must be disjoint unless ``control`` is set, in which case they
    must be identical (same-species sanity run). Test instances are always drawn
    from a held-out seed.
    """
    train_species, test_species = list(train_species), list(test_species)
    if not train_species or not test_species:
        raise InvalidArgument("species lists must be non-empty")
    overlap = set(train_species) & set(test_species)
    if control:
        if set(train_species) != set(test_species):
            raise InvalidArgument("control runs use the same species for training and testing")
    elif overlap:
        raise InvalidArgument(f"train and test species overlap: {sorted(overlap)}")
    alpha = cfg.eval.alpha if alpha is None else alpha
    train_records, vocab = build_dataset(cfg, train_species)
    if cfg.data.dataset:
        test_records, _ = build_dataset(cfg, test_species)
        if control:
            raise InvalidArgument("control runs need a synthetic dataset for held-out instances")
    else:
        test_records, _ = build_dataset(cfg, test_species, seed=cfg.data.seed + 10_007)
    result = train(cfg, train_records, vocab, out_dir=out_dir, eval_every=0)
    model = result.model
    report = {
        "protocol": "control" if control else "zero-shot",
        "alpha": alpha,
        "train": {"species": train_species, "result": evaluate(model, train_records, alpha).to_dict()},
        "test": {"species": test_species, "result": evaluate(model, test_records, alpha).to_dict()},
    }
    if out_dir:
        (Path(out_dir) / "zero_shot.json").write_text(json.dumps(report, indent=2))
    return report


def _colorize(m: np.ndarray, size: int) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    norm = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    u8 = np.round(norm * 255).astype(np.uint8)
    return cv2.applyColorMap(cv2.resize(u8, (size, size), interpolation=cv2.INTER_NEAREST), cv2.COLORMAP_JET)


@torch.no_grad()
def plot_outputs(model, record: InstanceRecord, out_dir, scale: int = 4,
                 limbs: Sequence[tuple[int, int]] = ()) -> list[Path]:
    """Write the skeleton overlay, fused score maps and per-sample score maps as PNGs."""
    if not isinstance(model, PPAPModel):
        model = load_checkpoint(model)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    crop = make_crop(record, model.input_size, model.cfg.data.padding)
    images = torch.from_numpy(crop.image[None]).float()
    model.eval()
    res = model(images, deterministic=True)
    kps = decode_keypoints(res.heatmaps, model.pred_stride)[0].numpy()
    size = model.input_size * scale
    rgb = np.round(np.clip(crop.image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    canvas = cv2.resize(cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR), (size, size), interpolation=cv2.INTER_NEAREST)
    pts = [(int(round(x * scale)), int(round(y * scale))) for x, y, _ in kps]
    for a, b in limbs:
        cv2.line(canvas, pts[a], pts[b], (255, 255, 255), 1)
    for p in pts:
        cv2.circle(canvas, p, 3, (0, 255, 255), -1)
    paths = []

    def write(name, img):
        path = out / name
        if not cv2.imwrite(str(path), img):
            raise OSError(f"failed to write {path}")
        paths.append(path)

    write("overlay.png", canvas)
    score = res.score[0].numpy()
    stack = res.stack[0].numpy()
    for k in range(score.shape[0]):
        write(f"fused_k{k:02d}.png", _colorize(score[k], size))
    for n in range(stack.shape[0]):
        for k in range(stack.shape[1]):
            write(f"sample_s{n:02d}_k{k:02d}.png", _colorize(stack[n, k], size))
    return paths


def overlay_keypoints(model: PPAPModel, record: InstanceRecord) -> np.ndarray:
    """Crop-space keypoints drawn by :func:`plot_outputs` (before display scaling)."""
    crop = make_crop(record, model.input_size, model.cfg.data.padding)
    heat = predict_heatmaps(model, torch.from_numpy(crop.image[None]).float())
    return decode_keypoints(heat, model.pred_stride)[0].numpy()


def smoothed(values: Sequence[float], window: int) -> list[float]:
    """Means of consecutive non-overlapping windows (a trailing partial window is dropped)."""
    n = len(values) // window
    return [float(np.mean(values[i * window:(i + 1) * window])) for i in range(n)]


def is_finite_history(history: Sequence[dict]) -> bool:
    return all(math.isfinite(e["total"]) for e in history)


__all__ = [
    "Crop", "TrainResult", "build_dataset", "build_optimizer", "evaluate", "load_checkpoint",
    "lr_at_epoch", "make_batch", "make_checkpoint", "make_crop", "plot_outputs", "predict_heatmaps",
    "save_checkpoint", "smoothed", "train", "zero_shot_protocol", "FEATURE_STRIDE",
]
