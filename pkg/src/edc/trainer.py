"""Teacher-student training: deterministic AdamW optimization of the shared
architecture, plus the binary checkpoint format (bit-exact round trips).

The teacher sees (SAR, cloud-free optical) and trains with segmentation +
reconstruction only. The student sees (SAR, cloudy optical); the frozen
teacher runs per batch on cloud-free inputs and supervises the student's
decoded cross-modal features on clear pixels.
"""

import json
import math
import os
from dataclasses import dataclass, asdict, replace

import numpy as np
import torch

from . import objectives
from .model import EdcModel, ModelConfig, PROBE_CM_DECODER_OUT
from .objectives import LossWeights, MaskSet

CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class TrainConfig:
    # optimization
    lr: float = 3e-4
    weight_decay: float = 1e-4
    batch_size: int = 8
    steps: int = 2000
    seed: int = 0
    # loss weights
    beta: float = 1.0
    gamma: float = 1.0
    lam: float = 5.0
    p: float = 0.45
    eps: float = 1e-3
    # architecture
    num_classes: int = 5
    sar_pols: int = 2
    widths: tuple = (32, 64, 128, 256)
    window: int = 2
    heads: int = 4
    conv_depth: int = 1
    attn_depth: int = 1
    c_d: int = 32
    fusion: str = "dchf"
    stem_seed: int = 42

    def loss_weights(self):
        return LossWeights(beta=self.beta, gamma=self.gamma, lam=self.lam,
                           p=self.p, eps=self.eps)

    def model_config(self):
        return ModelConfig(
            num_classes=self.num_classes, sar_pols=self.sar_pols,
            widths=tuple(self.widths), window=self.window, heads=self.heads,
            conv_depth=self.conv_depth, attn_depth=self.attn_depth,
            c_d=self.c_d, fusion=self.fusion, stem_seed=self.stem_seed,
            init_seed=self.seed)

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return cls(**d)


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict; the moment
    state is part of the checkpoint, so resume is bit-exact."""

    def __init__(self, params, lr, weight_decay, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: torch.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: torch.zeros_like(v) for k, v in self.params.items()}

    @torch.no_grad()
    def step(self):
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            p.mul_(1.0 - self.lr * self.weight_decay)
            self.m[name].mul_(b1).add_(g, alpha=1.0 - b1)
            self.v[name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (self.v[name] / bc2).sqrt_().add_(self.eps)
            p.addcdiv_(self.m[name] / bc1, denom, value=-self.lr)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def batch_indices(seed, step, dataset_size, batch_size):
    """Stateless per-step batch selection; resume-safe by construction."""
    rng = np.random.default_rng(np.random.PCG64((seed + 1) * 1_000_003 + step))
    replace_ = dataset_size < batch_size
    return rng.choice(dataset_size, size=batch_size, replace=replace_)


def collate(samples, indices):
    """Stack dataset samples into float64 [B, C, H, W] tensors."""
    pick = [samples[i] for i in indices]
    def stack(name, dtype):
        arrs = [getattr(s, name) for s in pick]
        t = torch.from_numpy(np.stack(arrs))
        return t.to(dtype)
    opt_cloudy = stack("cloudy_opt", torch.float64).permute(0, 3, 1, 2)
    opt_clean = stack("cloudfree_opt", torch.float64).permute(0, 3, 1, 2)
    sar = stack("sar", torch.float64).permute(0, 3, 1, 2)
    labels = stack("labels", torch.int64)
    cloud = stack("cloudmask", torch.int64)
    return opt_cloudy, opt_clean, sar, labels, cloud


def _loss_teacher(model, batch, w):
    _, opt_clean, sar, labels, cloud = batch
    out = model(opt_clean, sar)
    masks = MaskSet.from_labels(labels, cloud)
    l_seg = objectives.seg_loss(out.logits, labels, masks)
    # teacher reconstructs its own clean input; cloudy reweighting disabled
    l_cr = objectives.cr_loss(out.recon, opt_clean, torch.zeros_like(cloud),
                              replace(w, lam=0.0))
    return objectives.total_loss(l_seg, l_cr, torch.zeros((), dtype=l_seg.dtype),
                                 replace(w, gamma=0.0)), out


def _loss_student(model, teacher, batch, w):
    opt_cloudy, opt_clean, sar, labels, cloud = batch
    with torch.no_grad():
        t_out = teacher(opt_clean, sar)
    out = model(opt_cloudy, sar)
    masks = MaskSet.from_labels(labels, cloud)
    l_seg = objectives.seg_loss(out.logits, labels, masks)
    l_cr = objectives.cr_loss(out.recon, opt_clean, cloud, w)
    l_kd = objectives.kd_loss(out.probes[PROBE_CM_DECODER_OUT],
                              t_out.probes[PROBE_CM_DECODER_OUT].detach(), masks)
    return objectives.total_loss(l_seg, l_cr, l_kd, w), out


def _run_training(model, loss_fn, samples, cfg, start_step=0, optimizer=None,
                  log_every=0):
    if optimizer is None:
        optimizer = AdamW(dict(model.named_parameters()), cfg.lr,
                          cfg.weight_decay)
    history = []
    for step in range(start_step, cfg.steps):
        idx = batch_indices(cfg.seed, step, len(samples), cfg.batch_size)
        batch = collate(samples, idx)
        optimizer.zero_grad()
        loss, _ = loss_fn(model, batch)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"training diverged at step {step}: "
                                     f"loss={float(loss.detach())}")
        loss.backward()
        optimizer.step()
        history.append(float(loss.detach()))
        if log_every and (step + 1) % log_every == 0:
            print(f"step {step + 1}/{cfg.steps} loss {history[-1]:.5f}")
    return model, optimizer, history


def train_teacher(samples, cfg, start_step=0, model=None, optimizer=None,
                  log_every=0):
    """Train the cloud-free teacher (seg + CR losses; no distillation)."""
    if model is None:
        model = EdcModel(cfg.model_config())
    w = cfg.loss_weights()
    fn = lambda m, b: _loss_teacher(m, b, w)
    return _run_training(model, fn, samples, cfg, start_step, optimizer,
                         log_every)


def train_student(samples, teacher, cfg, start_step=0, model=None,
                  optimizer=None, log_every=0):
    """Train the student on cloudy inputs with the frozen teacher."""
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    if model is None:
        model = EdcModel(cfg.model_config())
    w = cfg.loss_weights()
    fn = lambda m, b: _loss_student(m, teacher, b, w)
    return _run_training(model, fn, samples, cfg, start_step, optimizer,
                         log_every)


# ---------------------------------------------------------------------------
# Checkpoint format: manifest.json + one little-endian binary64 blob per
# tensor (parameters and both optimizer moments), plus the step counter and a
# config echo.

def save_checkpoint(model, optimizer, cfg, step, out_dir, role="teacher"):
    os.makedirs(out_dir, exist_ok=True)
    tensors = {}
    for name, p in model.named_parameters():
        tensors[f"param/{name}"] = p
    if optimizer is not None:
        for name in optimizer.m:
            tensors[f"adam_m/{name}"] = optimizer.m[name]
            tensors[f"adam_v/{name}"] = optimizer.v[name]
    entries = {}
    for key, t in tensors.items():
        fname = key.replace("/", "__").replace(".", "_") + ".bin"
        arr = t.detach().cpu().numpy().astype("<f8")
        arr.tofile(os.path.join(out_dir, fname))
        entries[key] = {"file": fname, "shape": list(t.shape), "dtype": "float64"}
    manifest = {
        "version": CHECKPOINT_VERSION,
        "role": role,
        "step": step,
        "adam_step": optimizer.step_count if optimizer is not None else 0,
        "config": cfg.to_dict(),
        "tensors": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)


def _read_blob(in_dir, meta, key):
    path = os.path.join(in_dir, meta["file"])
    if not os.path.exists(path):
        raise CheckpointError(f"missing blob for '{key}': {path}")
    shape = tuple(meta["shape"])
    expected = int(np.prod(shape)) * 8
    if os.path.getsize(path) != expected:
        raise CheckpointError(f"blob length mismatch for '{key}': {path}")
    return torch.from_numpy(np.fromfile(path, dtype="<f8").reshape(shape))


def load_checkpoint(in_dir, cfg=None):
    """Load a checkpoint; returns (model, optimizer, cfg, step, role).

    If `cfg` is given it must match the checkpointed architecture; otherwise
    the config echo in the manifest is used.
    """
    path = os.path.join(in_dir, "manifest.json")
    try:
        with open(path) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint manifest not found: {path}")
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint manifest: {e}")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {manifest.get('version')!r}")
    saved_cfg = TrainConfig.from_dict(manifest["config"])
    cfg = cfg or saved_cfg
    model = EdcModel(cfg.model_config())
    entries = manifest["tensors"]
    optimizer = AdamW(dict(model.named_parameters()), cfg.lr, cfg.weight_decay)
    optimizer.step_count = manifest.get("adam_step", 0)
    with torch.no_grad():
        for name, p in model.named_parameters():
            key = f"param/{name}"
            if key not in entries:
                raise CheckpointError(f"checkpoint missing parameter '{name}'")
            t = _read_blob(in_dir, entries[key], key)
            if tuple(t.shape) != tuple(p.shape):
                raise CheckpointError(
                    f"shape mismatch for '{name}': checkpoint "
                    f"{tuple(t.shape)} vs model {tuple(p.shape)}")
            p.copy_(t)
            for store, prefix in ((optimizer.m, "adam_m"), (optimizer.v, "adam_v")):
                k = f"{prefix}/{name}"
                if k in entries:
                    store[name].copy_(_read_blob(in_dir, entries[k], k))
    return model, optimizer, cfg, manifest["step"], manifest.get("role")
