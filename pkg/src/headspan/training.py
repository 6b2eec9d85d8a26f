"""End-to-end optimization: warm-up, formal training, adaptive surfel
densify/prune, basis deactivation checkpoints, evaluation, checkpoints.

Determinism contract: fixed seed and fixed worker count give bit-identical
loss trajectories; saving a checkpoint rounds the live float64 state to
its float32 serialized values, so an interrupted-and-resumed run continues
bit-identically to an uninterrupted one.
"""

import csv
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .basis import PruneLog, PruneSchedule, prune_step
from .data import LoadedDataset
from .encoding import HashGridConfig
from .errors import ContractViolationError, InvalidParameterError
from .losses import (LossWeights, MultiScaleSSIM, consistency_loss,
                     consistency_loss_backward, deform_regularization,
                     deform_regularization_backward, depth_loss,
                     depth_loss_backward, normal_loss, normal_loss_backward,
                     rgb_loss, rgb_loss_backward, ssim_loss,
                     ssim_loss_backward, total_loss)
from .meshrast import rasterize_mesh_depth
from .model import PersonalizedModel
from .networks import MLP, DeformNetworks
from .rendering import GradientBuffer
from .surfels import SurfelSet, activate_opacity, activate_scales
from .template import TemplateModel, evaluate_template

CHECKPOINT_MAGIC = b"HSCK"
CHECKPOINT_VERSION = 1


@dataclass
class LearningRates:
    centers: float = 1.6e-4
    centers_final: float = 1.6e-6
    orientations: float = 1e-3
    log_scales: float = 5e-3
    opacity_logits: float = 5e-2
    color_coeffs: float = 2.5e-3
    fields: float = 1e-3
    fields_final: float = 1e-5

    def to_dict(self):
        return {k: float(getattr(self, k)) for k in (
            "centers", "centers_final", "orientations", "log_scales",
            "opacity_logits", "color_coeffs", "fields", "fields_final")}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass
class DensifyConfig:
    interval: int = 500
    grad_threshold: float = 2e-4
    opacity_prune_threshold: float = 5e-3
    stop_fraction: float = 0.6
    percent_dense: float = 0.01
    split_scale_factor: float = 1.6
    max_multiplier: float = 20.0
    min_divisor: float = 4.0

    def to_dict(self):
        return {k: float(getattr(self, k)) if k != "interval" else int(self.interval)
                for k in ("interval", "grad_threshold",
                          "opacity_prune_threshold", "stop_fraction",
                          "percent_dense", "split_scale_factor",
                          "max_multiplier", "min_divisor")}

    @classmethod
    def from_dict(cls, d):
        return cls(interval=int(d["interval"]),
                   **{k: float(d[k]) for k in d if k != "interval"})


@dataclass
class TrainConfig:
    warmup_iterations: int = 5000
    formal_iterations: int = 30000
    prune_schedule: PruneSchedule = field(default_factory=PruneSchedule)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    learning_rates: LearningRates = field(default_factory=LearningRates)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    hash_config: HashGridConfig = field(default_factory=HashGridConfig)
    num_bases: int = 0            # 0: one per lifestage
    sh_degree: int = 1
    residual_dim: int = 16
    hidden_feature_dim: int = 32
    mlp_width: int = 64
    blend_weight_jitter: float = 0.0
    init_opacity: float = 0.1
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    far_depth: float = 0.0
    seed: int = 0
    checkpoint_interval: int = 1000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15

    def __post_init__(self):
        if self.warmup_iterations < 0 or self.formal_iterations < 0:
            raise InvalidParameterError("iteration counts must be >= 0")

    def to_dict(self) -> dict:
        return {
            "warmup_iterations": self.warmup_iterations,
            "formal_iterations": self.formal_iterations,
            "prune_schedule": self.prune_schedule.to_dict(),
            "loss_weights": self.loss_weights.to_dict(),
            "learning_rates": self.learning_rates.to_dict(),
            "densify": self.densify.to_dict(),
            "hash_config": self.hash_config.to_dict(),
            "num_bases": self.num_bases,
            "sh_degree": self.sh_degree,
            "residual_dim": self.residual_dim,
            "hidden_feature_dim": self.hidden_feature_dim,
            "mlp_width": self.mlp_width,
            "blend_weight_jitter": self.blend_weight_jitter,
            "init_opacity": self.init_opacity,
            "background": list(self.background),
            "far_depth": self.far_depth,
            "seed": self.seed,
            "checkpoint_interval": self.checkpoint_interval,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        kwargs = {}
        for key, sub in (("prune_schedule", PruneSchedule),
                         ("loss_weights", LossWeights),
                         ("learning_rates", LearningRates),
                         ("densify", DensifyConfig),
                         ("hash_config", HashGridConfig)):
            if key in d:
                kwargs[key] = sub.from_dict(d.pop(key))
        if "background" in d:
            d["background"] = tuple(float(x) for x in d.pop("background"))
        kwargs.update(d)
        return cls(**kwargs)

    def config_hash(self) -> str:
        doc = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(doc.encode()).hexdigest()[:16]


def _quantize32(arr: np.ndarray) -> np.ndarray:
    """Round float64 state to its float32-representable value in place."""
    arr[...] = arr.astype(np.float32).astype(np.float64)
    return arr


class Adam:
    """Per-group Adam with optional elementwise freezing."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-15):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t: Dict[str, int] = {}

    def ensure(self, name: str, param: np.ndarray):
        if name not in self.m or self.m[name].shape != param.shape:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
            self.t.setdefault(name, 0)

    def step(self, name: str, param: np.ndarray, grad: np.ndarray,
             lr: float, freeze: Optional[np.ndarray] = None):
        self.ensure(name, param)
        self.t[name] += 1
        t = self.t[name]
        m, v = self.m[name], self.v[name]
        new_m = self.beta1 * m + (1 - self.beta1) * grad
        new_v = self.beta2 * v + (1 - self.beta2) * grad * grad
        if freeze is not None:
            new_m = np.where(freeze, m, new_m)
            new_v = np.where(freeze, v, new_v)
        m[...] = new_m
        v[...] = new_v
        mhat = m / (1 - self.beta1 ** t)
        vhat = v / (1 - self.beta2 ** t)
        upd = lr * mhat / (np.sqrt(vhat) + self.eps)
        if freeze is not None:
            upd = np.where(freeze, 0.0, upd)
        param -= upd

    def remap_surfel_state(self, names, keep_idx: np.ndarray, n_new: int):
        """After densify/prune: survivors keep moments, new rows start at
        zero."""
        for name in names:
            if name not in self.m:
                continue
            old_m, old_v = self.m[name], self.v[name]
            shape = (len(keep_idx) + n_new,) + old_m.shape[1:]
            m = np.zeros(shape)
            v = np.zeros(shape)
            m[:len(keep_idx)] = old_m[keep_idx]
            v[:len(keep_idx)] = old_v[keep_idx]
            self.m[name], self.v[name] = m, v


def exponential_lr(init: float, final: float, frac: float) -> float:
    frac = min(max(frac, 0.0), 1.0)
    return float(init * (final / init) ** frac)


SURFEL_GROUPS = ("centers", "orientations", "log_scales", "opacity_logits",
                 "color_coeffs")


def densify_and_prune(
    surfels: SurfelSet,
    mean_grad_vec: np.ndarray,   # (N, 3) mean positional gradient
    opacities: np.ndarray,       # (N,) activated
    iteration: int,
    cfg: DensifyConfig,
    scene_extent: float,
    initial_count: int,
    formal_iterations: int,
):
    """Clone small / split large surfels whose mean positional gradient
    exceeds the threshold; remove near-transparent surfels. Inactive
    after the configured stop iteration. Returns
    (new SurfelSet, keep_idx, n_new)."""
    n = surfels.count
    keep_idx = np.arange(n)
    if iteration > cfg.stop_fraction * formal_iterations:
        return surfels, keep_idx, 0

    gnorm = np.linalg.norm(mean_grad_vec, axis=-1)
    scales = activate_scales(surfels.log_scales)
    smax = scales.max(axis=1)
    candidates = gnorm > cfg.grad_threshold
    max_count = int(cfg.max_multiplier * initial_count)
    budget = max(0, max_count - n)
    if candidates.sum() > budget:
        order = np.argsort(-gnorm, kind="stable")
        allowed = np.zeros(n, dtype=bool)
        allowed[order[:budget]] = True
        candidates &= allowed
    split_mask = candidates & (smax > cfg.percent_dense * scene_extent)
    clone_mask = candidates & ~split_mask

    new_parts = {k: [] for k in ("centers", "orientations", "log_scales",
                                 "opacity_logits", "color_coeffs")}

    def push(idx, center):
        new_parts["centers"].append(center)
        new_parts["orientations"].append(surfels.orientations[idx])
        new_parts["log_scales"].append(new_ls[idx])
        new_parts["opacity_logits"].append(surfels.opacity_logits[idx])
        new_parts["color_coeffs"].append(surfels.color_coeffs[idx])

    new_ls = surfels.log_scales.copy()
    remove = np.zeros(n, dtype=bool)
    from .geometry import quat_to_rotmat

    R = quat_to_rotmat(
        surfels.orientations
        / np.linalg.norm(surfels.orientations, axis=-1, keepdims=True))
    for i in np.nonzero(clone_mask)[0]:
        g = mean_grad_vec[i]
        gl = np.linalg.norm(g)
        d = -g / gl if gl > 0 else np.zeros(3)
        offset = 0.25 * scales[i].mean() * d
        push(i, surfels.centers[i] + offset)
    for i in np.nonzero(split_mask)[0]:
        axis = 0 if scales[i, 0] >= scales[i, 1] else 1
        direction = R[i][:, axis]
        step = 0.5 * scales[i, axis]
        new_ls[i] = surfels.log_scales[i] - np.log(cfg.split_scale_factor)
        push(i, surfels.centers[i] + step * direction)
        push(i, surfels.centers[i] - step * direction)
        remove[i] = True

    # opacity pruning (keep at least initial/min_divisor surfels)
    low = opacities < cfg.opacity_prune_threshold
    remove |= low
    min_count = max(1, int(initial_count / cfg.min_divisor))
    n_new = len(new_parts["centers"])
    if n - int(remove.sum()) + n_new < min_count:
        # resurrect the highest-opacity removals until the floor holds
        needed = min_count - (n - int(remove.sum()) + n_new)
        victims = np.nonzero(remove)[0]
        order = victims[np.argsort(-opacities[victims], kind="stable")]
        remove[order[:needed]] = False

    keep_idx = np.nonzero(~remove)[0]
    arrays = dict(
        centers=surfels.centers[keep_idx],
        orientations=surfels.orientations[keep_idx],
        log_scales=new_ls[keep_idx],
        opacity_logits=surfels.opacity_logits[keep_idx],
        color_coeffs=surfels.color_coeffs[keep_idx],
    )
    if n_new:
        arrays = {
            "centers": np.concatenate(
                [arrays["centers"], np.asarray(new_parts["centers"])]),
            "orientations": np.concatenate(
                [arrays["orientations"], np.asarray(new_parts["orientations"])]),
            "log_scales": np.concatenate(
                [arrays["log_scales"], np.asarray(new_parts["log_scales"])]),
            "opacity_logits": np.concatenate(
                [arrays["opacity_logits"], np.asarray(new_parts["opacity_logits"])]),
            "color_coeffs": np.concatenate(
                [arrays["color_coeffs"], np.asarray(new_parts["color_coeffs"])]),
        }
    out = SurfelSet(**arrays)
    return out, keep_idx, n_new


class Trainer:
    def __init__(self, model: PersonalizedModel, dataset: LoadedDataset,
                 config: TrainConfig, workdir, rng=None,
                 iteration: int = 0, phase: str = "warmup"):
        self.model = model
        self.dataset = dataset
        self.config = config
        self.workdir = str(workdir)
        os.makedirs(self.workdir, exist_ok=True)
        self.rng = rng or np.random.default_rng(config.seed)
        self.adam = Adam(config.adam_beta1, config.adam_beta2,
                         config.adam_eps)
        self.iteration = iteration      # formal iteration counter
        self.phase = phase
        self.prune_log = PruneLog()
        self.perceptual = MultiScaleSSIM(scales=3)
        self.initial_surfels = model.surfels.count
        n = model.surfels.count
        self.grad_accum = np.zeros((n, 3))
        self.grad_count = np.zeros(n)
        self._mesh_cache: Dict[str, tuple] = {}
        self._log_path = os.path.join(self.workdir, "train_log.csv")
        self._train_pool = dataset.train_frames()
        lo, hi = model.canonical_mesh().bounds()
        self.scene_extent = float((hi - lo).max())
        if not os.path.exists(self._log_path):
            with open(self._log_path, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["phase", "iteration", "rgb", "ssim", "perceptual",
                            "depth", "normal", "consistency", "regulation",
                            "total"])

    # --- logging ---------------------------------------------------------

    def _log(self, phase, iteration, report, total):
        with open(self._log_path, "a", newline="") as f:
            w = csv.writer(f)
            w.writerow([phase, iteration] + [
                format(report[k]["raw"], ".17g") for k in (
                    "rgb", "ssim", "perceptual", "depth", "normal",
                    "consistency", "regulation")] + [format(total, ".17g")])

    # --- per-frame loss --------------------------------------------------

    def _mesh_depth(self, frame_idx):
        rec = self.dataset.frames[frame_idx]
        if rec.frame_id not in self._mesh_cache:
            mesh = evaluate_template(
                self.dataset.template, rec.shape_coeffs,
                rec.expression_coeffs, rec.head_pose)
            depth, region = rasterize_mesh_depth(
                mesh, rec.camera, self.dataset.template.region_labels,
                far=self.config.far_depth)
            self._mesh_cache[rec.frame_id] = (depth, region > 0)
        return self._mesh_cache[rec.frame_id]

    def frame_loss(self, frame_idx: int, phase: str):
        """Forward + analytic backward for one frame. Returns
        (total, report, grads-dict, render output)."""
        cfg = self.config
        rec = self.dataset.frames[frame_idx]
        arrs = self.dataset.arrays(frame_idx)
        out, chain = self.model.render_view(
            rec.camera, rec.lifestage,
            shape_coeffs=rec.shape_coeffs,
            expression_coeffs=rec.expression_coeffs,
            head_pose=rec.head_pose,
            background=cfg.background, far=cfg.far_depth,
            with_grad=True, use_deform=(phase == "formal"))
        w = cfg.loss_weights
        fg = out.alpha > 0.5
        mesh_depth, face_mask = self._mesh_depth(frame_idx)

        v_rgb, c_rgb = rgb_loss(out.color, arrs["image"], arrs["region"], w)
        v_ssim, c_ssim = ssim_loss(out.color, arrs["image"])
        v_perc, c_perc = self.perceptual(out.color, arrs["image"])
        v_depth, c_depth = depth_loss(out.depth, mesh_depth, face_mask)
        v_norm, c_norm = normal_loss(out.normal, arrs["normal"], fg)
        v_cons, c_cons = consistency_loss(out.normal, out.depth, rec.camera,
                                          fg)
        if phase == "formal":
            v_reg, c_reg = deform_regularization(chain["deltas"])
        else:
            v_reg, c_reg = 0.0, None
        terms = {"rgb": v_rgb, "ssim": v_ssim, "perceptual": v_perc,
                 "depth": v_depth, "normal": v_norm, "consistency": v_cons,
                 "regulation": v_reg}
        total, report = total_loss(terms, w, phase)
        if not np.isfinite(total):
            raise ContractViolationError(
                f"non-finite loss at frame {rec.frame_id}: " + json.dumps(
                    {k: report[k]["raw"] for k in report}))

        d_color = rgb_loss_backward(c_rgb)
        d_color = d_color + w.ssim * ssim_loss_backward(c_ssim)
        d_color = d_color + w.perceptual * self.perceptual.backward(c_perc)
        d_depth = w.depth * depth_loss_backward(c_depth)
        d_normal = w.normal * normal_loss_backward(c_norm)
        cn, cd = consistency_loss_backward(c_cons)
        d_normal = d_normal + w.consistency * cn
        d_depth = d_depth + w.consistency * cd
        d_deltas = None
        if phase == "formal" and c_reg is not None:
            d_deltas = deform_regularization_backward(
                c_reg, upstream=w.regulation)
        grads = self.model.render_backward_chain(
            chain, {"color": d_color, "normal": d_normal, "depth": d_depth},
            d_deltas_extra=d_deltas)
        grads["visible"] = np.unique(chain["tape"].surfel_idx)
        return total, report, grads, out

    # --- optimizer application --------------------------------------------

    def _field_lr(self) -> float:
        lr = self.config.learning_rates
        frac = self.iteration / max(self.config.formal_iterations, 1)
        return exponential_lr(lr.fields, lr.fields_final, frac)

    def _apply_surfel_grads(self, gb: GradientBuffer):
        lr = self.config.learning_rates
        frac = self.iteration / max(self.config.formal_iterations, 1)
        s = self.model.surfels
        self.adam.step("centers", s.centers, gb.centers,
                       exponential_lr(lr.centers, lr.centers_final, frac))
        self.adam.step("orientations", s.orientations, gb.orientations,
                       lr.orientations)
        self.adam.step("log_scales", s.log_scales, gb.log_scales,
                       lr.log_scales)
        self.adam.step("opacity_logits", s.opacity_logits, gb.opacity_logits,
                       lr.opacity_logits)
        self.adam.step("color_coeffs", s.color_coeffs, gb.color_coeffs,
                       lr.color_coeffs)
        s.normalize_orientations()

    def _apply_field_grads(self, grads: dict):
        lr = self._field_lr()
        m = self.model
        # blend weights: only the sampled lifestage's row has gradient;
        # inactive basis columns stay frozen
        row_grad = np.zeros_like(m.blend.weights)
        ls = grads["lifestage"]
        row_grad[ls] = grads["blend_row"]
        freeze = np.broadcast_to(~m.bank.active_mask,
                                 m.blend.weights.shape)
        self.adam.step("blend_weights", m.blend.weights, row_grad, lr,
                       freeze=freeze)
        emb_grad = np.zeros_like(m.nets.residual_embeddings)
        emb_grad[ls] = grads["embedding"]
        self.adam.step("residual_embeddings", m.nets.residual_embeddings,
                       emb_grad, lr)
        for i, dt in grads["basis_tables"].items():
            if not m.bank.active_mask[i]:
                continue
            self.adam.step(f"basis{i}_tables", m.bank.bases[i].tables, dt, lr)
        d_ws, d_bs = grads["deform_params"]
        for j, (dw, db) in enumerate(zip(d_ws, d_bs)):
            self.adam.step(f"deform_w{j}", m.nets.deform_mlp.weights[j], dw, lr)
            self.adam.step(f"deform_b{j}", m.nets.deform_mlp.biases[j], db, lr)
        c_ws, c_bs = grads["color_params"]
        for j, (dw, db) in enumerate(zip(c_ws, c_bs)):
            self.adam.step(f"color_w{j}", m.nets.color_mlp.weights[j], dw, lr)
            self.adam.step(f"color_b{j}", m.nets.color_mlp.biases[j], db, lr)

    # --- phases ------------------------------------------------------------

    def warmup(self, iterations: Optional[int] = None):
        """Optimize only the canonical surfels (no basis/network deltas),
        sampling frames uniformly across all lifestages."""
        n = self.config.warmup_iterations if iterations is None else iterations
        for it in range(1, n + 1):
            frame = self.dataset.sample_uniform(self.rng, self._train_pool)
            total, report, grads, _ = self.frame_loss(frame, "warmup")
            self._apply_surfel_grads(grads["surfels"])
            self._log("warmup", it, report, total)
        self.phase = "formal"
        return self.model

    def train_step(self, frame_idx: int):
        """One formal iteration: full chain, optimizer step on every
        learnable group, basis-prune checkpoint, surfel densify/prune."""
        self.iteration += 1
        it = self.iteration
        total, report, grads, out = self.frame_loss(frame_idx, "formal")
        gb: GradientBuffer = grads["surfels"]
        self._apply_surfel_grads(gb)
        self._apply_field_grads(grads)

        vis = grads["visible"]
        self.grad_accum[vis] += gb.centers[vis]
        self.grad_count[vis] += 1

        events_before = len(self.prune_log.events)
        prune_step(self.model.bank, self.model.blend, it,
                   self.config.prune_schedule, log=self.prune_log)
        if len(self.prune_log.events) != events_before:
            self.prune_log.save(os.path.join(self.workdir,
                                             "prune_report.json"))

        dcfg = self.config.densify
        if dcfg.interval > 0 and it % dcfg.interval == 0:
            counts = np.maximum(self.grad_count, 1.0)
            mean_grads = self.grad_accum / counts[:, None]
            opac = activate_opacity(self.model.surfels.opacity_logits)
            new_set, keep_idx, n_new = densify_and_prune(
                self.model.surfels, mean_grads, opac, it, dcfg,
                self.scene_extent, self.initial_surfels,
                self.config.formal_iterations)
            if n_new or len(keep_idx) != self.model.surfels.count:
                self.adam.remap_surfel_state(SURFEL_GROUPS, keep_idx, n_new)
                self.model.surfels = new_set
            self.grad_accum = np.zeros((new_set.count, 3))
            self.grad_count = np.zeros(new_set.count)

        self._log("formal", it, report, total)
        return total

    def train(self, checkpoint_dir: Optional[str] = None):
        """Warm-up (if not yet done) then formal training with periodic
        checkpoints."""
        if self.phase == "warmup":
            self.warmup()
            self.save(os.path.join(self.workdir, "warmup.ckpt"))
        while self.iteration < self.config.formal_iterations:
            frame = self.dataset.sample_uniform(self.rng, self._train_pool)
            self.train_step(frame)
            ci = self.config.checkpoint_interval
            if ci > 0 and self.iteration % ci == 0:
                self.save(os.path.join(self.workdir,
                                       f"iter_{self.iteration:06d}.ckpt"))
        final = os.path.join(self.workdir, "final.ckpt")
        self.save(final)
        self.prune_log.save(os.path.join(self.workdir, "prune_report.json"))
        return final

    # --- evaluation ---------------------------------------------------------

    def evaluate(self, frame_indices: Optional[List[int]] = None):
        return evaluate(self.model, self.dataset,
                        frame_indices or self.dataset.holdout_frames(),
                        background=self.config.background,
                        far=self.config.far_depth)

    # --- checkpointing --------------------------------------------------------

    def save(self, path):
        save_checkpoint(path, self.model, self.adam, self.config,
                        self.iteration, self.phase, self.rng,
                        grad_accum=self.grad_accum,
                        grad_count=self.grad_count,
                        initial_surfels=self.initial_surfels,
                        prune_log=self.prune_log)
        # saving rounds live state to float32; derived trainer state must
        # follow or a resumed run would diverge from this one
        lo, hi = self.model.canonical_mesh().bounds()
        self.scene_extent = float((hi - lo).max())

    @classmethod
    def resume(cls, path, dataset: LoadedDataset, workdir,
               config: Optional[TrainConfig] = None) -> "Trainer":
        ck = load_checkpoint(path)
        if config is not None and config.config_hash() != ck.config_hash:
            raise ContractViolationError(
                f"config hash mismatch: checkpoint {ck.config_hash}, "
                f"requested {config.config_hash()}")
        t = cls(ck.model, dataset, ck.config, workdir, rng=ck.rng,
                iteration=ck.iteration, phase=ck.phase)
        t.adam = ck.adam
        t.grad_accum = ck.extras["grad_accum"]
        t.grad_count = ck.extras["grad_count"]
        t.initial_surfels = int(ck.extras["initial_surfels"])
        t.prune_log = ck.prune_log
        return t


def psnr(pred: np.ndarray, target: np.ndarray, cap: float = 100.0) -> float:
    mse = float(np.mean((np.asarray(pred) - np.asarray(target)) ** 2))
    if mse <= 0:
        return cap
    return min(cap, -10.0 * np.log10(mse))


def evaluate(model: PersonalizedModel, dataset: LoadedDataset,
             frame_indices: List[int], background=(0.0, 0.0, 0.0),
             far: float = 0.0):
    """Render each frame with its recorded controls and compare to ground
    truth. Returns a list of row dicts: one per frame, one per lifestage,
    one overall."""
    rows = []
    per_stage: Dict[int, List[Tuple[float, float]]] = {}
    for idx in frame_indices:
        rec = dataset.frames[idx]
        arrs = dataset.arrays(idx)
        out, _ = model.render_view(
            rec.camera, rec.lifestage, shape_coeffs=rec.shape_coeffs,
            expression_coeffs=rec.expression_coeffs, head_pose=rec.head_pose,
            background=background, far=far, with_grad=False)
        p = psnr(out.color, arrs["image"])
        s = 1.0 - ssim_loss(out.color, arrs["image"])[0]
        rows.append({"kind": "frame", "id": rec.frame_id,
                     "lifestage": rec.lifestage, "psnr": p, "ssim": s})
        per_stage.setdefault(rec.lifestage, []).append((p, s))
    all_pairs = []
    for ls in sorted(per_stage):
        pairs = per_stage[ls]
        all_pairs += pairs
        rows.append({
            "kind": "lifestage", "id": dataset.lifestage_names[ls],
            "lifestage": ls,
            "psnr": float(np.mean([p for p, _ in pairs])),
            "ssim": float(np.mean([s for _, s in pairs]))})
    if all_pairs:
        rows.append({"kind": "overall", "id": "overall", "lifestage": -1,
                     "psnr": float(np.mean([p for p, _ in all_pairs])),
                     "ssim": float(np.mean([s for _, s in all_pairs]))})
    return rows


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["kind", "id", "lifestage", "psnr", "ssim"])
        for r in rows:
            w.writerow([r["kind"], r["id"], r["lifestage"],
                        format(r["psnr"], ".17g"), format(r["ssim"], ".17g")])


# --- checkpoint serialization ---------------------------------------------------


@dataclass
class Checkpoint:
    model: PersonalizedModel
    adam: Adam
    config: TrainConfig
    iteration: int
    phase: str
    rng: np.random.Generator
    config_hash: str
    prune_log: PruneLog
    extras: dict


def _rng_state_to_json(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return {"bit_generator": st["bit_generator"],
            "state": {k: str(v) for k, v in st["state"].items()},
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"])}


def _rng_state_from_json(d: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": d["bit_generator"],
        "state": {k: int(v) for k, v in d["state"].items()},
        "has_uint32": int(d["has_uint32"]),
        "uinteger": int(d["uinteger"]),
    }
    return rng


def _state_blobs(model: PersonalizedModel, adam: Adam, extras: dict):
    """Ordered (name, array, kind) list; kind 'f' float64 state, 'i' int."""
    blobs = []
    t = model.template
    blobs.append(("template/mean_vertices", t.mean_vertices, "f"))
    blobs.append(("template/triangles", t.triangles, "i"))
    blobs.append(("template/shape_basis", t.shape_basis, "f"))
    blobs.append(("template/expression_basis", t.expression_basis, "f"))
    blobs.append(("template/region_labels", t.region_labels, "i"))
    s = model.surfels
    for name in SURFEL_GROUPS:
        blobs.append((f"surfels/{name}", getattr(s, name), "f"))
    for i, b in enumerate(model.bank.bases):
        blobs.append((f"bank/{i}/tables", b.tables, "f"))
    blobs.append(("blend/weights", model.blend.weights, "f"))
    blobs.append(("nets/residual_embeddings",
                  model.nets.residual_embeddings, "f"))
    for j, (w, bb) in enumerate(zip(model.nets.deform_mlp.weights,
                                    model.nets.deform_mlp.biases)):
        blobs.append((f"nets/deform_w{j}", w, "f"))
        blobs.append((f"nets/deform_b{j}", bb, "f"))
    for j, (w, bb) in enumerate(zip(model.nets.color_mlp.weights,
                                    model.nets.color_mlp.biases)):
        blobs.append((f"nets/color_w{j}", w, "f"))
        blobs.append((f"nets/color_b{j}", bb, "f"))
    for name in sorted(adam.m):
        blobs.append((f"adam/m/{name}", adam.m[name], "f"))
        blobs.append((f"adam/v/{name}", adam.v[name], "f"))
    blobs.append(("extras/grad_accum", extras["grad_accum"], "f"))
    blobs.append(("extras/grad_count", extras["grad_count"], "f"))
    return blobs


def save_checkpoint(path, model: PersonalizedModel, adam: Adam,
                    config: TrainConfig, iteration: int, phase: str,
                    rng: np.random.Generator, grad_accum=None,
                    grad_count=None, initial_surfels=None,
                    prune_log: Optional[PruneLog] = None):
    """Single binary file: magic, version, JSON header, float32 blobs.

    Float state is rounded to float32 in place before writing so that a
    resumed run continues bit-identically to an uninterrupted one.
    """
    extras = {
        "grad_accum": grad_accum if grad_accum is not None
        else np.zeros((model.surfels.count, 3)),
        "grad_count": grad_count if grad_count is not None
        else np.zeros(model.surfels.count),
    }
    blobs = _state_blobs(model, adam, extras)
    for name, arr, kind in blobs:
        if kind == "f":
            _quantize32(arr)
    model.invalidate_caches()
    header = {
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "iteration": int(iteration),
        "phase": phase,
        "rng_state": _rng_state_to_json(rng),
        "lifestage_names": model.lifestage_names,
        "sh_degree": model.sh_degree,
        "scene_lo": model.scene_lo.tolist(),
        "scene_hi": model.scene_hi.tolist(),
        "active_mask": model.bank.active_mask.astype(int).tolist(),
        "num_bases": model.bank.size,
        "hash_config": model.bank.config.to_dict(),
        "adam_t": {k: int(v) for k, v in adam.t.items()},
        "initial_surfels": int(initial_surfels
                               if initial_surfels is not None
                               else model.surfels.count),
        "prune_events": [e.to_dict() for e in (prune_log.events
                                               if prune_log else [])],
        "blobs": [{"name": n, "shape": list(a.shape), "kind": k}
                  for n, a, k in blobs],
    }
    hdoc = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(hdoc)))
        f.write(hdoc)
        for name, arr, kind in blobs:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    from .basis import BasisBank, BlendWeights, PruneEvent
    from .encoding import HashGrid

    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise InvalidParameterError(f"{path} is not a checkpoint")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise InvalidParameterError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen].decode())
    off = 12 + hlen
    arrays = {}
    for spec in header["blobs"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off)
        off += 4 * n
        arr = arr.reshape(shape).astype(np.float64)
        if spec["kind"] == "i":
            arr = np.round(arr).astype(np.int32)
        arrays[spec["name"]] = arr

    template = TemplateModel(
        mean_vertices=arrays["template/mean_vertices"],
        triangles=arrays["template/triangles"],
        shape_basis=arrays["template/shape_basis"],
        expression_basis=arrays["template/expression_basis"],
        region_labels=arrays["template/region_labels"],
    )
    surfels = SurfelSet(*[arrays[f"surfels/{n}"] for n in SURFEL_GROUPS])
    cfg = TrainConfig.from_dict(header["config"])
    hash_config = HashGridConfig.from_dict(header["hash_config"])
    bases = [HashGrid(hash_config, arrays[f"bank/{i}/tables"])
             for i in range(int(header["num_bases"]))]
    bank = BasisBank(bases, np.asarray(header["active_mask"], dtype=bool))
    blend = BlendWeights(arrays["blend/weights"])

    def collect(prefix):
        ws, bs = [], []
        j = 0
        while f"nets/{prefix}_w{j}" in arrays:
            ws.append(arrays[f"nets/{prefix}_w{j}"])
            bs.append(arrays[f"nets/{prefix}_b{j}"])
            j += 1
        return MLP(ws, bs)

    emb = arrays["nets/residual_embeddings"]
    deform_mlp = collect("deform")
    color_mlp = collect("color")
    from .surfels import num_sh_coeffs

    nets = DeformNetworks(
        deform_mlp=deform_mlp, color_mlp=color_mlp,
        residual_embeddings=emb,
        sh_coeffs_per_channel=num_sh_coeffs(int(header["sh_degree"])),
        hidden_feature_dim=int(cfg.hidden_feature_dim),
    )
    model = PersonalizedModel(
        surfels=surfels, bank=bank, blend=blend, nets=nets,
        template=template,
        lifestage_names=list(header["lifestage_names"]),
        scene_lo=np.asarray(header["scene_lo"]),
        scene_hi=np.asarray(header["scene_hi"]),
        sh_degree=int(header["sh_degree"]),
    )
    adam = Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    for name, t in header["adam_t"].items():
        adam.t[name] = int(t)
        adam.m[name] = arrays[f"adam/m/{name}"]
        adam.v[name] = arrays[f"adam/v/{name}"]
    prune_log = PruneLog([PruneEvent(int(e["iteration"]), int(e["basis"]),
                                     [float(x) for x in e["lifestage_weights"]])
                          for e in header.get("prune_events", [])])
    return Checkpoint(
        model=model, adam=adam, config=cfg,
        iteration=int(header["iteration"]), phase=header["phase"],
        rng=_rng_state_from_json(header["rng_state"]),
        config_hash=header["config_hash"],
        prune_log=prune_log,
        extras={"grad_accum": arrays["extras/grad_accum"],
                "grad_count": arrays["extras/grad_count"],
                "initial_surfels": header["initial_surfels"]},
    )
