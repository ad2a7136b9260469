"""Training and evaluation harness: run configuration, AdamW with linear
warm-up and cosine decay, checkpointing with bit-exact resume, the evaluation
driver, and the frame-length study.

All randomness (data generation, parameter init, per-epoch sample order) is
derived from the single run seed; the training loop itself is deterministic,
so resuming from a checkpoint replays the uninterrupted run exactly.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import metrics as mt
from . import numerics as nm
from . import synthdata as sd
from .numerics import ContractError, GradTape, Tensor, backward
from .relation import PoseNet, RelationConfig
from .spatial import SpatialConfig

CKPT_SCHEMA_VERSION = 1


class ValidationError(ValueError):
    """Config/dataset mismatch or malformed configuration."""


class NumericError(RuntimeError):
    """A non-finite value appeared during training."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    num_samples: int = 8
    eval_samples: int = 4
    frames: int = 8
    num_joints: int = 17
    num_views: int = 4
    image_size: int = 64
    blob_sigma: float = 2.0
    occlusion_q: float = 0.0


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.001
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValidationError(f"lr must be positive, got {self.lr}")


@dataclass(frozen=True)
class ScheduleConfig:
    epochs: int = 100
    warmup_epochs: int = 20
    checkpoint_every: int = 25
    eval_every: int = 10
    early_stop_pck: float | None = None
    early_stop_mse: float | None = None

    def __post_init__(self):
        if not (0 <= self.warmup_epochs < self.epochs):
            raise ValidationError(
                f"warmup_epochs {self.warmup_epochs} must be < epochs {self.epochs}")


@dataclass(frozen=True)
class EvalConfig:
    pck_alpha: float = 0.05
    oks_sigma: float = 0.05


@dataclass(frozen=True)
class RunConfig:
    spatial: SpatialConfig = field(default_factory=SpatialConfig)
    relation: RelationConfig = field(default_factory=RelationConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    precision: str = "f32"
    seed: int = 0
    ablate_relations: bool = False

    def __post_init__(self):
        if self.precision not in ("f32", "f64"):
            raise ValidationError(f"precision must be f32 or f64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32


_SUBCONFIGS = {
    "spatial": SpatialConfig, "relation": RelationConfig, "data": DataConfig,
    "optimizer": OptimConfig, "schedule": ScheduleConfig, "eval": EvalConfig,
}
_TUPLE_FIELDS = {"image_size", "stage_depths", "stage_dims", "stage_heads"}


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(d: dict) -> RunConfig:
    """Build a RunConfig from a JSON-shaped dict; unknown keys are rejected."""
    d = copy.deepcopy(d)
    top_fields = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(d) - top_fields
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SUBCONFIGS.items():
        if name not in d:
            continue
        sub = d.pop(name)
        sub_fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(sub) - sub_fields
        if unknown:
            raise ValidationError(f"unknown keys in config.{name}: {sorted(unknown)}")
        for k in list(sub):
            if k in _TUPLE_FIELDS and isinstance(sub[k], list):
                sub[k] = tuple(sub[k])
        try:
            kwargs[name] = cls(**sub)
        except (ContractError, ValidationError) as e:
            raise ValidationError(f"config.{name}: {e}") from None
    kwargs.update(d)
    try:
        return RunConfig(**kwargs)
    except (ContractError, ValidationError) as e:
        raise ValidationError(str(e)) from None


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: invalid JSON ({e})") from None
    return config_from_dict(raw)


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------

def adamw_step(params: dict[str, Tensor], grads: dict[str, Tensor],
               moments: dict[str, tuple[np.ndarray, np.ndarray]], t: int,
               lr_t: float, weight_decay: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8):
    """One decoupled-weight-decay Adam update, in place.

    m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2; bias-corrected;
    theta <- theta - lr_t (m_hat / (sqrt(v_hat) + eps) + wd theta).
    """
    if t < 1:
        raise ContractError(f"adamw_step: t must be >= 1, got {t}")
    for name, p in params.items():
        g = grads.get(name)
        gd = np.zeros_like(p.data) if g is None else (
            g.data if isinstance(g, Tensor) else g)
        if gd.shape != p.data.shape:
            raise ValueError(f"{name}: grad shape {gd.shape} vs param {p.data.shape}")
        m, v = moments[name]
        m *= beta1
        m += (1.0 - beta1) * gd
        v *= beta2
        v += (1.0 - beta2) * (gd * gd)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data -= lr_t * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data)


def lr_schedule(epoch_fraction: float, warmup_fraction: float, lr0: float) -> float:
    """Linear warm-up to lr0 followed by cosine decay to zero."""
    if not (0.0 <= warmup_fraction < 1.0):
        raise ContractError(f"warmup fraction {warmup_fraction} outside [0, 1)")
    e = epoch_fraction
    if e < warmup_fraction:
        return lr0 * e / warmup_fraction
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * (e - warmup_fraction)
                                       / (1.0 - warmup_fraction)))


def init_moments(params: dict[str, Tensor]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    return {k: (np.zeros_like(p.data), np.zeros_like(p.data))
            for k, p in params.items()}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, cfg: RunConfig, params: dict[str, Tensor],
                    moments: dict[str, tuple[np.ndarray, np.ndarray]],
                    step: int, epoch: int):
    """manifest.json + params.bin + moments.bin (m block then v block)."""
    os.makedirs(path, exist_ok=True)
    dtype = cfg.dtype
    itemsize = np.dtype(dtype).itemsize
    entries = []
    offset = 0
    for name in params:
        shape = list(params[name].shape)
        entries.append({"name": name, "shape": shape, "offset_bytes": offset})
        offset += int(np.prod(shape)) * itemsize
    manifest = {
        "schema_version": CKPT_SCHEMA_VERSION,
        "config_hash": config_hash(cfg),
        "config": config_to_dict(cfg),
        "step": step,
        "epoch": epoch,
        "dtype": cfg.precision,
        "payload_bytes": offset,
        "params": entries,
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    with open(os.path.join(path, "params.bin"), "wb") as fh:
        for name in params:
            fh.write(np.ascontiguousarray(params[name].data, dtype=dtype).tobytes())
    with open(os.path.join(path, "moments.bin"), "wb") as fh:
        for name in params:
            fh.write(np.ascontiguousarray(moments[name][0], dtype=dtype).tobytes())
        for name in params:
            fh.write(np.ascontiguousarray(moments[name][1], dtype=dtype).tobytes())


def load_checkpoint(path: str) -> dict:
    """Returns manifest plus 'param_data' and 'moment_data' arrays by name."""
    man_path = os.path.join(path, "manifest.json")
    if not os.path.exists(man_path):
        raise ValidationError(f"missing checkpoint manifest: {man_path}")
    with open(man_path) as fh:
        manifest = json.load(fh)
    dtype = np.float64 if manifest["dtype"] == "f64" else np.float32
    itemsize = np.dtype(dtype).itemsize
    payload = np.fromfile(os.path.join(path, "params.bin"), dtype=dtype)
    if payload.size * itemsize != manifest["payload_bytes"]:
        raise ValidationError(
            f"{path}: payload has {payload.size * itemsize} bytes, manifest "
            f"says {manifest['payload_bytes']}")
    mom_payload = np.fromfile(os.path.join(path, "moments.bin"), dtype=dtype)
    if mom_payload.size != 2 * payload.size:
        raise ValidationError(f"{path}: moments.bin size mismatch")
    param_data = {}
    expected_offset = 0
    for entry in manifest["params"]:
        n = int(np.prod(entry["shape"]))
        start = entry["offset_bytes"] // itemsize
        if entry["offset_bytes"] != expected_offset:
            raise ValidationError(
                f"{path}: offsets do not partition the payload at {entry['name']}")
        param_data[entry["name"]] = payload[start:start + n].reshape(entry["shape"]).copy()
        expected_offset += n * itemsize
    if expected_offset != manifest["payload_bytes"]:
        raise ValidationError(f"{path}: payload trailing bytes not covered")
    half = payload.size
    moment_data = {}
    for entry in manifest["params"]:
        n = int(np.prod(entry["shape"]))
        start = entry["offset_bytes"] // itemsize
        moment_data[entry["name"]] = (
            mom_payload[start:start + n].reshape(entry["shape"]).copy(),
            mom_payload[half + start:half + start + n].reshape(entry["shape"]).copy(),
        )
    manifest["param_data"] = param_data
    manifest["moment_data"] = moment_data
    return manifest


def build_model(cfg: RunConfig) -> PoseNet:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    return PoseNet(cfg.spatial, cfg.relation, rng, dtype=cfg.dtype,
                   ablate_relations=cfg.ablate_relations)


def model_from_checkpoint(path: str) -> tuple[PoseNet, RunConfig, dict]:
    manifest = load_checkpoint(path)
    cfg = config_from_dict(manifest["config"])
    model = build_model(cfg)
    params = model.param_dict()
    if set(params) != set(manifest["param_data"]):
        raise ValidationError(f"{path}: parameter names do not match the config")
    for name, data in manifest["param_data"].items():
        if tuple(params[name].shape) != tuple(data.shape):
            raise ValidationError(f"{path}: shape mismatch for {name}")
        params[name].data = data.astype(cfg.dtype)
    return model, cfg, manifest


# ---------------------------------------------------------------------------
# Data plumbing
# ---------------------------------------------------------------------------

def generate_dataset(cfg: RunConfig, out_dir: str, num_samples: int | None = None,
                     seed: int | None = None, occlusion_q: float | None = None):
    d = cfg.data
    samples = sd.make_dataset(
        seed=d.seed if seed is None else seed,
        num_samples=d.num_samples if num_samples is None else num_samples,
        num_frames=d.frames, num_joints=d.num_joints, num_views=d.num_views,
        image_size=d.image_size, blob_sigma=d.blob_sigma,
        occlusion_q=d.occlusion_q if occlusion_q is None else occlusion_q)
    sd.write_dataset(samples, out_dir)


def check_dataset_compatible(cfg: RunConfig, samples: list[sd.PoseSequenceSample]):
    if not samples:
        raise ValidationError("dataset is empty")
    s = samples[0]
    j, v, f = s.skeleton.num_joints, s.num_views, s.skeleton.num_frames
    if j != cfg.relation.num_joints:
        raise ValidationError(f"dataset has {j} joints, config expects "
                              f"{cfg.relation.num_joints}")
    if v != cfg.relation.num_views:
        raise ValidationError(f"dataset has {v} views, config expects "
                              f"{cfg.relation.num_views}")
    if f > cfg.relation.max_frames:
        raise ValidationError(f"dataset has {f} frames, config max_frames is "
                              f"{cfg.relation.max_frames}")
    h, w = cfg.spatial.image_size
    if s.images.shape[2:] != (h, w, 3):
        raise ValidationError(f"dataset images {s.images.shape[2:]} vs config "
                              f"{(h, w, 3)}")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    losses: list[float]
    steps: int
    final_checkpoint: str
    stopped_early: bool
    final_pck: float | None = None
    final_mse: float | None = None


def _quick_2d_metrics(model: PoseNet, samples: list[sd.PoseSequenceSample],
                      pck_alpha: float) -> tuple[float, float]:
    preds, gts = [], []
    for s in samples:
        preds.append(model.forward(s.images).data)
        gts.append(s.gt_2d)
    pred = np.concatenate(preds)
    gt = np.concatenate(gts)
    return mt.pck(pred, gt, alpha=pck_alpha), mt.mse(pred, gt)


def train(cfg: RunConfig, dataset_dir: str, out_dir: str,
          resume: str | None = None, eval_dir: str | None = None,
          log_every: int = 1) -> TrainResult:
    """Run the training loop; writes loss.csv and periodic checkpoints.

    Deterministic given the config seed. Early stopping triggers when both
    schedule.early_stop_pck and early_stop_mse (if set) are met on the eval
    split at an eval_every boundary.
    """
    samples = sd.read_dataset(dataset_dir)
    check_dataset_compatible(cfg, samples)
    eval_samples = samples if eval_dir is None else sd.read_dataset(eval_dir)
    os.makedirs(out_dir, exist_ok=True)

    model = build_model(cfg)
    params = model.param_dict()
    moments = init_moments(params)
    start_epoch = 0
    step = 0
    if resume is not None:
        manifest = load_checkpoint(resume)
        if manifest["config_hash"] != config_hash(cfg):
            raise ValidationError(
                f"checkpoint config hash {manifest['config_hash']} does not "
                f"match run config {config_hash(cfg)}")
        for name, data in manifest["param_data"].items():
            params[name].data = data.astype(cfg.dtype)
        for name, (m, v) in manifest["moment_data"].items():
            moments[name] = (m.astype(cfg.dtype), v.astype(cfg.dtype))
        start_epoch = manifest["epoch"]
        step = manifest["step"]

    sched = cfg.schedule
    opt = cfg.optimizer
    steps_per_epoch = len(samples)
    total_steps = sched.epochs * steps_per_epoch
    warmup_fraction = sched.warmup_epochs / sched.epochs
    loss_rows = []
    stopped = False
    pck_val = mse_val = None

    for epoch in range(start_epoch, sched.epochs):
        order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3, epoch]))
        order = order_rng.permutation(steps_per_epoch)
        for si in order:
            s = samples[si]
            lr_t = lr_schedule(step / total_steps, warmup_fraction, opt.lr)
            with GradTape() as tape:
                loss = model.loss(s.images, s.gt_2d.astype(cfg.dtype))
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise NumericError(f"non-finite loss {loss_val} at step {step}")
            grads = backward(loss, tape)
            adamw_step(params, grads, moments, t=step + 1, lr_t=lr_t,
                       weight_decay=opt.weight_decay, beta1=opt.beta1,
                       beta2=opt.beta2, eps=opt.eps)
            loss_rows.append((step, epoch, loss_val, lr_t))
            step += 1
        done_epoch = epoch + 1
        if done_epoch % sched.checkpoint_every == 0 or done_epoch == sched.epochs:
            save_checkpoint(os.path.join(out_dir, f"ckpt_epoch_{done_epoch:05d}"),
                            cfg, params, moments, step, done_epoch)
        if (sched.early_stop_pck is not None or sched.early_stop_mse is not None) \
                and done_epoch % sched.eval_every == 0:
            pck_val, mse_val = _quick_2d_metrics(model, eval_samples,
                                                 cfg.eval.pck_alpha)
            ok_pck = sched.early_stop_pck is None or pck_val >= sched.early_stop_pck
            ok_mse = sched.early_stop_mse is None or mse_val <= sched.early_stop_mse
            if ok_pck and ok_mse:
                stopped = True
                break

    final = os.path.join(out_dir, "ckpt_final")
    save_checkpoint(final, cfg, params, moments, step, epoch + 1 if stopped
                    else sched.epochs)
    with open(os.path.join(out_dir, "loss.csv"), "w") as fh:
        fh.write("step,epoch,loss,lr\n")
        for row in loss_rows[::log_every]:
            fh.write(f"{row[0]},{row[1]},{row[2]:.10g},{row[3]:.10g}\n")
    return TrainResult(losses=[r[2] for r in loss_rows], steps=step,
                       final_checkpoint=final, stopped_early=stopped,
                       final_pck=pck_val, final_mse=mse_val)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate(model: PoseNet, cfg: RunConfig, dataset_dir: str,
             out_dir: str | None = None,
             use_gt_as_pred: bool = False) -> mt.MetricReport:
    """Full metric suite over a dataset; writes metrics.json and actions.csv
    when out_dir is given. With 3D ground truth present, per-frame predictions
    are triangulated across views for MPJPE / P-MPJPE."""
    samples = sd.read_dataset(dataset_dir)
    check_dataset_compatible(cfg, samples)
    by_action: dict[str, dict[str, list]] = {}
    for s in samples:
        pred = s.gt_2d if use_gt_as_pred else model.forward(s.images).data.astype(np.float64)
        bucket = by_action.setdefault(s.action, {"pred2d": [], "gt2d": [],
                                                 "pred3d": [], "gt3d": []})
        bucket["pred2d"].append(pred)
        bucket["gt2d"].append(s.gt_2d)
        pred3d = mt.triangulate_poses(pred, s.cameras)
        bucket["pred3d"].append(pred3d * 1000.0)
        bucket["gt3d"].append(s.skeleton.joint_positions * 1000.0)

    def compute(bucket) -> dict[str, float]:
        pred2d = np.concatenate(bucket["pred2d"])
        gt2d = np.concatenate(bucket["gt2d"])
        pred3d = np.concatenate(bucket["pred3d"])
        gt3d = np.concatenate(bucket["gt3d"])
        ap, ar = mt.oks_ap_ar(pred2d, gt2d, sigma=cfg.eval.oks_sigma)
        return {
            "AP": ap, "AR": ar,
            "PCK": mt.pck(pred2d, gt2d, alpha=cfg.eval.pck_alpha),
            "MSE": mt.mse(pred2d, gt2d),
            "MPJPE": mt.mpjpe(pred3d, gt3d),
            "P-MPJPE": mt.p_mpjpe(pred3d, gt3d),
        }

    per_action = {a: compute(b) for a, b in sorted(by_action.items())}
    merged = {k: [x for b in by_action.values() for x in b[k]]
              for k in ("pred2d", "gt2d", "pred3d", "gt3d")}
    report = mt.MetricReport(per_action=per_action, overall=compute(merged))
    report.validate()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
            fh.write(report.to_json())
        with open(os.path.join(out_dir, "actions.csv"), "w") as fh:
            fh.write(report.to_csv())
    return report


# ---------------------------------------------------------------------------
# Gradient check entry point
# ---------------------------------------------------------------------------

GRADCHECK_SPATIAL = SpatialConfig(image_size=(32, 32), patch_size=4,
                                  stage_depths=(1, 1), stage_dims=(8, 16),
                                  stage_heads=(2, 2), window=4, out_dim=16,
                                  mlp_ratio=2)
GRADCHECK_RELATION = RelationConfig(token_dim=16, layers=1, heads=2, num_views=2,
                                    num_joints=5, max_frames=2, mlp_ratio=2)


def gradcheck_config() -> RunConfig:
    return RunConfig(spatial=GRADCHECK_SPATIAL, relation=GRADCHECK_RELATION,
                     data=DataConfig(num_samples=1, eval_samples=1, frames=2,
                                     num_joints=5, num_views=2, image_size=32),
                     precision="f64", seed=0)


def gradcheck(cfg: RunConfig | None = None, sample_per_param: int | None = None,
              tol: float = 1e-4,
              h_values: tuple[float, ...] = (1e-5, 1e-3)) -> tuple[bool, dict[str, float]]:
    """Finite-difference check of the full training-loss gradient.

    Runs in double precision on one generated sample. Each parameter's
    analytic gradient is compared against central differences over a step-size
    sweep (near-zero gradients need a coarser step to rise above the float64
    difference-quotient noise); a parameter passes if any step size agrees
    within tol."""
    cfg = gradcheck_config() if cfg is None else cfg
    if cfg.precision != "f64":
        cfg = dataclasses.replace(cfg, precision="f64")
    d = cfg.data
    sample = sd.make_sample(d.seed, d.frames, d.num_joints,
                            cameras=sd.ring_rig(d.num_views),
                            image_size=d.image_size, blob_sigma=d.blob_sigma)
    model = build_model(cfg)
    params = model.param_dict()
    images = sample.images.astype(np.float64)
    gt = sample.gt_2d.astype(np.float64)

    def loss_fn():
        return model.loss(images, gt)

    best: dict[str, float] = {}
    for h in h_values:
        report = nm.finite_diff_check(loss_fn, params, h=h,
                                      sample_per_param=sample_per_param,
                                      rng=np.random.default_rng(0))
        for k, v in report.per_param.items():
            best[k] = min(v, best.get(k, math.inf))
        if max(best.values()) < tol:
            break
    return max(best.values()) < tol, best


# ---------------------------------------------------------------------------
# Frame-length study
# ---------------------------------------------------------------------------

def frame_length_study(cfg: RunConfig, f_list: tuple[int, ...], out_dir: str,
                       total_train_frames: int | None = None,
                       eval_occlusion_q: float = 0.3) -> list[dict]:
    """Train one model per frame length and evaluate on held-out occluded
    sequences generated with a shared seed; emits frame_study.csv with one row
    per frame length (AP / AR / PCK / MSE columns)."""
    os.makedirs(out_dir, exist_ok=True)
    base_total = (total_train_frames if total_train_frames is not None
                  else cfg.data.num_samples * cfg.data.frames)
    eval_total = cfg.data.eval_samples * cfg.data.frames
    rows = []
    for f in f_list:
        n_train = max(1, base_total // f)
        n_eval = max(1, eval_total // f)
        cfg_f = dataclasses.replace(
            cfg,
            data=dataclasses.replace(cfg.data, frames=f, num_samples=n_train,
                                     eval_samples=n_eval),
            relation=dataclasses.replace(
                cfg.relation, max_frames=max(cfg.relation.max_frames, f)))
        run_dir = os.path.join(out_dir, f"frames_{f:03d}")
        train_dir = os.path.join(run_dir, "train_data")
        eval_data_dir = os.path.join(run_dir, "eval_data")
        generate_dataset(cfg_f, train_dir, num_samples=n_train)
        generate_dataset(cfg_f, eval_data_dir, num_samples=n_eval,
                         seed=cfg.data.seed + 77777,
                         occlusion_q=eval_occlusion_q)
        result = train(cfg_f, train_dir, os.path.join(run_dir, "train_out"))
        model, _, _ = model_from_checkpoint(result.final_checkpoint)
        report = evaluate(model, cfg_f, eval_data_dir,
                          out_dir=os.path.join(run_dir, "eval_out"))
        rows.append({"frames": f, "AP": report.overall["AP"],
                     "AR": report.overall["AR"], "PCK": report.overall["PCK"],
                     "MSE": report.overall["MSE"]})
    with open(os.path.join(out_dir, "frame_study.csv"), "w") as fh:
        fh.write("frames,AP,AR,PCK,MSE\n")
        for r in rows:
            fh.write(f"{r['frames']},{r['AP']:.6g},{r['AR']:.6g},"
                     f"{r['PCK']:.6g},{r['MSE']:.6g}\n")
    return rows
