"""Loss, augmentation, the optimization loop and checkpoint persistence."""

from __future__ import annotations

import base64
import copy
import csv
import hashlib
import io
import json
import logging
import math
import zipfile
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage

from .errors import ChecksumError, ConfigError, FormatError, IncompatibleCheckpointError, TrainingError, ValidationError
from .model import ModelConfig, SwinTempo, Variant
from .preprocess import preprocess_volume
from .volume_io import Dataset, rasterize_annotations

log = logging.getLogger(__name__)

BCE_EPS = 1e-7
CHECKPOINT_FORMAT = "swintempo-checkpoint"
CHECKPOINT_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


# --------------------------------------------------------------------------
# Loss
# --------------------------------------------------------------------------


def bce_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    """Mean per-pixel binary cross-entropy; ``pred`` is clamped to ``[eps, 1 - eps]``."""
    if pred.shape != target.shape:
        raise ValidationError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    p = pred.clamp(eps, 1.0 - eps)
    y = target.to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


# --------------------------------------------------------------------------
# Augmentation
# --------------------------------------------------------------------------


@dataclass
class AugmentConfig:
    """Symmetric sampling ranges; all zero disables augmentation."""

    scale: float = 0.1  # factor drawn from [1 - scale, 1 + scale]
    rotation_deg: float = 10.0
    shear_deg: float = 5.0
    translate_px: float = 4.0
    brightness: float = 0.1  # additive, in standardized intensity units

    @classmethod
    def none(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)

    def is_identity(self) -> bool:
        return not any((self.scale, self.rotation_deg, self.shear_deg, self.translate_px, self.brightness))


@dataclass(frozen=True)
class AffineParams:
    scale: float = 1.0
    rotation_deg: float = 0.0
    shear_deg: float = 0.0
    translate_xy: tuple[float, float] = (0.0, 0.0)
    brightness: float = 0.0

    def matrix(self) -> np.ndarray:
        """Forward 2x2 map on (y, x) coordinates about the image centre."""
        th = math.radians(self.rotation_deg)
        rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        shear = np.array([[1.0, 0.0], [math.tan(math.radians(self.shear_deg)), 1.0]])
        return rot @ shear * self.scale


def sample_affine(rng: np.random.Generator, cfg: AugmentConfig) -> AffineParams:
    u = rng.uniform(-1.0, 1.0, size=6)
    return AffineParams(
        scale=1.0 + cfg.scale * u[0],
        rotation_deg=cfg.rotation_deg * u[1],
        shear_deg=cfg.shear_deg * u[2],
        translate_xy=(cfg.translate_px * u[3], cfg.translate_px * u[4]),
        brightness=cfg.brightness * u[5],
    )


def apply_affine(slices: np.ndarray, target: np.ndarray, params: AffineParams):
    """Warp ``[..., H, W]`` image and mask with the same affine map.

    The image is resampled bilinearly (out-of-field pixels take the image
    minimum), the mask by nearest neighbour so it stays binary. Brightness
    is added to the image only.
    """
    slices = np.asarray(slices)
    target = np.asarray(target)
    A = params.matrix()
    if np.allclose(A, np.eye(2), rtol=0, atol=0) and params.translate_xy == (0.0, 0.0):
        out_s, out_t = slices.copy(), target.copy()
    else:
        H, W = slices.shape[-2:]
        center = np.array([(H - 1) / 2.0, (W - 1) / 2.0])
        t_yx = np.array([params.translate_xy[1], params.translate_xy[0]])
        inv = np.linalg.inv(A)
        offset = center - inv @ (center + t_yx)
        flat_s = slices.reshape(-1, H, W)
        flat_t = target.reshape(-1, H, W)
        out_s = np.stack(
            [ndimage.affine_transform(s, inv, offset, order=1, mode="constant", cval=float(s.min())) for s in flat_s]
        ).reshape(slices.shape)
        out_t = np.stack(
            [ndimage.affine_transform(t, inv, offset, order=0, mode="constant", cval=0) for t in flat_t]
        ).reshape(target.shape)
    if params.brightness:
        out_s = out_s + np.asarray(params.brightness, dtype=out_s.dtype)
    return out_s.astype(slices.dtype, copy=False), out_t.astype(target.dtype, copy=False)


def augment(slices, target, rng: np.random.Generator, cfg: AugmentConfig | None = None):
    """One random affine + brightness shift, applied identically to every slice given."""
    cfg = cfg or AugmentConfig()
    if cfg.is_identity():
        return np.array(slices, copy=True), np.array(target, copy=True)
    return apply_affine(slices, target, sample_affine(rng, cfg))


# --------------------------------------------------------------------------
# Configuration and data
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    variant: Variant = Variant.SWIN_TEMPO
    model_preset: str = "tiny"
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 10
    slices_per_step: int = 4
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    # Only keep windows containing foreground with this probability otherwise; 1.0 keeps all.
    background_window_prob: float = 1.0

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)

    def validate(self) -> "TrainConfig":
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.slices_per_step < 1:
            raise ConfigError("slices_per_step must be >= 1")
        if not 0.0 <= self.background_window_prob <= 1.0:
            raise ConfigError("background_window_prob must lie in [0, 1]")
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig.preset(self.model_preset, self.variant)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d


@dataclass
class TrainingVolume:
    series_id: str
    slices: np.ndarray  # [Z, H, W] float32, preprocessed
    labels: np.ndarray  # [Z, H, W] uint8


def prepare_volumes(ds: Dataset, input_size: int, series_ids: Sequence[str] | None = None) -> list[TrainingVolume]:
    """Preprocess volumes to the model size and rasterize their targets on the same grid."""
    out = []
    for sid in series_ids if series_ids is not None else ds.series_ids:
        vol = preprocess_volume(ds.volumes[sid], ds.masks.get(sid), target=input_size)
        labels = rasterize_annotations(vol.shape, vol.spacing_mm, vol.origin_mm, ds.annotations.get(sid, []))
        out.append(TrainingVolume(sid, vol.voxels.astype(np.float32), labels))
    return out


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


@dataclass
class Checkpoint:
    model_config: ModelConfig
    model_state: dict[str, torch.Tensor]
    optimizer_state: dict | None = None
    train_config: dict | None = None
    epoch: int = 0
    loss: float = float("nan")
    rng_state: dict | None = None
    # (step, epoch, loss) rows of the run that produced this checkpoint; not persisted
    history: list = field(default_factory=list, repr=False, compare=False)

    def build_model(self) -> SwinTempo:
        model = SwinTempo(self.model_config)
        dtypes = {t.dtype for t in self.model_state.values()}
        if dtypes == {torch.float64}:
            model = model.double()
        model.load_state_dict(self.model_state)
        model.eval()
        return model

    @classmethod
    def from_model(cls, model: SwinTempo, **kwargs) -> "Checkpoint":
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(copy.deepcopy(model.cfg), state, **kwargs)


def _tensor_bytes(t: torch.Tensor) -> tuple[bytes, str]:
    arr = t.detach().cpu().numpy()
    if arr.dtype == np.float64:
        dt = "<f8"
    elif arr.dtype == np.float32:
        dt = "<f4"
    elif arr.dtype.kind in "iu":
        dt = "<i8"
    else:
        raise ValidationError(f"unsupported tensor dtype {arr.dtype}")
    return np.ascontiguousarray(arr, dtype=dt).tobytes(), dt


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialize {type(o)}")


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write a single zip archive: ``manifest.json`` plus raw tensor payloads."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, payloads = [], []

    def add(group, name, tensor):
        data, dt = _tensor_bytes(tensor)
        fname = f"tensors/{len(payloads):05d}.bin"
        entries.append(
            {"group": group, "name": name, "shape": list(tensor.shape), "dtype": dt, "file": fname,
             "sha256": hashlib.sha256(data).hexdigest()}
        )
        payloads.append((fname, data))

    for name, t in ckpt.model_state.items():
        add("model", name, t)

    optim_meta = None
    if ckpt.optimizer_state is not None:
        optim_meta = {"param_groups": ckpt.optimizer_state["param_groups"], "state": {}}
        for idx, st in sorted(ckpt.optimizer_state["state"].items()):
            optim_meta["state"][str(idx)] = sorted(st)
            for key, val in sorted(st.items()):
                add("optim", f"{idx}.{key}", torch.as_tensor(val))

    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config,
        "epoch": ckpt.epoch,
        "loss": ckpt.loss if math.isfinite(ckpt.loss) else None,
        "optimizer": optim_meta,
        "rng": ckpt.rng_state,
        "tensors": entries,
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_ZIP_EPOCH)
        zf.writestr(info, json.dumps(manifest, indent=1, default=_json_default, sort_keys=True))
        for fname, data in payloads:
            zf.writestr(zipfile.ZipInfo(fname, date_time=_ZIP_EPOCH), data)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path, expected: ModelConfig | Variant | str | None = None) -> Checkpoint:
    """Read and verify a checkpoint archive.

    ``expected`` (a variant or full model config) guards against loading
    weights into an incompatible model.
    """
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            blobs = {e["file"]: zf.read(e["file"]) for e in manifest.get("tensors", [])}
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, zlib.error) as exc:
        raise ChecksumError(f"{path}: corrupted checkpoint archive ({exc})") from exc
    except FileNotFoundError:
        raise
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a checkpoint archive")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint version {manifest.get('version')} is not supported (expected {CHECKPOINT_VERSION})"
        )
    cfg = ModelConfig.from_dict(manifest["model_config"])
    if expected is not None:
        if isinstance(expected, ModelConfig):
            if expected.to_dict() != cfg.to_dict():
                raise IncompatibleCheckpointError(f"{path}: stored model config differs from the requested one")
        elif Variant(expected) is not cfg.variant:
            raise IncompatibleCheckpointError(
                f"{path}: checkpoint variant {cfg.variant.value} cannot load as {Variant(expected).value}"
            )

    model_state, optim_tensors = {}, {}
    for e in manifest["tensors"]:
        data = blobs[e["file"]]
        if hashlib.sha256(data).hexdigest() != e["sha256"]:
            raise ChecksumError(f"{path}: checksum mismatch for tensor {e['name']}")
        arr = np.frombuffer(data, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        t = torch.from_numpy(arr)
        if e["group"] == "model":
            model_state[e["name"]] = t
        else:
            optim_tensors[e["name"]] = t

    optimizer_state = None
    if manifest.get("optimizer") is not None:
        om = manifest["optimizer"]
        groups = []
        for g in om["param_groups"]:
            g = dict(g)
            if "betas" in g:
                g["betas"] = tuple(g["betas"])
            groups.append(g)
        state = {int(idx): {k: optim_tensors[f"{idx}.{k}"] for k in keys} for idx, keys in om["state"].items()}
        optimizer_state = {"state": state, "param_groups": groups}

    loss = manifest.get("loss")
    return Checkpoint(
        model_config=cfg,
        model_state=model_state,
        optimizer_state=optimizer_state,
        train_config=manifest.get("train_config"),
        epoch=int(manifest.get("epoch", 0)),
        loss=float("nan") if loss is None else float(loss),
        rng_state=manifest.get("rng"),
    )


def checkpoint_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


def _windows(n_slices: int, length: int) -> list[tuple[int, int]]:
    return [(s, min(s + length, n_slices)) for s in range(0, n_slices, length)]


def make_optimizer(model: SwinTempo, cfg: TrainConfig) -> torch.optim.Optimizer:
    # decoupled weight decay: p <- p * (1 - lr * wd) before the Adam update
    return torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)


def train(
    data: Sequence[TrainingVolume],
    cfg: TrainConfig,
    out_dir=None,
    model_config: ModelConfig | None = None,
) -> Checkpoint:
    """Optimize a fresh model on preprocessed volumes; returns the best-loss checkpoint.

    Each volume is consumed in contiguous windows of ``slices_per_step``
    slices. For the temporal variant the loss of a window is backpropagated
    through its unrolled recurrence, and the detached hidden state carries
    into the next window of the same volume.
    """
    cfg.validate()
    if not data:
        raise ValidationError("training needs at least one volume")
    model_config = model_config or cfg.model_config()
    if model_config.variant is not cfg.variant:
        raise ConfigError("model config variant differs from the training variant")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = SwinTempo(model_config)
    model.train()
    opt = make_optimizer(model, cfg)

    out_dir = Path(out_dir) if out_dir is not None else None
    log_rows = []
    best: Checkpoint | None = None
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        for vi in rng.permutation(len(data)):
            vol = data[int(vi)]
            hidden = None
            for lo, hi in _windows(vol.slices.shape[0], cfg.slices_per_step):
                x, y = vol.slices[lo:hi], vol.labels[lo:hi]
                keep = cfg.background_window_prob >= 1.0 or y.any() or rng.random() < cfg.background_window_prob
                if not keep and model.gru is None:
                    continue
                if keep:
                    x, y = augment(x, y, rng, cfg.augment)
                xt = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))[None]
                yt = torch.from_numpy(np.ascontiguousarray(y, dtype=np.float32))[None]
                if not keep:
                    # still advance the recurrent state so later windows see true context
                    with torch.no_grad():
                        _, hidden = model.forward_sequence(xt, hidden, start_index=lo)
                    continue
                logits, hidden = model.forward_sequence(xt, hidden, start_index=lo)
                loss = bce_loss(torch.sigmoid(logits), yt)
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss at step {step} (epoch {epoch}, series {vol.series_id}, slices {lo}..{hi - 1})"
                    )
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                if hidden is not None:
                    hidden = hidden.detach()
                value = float(loss.detach())
                losses.append(value)
                log_rows.append((step, epoch, value))
                step += 1
        epoch_loss = float(np.mean(losses)) if losses else float("nan")
        log.info("epoch %d: mean loss %.6f over %d steps", epoch, epoch_loss, len(losses))
        if best is None or (math.isfinite(epoch_loss) and not epoch_loss >= best.loss):
            best = Checkpoint.from_model(
                model,
                optimizer_state=copy.deepcopy(opt.state_dict()),
                train_config=cfg.to_dict(),
                epoch=epoch,
                loss=epoch_loss,
                rng_state=_rng_snapshot(rng),
            )
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_training_log(log_rows, out_dir / "train_log.csv")
        save_checkpoint(best, out_dir / "checkpoint.zip")
    best.history = log_rows
    return best


def _rng_snapshot(rng: np.random.Generator) -> dict:
    torch_state = torch.get_rng_state().numpy().tobytes()
    return {"numpy": rng.bit_generator.state, "torch": base64.b64encode(torch_state).decode("ascii")}


def write_training_log(rows, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "epoch", "loss"])
        for s, e, l in rows:
            w.writerow([s, e, repr(l)])
