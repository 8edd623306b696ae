"""Per-task test-time training of a fresh automaton on a task's train pairs."""
from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import __version__
from .codec import encode_grid
from .dataset import N_RAW_COLORS, Pair, TaskRecord
from .engine import CellularAutomaton, rollout
from .engram import VariantSpec, build_model, get_variant

CHECKPOINT_FORMAT = "arcnca-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 3000
    lr: float = 1e-3
    lr_drop_at: int = 2000
    lr_drop_factor: float = 0.34
    rollout_steps: tuple[int, int] = (64, 96)
    loss_channels: tuple[int, ...] = tuple(range(8))
    seed: int = 0
    patch_mix: float = 0.5
    patches_per_pair: int = 16
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    fire_rate: float = 0.5
    alive_masking: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        self.rollout_steps = tuple(self.rollout_steps)
        self.loss_channels = tuple(self.loss_channels)
        self.betas = tuple(self.betas)
        lo, hi = self.rollout_steps
        if not 0 <= lo <= hi:
            raise ValueError(f"bad rollout_steps {self.rollout_steps}")
        if not self.loss_channels or min(self.loss_channels) < 0 or max(self.loss_channels) > 49:
            raise ValueError("loss_channels must be a non-empty subset of 0..49")
        if not 0.0 <= self.patch_mix <= 1.0:
            raise ValueError("patch_mix must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("rollout_steps", "loss_channels", "betas"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


def task_seed(global_seed: int, task_id: str) -> int:
    """Seed derived from (global seed, task id); independent of scheduling order."""
    digest = hashlib.sha256(f"{global_seed}:{task_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def learning_rate(cfg: TrainConfig, iteration: int) -> float:
    return cfg.lr * cfg.lr_drop_factor if iteration >= cfg.lr_drop_at else cfg.lr


def is_patch_iteration(iteration: int, patch_mix: float) -> bool:
    # spreads round(iterations * patch_mix) patch iterations evenly; 0.5 alternates
    return math.floor((iteration + 1) * patch_mix) > math.floor(iteration * patch_mix)


def _channel_index(loss_channels: Sequence[int]):
    ch = list(loss_channels)
    if ch == list(range(ch[0], ch[-1] + 1)):
        return slice(ch[0], ch[-1] + 1)
    return ch


def pixelwise_mse(state: torch.Tensor, target: torch.Tensor, loss_channels: Sequence[int] = tuple(range(8)), per_sample: bool = False) -> torch.Tensor:
    """Mean squared error over height, width and ``loss_channels`` of NCHW tensors."""
    if state.shape[0] != target.shape[0] or state.shape[2:] != target.shape[2:]:
        raise ValueError(f"shape mismatch {tuple(state.shape)} vs {tuple(target.shape)}")
    idx = _channel_index(loss_channels)
    sq = (state[:, idx] - target[:, idx]) ** 2
    return sq.mean(dim=(1, 2, 3)) if per_sample else sq.mean()


def sample_patches(h: int, w: int, count: int, rng: np.random.Generator, size: int = 3) -> np.ndarray:
    """Top-left corners of ``count`` uniformly drawn ``size`` x ``size`` windows."""
    rows = rng.integers(0, h - size + 1, size=count)
    cols = rng.integers(0, w - size + 1, size=count)
    return np.stack([rows, cols], axis=1)


def patch_loss(state: torch.Tensor, target: torch.Tensor, patches, loss_channels: Sequence[int] = tuple(range(8)), size: int = 3) -> torch.Tensor:
    """Per-sample mean over patches of the MSE restricted to each patch.

    ``patches`` holds top-left corners, shaped ``(P, 2)`` (shared by the batch)
    or ``(B, P, 2)``.
    """
    idx = _channel_index(loss_channels)
    per_pixel = ((state[:, idx] - target[:, idx]) ** 2).mean(dim=1, keepdim=True)
    window_means = F.avg_pool2d(per_pixel, size, stride=1)[:, 0]  # (B, H-size+1, W-size+1)
    patches = torch.as_tensor(np.asarray(patches), dtype=torch.long)
    b = state.shape[0]
    if patches.dim() == 2:
        patches = patches.unsqueeze(0).expand(b, -1, -1)
    batch = torch.arange(b).unsqueeze(1).expand(-1, patches.shape[1])
    return window_means[batch, patches[..., 0], patches[..., 1]].mean(dim=1)


def normalize_gradients(parameters) -> None:
    """Scale every parameter's gradient to unit L2 norm (zero gradients stay zero)."""
    for p in parameters:
        if p.grad is None:
            continue
        norm = p.grad.norm()
        if norm > 0:
            p.grad.div_(norm)


def to_tensor(lattice: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """``(H, W, C)`` or ``(B, H, W, C)`` array to an NCHW tensor."""
    t = torch.as_tensor(np.asarray(lattice), dtype=dtype)
    if t.dim() == 3:
        t = t.unsqueeze(0)
    return t.permute(0, 3, 1, 2).contiguous()


def to_lattice(x: torch.Tensor) -> np.ndarray:
    """NCHW tensor (batch of one) to an ``(H, W, C)`` array."""
    return x.detach()[0].permute(1, 2, 0).cpu().numpy()


def encode_pairs(pairs: Sequence[Pair], n_colors: int, channels: int, dtype) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Group same-shaped pairs into batched (input, target) tensors, in first-seen order."""
    groups: dict[tuple, list[Pair]] = {}
    for p in pairs:
        if p.input.shape != p.output.shape:
            raise TrainingError("pair input/output sizes differ; filter or pad the task first")
        groups.setdefault(p.input.shape, []).append(p)
    out = []
    for members in groups.values():
        x = np.stack([encode_grid(p.input, n_colors, channels) for p in members])
        y = np.stack([encode_grid(p.output, n_colors, channels) for p in members])
        out.append((to_tensor(x, dtype), to_tensor(y, dtype)))
    return out


def palette_size(task: TaskRecord) -> int:
    top = max(int(g.max()) for p in task.pairs for g in (p.input, p.output))
    return N_RAW_COLORS + 1 if top >= N_RAW_COLORS else N_RAW_COLORS


@dataclass
class TrainedModel:
    spec: VariantSpec
    model: CellularAutomaton
    config: TrainConfig
    n_colors: int = N_RAW_COLORS
    train_log: list[float] = field(default_factory=list)
    final_loss: float = float("nan")
    wall_time_seconds: float = 0.0
    iterations: int = 0


def train_task(
    task: TaskRecord,
    spec: VariantSpec | str,
    cfg: TrainConfig | None = None,
    *,
    n_colors: Optional[int] = None,
    channels: Optional[int] = None,
    log_path: str | Path | None = None,
    callback: Optional[Callable[[int, float], None]] = None,
) -> TrainedModel:
    """Train a freshly initialised automaton on ``task.train_pairs``.

    Each iteration rolls every train input out for a random step count, takes
    the pixelwise MSE of the final state against the encoded output (or the
    patch loss on v4 patch iterations), backpropagates through time, scales
    each parameter gradient to unit norm and applies AdamW. The learning rate
    drops once at ``cfg.lr_drop_at``.
    """
    cfg = cfg or TrainConfig()
    spec = get_variant(spec) if isinstance(spec, str) else spec
    if not task.train_pairs:
        raise TrainingError(f"{task.task_id}: no train pairs")
    if task.size_changing:
        raise TrainingError(f"{task.task_id}: size-changing task; filter or pad it first")
    n_colors = n_colors or palette_size(task)
    channels = channels or spec.channels
    dtype = cfg.torch_dtype

    model = build_model(spec, cfg.seed, fire_rate=cfg.fire_rate, alive_masking=cfg.alive_masking, channels=channels).to(dtype)
    generator = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    groups = encode_pairs(task.train_pairs, n_colors, channels, dtype)
    n_pairs = len(task.train_pairs)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)

    log_file = None
    if log_path:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "w")
    train_log: list[float] = []
    start = time.perf_counter()
    lo, hi = cfg.rollout_steps
    try:
        for it in range(cfg.iterations):
            lr = learning_rate(cfg, it)
            for group in optimizer.param_groups:
                group["lr"] = lr
            steps = int(rng.integers(lo, hi + 1))
            use_patches = spec.patch_training and is_patch_iteration(it, cfg.patch_mix)

            loss = torch.zeros((), dtype=dtype)
            for x, y in groups:
                out = rollout(model, x, steps, generator)
                h, w = y.shape[2:]
                if use_patches and h >= 3 and w >= 3:
                    corners = np.stack([sample_patches(h, w, cfg.patches_per_pair, rng) for _ in range(x.shape[0])])
                    per_pair = patch_loss(out, y, corners, cfg.loss_channels)
                else:
                    per_pair = pixelwise_mse(out, y, cfg.loss_channels, per_sample=True)
                loss = loss + per_pair.sum()
            loss = loss / n_pairs

            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingError(f"{task.task_id}/{spec.name}: non-finite loss {value} at iteration {it} (steps={steps})")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            normalize_gradients(model.parameters())
            optimizer.step()

            train_log.append(value)
            if log_file:
                log_file.write(
                    json.dumps(
                        {
                            "iter": it,
                            "loss": value,
                            "log_loss": math.log(value) if value > 0 else None,
                            "lr": lr,
                            "wall_ms": round((time.perf_counter() - start) * 1000.0, 3),
                        }
                    )
                    + "\n"
                )
            if callback:
                callback(it, value)
    finally:
        if log_file:
            log_file.close()

    final = final_train_loss(model, groups, hi, generator, cfg.loss_channels)
    return TrainedModel(
        spec=spec,
        model=model,
        config=cfg,
        n_colors=n_colors,
        train_log=train_log,
        final_loss=final,
        wall_time_seconds=time.perf_counter() - start,
        iterations=cfg.iterations,
    )


@torch.no_grad()
def final_train_loss(model, groups, steps, generator, loss_channels) -> float:
    """Mean per-pair MSE from a fresh rollout of every train pair."""
    total, count = 0.0, 0
    for x, y in groups:
        out = rollout(model, x, steps, generator)
        total += float(pixelwise_mse(out, y, loss_channels, per_sample=True).sum())
        count += x.shape[0]
    return total / count


def save_checkpoint(trained: TrainedModel, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "toolkit_version": __version__,
        "variant": trained.spec.name,
        "spec": trained.spec.to_dict(),
        "config": trained.config.to_dict(),
        "seed": trained.config.seed,
        "iterations": trained.iterations,
        "n_colors": trained.n_colors,
        "channels": trained.model.channels,
        "final_loss": trained.final_loss,
        "wall_time_seconds": trained.wall_time_seconds,
        "train_log": list(trained.train_log),
        "state_dict": {k: v.detach().cpu() for k, v in trained.model.state_dict().items()},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> TrainedModel:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an arcnca checkpoint")
    if payload["version"] > CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {payload['version']} is newer than supported {CHECKPOINT_VERSION}")
    spec_d = dict(payload["spec"])
    spec_d["hidden"] = tuple(spec_d["hidden"])
    spec = VariantSpec(**spec_d)
    cfg = TrainConfig.from_dict(payload["config"])
    model = build_model(spec, payload["seed"], fire_rate=cfg.fire_rate, alive_masking=cfg.alive_masking, channels=payload["channels"])
    model = model.to(cfg.torch_dtype)
    model.load_state_dict(payload["state_dict"])
    return TrainedModel(
        spec=spec,
        model=model,
        config=cfg,
        n_colors=payload["n_colors"],
        train_log=list(payload["train_log"]),
        final_loss=payload["final_loss"],
        wall_time_seconds=payload["wall_time_seconds"],
        iterations=payload["iterations"],
    )
