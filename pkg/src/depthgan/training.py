"""Four-phase alternating optimization with per-phase gradient isolation, and checkpoints."""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Callable, Dict, Optional

import numpy as np
import torch

from .camera import RotationSpec
from .config import RunConfig, resolve_config
from .discriminator import SwitchableDiscriminator, depth_to_input
from .generator import DualPathGenerator
from .losses import (
    adversarial_d,
    adversarial_g,
    depth_ce,
    downsample_depth,
    quantize_depth,
    r1_penalty,
    rotation_losses,
    totals,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "depthgan-checkpoint"
CHECKPOINT_VERSION = 1

PHASES = ("adversarial", "rotation_depth", "rotation_rgb", "discriminator")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step, phase, values):
        super().__init__(f"non-finite loss at step {step}, phase '{phase}': {values}")
        self.step = step
        self.phase = phase
        self.values = values


class CheckpointError(RuntimeError):
    pass


def sample_angles(generator: torch.Generator, n: int, theta_range, dtype=torch.float32):
    """Two independent uniform draws per sample from ``theta_range`` (radians)."""
    lo, hi = theta_range
    t1 = lo + (hi - lo) * torch.rand(n, generator=generator, dtype=dtype)
    t2 = lo + (hi - lo) * torch.rand(n, generator=generator, dtype=dtype)
    return t1, t2


class MetricsLog:
    """Append-only ``step<TAB>name<TAB>value`` lines."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "a")

    def write(self, step: int, values: Dict[str, float]):
        for name, value in values.items():
            self._fh.write(f"{step}\t{name}\t{value!r}\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def read_metrics_log(path) -> Dict[str, list]:
    series: Dict[str, list] = {}
    for line in Path(path).read_text().splitlines():
        step, name, value = line.split("\t")
        series.setdefault(name, []).append((int(step), float(value)))
    return series


class Trainer:
    """Owns the networks, their three optimizers, RNG state and the step counter."""

    def __init__(self, cfg: RunConfig, dtype=torch.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.k = cfg.intrinsics()
        seed = cfg.train.seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.G = DualPathGenerator(cfg.generator_config()).to(dtype)
            self.D = SwitchableDiscriminator(cfg.discriminator_config()).to(dtype)
        betas = (cfg.train.beta1, cfg.train.beta2)
        self.opt_depth = torch.optim.Adam(self.G.depth.parameters(), lr=cfg.train.lr, betas=betas, eps=1e-8)
        self.opt_rgb = torch.optim.Adam(self.G.rgb.parameters(), lr=cfg.train.lr, betas=betas, eps=1e-8)
        self.opt_d = torch.optim.Adam(self.D.parameters(), lr=cfg.train.lr, betas=betas, eps=1e-8)
        self.rng = torch.Generator().manual_seed(seed + 1)
        self.data_rng = np.random.default_rng(seed + 2)
        self.step = 0
        self.has_depth_branch = self.D.branch is not None
        if not self.has_depth_branch:
            logger.warning(
                "%dpx discriminator has no depth branch; depth-prediction losses are skipped", cfg.model.resolution
            )
        self._freeze_all()

    # ------------------------------------------------------------------ utils
    def _freeze_all(self):
        self.G.requires_grad_(False)
        self.D.requires_grad_(False)

    def _pivot(self):
        if self.cfg.camera.pivot == "fixed":
            return torch.tensor([0.0, 0.0, self.cfg.camera.pivot_depth], dtype=self.dtype)
        return None

    def _latents(self, n):
        m = self.cfg.model.latent_dim
        z_d = torch.randn(n, m, generator=self.rng, dtype=self.dtype)
        z_rgb = torch.randn(n, m, generator=self.rng, dtype=self.dtype)
        return z_d, z_rgb

    def _theta(self, n):
        lo, hi = self.cfg.theta_range
        return lo + (hi - lo) * torch.rand(n, generator=self.rng, dtype=self.dtype)

    def _d_depth(self, depth):
        return depth_to_input(depth, self.cfg.camera.near, self.cfg.camera.far)

    def _depth_targets(self, depth):
        size = self.D.branch_resolution
        c = self.cfg.camera
        return quantize_depth(downsample_depth(depth, size), self.cfg.model.depth_classes, c.near, c.far)[:, 0]

    @staticmethod
    def _check(step, phase, values):
        bad = {k: v for k, v in values.items() if not math.isfinite(v)}
        if bad:
            raise NonFiniteLossError(step, phase, values)

    # ------------------------------------------------------------------ phases
    def phase_adversarial(self, n):
        """Both generator paths against the frozen discriminator."""
        self.G.requires_grad_(True)
        try:
            z_d, z_rgb = self._latents(n)
            rgb, depth = self.G(z_d, z_rgb, self._theta(n))
            loss = adversarial_g(self.D.score(rgb, self._d_depth(depth)))
            self._check(self.step, PHASES[0], {"g_adv": loss.item()})
            self.opt_depth.zero_grad(set_to_none=True)
            self.opt_rgb.zero_grad(set_to_none=True)
            loss.backward()
            self.opt_depth.step()
            self.opt_rgb.step()
        finally:
            self._freeze_all()
        return {"g_adv": loss.item()}

    def phase_rotation_depth(self, n):
        """Depth path only, on two views of the same codes."""
        self.G.depth.requires_grad_(True)
        try:
            z_d, _ = self._latents(n)
            t1, t2 = sample_angles(self.rng, n, self.cfg.theta_range, self.dtype)
            d1, _ = self.G.depth(z_d, t1)
            d2, _ = self.G.depth(z_d, t2)
            # RGB is irrelevant to the depth term; warp a dummy channel
            dummy = torch.zeros_like(d1).expand(-1, 3, -1, -1)
            spec = RotationSpec(t1, t2, pivot=self._pivot())
            c = self.cfg.camera
            loss_d, _, _ = rotation_losses((dummy, d1), (dummy, d2), self.k, spec, c.near, c.far)
            total = self.cfg.loss.rot_depth * loss_d
            self._check(self.step, PHASES[1], {"rot_depth": loss_d.item()})
            self.opt_depth.zero_grad(set_to_none=True)
            total.backward()
            self.opt_depth.step()
        finally:
            self._freeze_all()
        return {"rot_depth": loss_d.item()}

    def phase_rotation_rgb(self, n):
        """Appearance path only; depth features are computed without a graph."""
        self.G.rgb.requires_grad_(True)
        try:
            z_d, z_rgb = self._latents(n)
            t1, t2 = sample_angles(self.rng, n, self.cfg.theta_range, self.dtype)
            with torch.no_grad():
                d1, psi1 = self.G.depth(z_d, t1)
                d2, psi2 = self.G.depth(z_d, t2)
            rgb1 = self.G.rgb(z_rgb, psi1)
            rgb2 = self.G.rgb(z_rgb, psi2)
            spec = RotationSpec(t1, t2, pivot=self._pivot())
            c = self.cfg.camera
            _, loss_rgb, _ = rotation_losses((rgb1, d1), (rgb2, d2), self.k, spec, c.near, c.far)
            if self.has_depth_branch:
                loss_fdp = depth_ce(self.D.predict_depth(rgb1), self._depth_targets(d1))
            else:
                loss_fdp = rgb1.new_zeros(())
            total = self.cfg.loss.rot_rgb * loss_rgb + self.cfg.loss.fake_depth * loss_fdp
            values = {"rot_rgb": loss_rgb.item(), "fake_depth": loss_fdp.item()}
            self._check(self.step, PHASES[2], values)
            self.opt_rgb.zero_grad(set_to_none=True)
            total.backward()
            self.opt_rgb.step()
        finally:
            self._freeze_all()
        return values

    def phase_discriminator(self, real_rgb, real_depth):
        n = real_rgb.shape[0]
        with torch.no_grad():
            z_d, z_rgb = self._latents(n)
            fake_rgb, fake_depth = self.G(z_d, z_rgb, self._theta(n))
        self.D.requires_grad_(True)
        try:
            real_in = torch.cat([real_rgb, self._d_depth(real_depth)], dim=1).requires_grad_(True)
            real_logits = self.D.score(real_in[:, :3], real_in[:, 3:])
            fake_logits = self.D.score(fake_rgb, self._d_depth(fake_depth))
            loss_adv = adversarial_d(real_logits, fake_logits)
            if self.has_depth_branch:
                loss_rdp = depth_ce(self.D.predict_depth(real_rgb), self._depth_targets(real_depth))
            else:
                loss_rdp = real_logits.new_zeros(())
            loss_r1 = r1_penalty(real_logits, real_in, self.cfg.loss.r1)
            total = loss_adv + self.cfg.loss.real_depth * loss_rdp + loss_r1
            values = {"d_adv": loss_adv.item(), "real_depth": loss_rdp.item(), "r1": loss_r1.item()}
            self._check(self.step, PHASES[3], values)
            self.opt_d.zero_grad(set_to_none=True)
            total.backward()
            self.opt_d.step()
        finally:
            self._freeze_all()
        return values

    def train_step(self, real_rgb, real_depth, phase_hook: Optional[Callable[[str, "Trainer"], None]] = None):
        """Run the four phases in order and return this step's loss values."""
        real_rgb = real_rgb.to(self.dtype)
        real_depth = real_depth.to(self.dtype)
        n = real_rgb.shape[0]
        self.G.train()
        self.D.train()
        values: Dict[str, float] = {}
        if phase_hook:
            phase_hook("start", self)
        for name, run in (
            (PHASES[0], lambda: self.phase_adversarial(n)),
            (PHASES[1], lambda: self.phase_rotation_depth(n)),
            (PHASES[2], lambda: self.phase_rotation_rgb(n)),
            (PHASES[3], lambda: self.phase_discriminator(real_rgb, real_depth)),
        ):
            values.update(run())
            if phase_hook:
                phase_hook(name, self)
        l_gd, l_grgb, l_d = totals({k: torch.tensor(v) for k, v in values.items()}, self.cfg.loss)
        values.update({"L_Gd": l_gd.item(), "L_Grgb": l_grgb.item(), "L_D": l_d.item()})
        self.step += 1
        return values

    def next_batch(self, rgb, depth):
        idx = self.data_rng.choice(rgb.shape[0], size=self.cfg.train.batch_size, replace=False)
        idx = torch.from_numpy(np.sort(idx))
        return rgb[idx], depth[idx]

    def fit(self, rgb, depth, steps: int, log: Optional[MetricsLog] = None, checkpoint_dir=None, callback=None):
        """Train on in-memory tensors for ``steps`` more steps."""
        if rgb.shape[0] < self.cfg.train.batch_size:
            raise ValueError(f"dataset has {rgb.shape[0]} images, fewer than one batch")
        every = self.cfg.train.checkpoint_every
        history = []
        for _ in range(steps):
            values = self.train_step(*self.next_batch(rgb, depth))
            history.append(values)
            if log is not None and self.step % self.cfg.train.log_every == 0:
                log.write(self.step, values)
            if checkpoint_dir is not None and every > 0 and self.step % every == 0:
                save_step_checkpoint(self, checkpoint_dir)
            if callback is not None:
                callback(self, values)
        return history


# ---------------------------------------------------------------------- checkpoints


def _optimizer_tensors(prefix, opt, tensors):
    state = opt.state_dict()
    for idx, pstate in state["state"].items():
        for key, value in pstate.items():
            tensors[f"{prefix}.state.{idx}.{key}"] = value if torch.is_tensor(value) else torch.tensor(value)
    return state["param_groups"]


def _restore_optimizer(prefix, opt, groups, tensors):
    state = {}
    for name, value in tensors.items():
        if not name.startswith(prefix + ".state."):
            continue
        idx, key = name[len(prefix) + 7 :].split(".", 1)
        state.setdefault(int(idx), {})[key] = value
    opt.load_state_dict({"state": state, "param_groups": groups})


def checkpoint_payload(trainer: Trainer):
    tensors = {}
    for name, t in trainer.G.state_dict().items():
        tensors[f"generator.{name}"] = t.clone()
    for name, t in trainer.D.state_dict().items():
        tensors[f"discriminator.{name}"] = t.clone()
    groups = {
        "depth": _optimizer_tensors("optim.depth", trainer.opt_depth, tensors),
        "rgb": _optimizer_tensors("optim.rgb", trainer.opt_rgb, tensors),
        "disc": _optimizer_tensors("optim.disc", trainer.opt_d, tensors),
    }
    tensors["rng.torch"] = trainer.rng.get_state()
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "step": trainer.step,
        "seed": trainer.cfg.train.seed,
        "dtype": str(trainer.dtype).replace("torch.", ""),
        "config": trainer.cfg.to_flat(),
        "optim_groups": groups,
        "numpy_rng": trainer.data_rng.bit_generator.state,
    }
    return {"manifest": manifest, "tensors": tensors}


def save_checkpoint(trainer: Trainer, path) -> None:
    torch.save(checkpoint_payload(trainer), path)


def _read_payload(path):
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unrelated types for bad archives
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    manifest = payload.get("manifest") if isinstance(payload, dict) else None
    if not manifest or manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path} has checkpoint format version {manifest.get('version')!r}; "
            f"this build reads version {CHECKPOINT_VERSION}"
        )
    return payload


def load_checkpoint(path, expected: Optional[RunConfig] = None) -> Trainer:
    """Rebuild a :class:`Trainer` exactly as saved.

    If ``expected`` is given, any difference between it and the stored
    configuration is reported instead of silently loading.
    """
    payload = _read_payload(path)
    manifest, tensors = payload["manifest"], payload["tensors"]
    stored = manifest["config"]
    if expected is not None:
        current = expected.to_flat()
        diff = {k: (stored.get(k), current.get(k)) for k in sorted(set(stored) | set(current)) if stored.get(k) != current.get(k)}
        if diff:
            lines = "\n".join(f"  {k}: checkpoint={a!r} requested={b!r}" for k, (a, b) in diff.items())
            raise CheckpointError(f"checkpoint {path} was written with a different configuration:\n{lines}")
    cfg = resolve_config(overrides={k: v for k, v in stored.items()})
    trainer = Trainer(cfg, dtype=getattr(torch, manifest.get("dtype", "float32")))
    try:
        trainer.G.load_state_dict({k[len("generator.") :]: v for k, v in tensors.items() if k.startswith("generator.")})
        trainer.D.load_state_dict({k[len("discriminator.") :]: v for k, v in tensors.items() if k.startswith("discriminator.")})
        groups = manifest["optim_groups"]
        _restore_optimizer("optim.depth", trainer.opt_depth, groups["depth"], tensors)
        _restore_optimizer("optim.rgb", trainer.opt_rgb, groups["rgb"], tensors)
        _restore_optimizer("optim.disc", trainer.opt_d, groups["disc"], tensors)
    except (RuntimeError, KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} does not match the model it describes: {exc}") from exc
    trainer.rng.set_state(tensors["rng.torch"])
    trainer.data_rng.bit_generator.state = manifest["numpy_rng"]
    trainer.step = int(manifest["step"])
    return trainer


def save_step_checkpoint(trainer: Trainer, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"ckpt-{trainer.step:07d}.pt"
    save_checkpoint(trainer, path)
    (directory / "latest").write_text(path.name + "\n")
    return path


def resolve_checkpoint_path(path) -> Path:
    """Accept a checkpoint file or a directory holding a ``latest`` pointer."""
    p = Path(path)
    if p.is_dir():
        pointer = p / "latest"
        if not pointer.is_file():
            raise CheckpointError(f"{p} has no 'latest' pointer")
        return p / pointer.read_text().strip()
    return p
