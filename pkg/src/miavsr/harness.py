"""Experiment plumbing behind the CLI: each runner returns bytes or rows so
it can be tested without touching argv."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import flops
from .formats import (MetricsRow, dump_json, encode_miat, encode_pgm, load_checkpoint,
                      mask_filename, metrics_csv, read_json, save_checkpoint)
from .masking import BlockMask
from .metrics import psnr, ssim
from .model import MODES, ConfigError, ModelConfig, ModelParams, forward_sequence
from .synthetic import SyntheticSpec, gen_synthetic
from .training import train


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    mode: str = "unmasked"

    @classmethod
    def from_dict(cls, d) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        d = dict(d)
        mode = d.pop("mode", "unmasked")
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        return cls(ModelConfig.from_dict(d), mode)

    def to_dict(self) -> dict:
        return {**self.model.to_dict(), "mode": self.mode}


def load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig(ModelConfig())
    try:
        return RunConfig.from_dict(read_json(path))
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from None
    except ValueError as e:
        raise ConfigError(str(e)) from None


def load_params(cfg: ModelConfig, checkpoint=None) -> ModelParams:
    params = ModelParams.init(cfg)
    if checkpoint is not None:
        _, tensors = load_checkpoint(checkpoint)
        params.load_named(tensors)
    return params


# --- gen -------------------------------------------------------------------------------

def run_gen(spec: SyntheticSpec, out_dir) -> tuple[list, list]:
    lr, hr = gen_synthetic(spec)
    out = Path(out_dir)
    for sub, frames in (("lr", lr), ("hr", hr)):
        (out / sub).mkdir(parents=True, exist_ok=True)
        for t, f in enumerate(frames):
            (out / sub / f"frame_{t:04d}.miat").write_bytes(encode_miat(f))
    return lr, hr


# --- infer -----------------------------------------------------------------------------

def network_flops(ledger: flops.FlopLedger, t: int) -> int:
    """Frame FLOPs of the network itself; the mask predictor's overhead is excluded."""
    total = ledger.frame_total(t)
    return total - ledger.select(frame=t, kinds=("mask_predictor",)).flops


@dataclass
class InferOutput:
    rows: list
    files: dict  # relative path -> bytes

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        for rel, data in sorted(self.files.items()):
            p = out / rel
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_bytes(data)


def run_infer(cfg: ModelConfig, params: ModelParams, lr, hr=None, mode: str = "unmasked",
              threshold: float | None = None, saturate: bool = False, dump_masks: bool = False,
              dump_frames: bool = False) -> InferOutput:
    res = forward_sequence(lr, cfg, params, mode, threshold=threshold, saturate=saturate)
    rows = []
    for t, y in enumerate(res.hr):
        if hr is not None:
            p, s = psnr(y.data, hr[t]), ssim(np.clip(y.data, 0, 1), hr[t])
        else:
            p = s = 0.0
        rows.append(MetricsRow(t, p, s, network_flops(res.ledger, t), res.frame_alpha(t)))
    files = {"metrics.csv": metrics_csv(rows)}
    if dump_masks:
        for r in res.records:
            name = mask_filename(r.t, r.module, r.block)
            files[f"masks/{name}"] = encode_pgm(r.decision.hard.values)
    if dump_frames:
        for t, y in enumerate(res.hr):
            files[f"frames/hr_{t:04d}.miat"] = encode_miat(y.data)
    return InferOutput(rows, files)


# --- train -----------------------------------------------------------------------------

def run_train(run: RunConfig, params: ModelParams, lr, hr, steps: int, learning_rate: float,
              out_dir, seed: int = 0) -> bytes:
    mode = run.mode if run.mode != "handcrafted" else "unmasked"
    log = train(run.model, params, lr, hr, steps, learning_rate, mode=mode, seed=seed)
    out = Path(out_dir)
    save_checkpoint(out / "checkpoint", run.to_dict(),
                    {k: v.data for k, v in params.named().items()})
    curve = log.csv()
    (out / "loss_curve.csv").write_bytes(curve)
    return curve


# --- flops -----------------------------------------------------------------------------

def random_mask(H: int, W: int, alpha: float, rng: np.random.Generator) -> BlockMask:
    """Exactly ``round(alpha * H * W)`` ones at random positions."""
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    v = np.zeros(H * W, dtype=np.uint8)
    v[rng.permutation(H * W)[:int(round(alpha * H * W))]] = 1
    return BlockMask(v.reshape(H, W))


def forced_alpha_override(alpha: float, seed: int):
    def override(t, m, n, H, W):
        return random_mask(H, W, alpha, np.random.default_rng([seed, t, m, n]))
    return override


def flops_report(cfg: ModelConfig, params: ModelParams, H: int, W: int, T: int = 3,
                 alpha: float | None = None, mode: str = "unmasked", seed: int = 0):
    """Per-block analytic vs instrumented costs for one forward on random frames.

    With ``alpha`` every block that has a cache gets a random mask of exactly
    that density; blocks at the start of a traversal always run in full.
    """
    rng = np.random.default_rng(seed)
    frames = [rng.random((H, W, 3)).astype(cfg.np_dtype) for _ in range(T)]
    override = forced_alpha_override(alpha, seed) if alpha is not None else None
    res = forward_sequence(frames, cfg, params, mode, mask_override=override)
    alphas = {(r.t, f"fpm{r.module}", r.block): Fraction(r.decision.hard.ones_count, H * W)
              for r in res.records}
    rows = flops.instrumented_vs_analytic(res.ledger, H, W, cfg.channels, cfg.window, alphas)
    return rows, res


def config_bytes(run: RunConfig) -> bytes:
    return dump_json(run.to_dict())
