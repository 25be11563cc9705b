"""End-to-end pipeline: shallow features, recurrent refinement, pixel-shuffle
reconstruction, and the Charbonnier + sparsity objective."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import flops
from .attention import IiabParams
from .masking import SATURATION_LOGIT, TAU, MaskPolicy, MaskPredictorParams, sparsity_loss
from .propagation import MaskRecord, Propagator, ScheduleConfig
from .tensor import Tensor, add, apply_op, conv2d, pixel_shuffle, scale

DTYPES = {"float32": np.float32, "float64": np.float64}


class ConfigError(ValueError):
    """A run configuration that cannot describe a model."""


@dataclass(frozen=True)
class ModelConfig:
    scale: int = 4
    channels: int = 32
    window: int = 4
    heads: int = 4
    M: int = 2
    N: int = 4
    skip_interval: int = 2
    ffn_ratio: int = 2
    tau: float = TAU
    lam: float = 5e-4
    mask_threshold: float = 0.5
    handcrafted_threshold: float = 0.2
    charbonnier_eps: float = 1e-3
    global_residual: bool = True
    norm: str = "channel_layernorm"
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        ints = ("scale", "channels", "window", "heads", "M", "N", "skip_interval", "ffn_ratio",
                "seed")
        for name in ints:
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{name} must be an integer, got {v!r}")
        if self.scale not in (2, 3, 4):
            raise ConfigError(f"scale must be 2, 3 or 4, got {self.scale}")
        if self.channels < 1 or self.heads < 1 or self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.window < 1 or self.ffn_ratio < 1:
            raise ConfigError("window and ffn_ratio must be positive")
        try:
            self.schedule
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.tau <= 0 or self.charbonnier_eps <= 0 or self.lam < 0:
            raise ConfigError("tau and charbonnier_eps must be positive, lam non-negative")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
        if not isinstance(self.global_residual, bool):
            raise ConfigError("global_residual must be a boolean")

    @property
    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.M, self.N, self.skip_interval)

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> ModelConfig:
        return dataclasses.replace(self, **kw)

    @classmethod
    def full_scale(cls) -> ModelConfig:
        """The full-size network: 4 modules of 24 blocks, 120 channels, 8x8 windows."""
        return cls(channels=120, window=8, heads=6, M=4, N=24, skip_interval=6)


def _he(rng, shape, fan_in, dtype, gain=1.0):
    return (rng.normal(0.0, gain * np.sqrt(2.0 / fan_in), size=shape)).astype(dtype)


@dataclass
class ModelParams:
    shallow_w: Tensor
    shallow_b: Tensor
    blocks: list  # M lists of N IiabParams
    predictors: list  # M lists of N MaskPredictorParams
    recon_w: Tensor
    recon_b: Tensor

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int | None = None) -> ModelParams:
        seed = cfg.seed if seed is None else seed
        dt = cfg.np_dtype
        rng = np.random.default_rng(seed)
        C, s = cfg.channels, cfg.scale
        blocks = [[IiabParams.init(C, cfg.heads, cfg.window, cfg.ffn_ratio,
                                   seed=[seed, m, n], dtype=dt) for n in range(cfg.N)]
                  for m in range(cfg.M)]
        preds = [[MaskPredictorParams.init(C, dt, cfg.tau) for _ in range(cfg.N)]
                 for _ in range(cfg.M)]
        return cls(
            shallow_w=Tensor(_he(rng, (3, 3, 3, C), 27, dt)),
            shallow_b=Tensor(np.zeros(C, dtype=dt)),
            blocks=blocks,
            predictors=preds,
            # a small reconstruction head starts the output near the upsampled input
            recon_w=Tensor(_he(rng, (3, 3, C, 3 * s * s), 9 * C, dt, gain=1e-3)),
            recon_b=Tensor(np.zeros(3 * s * s, dtype=dt)),
        )

    def named(self) -> dict[str, Tensor]:
        out = {"shallow.weight": self.shallow_w, "shallow.bias": self.shallow_b}
        for m, row in enumerate(self.blocks):
            for n, b in enumerate(row):
                for k, v in b.named().items():
                    out[f"fpm{m}.block{n}.{k}"] = v
                for k, v in self.predictors[m][n].named().items():
                    out[f"fpm{m}.block{n}.mask.{k}"] = v
        out["recon.weight"] = self.recon_w
        out["recon.bias"] = self.recon_b
        return out

    def predictor_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named().items() if ".mask." in k}

    def check(self, cfg: ModelConfig) -> None:
        C, s = cfg.channels, cfg.scale
        if self.shallow_w.shape != (3, 3, 3, C) or self.recon_w.shape != (3, 3, C, 3 * s * s):
            raise ConfigError("parameters do not match the configured channels or scale")
        if len(self.blocks) != cfg.M or any(len(r) != cfg.N for r in self.blocks):
            raise ConfigError("parameters do not match the configured schedule")
        b = self.blocks[0][0]
        if b.heads != cfg.heads or b.rel_table.shape[0] != (2 * cfg.window - 1) ** 2:
            raise ConfigError("parameters do not match the configured heads or window")

    def load_named(self, tensors: dict[str, np.ndarray]) -> None:
        """Overwrite values in place from a name -> array mapping."""
        own = self.named()
        missing = set(own) - set(tensors)
        extra = set(tensors) - set(own)
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch: missing {sorted(missing)[:3]}, "
                              f"unexpected {sorted(extra)[:3]}")
        for k, t in own.items():
            a = np.asarray(tensors[k])
            if a.shape != t.shape:
                raise ConfigError(f"{k}: checkpoint shape {a.shape}, model {t.shape}")
            t.data = a.astype(t.dtype).copy()

    def saturated(self) -> ModelParams:
        """Copy whose mask predictors output a huge logit everywhere (every mask is 1)."""
        preds = [[MaskPredictorParams(Tensor(np.zeros_like(p.weight.data)),
                                      Tensor(np.full_like(p.bias.data, SATURATION_LOGIT)), p.tau)
                  for p in row] for row in self.predictors]
        return dataclasses.replace(self, predictors=preds)


# --- pipeline stages ---------------------------------------------------------------

def shallow_extract(frame: Tensor, params: ModelParams) -> Tensor:
    """One 3x3 convolution from RGB to C channels."""
    if frame.data.ndim != 3 or frame.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 frame, got {frame.dims}")
    return conv2d(frame, params.shallow_w, params.shallow_b)


def _interp_matrix(n: int, s: int) -> np.ndarray:
    # half-pixel centres, edge-clamped: dst i samples src (i + 0.5) / s - 0.5
    src = np.maximum((np.arange(n * s) + 0.5) / s - 0.5, 0.0)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = src - i0
    A = np.zeros((n * s, n))
    np.add.at(A, (np.arange(n * s), i0), 1 - frac)
    np.add.at(A, (np.arange(n * s), i1), frac)
    return A


def bilinear_upsample(img: np.ndarray, s: int) -> np.ndarray:
    """Bilinear x``s`` upsampling of an H x W x c array."""
    H, W, _ = img.shape
    rows = np.tensordot(_interp_matrix(H, s), img, axes=(1, 0))  # sH, W, c
    out = np.tensordot(_interp_matrix(W, s), rows, axes=(1, 1)).transpose(1, 0, 2)
    return out.astype(img.dtype)


def reconstruct(feat: Tensor, lr_frame: Tensor, params: ModelParams, s: int,
                global_residual: bool = True) -> Tensor:
    """Conv to 3s^2 channels, pixel shuffle, plus the upsampled input."""
    y = pixel_shuffle(conv2d(feat, params.recon_w, params.recon_b), s)
    if not global_residual:
        return y
    up = bilinear_upsample(lr_frame.data, s)
    flops.record(elementwise=2 * up.size)
    return add(y, Tensor(up))


def _charbonnier(pred, target, *, eps):
    d = pred - target
    r = np.sqrt((d * d).sum(axis=-1, keepdims=True) + eps * eps)
    n = r.size

    def back(g, needs):
        gp = g * d / (r * n)
        return (gp if needs[0] else None, -gp if needs[1] else None)
    return r.mean(), back


def charbonnier_loss(pred: Tensor, target: Tensor, eps: float = 1e-3) -> Tensor:
    """Mean over pixels of ``sqrt(||pred - target||^2 + eps^2)``, norm over the last axis."""
    if pred.shape != target.shape:
        raise ValueError(f"charbonnier: {pred.dims} vs {target.dims}")
    return apply_op("charbonnier", _charbonnier, [pred, target], eps=eps)


def _stack(frames: list[Tensor]) -> Tensor:
    if len(frames) == 1:
        return frames[0]
    return apply_op("stack", _stack_np, list(frames))


def _stack_np(*xs):
    return np.stack(xs), lambda g, needs: tuple(g[i] for i in range(len(xs)))


@dataclass
class LossBreakdown:
    l_sr: Tensor
    l_mask: Tensor
    total: Tensor
    mean_alpha: float
    lam: float

    def as_floats(self) -> dict[str, float]:
        return {"l_sr": self.l_sr.item(), "l_mask": self.l_mask.item(),
                "total": self.total.item(), "mean_alpha": self.mean_alpha}


def total_loss(pred: list[Tensor], target: list[Tensor], mask_features: list[Tensor], lam: float,
               eps: float = 1e-3, mean_alpha: float = 1.0) -> LossBreakdown:
    """``L = L_sr + lam * L_mask``; without mask features ``L_mask`` is 0."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if len(pred) != len(target):
        raise ValueError(f"{len(pred)} predictions for {len(target)} targets")
    l_sr = charbonnier_loss(_stack(pred), _stack(target), eps)
    if mask_features:
        l_mask = sparsity_loss(mask_features)
    else:
        l_mask = Tensor(np.zeros((), dtype=l_sr.dtype))
    return LossBreakdown(l_sr, l_mask, add(l_sr, scale(l_mask, lam)), mean_alpha, lam)


# --- full sequence -----------------------------------------------------------------

MODES = ("unmasked", "masked", "handcrafted")


@dataclass
class ForwardResult:
    hr: list  # Tensors, sH x sW x 3
    records: list  # MaskRecord per (t, module, block)
    ledger: flops.FlopLedger
    loss: LossBreakdown | None
    state_nbytes: int
    feats: list = field(default_factory=list)

    def masks(self, t: int) -> list[MaskRecord]:
        return [r for r in self.records if r.t == t]

    def frame_alpha(self, t: int) -> float:
        rs = self.masks(t)
        return float(np.mean([r.alpha for r in rs])) if rs else 1.0

    @property
    def mean_alpha(self) -> float:
        return float(np.mean([r.alpha for r in self.records])) if self.records else 1.0


def forward_sequence(frames, cfg: ModelConfig, params: ModelParams, mode: str = "unmasked", *,
                     threshold: float | None = None, targets=None, training: bool = False,
                     rng: np.random.Generator | None = None, saturate: bool = False,
                     mask_override: Callable | None = None, align_policy="identity",
                     ledger: flops.FlopLedger | None = None) -> ForwardResult:
    """Super-resolve a sequence of H x W x 3 frames.

    ``mode`` picks how masks are made; ``saturate`` forces the learned
    predictor to keep every pixel. Losses are computed only when ``targets``
    are given.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if len(frames) == 0:
        raise ValueError("empty sequence")
    params.check(cfg)
    if saturate:
        params = params.saturated()
    dt = cfg.np_dtype
    lr = [f if isinstance(f, Tensor) and f.dtype == dt else
          Tensor(np.asarray(f.data if isinstance(f, Tensor) else f, dtype=dt)) for f in frames]
    shape = lr[0].shape
    if any(f.shape != shape for f in lr) or len(shape) != 3 or shape[2] != 3:
        raise ValueError("frames must all be H x W x 3 with equal dims")
    policy = MaskPolicy(mode=mode,
                        threshold=cfg.handcrafted_threshold if threshold is None else threshold,
                        binarize_at=cfg.mask_threshold, training=training and mode == "masked",
                        norm=cfg.norm, rng=rng, override=mask_override)
    prop = Propagator(params.blocks, params.predictors, cfg.schedule, cfg.window, policy,
                      align_policy)
    ledger = ledger if ledger is not None else flops.FlopLedger()
    with flops.recording(ledger):
        feats = []
        for t, f in enumerate(lr):
            with flops.scope(frame=t, module="shallow", block=-1, kind="conv"):
                feats.append(shallow_extract(f, params))
        refined = prop.propagate_bidirectional(feats)
        hr = []
        for t, (f, x) in enumerate(zip(lr, refined)):
            with flops.scope(frame=t, module="reconstruct", block=-1, kind="conv"):
                hr.append(reconstruct(x, f, params, cfg.scale, cfg.global_residual))
    for t in ledger.frames():
        ledger.check_frame(t)
    result = ForwardResult(hr, prop.records, ledger, None, prop.state.nbytes, refined)
    if targets is not None:
        tg = [Tensor(np.asarray(y.data if isinstance(y, Tensor) else y, dtype=dt)) for y in targets]
        if len(tg) != len(hr) or any(y.shape != hr[0].shape for y in tg):
            raise ValueError("targets must match the output frames")
        soft = [r.decision.soft for r in prop.records if r.decision.soft is not None]
        result.loss = total_loss(hr, tg, soft, cfg.lam, cfg.charbonnier_eps, result.mean_alpha)
    return result
