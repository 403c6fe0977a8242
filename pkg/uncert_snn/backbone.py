"""
Desk-scale hierarchical spiking transformer.

Stage 1 opens with a spiking patch embedding, later stages with a linear
"patch embedding stage" (2x2 token grouping when downsampling). Every stage
then runs a stack of spike-driven self-attention (SSA) blocks. Activations
between layers are binary; only logits and evidence are real-valued.
"""
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import toml

from .custom_logging import setup_logging
from .efficiency import AV_COUNTING_CHOICES, AV_STRUCTURAL, SopLedger, count_attention, count_linear
from .errors import ConfigurationError, ShapeError
from .neuron import LifParams, LifState, lif_sequence_array
from .presets import FIRING_RATE_BAND
from .tensor_core import (
    DenseTensor,
    SpikeTensor,
    quantize_to_grid,
    read_tensor,
    spike_rows_matmul,
    write_tensor,
)

log = setup_logging()

MANIFEST_NAME = "manifest.toml"


@dataclass(frozen=True)
class StageConfig:
    channels: int
    blocks: int = 1
    downsample: int = 1

    def __post_init__(self):
        if self.channels < 1 or self.blocks < 1:
            raise ConfigurationError(f"stage needs channels >= 1 and blocks >= 1, got {self}")
        if self.downsample not in (1, 2):
            raise ConfigurationError(f"downsample factor must be 1 or 2, got {self.downsample}")


@dataclass(frozen=True)
class ModelConfig:
    """
    Shape and initialisation of the spiking transformer.

    image_size and patch give the token grid (image_size / patch per side).
    static_input=True means one input frame (T_0 = 1) repeated over the T
    steps; otherwise the input carries T event frames. attn_shift=None derives
    the right-shift applied to A*V from each stage's token count.
    init_rate is the firing rate every spiking layer is calibrated to when the
    weights are drawn. residual_scale weights the block input where it
    re-enters the output LIF as current; at or below v_th * (1 - tau) the
    residual alone cannot make a neuron fire within a few steps, so block
    outputs follow attention.
    """

    steps: int = 4
    stages: Tuple[StageConfig, ...] = (StageConfig(32, 1, 1), StageConfig(64, 2, 1))
    num_classes: int = 4
    lif: LifParams = LifParams()
    seed: int = 0
    in_channels: int = 2
    image_size: int = 8
    patch: int = 1
    static_input: bool = False
    attn_shift: Optional[int] = None
    init_rate: float = 0.15
    residual_scale: float = 0.4
    av_counting: str = AV_STRUCTURAL

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.stages:
            raise ConfigurationError("at least one stage is required")
        if self.in_channels < 1 or self.patch < 1 or self.image_size < 1:
            raise ConfigurationError("in_channels, patch and image_size must be positive")
        if self.image_size % self.patch:
            raise ConfigurationError(f"image size {self.image_size} is not divisible by patch {self.patch}")
        if self.attn_shift is not None and self.attn_shift < 0:
            raise ConfigurationError("attn_shift must be >= 0")
        if not 0.0 < self.init_rate <= 1.0:
            raise ConfigurationError("init_rate must lie in (0, 1]")
        if self.residual_scale < 0:
            raise ConfigurationError(f"residual_scale must be >= 0, got {self.residual_scale}")
        if self.av_counting not in AV_COUNTING_CHOICES:
            raise ConfigurationError(f"av_counting must be one of {AV_COUNTING_CHOICES}")
        side = self.image_size // self.patch
        for s, stage in enumerate(self.stages, 1):
            if s > 1 and stage.downsample == 2:
                if side % 2:
                    raise ConfigurationError(f"stage {s} cannot halve a {side}x{side} token grid")
                side //= 2
            elif s == 1 and stage.downsample != 1:
                raise ConfigurationError("stage 1 is shaped by the patch size; its downsample must be 1")

    @property
    def input_steps(self) -> int:
        return 1 if self.static_input else self.steps

    def stage_sides(self) -> List[int]:
        side = self.image_size // self.patch
        sides = []
        for s, stage in enumerate(self.stages, 1):
            if s > 1 and stage.downsample == 2:
                side //= 2
            sides.append(side)
        return sides

    def stage_tokens(self) -> List[int]:
        return [side * side for side in self.stage_sides()]

    @property
    def head_dim(self) -> int:
        return self.stages[-1].channels

    def block_ids(self) -> List[str]:
        return [f"{s}.{b}" for s, stage in enumerate(self.stages, 1) for b in range(stage.blocks)]

    def parse_block_id(self, block_id: str) -> Tuple[int, int]:
        """'s.b' (1-based stage, 0-based block) -> (stage index, block index), both 0-based."""
        try:
            stage_text, block_text = str(block_id).split(".")
            stage, block = int(stage_text), int(block_text)
        except ValueError:
            raise ConfigurationError(f"block id '{block_id}' is not of the form stage.block")
        if not 1 <= stage <= len(self.stages) or not 0 <= block < self.stages[stage - 1].blocks:
            raise ConfigurationError(f"block id '{block_id}' does not exist; choose from {self.block_ids()}")
        return stage - 1, block

    def shift_for(self, stage_index: int) -> int:
        if self.attn_shift is not None:
            return self.attn_shift
        n = self.stage_tokens()[stage_index]
        d = self.stages[stage_index].channels
        expected = n * d * self.init_rate**3
        return max(0, int(math.floor(math.log2(expected)))) if expected > 1 else 0

    def to_manifest(self) -> Dict[str, object]:
        manifest = {
            "steps": self.steps,
            "num_classes": self.num_classes,
            "seed": self.seed,
            "tau": self.lif.tau,
            "v_th": self.lif.v_th,
            "in_channels": self.in_channels,
            "image_size": self.image_size,
            "patch": self.patch,
            "static_input": self.static_input,
            "init_rate": self.init_rate,
            "residual_scale": self.residual_scale,
            "av_counting": self.av_counting,
            "stage_channels": [s.channels for s in self.stages],
            "stage_blocks": [s.blocks for s in self.stages],
            "stage_downsample": [s.downsample for s in self.stages],
        }
        if self.attn_shift is not None:
            manifest["attn_shift"] = self.attn_shift
        return manifest

    @classmethod
    def from_manifest(cls, manifest: Dict[str, object]) -> "ModelConfig":
        try:
            channels = manifest["stage_channels"]
            blocks = manifest.get("stage_blocks", [1] * len(channels))
            downsample = manifest.get("stage_downsample", [1] * len(channels))
            if not len(channels) == len(blocks) == len(downsample):
                raise ConfigurationError("stage lists in the manifest differ in length")
            return cls(
                steps=int(manifest["steps"]),
                stages=tuple(StageConfig(int(c), int(b), int(d)) for c, b, d in zip(channels, blocks, downsample)),
                num_classes=int(manifest["num_classes"]),
                lif=LifParams(float(manifest.get("tau", 0.5)), float(manifest.get("v_th", 1.0))),
                seed=int(manifest.get("seed", 0)),
                in_channels=int(manifest.get("in_channels", 2)),
                image_size=int(manifest.get("image_size", 8)),
                patch=int(manifest.get("patch", 1)),
                static_input=bool(manifest.get("static_input", False)),
                attn_shift=int(manifest["attn_shift"]) if "attn_shift" in manifest else None,
                init_rate=float(manifest.get("init_rate", 0.15)),
                residual_scale=float(manifest.get("residual_scale", 0.4)),
                av_counting=str(manifest.get("av_counting", AV_STRUCTURAL)),
            )
        except KeyError as e:
            raise ConfigurationError(f"model manifest is missing key {e}") from e


@dataclass(frozen=True)
class EmbedWeights:
    """Patch (or stage) projection [fan_in, D] and an optional positional bias [N, D]."""

    w: DenseTensor
    pos: Optional[DenseTensor] = None


@dataclass(frozen=True)
class SsaBlockWeights:
    w_q: DenseTensor
    w_k: DenseTensor
    w_v: DenseTensor
    w_proj: DenseTensor
    lif: LifParams = LifParams()
    shift: int = 0
    residual_scale: float = 0.4

    def __post_init__(self):
        if self.residual_scale < 0:
            raise ConfigurationError(f"residual_scale must be >= 0, got {self.residual_scale}")
        d = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_proj"):
            if getattr(self, name).shape.dims != (d, d):
                raise ShapeError(f"{name} must be square [{d},{d}], got {getattr(self, name).shape}")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    def new_state(self, shape) -> LifState:
        return LifState(self.lif, shape)


@dataclass(frozen=True)
class HeadWeights:
    w: DenseTensor
    b: DenseTensor

    def __post_init__(self):
        if self.w.shape.rank != 2 or self.b.shape.dims != (self.w.shape[1],):
            raise ShapeError(f"head needs w [D,C] and b [C], got {self.w.shape} and {self.b.shape}")

    @property
    def dim(self) -> int:
        return self.w.shape[0]

    @property
    def num_classes(self) -> int:
        return self.w.shape[1]


class Reduction(Protocol):
    """Token reduction hook run in place of one SSA block."""

    insert_block: str

    def apply(
        self,
        model: "SpikingTransformer",
        x: np.ndarray,
        weights: SsaBlockWeights,
        ledger: SopLedger,
        label: str,
        sample_ids: np.ndarray,
    ) -> np.ndarray:
        ...


@dataclass
class SpikingTransformer:
    config: ModelConfig
    embeds: List[EmbedWeights]
    blocks: List[List[SsaBlockWeights]]
    head: Optional[HeadWeights] = None
    # weight gain per spiking layer, keyed by its ledger label
    gains: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def build(cls, config: ModelConfig, calibrate: bool = True) -> "SpikingTransformer":
        """
        Draw deterministic weights for config.seed.

        Each linear map starts from zero-mean normal weights scaled so a typical
        pre-activation has standard deviation v_th / 2 when its binary input
        fires at config.init_rate. With calibrate=True every spiking layer then
        gets a quarter-octave gain, chosen in forward order on a seeded
        Bernoulli(init_rate) batch, that brings its firing rate closest to
        init_rate (see calibrate_gains). All weights are rounded onto the
        dyadic grid after the gain is applied.
        """
        rng = np.random.default_rng(np.random.SeedSequence(config.seed))
        v_th = config.lif.v_th
        rate = config.init_rate

        def draw(fan_in: int, fan_out: int, std: float) -> np.ndarray:
            return rng.standard_normal((fan_in, fan_out)) * std

        raw_embeds = []
        raw_blocks = []
        sides = config.stage_sides()
        prev = config.in_channels * config.patch * config.patch
        for s, stage in enumerate(config.stages):
            fan_in = prev if s == 0 else prev * (4 if stage.downsample == 2 else 1)
            w = draw(fan_in, stage.channels, 0.5 * v_th / math.sqrt(max(rate * fan_in, 1e-6)))
            pos = None
            if s == 0:
                # below v_th * (1 - tau) a constant bias alone never reaches threshold
                limit = 0.9 * v_th * (1.0 - config.lif.tau)
                n_tokens = sides[0] * sides[0]
                pos = DenseTensor(
                    quantize_to_grid(rng.uniform(-limit, limit, size=(n_tokens, stage.channels))), copy=False
                )
            raw_embeds.append((w, pos))

            d = stage.channels
            n_tokens = sides[s] * sides[s]
            mean_y = max(1.0, n_tokens * d * rate**3 / 2 ** config.shift_for(s))
            qkv_std = 0.5 * v_th / math.sqrt(rate * d)
            proj_std = 0.5 * v_th / (math.sqrt(d) * mean_y)
            raw_blocks.append(
                [
                    {
                        "q": draw(d, d, qkv_std),
                        "k": draw(d, d, qkv_std),
                        "v": draw(d, d, qkv_std),
                        "out": draw(d, d, proj_std),
                    }
                    for _ in range(stage.blocks)
                ]
            )
            prev = stage.channels

        gains = calibrate_gains(config, raw_embeds, raw_blocks) if calibrate else {}

        def scaled(raw: np.ndarray, label: str) -> DenseTensor:
            return DenseTensor(quantize_to_grid(raw * gains.get(label, 1.0)), copy=False)

        embeds = [EmbedWeights(w=scaled(w, f"s{s}.embed"), pos=pos) for s, (w, pos) in enumerate(raw_embeds, 1)]
        blocks = [
            [
                SsaBlockWeights(
                    w_q=scaled(raw["q"], f"s{s}.b{b}.q"),
                    w_k=scaled(raw["k"], f"s{s}.b{b}.k"),
                    w_v=scaled(raw["v"], f"s{s}.b{b}.v"),
                    w_proj=scaled(raw["out"], f"s{s}.b{b}.out"),
                    lif=config.lif,
                    shift=config.shift_for(s - 1),
                    residual_scale=config.residual_scale,
                )
                for b, raw in enumerate(stage_raw)
            ]
            for s, stage_raw in enumerate(raw_blocks, 1)
        ]
        log.debug(f"Built spiking transformer with stages {[s.channels for s in config.stages]} (seed {config.seed})")
        return cls(config=config, embeds=embeds, blocks=blocks, gains=gains)

    def with_head(self, head: HeadWeights) -> "SpikingTransformer":
        if head.dim != self.config.head_dim or head.num_classes != self.config.num_classes:
            raise ShapeError(
                f"head [{head.dim},{head.num_classes}] does not fit model "
                f"[{self.config.head_dim},{self.config.num_classes}]"
            )
        return replace(self, head=head)

    def block(self, block_id: str) -> SsaBlockWeights:
        s, b = self.config.parse_block_id(block_id)
        return self.blocks[s][b]

    def save(self, directory: Union[str, Path]) -> None:
        """Write manifest.toml plus one SPKT file per weight tensor."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        manifest = self.config.to_manifest()
        manifest["has_head"] = self.head is not None
        if self.gains:
            manifest["gains"] = dict(self.gains)
        with open(out / MANIFEST_NAME, "w", encoding="utf-8", newline="\n") as f:
            toml.dump(manifest, f)
        for name, tensor in self._named_tensors():
            write_tensor(out / f"{name}.spkt", tensor)
        log.info(f"Saved model to {out}")

    def _named_tensors(self):
        for s, embed in enumerate(self.embeds, 1):
            yield f"s{s}.embed.w", embed.w
            if embed.pos is not None:
                yield f"s{s}.embed.pos", embed.pos
        for s, stage_blocks in enumerate(self.blocks, 1):
            for b, block in enumerate(stage_blocks):
                for name in ("w_q", "w_k", "w_v", "w_proj"):
                    yield f"s{s}.b{b}.{name}", getattr(block, name)
        if self.head is not None:
            yield "head.w", self.head.w
            yield "head.b", self.head.b

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "SpikingTransformer":
        src = Path(directory)
        manifest_path = src / MANIFEST_NAME
        if not manifest_path.is_file():
            raise ConfigurationError(f"no {MANIFEST_NAME} in {src}")
        manifest = toml.load(manifest_path)
        config = ModelConfig.from_manifest(manifest)
        model = cls.build(config, calibrate=False)
        model.gains = {str(k): float(v) for k, v in manifest.get("gains", {}).items()}

        def dense(name: str) -> DenseTensor:
            tensor = read_tensor(src / f"{name}.spkt")
            if not isinstance(tensor, DenseTensor):
                raise ConfigurationError(f"{name} must be stored as float32")
            return tensor

        model.embeds = [
            EmbedWeights(w=dense(f"s{s}.embed.w"), pos=dense(f"s{s}.embed.pos") if e.pos is not None else None)
            for s, e in enumerate(model.embeds, 1)
        ]
        model.blocks = [
            [
                SsaBlockWeights(
                    *(dense(f"s{s}.b{b}.{name}") for name in ("w_q", "w_k", "w_v", "w_proj")),
                    lif=config.lif,
                    shift=block.shift,
                    residual_scale=config.residual_scale,
                )
                for b, block in enumerate(stage_blocks)
            ]
            for s, stage_blocks in enumerate(model.blocks, 1)
        ]
        if manifest.get("has_head", False):
            model = model.with_head(HeadWeights(w=dense("head.w"), b=dense("head.b")))
        log.info(f"Loaded model from {src}")
        return model


# --- raw-array kernels --------------------------------------------------------


def _is_binary(x: np.ndarray) -> bool:
    return x.dtype == np.uint8 or bool(np.all((x == 0) | (x == 1)))


def _linear(x: np.ndarray, w: DenseTensor, ledger: Optional[SopLedger], label: str) -> np.ndarray:
    """x [..., K] times w [K, P]; spikes credit spike-accumulates, reals credit dense MACs."""
    flat = x.reshape(-1, x.shape[-1])
    nnz = int(np.count_nonzero(flat))
    if _is_binary(flat):
        out = spike_rows_matmul(flat.astype(np.uint8, copy=False), w.data)
        if ledger is not None:
            ledger.credit(label, spike_accumulates=count_linear(nnz, w.shape[1]))
    else:
        # fixed ascending-k order keeps real-valued (merged) inputs reproducible
        weights = w.data.astype(np.float64)
        acc = np.zeros((flat.shape[0], weights.shape[1]), dtype=np.float64)
        for k in range(flat.shape[1]):
            acc += flat[:, k, None].astype(np.float64) * weights[k]
        out = acc.astype(np.float32)
        if ledger is not None:
            ledger.credit(label, dense_macs=count_linear(nnz, w.shape[1]))
    return out.reshape(x.shape[:-1] + (w.shape[1],))


def _fire(params: LifParams, current: np.ndarray, ledger: Optional[SopLedger], label: str) -> np.ndarray:
    spikes = lif_sequence_array(params, current)
    if ledger is not None:
        ledger.record_firing(label, int(np.count_nonzero(spikes)), spikes.size)
    return spikes


def _patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    t, b, n, h, w = frames.shape
    grid = frames.reshape(t, b, n, h // patch, patch, w // patch, patch)
    # token order h*W + w, patch vector ordered (channel, dy, dx)
    grid = grid.transpose(0, 1, 3, 5, 2, 4, 6)
    return np.ascontiguousarray(grid).reshape(t, b, (h // patch) * (w // patch), n * patch * patch)


def embed_array(
    frames: np.ndarray,
    patch: int,
    weights: EmbedWeights,
    params: LifParams,
    steps: int,
    ledger: Optional[SopLedger] = None,
    label: str = "s1.embed",
) -> np.ndarray:
    t0 = frames.shape[0]
    if t0 not in (1, steps):
        raise ShapeError(f"input carries {t0} steps; expected 1 (static) or {steps}")
    tokens = _patchify(frames.astype(np.float32, copy=False), patch)
    current = _linear(tokens, weights.w, None, label)
    if ledger is not None:
        # static input drives every simulation step with the same projection
        ops = count_linear(int(np.count_nonzero(tokens)) * (steps // t0), weights.w.shape[1])
        if _is_binary(tokens):
            ledger.credit(label, spike_accumulates=ops)
        else:
            ledger.credit(label, dense_macs=ops)
    if t0 == 1 and steps > 1:
        current = np.repeat(current, steps, axis=0)
    if weights.pos is not None:
        if weights.pos.shape.dims != (current.shape[2], current.shape[3]):
            raise ShapeError(f"positional bias {weights.pos.shape} does not match {current.shape[2:]} tokens")
        current = current + weights.pos.data[None, None]
    return _fire(params, current, ledger, label)


def transition_array(
    x: np.ndarray,
    side: int,
    downsample: int,
    weights: EmbedWeights,
    params: LifParams,
    ledger: Optional[SopLedger] = None,
    label: str = "embed",
) -> np.ndarray:
    t, b, n, d = x.shape
    if downsample == 2:
        grid = x.reshape(t, b, side // 2, 2, side // 2, 2, d).transpose(0, 1, 2, 4, 3, 5, 6)
        x = np.ascontiguousarray(grid).reshape(t, b, (side // 2) ** 2, 4 * d)
    current = _linear(x, weights.w, ledger, label)
    return _fire(params, current, ledger, label)


def ssa_array(
    x: np.ndarray,
    w: SsaBlockWeights,
    ledger: Optional[SopLedger] = None,
    label: str = "ssa",
    av_mode: str = AV_STRUCTURAL,
) -> np.ndarray:
    """
    Kernel of ssa_forward on raw arrays; x may be spikes or merged real tokens.

    Q, K, V are LIF outputs of linear maps of x, A = Q K^T, Y = A V, and the
    block output is LIF((Y >> shift) W_proj + residual_scale * x), x entering
    as input current.
    """
    t, b, n, d = x.shape
    if d != w.dim:
        raise ShapeError(f"block expects token dim {w.dim}, got {d}")
    q = _fire(w.lif, _linear(x, w.w_q, ledger, f"{label}.q"), ledger, f"{label}.q")
    k = _fire(w.lif, _linear(x, w.w_k, ledger, f"{label}.k"), ledger, f"{label}.k")
    v = _fire(w.lif, _linear(x, w.w_v, ledger, f"{label}.v"), ledger, f"{label}.v")

    a, y = _attend(q, k, v, w.shift)
    if ledger is not None:
        nnz_q = np.count_nonzero(q.reshape(t * b, -1), axis=1)
        nnz_a = np.count_nonzero(a.reshape(t * b, -1), axis=1)
        for i in range(t * b):
            sa, macs = count_attention(int(nnz_q[i]), n, d, av_mode=av_mode, nnz_a=int(nnz_a[i]))
            ledger.credit(f"{label}.attn", spike_accumulates=sa, dense_macs=macs)
        ledger.credit(f"{label}.proj", dense_macs=count_linear(int(np.count_nonzero(y)), d))
    return _fire(w.lif, _block_current(y, w.w_proj, x, w.residual_scale), ledger, f"{label}.out")


def _attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, shift: int) -> Tuple[np.ndarray, np.ndarray]:
    """A = Q K^T and floor(A V / 2^shift) per timestep and sample."""
    # integer-valued products, exact in float64
    a = q.astype(np.float64) @ k.astype(np.float64).transpose(0, 1, 3, 2)
    y = a @ v.astype(np.float64)
    if shift:
        y = np.floor(y / float(2**shift))
    return a, y


def _block_current(y: np.ndarray, w_proj: DenseTensor, x: np.ndarray, residual_scale: float) -> np.ndarray:
    d = y.shape[-1]
    proj = y.reshape(-1, d) @ w_proj.data.astype(np.float64)
    residual = np.float32(residual_scale) * x.astype(np.float32)
    return proj.astype(np.float32).reshape(y.shape) + residual


def pool_tokens_array(x: np.ndarray) -> np.ndarray:
    """Mean over timesteps and tokens: [T,B,N,D] -> [B,D], float64 accumulation."""
    t, b, n, d = x.shape
    return (x.astype(np.float64).sum(axis=(0, 2)) / float(t * n)).astype(np.float32)


def logits_array(z: np.ndarray, head: HeadWeights) -> np.ndarray:
    """Affine head over the last axis, accumulated in ascending feature order."""
    flat = z.reshape(-1, z.shape[-1]).astype(np.float32, copy=False)
    w = head.w.data
    out = np.zeros((flat.shape[0], w.shape[1]), dtype=np.float32)
    for k in range(flat.shape[1]):
        column = flat[:, k]
        if np.any(column):
            out += column[:, None] * w[k]
    out += head.b.data
    return out.reshape(z.shape[:-1] + (w.shape[1],))


# --- weight calibration -------------------------------------------------------

CALIBRATION_STREAM = 0xCA1
CALIBRATION_SAMPLES = 32
# quarter octaves: gains 2^-6 .. 2^6
GAIN_STEPS = (-24, 24)


def quarter_octave(step: int) -> float:
    return 2.0 ** (step / 4.0)


def calibration_frames(config: ModelConfig) -> np.ndarray:
    """Bernoulli(init_rate) input batch drawn from its own stream of config.seed."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, CALIBRATION_STREAM]))
    dims = (config.input_steps, CALIBRATION_SAMPLES, config.in_channels, config.image_size, config.image_size)
    return (rng.random(dims) < config.init_rate).astype(np.float32)


def calibrate_gain(rate_at: Callable[[float], float], target: float) -> Tuple[float, float]:
    """
    Quarter-octave gain whose firing rate is closest to target.

    rate_at maps a gain to the layer's firing rate and is assumed not to fall
    as the gain grows; the step is found by bisection. A target outside the
    reachable range returns the nearest end of GAIN_STEPS.

    Returns:
    Tuple[float, float]: (gain, firing rate at that gain).
    """
    rates: Dict[int, float] = {}

    def rate(step: int) -> float:
        if step not in rates:
            rates[step] = float(rate_at(quarter_octave(step)))
        return rates[step]

    lo, hi = GAIN_STEPS
    if rate(hi) < target:
        return quarter_octave(hi), rate(hi)
    if rate(lo) >= target:
        return quarter_octave(lo), rate(lo)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if rate(mid) >= target:
            hi = mid
        else:
            lo = mid
    step = lo if target - rate(lo) < rate(hi) - target else hi
    return quarter_octave(step), rate(step)


def calibrate_gains(
    config: ModelConfig,
    raw_embeds: Sequence[Tuple[np.ndarray, Optional[DenseTensor]]],
    raw_blocks: Sequence[Sequence[Dict[str, np.ndarray]]],
) -> Dict[str, float]:
    """
    Gain per spiking layer, settled in forward order.

    Each layer sees the spikes of the already calibrated layers before it.
    Embedding gains scale the projection only (not the positional bias); the
    block output gain scales W_proj only, so the residual keeps its weight.
    """
    target = config.init_rate
    lif = config.lif
    sides = config.stage_sides()
    low, high = FIRING_RATE_BAND
    gains: Dict[str, float] = {}

    def scaled(raw: np.ndarray, gain: float) -> DenseTensor:
        return DenseTensor(quantize_to_grid(raw * gain), copy=False)

    def settle(label: str, fire_with: Callable[[float], np.ndarray]) -> np.ndarray:
        gain, rate = calibrate_gain(lambda g: fire_with(g).mean(), target)
        gains[label] = gain
        if low <= rate <= high:
            log.debug(f"Calibrated {label}: gain {gain:.4g}, firing {rate:.3f}")
        else:
            log.warning(f"Layer {label} fires at {rate:.3f} at its best gain {gain:.4g}, outside [{low}, {high}]")
        return fire_with(gain)

    x = calibration_frames(config)
    for s, stage in enumerate(config.stages):
        w_raw, pos = raw_embeds[s]
        if s == 0:
            frames = x
            x = settle(
                "s1.embed",
                lambda g: embed_array(frames, config.patch, EmbedWeights(scaled(w_raw, g), pos), lif, config.steps),
            )
        else:
            prev = x
            x = settle(
                f"s{s + 1}.embed",
                lambda g: transition_array(prev, sides[s - 1], stage.downsample, EmbedWeights(scaled(w_raw, g)), lif),
            )
        shift = config.shift_for(s)
        for b, raw in enumerate(raw_blocks[s]):
            label = f"s{s + 1}.b{b}"
            fired = {}
            for name in ("q", "k", "v"):
                fired[name] = settle(
                    f"{label}.{name}", lambda g: _fire(lif, _linear(x, scaled(raw[name], g), None, label), None, label)
                )
            _, y = _attend(fired["q"], fired["k"], fired["v"], shift)
            block_in = x
            x = settle(
                f"{label}.out",
                lambda g: _fire(
                    lif, _block_current(y, scaled(raw["out"], g), block_in, config.residual_scale), None, label
                ),
            )
    return gains


# --- public operations ------------------------------------------------------


def patch_embed(
    frames: DenseTensor,
    patch: int,
    weights: EmbedWeights,
    params: LifParams = LifParams(),
    steps: Optional[int] = None,
    ledger: Optional[SopLedger] = None,
) -> SpikeTensor:
    """
    Project non-overlapping patch x patch patches to D channels and fire them.

    Parameters:
    - frames (DenseTensor): [T_0, B, n, H, W] input; T_0 = 1 is repeated over steps.
    - patch (int): patch side; H and W must be multiples of it.
    - weights (EmbedWeights): projection [n*patch*patch, D] and optional positional bias.
    - steps (int): simulation steps T, defaults to T_0.

    Returns:
    SpikeTensor: [T, B, (H/patch)*(W/patch), D] spikes.
    """
    if frames.shape.rank != 5:
        raise ShapeError(f"patch_embed expects [T,B,n,H,W], got {frames.shape}")
    _, _, n, h, w = frames.shape.dims
    if patch < 1 or h % patch or w % patch:
        raise ShapeError(f"{h}x{w} frames are not divisible into {patch}x{patch} patches")
    if weights.w.shape[0] != n * patch * patch:
        raise ShapeError(f"projection expects {weights.w.shape[0]} inputs per patch, frames give {n * patch * patch}")
    steps = frames.shape[0] if steps is None else steps
    return SpikeTensor(embed_array(frames.data, patch, weights, params, steps, ledger), copy=False)


def ssa_forward(
    x: SpikeTensor,
    w: SsaBlockWeights,
    ledger: Optional[SopLedger] = None,
    label: str = "ssa",
    av_mode: str = AV_STRUCTURAL,
) -> SpikeTensor:
    """Spike-driven self-attention block on [T,B,N,D] spikes; output is binary."""
    if x.shape.rank != 4:
        raise ShapeError(f"ssa_forward expects [T,B,N,D], got {x.shape}")
    return SpikeTensor(ssa_array(x.data, w, ledger, label, av_mode), copy=False)


def token_logits(z: Union[SpikeTensor, DenseTensor], head: HeadWeights) -> DenseTensor:
    """l = z W + b applied to every token (and timestep) independently."""
    if z.shape[-1] != head.dim:
        raise ShapeError(f"feature dim {z.shape[-1]} does not match head dim {head.dim}")
    return DenseTensor(logits_array(z.data, head), copy=False)


@dataclass
class ForwardResult:
    logits: Optional[DenseTensor]
    stage_tokens: List[SpikeTensor]
    ledger: SopLedger
    pooled: DenseTensor
    insert_tokens: Optional[SpikeTensor] = None
    extras: Dict[str, object] = field(default_factory=dict)


def _check_input(config: ModelConfig, frames: DenseTensor) -> None:
    expected = (config.input_steps, config.in_channels, config.image_size, config.image_size)
    dims = frames.shape.dims
    if len(dims) != 5 or (dims[0], dims[2], dims[3], dims[4]) != expected:
        raise ConfigurationError(
            f"input {frames.shape} does not match the model: expected "
            f"[{expected[0]},B,{expected[1]},{expected[2]},{expected[3]}]"
        )


def forward_full(
    model: SpikingTransformer,
    frames: DenseTensor,
    reduction: Optional[Reduction] = None,
    sample_ids: Optional[Sequence[int]] = None,
    ledger: Optional[SopLedger] = None,
) -> ForwardResult:
    """
    Run every stage and block, optionally reducing tokens at one block.

    Final tokens are pooled over tokens and timesteps; logits are produced when
    the model carries a head. The per-stage outputs are returned for analysis.
    """
    config = model.config
    _check_input(config, frames)
    batch = frames.shape[1]
    ids = np.arange(batch, dtype=np.int64) if sample_ids is None else np.asarray(sample_ids, dtype=np.int64)
    if ids.shape != (batch,):
        raise ConfigurationError(f"sample_ids must list {batch} ids")
    ledger = SopLedger() if ledger is None else ledger
    target = None
    if reduction is not None:
        target = config.parse_block_id(reduction.insert_block)

    sides = config.stage_sides()
    x = embed_array(frames.data, config.patch, model.embeds[0], config.lif, config.steps, ledger, "s1.embed")
    stage_tokens = []
    insert_tokens = None
    reduced = False
    for s, stage in enumerate(config.stages):
        if s > 0:
            if reduced and stage.downsample == 2:
                raise ConfigurationError("token merging cannot be followed by a downsampling stage")
            x = transition_array(
                x, sides[s - 1], stage.downsample, model.embeds[s], config.lif, ledger, f"s{s + 1}.embed"
            )
        for b in range(stage.blocks):
            label = f"s{s + 1}.b{b}"
            weights = model.blocks[s][b]
            if target == (s, b):
                insert_tokens = SpikeTensor(x)
                x = reduction.apply(model, x, weights, ledger, label, ids)
                reduced = x.shape[2] != insert_tokens.shape[2]
            else:
                x = ssa_array(x, weights, ledger, label, config.av_counting)
            log.debug(f"{label}: {x.shape[2]} tokens, firing {float(x.mean()):.4f}")
        stage_tokens.append(SpikeTensor(x, copy=False))

    pooled = pool_tokens_array(x)
    logits = None
    if model.head is not None:
        logits = DenseTensor(logits_array(pooled, model.head), copy=False)
        ledger.credit("head", dense_macs=count_linear(int(np.count_nonzero(pooled)), model.head.num_classes))
    return ForwardResult(
        logits=logits,
        stage_tokens=stage_tokens,
        ledger=ledger,
        pooled=DenseTensor(pooled, copy=False),
        insert_tokens=insert_tokens,
    )


def firing_report(ledger: SopLedger) -> Dict[str, float]:
    """Firing rates per spiking layer, with out-of-band layers logged as warnings."""
    rates = ledger.firing_rates()
    low, high = FIRING_RATE_BAND
    for label, rate in rates.items():
        if not low <= rate <= high:
            log.warning(f"Layer {label} fires at {rate:.3f}, outside [{low}, {high}]")
    return rates
