from enum import Enum
from typing import Any, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


def _split_csv(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.strip("[]").split(",") if item.strip()]
    return value


class _Config(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class AnchorMode(str, Enum):
    BOTH = "both"  # noised-anchor initialisation + anchor stream
    INIT = "init"
    STREAM = "stream"


class ScheduleConfig(_Config):
    timesteps: int = Field(1000, ge=2)
    beta_start: float = Field(1e-4, gt=0, lt=1)
    beta_end: float = Field(0.02, gt=0, lt=1)


class DatasetConfig(_Config):
    n_scenes: int = Field(2000, ge=1)
    n_identities: int = Field(6, ge=3)
    n_backgrounds: int = Field(4, ge=2)
    image_size: int = Field(24, ge=16)
    held_out_identity: Optional[int] = None
    n_probe_scenes: int = Field(1200, ge=1)
    n_instances: int = Field(4, ge=1)
    contact_prob: float = Field(0.5, ge=0, le=1)

    @model_validator(mode="after")
    def check_held_out(self) -> "DatasetConfig":
        if self.held_out_identity is not None and not 0 <= self.held_out_identity < self.n_identities:
            raise ValueError(f"held_out_identity must be in [0, {self.n_identities})")
        return self

    @property
    def held_out(self) -> int:
        return self.n_identities - 1 if self.held_out_identity is None else self.held_out_identity


class CodecConfig(_Config):
    channels: List[int] = Field(default_factory=lambda: [16, 32])
    latent_channels: int = Field(4, ge=1)
    norm_groups: int = Field(8, ge=1)
    # square image side the codec was trained on; None accepts any divisible size
    image_size: Optional[int] = Field(None, ge=1)

    @field_validator("channels", mode="before")
    @classmethod
    def split_lists(cls, value: Any) -> Any:
        return _split_csv(value)

    @model_validator(mode="after")
    def check_groups(self) -> "CodecConfig":
        if not self.channels:
            raise ValueError("codec needs at least one level")
        for width in self.channels:
            if width % self.norm_groups:
                raise ValueError(f"codec width {width} not divisible by norm_groups={self.norm_groups}")
        if self.image_size is not None and self.image_size % self.factor:
            raise ValueError(f"codec image_size {self.image_size} not divisible by factor {self.factor}")
        return self

    @property
    def factor(self) -> int:
        return 2 ** len(self.channels)


class TextConfig(_Config):
    seq_len: int = Field(8, ge=1)
    embed_dim: int = Field(64, ge=2)


class DenoiserConfig(_Config):
    latent_channels: int = Field(4, ge=1)
    latent_size: int = Field(6, ge=1)
    base_channels: int = Field(32, ge=1)
    channel_mults: List[int] = Field(default_factory=lambda: [1, 2, 4])
    blocks_per_level: int = Field(2, ge=1)
    attention_levels: Optional[List[int]] = None
    time_embed_dim: int = Field(128, ge=2)
    context_dim: int = Field(64, ge=1)
    norm_groups: int = Field(8, ge=1)
    two_stream: bool = True

    @field_validator("channel_mults", "attention_levels", mode="before")
    @classmethod
    def split_lists(cls, value: Any) -> Any:
        return _split_csv(value)

    @model_validator(mode="after")
    def check_geometry(self) -> "DenoiserConfig":
        if not self.channel_mults or min(self.channel_mults) < 1:
            raise ValueError("channel_mults must be non-empty positive integers")
        if self.base_channels % 2:
            raise ValueError("base_channels must be even (sinusoidal time features)")
        for width in self.widths:
            if width % self.norm_groups:
                raise ValueError(f"denoiser width {width} not divisible by norm_groups={self.norm_groups}")
        for level in self.resolved_attention_levels:
            if not 0 <= level < len(self.channel_mults):
                raise ValueError(f"attention level {level} outside [0, {len(self.channel_mults)})")
        return self

    @property
    def widths(self) -> List[int]:
        return [self.base_channels * m for m in self.channel_mults]

    @property
    def resolved_attention_levels(self) -> List[int]:
        if self.attention_levels is not None:
            return list(self.attention_levels)
        n = len(self.channel_mults)
        return list(range(max(0, n - 2), n))

    def level_sizes(self) -> List[int]:
        """Spatial size per level; halving stops once the size is odd."""
        sizes = [self.latent_size]
        for _ in self.channel_mults[1:]:
            size = sizes[-1]
            sizes.append(size // 2 if size % 2 == 0 and size > 1 else size)
        return sizes


class TrainConfig(_Config):
    epochs: int = Field(20, ge=0)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(1e-3, ge=0)
    seed: int = Field(0, ge=0)
    text_drop_prob: float = Field(0.1, ge=0, le=1)
    anchor_drop_prob: float = Field(0.1, ge=0, le=1)
    max_steps: Optional[int] = Field(None, ge=0)
    eval_batch: int = Field(64, ge=1)


class DreamboothConfig(_Config):
    placeholder: str = Field("sks", pattern=r"^[a-z0-9]+$")
    class_prompt: str = "ident0 meets ident1 in bg0"
    lambda_prior: float = Field(1.0, ge=0)
    prior_set_size: int = Field(64, ge=1)
    prior_steps: int = Field(50, ge=1)
    steps: int = Field(400, ge=0)
    learning_rate: float = Field(5e-4, ge=0)
    seed: int = Field(0, ge=0)
    anchor_drop_prob: float = Field(0.1, ge=0, le=1)
    allow_any_instance_count: bool = False


class SamplerConfig(_Config):
    steps: int = Field(50, ge=1)
    guidance_scale: float = Field(7.5, ge=0)
    strength: Optional[float] = Field(None, ge=0, le=1)
    batch: int = Field(4, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    anchor_mode: AnchorMode = AnchorMode.BOTH
    workers: int = Field(1, ge=1)

    def resolved_strength(self, has_anchor: bool) -> float:
        if self.strength is not None:
            return self.strength
        return 0.75 if has_anchor else 1.0


class ProbeConfig(_Config):
    channels: List[int] = Field(default_factory=lambda: [16, 32])
    epochs: int = Field(6, ge=1)
    batch_size: int = Field(64, ge=1)
    learning_rate: float = Field(2e-3, gt=0)
    seed: int = Field(0, ge=0)
    holdout_fraction: float = Field(0.2, gt=0, lt=1)

    @field_validator("channels", mode="before")
    @classmethod
    def split_lists(cls, value: Any) -> Any:
        return _split_csv(value)


class EvalConfig(_Config):
    images_per_prompt: int = Field(10, ge=1)
    n_prompts: int = Field(8, ge=1)
    seed: int = Field(0, ge=0)


class AppConfig(_Config):
    seed: int = Field(0, ge=0)
    out_dir: str = "runs/default"
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    data: DatasetConfig = Field(default_factory=DatasetConfig)
    codec: CodecConfig = Field(default_factory=CodecConfig)
    codec_train: TrainConfig = Field(default_factory=lambda: TrainConfig(learning_rate=2e-3))
    text: TextConfig = Field(default_factory=TextConfig)
    denoiser: DenoiserConfig = Field(default_factory=DenoiserConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    dreambooth: DreamboothConfig = Field(default_factory=DreamboothConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def check_consistency(self) -> "AppConfig":
        if self.denoiser.context_dim != self.text.embed_dim:
            raise ValueError("denoiser.context_dim must equal text.embed_dim")
        if self.denoiser.latent_channels != self.codec.latent_channels:
            raise ValueError("denoiser.latent_channels must equal codec.latent_channels")
        if self.codec.image_size is not None and self.codec.image_size != self.data.image_size:
            raise ValueError("codec.image_size must equal data.image_size")
        if self.data.image_size % self.codec.factor:
            raise ValueError(f"image_size {self.data.image_size} not divisible by codec factor {self.codec.factor}")
        if self.denoiser.latent_size != self.data.image_size // self.codec.factor:
            raise ValueError("denoiser.latent_size must equal image_size / codec factor")
        return self


class SceneSpec(BaseModel):
    """One procedural scene: two sprites over a background."""

    identity_a: int
    identity_b: int
    background: int
    position_a: Tuple[int, int]
    position_b: Tuple[int, int]
    contact: bool = False

    @property
    def caption(self) -> str:
        relation = "shakes" if self.contact else "meets"
        return f"ident{self.identity_a} {relation} ident{self.identity_b} in bg{self.background}"


class EvalReport(BaseModel):
    identity_accuracy: float = Field(ge=0, le=1)
    class_accuracy: float = Field(ge=0, le=1)
    background_consistency: float = Field(ge=0)
    background_consistency_no_anchor: float = Field(0.0, ge=0)
    anchor_consistency_wins: int = Field(0, ge=0)
    reconstruction_psnr: float
    blend_rate: float = Field(0.0, ge=0, le=1)
    n_identity_samples: int = 0
    n_class_samples: int = 0
    n_consistency_batches: int = 0
    n_reconstruction_samples: int = 0
