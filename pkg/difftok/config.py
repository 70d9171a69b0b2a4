import configparser
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, Iterable, Mapping, Optional, Tuple

from marshmallow import (RAISE, Schema, ValidationError, fields, post_load, pre_load,
                         validate, validates_schema)

from difftok.errors import ConfigError
from difftok.record_utils import fields as log_fields

logger = logging.getLogger(__name__)

CONFIG_FORMAT_VERSION = 1
SECTIONS = ('model', 'schedule', 'train', 'data')
ENV_PREFIX = 'DIFFTOK_'
# smallest frame the perceptual backbone accepts
PERCEPTUAL_MIN_SIZE = 32


@dataclass(frozen=True)
class ModelConfig:
    NUM_STAGES = 4

    latent_dim: int = 16
    base_channels: int = 32
    channel_multipliers: Tuple[int, ...] = (1, 2, 4, 4)
    num_res_blocks: int = 1
    injection_count: int = 4
    norm_groups: int = 8
    timesteps: int = 8192
    lambda_kl: float = 1e-6
    eta_lpips: float = 0.01
    lpips_enabled: bool = True
    perceptual_net: str = 'alex'
    perceptual_backbone: str = 'pretrained'
    perceptual_weights: Optional[str] = None
    perceptual_seed: int = 0

    @property
    def stage_channels(self) -> Tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_multipliers)

    @classmethod
    def toy(cls, **overrides) -> 'ModelConfig':
        return cls(**{'timesteps': 1024, **overrides})

    @classmethod
    def tiny(cls, **overrides) -> 'ModelConfig':
        base = dict(latent_dim=4, base_channels=8, channel_multipliers=(1, 1, 2, 2),
                    timesteps=1000, lpips_enabled=False, perceptual_backbone='seeded')
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class ScheduleConfig:
    cosine_offset: float = 0.008
    max_beta: float = 0.999
    sampling_steps: int = 1


@dataclass(frozen=True)
class StageConfig:
    name: str
    start_step: int
    resolution: int
    frames: int
    use_lpips: bool


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-4
    min_lr_ratio: float = 0.0
    total_steps: int = 5000
    seed: int = 0
    stages: Tuple[StageConfig, ...] = (
        StageConfig('stage1', 0, 64, 9, False),
    )
    image_ratio: float = 0.25
    frame_stride_range: Tuple[int, int] = (1, 1)
    snr_weight_cap: Optional[float] = None
    checkpoint_every: int = 1000
    eval_every: int = 500
    eval_clips: int = 8
    log_every: int = 50
    run_dir: str = 'runs/default'

    def stage_at(self, step: int) -> StageConfig:
        current = self.stages[0]
        for stage in self.stages:
            if step >= stage.start_step:
                current = stage
        return current

    def eta_at(self, step: int, model: ModelConfig) -> float:
        if not model.lpips_enabled or not self.stage_at(step).use_lpips:
            return 0.0
        return model.eta_lpips


@dataclass(frozen=True)
class DataConfig:
    manifest: Optional[str] = None
    resize: Optional[int] = None
    train_split: str = 'train'
    val_split: str = 'val'


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if not self.model.lpips_enabled or self.model.eta_lpips <= 0:
            return
        small = [s.name for s in self.train.stages if s.use_lpips and s.resolution < PERCEPTUAL_MIN_SIZE]
        if small:
            raise ConfigError(f'stages {small} use LPIPS below {PERCEPTUAL_MIN_SIZE}px; raise their resolution '
                              'or set model.lpips_enabled = false',
                              fields={'train': {'stage2_resolution': [f'must be at least {PERCEPTUAL_MIN_SIZE}']}})

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {
            'format_version': CONFIG_FORMAT_VERSION,
            'model': ModelSchema().dump(self.model),
            'schedule': ScheduleSchema().dump(self.schedule),
            'train': TrainSchema().dump(self.train),
            'data': DataSchema().dump(self.data),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'RunConfig':
        return cls(**{name: _load_section(name, data.get(name, {})) for name in SECTIONS})

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for name, section in self.to_dict().items():
            if name == 'format_version':
                continue
            parser[name] = {k: _ini_value(v) for k, v in section.items()}
        lines = []
        for name in parser.sections():
            lines.append(f'[{name}]')
            lines.extend(f'{k} = {v}' for k, v in parser[name].items())
            lines.append('')
        return '\n'.join(lines)


def _ini_value(value: Any) -> str:
    if value is None:
        return 'none'
    if isinstance(value, (list, tuple)):
        return ','.join(str(v) for v in value)
    if isinstance(value, bool):
        return 'true' if value else 'false'
    return str(value)


class CommaSeparated(fields.List):
    """List field that also accepts `1,2,4` strings from INI files."""

    def _deserialize(self, value, attr, data, **kwargs):
        if isinstance(value, str):
            value = [v.strip() for v in value.split(',') if v.strip()]
        return tuple(super()._deserialize(value, attr, data, **kwargs))


class SectionSchema(Schema):
    class Meta:
        unknown = RAISE

    @pre_load
    def none_strings(self, data, **kwargs):
        return {k: (None if isinstance(v, str) and v.strip().lower() in ('', 'none') else v)
                for k, v in data.items()}


class ModelSchema(SectionSchema):
    latent_dim = fields.Int(validate=validate.Range(min=1))
    base_channels = fields.Int(validate=validate.Range(min=1))
    channel_multipliers = CommaSeparated(fields.Int(validate=validate.Range(min=1)),
                                         validate=validate.Length(equal=ModelConfig.NUM_STAGES))
    num_res_blocks = fields.Int(validate=validate.Range(min=1))
    injection_count = fields.Int(validate=validate.Range(min=1, max=4))
    norm_groups = fields.Int(validate=validate.Range(min=1))
    timesteps = fields.Int(validate=validate.Range(min=1))
    lambda_kl = fields.Float(validate=validate.Range(min=0))
    eta_lpips = fields.Float(validate=validate.Range(min=0))
    lpips_enabled = fields.Bool()
    perceptual_net = fields.Str(validate=validate.OneOf(['alex', 'vgg', 'squeeze']))
    perceptual_backbone = fields.Str(validate=validate.OneOf(['pretrained', 'seeded']))
    perceptual_weights = fields.Str(allow_none=True)
    perceptual_seed = fields.Int()

    @validates_schema
    def check_groups(self, data, **kwargs):
        cfg = replace(ModelConfig(), **data)
        bad = [c for c in (cfg.base_channels, *cfg.stage_channels) if c % cfg.norm_groups]
        if bad:
            raise ValidationError(f'channel counts {bad} are not divisible by norm_groups={cfg.norm_groups}',
                                  'channel_multipliers')

    @post_load
    def make(self, data, **kwargs):
        return replace(ModelConfig(), **data)


class ScheduleSchema(SectionSchema):
    cosine_offset = fields.Float(validate=validate.Range(min=0, min_inclusive=False))
    max_beta = fields.Float(validate=validate.Range(min=0, max=1, min_inclusive=False, max_inclusive=False))
    sampling_steps = fields.Int(validate=validate.Range(min=1))

    @post_load
    def make(self, data, **kwargs):
        return replace(ScheduleConfig(), **data)


class TrainSchema(SectionSchema):
    batch_size = fields.Int(validate=validate.Range(min=1))
    learning_rate = fields.Float(validate=validate.Range(min=0, min_inclusive=False))
    min_lr_ratio = fields.Float(validate=validate.Range(min=0, max=1))
    total_steps = fields.Int(validate=validate.Range(min=1))
    seed = fields.Int()
    stage1_resolution = fields.Int(validate=validate.Range(min=8))
    stage1_frames = fields.Int(validate=validate.Range(min=1))
    stage2_start = fields.Int(allow_none=True, validate=validate.Range(min=1))
    stage2_resolution = fields.Int(allow_none=True, validate=validate.Range(min=8))
    stage2_frames = fields.Int(allow_none=True, validate=validate.Range(min=1))
    image_ratio = fields.Float(validate=validate.Range(min=0, max=1))
    frame_stride_range = CommaSeparated(fields.Int(validate=validate.Range(min=1)),
                                        validate=validate.Length(equal=2))
    snr_weight_cap = fields.Float(allow_none=True, validate=validate.Range(min=0, min_inclusive=False))
    checkpoint_every = fields.Int(validate=validate.Range(min=1))
    eval_every = fields.Int(validate=validate.Range(min=1))
    eval_clips = fields.Int(validate=validate.Range(min=1))
    log_every = fields.Int(validate=validate.Range(min=1))
    run_dir = fields.Str()

    @validates_schema
    def check_frames(self, data, **kwargs):
        for key in ('stage1_frames', 'stage2_frames'):
            value = data.get(key)
            if value is not None and (value - 1) % 4:
                raise ValidationError('frame count must be 1 + 4k', key)
        low, high = data.get('frame_stride_range', (1, 1))
        if low > high:
            raise ValidationError('range must be ordered', 'frame_stride_range')

    @pre_load
    def flatten_stages(self, data, **kwargs):
        data = dict(data)
        stages = data.pop('stages', None)
        if stages:
            first = stages[0]
            data.setdefault('stage1_resolution', first['resolution'])
            data.setdefault('stage1_frames', first['frames'])
            if len(stages) > 1:
                second = stages[1]
                data.setdefault('stage2_start', second['start_step'])
                data.setdefault('stage2_resolution', second['resolution'])
                data.setdefault('stage2_frames', second['frames'])
        return data

    @post_load
    def make(self, data, **kwargs):
        default = TrainConfig()
        first = default.stages[0]
        stages = [StageConfig('stage1', 0,
                              data.pop('stage1_resolution', first.resolution),
                              data.pop('stage1_frames', first.frames),
                              False)]
        start = data.pop('stage2_start', None)
        resolution = data.pop('stage2_resolution', None)
        frames = data.pop('stage2_frames', None)
        if start is not None:
            stages.append(StageConfig('stage2', start,
                                      resolution or stages[0].resolution,
                                      frames or stages[0].frames,
                                      True))
        return replace(default, stages=tuple(stages), **data)

    def dump(self, obj, **kwargs):
        flat = {k: v for k, v in asdict(obj).items() if k != 'stages'}
        first = obj.stages[0]
        flat.update(stage1_resolution=first.resolution, stage1_frames=first.frames,
                    stage2_start=None, stage2_resolution=None, stage2_frames=None)
        if len(obj.stages) > 1:
            second = obj.stages[1]
            flat.update(stage2_start=second.start_step, stage2_resolution=second.resolution,
                        stage2_frames=second.frames)
        flat['frame_stride_range'] = list(obj.frame_stride_range)
        return flat


class DataSchema(SectionSchema):
    manifest = fields.Str(allow_none=True)
    resize = fields.Int(allow_none=True, validate=validate.Range(min=1))
    train_split = fields.Str()
    val_split = fields.Str()

    @post_load
    def make(self, data, **kwargs):
        return replace(DataConfig(), **data)


SCHEMAS = {
    'model': ModelSchema,
    'schedule': ScheduleSchema,
    'train': TrainSchema,
    'data': DataSchema,
}


def _load_section(name: str, raw: Mapping[str, Any]):
    try:
        return SCHEMAS[name]().load(dict(raw))
    except ValidationError as e:
        raise ConfigError(f'Invalid [{name}] configuration', fields=e.messages) from e


def _env_overrides(env: Mapping[str, str]) -> Dict[str, Dict[str, str]]:
    found = {name: {} for name in SECTIONS}
    for key, value in env.items():
        if not key.startswith(ENV_PREFIX):
            continue
        rest = key[len(ENV_PREFIX):].lower()
        for name in SECTIONS:
            if rest.startswith(name + '_'):
                option = rest[len(name) + 1:]
                if option in SCHEMAS[name]._declared_fields:
                    found[name][option] = value
    return found


def parse_override(text: str) -> Tuple[str, str, str]:
    if '=' not in text or '.' not in text.split('=', 1)[0]:
        raise ConfigError(f'Override must look like section.key=value, got {text!r}')
    target, value = text.split('=', 1)
    section, key = target.strip().split('.', 1)
    if section not in SECTIONS:
        raise ConfigError(f'Unknown config section {section!r}')
    return section, key.strip(), value.strip()


def load_config(path: Optional[str] = None, overrides: Iterable[str] = (),
                env: Optional[Mapping[str, str]] = None) -> RunConfig:
    """File, then DIFFTOK_<SECTION>_<KEY> environment values, then --set overrides."""
    overrides = list(overrides)
    raw: Dict[str, Dict[str, str]] = {name: {} for name in SECTIONS}

    if path:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as e:
            raise ConfigError(f'Cannot read config file {path}: {e}') from e
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f'Unknown config section [{section}] in {path}')
            raw[section].update(parser[section])

    for name, values in _env_overrides(os.environ if env is None else env).items():
        raw[name].update(values)

    for text in overrides:
        section, key, value = parse_override(text)
        raw[section][key] = value

    config = RunConfig(**{name: _load_section(name, raw[name]) for name in SECTIONS})
    logger.debug('config loaded', extra=log_fields(path=path, overrides=len(overrides)))
    return config


def device_from_env() -> str:
    import torch

    wanted = os.getenv('DIFFTOK_DEVICE', 'cpu').lower()
    if wanted == 'auto':
        return 'cuda' if torch.cuda.is_available() else 'cpu'
    return wanted
