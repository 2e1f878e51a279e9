"""
Run configuration: an INI file with [run], [data], [model], [train] and [eval] sections, validated section by
section with marshmallow. Every problem in every section is collected before anything is reported.
"""
import configparser
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

from marshmallow import Schema, ValidationError, fields, validate

from . import pde_kinds
from .exceptions import ConfigError, ConfigValidationError, TrainConfigError
from .model import ModelConfig
from .spectral.types import MAX_RESOLUTION, MIN_RESOLUTION
from .tokens import MODES
from .training import DTYPES, OBJECTIVE_FLOW_MATCHING, OBJECTIVES, TrainConfig

SECTIONS = ('run', 'data', 'model', 'train', 'eval',)
RESOLVED_CONFIG_NAME = 'config.resolved'
RESOLUTIONS = tuple(2 ** power for power in range(MIN_RESOLUTION.bit_length() - 1, MAX_RESOLUTION.bit_length()))
SPLITS = ('train', 'val', 'test', 'all',)


class CommaList(fields.List):
    """
    List field that also accepts a comma-separated string, the only list spelling an INI file has.
    """

    def _deserialize(self, value, attr, data, **kwargs):
        if isinstance(value, str):
            value = [item.strip() for item in value.split(',') if item.strip()]
        return super()._deserialize(value, attr, data, **kwargs)


def _positive(**kwargs) -> fields.Integer:
    return fields.Integer(validate=validate.Range(min=1), **kwargs)


class RunSectionSchema(Schema):
    seed = fields.Integer(load_default=0)
    out = fields.String(load_default='runs/default')
    workers = _positive(load_default=1)


class DataSectionSchema(Schema):
    pde = fields.String(load_default=pde_kinds.DIFF, validate=validate.OneOf(pde_kinds.ALL))
    datasets = CommaList(fields.String(), load_default=list)
    resolution = fields.Integer(load_default=64, validate=validate.OneOf(RESOLUTIONS))
    trajectories = _positive(load_default=60)
    steps = fields.Integer(load_default=30, validate=validate.Range(min=2))
    split = fields.String(load_default='test', validate=validate.OneOf(SPLITS))


class ModelSectionSchema(Schema):
    preset = fields.String(load_default='TEST', validate=validate.OneOf(ModelConfig.PRESETS))
    name = fields.String()
    d = _positive()
    depth = CommaList(_positive())
    num_heads = _positive()
    mlp_ratio = fields.Float(validate=validate.Range(min=0, min_inclusive=False))
    window_size = _positive()
    patch_size = _positive()
    class_dropout_prob = fields.Float(validate=validate.Range(min=0, max=1, max_inclusive=False))
    qkv_bias = fields.Boolean()
    qk_norm = fields.Boolean()
    mode = fields.String(validate=validate.OneOf(MODES))
    max_channels = _positive()
    num_pde_classes = _positive()
    num_channel_types = _positive()
    temporal_depth = _positive()
    diffusion = fields.Boolean()
    bias_hidden = _positive()
    max_doubling = fields.Integer(validate=validate.Range(min=0))


_TRAIN_DEFAULTS = TrainConfig()


class TrainSectionSchema(Schema):
    lr = fields.Float(load_default=_TRAIN_DEFAULTS.lr, validate=validate.Range(min=0, min_inclusive=False))
    weight_decay = fields.Float(load_default=_TRAIN_DEFAULTS.weight_decay, validate=validate.Range(min=0))
    betas = CommaList(fields.Float(validate=validate.Range(min=0, max=1, max_inclusive=False)),
                      load_default=lambda: list(_TRAIN_DEFAULTS.betas), validate=validate.Length(equal=2))
    eps = fields.Float(load_default=_TRAIN_DEFAULTS.eps, validate=validate.Range(min=0, min_inclusive=False))
    effective_batch = _positive(load_default=_TRAIN_DEFAULTS.effective_batch)
    micro_batch = _positive(load_default=_TRAIN_DEFAULTS.micro_batch)
    epochs = _positive(load_default=_TRAIN_DEFAULTS.epochs)
    max_steps = _positive(load_default=None, allow_none=True)
    ema_decay = fields.Float(load_default=_TRAIN_DEFAULTS.ema_decay,
                             validate=validate.Range(min=0, max=1, max_inclusive=False))
    objective = fields.String(load_default=_TRAIN_DEFAULTS.objective, validate=validate.OneOf(OBJECTIVES))
    sigma_min = fields.Float(load_default=_TRAIN_DEFAULTS.sigma_min,
                             validate=validate.Range(min=0, max=1, max_inclusive=False))
    seed = fields.Integer(load_default=None, allow_none=True)
    clip = fields.Boolean(load_default=_TRAIN_DEFAULTS.clip)
    clip_literal = fields.Boolean(load_default=_TRAIN_DEFAULTS.clip_literal)
    history = _positive(load_default=_TRAIN_DEFAULTS.history)
    checkpoint_every = fields.Integer(load_default=_TRAIN_DEFAULTS.checkpoint_every, validate=validate.Range(min=0))
    dtype = fields.String(load_default=_TRAIN_DEFAULTS.dtype, validate=validate.OneOf(tuple(DTYPES)))


class EvalSectionSchema(Schema):
    horizons = CommaList(_positive(), load_default=lambda: [1, 10, 20], validate=validate.Length(min=1))
    sampler_steps = _positive(load_default=25)
    sweep = CommaList(_positive(), load_default=list)
    use_ema = fields.Boolean(load_default=True)


SECTION_SCHEMAS = {
    'run': RunSectionSchema,
    'data': DataSectionSchema,
    'model': ModelSectionSchema,
    'train': TrainSectionSchema,
    'eval': EvalSectionSchema,
}


@dataclass
class RunConfig:
    run: Dict[str, Any] = field(default_factory=dict)
    data: Dict[str, Any] = field(default_factory=dict)
    model: Dict[str, Any] = field(default_factory=dict)
    train: Dict[str, Any] = field(default_factory=dict)
    eval: Dict[str, Any] = field(default_factory=dict)

    @property
    def out(self) -> str:
        return self.run['out']

    def model_config(self) -> ModelConfig:
        overrides = {key: tuple(value) if isinstance(value, list) else value
                     for key, value in self.model.items() if key != 'preset'}
        overrides['temporal_depth'] = self.train['history']
        overrides['diffusion'] = self.train['objective'] == OBJECTIVE_FLOW_MATCHING
        return ModelConfig.preset(self.model['preset'], **overrides)

    def train_config(self) -> TrainConfig:
        values = dict(self.train)
        values['betas'] = tuple(values['betas'])
        if values['seed'] is None:
            values['seed'] = self.run['seed']
        return TrainConfig(**values).validate()

    def sections(self) -> Dict[str, Dict[str, Any]]:
        return {section: getattr(self, section) for section in SECTIONS}

    def resolved(self) -> 'RunConfig':
        """
        The same config with every derived value spelled out, so that reloading it reproduces the run exactly.
        """
        model = dict(self.model)
        model.update(self.model_config().to_dict())
        train = dict(self.train)
        train['seed'] = self.train_config().seed
        return RunConfig(run=dict(self.run), data=dict(self.data), model=model, train=train, eval=dict(self.eval))


def _format(value: Any) -> Optional[str]:
    if value is None:
        return None
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (list, tuple)):
        return ','.join(_format(item) for item in value)
    return str(value)


def write_resolved(cfg: RunConfig, directory: str) -> str:
    os.makedirs(directory, exist_ok=True)
    parser = configparser.ConfigParser()
    for section, values in cfg.resolved().sections().items():
        parser[section] = {key: _format(value) for key, value in values.items() if value is not None}
    path = os.path.join(directory, RESOLVED_CONFIG_NAME)
    with open(path, 'w', encoding='utf-8') as handle:
        parser.write(handle)
    return path


def parse_override(override: str) -> Tuple[str, str, str]:
    key, sep, value = override.partition('=')
    section, dot, name = key.strip().partition('.')
    if not sep or not dot or not name:
        raise ConfigValidationError([(override, 'expected section.key=value')])
    return section, name, value.strip()


def load_run_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """
    Read `path` (optional), apply `section.key=value` overrides, validate every section.
    """
    parser = configparser.ConfigParser()
    problems = []  # type: List[Tuple[str, str]]
    if path is not None:
        if not os.path.exists(path):
            raise ConfigValidationError([('config', f'file {path} does not exist')])
        try:
            parser.read(path, encoding='utf-8')
        except configparser.Error as exc:
            raise ConfigValidationError([('config', f'{path} is not a valid INI file: {exc}')])

    raw = {section: dict(parser[section]) for section in parser.sections()}
    for section in raw:
        if section not in SECTIONS:
            problems.append((section, f'unknown section, expected one of {SECTIONS}'))
    for override in overrides:
        section, name, value = parse_override(override)
        if section not in SECTIONS:
            problems.append((f'{section}.{name}', f'unknown section, expected one of {SECTIONS}'))
            continue
        raw.setdefault(section, {})[name] = value

    loaded = {}
    for section, schema in SECTION_SCHEMAS.items():
        try:
            loaded[section] = schema().load(raw.get(section, {}))
        except ValidationError as exc:
            for key, messages in sorted(exc.messages.items()):
                problems.append((f'{section}.{key}', _flatten(messages)))
    if problems:
        raise ConfigValidationError(problems)

    cfg = RunConfig(**loaded)
    try:
        cfg.train_config()
    except TrainConfigError as exc:
        problems.append(('train', str(exc)))
    try:
        cfg.model_config()
    except ConfigError as exc:
        problems.append(('model', str(exc)))
    if problems:
        raise ConfigValidationError(problems)
    return cfg


def _flatten(messages) -> str:
    if isinstance(messages, dict):
        return '; '.join(f'[{key}] {_flatten(value)}' for key, value in messages.items())
    if isinstance(messages, (list, tuple)):
        return ' '.join(_flatten(message) for message in messages)
    return str(messages)
