"""Checkpoint directories.

    <dir>/manifest.json                     config, step, seed, rng and scheduler state
    <dir>/params/<name>.cdt                 one container per state_dict entry
    <dir>/optim/<name>.exp_avg.cdt          Adam first moment per parameter
    <dir>/optim/<name>.exp_avg_sq.cdt       Adam second moment per parameter

The manifest is written last; a directory without one is incomplete.
"""
import json
import logging
import os
from typing import Any, Dict, Optional, Tuple

import torch
from marshmallow import INCLUDE, Schema, ValidationError, fields, validate

from difftok.config import CONFIG_FORMAT_VERSION, ModelConfig, RunConfig
from difftok.errors import CheckpointMismatchError, ConfigError, DataError
from difftok.networks import Tokenizer
from difftok.record_utils import fields as log_fields
from difftok.services.tensor_store import tensor_store

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MANIFEST_NAME = 'manifest.json'
MOMENTS = ('exp_avg', 'exp_avg_sq')


class CheckpointManifestSchema(Schema):
    class Meta:
        unknown = INCLUDE

    format_version = fields.Int(required=True, validate=validate.Equal(CHECKPOINT_VERSION))
    config_format_version = fields.Int(required=True, validate=validate.Equal(CONFIG_FORMAT_VERSION))
    config = fields.Dict(required=True)
    step = fields.Int(required=True, validate=validate.Range(min=0))
    seed = fields.Int(required=True)
    params = fields.List(fields.Str(), required=True)
    rng_state = fields.Str(allow_none=True, load_default=None)
    scheduler = fields.Dict(allow_none=True, load_default=None)
    param_groups = fields.List(fields.Dict(), allow_none=True, load_default=None)
    optim_steps = fields.Dict(keys=fields.Str(), values=fields.Int(), load_default=dict)
    loss_ema = fields.Dict(keys=fields.Str(), values=fields.Float(), load_default=dict)


class CheckpointService:
    def save(self, path: str, state, config: RunConfig) -> str:
        """Write `state` (a training.TrainState) under `path`."""
        net = state.net
        os.makedirs(os.path.join(path, 'params'), exist_ok=True)
        names = []
        for name, tensor in net.state_dict().items():
            tensor_store.write(os.path.join(path, 'params', f'{name}.cdt'), tensor)
            names.append(name)

        param_names = [name for name, _ in net.named_parameters()]
        opt_state = state.optimizer.state_dict()
        optim_steps = {}
        if opt_state['state']:
            os.makedirs(os.path.join(path, 'optim'), exist_ok=True)
        for index, slots in opt_state['state'].items():
            name = param_names[index]
            optim_steps[name] = int(slots['step'])
            for moment in MOMENTS:
                tensor_store.write(os.path.join(path, 'optim', f'{name}.{moment}.cdt'), slots[moment])

        manifest = {
            'format_version': CHECKPOINT_VERSION,
            'config_format_version': CONFIG_FORMAT_VERSION,
            'config': config.to_dict(),
            'step': state.step,
            'seed': config.train.seed,
            'params': names,
            'rng_state': state.rng_state(),
            'scheduler': _jsonable(state.scheduler.state_dict()),
            'param_groups': _jsonable(opt_state['param_groups']),
            'optim_steps': optim_steps,
            'loss_ema': dict(state.loss_ema),
        }
        with open(os.path.join(path, MANIFEST_NAME), 'w') as fh:
            json.dump(manifest, fh, indent=2)

        logger.info(f'✅ checkpoint saved: {path}', extra=log_fields(path=path, step=state.step, params=len(names)))
        return path

    def read_manifest(self, path: str) -> Dict[str, Any]:
        manifest_path = os.path.join(path, MANIFEST_NAME)
        try:
            with open(manifest_path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f'cannot read checkpoint manifest {manifest_path}: {e}', path=path) from e
        try:
            return CheckpointManifestSchema().load(raw)
        except ValidationError as e:
            raise CheckpointMismatchError(f'invalid checkpoint manifest in {path}', path=path,
                                          fields=e.messages) from e

    def read_config(self, path: str) -> RunConfig:
        try:
            return RunConfig.from_dict(self.read_manifest(path)['config'])
        except ConfigError as e:
            raise CheckpointMismatchError(f'checkpoint config in {path} is invalid: {e.message}',
                                          path=path, **e.details) from e

    def _load_params(self, path: str, manifest: Dict[str, Any], net: Tokenizer) -> None:
        expected = net.state_dict()
        missing = sorted(set(expected) - set(manifest['params']))
        extra = sorted(set(manifest['params']) - set(expected))
        if missing or extra:
            raise CheckpointMismatchError('checkpoint parameters do not match the model',
                                          path=path, missing=missing[:5], unexpected=extra[:5])
        loaded = {}
        for name, current in expected.items():
            tensor = tensor_store.read_tensor(os.path.join(path, 'params', f'{name}.cdt'))
            if tensor.shape != current.shape:
                raise CheckpointMismatchError(f'parameter {name} has shape {tuple(tensor.shape)}, '
                                              f'model expects {tuple(current.shape)}', path=path)
            loaded[name] = tensor
        net.load_state_dict(loaded)

    def load_tokenizer(self, path: str, expect: Optional[ModelConfig] = None,
                       device='cpu') -> Tuple[Tokenizer, RunConfig]:
        """Inference load; `expect` must equal the stored model config when given."""
        manifest = self.read_manifest(path)
        config = self.read_config(path)
        if expect is not None and expect != config.model:
            raise CheckpointMismatchError('checkpoint model config differs from the requested one', path=path)

        net = Tokenizer(config.model)
        self._load_params(path, manifest, net)
        net.to(device).eval()
        logger.info(f'✅ checkpoint loaded: {path}', extra=log_fields(path=path, step=manifest['step']))
        return net, config

    def load_into(self, path: str, state, config: RunConfig) -> None:
        """Restore parameters, optimizer, scheduler, rng and step into a fresh TrainState."""
        manifest = self.read_manifest(path)
        stored = self.read_config(path)
        for section in ('model', 'schedule'):
            if getattr(stored, section) != getattr(config, section):
                raise CheckpointMismatchError(f'checkpoint [{section}] config differs from the run config',
                                              path=path, section=section)
        self._load_params(path, manifest, state.net)

        param_names = [name for name, _ in state.net.named_parameters()]
        device = state.net.device
        opt_state = {'state': {}, 'param_groups': manifest['param_groups'] or []}
        for index, name in enumerate(param_names):
            if name not in manifest['optim_steps']:
                continue
            slots = {'step': torch.tensor(float(manifest['optim_steps'][name]))}
            for moment in MOMENTS:
                slots[moment] = tensor_store.read_tensor(os.path.join(path, 'optim', f'{name}.{moment}.cdt')).to(device)
            opt_state['state'][index] = slots
        if opt_state['param_groups']:
            state.optimizer.load_state_dict(opt_state)
        if manifest['scheduler']:
            state.scheduler.load_state_dict(manifest['scheduler'])
        if manifest['rng_state']:
            state.set_rng_state(manifest['rng_state'])
        state.step = manifest['step']
        state.loss_ema = dict(manifest['loss_ema'])


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, torch.Tensor):
        return value.item() if value.numel() == 1 else value.tolist()
    return value


checkpoint_service = CheckpointService()
