import os

import numpy as np
import pytest
from click.testing import CliRunner

from app import cli
from difftok.record_utils import parse_record
from difftok.services.tensor_store import tensor_store

TRAIN_INI = """\
[model]
latent_dim = 4
base_channels = 8
channel_multipliers = 1,1,2,2
timesteps = 1000
lpips_enabled = false
perceptual_backbone = seeded

[train]
batch_size = 1
total_steps = 2
checkpoint_every = 2
log_every = 1
stage1_resolution = 16
stage1_frames = 5
image_ratio = 0.5

[data]
manifest = {manifest}
"""


@pytest.fixture(scope='module')
def workspace(tmp_path_factory):
    """A synthetic dataset and a two-step checkpoint trained through the CLI."""
    root = tmp_path_factory.mktemp('cli')
    runner = CliRunner()
    data = str(root / 'data')
    result = runner.invoke(cli, ['make-dataset', data, '--clips', '4', '--resolution', '16', '--frames', '5',
                                 '--val-fraction', '0.25'])
    assert result.exit_code == 0, result.output

    ini = root / 'tiny.ini'
    ini.write_text(TRAIN_INI.format(manifest=os.path.join(data, 'manifest.json')))
    run_dir = str(root / 'run')
    result = runner.invoke(cli, ['train', '--config', str(ini), '--run-dir', run_dir])
    assert result.exit_code == 0, result.output
    checkpoint = os.path.join(run_dir, 'step_0000002')
    assert os.path.isfile(os.path.join(checkpoint, 'manifest.json'))
    return {'root': root, 'data': data, 'ini': str(ini), 'run_dir': run_dir, 'checkpoint': checkpoint,
            'clip': os.path.join(data, 'clip_00000')}


def invoke(*args):
    return CliRunner().invoke(cli, [str(a) for a in args])


def test_version():
    result = invoke('--version')
    assert result.exit_code == 0
    assert 'config format 1' in result.output


def test_make_dataset_writes_manifest(workspace):
    assert os.path.isfile(os.path.join(workspace['data'], 'manifest.json'))
    assert len(os.listdir(os.path.join(workspace['data'], 'clip_00000'))) == 5


def test_train_writes_config_copy(workspace):
    assert os.path.isfile(os.path.join(workspace['run_dir'], 'config.ini'))
    assert os.path.isfile(os.path.join(workspace['run_dir'], 'metrics.log'))


def test_reconstruct_writes_clip_and_timing(workspace):
    output = workspace['root'] / 'recon.cdt'
    frames_dir = workspace['root'] / 'recon_frames'
    result = invoke('reconstruct', workspace['checkpoint'], workspace['clip'], output, '--steps', 3,
                    '--seed', 1, '--frames-dir', frames_dir)
    assert result.exit_code == 0, result.output
    assert tensor_store.read(str(output)).dims == (5, 16, 16, 3)
    assert len(os.listdir(frames_dir)) == 5

    with open(f'{output}.timing') as fh:
        timing = parse_record(fh.read().strip())
    assert timing['denoiser_calls'] == '3'
    assert timing['steps'] == '3' and timing['seed'] == '1' and timing['frames'] == '5'
    assert float(timing['seconds']) > 0


def test_encode_then_decode_matches_reconstruct(workspace):
    root = workspace['root']
    assert invoke('encode', workspace['checkpoint'], workspace['clip'], root / 'z.cdt').exit_code == 0
    assert tensor_store.read(str(root / 'z.cdt')).dims == (2, 2, 2, 4)
    assert invoke('decode', workspace['checkpoint'], root / 'z.cdt', root / 'decoded.cdt',
                  '--steps', 2, '--seed', 4).exit_code == 0
    assert invoke('reconstruct', workspace['checkpoint'], workspace['clip'], root / 'direct.cdt',
                  '--steps', 2, '--seed', 4).exit_code == 0
    with open(root / 'decoded.cdt', 'rb') as a, open(root / 'direct.cdt', 'rb') as b:
        assert a.read() == b.read()


def test_streaming_reconstruct_matches_whole(workspace):
    root = workspace['root']
    assert invoke('reconstruct', workspace['checkpoint'], workspace['clip'], root / 'whole.cdt').exit_code == 0
    assert invoke('reconstruct', workspace['checkpoint'], workspace['clip'], root / 'stream.cdt',
                  '--streaming').exit_code == 0
    whole = tensor_store.read(str(root / 'whole.cdt')).data
    stream = tensor_store.read(str(root / 'stream.cdt')).data
    assert np.allclose(whole, stream, atol=1e-3)


def test_eval_report(workspace):
    report = workspace['root'] / 'report.txt'
    result = invoke('eval', workspace['checkpoint'], workspace['data'], report, '--steps', '1,2')
    assert result.exit_code == 0, result.output
    with open(report) as fh:
        records = [parse_record(line) for line in fh]
    assert records[0]['record'] == 'model'
    assert int(records[0]['encoder_params']) < int(records[0]['decoder_params'])
    aggregates = [r for r in records if r['record'] == 'aggregate']
    assert [r['steps'] for r in aggregates] == ['1', '2']
    assert all(r['lpips'] == 'none' for r in aggregates)
    assert len([r for r in records if r['record'] == 'latent_stats']) == 2


def test_bad_step_list_exits_with_config_code(workspace):
    result = invoke('eval', workspace['checkpoint'], workspace['data'], workspace['root'] / 'r.txt',
                    '--steps', 'one')
    assert result.exit_code == 2


def test_invalid_override_exits_with_config_code(workspace):
    result = invoke('train', '--config', workspace['ini'], '--set', 'model.latent_dim=0')
    assert result.exit_code == 2


def test_train_without_manifest(tmp_path):
    result = invoke('train', '--set', 'train.total_steps=1', '--run-dir', tmp_path / 'run')
    assert result.exit_code == 2


def test_bad_clip_exits_with_data_code(workspace):
    bad = workspace['root'] / 'bad.cdt'
    tensor_store.write(str(bad), np.zeros((4, 16, 16, 3), np.float32))
    result = invoke('reconstruct', workspace['checkpoint'], bad, workspace['root'] / 'out.cdt')
    assert result.exit_code == 3


def test_corrupt_latent_exits_with_data_code(workspace):
    bad = workspace['root'] / 'corrupt.cdt'
    bad.write_bytes(b'CDT1 but not really')
    result = invoke('decode', workspace['checkpoint'], bad, workspace['root'] / 'out.cdt')
    assert result.exit_code == 3
