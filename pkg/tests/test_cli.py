import json

import numpy as np
import pandas as pd
import pytest
import yaml

import main
from services.manifest_service import MANIFEST_NAME

TINY_CONFIG = {
    'environment': {'max_steps': 20},
    'sac': {'hidden_sizes': [8, 8], 'batch_size': 8, 'warmup_steps': 16, 'buffer_capacity': 256,
            'eval_interval': 32, 'eval_episodes': 1, 'total_steps': 0, 'finetune_steps': 0, 'finetune_warmup': 4},
    'controllers': {'hold_steps': 3},
    'tracking': {'trials': 1, 'square': {'side': 0.004}, 'circle': {'radius': 0.002}},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / 'tiny.yaml'
    path.write_text(yaml.safe_dump(TINY_CONFIG), encoding='utf-8')
    return str(path)


@pytest.fixture(autouse=True)
def isolated_environment(monkeypatch):
    monkeypatch.delenv('MAGCAPSULE_CONFIG', raising=False)
    monkeypatch.delenv(main.OUTPUT_ROOT_VAR, raising=False)


def test_missing_config_exits_with_io_status(tmp_path):
    status = main.main(['train', '--config', str(tmp_path / 'nope.yaml'), '--out', str(tmp_path / 'run')])
    assert status == 3


def test_invalid_config_exits_with_config_status(tmp_path):
    path = tmp_path / 'bad.yaml'
    path.write_text('sac:\n  gamma: 2.0\n', encoding='utf-8')
    assert main.main(['train', '--config', str(path), '--out', str(tmp_path / 'run')]) == 2


def test_train_with_zero_steps_writes_artifacts(tmp_path, tiny_config):
    out = tmp_path / 'train'
    assert main.main(['train', '--config', tiny_config, '--out', str(out), '--steps', '0']) == 0
    for name in ('checkpoint.mcap', 'learning_curve.csv', MANIFEST_NAME, main.LOG_FILE):
        assert (out / name).exists(), name
    curve = pd.read_csv(out / 'learning_curve.csv')
    assert curve['step'].tolist() == [0]
    manifest = json.loads((out / MANIFEST_NAME).read_text(encoding='utf-8'))
    assert manifest['command'] == 'train'
    assert manifest['config']['sac']['hidden_sizes'] == [8, 8]


def test_train_then_evaluate_and_finetune(tmp_path, tiny_config):
    train_dir = tmp_path / 'train'
    assert main.main(['train', '--config', tiny_config, '--out', str(train_dir), '--steps', '24']) == 0
    checkpoint = str(train_dir / 'checkpoint.mcap')

    eval_dir = tmp_path / 'eval'
    status = main.main(['eval', '--config', tiny_config, '--out', str(eval_dir), '--checkpoint', checkpoint,
                        '--controllers', 'pid,drl', '--paths', 'square', '--trials', '1'])
    assert status == 0
    assert len(list((eval_dir / 'reports').glob('*.json'))) == 2
    assert 'PID' in (eval_dir / 'comparison.txt').read_text(encoding='utf-8')

    tune_dir = tmp_path / 'finetune'
    status = main.main(['finetune', '--config', tiny_config, '--out', str(tune_dir), '--checkpoint', checkpoint,
                        '--steps', '8', '--trials', '1'])
    assert status == 0
    report = json.loads((tune_dir / 'finetune_report.json').read_text(encoding='utf-8'))
    assert {'nominal', 'zero_shot', 'after'} <= set(report)


def test_eval_with_one_stub_trial(tmp_path, tiny_config):
    out = tmp_path / 'eval'
    status = main.main(['eval', '--config', tiny_config, '--out', str(out), '--controllers', 'zero',
                        '--paths', 'square', '--trials', '1'])
    assert status == 0
    reports = list((out / 'reports').glob('zero_square_*.json'))
    assert len(reports) == 1
    summary = json.loads(reports[0].read_text(encoding='utf-8'))
    assert summary['controller'] == 'zero' and summary['angle_rmse'] is None
    assert (out / 'series' / reports[0].with_suffix('.csv').name).exists()
    assert '---' in (out / 'comparison.txt').read_text(encoding='utf-8')


def test_eval_of_learned_controller_needs_a_checkpoint(tmp_path, tiny_config):
    status = main.main(['eval', '--config', tiny_config, '--out', str(tmp_path / 'eval'), '--controllers', 'drl',
                        '--paths', 'square', '--trials', '1'])
    assert status == 1


def test_finetune_with_missing_checkpoint(tmp_path, tiny_config):
    status = main.main(['finetune', '--config', tiny_config, '--out', str(tmp_path / 'ft'),
                        '--checkpoint', str(tmp_path / 'missing.mcap')])
    assert status == 3


def test_finetune_with_foreign_checkpoint(tmp_path, tiny_config):
    train_dir = tmp_path / 'train'
    assert main.main(['train', '--config', tiny_config, '--out', str(train_dir), '--steps', '0']) == 0
    other = tmp_path / 'other.yaml'
    other.write_text(yaml.safe_dump({**TINY_CONFIG, 'sac': {**TINY_CONFIG['sac'], 'hidden_sizes': [4]}}),
                     encoding='utf-8')
    status = main.main(['finetune', '--config', str(other), '--out', str(tmp_path / 'ft'),
                        '--checkpoint', str(train_dir / 'checkpoint.mcap')])
    assert status == 5


def test_field_map_grid(tmp_path, tiny_config):
    out = tmp_path / 'field'
    status = main.main(['field-map', '--config', tiny_config, '--out', str(out), '--nx', '2', '--ny', '2',
                        '--x-range', '-0.01', '0.01', '--y-range', '-0.01', '0.01'])
    assert status == 0
    lines = (out / 'field_map.csv').read_text(encoding='utf-8').splitlines()
    assert lines[0] == 'x,y,Bx,By,Bz,grad_norm'
    assert len(lines) == 5


def test_field_map_with_zero_currents(tmp_path, tiny_config):
    out = tmp_path / 'field'
    status = main.main(['field-map', '--config', tiny_config, '--out', str(out), '--nx', '3', '--ny', '3',
                        '--currents', '0', '0', '0', '0'])
    assert status == 0
    frame = pd.read_csv(out / 'field_map.csv')
    assert (frame[['Bx', 'By', 'Bz', 'grad_norm']] == 0.0).all().all()


def test_field_map_is_symmetric_for_equal_currents(tmp_path, tiny_config):
    out = tmp_path / 'field'
    assert main.main(['field-map', '--config', tiny_config, '--out', str(out), '--nx', '5', '--ny', '5']) == 0
    frame = pd.read_csv(out / 'field_map.csv')
    # rows run over x fastest
    bz = frame['Bz'].to_numpy().reshape(5, 5)
    grad = frame['grad_norm'].to_numpy().reshape(5, 5)
    np.testing.assert_allclose(bz, bz[:, ::-1], rtol=1e-9)
    np.testing.assert_allclose(grad, grad[::-1, :], rtol=1e-9)
    centre = frame.iloc[12]
    assert abs(centre['Bx']) < 1e-9 * abs(centre['Bz']) and abs(centre['By']) < 1e-9 * abs(centre['Bz'])


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(main.OUTPUT_ROOT_VAR, str(tmp_path))
    assert main.resolve_out_dir('runs/x', 'train') == tmp_path / 'runs' / 'x'
    assert main.resolve_out_dir(None, 'eval') == tmp_path / 'runs' / 'eval'


def test_unknown_subcommand_is_a_usage_error():
    with pytest.raises(SystemExit) as excinfo:
        main.parse_args(['dance'])
    assert excinfo.value.code == 2


def artifact_bytes(out_dir):
    """Tables, reports and checkpoints (not the manifest), keyed by relative path."""
    return {path.relative_to(out_dir).as_posix(): path.read_bytes()
            for path in sorted(out_dir.rglob('*'))
            if path.suffix in ('.csv', '.json', '.txt', '.mcap') and path.name != MANIFEST_NAME}


def test_identical_runs_give_identical_artifacts(tmp_path, tiny_config):
    runs = []
    for name in ('first', 'second'):
        train_dir = tmp_path / name / 'train'
        assert main.main(['train', '--config', tiny_config, '--out', str(train_dir), '--steps', '24']) == 0
        eval_dir = tmp_path / name / 'eval'
        assert main.main(['eval', '--config', tiny_config, '--out', str(eval_dir), '--controllers', 'zero,pid,drl',
                          '--paths', 'square', '--trials', '2', '--jobs', '2',
                          '--checkpoint', str(train_dir / 'checkpoint.mcap')]) == 0
        runs.append((artifact_bytes(train_dir), artifact_bytes(eval_dir)))

    (train_a, eval_a), (train_b, eval_b) = runs
    assert {'checkpoint.mcap', 'learning_curve.csv'} <= set(train_a)
    assert any(name.startswith('reports/drl_square') for name in eval_a)
    assert train_a == train_b
    assert eval_a == eval_b
