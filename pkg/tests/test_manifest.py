import asyncio

from services.manifest_service import MANIFEST_NAME, RunManifest, manifest_service
from utils.errors import EXIT_IO


def sample_manifest(out_dir):
    (out_dir / 'reports').mkdir()
    (out_dir / 'checkpoint.mcap').write_bytes(b'\x00')
    (out_dir / 'reports' / 'pid_square_0.json').write_text('{}\n', encoding='utf-8')
    manifest = RunManifest(
        command='eval',
        config={'seed': 4, 'sac': {'hidden_sizes': [8, 8], 'lr_sim': 0.1 + 0.2}, 'tracking': {'trials': 2}},
        seeds=[4, 2718281828],
        timestamps={'started': '2026-01-01T00:00:00+00:00'},
        durations={'stage1': 1.0 / 3.0},
        metadata={'fingerprint': 'ab' * 32, 'failed': None},
    )
    manifest.add_artifact('checkpoint', out_dir / 'checkpoint.mcap', out_dir)
    manifest.add_artifact('report', out_dir / 'reports' / 'pid_square_0.json', out_dir)
    return manifest


def test_manifest_round_trips_losslessly(tmp_path):
    manifest = sample_manifest(tmp_path)
    assert asyncio.run(manifest_service.write_manifest(manifest, tmp_path))['success']
    result = asyncio.run(manifest_service.read_manifest(tmp_path))
    assert result['success']
    restored = result['manifest']
    assert restored == manifest
    assert restored.artifacts == {'checkpoint': 'checkpoint.mcap', 'report': 'reports/pid_square_0.json'}
    assert restored.durations['stage1'] == 1.0 / 3.0
    assert restored.config['sac']['lr_sim'] == 0.1 + 0.2


def test_rewriting_a_read_manifest_gives_the_same_bytes(tmp_path):
    asyncio.run(manifest_service.write_manifest(sample_manifest(tmp_path), tmp_path))
    first = (tmp_path / MANIFEST_NAME).read_bytes()
    restored = asyncio.run(manifest_service.read_manifest(tmp_path))['manifest']
    asyncio.run(manifest_service.write_manifest(restored, tmp_path))
    assert (tmp_path / MANIFEST_NAME).read_bytes() == first


def test_manifest_with_missing_artifact_is_not_written(tmp_path):
    manifest = RunManifest('train', {'seed': 0}, artifacts={'checkpoint': 'checkpoint.mcap'})
    result = asyncio.run(manifest_service.write_manifest(manifest, tmp_path))
    assert not result['success'] and result['exit_code'] == EXIT_IO
    assert not (tmp_path / MANIFEST_NAME).exists()


def test_reading_a_missing_or_corrupt_manifest_fails(tmp_path):
    assert not asyncio.run(manifest_service.read_manifest(tmp_path))['success']
    (tmp_path / MANIFEST_NAME).write_text('{not json', encoding='utf-8')
    result = asyncio.run(manifest_service.read_manifest(tmp_path))
    assert not result['success'] and result['exit_code'] == EXIT_IO
