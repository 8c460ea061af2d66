"""Checkpoint files, JSON, tables and the output root."""

import json

import pandas as pd
import pytest
import torch

from src.storage import (CHECKPOINT_MANIFEST, load_checkpoint, load_json, resolve_output_root, save_checkpoint,
                         save_json, save_report, save_table)


class TestCheckpoint:

    def test_round_trip_is_bit_exact(self, tmp_path):
        generator = torch.Generator().manual_seed(0)
        tensors = {
            'weight': torch.randn(3, 4, generator=generator),
            'double': torch.randn(5, generator=generator, dtype=torch.float64),
            'labels': torch.tensor([3, -1, 7]),
            'scalar': torch.tensor(2.5),
        }
        save_checkpoint(tmp_path, tensors, {'epoch': 3, 'note': 'x'})
        loaded, metadata = load_checkpoint(tmp_path)
        assert metadata == {'epoch': 3, 'note': 'x'}
        for name, tensor in tensors.items():
            assert loaded[name].dtype == tensor.dtype
            assert torch.equal(loaded[name], tensor)

    def test_narrow_integers_widen_to_int64(self, tmp_path):
        save_checkpoint(tmp_path, {'small': torch.tensor([1, 2], dtype=torch.int32)}, {})
        loaded, _ = load_checkpoint(tmp_path)
        assert loaded['small'].dtype == torch.int64
        assert loaded['small'].tolist() == [1, 2]

    def test_manifest_is_readable_json(self, tmp_path):
        save_checkpoint(tmp_path, {'w': torch.zeros(2, 2)}, {})
        manifest = json.loads((tmp_path / CHECKPOINT_MANIFEST).read_text())
        assert manifest['arrays']['w'] == {'file': 'w.bin', 'shape': [2, 2], 'dtype': '<f4'}

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path)

    def test_truncated_array(self, tmp_path):
        save_checkpoint(tmp_path, {'w': torch.zeros(4)}, {})
        (tmp_path / 'w.bin').write_bytes(b'\x00' * 8)
        with pytest.raises(ValueError, match='manifest says 4'):
            load_checkpoint(tmp_path)

    def test_unknown_format_version(self, tmp_path):
        save_checkpoint(tmp_path, {'w': torch.zeros(1)}, {})
        manifest = json.loads((tmp_path / CHECKPOINT_MANIFEST).read_text())
        manifest['format_version'] = 99
        (tmp_path / CHECKPOINT_MANIFEST).write_text(json.dumps(manifest))
        with pytest.raises(ValueError, match='format'):
            load_checkpoint(tmp_path)


class TestFiles:

    def test_output_root_from_environment(self, monkeypatch, tmp_path):
        monkeypatch.setenv('CONTRAST_OUTPUT_ROOT', str(tmp_path))
        assert resolve_output_root('runs') == tmp_path
        monkeypatch.delenv('CONTRAST_OUTPUT_ROOT')
        assert str(resolve_output_root('runs')) == 'runs'

    def test_table_uses_lf_and_no_index(self, tmp_path):
        path = save_table(pd.DataFrame({'a': [1, 2], 'b': ['x', 'y']}), tmp_path / 'sub' / 't.csv')
        assert path.read_bytes() == b'a,b\n1,x\n2,y\n'

    def test_json_round_trip(self, tmp_path):
        data = {'a': [1, 2.5], 'b': {'c': None}}
        assert load_json(save_json(data, tmp_path / 'd.json')) == data

    def test_missing_json(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_json(tmp_path / 'none.json')

    def test_report(self, tmp_path):
        path = save_report('# title\n', tmp_path / 'r.md')
        assert path.read_text() == '# title\n'
