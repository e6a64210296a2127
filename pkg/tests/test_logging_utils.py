"""
Tests for the JSONL run journal.
"""

import threading

import numpy as np
import pytest

from src.logging_utils import (
    JOURNAL_NAME, append_jsonl, filter_jsonl_by_kind, get_latest_jsonl_entry, journal_event, read_jsonl,
    validate_jsonl_format,
)


class TestAppend:
    def test_one_sorted_object_per_line(self, tmp_path):
        path = tmp_path / 'nested' / 'log.jsonl'
        append_jsonl(str(path), {'kind': 'start', 'b': 2, 'a': 1})
        append_jsonl(str(path), {'kind': 'finish'})
        lines = path.read_text().splitlines()
        assert len(lines) == 2
        assert lines[0] == '{"a":1,"b":2,"kind":"start"}'

    def test_numpy_values(self, tmp_path):
        path = str(tmp_path / 'log.jsonl')
        append_jsonl(path, {'kind': 'residual', 'value': np.float64(0.5), 'vector': np.arange(3)})
        record = read_jsonl(path)[0]
        assert record['value'] == 0.5
        assert record['vector'] == [0, 1, 2]

    def test_rejects_non_dict_and_unserializable(self, tmp_path):
        path = str(tmp_path / 'log.jsonl')
        with pytest.raises(TypeError):
            append_jsonl(path, ['kind'])
        with pytest.raises(TypeError, match="serializable"):
            append_jsonl(path, {'kind': 'x', 'value': object()})

    def test_concurrent_appends_stay_whole(self, tmp_path):
        path = str(tmp_path / 'log.jsonl')

        def writer(k):
            for i in range(50):
                append_jsonl(path, {'kind': 'step', 'writer': k, 'i': i})

        threads = [threading.Thread(target=writer, args=(k,)) for k in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(read_jsonl(path)) == 200


class TestJournal:
    def test_event(self, tmp_path):
        record = journal_event(str(tmp_path), 'start', command='simulate')
        assert record['kind'] == 'start' and 'ts' in record
        assert read_jsonl(str(tmp_path / JOURNAL_NAME)) == [record]

    def test_filter_and_latest(self, tmp_path):
        for kind in ('start', 'error', 'finish'):
            journal_event(str(tmp_path), kind)
        path = str(tmp_path / JOURNAL_NAME)
        assert [r['kind'] for r in filter_jsonl_by_kind(path, 'error')] == ['error']
        assert get_latest_jsonl_entry(path)['kind'] == 'finish'

    def test_missing_file(self, tmp_path):
        path = str(tmp_path / 'none.jsonl')
        assert get_latest_jsonl_entry(path) is None
        assert filter_jsonl_by_kind(path, 'start') == []
        assert validate_jsonl_format(path)[0]
        with pytest.raises(FileNotFoundError):
            read_jsonl(path)


class TestValidation:
    def test_invalid_line(self, tmp_path):
        path = tmp_path / 'log.jsonl'
        path.write_text('{"kind": "start"}\nnot json\n')
        with pytest.raises(ValueError, match="line 2"):
            read_jsonl(str(path))
        valid, message = validate_jsonl_format(str(path))
        assert not valid and 'line 2' in message

    def test_missing_kind(self, tmp_path):
        path = tmp_path / 'log.jsonl'
        path.write_text('{"ts": 1}\n')
        valid, message = validate_jsonl_format(str(path))
        assert not valid and 'kind' in message

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / 'log.jsonl'
        path.write_text('{"kind": "a"}\n\n{"kind": "b"}\n')
        assert validate_jsonl_format(str(path)) == (True, "Valid JSONL format")
