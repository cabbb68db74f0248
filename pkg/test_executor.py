import json

import jsonlines
import numpy as np
import pytest

from src.boxes import Box
from src.errors import AnnotationError
from src.executor import ImageJobExecutor
from src.logger import convert_to_serializable, write_to_log_file


def test_results_sorted_by_image_id():
    executor = ImageJobExecutor(lambda image_id, item: item * 2, max_workers=4)
    results = executor.run([("c", 3), ("a", 1), ("b", 2)])
    assert [r["image_id"] for r in results] == ["a", "b", "c"]
    assert [r["data"] for r in results] == [2, 4, 6]
    assert all(r["success"] for r in results)


def test_failures_are_captured():
    def job(image_id, item):
        if image_id == "bad":
            raise AnnotationError("broken mask")
        return item

    results = ImageJobExecutor(job, max_workers=1).run([("ok", 1), ("bad", 2)])
    failed = [r for r in results if not r["success"]]
    assert len(failed) == 1
    assert failed[0]["metadata"]["error_type"] == "AnnotationError"
    assert "broken mask" in failed[0]["summary"]


def test_run_or_raise_reraises_first_failure():
    def job(image_id, item):
        raise ValueError(image_id)

    with pytest.raises(ValueError, match="a"):
        ImageJobExecutor(job, max_workers=2).run_or_raise([("b", 0), ("a", 0)])


def test_run_or_raise_maps_ids():
    assert ImageJobExecutor(lambda i, x: x + 1, max_workers=2).run_or_raise([("x", 1), ("y", 2)]) == {"x": 2, "y": 3}


def test_convert_to_serializable():
    value = {
        "box": Box(0, 1, 2, 3),
        "scores": np.array([0.5, 1.0]),
        "count": np.int64(3),
        "flags": (np.bool_(True),),
    }
    converted = convert_to_serializable(value)
    assert converted == {
        "box": {"x1": 0, "y1": 1, "x2": 2, "y2": 3},
        "scores": [0.5, 1.0],
        "count": 3,
        "flags": [True],
    }
    json.dumps(converted)


def test_write_to_log_file_appends_jsonlines(tmp_path):
    for i in range(2):
        write_to_log_file({"iteration": i}, "train.jsonl", run_id="r1", jsonlines_flag=True, log_dir=str(tmp_path))
    with jsonlines.open(tmp_path / "train.jsonl") as reader:
        assert list(reader) == [{"id": "r1", "record": {"iteration": 0}}, {"id": "r1", "record": {"iteration": 1}}]


def test_write_to_log_file_plain(tmp_path):
    write_to_log_file(["a", 1], "plain.log", log_dir=str(tmp_path / "nested"))
    assert (tmp_path / "nested" / "plain.log").read_text() == '["a", 1]\n'
