from pathlib import Path

from ragforge.records import (
    REFUSAL_ANSWER,
    ScoredNegative,
    TrainingPair,
    dump_json_line,
    read_jsonl,
    write_jsonl,
)


def test_refusal_string_exact_bytes():
    assert REFUSAL_ANSWER == "Sorry. I cannot find the answer based on the context."
    assert REFUSAL_ANSWER.encode("utf-8") == (
        b"Sorry. I cannot find the answer based on the context."
    )


def test_training_pair_round_trip():
    pair = TrainingPair(
        query="what is basalt",
        positive="Basalt is a volcanic rock.",
        positive_id="doc1#0000",
        negatives=[ScoredNegative("doc2#0001", "Granite is plutonic.", 0.31)],
        instruction="Given a question, retrieve passages",
        task_type="qa",
    )
    assert TrainingPair.from_dict(pair.to_dict()) == pair


def test_quality_label_omitted_when_unset():
    pair = TrainingPair(query="q", positive="p")
    assert "quality_label" not in pair.to_dict()
    pair.quality_label = 2
    assert pair.to_dict()["quality_label"] == 2


def test_jsonl_round_trip(tmp_path: Path):
    path = tmp_path / "pairs.jsonl"
    records = [{"a": 1}, {"b": "x", "c": [1, 2]}]
    assert write_jsonl(path, records) == 2
    assert list(read_jsonl(path)) == records


def test_read_jsonl_skips_blank_lines(tmp_path: Path):
    path = tmp_path / "data.jsonl"
    path.write_text('{"a":1}\n\n\n{"a":2}\n', encoding="utf-8")
    assert list(read_jsonl(path)) == [{"a": 1}, {"a": 2}]


def test_dump_json_line_compact_and_stable():
    line = dump_json_line({"b": 1, "a": "ü"})
    assert line == '{"b":1,"a":"ü"}'
    assert "\n" not in line
