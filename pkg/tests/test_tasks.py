"""Tests for the synthetic task generators and dataset files."""

import numpy as np
import pytest

from mambalrp import tasks
from mambalrp.errors import ConfigError, FormatError
from mambalrp.model import PAD_TOKEN


def spec_for(kind, **overrides):
    return tasks.default_spec(kind).replace(**overrides)


# ---------------------------------------------------------------------------
# spec validation
# ---------------------------------------------------------------------------

def test_spec_rejects_unknown_kind():
    with pytest.raises(ConfigError):
        tasks.TaskSpec(kind="parity", vocab_size=8, min_length=4,
                       max_length=4, num_classes=2)
    with pytest.raises(ConfigError):
        tasks.default_spec("parity")


def test_spec_rejects_bad_lengths_and_classes():
    with pytest.raises(ConfigError):
        spec_for("keyword-sentiment", min_length=8, max_length=4)
    with pytest.raises(ConfigError):
        spec_for("keyword-sentiment", min_length=1, max_length=4)
    with pytest.raises(ConfigError):
        spec_for("keyword-sentiment", num_classes=1)


def test_keyword_spec_requires_room_for_keywords_and_filler():
    # 2 classes use ids 1..4, padding uses 0, so vocab 6 is the minimum.
    spec_for("keyword-sentiment", vocab_size=6)
    with pytest.raises(ConfigError):
        spec_for("keyword-sentiment", vocab_size=5)


def test_needle_spec_requires_fitting_needle():
    with pytest.raises(ConfigError):
        spec_for("passkey-needle", needle_width=0)
    with pytest.raises(ConfigError):
        spec_for("passkey-needle", needle_width=25)
    with pytest.raises(ConfigError):
        spec_for("passkey-needle", vocab_size=5)


def test_copy_spec_requires_label_space_equal_to_vocabulary():
    with pytest.raises(ConfigError):
        spec_for("copy-previous", num_classes=11)


# ---------------------------------------------------------------------------
# generation invariants
# ---------------------------------------------------------------------------

def test_generation_is_deterministic_per_seed():
    spec = tasks.default_spec("keyword-sentiment")
    a = tasks.generate(spec, 5)
    b = tasks.generate(spec, 5)
    for x, y in zip(a, b):
        assert np.array_equal(x.tokens, y.tokens)
        assert x.label == y.label and x.span == y.span
    c = tasks.generate(spec.replace(seed=1), 5)
    assert any(not np.array_equal(x.tokens, y.tokens) for x, y in zip(a, c))


def test_generation_prefixes_are_stable():
    spec = tasks.default_spec("passkey-needle")
    long = tasks.generate(spec, 8)
    short = tasks.generate(spec, 3)
    for x, y in zip(short, long):
        assert np.array_equal(x.tokens, y.tokens)


def test_generate_rejects_negative_count_and_allows_zero():
    spec = tasks.default_spec("copy-previous")
    assert tasks.generate(spec, 0) == []
    with pytest.raises(ConfigError):
        tasks.generate(spec, -1)


@pytest.mark.parametrize("kind", tasks.KINDS)
def test_examples_fit_the_model_contract(kind):
    spec = tasks.default_spec(kind)
    for ex in tasks.generate(spec, 20):
        assert spec.min_length <= len(ex.tokens) <= spec.max_length
        assert 0 <= ex.label < spec.num_classes
        assert ex.tokens.min() > PAD_TOKEN  # padding id never generated
        assert ex.tokens.max() < spec.vocab_size
        assert all(0 <= p < len(ex.tokens) for p in ex.span)


def test_variable_lengths_cover_the_range():
    spec = spec_for("keyword-sentiment", min_length=6, max_length=12)
    lengths = {len(ex.tokens) for ex in tasks.generate(spec, 60)}
    assert min(lengths) >= 6 and max(lengths) <= 12
    assert len(lengths) > 1


# ---------------------------------------------------------------------------
# keyword task
# ---------------------------------------------------------------------------

def test_keyword_span_holds_label_keywords_and_rest_is_filler():
    spec = tasks.default_spec("keyword-sentiment")
    for ex in tasks.generate(spec, 30):
        ids = set(tasks.keyword_ids(spec, ex.label))
        assert 1 <= len(ex.span) <= 3
        for pos in ex.span:
            assert int(ex.tokens[pos]) in ids
        others = np.delete(ex.tokens, list(ex.span))
        assert others.min() > 2 * spec.num_classes  # filler ids only
        assert tasks.keyword_label(spec, ex.tokens) == ex.label


def test_keyword_label_flips_when_keywords_are_swapped():
    spec = tasks.default_spec("keyword-sentiment")
    for ex in tasks.generate(spec, 10):
        other = (ex.label + 1) % spec.num_classes
        swapped = ex.tokens.copy()
        swapped[list(ex.span)] = tasks.keyword_ids(spec, other)[0]
        assert tasks.keyword_label(spec, swapped) == other


def test_keyword_label_rejects_sequences_without_keywords():
    spec = tasks.default_spec("keyword-sentiment")
    with pytest.raises(ConfigError):
        tasks.keyword_label(spec, np.full(8, spec.vocab_size - 1))


def test_keyword_ids_partition_classes():
    spec = spec_for("keyword-sentiment", vocab_size=20, num_classes=3)
    seen = set()
    for label in range(3):
        ids = tasks.keyword_ids(spec, label)
        assert len(ids) == 2 and not seen & set(ids)
        seen |= set(ids)
    assert seen == set(range(1, 7))
    with pytest.raises(ConfigError):
        tasks.keyword_ids(spec, 3)


# ---------------------------------------------------------------------------
# passkey task
# ---------------------------------------------------------------------------

def test_needle_sits_on_a_shared_background():
    spec = tasks.default_spec("passkey-needle")
    motif = tasks.background_motif(spec, spec.min_length)
    for ex in tasks.generate(spec, 30):
        assert len(ex.span) == spec.needle_width
        assert ex.span == tuple(range(ex.span[0], ex.span[0] + spec.needle_width))
        assert np.all(ex.tokens[list(ex.span)] == 1 + ex.label)
        outside = np.delete(np.arange(len(ex.tokens)), list(ex.span))
        assert np.array_equal(ex.tokens[outside], motif[outside])
        # background never contains any passkey id
        assert ex.tokens[outside].min() > spec.num_classes


def test_needle_positions_vary_across_examples():
    spec = tasks.default_spec("passkey-needle")
    starts = {ex.span[0] for ex in tasks.generate(spec, 40)}
    assert len(starts) > 5


def test_background_motif_only_for_needle_task():
    with pytest.raises(ConfigError):
        tasks.background_motif(tasks.default_spec("copy-previous"), 8)


# ---------------------------------------------------------------------------
# copy task
# ---------------------------------------------------------------------------

def test_copy_label_is_the_second_to_last_token():
    spec = tasks.default_spec("copy-previous")
    for ex in tasks.generate(spec, 30):
        assert ex.label == int(ex.tokens[-2])
        assert ex.span == (len(ex.tokens) - 2,)


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def test_jsonl_round_trip(tmp_path):
    spec = tasks.default_spec("keyword-sentiment")
    examples = tasks.generate(spec, 7)
    path = tmp_path / "data.jsonl"
    tasks.save_jsonl(examples, path)
    loaded = tasks.load_jsonl(path)
    assert len(loaded) == 7
    for x, y in zip(examples, loaded):
        assert np.array_equal(x.tokens, y.tokens)
        assert x.label == y.label and x.span == y.span


def test_jsonl_files_are_byte_stable(tmp_path):
    spec = tasks.default_spec("passkey-needle")
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    tasks.save_jsonl(tasks.generate(spec, 5), a)
    tasks.save_jsonl(tasks.generate(spec, 5), b)
    assert a.read_bytes() == b.read_bytes()


def test_load_rejects_malformed_lines(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"tokens": [1, 2], "label": 0, "span": [0]}\nnot json\n')
    with pytest.raises(FormatError, match="line|:2"):
        tasks.load_jsonl(path)
    path.write_text('{"tokens": [1, 2], "span": [0]}\n')
    with pytest.raises(FormatError, match="label"):
        tasks.load_jsonl(path)
    path.write_text('{"tokens": [], "label": 0, "span": []}\n')
    with pytest.raises(FormatError, match="tokens"):
        tasks.load_jsonl(path)
    path.write_text('{"tokens": [1, "x"], "label": 0, "span": []}\n')
    with pytest.raises(FormatError, match="tokens"):
        tasks.load_jsonl(path)
    path.write_text('{"tokens": [1], "label": true, "span": []}\n')
    with pytest.raises(FormatError, match="label"):
        tasks.load_jsonl(path)
    path.write_text('[1, 2, 3]\n')
    with pytest.raises(FormatError, match="object"):
        tasks.load_jsonl(path)


def test_load_skips_blank_lines(tmp_path):
    path = tmp_path / "gaps.jsonl"
    path.write_text('{"tokens": [1], "label": 0, "span": []}\n\n'
                    '{"tokens": [2], "label": 1, "span": [0]}\n')
    assert len(tasks.load_jsonl(path)) == 2
