import json

import numpy as np
import pytest

from mmdistill.data import (
    EMPTY,
    FAMILIES,
    NOWHERE,
    Conversation,
    Dataset,
    Facts,
    GridConfig,
    ToyImage,
    Vocabulary,
    code_of,
    make_conversation,
    make_dataset,
    make_world,
    oracle_answer,
    regenerate_with_student,
    regenerate_with_teacher,
    render_cells,
    tokenize,
)
from mmdistill.errors import ConfigurationError, ContractError, ParameterError, TokenizationError
from mmdistill.model import ModelSpec, TransformerLM


def cells(rows):
    return np.array(rows, dtype=np.int64)


class TestVocabulary:
    def test_bijective(self):
        v = Vocabulary()
        assert len(v) == 512 and len(set(v.symbols)) == 512
        assert all(v.index[s] == i for i, s in enumerate(v.symbols))

    def test_roundtrip(self):
        v = Vocabulary()
        text = "how many red objects are there ?"
        assert v.decode(v.encode(text)) == text

    def test_unknown_word(self):
        with pytest.raises(TokenizationError):
            Vocabulary().encode("how many purple objects")

    def test_too_small(self):
        with pytest.raises(ConfigurationError):
            Vocabulary(size=10)


class TestWorlds:
    def test_deterministic(self):
        assert make_world(5)[0] == make_world(5)[0]

    def test_fill_zero_is_all_empty(self):
        image, facts = make_world(1, GridConfig(fill_percent=0))
        assert facts.counts()[EMPTY] == 16 and not np.any(image.array)

    def test_fill_hundred_is_full(self):
        _, facts = make_world(2, GridConfig(fill_percent=100))
        assert facts.counts()[EMPTY] == 0

    def test_invalid_grid(self):
        with pytest.raises(ConfigurationError):
            GridConfig(rows=0)

    def test_render_is_colored_where_filled(self):
        grid = cells([[code_of("red", "square"), 0], [0, 0]])
        px = render_cells(grid, patch_size=4)
        assert px.shape == (8, 8, 3)
        assert px[:4, :4, 0].sum() == 12 and px[:4, :4, 1:].sum() == 0
        assert not px[4:].any() and not px[:, 4:].any()

    def test_distinct_codes_render_distinct_patches(self):
        patches = {render_cells(cells([[k]])).tobytes() for k in range(7)}
        assert len(patches) == 7


class TestFacts:
    GRID = cells([
        [code_of("red", "circle"), 0, code_of("blue", "square")],
        [code_of("red", "square"), code_of("red", "circle"), 0],
    ])

    def test_counts(self):
        f = Facts(self.GRID)
        assert f.count("red") == 3 and f.count("circle") == 2 and f.count("green") == 0
        assert f.counts()[EMPTY] == 2

    def test_presence(self):
        f = Facts(self.GRID)
        assert f.present("blue", "square") and not f.present("blue", "circle")

    def test_locate_first_in_raster_order(self):
        f = Facts(self.GRID)
        assert f.locate("red", "circle") == "row 1 column 1"
        assert f.locate("blue", "square") == "row 1 column 3"
        assert f.locate("green", "circle") == NOWHERE

    def test_shapes_of(self):
        f = Facts(self.GRID)
        assert f.shapes_of("red") == "circle square"
        assert f.shapes_of("blue") == "square"
        assert f.shapes_of("green") == "none"

    def test_unknown_attribute(self):
        with pytest.raises(ParameterError):
            Facts(self.GRID).count("purple")


class TestConversations:
    def test_answers_match_the_oracle(self):
        ds = make_dataset(2000, 11)
        for conv in ds.conversations:
            assert conv.answer == oracle_answer(conv)

    def test_every_family_appears(self):
        ds = make_dataset(400, 12)
        assert {c.family for c in ds.conversations} == set(FAMILIES)

    def test_restricted_template_set(self):
        ds = make_dataset(50, 13, families=("presence",))
        assert all(c.answer in ("yes", "no") for c in ds.conversations)

    def test_empty_template_set(self):
        _, facts = make_world(0)
        with pytest.raises(ConfigurationError):
            make_conversation(facts, 0, ())

    def test_unknown_family(self):
        _, facts = make_world(0)
        with pytest.raises(ConfigurationError):
            make_conversation(facts, 0, ("colour",))

    def test_position_prefers_unique_objects(self):
        ds = make_dataset(500, 14, families=("position",))
        for c in ds.conversations:
            f = Facts(c.image.array)
            color, shape = c.instruction.split(" ")[3:5]
            counts = [f.count_code(k) for k in range(1, 7)]
            if min(counts) <= 1:
                assert f.count_code(code_of(color, shape)) <= 1

    def test_conversation_contract(self):
        image = make_world(0)[0]
        with pytest.raises(ContractError):
            Conversation(image, [{"role": "instruction", "text": "is there a red circle ?"},
                                 {"role": "answer", "text": "  "}])
        with pytest.raises(ContractError):
            Conversation(image, [{"role": "answer", "text": "yes"}])


class TestTokenize:
    def test_layout_and_masks(self):
        v = Vocabulary()
        conv = make_dataset(1, 0, families=("presence",))[0]
        tok = tokenize(conv, v, 16)
        n_instr = len(conv.instruction.split(" "))
        n_ans = len(conv.answer.split(" "))
        assert tok.ids[0] == v.bos_id and (tok.ids[1:17] == v.img_id).all()
        assert tok.ids[17 + n_instr] == v.sep_id and tok.ids[-1] == v.eos_id
        assert len(tok.ids) == 1 + 16 + n_instr + 1 + n_ans + 1
        assert tok.answer_mask.sum() == n_ans + 1
        assert tok.image_mask.sum() == 16 and tok.instruction_mask.sum() == n_instr
        assert tok.prompt_len == 1 + 16 + n_instr + 1

    def test_batch_padding_excluded_from_masks(self):
        ds = make_dataset(30, 1)
        b = ds.batch(range(30))
        pad = b.ids == ds.vocab.pad_id
        assert pad.any()
        for m in (b.answer_mask, b.all_mask, b.image_mask, b.instruction_mask):
            assert not (m & pad).any()
        assert b.images.shape == (30, 16, 16, 3)


class TestDatasets:
    def test_deterministic(self):
        a, b = make_dataset(100, 7), make_dataset(100, 7)
        assert [c.to_record() for c in a.conversations] == [c.to_record() for c in b.conversations]

    def test_splits_are_disjoint_streams(self):
        a, b = make_dataset(50, 7, "train"), make_dataset(50, 7, "eval")
        assert [c.image for c in a.conversations] != [c.image for c in b.conversations]

    def test_unknown_split(self):
        with pytest.raises(ConfigurationError):
            make_dataset(1, 0, "test")

    def test_save_load_roundtrip(self, tmp_path):
        ds = make_dataset(40, 8)
        path = ds.save(tmp_path / "d.jsonl")
        back = Dataset.load(path)
        assert [c.to_record() for c in back.conversations] == [c.to_record() for c in ds.conversations]
        assert np.array_equal(back.pixels(), ds.pixels())
        first = json.loads(path.read_text().splitlines()[0])
        assert first["schema_version"] == 1 and first["provenance"] == "original"

    def test_schema_version_checked(self, tmp_path):
        rec = make_dataset(1, 0)[0].to_record()
        rec["schema_version"] = 99
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(rec) + "\n")
        with pytest.raises(ConfigurationError):
            Dataset.load(path)


@pytest.fixture(scope="module")
def untrained():
    return TransformerLM(ModelSpec(num_layers=1, hidden_dim=16, num_heads=2), seed=0)


class TestRegeneration:
    def test_teacher_regeneration_keeps_images_and_questions(self, untrained):
        ds = make_dataset(20, 9)
        out, stats = regenerate_with_teacher(ds, untrained)
        assert stats.regenerated + stats.flagged == 20 and stats.untouched == 0
        for a, b in zip(ds.conversations, out.conversations):
            assert a.image == b.image and a.instruction == b.instruction
            assert b.provenance in ("original", "teacher_regenerated")
        assert out.provenance_counts()["teacher_regenerated"] == stats.regenerated

    def test_student_fraction(self, untrained):
        ds = make_dataset(21, 10)
        out, stats = regenerate_with_student(ds, untrained, 0.5, rng_seed=3)
        assert stats.regenerated + stats.flagged == 10 and stats.untouched == 11

    def test_student_zero_fraction_is_identity(self, untrained):
        ds = make_dataset(10, 10)
        out, stats = regenerate_with_student(ds, untrained, 0.0)
        assert stats.to_dict() == {"regenerated": 0, "flagged": 0, "untouched": 10}
        assert [c.to_record() for c in out.conversations] == [c.to_record() for c in ds.conversations]

    def test_student_regenerated_rows_skip_ce(self):
        ds = make_dataset(4, 0)
        convs = list(ds.conversations)
        convs[1] = convs[1].with_answer("yes", "student_regenerated")
        b = Dataset(convs).batch(range(4))
        assert b.ce_rows.tolist() == [True, False, True, True]

    def test_fraction_out_of_range(self, untrained):
        with pytest.raises(ParameterError):
            regenerate_with_student(make_dataset(2, 0), untrained, 1.5)

    def test_image_equality_is_by_cells(self):
        assert ToyImage(((1, 0),)) == ToyImage(((1, 0),))
