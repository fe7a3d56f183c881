import json

import numpy as np
import pytest

from decorrec.encoder import SentenceEncoder
from decorrec.feedback import (
    DEFAULT_GRAMMAR, GrammarSentenceSource, ManifestSentenceSource,
    ObjectDetection, compose_sentences, detect_objects, filter_differences,
    load_grammar,
)


@pytest.fixture(scope="module")
def enc(clean_db):
    return SentenceEncoder.for_database(clean_db)


class TestDetectObjects:
    def test_noise_free_recovers_tags(self, clean_db):
        for item in clean_db.items[:8]:
            det = detect_objects(item, clean_db, m=len(item.objects))
            assert {tag for tag, _ in det.ranked} == set(item.objects)

    def test_scores_nonincreasing(self, tiny_db):
        det = detect_objects(tiny_db.items[0], tiny_db, m=10)
        scores = [s for _, s in det.ranked]
        assert all(a >= b for a, b in zip(scores, scores[1:]))

    def test_m_one(self, clean_db):
        det = detect_objects(clean_db.items[0], clean_db, m=1)
        assert len(det.ranked) == 1
        assert det.ranked[0][0] in clean_db.items[0].objects

    def test_m_larger_than_dictionary(self, tiny_db):
        det = detect_objects(tiny_db.items[0], tiny_db, m=999)
        assert len(det.ranked) == len(tiny_db.object_names)

    def test_ties_break_by_dictionary_order(self):
        # standard-basis dictionary makes the two true tags tie bit-exactly
        from decorrec.embedding import Item, ItemDatabase
        names = ["w", "x", "y", "z"]
        db = ItemDatabase(
            [Item(id="a", embedding=np.array([1.0, 1.0, 0.0, 0.0]), objects=["w", "x"]),
             Item(id="b", embedding=np.array([0.0, 0.0, 1.0, 1.0]), objects=["y", "z"])],
            object_names=names, object_vectors=np.eye(4),
        )
        det = detect_objects(db.items[0], db, m=4)
        assert [t for t, _ in det.ranked] == ["w", "x", "y", "z"]

    def test_matches_sort_oracle(self, tiny_db):
        from decorrec.embedding import cosine_sim
        item = tiny_db.items[3]
        sims = [cosine_sim(item.embedding, tiny_db.object_vectors[i])
                for i in range(len(tiny_db.object_names))]
        oracle = sorted(range(len(sims)), key=lambda i: (-sims[i], i))[:5]
        det = detect_objects(item, tiny_db, m=5)
        assert [t for t, _ in det.ranked] == [tiny_db.object_names[i] for i in oracle]


class TestComposeSentences:
    def test_focus_appears(self):
        det = ObjectDetection(item_id="x", ranked=[("sofa", 0.9)])
        sentences = compose_sentences(det, DEFAULT_GRAMMAR)
        assert sentences and all("sofa" in s.text for s in sentences)
        assert all(s.focus == "sofa" for s in sentences)

    def test_empty_grammar(self):
        det = ObjectDetection(item_id="x", ranked=[("sofa", 0.9)])
        assert compose_sentences(det, []) == []

    def test_count_is_objects_times_patterns(self):
        det = ObjectDetection(item_id="x", ranked=[("sofa", 0.9), ("fireplace", 0.8)])
        assert len(compose_sentences(det, DEFAULT_GRAMMAR)) == 2 * len(DEFAULT_GRAMMAR)

    def test_empty_detection_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            compose_sentences(ObjectDetection(item_id="x", ranked=[]), DEFAULT_GRAMMAR)


class TestFilterDifferences:
    def find_pair(self, db):
        """(action, target) with at least one tag on each side only."""
        for a in db.items:
            for t in db.items:
                only_t = set(t.objects) - set(a.objects)
                only_a = set(a.objects) - set(t.objects)
                if only_t and only_a:
                    return a, t, only_t, only_a
        raise AssertionError("no suitable pair")

    def test_target_only_attribute_preferred(self, clean_db, enc):
        a, t, only_t, only_a = self.find_pair(clean_db)
        sentences = [f"a room with {tag}" for tag in sorted(only_t)]
        out = filter_differences(sentences, a, t, 0.1, enc)
        assert out["prefer"] == sentences and not out["dislike"]

    def test_action_only_attribute_disliked(self, clean_db, enc):
        a, t, only_t, only_a = self.find_pair(clean_db)
        sentences = [f"a room with {tag}" for tag in sorted(only_a)]
        out = filter_differences(sentences, a, t, 0.1, enc)
        assert out["dislike"] == sentences and not out["prefer"]

    def test_shared_attribute_dropped(self, clean_db, enc):
        for a in clean_db.items:
            for t in clean_db.items:
                shared = set(a.objects) & set(t.objects)
                if a.id != t.id and shared:
                    sentence = f"a room with {sorted(shared)[0]}"
                    out = filter_differences([sentence], a, t, 0.1, enc)
                    assert out["dropped"] == [sentence]
                    return

    def test_partition_exact(self, tiny_db):
        enc = SentenceEncoder.for_database(tiny_db)
        a, t = tiny_db.items[0], tiny_db.items[5]
        sentences = [f"a room with {tag}" for tag in tiny_db.object_names]
        out = filter_differences(sentences, a, t, 0.1, enc)
        assert sorted(out["prefer"] + out["dislike"] + out["dropped"]) == sorted(sentences)


class TestSources:
    def test_grammar_source_counts(self, tiny_db):
        enc = SentenceEncoder.for_database(tiny_db)
        src = GrammarSentenceSource(tiny_db, enc, top_objects=3)
        texts, embs = src.block_for(0)
        assert len(texts) == 3 * len(DEFAULT_GRAMMAR)
        assert embs.shape == (len(texts), tiny_db.dim)

    def test_grammar_source_cached(self, tiny_db):
        enc = SentenceEncoder.for_database(tiny_db)
        src = GrammarSentenceSource(tiny_db, enc)
        a = src.block_for(1)
        b = src.block_for(1)
        assert a is b

    def test_manifest_source_uses_item_sentences(self, tiny_db):
        enc = SentenceEncoder.for_database(tiny_db)
        src = ManifestSentenceSource(tiny_db, enc)
        texts, _ = src.block_for(2)
        assert texts == tiny_db.items[2].sentences

    def test_manifest_source_skips_untaggable(self, tiny_db):
        enc = SentenceEncoder.for_database(tiny_db)
        tiny = tiny_db.items[0]
        original = tiny.sentences
        tiny.sentences = original + ["completely unrelated words"]
        try:
            src = ManifestSentenceSource(tiny_db, enc)
            texts, _ = src.block_for(0)
            assert "completely unrelated words" not in texts
        finally:
            tiny.sentences = original


class TestGrammarFile:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "grammar.json"
        path.write_text(json.dumps(["a cozy {object}", "see the {object}"]))
        assert load_grammar(path) == ["a cozy {object}", "see the {object}"]

    def test_missing_placeholder_rejected(self, tmp_path):
        path = tmp_path / "grammar.json"
        path.write_text(json.dumps(["no placeholder here"]))
        with pytest.raises(ValueError, match="placeholder"):
            load_grammar(path)

    def test_non_list_rejected(self, tmp_path):
        path = tmp_path / "grammar.json"
        path.write_text(json.dumps({"not": "a list"}))
        with pytest.raises(ValueError, match="list"):
            load_grammar(path)
