from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ontobn import (Instance, LabelDict, Ontology, SynthSpec, TrueModel, build_label_dictionary,
                    read_dataset, rollup_expand, synth_generate, write_dataset)
from ontobn.errors import ParseError, UnknownLabelError, ValidationError
from ontobn.featurize import load_config, random_tree_ontology
from ontobn.seeding import stream


def test_instance_needs_a_bag():
    with pytest.raises(ValidationError):
        Instance("x", ())


# -- rollup ------------------------------------------------------------------

def test_rollup_chain(chain):
    inst = Instance("p", [["LungCancer"]])
    out = rollup_expand(inst, chain, {"LungCancer": "LungCancer"})
    assert set(out.bags[0]) == {"LungCancer", "Cancer"}


def test_rollup_unmapped_is_identity(chain):
    inst = Instance("p", [["f1", "f2"]], ["m"], {"Cancer"})
    assert rollup_expand(inst, chain, {"LungCancer": "LungCancer"}) == inst


def test_rollup_diamond_adds_shared_ancestor_once():
    ont = Ontology(list("ABC"), [("A", "B"), ("A", "C")])
    out = rollup_expand(Instance("p", [["B", "C"]]), ont, {"B": "B", "C": "C"})
    assert Counter(out.bags[0]) == Counter({"B": 1, "C": 1, "A": 1})
    # set-union oracle
    assert set(out.bags[0]) == {"B", "C"} | ont.ancestors("B") | ont.ancestors("C")


def test_rollup_codes_mapped_to_labels(diamond):
    inst = Instance("p", [["icd:1", "icd:1", "x"], ["icd:2"]])
    out = rollup_expand(inst, diamond, {"icd:1": "D", "icd:2": "B"})
    assert out.bags[0][:3] == ("icd:1", "icd:1", "x")
    assert set(out.bags[0][3:]) == {"A", "B", "C"}
    assert set(out.bags[1]) == {"icd:2", "A"}


def test_rollup_unknown_label(chain):
    with pytest.raises(UnknownLabelError):
        rollup_expand(Instance("p", [["x"]]), chain, {"x": "Nope"})


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.sampled_from(list("ABCDxy")), max_size=6), min_size=1, max_size=3))
def test_rollup_idempotent(bags):
    ont = Ontology(list("ABCD"), [("A", "B"), ("A", "C"), ("B", "D"), ("C", "D")])
    mapping = {c: c for c in "ABCD"}
    once = rollup_expand(Instance("p", bags), ont, mapping)
    assert rollup_expand(once, ont, mapping) == once


# -- label dictionary ----------------------------------------------------------

def test_label_dictionary_threshold():
    ont = Ontology(["A", "B"])
    labels = [{"A"}] * 6 + [{"A", "B"}] * 4
    ld = build_label_dictionary(labels, ont, min_count=5)
    assert ld.targets == ["A"]
    assert ld.positive_counts == {"A": 10}


def test_label_dictionary_min_count_one():
    ont = Ontology(list("ABC"))
    ld = build_label_dictionary([{"A"}, {"B"}], ont, min_count=1)
    assert ld.targets == ["A", "B"]


def test_label_dictionary_closure(chain):
    labels = [{"Cancer", "LungCancer"}] * 3 + [{"LungCancer"}] * 2
    ld = build_label_dictionary(labels, chain, min_count=5, closure=True)
    assert ld.targets == ["LungCancer"]
    assert ld.conditionals == ["Cancer", "LungCancer"]
    assert ld.positive_counts == {"Cancer": 3, "LungCancer": 5}
    ld = build_label_dictionary(labels, chain, min_count=5, closure=False)
    assert ld.conditionals == ["LungCancer"]


def test_label_dictionary_empty(chain):
    ld = build_label_dictionary([], chain, min_count=5)
    assert ld.targets == [] and ld.conditionals == []


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sets(st.sampled_from(list("ABCDE"))), max_size=40), st.integers(1, 6))
def test_label_dictionary_counts_match_counter(label_sets, min_count):
    ont = Ontology(list("ABCDE"), [("A", "B"), ("B", "C"), ("A", "D")])
    counts = {}
    for s in label_sets:
        for l in s:
            counts[l] = counts.get(l, 0) + 1
    ld = build_label_dictionary(label_sets, ont, min_count)
    assert set(ld.targets) == {l for l, c in counts.items() if c >= min_count}
    closure = set()
    for t in ld.targets:
        closure |= {t} | ont.ancestors(t)
    assert set(ld.conditionals) == closure
    for l in ld.conditionals:
        assert ld.positive_counts[l] == counts.get(l, 0)


def test_label_dictionary_json_round_trip(tmp_path, chain):
    ld = build_label_dictionary([{"Cancer", "LungCancer"}] * 6, chain, 5)
    ld.save(tmp_path / "ld.json")
    assert LabelDict.load(tmp_path / "ld.json") == ld


# -- synthetic generation ----------------------------------------------------

def small_tree():
    return random_tree_ontology(25, 3, stream(3, "test.tree"))


def test_synth_same_seed_byte_identical(tmp_path):
    spec = SynthSpec(small_tree(), feature_dim=10, instance_count=200, seed=7)
    a, ta = synth_generate(spec)
    b, tb = synth_generate(spec)
    write_dataset(a, tmp_path / "a.jsonl")
    write_dataset(b, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert ta.to_json() == tb.to_json()
    c, _ = synth_generate(SynthSpec(spec.ontology, feature_dim=10, instance_count=200, seed=8))
    assert c != a


def test_synth_instance_count_and_shape():
    spec = SynthSpec(small_tree(), feature_dim=10, features_per_instance=3, instance_count=57)
    data, truth = synth_generate(spec)
    assert len(data) == 57
    assert all(len(i.bags) == 1 and len(i.bags[0]) == 3 for i in data)
    assert all(f in truth.features for i in data for f in i.bags[0])


def test_synth_zero_conditional_label_never_appears():
    ont = Ontology(["A", "B"])
    truth = TrueModel(ont, ["f0", "f1"], [[0.0, 0.0], [0.0, 0.0]], [0.0, -1e6])
    inst = [Instance(str(i), [["f0"]]) for i in range(500)]
    labels = truth.sample_labels(inst, np.random.default_rng(0))
    assert not any("B" in s for s in labels)
    assert any("A" in s for s in labels)


def test_synth_chain_half_half_monte_carlo(chain):
    truth = TrueModel(chain, ["f0"], [[0.0], [0.0]], [0.0, 0.0])
    inst = [Instance(str(i), [["f0"]]) for i in range(100_000)]
    labels = truth.sample_labels(inst, np.random.default_rng(2024))
    freq = np.mean(["LungCancer" in s for s in labels])
    assert abs(freq - 0.25) <= 0.01
    np.testing.assert_allclose(truth.marginals(inst[:1], ["LungCancer"]), [[0.25]], rtol=0, atol=1e-15)


def test_synth_downward_closed():
    spec = SynthSpec(small_tree(), feature_dim=10, instance_count=2000, seed=1, bias_low=1, bias_high=2)
    data, _ = synth_generate(spec)
    ont = spec.ontology
    assert any(len(i.labels) > 3 for i in data)
    for inst in data:
        for l in inst.labels:
            assert ont.parents(l) <= inst.labels


def test_synth_marginals_converge():
    ont = Ontology(list("ABCD"), [("A", "B"), ("B", "C"), ("A", "D")])
    spec = SynthSpec(ont, feature_dim=4, features_per_instance=2, true_embedding_scale=2.0,
                     instance_count=40_000, seed=5, bias_low=0.5, bias_high=1.5)
    data, truth = synth_generate(spec)
    exact = truth.marginals(data).mean(axis=0)
    emp = np.array([[l in i.labels for l in truth.labels] for i in data]).mean(axis=0)
    se = np.sqrt(exact * (1 - exact) / len(data))
    assert np.all(np.abs(emp - exact) <= 3 * se)


def test_true_model_json_round_trip(tmp_path):
    _, truth = synth_generate(SynthSpec(small_tree(), feature_dim=6, instance_count=5))
    truth.save(tmp_path / "t.json")
    back = TrueModel.load(tmp_path / "t.json")
    assert back.to_json() == truth.to_json()


def test_synth_spec_validation(chain):
    for bad in ({"feature_dim": 0}, {"instance_count": -1}, {"true_embedding_scale": 0.0},
                {"bias_low": 1.0, "bias_high": 0.0}):
        with pytest.raises(ValidationError):
            SynthSpec(chain, **bad)
    with pytest.raises(ValidationError):
        SynthSpec.from_mapping(chain, {"bogus": 1})
    spec = SynthSpec.from_mapping(chain, {"feature_dim": "7", "seed": "3"})
    assert spec.feature_dim == 7 and spec.seed == 3


def test_random_tree_is_a_forest():
    ont = random_tree_ontology(200, 4, np.random.default_rng(0))
    assert len(ont) == 200
    assert all(len(ont.parents(n)) <= 1 for n in ont.nodes)
    assert all(len(ont.children(n)) <= 4 for n in ont.nodes)


# -- dataset files -----------------------------------------------------------

def test_dataset_round_trip(tmp_path):
    data = [Instance("a", [["f1", "f1"], []], ["m"], {"A", "B"}),
            Instance("b", [["f2"], ["f3"]], [], set()),
            Instance("c", [[], []], ["m", "n"], {"A"})]
    write_dataset(data, tmp_path / "d.jsonl")
    assert read_dataset(tmp_path / "d.jsonl") == data


def test_dataset_missing_bags(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"id": "a", "bags": [["x"]], "labels": []}\n{"id": "b", "labels": ["A"]}\n')
    with pytest.raises(ParseError) as exc:
        read_dataset(p)
    assert exc.value.lineno == 2 and "bags" in str(exc.value)


def test_dataset_unknown_label(tmp_path, chain):
    p = tmp_path / "d.jsonl"
    p.write_text('{"id": "a", "bags": [["x"]], "labels": ["Mystery"]}\n')
    assert read_dataset(p)[0].labels == {"Mystery"}
    with pytest.raises(ParseError):
        read_dataset(p, chain)


def test_load_config_formats(tmp_path):
    (tmp_path / "a.cfg").write_text("# synth\nfeature_dim = 12\nname = demo\n")
    (tmp_path / "b.json").write_text('{"feature_dim": 12, "name": "demo"}')
    assert load_config(tmp_path / "a.cfg") == load_config(tmp_path / "b.json")
