import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_force_mfe, oracle_energy
from premirna import folding
from premirna.folding import EnergyModel

rna = st.text(alphabet="ACGU", min_size=1, max_size=40)


def test_reference_hairpin():
    ss = folding.fold("GGGAAACCC")
    assert ss.dot_bracket == "(((...)))"
    assert ss.pairs == ((0, 8), (1, 7), (2, 6))
    assert ss.energy == pytest.approx(-8.5)
    assert ss.energy == brute_force_mfe("GGGAAACCC")
    assert (ss.stem_count, ss.loop_count, ss.hairpin_count) == (1, 1, 1)
    st_ = folding.pairing_stats(ss)
    assert (st_["|G-C|"], st_["|A-U|"], st_["|G-U|"], st_["total_bases"]) == (3, 0, 0, 6)
    assert st_["Avg_BP_Stem"] == 3
    assert (st_["IH"], st_["IL"], st_["IC"]) == (9, 3, 3)
    assert st_["%L"] == pytest.approx(3 / 9)


def test_unpaired_sequence():
    ss = folding.fold("AAAAAA")
    assert ss.dot_bracket == "......" and ss.energy == 0.0 and ss.pairs == ()
    st_ = folding.pairing_stats(ss)
    assert st_["total_bases"] == 0 and st_["Avg_BP_Stem"] == 0 and st_["%L"] == 0


@given(st.text(alphabet="ACGU", min_size=1, max_size=12))
def test_matches_brute_force(bases):
    assert folding.fold(bases).energy == brute_force_mfe(bases)


@given(rna)
def test_structure_invariants(bases):
    ss = folding.fold(bases)
    seen = set()
    for i, j in ss.pairs:
        assert i < j and j - i - 1 >= 3
        assert bases[i] + bases[j] in {"AU", "UA", "GC", "CG", "GU", "UG"}
        assert i not in seen and j not in seen
        seen.update((i, j))
    for i, j in ss.pairs:
        for k, l in ss.pairs:
            assert not (i < k < j < l)
    assert ss.energy <= 0
    assert ss.energy == pytest.approx(oracle_energy(bases, ss.pairs))
    assert folding.pairs_from_dot_bracket(ss.dot_bracket) == ss.pairs
    assert folding.dot_bracket_from_pairs(len(bases), ss.pairs) == ss.dot_bracket


@given(rna)
def test_reversal_symmetry(bases):
    assert folding.fold(bases[::-1]).energy == pytest.approx(folding.fold(bases).energy)


@given(rna)
def test_structure_energy_agrees_with_oracle(bases):
    samples = folding.sample_structures(bases, 5, seed=1)
    for row in samples:
        pairs = folding.pairs_from_partner(row)
        assert folding.structure_energy(bases, pairs) == pytest.approx(oracle_energy(bases, pairs))


def test_deterministic_and_sampling_seeded():
    seq = "GGCGCAUAGCGAAAGCUAUGCGCC"
    assert folding.fold(seq) == folding.fold(seq)
    a = folding.sample_structures(seq, 20, seed=3)
    b = folding.sample_structures(seq, 20, seed=3)
    np.testing.assert_array_equal(a, b)


def test_low_temperature_sampling_returns_mfe():
    seq = "GGGAAACCC"
    mfe_partner = folding.partner_from_pairs(9, folding.fold(seq).pairs)
    samples = folding.sample_structures(seq, 10, temperature=1e-3, seed=0)
    assert np.all(samples == mfe_partner)


def test_energy_model_is_configurable():
    model = EnergyModel(gc=-1.0, au=-1.0, gu=0.0, loop_penalty=0.0)
    assert folding.fold("GGGAAACCC", model).energy == pytest.approx(-3.0)


def test_dot_bracket_errors():
    with pytest.raises(ValueError):
        folding.pairs_from_dot_bracket("(()")
