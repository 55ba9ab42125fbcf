import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dedupstore.errors import FormatError
from dedupstore.harness.fixtures import leftover_instance, two_tensor_instance, two_tensor_order
from dedupstore.packing import (
    PACKERS,
    EquivalentClass,
    Ownership,
    PackingScheme,
    compute_equivalent_classes,
    diff_schemes,
    min_bins_lower_bound,
    pack_approx,
    pack_baseline,
    pack_classes,
    pack_two_stage,
    validate_scheme,
)


@st.composite
def ownerships(draw, max_items=14, max_tensors=5):
    m = draw(st.integers(1, max_items))
    k = draw(st.integers(1, max_tensors))
    rows = [draw(st.sets(st.integers(0, k - 1), min_size=1, max_size=k)) for _ in range(m)]
    sets = {j: [i for i, r in enumerate(rows) if j in r] for j in range(k)}
    return Ownership({j: items for j, items in sets.items() if items})


def greedy1(own, l):
    return pack_classes(compute_equivalent_classes(own), l)


class TestOwnership:
    def test_write_order_dedups_repeats(self):
        own = Ownership({1: [3, 1, 3, 2]})
        assert own.order[1] == [3, 1, 2]
        assert own.a(3, 1) and not own.a(3, 2)

    def test_empty_tensor_rejected(self):
        with pytest.raises(ValueError, match="owns no items"):
            Ownership({1: []})

    def test_restrict(self):
        own = two_tensor_instance().restrict([1])
        assert own.tensors == [1] and len(own.items) == 16


class TestEquivalentClasses:
    def test_two_tensor_fixture(self):
        classes = compute_equivalent_classes(two_tensor_instance())
        assert [(sorted(c.owner_set), len(c.items)) for c in classes] == [([1, 2], 12), ([1], 4), ([2], 4)]
        assert classes[0].items == tuple(range(12))

    def test_single_tensor(self):
        assert len(compute_equivalent_classes(Ownership({0: [5, 6, 7]}))) == 1

    def test_no_sharing(self):
        own = Ownership({0: [0, 1], 1: [2], 2: [3, 4]})
        assert len(compute_equivalent_classes(own)) == 3

    @given(ownerships())
    def test_partition(self, own):
        classes = compute_equivalent_classes(own)
        items = [i for c in classes for i in c.items]
        assert sorted(items) == own.items
        for c in classes:
            assert all(own.owners[i] == c.owner_set for i in c.items)
        keys = [(-len(c.owner_set), sorted(c.owner_set)) for c in classes]
        assert keys == sorted(keys)


class TestPackers:
    def test_two_tensor_counts(self):
        own = two_tensor_instance()
        assert pack_baseline(own, 4).num_bins == 8
        assert greedy1(own, 4).num_bins == 5
        assert pack_approx(own.order, 4).num_bins == 5
        assert pack_two_stage(own, 4).num_bins == 5

    def test_leftover_counts(self):
        own = leftover_instance()
        stage1 = greedy1(own, 2)
        assert stage1.num_bins == 3
        assert all(len(b) == 1 for b in stage1.bins)
        two = pack_two_stage(own, 2)
        assert sorted(map(sorted, two.bins)) == [[0, 1], [0, 2]]

    def test_approx_duplicates_shared_item(self):
        scheme = pack_approx({1: [0, 1], 2: [0, 2]}, 2)
        assert scheme.num_bins == 2
        assert sum(0 in b for b in scheme.bins) == 2
        assert validate_scheme(scheme, leftover_instance())

    def test_class_of_exactly_l_items(self):
        scheme = greedy1(Ownership({0: [1, 2, 3, 4]}), 4)
        assert scheme.bins == [(1, 2, 3, 4)]

    def test_approx_single_tensor(self):
        assert pack_approx({0: range(10)}, 3).num_bins == 4

    def test_approx_identical_second_tensor_reuses_everything(self):
        scheme = pack_approx({0: range(7), 1: range(7)}, 3)
        assert scheme.num_bins == 3
        assert scheme.cover[0] == scheme.cover[1]

    def test_approx_orders_largest_first_then_hottest(self):
        scheme = pack_approx({0: [5, 6], 1: [1, 5, 7], 2: [5, 6, 9]}, 2)
        # tensor 1 (three items, lower id than 2) goes first; item 5 has three owners
        assert scheme.bins[0] == (5, 1)

    def test_baseline_identical_tensors_merge(self):
        scheme = pack_baseline(Ownership({0: range(9), 1: range(9)}), 4)
        assert scheme.num_bins == 3

    def test_baseline_explicit_write_order(self):
        own = Ownership({0: [0, 1], 1: [0, 1, 2]})
        assert pack_baseline(own, 2, write_order=[1, 0]).cover == {1: [0, 1], 0: [0]}

    def test_two_stage_keeps_stage_one_when_bins_full(self):
        own = Ownership({0: [0, 1, 2, 3], 1: [2, 3, 4, 5]})
        assert pack_two_stage(own, 2).bins == greedy1(own, 2).bins

    @pytest.mark.parametrize("name", sorted(PACKERS))
    def test_capacity_must_be_positive(self, name):
        with pytest.raises(ValueError):
            PACKERS[name](Ownership({0: [1]}), 0)

    @pytest.mark.parametrize("name", sorted(PACKERS))
    @given(own=ownerships(), l=st.integers(1, 5))
    def test_every_packer_is_valid(self, name, own, l):
        scheme = PACKERS[name](own, l)
        report = validate_scheme(scheme, own, l)
        assert report.ok, report.violations
        assert scheme.num_bins >= min_bins_lower_bound(own, l)

    @given(own=ownerships(), l=st.integers(1, 5))
    def test_two_stage_never_worse_than_stage_one(self, own, l):
        assert pack_two_stage(own, l).num_bins <= greedy1(own, l).num_bins

    @given(own=ownerships(), l=st.integers(1, 5))
    def test_stage_one_never_replicates(self, own, l):
        bins = greedy1(own, l).bins
        flat = [i for b in bins for i in b]
        assert len(flat) == len(set(flat))

    @pytest.mark.parametrize("name", sorted(PACKERS))
    @given(sizes=st.lists(st.integers(1, 9), min_size=1, max_size=4), l=st.integers(1, 4))
    def test_no_sharing_gives_sum_of_ceilings(self, name, sizes, l):
        start, tensors = 0, {}
        for j, n in enumerate(sizes):
            tensors[j] = range(start, start + n)
            start += n
        own = Ownership(tensors)
        assert PACKERS[name](own, l).num_bins == sum(math.ceil(n / l) for n in sizes)

    @pytest.mark.parametrize("name", sorted(PACKERS))
    @given(own=ownerships(), l=st.integers(1, 5))
    def test_deterministic(self, name, own, l):
        assert PACKERS[name](own, l) == PACKERS[name](Ownership(own.order), l)


class TestDiff:
    def test_identical(self):
        s = pack_two_stage(two_tensor_instance(), 4)
        d = diff_schemes(s, s)
        assert not d.discarded and not d.created
        assert len(d.reused) == s.num_bins

    def test_full_sharing_model_adds_no_bins(self):
        old = greedy1(Ownership({0: range(8)}), 4)
        new = greedy1(Ownership({0: range(8), 1: range(8)}), 4)
        d = diff_schemes(old, new)
        assert not d.created and not d.discarded

    def test_partial_sharing_repartitions_classes(self):
        # tensor 0 holds items 0..11; tensor 1 shares 0..5 and adds 12, 13.
        # classes become {0,1}: 0..5, {0}: 6..11, {1}: 12..13
        old = greedy1(Ownership({0: range(12)}), 4)
        new = greedy1(Ownership({0: range(12), 1: [*range(6), 12, 13]}), 4)
        d = diff_schemes(old, new)
        assert d.reused == [frozenset({0, 1, 2, 3})]
        assert sorted(map(sorted, d.discarded)) == [[4, 5, 6, 7], [8, 9, 10, 11]]
        assert sorted(map(sorted, d.created)) == [[4, 5], [6, 7, 8, 9], [10, 11], [12, 13]]

    @given(ownerships(), ownerships(), st.integers(1, 4))
    def test_reused_and_created_disjoint(self, a, b, l):
        d = diff_schemes(pack_two_stage(a, l), pack_two_stage(b, l))
        assert not set(d.reused) & set(d.created)
        assert not set(d.reused) & set(d.discarded)


class TestValidate:
    def test_capacity_violation_named(self):
        own = Ownership({0: [1, 2, 3]})
        report = validate_scheme(PackingScheme(2, [(1, 2, 3)], {0: [0]}), own)
        assert not report
        assert report.violations == ["capacity: bin 0 holds 3 items > 2"]

    def test_foreign_item_named(self):
        own = Ownership({1: [0, 1], 2: [0, 2]})
        scheme = PackingScheme(2, [(0, 1), (0, 2)], {1: [0, 1], 2: [1]})
        report = validate_scheme(scheme, own)
        assert any("tensor 1 bin 1 holds foreign items [2]" in v for v in report.violations)

    def test_missing_item_and_cover(self):
        own = Ownership({1: [0, 1], 2: [5]})
        report = validate_scheme(PackingScheme(2, [(0,)], {1: [0]}), own)
        assert "cover: tensor 1 misses items [1]" in report.violations
        assert "cover: tensor 2 has no cover" in report.violations

    def test_bad_bin_index(self):
        report = validate_scheme(PackingScheme(2, [(0,)], {0: [3]}), Ownership({0: [0]}))
        assert any("missing bin 3" in v for v in report.violations)


class TestSchemeFile:
    def test_round_trip(self):
        s = pack_two_stage(two_tensor_instance(), 4)
        text = s.dumps()
        assert text.splitlines()[0] == "DPSCHEME v1 l=4"
        assert PackingScheme.loads(text) == s

    def test_format_lines(self):
        s = PackingScheme(2, [(0, 1), (0, 2)], {1: [0], 2: [1]})
        assert s.dumps() == "DPSCHEME v1 l=2\nBIN 0: 0 1\nBIN 1: 0 2\nCOVER 1: 0\nCOVER 2: 1\n"

    @pytest.mark.parametrize(
        "text", ["", "DPSCHEME v2 l=2\n", "DPSCHEME v1 l=2\nBIN 1: 3\n", "DPSCHEME v1 l=2\nFOO 0: 1\n"]
    )
    def test_rejects_malformed(self, text):
        with pytest.raises(FormatError):
            PackingScheme.loads(text)


def test_fixture_order_interleaves_private_items():
    order = two_tensor_order()
    assert order[1][:4] == [12, 0, 1, 2]
    assert order[2][:4] == [16, 0, 1, 2]
    assert EquivalentClass(frozenset({1}), (1,)).items == (1,)
