import numpy as np
import pytest

from diskgraph.advisor import (
    AdvisorInput,
    Recommendation,
    memory_model,
    memory_model_nav_sampled,
    recommend,
)


def big_int_oracle(n, d, s_d, s_i, r, k, n_pq, n_hot, m_dyn, c):
    # independent straight-line evaluation with python bignums
    per_node = d * s_d + (1 + r) * s_i
    m_nav = per_node * n
    m_pq = d * s_d * (2 ** (8 * k)) + n_pq * k * n
    m_cache = m_dyn + n_hot * per_node
    return m_nav, m_pq, m_cache, m_nav + m_pq + m_cache + c


def test_empty_dataset_codebook_constant_only():
    inp = AdvisorInput(n=0, d=128, s_d=4, r=48, k=1, n_pq=16, n_hot=0, m_dynamic=0, c=0)
    model = memory_model(inp)
    assert model["M_total"] == 128 * 4 * 256
    assert model["M_nav"] == 0


def test_sift1m_reference_numbers():
    inp = AdvisorInput(n=10**6, d=128, s_d=4, s_i=4, r=48, k=1, n_pq=16,
                       n_hot=0, m_dynamic=0, c=50 * 10**6)
    model = memory_model(inp)
    assert model["M_nav"] == 708_000_000
    assert model["M_pq"] == 131_072 + 16_000_000
    assert model["M_total"] == 708_000_000 + 131_072 + 16_000_000 + 50 * 10**6


def test_per_node_term_growth_with_r():
    base = AdvisorInput(n=1, d=128, s_d=4, s_i=4, r=48)
    double = AdvisorInput(n=1, d=128, s_d=4, s_i=4, r=97)
    m1 = memory_model(base)["M_nav"]
    m2 = memory_model(double)["M_nav"]
    assert m1 == 708 and m2 == 904
    assert m2 / m1 == pytest.approx(1.2768, abs=1e-3)


def test_model_matches_bignum_oracle_on_random_inputs():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        args = dict(
            n=int(rng.integers(0, 10**12)),
            d=int(rng.integers(1, 8192)),
            s_d=int(rng.choice([1, 2, 4, 8])),
            s_i=int(rng.choice([4, 8])),
            r=int(rng.integers(1, 256)),
            k=int(rng.integers(1, 3)),
            n_pq=int(rng.integers(1, 512)),
            n_hot=int(rng.integers(0, 10**7)),
            m_dyn=int(rng.integers(0, 10**10)),
            c=int(rng.integers(0, 10**9)),
        )
        inp = AdvisorInput(n=args["n"], d=args["d"], s_d=args["s_d"], s_i=args["s_i"],
                           r=args["r"], k=args["k"], n_pq=args["n_pq"], n_hot=args["n_hot"],
                           m_dynamic=args["m_dyn"], c=args["c"])
        model = memory_model(inp)
        nav, pq, cache, total = big_int_oracle(**args)
        assert model["M_nav"] == nav
        assert model["M_pq"] == pq
        assert model["M_cache"] == cache
        assert model["M_total"] == total


def test_model_monotone_in_every_field():
    base = dict(n=1000, d=64, s_d=4, s_i=4, r=16, k=1, n_pq=8, n_hot=10,
                m_dynamic=1000, c=500)
    total0 = memory_model(AdvisorInput(**base))["M_total"]
    for field_name in base:
        bumped = dict(base)
        bumped[field_name] += 1
        assert memory_model(AdvisorInput(**bumped))["M_total"] >= total0


def test_negative_input_rejected():
    with pytest.raises(ValueError):
        AdvisorInput(n=-1, d=4)


def make_input(*, m_fits=True, d=128, bpf_low=False, read_heavy=True):
    r = 48
    page = 4096
    if bpf_low:
        # force BPF < 2 by shrinking the page below two entries
        page = d * 4 + (1 + r) * 4 + 10
    inp = AdvisorInput(n=1000, d=d, s_d=4, s_i=4, r=r, k=1, n_pq=16,
                       page_size=page,
                       read_write_ratio=2.0 if read_heavy else 0.5)
    total = memory_model(inp)["M_total"]
    inp.budget = total + 1 if m_fits else total - 1
    return inp


def test_recommend_truth_table():
    for m_fits in (True, False):
        for d in (128, 1200, 3000):
            for bpf_low in (True, False):
                for read_heavy in (True, False):
                    if d >= 3000 and bpf_low is False:
                        pass  # high-d still exercises both bpf sides via page sizing
                    rec = recommend(make_input(m_fits=m_fits, d=d, bpf_low=bpf_low,
                                               read_heavy=read_heavy))
                    assert rec.storage == ("major_in_disk" if m_fits else "all_in_disk")
                    assert rec.global_layout == ("coupled" if d <= 1500 else "decoupled")
                    assert rec.local_layout == "heuristic"
                    assert rec.caching == (
                        "dynamic_or_hybrid" if d <= 900 else "static_graph_prioritized"
                    )
                    assert rec.execution == ("io_driven" if rec.bpf < 2 else "compute_driven")
                    assert rec.update == ("in_place" if read_heavy else "out_of_place")


def test_recommend_boundary_values():
    # d = 1500 -> coupled; d = 900 -> dynamic/hybrid
    rec = recommend(make_input(d=1500))
    assert rec.global_layout == "coupled"
    rec = recommend(make_input(d=900))
    assert rec.caching == "dynamic_or_hybrid"
    rec = recommend(make_input(d=901))
    assert rec.caching == "static_graph_prioritized"
    # BPF exactly 2 -> compute_driven
    d, r = 128, 48
    inp = AdvisorInput(n=10, d=d, s_d=4, s_i=4, r=r, n_pq=16,
                       page_size=2 * (d * 4 + (1 + r) * 4), read_write_ratio=1.0)
    inp.budget = memory_model(inp)["M_total"]
    rec = recommend(inp)
    assert rec.bpf == 2.0
    assert rec.execution == "compute_driven"
    # ratio exactly 1 -> in_place; budget exactly M_total -> major_in_disk
    assert rec.update == "in_place"
    assert rec.storage == "major_in_disk"


def test_recommendation_numbers_bit_exact():
    inp = make_input(d=960)
    rec = recommend(inp)
    model = memory_model(inp)
    assert rec.m_nav == model["M_nav"]
    assert rec.m_pq == model["M_pq"]
    assert rec.m_cache == model["M_cache"]
    assert rec.m_total == model["M_total"]


def test_nav_sampled_variant_reported():
    inp = make_input()
    rec = recommend(inp, nav_sample_rate=0.005)
    assert rec.m_total_nav_sampled is not None
    assert rec.m_total_nav_sampled < rec.m_total
    sampled = memory_model_nav_sampled(inp, 0.005)
    assert rec.m_total_nav_sampled == sampled["M_total"]
    d = rec.as_dict()
    assert "M_total_nav_sampled(non-paper)" in d


def test_recommend_is_pure():
    inp = make_input()
    a = recommend(inp)
    b = recommend(inp)
    assert a == b


def test_high_dim_goes_decoupled():
    rec = recommend(AdvisorInput(n=100, d=3072, s_d=4, r=48, n_pq=384,
                                 page_size=16384, budget=10**12))
    assert rec.global_layout == "decoupled"
    assert rec.caching == "static_graph_prioritized"
