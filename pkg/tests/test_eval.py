import math

import numpy as np
import pytest

from conftest import build_model, longtail_catalog, make_item
from univa.evaluation import (
    BIN_STRATEGIES,
    GROUPINGS,
    REFERENCE_VALID_PATHS,
    EvalSample,
    dispersion_comparison,
    hr_at_k,
    samples_from_results,
    strategy_grid,
    trie_validity_report,
    value_hr_at_k,
    wndcg_at_k,
)
from univa.simulator import WorldConfig, generate_requests, generate_world
from univa.tokenizer import TokenizerFitConfig, fit_tokenizer


def sample(rid, target, gmv, ranked):
    return EvalSample(request_id=rid, target_item=target, gmv=gmv,
                      ranked=list(ranked))


def test_hr_hand_count():
    samples = [sample(0, 5, 1.0, [5, 2, 3]),
               sample(1, 7, 1.0, [1, 2, 3]),
               sample(2, 2, 1.0, [9, 2, 4])]
    assert hr_at_k(samples, 3) == pytest.approx(2 / 3, abs=1e-12)
    assert hr_at_k(samples, 1) == pytest.approx(1 / 3, abs=1e-12)


def test_hr_full_coverage_and_empty():
    full = [sample(i, i, 1.0, list(range(10))) for i in range(10)]
    assert hr_at_k(full, 10) == 1.0
    none = [sample(0, 99, 1.0, [0, 1, 2])]
    assert hr_at_k(none, 3) == 0.0


def test_metric_validation_errors():
    with pytest.raises(ValueError):
        hr_at_k([], 5)
    s = [sample(0, 1, 1.0, [1, 2])]
    with pytest.raises(ValueError):
        hr_at_k(s, 0)
    uneven = [sample(0, 1, 1.0, [1, 2]), sample(1, 1, 1.0, [1, 2, 3])]
    with pytest.raises(ValueError):
        hr_at_k(uneven, 2)
    zero_gmv = [sample(0, 1, 0.0, [1, 2])]
    with pytest.raises(ValueError):
        value_hr_at_k(zero_gmv, 2)
    with pytest.raises(ValueError):
        wndcg_at_k(zero_gmv, 2)
    with pytest.raises(ValueError):
        sample(0, 1, -0.5, [1])


def test_value_hr_hand_arithmetic():
    samples = [sample(0, 3, 10.0, [3, 4]), sample(1, 5, 90.0, [4, 6])]
    assert value_hr_at_k(samples, 2) == pytest.approx(0.1, abs=1e-12)
    hits = [sample(0, 3, 10.0, [3, 4]), sample(1, 6, 90.0, [4, 6])]
    assert value_hr_at_k(hits, 2) == 1.0


def test_value_hr_uniform_gmv_equals_hr():
    rng = np.random.default_rng(7)
    for _ in range(25):
        samples = [sample(i, int(rng.integers(6)), 3.5,
                          list(rng.permutation(6)[:4]))
                   for i in range(8)]
        for k in (1, 2, 4):
            assert value_hr_at_k(samples, k) == pytest.approx(
                hr_at_k(samples, k), abs=1e-12)


def test_wndcg_hand_values():
    assert wndcg_at_k([sample(0, 9, 5.0, [1, 2, 9, 4])], 4) == \
        pytest.approx(0.5, abs=1e-12)
    top = [sample(i, 1, float(i + 1), [1, 2, 3]) for i in range(4)]
    assert wndcg_at_k(top, 3) == pytest.approx(1.0, abs=1e-12)


def test_wndcg_k1_is_weighted_hr1():
    rng = np.random.default_rng(11)
    samples = [sample(i, int(rng.integers(5)), float(rng.uniform(1, 20)),
                      list(rng.permutation(5))) for i in range(12)]
    w = [math.log10(1 + s.gmv) for s in samples]
    hits = [1.0 if s.ranked[0] == s.target_item else 0.0 for s in samples]
    expect = sum(a * b for a, b in zip(w, hits)) / sum(w)
    assert wndcg_at_k(samples, 1) == pytest.approx(expect, abs=1e-12)


def test_metrics_monotone_in_cutoff():
    rng = np.random.default_rng(23)
    for _ in range(100):
        m = int(rng.integers(3, 8))
        samples = [sample(i, int(rng.integers(m + 2)),
                          float(rng.uniform(0.5, 30)),
                          list(rng.permutation(m + 2)[:m]))
                   for i in range(int(rng.integers(2, 7)))]
        prev = (0.0, 0.0, 0.0)
        for k in range(1, m + 1):
            cur = (hr_at_k(samples, k), value_hr_at_k(samples, k),
                   wndcg_at_k(samples, k))
            assert all(c >= p - 1e-12 for c, p in zip(cur, prev))
            assert all(0.0 <= c <= 1.0 + 1e-12 for c in cur)
            prev = cur


def test_samples_from_results_skips_missing_targets():
    cat = {1: make_item(1, [0.0], gmv=7.0), 2: make_item(2, [0.0], gmv=3.0)}

    class Req:
        def __init__(self, rid, target):
            self.id = rid
            self.target_item = target

    reqs = [Req(0, 1), Req(1, None), Req(2, 2)]
    out = samples_from_results(reqs, [[1, 2], [2], [9, 9]], cat)
    assert [s.request_id for s in out] == [0, 2]
    assert out[0].gmv == 7.0
    assert out[1].ranked == [9, 9]


GRID_CFG = TokenizerFitConfig(
    opt_coverage=0.99, opt_target=3, roi_coverage=0.99, roi_target=2,
    industry_coverage=0.99, industry_target=2,
    n_min=2, n_max=16, budget=64, seed=0)


def test_grid_has_nine_cells_within_budget():
    table = strategy_grid(longtail_catalog(0), GRID_CFG)
    assert set(table) == {(g, b) for g in GROUPINGS for b in BIN_STRATEGIES}
    for cell in table.values():
        assert cell["V"] <= GRID_CFG.budget
        assert 0.0 <= cell["H"] <= math.log(cell["V"]) + 1e-9


def test_grid_classify_equal_freq_is_max():
    table = strategy_grid(longtail_catalog(1), GRID_CFG)
    best = table[("classify_then_bin", "equal_freq")]["H"]
    for key, cell in table.items():
        if key != ("classify_then_bin", "equal_freq"):
            assert cell["H"] < best


def test_grid_deterministic_per_seed():
    a = strategy_grid(longtail_catalog(2), GRID_CFG)
    b = strategy_grid(longtail_catalog(2), GRID_CFG)
    assert a == b


def test_grid_equal_freq_beats_equal_width_single_key():
    rng = np.random.default_rng(5)
    uniform = [make_item(i, rng.normal(size=4), opt=0, roi=0, ind=0,
                         bid=float(rng.uniform(1, 2))) for i in range(200)]
    cfg = TokenizerFitConfig(opt_target=2, roi_target=2, industry_target=2,
                             n_min=2, n_max=8, budget=8, seed=0)
    t_uniform = strategy_grid(uniform, cfg)
    ef = t_uniform[("classify_then_bin", "equal_freq")]["H"]
    ew = t_uniform[("classify_then_bin", "equal_width")]["H"]
    assert ef >= ew - 1e-9
    skewed = [make_item(i, rng.normal(size=4), opt=0, roi=0, ind=0,
                        bid=float(np.exp(rng.normal(0, 1.0))))
              for i in range(200)]
    t_skew = strategy_grid(skewed, cfg)
    assert t_skew[("classify_then_bin", "equal_freq")]["H"] > \
        t_skew[("classify_then_bin", "equal_width")]["H"]


def eval_world(seed=0, density=1.0, n=60):
    cfg = WorldConfig(seed=seed, catalog_size=n, embedding_dim=6, latent_dim=3,
                      user_count=8, num_segments=3, num_geos=3,
                      opt_alphabet=4, roi_alphabet=3, industry_alphabet=3,
                      history_len=4, targeting_density=density)
    world = generate_world(cfg)
    tok = fit_tokenizer(world.catalog, TokenizerFitConfig(
        semantic_levels=1, codebook_size=4,
        opt_coverage=0.8, roi_coverage=0.8, industry_coverage=0.75,
        opt_target=3, roi_target=3, industry_target=3,
        n_min=2, n_max=3, budget=48, seed=seed))
    model = build_model(tuple(tok.level_vocab_sizes()),
                        ctx_vocab=world.context_vocab_size, dim=8, seed=seed)
    return world, tok, model


def test_validity_report_fully_covered_world():
    # single attribute triple + one bid bin + 2 semantic clusters: every
    # decodable path is populated, so even the unconstrained beam is valid
    cfg = WorldConfig(seed=5, catalog_size=40, embedding_dim=6, latent_dim=3,
                      user_count=6, num_segments=2, num_geos=2,
                      opt_alphabet=1, roi_alphabet=1, industry_alphabet=1,
                      history_len=3, targeting_density=1.0)
    world = generate_world(cfg)
    tok = fit_tokenizer(world.catalog, TokenizerFitConfig(
        semantic_levels=1, codebook_size=2,
        opt_coverage=0.99, opt_target=2, roi_coverage=0.99, roi_target=2,
        industry_coverage=0.99, industry_target=2,
        n_min=1, n_max=1, budget=1, fallback_bins=0, seed=5))
    assert tok.level_vocab_sizes() == [2, 1]
    model = build_model((2, 1), ctx_vocab=world.context_vocab_size, dim=8)
    reqs = generate_requests(world, 6, seed=1)
    rep = trie_validity_report(model, world.catalog, tok, reqs, beam_width=2)
    assert rep.reference == REFERENCE_VALID_PATHS
    assert len(rep.rows) == 6
    for row in rep.rows:
        assert row.with_trie_valid == row.with_trie_returned
        assert row.without_trie_valid == row.without_trie_returned == 2
    assert rep.with_trie_fraction == 1.0
    assert rep.without_trie_fraction == 1.0


def test_validity_report_restrictive_world():
    world, tok, model = eval_world(seed=4, density=0.12, n=80)
    reqs = [r for r in generate_requests(world, 10, seed=2)]
    rep = trie_validity_report(model, world.catalog, tok, reqs, beam_width=8)
    assert rep.with_trie_fraction == 1.0
    for row in rep.rows:
        assert row.with_trie_valid == row.with_trie_returned
    assert rep.without_trie_fraction < 1.0


def test_dispersion_comparison_structure():
    catalog = longtail_catalog(3, n=250)
    tok = fit_tokenizer(catalog, TokenizerFitConfig(
        semantic_levels=1, codebook_size=3,
        opt_coverage=0.99, opt_target=3, roi_coverage=0.99, roi_target=2,
        industry_coverage=0.99, industry_target=2,
        n_min=2, n_max=16, budget=64, seed=3))
    out = dispersion_comparison(catalog, tok)
    for side in ("commercial", "semantic_only"):
        for stat in ("std", "range"):
            for agg in ("mean", "p75", "p99"):
                assert out[side][stat][agg] >= 0.0
    # commercial paths refine semantic prefixes by bid, so dispersion drops
    assert out["commercial"]["std"]["mean"] < out["semantic_only"]["std"]["mean"]
    assert out["commercial"]["range"]["mean"] < out["semantic_only"]["range"]["mean"]
