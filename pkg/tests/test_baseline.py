import numpy as np
import pytest

from window_diffusion.baseline import CacheMode, confidence_map, run_baseline, run_truncated_reference
from window_diffusion.decoding import GenerationConfig
from window_diffusion.errors import InputError
from window_diffusion.flops import step_flops
from window_diffusion.metrics import kl_divergence, max_relative_deviation
from window_diffusion.oracle import OracleConfig, SyntheticOracle, closed_form_transcript

from conftest import make_prompt


@pytest.fixture(scope="module")
def toy_run(toy0):
    cfg = GenerationConfig(total_steps=24, gen_len=24, tokens_per_step=1)
    return run_baseline(toy0, make_prompt(8), cfg)


class TestRunBaseline:
    def test_one_decode_per_step(self, toy_run):
        assert toy_run.steps_executed == 24
        assert all(t.decoded_positions.size == 1 for t in toy_run.traces)
        assert toy_run.state.decoded.all()

    def test_flops_per_step_match_full_formula(self, toy_run):
        s = 32
        expected = step_flops(0, s, s, s, 64, 2, 97).total
        assert all(r.total == expected for r in toy_run.ledger.records)
        per_layer_scores = 2 * s * s * 64
        assert toy_run.ledger.records[0].attn_flops == 2 * 2 * per_layer_scores

    def test_archive_holds_pre_commit_state(self, toy_run):
        arch = toy_run.archive
        assert sorted(arch.states) == list(range(1, 25))
        assert arch.states[1].n_undecoded == 24
        assert arch.states[5].n_undecoded == 20
        assert arch.keys[3].shape == (2, 32, 64)

    def test_replay_is_bitwise(self, toy0, toy_run):
        again = run_baseline(toy0, make_prompt(8), GenerationConfig(total_steps=24, gen_len=24, tokens_per_step=1))
        for t in (1, 12, 24):
            assert again.archive.logits[t].tobytes() == toy_run.archive.logits[t].tobytes()
            assert again.archive.values[t].tobytes() == toy_run.archive.values[t].tobytes()

    def test_oracle_transcript(self):
        backend = SyntheticOracle(OracleConfig())
        res = run_baseline(backend, make_prompt(5), GenerationConfig(total_steps=30, gen_len=30, tokens_per_step=2))
        assert res.tokens[5:].tolist() == closed_form_transcript(backend.config, range(5, 35))

    def test_without_archive(self, toy0):
        res = run_baseline(toy0, make_prompt(4), GenerationConfig(total_steps=4, gen_len=4), archive=False)
        assert res.archive is None


class TestTruncatedReference:
    def test_full_window_no_truncation(self, toy0, toy_run):
        tr = run_truncated_reference(toy0, toy_run, 5, 20, CacheMode.NO_CACHE)
        assert tr.active_positions.size == 16
        kls = [kl_divergence(p, q) for p, q in zip(tr.reference, tr.truncated)]
        assert max(kls) <= 1e-8

    def test_cache_with_current_kv_matches_no_cache(self, toy0, toy_run):
        nc = run_truncated_reference(toy0, toy_run, 6, 19, "NoCache")
        c = run_truncated_reference(toy0, toy_run, 6, 19, "Cache", cache_step=6)
        assert max_relative_deviation(c.truncated, nc.truncated) <= 1e-5

    def test_truncation_is_recorded(self, toy0, toy_run):
        for W in (16, 18):
            for mode in CacheMode:
                tr = run_truncated_reference(toy0, toy_run, 4, W, mode)
                kls = [kl_divergence(p, q) for p, q in zip(tr.reference, tr.truncated)]
                assert all(np.isfinite(kls)) and min(kls) >= 0

    def test_distributions_exclude_mask(self, toy0, toy_run):
        tr = run_truncated_reference(toy0, toy_run, 4, 16, "NoCache")
        assert np.all(tr.reference[:, toy0.mask_token_id] == 0)
        np.testing.assert_allclose(tr.reference.sum(axis=1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("t0,W", [(1, 16), (25, 16), (4, 8)])
    def test_bad_arguments(self, toy0, toy_run, t0, W):
        with pytest.raises(InputError):
            run_truncated_reference(toy0, toy_run, t0, W, "NoCache")

    def test_unknown_mode(self, toy0, toy_run):
        with pytest.raises(ValueError):
            run_truncated_reference(toy0, toy_run, 4, 16, "Sometimes")


def test_confidence_map_range(toy_run, toy0):
    arch = toy_run.archive
    und = arch.states[3].undecoded_positions()
    conf = confidence_map(arch.logits[3][und], und, toy0.mask_token_id)
    assert set(conf) == set(und.tolist())
    assert all(0 < c <= 1 for c in conf.values())
