import numpy as np
import pytest

from window_diffusion.baseline import run_baseline
from window_diffusion.decoding import GenerationConfig
from window_diffusion.errors import InputError
from window_diffusion.harness import EARLIER, RECENT, obs2_metadata, run_obs1, run_obs2, run_obs3
from window_diffusion.oracle import OracleConfig, SyntheticOracle
from window_diffusion.reporting import HEADERS, Obs2Row, Obs3Row, write_rows

from conftest import make_prompt


@pytest.fixture(scope="module")
def toy_run(toy0):
    return run_baseline(toy0, make_prompt(16), GenerationConfig(total_steps=96, gen_len=96, tokens_per_step=1))


@pytest.fixture(scope="module")
def oracle_run():
    backend = SyntheticOracle(OracleConfig())
    return backend, run_baseline(backend, make_prompt(4), GenerationConfig(total_steps=40, gen_len=40, tokens_per_step=1))


class TestObs1:
    def test_row_count_and_range(self, toy0, toy_run):
        rows = run_obs1(toy0, toy_run, [10, 50])
        assert len(rows) == 2 * 112
        for r in rows:
            if r.decoded:
                assert r.confidence is None
            else:
                assert 0 < r.confidence <= 1

    def test_default_steps(self, toy0, toy_run):
        assert sorted({r.step for r in run_obs1(toy0, toy_run)}) == [24, 48, 72]

    def test_oracle_confidence_decreases_with_distance(self, oracle_run):
        backend, run = oracle_run
        rows = run_obs1(backend, run, range(1, 41, 3))
        for step in range(1, 41, 3):
            conf = [r.confidence for r in rows if r.step == step and not r.decoded]
            assert all(a > b for a, b in zip(conf, conf[1:]))

    def test_step_out_of_range(self, toy0, toy_run):
        with pytest.raises(InputError):
            run_obs1(toy0, toy_run, [97])


class TestObs2:
    def test_sweep_row_count(self, toy0, toy_run):
        recs = run_obs2(toy0, toy_run, 20, [16, 24, 32, 64])
        assert len(recs) == 8
        assert [(r.W, r.cache_mode) for r in recs][:2] == [(16, "NoCache"), (16, "Cache")]
        text = write_rows([r.row() for r in recs], Obs2Row)
        assert text.splitlines()[0] == HEADERS[Obs2Row]
        assert all(r.mean >= 0 and np.isfinite(r.mean) and r.p25 <= r.p75 for r in recs)

    def test_full_window_no_cache_is_exact(self, toy0, toy_run):
        t0 = 20
        n_undecoded = toy_run.archive.states[t0].n_undecoded
        recs = run_obs2(toy0, toy_run, t0, [n_undecoded])
        assert recs[0].cache_mode == "NoCache" and recs[0].mean <= 1e-8

    def test_unsorted_sweep(self, toy0, toy_run):
        with pytest.raises(InputError):
            run_obs2(toy0, toy_run, 20, [32, 16])

    def test_metadata(self):
        meta = obs2_metadata()
        assert meta["q_floor"] == 1e-12 and "reference" in meta["kl_direction"]


class TestObs3:
    def test_offset_zero_is_self_similarity(self, toy0, toy_run):
        recs = run_obs3(toy0, toy_run, range(30, 40), t0=40, horizon=8)
        zeros = [r for r in recs if r.offset == 0]
        assert {r.cohort for r in zeros} == {RECENT, EARLIER}
        assert all(r.mean_v_similarity == pytest.approx(1.0) for r in zeros)
        assert all(-1 <= r.mean_v_similarity <= 1 for r in recs)

    def test_row_count(self, toy0, toy_run):
        recs = run_obs3(toy0, toy_run, range(30, 40), t0=40, horizon=8)
        assert len(recs) == 16
        assert all(r.n_tokens <= 16 for r in recs)

    def test_horizon_zero(self, toy0, toy_run):
        recs = run_obs3(toy0, toy_run, range(30, 40), t0=40, horizon=0)
        assert write_rows([r.row() for r in recs], Obs3Row) == HEADERS[Obs3Row] + "\n"

    def test_never_decoded_positions_skipped(self, toy0):
        run = run_baseline(toy0, make_prompt(4), GenerationConfig(total_steps=4, gen_len=12, tokens_per_step=1))
        recs = run_obs3(toy0, run, [200, 15], t0=2, horizon=2)
        assert all(r.cohort == EARLIER for r in recs)

    def test_bad_t0(self, toy0, toy_run):
        with pytest.raises(InputError):
            run_obs3(toy0, toy_run, [5], t0=500, horizon=2)
