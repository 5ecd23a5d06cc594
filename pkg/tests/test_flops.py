import pytest
from hypothesis import given, strategies as st

from window_diffusion.decoding import GenerationConfig
from window_diffusion.flops import FlopLedger, FlopRecord, flops_attention_step, step_flops
from window_diffusion.baseline import run_baseline
from window_diffusion.oracle import OracleConfig, SyntheticOracle
from window_diffusion.scheduler import run_generation

from conftest import make_prompt

D, L, V = 64, 2, 97


def test_square_case_reduces_to_quadratic_term():
    s = 256
    total = flops_attention_step(s, s, D, 4, 1)
    assert total - 8 * s * D * D == 2 * (2 * s * s * D)


def test_doubling_context_doubles_score_and_mix():
    base = flops_attention_step(10, 50, D, 4, L) - flops_attention_step(10, 0, D, 4, L)
    doubled = flops_attention_step(10, 100, D, 4, L) - flops_attention_step(10, 0, D, 4, L)
    assert doubled == 2 * base


def test_heads_do_not_matter():
    assert flops_attention_step(3, 9, D, 1, L) == flops_attention_step(3, 9, D, 8, L)


def test_step_flops_decomposition():
    rec = step_flops(1, 17, 96, 16, D, L, V)
    assert rec.attn_flops + rec.proj_flops - 2 * 16 * D * V == flops_attention_step(17, 96, D, 4, L)
    assert rec.ffn_flops == L * 2 * 17 * (2 * D * 4 * D)


class TestPinnedRatios:
    # S=256 with a 32-token prompt, W_ex=64, w_in=16; computed by hand before the build
    FULL = step_flops(0, 256, 256, 256, D, L, V).total

    def test_refresh_step(self):
        assert step_flops(0, 96, 96, 16, D, L, V).total / self.FULL == pytest.approx(0.27326401957094465, rel=1e-12)

    def test_first_normal_step(self):
        assert step_flops(0, 17, 96, 16, D, L, V).total / self.FULL == pytest.approx(0.05026815957847196, rel=1e-12)


@given(st.lists(st.tuples(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6)), max_size=20))
def test_ledger_additivity(parts):
    ledger = FlopLedger()
    for i, (a, f, p) in enumerate(parts):
        ledger.add(FlopRecord(i, a, f, p))
    assert ledger.total == sum(a + f + p for a, f, p in parts)
    comp = ledger.component_totals()
    assert comp["attn_flops"] + comp["ffn_flops"] + comp["proj_flops"] == ledger.total
    assert ledger.total >= 0


@pytest.mark.parametrize("w_ex", [4, 16, 40])
def test_windowed_never_exceeds_baseline(w_ex):
    backend = SyntheticOracle(OracleConfig())
    gen = dict(total_steps=48, gen_len=48, tokens_per_step=1)
    base = run_baseline(backend, make_prompt(8), GenerationConfig(**gen), archive=False)
    win = run_generation(backend, make_prompt(8), GenerationConfig(**gen, w_ex_len=w_ex, w_in_len=min(4, w_ex), refresh_cycle=8))
    assert win.ledger.total < base.ledger.total
