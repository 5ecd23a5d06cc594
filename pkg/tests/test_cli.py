import json
import subprocess
import sys

import pytest

from window_diffusion.cli import main
from window_diffusion.model import ModelConfig, load_weights
from window_diffusion.oracle import OracleConfig, closed_form_transcript
from window_diffusion.reporting import HEADERS, BenchRow, Obs1Row, Obs2Row, Obs3Row, TraceRow, read_rows


def write_config(tmp_path, name="cfg.json", **doc):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


SMALL_TOY = dict(
    backend="toy",
    model={"max_seq_len": 64, "rng_seed": 0},
    generation={"total_steps": 16, "gen_len": 16, "tokens_per_step": 1, "w_ex_len": 8, "w_in_len": 4, "refresh_cycle": 4},
    prompt=[5, 6, 7, 8],
)


class TestMakeWeights:
    def test_byte_identical_and_round_trip(self, tmp_path):
        cfg = write_config(tmp_path, model={"rng_seed": 3, "max_seq_len": 32})
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert main(["make-weights", cfg, "--out", str(a)]) == 0
        assert main(["make-weights", cfg, "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()
        w, mc = load_weights(a)
        assert mc == ModelConfig(rng_seed=3, max_seq_len=32)
        assert w.pos_emb.shape == (32, 64)

    def test_missing_seed(self, tmp_path):
        cfg = write_config(tmp_path, vocab_size=97)
        assert main(["make-weights", cfg, "--out", str(tmp_path / "w.json")]) == 2

    def test_unreadable_config(self, tmp_path):
        assert main(["make-weights", str(tmp_path / "nope.json"), "--out", str(tmp_path / "w.json")]) == 2


class TestGenerate:
    def test_window_and_baseline_degenerate_agree(self, tmp_path):
        cfg = write_config(tmp_path, **SMALL_TOY)
        flags = ["--w-ex", "16", "--w-in", "16", "--refresh", "1"]
        assert main(["generate", cfg, "--engine", "baseline", "--out", str(tmp_path / "b.json")] + flags) == 0
        assert main(["generate", cfg, "--engine", "window", "--out", str(tmp_path / "w.json"),
                     "--ledger", str(tmp_path / "l.csv")] + flags) == 0
        b = json.loads((tmp_path / "b.json").read_text())
        w = json.loads((tmp_path / "w.json").read_text())
        assert b["final_tokens"] == w["final_tokens"]
        assert w["config"]["generation"]["refresh_cycle"] == 1
        rows = read_rows(tmp_path / "w.trace.csv", TraceRow)
        assert len(rows) == w["steps_executed"] == 16
        assert (tmp_path / "l.csv").read_text().startswith(HEADERS[TraceRow].split(",")[0])

    def test_weights_file_is_used(self, tmp_path):
        main(["make-weights", write_config(tmp_path, "m.json", rng_seed=0, max_seq_len=64), "--out", str(tmp_path / "wt.json")])
        doc = dict(SMALL_TOY, weights_path=str(tmp_path / "wt.json"))
        seeded = write_config(tmp_path, **SMALL_TOY)
        from_file = write_config(tmp_path, "f.json", **doc)
        main(["generate", seeded, "--out", str(tmp_path / "a.json")])
        main(["generate", from_file, "--out", str(tmp_path / "b.json")])
        a = json.loads((tmp_path / "a.json").read_text())["final_tokens"]
        assert a == json.loads((tmp_path / "b.json").read_text())["final_tokens"]

    def test_oracle_transcript_and_prompt_flag(self, tmp_path):
        cfg = write_config(tmp_path, backend="oracle", generation={"total_steps": 20, "gen_len": 20, "w_ex_len": 8, "w_in_len": 4})
        assert main(["generate", cfg, "--prompt", "1,2,3", "--out", str(tmp_path / "r.json")]) == 0
        r = json.loads((tmp_path / "r.json").read_text())
        assert r["final_tokens"][:3] == [1, 2, 3]
        assert r["final_tokens"][3:] == closed_form_transcript(OracleConfig(), range(3, 23))

    def test_oracle_eos_terminates_early(self, tmp_path):
        cfg = write_config(
            tmp_path, backend="oracle", oracle={"eos_position": 20},
            generation={"total_steps": 256, "gen_len": 256, "tokens_per_step": 1, "w_ex_len": 64, "w_in_len": 16},
        )
        assert main(["generate", cfg, "--adaptive", "--out", str(tmp_path / "r.json"), "--dump-cache", str(tmp_path / "c.json")]) == 0
        r = json.loads((tmp_path / "r.json").read_text())
        assert r["terminated_early"] is True and r["steps_executed"] == 21
        assert "entries" in json.loads((tmp_path / "c.json").read_text())

    def test_config_violation_exit_2(self, tmp_path):
        cfg = write_config(tmp_path, **SMALL_TOY)
        assert main(["generate", cfg, "--w-ex", "2", "--w-in", "4", "--out", str(tmp_path / "r.json")]) == 2

    def test_unknown_engine_exit_2(self, tmp_path):
        cfg = write_config(tmp_path, **SMALL_TOY)
        with pytest.raises(SystemExit) as exc:
            main(["generate", cfg, "--engine", "turbo", "--out", str(tmp_path / "r.json")])
        assert exc.value.code == 2

    def test_unknown_config_key(self, tmp_path):
        cfg = write_config(tmp_path, backend="toy", extras=1)
        assert main(["generate", cfg, "--out", str(tmp_path / "r.json")]) == 2


class TestCompare:
    def test_passes_and_reports(self, tmp_path):
        cfg = write_config(tmp_path, **SMALL_TOY)
        out = tmp_path / "cmp.json"
        assert main(["compare", cfg, "--seeds", "0,1", "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert doc["transcripts_equal"] is True
        assert all(s["max_rel_logit_deviation"] <= 1e-5 for s in doc["seeds"])

    def test_cache_fault_is_caught(self, tmp_path):
        cfg = write_config(tmp_path, **SMALL_TOY)
        assert main(["compare", cfg, "--inject-cache-fault"]) == 3

    def test_oracle_backend_rejected(self, tmp_path):
        assert main(["compare", write_config(tmp_path, backend="oracle")]) == 2


class TestBench:
    def test_w_ex_sweep(self, tmp_path):
        cfg = write_config(tmp_path, **dict(SMALL_TOY, generation=dict(SMALL_TOY["generation"], total_steps=40, gen_len=40)))
        out = tmp_path / "b.csv"
        assert main(["bench", cfg, "--sweep", "w_ex", "--values", "4,8,16,40", "--out", str(out), "--jobs", "2"]) == 0
        rows = read_rows(out, BenchRow)
        assert [r.value for r in rows] == [4, 8, 16, 40]
        ratios = [r.flop_ratio_vs_baseline for r in rows]
        assert all(a < b for a, b in zip(ratios, ratios[1:]))
        assert len({r.baseline_wall_ms for r in rows}) == 1

    def test_gen_len_sweep(self, tmp_path):
        cfg = write_config(tmp_path, **SMALL_TOY)
        out = tmp_path / "g.csv"
        assert main(["bench", cfg, "--sweep", "gen_len", "--values", "8,16", "--out", str(out)]) == 0
        assert len(read_rows(out, BenchRow)) == 2

    def test_empty_values(self, tmp_path):
        assert main(["bench", write_config(tmp_path, **SMALL_TOY), "--sweep", "refresh", "--values", ""]) == 2


class TestObs:
    @pytest.fixture
    def cfg(self, tmp_path):
        gen = {"total_steps": 64, "gen_len": 64, "tokens_per_step": 1}
        return write_config(tmp_path, backend="toy", model={"max_seq_len": 96}, generation=gen, prompt=list(range(16)))

    def test_obs2_records(self, tmp_path, cfg):
        out = tmp_path / "o2.csv"
        assert main(["obs", cfg, "--which", "2", "--t0", "30", "--W", "8,16,32,64", "--active-count", "8", "--out", str(out)]) == 0
        assert len(read_rows(out, Obs2Row)) == 8
        meta = json.loads((tmp_path / "o2.csv.meta.json").read_text())
        assert meta["q_floor"] == 1e-12

    def test_obs1_oracle_monotone(self, tmp_path):
        cfg = write_config(tmp_path, backend="oracle", generation={"total_steps": 24, "gen_len": 24, "tokens_per_step": 1})
        out = tmp_path / "o1.csv"
        assert main(["obs", cfg, "--which", "1", "--obs-steps", "3,12", "--out", str(out)]) == 0
        rows = read_rows(out, Obs1Row)
        assert len(rows) == 48
        for step in (3, 12):
            conf = [r.confidence for r in rows if r.step == step and not r.decoded]
            assert all(a > b for a, b in zip(conf, conf[1:]))

    def test_obs3_horizon_zero(self, tmp_path, cfg):
        out = tmp_path / "o3.csv"
        assert main(["obs", cfg, "--which", "3", "--horizon", "0", "--out", str(out)]) == 0
        assert out.read_text() == HEADERS[Obs3Row] + "\n"

    def test_invalid_which(self, cfg):
        with pytest.raises(SystemExit) as exc:
            main(["obs", cfg, "--which", "4"])
        assert exc.value.code == 2


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "window_diffusion.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "make-weights" in proc.stdout
