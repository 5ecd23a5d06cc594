"""Analytic FLOP model (one multiply-add = 2 FLOPs; softmax and norms ignored)."""

from __future__ import annotations

from dataclasses import dataclass, field


def flops_attention_step(n_query: int, n_context: int, d_model: int, n_heads: int, n_layers: int) -> int:
    """Attention-block FLOPs for ``n_query`` computed rows over ``n_context`` keys.

    Covers scores, value mixing, Q/K/V projections of the computed rows and the
    output projection.  Context rows served from a cache cost nothing here.
    ``n_heads`` does not change the count; it is accepted for call-site symmetry.
    """
    del n_heads
    per_layer = (
        2 * n_query * n_context * d_model  # scores
        + 2 * n_query * n_context * d_model  # value mix
        + 6 * n_query * d_model * d_model  # q, k, v projections
        + 2 * n_query * d_model * d_model  # output projection
    )
    return n_layers * per_layer


@dataclass
class FlopRecord:
    step: int
    attn_flops: int
    ffn_flops: int
    proj_flops: int

    @property
    def total(self) -> int:
        return self.attn_flops + self.ffn_flops + self.proj_flops


def step_flops(
    step: int,
    n_rows: int,
    n_context: int,
    n_logits: int,
    d_model: int,
    n_layers: int,
    vocab_size: int,
) -> FlopRecord:
    """Cost of one forward where ``n_rows`` positions are computed through every layer.

    ``n_logits`` rows go through the unembedding.
    """
    attn = n_layers * 4 * n_rows * n_context * d_model
    proj = n_layers * 8 * n_rows * d_model * d_model + 2 * n_logits * d_model * vocab_size
    ffn = n_layers * 16 * n_rows * d_model * d_model
    return FlopRecord(step, attn, ffn, proj)


@dataclass
class FlopLedger:
    records: list[FlopRecord] = field(default_factory=list)

    def add(self, record: FlopRecord) -> FlopRecord:
        self.records.append(record)
        return record

    @property
    def total(self) -> int:
        return sum(r.total for r in self.records)

    def component_totals(self) -> dict[str, int]:
        return {
            "attn_flops": sum(r.attn_flops for r in self.records),
            "ffn_flops": sum(r.ffn_flops for r in self.records),
            "proj_flops": sum(r.proj_flops for r in self.records),
            "total": self.total,
        }
