"""Per-run metric assembly and CSV/summary emission.

All float columns are written with fixed 9-decimal formatting so that
identical runs produce byte-identical files.
"""

from __future__ import annotations

from dataclasses import dataclass, field


def _f(x: float) -> str:
    return f"{x:.9f}"


@dataclass
class QueryRow:
    query_id: int
    session_id: int
    lora_id: int
    arrival: float
    admit: float
    first_token: float
    completion: float
    queue_time: float
    lora_cold: float
    kv_cold: float
    compute: float
    hbm_hit_blocks: int
    main_hit_blocks: int
    miss_blocks: int
    output_tokens: int

    @property
    def ttft(self) -> float:
        return self.first_token - self.arrival

    @property
    def tpot(self) -> float:
        if self.output_tokens <= 1:
            return 0.0
        return (self.completion - self.first_token) / (self.output_tokens - 1)


@dataclass
class MetricsReport:
    policy: str
    queries: list = field(default_factory=list)        # QueryRow, by id
    util_rows: list = field(default_factory=list)      # (t, lora, hist, run)
    swap_rows: list = field(default_factory=list)      # SwapRow
    invalid_mean: float = 0.0
    invalid_max: float = 0.0
    audit_out_violations: int = 0
    audit_in_violations: int = 0
    all_pinned_warnings: int = 0
    stale_moves_skipped: int = 0
    seed: int | None = None

    # ---- aggregates ----

    def _ttfts(self):
        return sorted(q.ttft for q in self.queries)

    def mean_ttft(self) -> float:
        if not self.queries:
            return 0.0
        return sum(q.ttft for q in self.queries) / len(self.queries)

    def percentile_ttft(self, p: float) -> float:
        xs = self._ttfts()
        if not xs:
            return 0.0
        idx = min(len(xs) - 1, max(0, int(round(p / 100 * (len(xs) - 1)))))
        return xs[idx]

    def mean_tpot(self) -> float:
        xs = [q.tpot for q in self.queries if q.output_tokens > 1]
        return sum(xs) / len(xs) if xs else 0.0

    def kv_hit_rate(self) -> float:
        """Fraction of prompt blocks served from cached history (either
        tier) instead of being recomputed."""
        total = sum(q.hbm_hit_blocks + q.main_hit_blocks + q.miss_blocks
                    for q in self.queries)
        if total == 0:
            return 0.0
        hits = sum(q.hbm_hit_blocks + q.main_hit_blocks for q in self.queries)
        return hits / total

    def lora_hit_rate(self) -> float:
        if not self.queries:
            return 0.0
        hits = sum(1 for q in self.queries if q.lora_cold == 0.0)
        return hits / len(self.queries)

    # ---- serialization ----

    def write_queries_csv(self, path) -> None:
        cols = ("query_id,session_id,lora_id,arrival,admit,first_token,"
                "completion,ttft,tpot,queue_time,lora_cold,kv_cold,compute,"
                "hbm_hit_blocks,main_hit_blocks,miss_blocks,output_tokens")
        with open(path, "w") as f:
            f.write("# schema=1\n")
            f.write(cols + "\n")
            for q in self.queries:
                f.write(",".join([
                    str(q.query_id), str(q.session_id), str(q.lora_id),
                    _f(q.arrival), _f(q.admit), _f(q.first_token),
                    _f(q.completion), _f(q.ttft), _f(q.tpot),
                    _f(q.queue_time), _f(q.lora_cold), _f(q.kv_cold),
                    _f(q.compute), str(q.hbm_hit_blocks),
                    str(q.main_hit_blocks), str(q.miss_blocks),
                    str(q.output_tokens),
                ]) + "\n")

    def write_utilization_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("# schema=1\n")
            f.write("time,lora_blocks,history_kv_blocks,running_kv_blocks\n")
            for t, lora, hist, run in self.util_rows:
                f.write(f"{_f(t)},{lora},{hist},{run}\n")

    def write_swaps_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("# schema=1\n")
            f.write("tick_time,direction,node_id,kind,eval,"
                    "usage_before,usage_after\n")
            for r in self.swap_rows:
                f.write(",".join([
                    _f(r.tick_time), r.direction, str(r.node_id), r.kind,
                    _f(r.eval_score), _f(r.usage_before), _f(r.usage_after),
                ]) + "\n")

    def summary_text(self) -> str:
        lines = [
            f"policy: {self.policy}",
            f"seed: {self.seed}",
            f"queries: {len(self.queries)}",
            f"mean_ttft_s: {_f(self.mean_ttft())}",
            f"p50_ttft_s: {_f(self.percentile_ttft(50))}",
            f"p99_ttft_s: {_f(self.percentile_ttft(99))}",
            f"mean_tpot_s: {_f(self.mean_tpot())}",
            f"kv_hit_rate: {_f(self.kv_hit_rate())}",
            f"lora_hit_rate: {_f(self.lora_hit_rate())}",
            f"invalid_kv_time_mean: {_f(self.invalid_mean)}",
            f"invalid_kv_max: {_f(self.invalid_max)}",
            f"swap_events: {len(self.swap_rows)}",
        ]
        return "\n".join(lines) + "\n"

    def write_summary(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.summary_text())


def build_report(engine) -> MetricsReport:
    rows = []
    for qid in sorted(engine.timelines):
        st = engine.timelines[qid]
        q = st.query
        rows.append(QueryRow(
            query_id=q.id,
            session_id=q.session_id,
            lora_id=q.lora_id,
            arrival=q.arrival,
            admit=st.admit,
            first_token=st.first_token,
            completion=st.completion,
            queue_time=st.queue_time,
            lora_cold=st.lora_cold,
            kv_cold=st.kv_cold,
            compute=st.compute,
            hbm_hit_blocks=st.hbm_hits,
            main_hit_blocks=st.main_hits,
            miss_blocks=st.miss_blocks,
            output_tokens=q.output_tokens,
        ))
    return MetricsReport(
        policy=engine.policy.name,
        queries=rows,
        util_rows=engine.util_rows,
        swap_rows=engine.swap_rows,
        invalid_mean=engine.invalid_time_mean(),
        invalid_max=engine.max_invalid,
        audit_out_violations=engine.audit_out_violations,
        audit_in_violations=engine.audit_in_violations,
        all_pinned_warnings=engine.all_pinned_warnings,
        stale_moves_skipped=engine.stale_moves_skipped,
    )
