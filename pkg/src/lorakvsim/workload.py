"""Synthetic multi-adapter trace generation and trace-file ingestion.

Traces are multi-turn dialogue sessions: each session sticks to one
adapter, and every turn's effective prompt is the whole accumulated
session history plus the new tokens, which is what makes block-prefix
reuse possible. Adapter popularity follows one of four shapes: Uniform,
Distinct (round-robin), Gaussian (fixed hot set), or Shifting (a Gaussian
whose center drifts over the run).
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass, field

DISTRIBUTIONS = ("uniform", "distinct", "gaussian", "shifting")


class ParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class OrderError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class ScenarioSpec:
    n_lora: int
    distribution: str = "uniform"
    sigma: float = 0.1           # gaussian/shifting spread on [0, 1]
    drift: float = 0.0           # shifting: center sweep in units of 1/duration
    rate: float = 1.0            # session arrivals per second
    duration: float = 60.0
    mean_turns: float = 3.0      # geometric mean turns per session
    mean_new_tokens: float = 96.0
    min_new_tokens: int = 16
    mean_output_tokens: float = 64.0
    min_output_tokens: int = 1
    max_queries: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_lora < 1:
            raise ValueError("n_lora must be >= 1")
        if self.rate <= 0:
            raise ValueError("rate must be > 0")
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(
                f"distribution must be one of {DISTRIBUTIONS}, "
                f"got {self.distribution!r}"
            )
        if self.distribution in ("gaussian", "shifting") and self.sigma <= 0:
            raise ValueError("sigma must be > 0 for gaussian/shifting")
        if self.mean_turns < 1:
            raise ValueError("mean_turns must be >= 1")


@dataclass
class TraceRecord:
    arrival_s: float
    session_id: int
    lora_id: int
    new_prompt_tokens: int
    output_tokens: int

    def to_json(self) -> str:
        return json.dumps({
            "arrival_s": self.arrival_s,
            "session_id": self.session_id,
            "lora_id": self.lora_id,
            "new_prompt_tokens": self.new_prompt_tokens,
            "output_tokens": self.output_tokens,
        }, sort_keys=True)


FIELDS = ("arrival_s", "session_id", "lora_id", "new_prompt_tokens",
          "output_tokens")


def content_key(session_id: int, block_index: int) -> int:
    """Stable 64-bit identity of block `block_index` of a session's history."""
    h = hashlib.blake2b(f"{session_id}:{block_index}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "big")


def _pick_lora(rng: random.Random, spec: ScenarioSpec, session_index: int,
               time_frac: float) -> int:
    n = spec.n_lora
    if spec.distribution == "uniform":
        return rng.randrange(n)
    if spec.distribution == "distinct":
        return session_index % n
    if spec.distribution == "gaussian":
        center = 0.5
    else:  # shifting: center sweeps across [0, 1) as the run progresses
        center = (0.1 + spec.drift * time_frac) % 1.0
    x = rng.gauss(center, spec.sigma)
    # Snap to the nearest adapter position on [0, 1], wrapping for shifting
    # so popularity stays smooth as the center crosses the edge.
    if spec.distribution == "shifting":
        x %= 1.0
        return int(round(x * n)) % n
    idx = int(round(x * (n - 1))) if n > 1 else 0
    return min(max(idx, 0), n - 1)


def generate(spec: ScenarioSpec) -> list[TraceRecord]:
    """Fully seeded synthetic trace; Poisson session arrivals."""
    rng = random.Random(spec.seed)
    records: list[TraceRecord] = []
    t = 0.0
    session_index = 0
    while True:
        t += rng.expovariate(spec.rate)
        if t >= spec.duration:
            break
        lora = _pick_lora(rng, spec, session_index, t / spec.duration)
        session_id = session_index
        session_index += 1
        # Geometric number of turns with the configured mean.
        p = 1.0 / spec.mean_turns
        turns = 1
        while rng.random() > p:
            turns += 1
        turn_time = t
        for _ in range(turns):
            new_tokens = max(
                spec.min_new_tokens,
                int(rng.expovariate(1.0 / spec.mean_new_tokens)),
            )
            out_tokens = max(
                spec.min_output_tokens,
                int(rng.expovariate(1.0 / spec.mean_output_tokens)),
            )
            records.append(TraceRecord(
                arrival_s=turn_time,
                session_id=session_id,
                lora_id=lora,
                new_prompt_tokens=new_tokens,
                output_tokens=out_tokens,
            ))
            # Next turn arrives after a think-time gap.
            turn_time += rng.expovariate(0.5) + 1.0
    records.sort(key=lambda r: (r.arrival_s, r.session_id))
    if spec.max_queries is not None:
        records = records[:spec.max_queries]
    return records


def save_trace(records, path) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def load_trace(path) -> list[TraceRecord]:
    records: list[TraceRecord] = []
    prev = -math.inf
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(line_no, f"invalid JSON: {e}") from e
            missing = [k for k in FIELDS if k not in obj]
            if missing:
                raise ParseError(line_no, f"missing fields {missing}")
            rec = TraceRecord(
                arrival_s=float(obj["arrival_s"]),
                session_id=int(obj["session_id"]),
                lora_id=int(obj["lora_id"]),
                new_prompt_tokens=int(obj["new_prompt_tokens"]),
                output_tokens=int(obj["output_tokens"]),
            )
            if rec.arrival_s < prev:
                raise OrderError(line_no, "arrival_s decreased")
            prev = rec.arrival_s
            records.append(rec)
    return records


def remap_by_frequency(records) -> list[TraceRecord]:
    """Relabel adapters by popularity: most-invoked becomes id 0, and so on.

    Used to map external function-invocation traces onto a compact,
    frequency-ranked adapter id space.
    """
    counts: dict[int, int] = {}
    for r in records:
        counts[r.lora_id] = counts.get(r.lora_id, 0) + 1
    ranked = sorted(counts, key=lambda lid: (-counts[lid], lid))
    mapping = {lid: rank for rank, lid in enumerate(ranked)}
    return [
        TraceRecord(r.arrival_s, r.session_id, mapping[r.lora_id],
                    r.new_prompt_tokens, r.output_tokens)
        for r in records
    ]


@dataclass
class Query:
    """A single engine-level request with its full effective prompt."""
    id: int
    session_id: int
    lora_id: int
    arrival: float
    prompt_blocks: list[int]     # ordered content keys
    prompt_tokens: int
    output_tokens: int


def build_queries(records, block_tokens: int) -> list[Query]:
    """Expand turn records into queries with cumulative-history prompts.

    Each turn's prompt covers all session tokens so far (history + new),
    chopped into fixed blocks; a partial trailing block still gets a key
    and a block of its own.
    """
    session_tokens: dict[int, int] = {}
    queries: list[Query] = []
    for qid, r in enumerate(records):
        total = session_tokens.get(r.session_id, 0) + r.new_prompt_tokens
        # Prior output becomes part of the history the next turn resends.
        session_tokens[r.session_id] = total + r.output_tokens
        n_blocks = max(1, math.ceil(total / block_tokens))
        keys = [content_key(r.session_id, i) for i in range(n_blocks)]
        queries.append(Query(
            id=qid,
            session_id=r.session_id,
            lora_id=r.lora_id,
            arrival=r.arrival_s,
            prompt_blocks=keys,
            prompt_tokens=total,
            output_tokens=r.output_tokens,
        ))
    return queries
