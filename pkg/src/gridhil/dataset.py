"""Synthetic operating-point generation by randomized load mutation.

Each sample perturbs the base case's loads, solves the perturbed case, and
keeps (case, solution) pairs. Generation is deterministic: a sample is fully
determined by the base case and a single integer seed derived from
``(rng_seed, index, attempt)``, so regenerating with the same config yields
byte-identical datasets and an external process (e.g. the hardware emulator)
can reproduce the exact same mutation sequence.

Datasets are stored as JSON lines, one sample per line, with the embedded
case in per-unit so the round trip is lossless.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .grid import CaseError, GridCase, Load, case_from_dict, case_to_dict
from .ioutil import canonical_dumps, sha256_text, write_text
from .powerflow import PfSolution, PowerFlowError, solve_pf

SOURCE_SYNTHETIC = "synthetic"
SOURCE_HIL = "hil"
_SOURCES = (SOURCE_SYNTHETIC, SOURCE_HIL)


class GenerationError(RuntimeError):
    """Raised when too many mutated cases fail to converge."""


@dataclass(frozen=True)
class MutationConfig:
    """Controls the load-randomization law.

    rate: per-load probability of being mutated at all.
    width: half-width of the uniform multiplier band [1-width, 1+width];
        p and q of a mutated load draw independent multipliers.
    rng_seed: root seed for the whole dataset.
    """

    rate: float = 0.7
    width: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"mutation rate must be in [0, 1], got {self.rate}")
        if not 0.0 <= self.width < 1.0:
            raise ValueError(f"mutation width must be in [0, 1), got {self.width}")
        if self.rng_seed < 0:
            raise ValueError("rng_seed must be a non-negative integer")


@dataclass(frozen=True)
class Sample:
    """One operating point: the perturbed case and its settled solution."""

    case: GridCase
    solution: PfSolution
    source: str = SOURCE_SYNTHETIC
    seed: int = 0

    def __post_init__(self):
        if self.source not in _SOURCES:
            raise ValueError(f"unknown sample source '{self.source}'")


def sample_seed(rng_seed: int, index: int, attempt: int = 0) -> int:
    """Stable 63-bit per-sample seed; collision-free in practice."""
    key = f"{rng_seed}:{index}:{attempt}".encode("ascii")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big") >> 1


def _mutate(base: GridCase, rate: float, width: float,
            rng: np.random.Generator) -> GridCase:
    loads = []
    for load in base.loads:
        # Draw the gate first so the stream layout is stable across widths.
        if rng.random() < rate:
            mp = rng.uniform(1.0 - width, 1.0 + width)
            mq = rng.uniform(1.0 - width, 1.0 + width)
            loads.append(Load(bus=load.bus, p=load.p * mp, q=load.q * mq))
        else:
            loads.append(load)
    return base.with_loads(loads)


def mutate_loads(base: GridCase, config: MutationConfig) -> GridCase:
    """One mutation draw straight from the config's root seed."""
    rng = np.random.default_rng(config.rng_seed)
    return _mutate(base, config.rate, config.width, rng)


def mutated_case_for_index(base: GridCase, config: MutationConfig,
                           index: int, attempt: int = 0) -> GridCase:
    """The exact case sample ``index`` would use (redraws bump ``attempt``)."""
    seed = sample_seed(config.rng_seed, index, attempt)
    rng = np.random.default_rng(seed)
    return _mutate(base, config.rate, config.width, rng)


@dataclass(frozen=True)
class GenerationResult:
    samples: tuple[Sample, ...]
    redraws: int


def generate(base: GridCase, n: int, config: MutationConfig,
             tol: float = 1e-8, max_iter: int = 20) -> GenerationResult:
    """Generate ``n`` convergent samples, redrawing failed mutations.

    Gives up once failures exceed half of all draws (with a small grace
    allowance so an early unlucky streak on a healthy case cannot abort).
    """
    if n < 0:
        raise ValueError("sample count must be non-negative")
    samples: list[Sample] = []
    redraws = 0
    draws = 0
    for index in range(n):
        attempt = 0
        while True:
            draws += 1
            seed = sample_seed(config.rng_seed, index, attempt)
            rng = np.random.default_rng(seed)
            case = _mutate(base, config.rate, config.width, rng)
            try:
                sol = solve_pf(case, tol=tol, max_iter=max_iter)
            except PowerFlowError:
                redraws += 1
                attempt += 1
                if redraws > max(draws // 2, 8):
                    raise GenerationError(
                        f"{redraws} of {draws} mutated cases failed to "
                        f"converge; the mutation band is too aggressive "
                        f"for this base case"
                    ) from None
                continue
            # Drop the iteration trace so samples compare by content.
            samples.append(Sample(case=case,
                                  solution=replace(sol, mismatch_history=()),
                                  source=SOURCE_SYNTHETIC, seed=seed))
            break
    return GenerationResult(samples=tuple(samples), redraws=redraws)


# ---------------------------------------------------------------------------
# Serialization (JSON lines, per-unit cases)
# ---------------------------------------------------------------------------


def solution_to_dict(sol: PfSolution) -> dict:
    return {
        "v_mag": [float(v) for v in sol.v_mag],
        "v_ang": [float(a) for a in sol.v_ang],
        "slack_p": float(sol.slack_p),
        "slack_q": float(sol.slack_q),
        "gen_q": None if sol.gen_q is None else [float(q) for q in sol.gen_q],
        "iterations": int(sol.iterations),
        "max_mismatch": float(sol.max_mismatch),
    }


def solution_from_dict(data: dict) -> PfSolution:
    gen_q = data.get("gen_q")
    return PfSolution(
        v_mag=tuple(float(x) for x in data["v_mag"]),
        v_ang=tuple(float(x) for x in data["v_ang"]),
        slack_p=float(data["slack_p"]),
        slack_q=float(data["slack_q"]),
        gen_q=None if gen_q is None else tuple(float(x) for x in gen_q),
        iterations=int(data["iterations"]),
        max_mismatch=float(data["max_mismatch"]),
        mismatch_history=(),
    )


def sample_to_dict(sample: Sample) -> dict:
    return {
        "source": sample.source,
        "seed": int(sample.seed),
        "case": case_to_dict(sample.case, per_unit=True),
        "solution": solution_to_dict(sample.solution),
    }


def sample_from_dict(data: dict) -> Sample:
    return Sample(
        case=case_from_dict(data["case"]),
        solution=solution_from_dict(data["solution"]),
        source=data["source"],
        seed=int(data["seed"]),
    )


def sample_line(sample: Sample) -> str:
    return canonical_dumps(sample_to_dict(sample))


def sample_hash(sample: Sample) -> str:
    return sha256_text(sample_line(sample))


def dataset_text(samples) -> str:
    return "".join(sample_line(s) + "\n" for s in samples)


def dataset_hash(samples) -> str:
    """Hash of the serialized dataset; equals the saved file's sha256."""
    return sha256_text(dataset_text(samples))


def save_dataset(path, samples) -> None:
    write_text(path, dataset_text(samples))


def load_dataset(path) -> list[Sample]:
    samples: list[Sample] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                samples.append(sample_from_dict(json.loads(line)))
            except (ValueError, KeyError, CaseError) as exc:
                raise CaseError(f"{path}: bad sample on line {lineno}: {exc}") from exc
    return samples


def reverify_sample(sample: Sample, tol: float = 1e-6) -> float:
    """Re-solve a sample's case and return the max deviation from its stored
    solution (useful as an integrity check on loaded datasets)."""
    sol = solve_pf(sample.case, tol=1e-10, max_iter=30)
    stored = sample.solution
    dev = max(
        float(np.max(np.abs(np.asarray(sol.v_mag) - np.asarray(stored.v_mag)))),
        float(np.max(np.abs(np.asarray(sol.v_ang) - np.asarray(stored.v_ang)))),
        abs(sol.slack_p - stored.slack_p),
        abs(sol.slack_q - stored.slack_q),
    )
    if not math.isfinite(dev) or dev > tol:
        raise CaseError(f"stored solution deviates by {dev:g} (> {tol:g})")
    return dev
