"""Game-theoretic and capacity calculations around channel exits.

Payoffs are exact rationals so equality checks carry no floating drift. The
convention is cost-as-negative-payoff: a cell value of -c/2 means that party
pays half the cooperative close fee.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

COOPERATE = "cooperate"
DEFECT = "defect"


@dataclass(frozen=True)
class ExitPayoffs:
    """Exit cost inputs: delay opportunity cost, unilateral fees, close fee."""

    p: Fraction  # opportunity cost of delayed funds
    u: Fraction  # unilateral-exit path fees
    c: Fraction  # cooperative-close fee

    def __post_init__(self) -> None:
        for name in ("p", "u", "c"):
            value = getattr(self, name)
            if not isinstance(value, Fraction):
                object.__setattr__(self, name, Fraction(value))
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def payoff_matrix(costs: ExitPayoffs) -> dict[tuple[str, str], tuple[Fraction, Fraction]]:
    """(alice action, bob action) -> (alice payoff, bob payoff).

    A cooperator facing a defector waits out the full delay and pays the
    unilateral path fees; a defector facing a cooperator pays nothing; mutual
    defection splits the unilateral cost in expectation.
    """
    p, u, c = costs.p, costs.u, costs.c
    burn = p + u
    return {
        (COOPERATE, COOPERATE): (-c / 2, -c / 2),
        (COOPERATE, DEFECT): (-burn, Fraction(0)),
        (DEFECT, COOPERATE): (Fraction(0), -burn),
        (DEFECT, DEFECT): (-burn / 2, -burn / 2),
    }


def is_prisoners_dilemma(costs: ExitPayoffs) -> bool:
    """Strictly cheaper to wait each other out than to pay the close fee."""
    return costs.p + costs.u > costs.c


def best_response(matrix: dict, mine: str, opponent_action: str) -> str:
    """The action maximizing my payoff against a fixed opponent action."""
    best, best_value = None, None
    for action in (COOPERATE, DEFECT):
        profile = (action, opponent_action) if mine == "alice" else (opponent_action, action)
        value = matrix[profile][0 if mine == "alice" else 1]
        if best_value is None or value > best_value:
            best, best_value = action, value
    return best


def nash_equilibria(matrix: dict) -> list[tuple[str, str]]:
    """Brute-force pure-strategy equilibria of the 2x2 game."""
    out = []
    for a in (COOPERATE, DEFECT):
        for b in (COOPERATE, DEFECT):
            a_pay, b_pay = matrix[(a, b)]
            a_alt = matrix[(_other_action(a), b)][0]
            b_alt = matrix[(a, _other_action(b))][1]
            if a_alt <= a_pay and b_alt <= b_pay:
                out.append((a, b))
    return out


def _other_action(action: str) -> str:
    return DEFECT if action == COOPERATE else COOPERATE


# ---------------------------------------------------------------------------
# Sequence-space capacity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Capacity:
    max_updates: int
    days: float
    years: float


def capacity(value_bits: int, updates_per_second: float) -> Capacity:
    """How long a channel lasts before its sequence space runs out."""
    if updates_per_second <= 0:
        raise ValueError("update rate must be positive")
    max_updates = 1 << value_bits
    days = max_updates / (updates_per_second * 86400)
    return Capacity(max_updates, days, days / 365)


# ---------------------------------------------------------------------------
# Uniformity check for sequence-number gaps
# ---------------------------------------------------------------------------

# upper critical values of the chi-square distribution at significance 0.01
CHI2_CRITICAL_001 = {
    1: 6.635, 3: 11.345, 7: 18.475, 15: 30.578, 31: 52.191, 63: 92.010,
}


def chi_square_uniform(samples: list[int], bins: int) -> float:
    """Chi-square statistic of integer samples against uniform on [1, bins]."""
    if not samples:
        raise ValueError("no samples")
    counts = [0] * bins
    for s in samples:
        if not 1 <= s <= bins:
            raise ValueError(f"sample {s} outside [1, {bins}]")
        counts[s - 1] += 1
    expected = len(samples) / bins
    return sum((c - expected) ** 2 / expected for c in counts)


def gaps_look_uniform(samples: list[int], bins: int,
                      critical: float | None = None) -> bool:
    """True when the gap distribution passes the 0.01-significance test."""
    if critical is None:
        df = bins - 1
        if df not in CHI2_CRITICAL_001:
            raise ValueError(f"no built-in critical value for df={df}")
        critical = CHI2_CRITICAL_001[df]
    return chi_square_uniform(samples, bins) <= critical
