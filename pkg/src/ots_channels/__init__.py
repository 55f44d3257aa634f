"""Bidirectional payment channels revoked by one-time signatures over
monotonically increasing sequence numbers, plus a deterministic adversarial
simulator: simulated chain, script interpreter, protocol engines, and
watchtowers at three privacy levels.
"""

from . import analysis, chain, channel, crypto, harness, htlc, script, txgraph, watchtower, wire

__all__ = [
    "analysis", "chain", "channel", "crypto", "harness", "htlc",
    "script", "txgraph", "watchtower", "wire",
]
