"""Distributed swarm attestation over parallel Chord overlays, with a deterministic simulator."""

from .attest import Outcome, voting_and_recovery
from .simnet import SimConfig, run

__version__ = "0.1.0"
__all__ = ["Outcome", "SimConfig", "run", "voting_and_recovery"]
