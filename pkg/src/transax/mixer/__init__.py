from .bus import Bus, Message
from .crypto import CryptoBackend, DecryptError, EnvelopeBackend, HybridBackend
from .protocol import (
    MixError,
    MixMember,
    MixSession,
    Phase,
    TooFewParticipants,
    UnequalAmounts,
    phase0_setup,
    phase1_broadcast_keys,
    phase2_shuffle,
    phase3_sign_and_submit,
    run_mix,
)

__all__ = [
    "Bus", "Message", "CryptoBackend", "DecryptError", "EnvelopeBackend", "HybridBackend",
    "MixError", "MixMember", "MixSession", "Phase", "TooFewParticipants", "UnequalAmounts",
    "phase0_setup", "phase1_broadcast_keys", "phase2_shuffle", "phase3_sign_and_submit", "run_mix",
]
