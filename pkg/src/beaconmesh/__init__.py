"""Decentralized multi-agent task runtime: beacon allocation, parallel chains, weighted voting."""

from .execution import ChainResult, extract_boxed, normalize_answer
from .ledger import AgentRecord, Ledger, LedgerSnapshot, merge_snapshots
from .matching import KeywordTagger, match_score, select_executor
from .planning import ChainOfThought, TaskDescription
from .protocol import Envelope, KeyPair, MsgType, decode, encode, sign, verify
from .voting import Verdict, vote

__version__ = "0.1.0"

__all__ = [
    "AgentRecord",
    "ChainOfThought",
    "ChainResult",
    "Envelope",
    "KeyPair",
    "KeywordTagger",
    "Ledger",
    "LedgerSnapshot",
    "MsgType",
    "TaskDescription",
    "Verdict",
    "decode",
    "encode",
    "extract_boxed",
    "match_score",
    "merge_snapshots",
    "normalize_answer",
    "select_executor",
    "sign",
    "verify",
    "vote",
]
