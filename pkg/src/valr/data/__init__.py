from .schema import REGIMES, ReasoningSample, Step, load_jsonl, save_jsonl
from .vocab import Vocabulary

__all__ = ["REGIMES", "ReasoningSample", "Step", "Vocabulary", "load_jsonl", "save_jsonl"]
