"""Synthetic multi-embodiment imitation suite with a bimodal navigation task."""
from .dataset import (
    Episode,
    ToyDataset,
    generate_dataset,
    load_dataset,
    read_manifest,
    save_dataset,
    single_datapoint_dataset,
)
from .evaluate import (
    BernoulliPolicy,
    EvalReport,
    ExpertPolicy,
    ModelPolicy,
    Policy,
    RolloutResult,
    ZeroPolicy,
    both_modes_covered,
    collapse_signature,
    evaluate,
    expected_chain_length,
    instruction_chain_eval,
    mode_coverage,
    rollout,
)
from .experts import classify_crossing, classify_winding, winding_angle
from .world import EMBODIMENTS, EmbodimentDef, ToyWorld, embodiment

__all__ = [name for name in dir() if not name.startswith("_")]
