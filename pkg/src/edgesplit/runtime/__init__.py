from .kernels import execute_layer
from .launch import InferenceResult, launch
from .rank import RankResult, run_rank
from .reference import infer_reference

__all__ = ["execute_layer", "infer_reference", "launch", "run_rank", "InferenceResult", "RankResult"]
