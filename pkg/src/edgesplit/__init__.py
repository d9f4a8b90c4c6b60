"""Split feed-forward networks into cooperating per-resource sub-models."""

from .model import Layer, Model, TensorSpec, WeightStore, infer_shapes, load_model, save_model, topo_order
from .specio import MappingSpec, PlatformSpec, ResourceKey, parse_mapping, parse_platform, resource_options
from .splitter import CutEdge, SubModel, cut_edges, split_model
from .commgen import gen_comm_tables, gen_rankfile
from .plangen import ExecutionPlan, PlanAction, check_plan, gen_package, gen_plan

__version__ = "0.1.0"
