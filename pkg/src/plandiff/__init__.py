"""Planned diffusion: an autoregressive plan followed by parallel denoising of its spans."""

from .attention import AttentionMask, MaskMode, Role, RoleSequence, assign_roles, build_mask
from .diffusion import DenoisePolicy, Scaffold, UnmaskMode, denoise_spans, schedule_steps
from .engine import GenerationConfig, GenerationResult, generate_ar, generate_diffusion, generate_planned
from .model import ModelConfig, init_params
from .tags import AnnotatedDocument, Plan, SpanDecl, Stage, Vocabulary, parse_document, strip_control, validate

__version__ = "0.1.0"
