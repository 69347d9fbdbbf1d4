"""Selective visual prompting and the appended-prompt baselines."""

from vimsvp.svp.baseline import (
    POSITIONS,
    AppendedPrompts,
    append_order,
    baseline_append_prompts,
    insertion_points,
)
from vimsvp.svp.prompting import (
    CrossPrompter,
    InnerPrompter,
    ScalingFactors,
    SvpConfig,
    SvpModule,
    assign_layer_groups,
    combine_and_overlay,
    cross_prompt,
    inner_prompt,
    svp_param_shapes,
    svp_parameter_count,
)

__all__ = [
    "AppendedPrompts", "CrossPrompter", "InnerPrompter", "POSITIONS", "ScalingFactors", "SvpConfig",
    "SvpModule", "append_order", "assign_layer_groups", "baseline_append_prompts", "combine_and_overlay",
    "cross_prompt", "inner_prompt", "insertion_points", "svp_param_shapes", "svp_parameter_count",
]
