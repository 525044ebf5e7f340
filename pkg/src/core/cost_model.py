"""
Cost Model

Analytic FLOPs and memory accounting for the detection head as a function of
query count, token count, width, depth and sampling ratio.

One multiply-accumulate counts as 2 FLOPs. Memory is counted in bytes.
"""

from dataclasses import dataclass, replace

import yaml

from .config_loader import DATA_DIR
from .errors import ContractViolation
from .focal_sampling import sampled_token_count

FLOPS_PER_MAC = 2

BASELINE_RATIO = 1.0
REFERENCE_RATIO = 0.25

# YAML cache - load once, use many times
full_scale_head_cache = None

# Published head costs: (quantity, value, what the model leaves out or counts differently)
PUBLISHED_REFERENCE = (
    ("flops_total_ratio_1", 40.1e9,
     "model counts dense cross-attention of 900 queries over every token plus k/v maps of every token; "
     "these token-linear terms alone exceed the published total"),
    ("flops_total_ratio_0.25", 24.1e9,
     "same token-linear terms at a quarter of the tokens, plus the full FFN and q/out maps of all queries"),
    ("delta_flops_pct_ratio_0.25", -44.0,
     "token-linear share of the model total is larger than the published rows imply, so the saving is overstated"),
    ("token_linear_flops_share_ratio_1", (40.1 - 24.1) / ((1.0 - REFERENCE_RATIO) * 40.1),
     "published share is implied by its 0.25 and 1.0 rows; the model share follows from the counted terms"),
    ("sampling_overhead_flops", 3.7e9,
     "scoring cost per token is set in the head file to reproduce this value"),
    ("mem_total_ratio_1", 6.4e9,
     "published value is whole-process GPU memory; the model counts head activations and weights only"),
    ("delta_mem_pct_ratio_0.25", -43.8,
     "d_ff is set so the token-independent memory share reproduces this saving"),
)

#=============================================================================
# CONFIG
#=============================================================================

@dataclass(frozen=True)
class HeadConfig:
    """
    Detection-head sizing.

    A sampling head pays the per-token scoring cost at every ratio, 1.0 included;
    sampling_enabled=False models the head without scoring branches.
    sampling_flops_per_token defaults to 4 * d_model^2.
    """

    num_queries: int
    token_count: int
    d_model: int
    d_ff: int
    layers: int
    ratio: float = 1.0
    bytes_per_scalar: int = 4
    self_attention: bool = True
    feed_forward: bool = True
    sampling_enabled: bool = True
    sampling_flops_per_token: int = None

    def __post_init__(self):
        for name in ("num_queries", "token_count", "d_model", "bytes_per_scalar"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be positive, got {getattr(self, name)}")
        if self.layers < 0 or self.d_ff < 0:
            raise ContractViolation("layers and d_ff must be non-negative")
        if not 0.0 < self.ratio <= 1.0:
            raise ContractViolation(f"ratio must be in (0, 1], got {self.ratio}")

    @property
    def sampled_tokens(self):
        return sampled_token_count(self.token_count, self.ratio)

    @property
    def scoring_flops_per_token(self):
        if self.sampling_flops_per_token is None:
            return 4 * self.d_model ** 2
        return self.sampling_flops_per_token


def head_config_from_mapping(mapping, **overrides):
    """Build a HeadConfig from a YAML mapping (head files, config sections)."""
    fields = dict(mapping)
    fields.update(overrides)
    return HeadConfig(**fields)


def load_full_scale_head(**overrides):
    """Load and cache full_scale_head.yaml, the frozen full-resolution head."""
    global full_scale_head_cache
    if full_scale_head_cache is None:
        with open(DATA_DIR / "full_scale_head.yaml", "r") as f:
            full_scale_head_cache = yaml.safe_load(f)["head"]
    return head_config_from_mapping(full_scale_head_cache, **overrides)


def head_config_from_run(scene_config, config):
    """HeadConfig for the desk-scale run described by a SceneConfig and merged config."""
    model = config["model"]
    cost = config["cost_model"]
    return HeadConfig(
        num_queries=scene_config.num_queries,
        token_count=scene_config.token_count,
        d_model=scene_config.d_model,
        d_ff=int(model["d_ff"]),
        layers=scene_config.decoder_layers,
        ratio=scene_config.rho,
        bytes_per_scalar=int(cost["bytes_per_scalar"]),
        self_attention=bool(model["self_attention"]),
        sampling_flops_per_token=cost.get("sampling_flops_per_token"),
    )

#=============================================================================
# FLOPS AND MEMORY
#=============================================================================

def decoder_flops(cfg):
    """
    FLOPs breakdown of the head.

    Returns:
        dict: cross_attn, self_attn, ffn, projections, sampling_overhead, total
    """
    n_q = cfg.num_queries
    n_s = cfg.sampled_tokens
    d = cfg.d_model
    layers = cfg.layers

    # scores q k^T plus weighted sum of v, each n_q * n_s * d MACs
    cross_attn = layers * FLOPS_PER_MAC * 2 * n_q * n_s * d
    self_attn = layers * FLOPS_PER_MAC * n_q * n_q * d if cfg.self_attention else 0
    ffn = layers * FLOPS_PER_MAC * n_q * d * cfg.d_ff if cfg.feed_forward else 0
    # q and output maps over queries, k and v maps over sampled tokens
    projections = layers * FLOPS_PER_MAC * (2 * n_q * d * d + 2 * n_s * d * d)
    sampling_overhead = cfg.token_count * cfg.scoring_flops_per_token if cfg.sampling_enabled else 0

    breakdown = {
        "cross_attn": cross_attn,
        "self_attn": self_attn,
        "ffn": ffn,
        "projections": projections,
        "sampling_overhead": sampling_overhead,
    }
    breakdown["total"] = sum(breakdown.values())
    return breakdown


def token_linear_flops(cfg):
    """FLOPs that scale with the sampled token count: cross-attention plus the k and v maps."""
    kv_projections = cfg.layers * FLOPS_PER_MAC * 2 * cfg.sampled_tokens * cfg.d_model ** 2
    return decoder_flops(cfg)["cross_attn"] + kv_projections


def decoder_memory(cfg):
    """
    Activation and weight memory of the head in bytes.

    Returns:
        dict: attn_matrices, kv_buffers, query_states, ffn_activations, weights, total
    """
    n_q = cfg.num_queries
    n_s = cfg.sampled_tokens
    d = cfg.d_model
    layers = cfg.layers
    size = cfg.bytes_per_scalar

    breakdown = {
        "attn_matrices": layers * n_q * n_s * size,
        "kv_buffers": 2 * n_s * d * size,
        "query_states": layers * n_q * d * size,
        "ffn_activations": layers * n_q * cfg.d_ff * size if cfg.feed_forward else 0,
        "weights": layers * (4 * d * d + 2 * d * cfg.d_ff) * size,
    }
    breakdown["total"] = sum(breakdown.values())
    return breakdown

#=============================================================================
# SWEEP
#=============================================================================

@dataclass(frozen=True)
class SweepRow:
    ratio: float
    flops_total: int
    flops_cross_attn: int
    mem_total: int
    mem_attn: int
    delta_flops_pct: float
    delta_mem_pct: float


SWEEP_COLUMNS = (
    "ratio", "flops_total", "flops_cross_attn", "mem_total", "mem_attn", "delta_flops_pct", "delta_mem_pct",
)


def percent_change(value, baseline):
    return 100.0 * (value - baseline) / baseline


def ratio_sweep(cfg, ratios):
    """
    Cost table over sampling ratios, with deltas against the same head at ratio 1.0.

    Returns:
        list: SweepRow per ratio, in the order given
    """
    ratios = list(ratios)
    if not ratios:
        raise ContractViolation("ratio sweep needs at least one ratio")
    baseline = replace(cfg, ratio=BASELINE_RATIO)
    base_flops = decoder_flops(baseline)["total"]
    base_memory = decoder_memory(baseline)["total"]

    rows = []
    for ratio in ratios:
        point = replace(cfg, ratio=float(ratio))
        flops = decoder_flops(point)
        memory = decoder_memory(point)
        rows.append(SweepRow(
            ratio=float(ratio),
            flops_total=flops["total"],
            flops_cross_attn=flops["cross_attn"],
            mem_total=memory["total"],
            mem_attn=memory["attn_matrices"],
            delta_flops_pct=percent_change(flops["total"], base_flops),
            delta_mem_pct=percent_change(memory["total"], base_memory),
        ))
    return rows


def format_sweep_table(rows):
    """Human-readable sweep table (GFLOPs with MAC = 2 FLOPs, memory in MiB)."""
    lines = [
        f"{'ratio':>6} | {'GFLOPs':>10} | {'cross GFLOPs':>12} | {'mem MiB':>10} | {'dFLOPs %':>9} | {'dMem %':>8}",
        "-" * 70,
    ]
    for row in rows:
        lines.append(
            f"{row.ratio:>6.2f} | {row.flops_total / 1e9:>10.4f} | {row.flops_cross_attn / 1e9:>12.4f} | "
            f"{row.mem_total / 2 ** 20:>10.2f} | {row.delta_flops_pct:>9.2f} | {row.delta_mem_pct:>8.2f}"
        )
    return "\n".join(lines)

#=============================================================================
# PUBLISHED REFERENCE
#=============================================================================

def model_reference_values(cfg):
    """Model values for each PUBLISHED_REFERENCE quantity."""
    full = replace(cfg, ratio=BASELINE_RATIO)
    quarter = replace(cfg, ratio=REFERENCE_RATIO)
    full_flops, quarter_flops = decoder_flops(full), decoder_flops(quarter)
    full_memory, quarter_memory = decoder_memory(full)["total"], decoder_memory(quarter)["total"]
    return {
        "flops_total_ratio_1": full_flops["total"],
        "flops_total_ratio_0.25": quarter_flops["total"],
        "delta_flops_pct_ratio_0.25": percent_change(quarter_flops["total"], full_flops["total"]),
        "token_linear_flops_share_ratio_1": token_linear_flops(full) / full_flops["total"],
        "sampling_overhead_flops": full_flops["sampling_overhead"],
        "mem_total_ratio_1": full_memory,
        "delta_mem_pct_ratio_0.25": percent_change(quarter_memory, full_memory),
    }


def published_residuals(cfg=None):
    """
    Compare the model against the published head costs.

    Args:
        cfg: head to evaluate; defaults to the full-scale head

    Returns:
        list: {"quantity", "model", "published", "difference", "cause"} per reference value,
              difference = model - published
    """
    if cfg is None:
        cfg = load_full_scale_head()
    model = model_reference_values(cfg)
    return [
        {
            "quantity": quantity,
            "model": model[quantity],
            "published": published,
            "difference": model[quantity] - published,
            "cause": cause,
        }
        for quantity, published, cause in PUBLISHED_REFERENCE
    ]


def format_residual_table(residuals):
    """Human-readable residual table; FLOPs and bytes in G, ratios and percents as is."""
    lines = [f"{'quantity':<34} | {'model':>10} | {'published':>10} | {'diff':>10}", "-" * 74]
    for entry in residuals:
        scale = 1e9 if entry["quantity"].startswith(("flops_total", "mem_total", "sampling_overhead")) else 1.0
        lines.append(
            f"{entry['quantity']:<34} | {entry['model'] / scale:>10.3f} | "
            f"{entry['published'] / scale:>10.3f} | {entry['difference'] / scale:>10.3f}"
        )
    return "\n".join(lines)
