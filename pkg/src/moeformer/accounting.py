"""Closed-form parameter and FLOP accounting for encoder configs.

Counts distinguish total stored parameters from inference-activated ones:
a routed layer stores its gate plus all N expert feed-forwards but evaluates
the gate plus exactly two experts per frame; adapter banks store every group
but evaluate one. The executable-consistency tests hold these formulas to
exact agreement with built models, and the MAC tallies to exact agreement
with instrumented forward passes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .config import ConformerLayerConfig, EncoderConfig


@dataclass
class ComponentCount:
    total: int = 0
    inference: int = 0

    def add(self, total: int, inference: int | None = None):
        self.total += total
        self.inference += total if inference is None else inference


@dataclass
class ParamReport:
    components: dict[str, ComponentCount]
    flops_sparse: int
    flops_dense: int

    @property
    def total_params(self) -> int:
        return sum(c.total for c in self.components.values())

    @property
    def inference_params(self) -> int:
        return sum(c.inference for c in self.components.values())


def _norm_params(d: int) -> int:
    return 2 * d


def _linear_params(d_in: int, d_out: int) -> int:
    return d_in * d_out + d_out


def _ffn_params(d: int, mult: int) -> int:
    return _linear_params(d, mult * d) + _linear_params(mult * d, d)


def _attention_params(d: int) -> int:
    return _norm_params(d) + 4 * _linear_params(d, d)


def _conv_module_params(d: int, kernel: int) -> int:
    return (
        _norm_params(d)
        + _linear_params(d, 2 * d)          # pointwise expand
        + kernel * d + d                    # depthwise kernel + bias
        + _norm_params(d)
        + _linear_params(d, d)              # pointwise project
    )


def _layer_counts(cfg: ConformerLayerConfig, stack: ComponentCount,
                  gates: ComponentCount, experts: ComponentCount) -> None:
    d = cfg.model_dim
    for placed_here in (cfg.moe_placement in ("start", "both"),
                        cfg.moe_placement in ("end", "both")):
        stack.add(_norm_params(d))  # the sublayer's pre-norm
        if not placed_here:
            stack.add(_ffn_params(d, cfg.ffn_mult))
        else:
            gates.add(d * cfg.num_experts)
            expert_size = _ffn_params(d, cfg.expert_mult)
            experts.add(cfg.num_experts * expert_size, 2 * expert_size)
    stack.add(_attention_params(d))
    stack.add(_conv_module_params(d, cfg.conv_kernel))
    stack.add(_norm_params(d))  # closing norm


def _walk_projections(config: EncoderConfig):
    """Yield (stage, in_dim, out_dim) for every width-matching projection the
    builder inserts; ``stage`` is 'causal' or 'non_causal'."""
    width = config.input_block.out_dim
    for i, layer in enumerate(config.causal):
        if i == config.stack_after:
            width *= 2
        if width != layer.model_dim:
            yield "causal", width, layer.model_dim
        width = layer.model_dim
    if config.stack_after == len(config.causal):
        width *= 2
    for layer in config.resolved_non_causal():
        if width != layer.model_dim:
            yield "non_causal", width, layer.model_dim
        width = layer.model_dim


def count_params(config: EncoderConfig) -> ParamReport:
    """Exact integer parameter counts per component, plus per-frame MACs."""
    config.validate()
    components = {
        name: ComponentCount()
        for name in ("frontend", "causal_stack", "non_causal_stack",
                     "gates", "experts", "adapters")
    }
    fe, ib = config.frontend, config.input_block
    components["frontend"].add(_linear_params(fe.stacked_dim, ib.out_dim))
    components["frontend"].add(ib.num_convs * (ib.kernel * ib.out_dim**2 + ib.out_dim))

    for stage, d_in, d_out in _walk_projections(config):
        bucket = "causal_stack" if stage == "causal" else "non_causal_stack"
        components[bucket].add(_linear_params(d_in, d_out))

    for layer in config.causal:
        _layer_counts(layer, components["causal_stack"],
                      components["gates"], components["experts"])
    for layer in config.resolved_non_causal():
        _layer_counts(layer, components["non_causal_stack"],
                      components["gates"], components["experts"])

    if config.adapters is not None:
        a = config.adapters
        for layer in config.non_causal:
            group = 2 * layer.model_dim * a.dim + a.dim + layer.model_dim
            components["adapters"].add(a.num_groups * group, group)

    sparse, dense = flops_per_frame(config)
    return ParamReport(components=components, flops_sparse=sparse, flops_dense=dense)


# --------------------------------------------------------------------------
# multiply-accumulate accounting


def _layer_macs_per_frame(cfg: ConformerLayerConfig, dense: bool) -> int:
    d = cfg.model_dim
    window = cfg.left_context + 1 + cfg.right_context  # steady-state
    macs = 0
    for placed_here in (cfg.moe_placement in ("start", "both"),
                        cfg.moe_placement in ("end", "both")):
        if not placed_here:
            macs += 2 * cfg.ffn_mult * d * d
        else:
            active = cfg.num_experts if dense else 2
            macs += d * cfg.num_experts + active * 2 * cfg.expert_mult * d * d
    macs += 4 * d * d + 2 * window * d          # attention projections + windowed scores
    macs += 3 * d * d + cfg.conv_kernel * d     # conv module
    return macs


def flops_per_frame(config: EncoderConfig, dense: bool | None = None):
    """Steady-state multiply-accumulates per final output frame.

    Returns (sparse, dense_equivalent): sparse evaluates 2 experts per routed
    layer, dense evaluates all N. Layers ahead of the time-stacking step run
    at twice the output frame rate and are weighted accordingly.
    """
    if dense is None:
        return (flops_per_frame(config, dense=False),
                flops_per_frame(config, dense=True))
    config.validate()
    fe, ib = config.frontend, config.input_block
    # the input block always precedes the stacking step, so it runs at 2x
    macs = 2 * (fe.stacked_dim * ib.out_dim + ib.num_convs * ib.kernel * ib.out_dim**2)
    width = ib.out_dim
    for i, layer in enumerate(config.causal):
        rate = 2 if i < config.stack_after else 1
        if i == config.stack_after:
            width *= 2
        if width != layer.model_dim:
            macs += rate * width * layer.model_dim
        width = layer.model_dim
        macs += rate * _layer_macs_per_frame(layer, dense)
    if config.stack_after == len(config.causal):
        width *= 2
    for layer in config.resolved_non_causal():
        if width != layer.model_dim:
            macs += width * layer.model_dim
        width = layer.model_dim
        macs += _layer_macs_per_frame(layer, dense)
    if config.adapters is not None:
        for layer in config.non_causal:
            macs += 2 * layer.model_dim * config.adapters.dim
    return macs


def _window_macs_exact(frames: int, left: int, right: int, d: int) -> int:
    total_pairs = 0
    for t in range(frames):
        total_pairs += min(t, left) + 1 + min(frames - 1 - t, right)
    return 2 * d * total_pairs


def total_macs(config: EncoderConfig, num_raw_frames: int, batch: int = 1,
               dense: bool = False, mode: str = "cascaded") -> int:
    """Exact MAC count of one forward pass, boundary effects included.

    Matches the instrumented tally of ``EncoderModel.forward`` on the same
    shapes (attention MACs are counted for mask-allowed pairs only).
    """
    config.validate()
    fe, ib = config.frontend, config.input_block
    t_pre = -(-num_raw_frames // fe.downsample)  # ceil
    macs = t_pre * fe.stacked_dim * ib.out_dim
    macs += t_pre * ib.num_convs * ib.kernel * ib.out_dim**2

    def layer_total(cfg: ConformerLayerConfig, frames: int) -> int:
        d = cfg.model_dim
        sub = 0
        for placed_here in (cfg.moe_placement in ("start", "both"),
                            cfg.moe_placement in ("end", "both")):
            if not placed_here:
                sub += frames * 2 * cfg.ffn_mult * d * d
            else:
                active = cfg.num_experts if dense else 2
                sub += frames * (d * cfg.num_experts + active * 2 * cfg.expert_mult * d * d)
        sub += frames * (4 * d * d) + _window_macs_exact(
            frames, cfg.left_context, cfg.right_context, d
        )
        sub += frames * (3 * d * d + cfg.conv_kernel * d)
        return sub

    width = ib.out_dim
    frames = t_pre
    for i, layer in enumerate(config.causal):
        if i == config.stack_after:
            width *= 2
            frames //= 2
        if width != layer.model_dim:
            macs += frames * width * layer.model_dim
        width = layer.model_dim
        macs += layer_total(layer, frames)
    if config.stack_after == len(config.causal):
        width *= 2
        frames //= 2
    if mode == "cascaded":
        for layer in config.resolved_non_causal():
            if width != layer.model_dim:
                macs += frames * width * layer.model_dim
            width = layer.model_dim
            macs += layer_total(layer, frames)
            if config.adapters is not None:
                macs += frames * 2 * layer.model_dim * config.adapters.dim
    return batch * macs


# --------------------------------------------------------------------------
# published-size reproduction


def fitted_remainder(counted_baseline_total: int,
                     published_baseline_total: int) -> int:
    """Additive constant for parameters outside the encoder (decoders,
    output embeddings), calibrated once from the dense baseline."""
    return published_baseline_total - counted_baseline_total


def report_lines(report: ParamReport, remainder: int = 0) -> list[str]:
    lines = ["component            total     inference"]
    for name, c in report.components.items():
        lines.append(f"{name:<18} {c.total:>10} {c.inference:>10}")
    lines.append(
        f"{'encoder':<18} {report.total_params:>10} {report.inference_params:>10}"
    )
    if remainder:
        lines.append(
            f"{'with remainder':<18} {report.total_params + remainder:>10} "
            f"{report.inference_params + remainder:>10}"
        )
    lines.append(f"flops/frame sparse={report.flops_sparse} dense={report.flops_dense}")
    return lines


def report_kv(report: ParamReport, remainder: int = 0) -> list[str]:
    lines = []
    for name, c in report.components.items():
        lines.append(f"params.{name}.total={c.total}")
        lines.append(f"params.{name}.inference={c.inference}")
    lines.append(f"params.total={report.total_params}")
    lines.append(f"params.inference={report.inference_params}")
    if remainder:
        lines.append(f"params.remainder={remainder}")
        lines.append(f"params.total_with_remainder={report.total_params + remainder}")
        lines.append(
            f"params.inference_with_remainder={report.inference_params + remainder}"
        )
    lines.append(f"flops.sparse={report.flops_sparse}")
    lines.append(f"flops.dense={report.flops_dense}")
    return lines
