"""Stride-to-dilation conversion of a stride-32 spec into an output-stride-8 FCN."""

from dataclasses import replace

from .network import DEFAULT_STRIDES, STEM_STRIDE, output_stride

TARGET_OUTPUT_STRIDE = 8


def convert_to_dilated(spec, target_output_stride=TARGET_OUTPUT_STRIDE):
    """Remove the stride of every stage that would push the output stride
    past ``target_output_stride`` and dilate the following convs to match.

    The unit whose stride is removed keeps the previous dilation on its first
    conv (that conv saw the coarser grid before) and uses the new rate on its
    second conv; later units in the stage use the new rate on both. 1x1
    projections are left undilated. Weights are untouched; BN statistics are
    flagged stale.
    """
    if target_output_stride != TARGET_OUTPUT_STRIDE:
        raise ValueError("only output stride 8 is supported")
    if spec.converted:
        raise ValueError("spec is already converted to a dilated network")
    strides = tuple(stage[0].stride for stage in spec.stages)
    if strides != DEFAULT_STRIDES or any(u.dilation != 1 for _, u in spec.units()):
        raise ValueError(f"expected default strides {DEFAULT_STRIDES} with no dilation, got {strides}")

    cum = STEM_STRIDE
    rate = 1
    stages = []
    for stage in spec.stages:
        units = []
        for i, u in enumerate(stage):
            if i == 0 and u.stride > 1 and cum * u.stride > target_output_stride:
                prev = rate
                rate *= u.stride
                units.append(replace(u, stride=1, dilation=rate, first_dilation=prev, orig_stride=u.stride))
                continue
            if i == 0:
                cum *= u.stride
            units.append(replace(u, dilation=rate) if rate > 1 else u)
        stages.append(tuple(units))
    out = replace(spec, stages=tuple(stages), head_upsample=target_output_stride, converted=True, bn_stale=True)
    assert output_stride(out) == target_output_stride
    return out.validate()


def receptive_field(spec, stages):
    """Half-width (input pixels) and jump of the feature map after ``stages``
    stages, following the longest (residual-branch) path.

    All convs use "same"-style padding, so output index ``o`` is centered on
    input pixel ``o * jump``.
    """
    radius, jump = 3, 2  # 7x7 stride-2 stem conv
    radius += jump  # 3x3 max-pool
    jump *= 2
    for stage in spec.stages[:stages]:
        for u in stage:
            d1 = max(u.candidates) if u.kind == "gated" else u.conv1_dilation
            d2 = max(u.candidates) if u.kind == "gated" else u.dilation
            radius += d1 * jump
            jump *= u.stride
            radius += d2 * jump
    return radius, jump


def interior_slice(spec, stages, size):
    """Output indices along an axis of length ``size`` whose receptive field
    stays inside the input (so zero padding never reaches them)."""
    radius, jump = receptive_field(spec, stages)
    n_out = size // jump
    lo = -(-radius // jump)
    hi = min(n_out, (size - 1 - radius) // jump + 1)
    return slice(lo, max(lo, hi))
