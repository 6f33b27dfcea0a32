#!/usr/bin/env python3
"""Export torchvision classifier weights to the archive layout lcam loads.

The lcam crate consumes frozen backbones as safetensors archives with one
entry per parameter:

* convolutions and linear layers:  ``<layer>.weight`` / ``<layer>.bias``
* folded batch-norms:              ``<layer>.scale``  / ``<layer>.shift``

For VGG-16 the names coincide with torchvision's own state dict
(``features.<i>.*``, ``classifier.<i>.*``), so the export is a plain copy.
For ResNet-50 two adjustments are needed: batch-norm layers are folded into
per-channel affines using their running statistics (inference semantics),
and the bias-free torchvision convolutions receive explicit zero biases.

Examples:

    python tools/export_backbone.py vgg16    --out models/vgg16.safetensors
    python tools/export_backbone.py resnet50 --out models/resnet50.safetensors

``--weights none`` exports the architecture with random initialisation
instead of downloading pretrained weights; the file is structurally
identical, which makes it useful for offline smoke tests of the load path.
"""

import argparse
from pathlib import Path

import torch
from safetensors.torch import save_file

# torchvision's BatchNorm2d default; the fold must use the same epsilon the
# network used at inference time.
BN_EPS = 1e-5


def fold_batchnorm(state, prefix):
    """Collapse a batch-norm into the equivalent per-channel affine.

    y = gamma * (x - mean) / sqrt(var + eps) + beta  ==  scale * x + shift
    """
    gamma = state[f"{prefix}.weight"]
    beta = state[f"{prefix}.bias"]
    mean = state[f"{prefix}.running_mean"]
    var = state[f"{prefix}.running_var"]
    scale = gamma / torch.sqrt(var + BN_EPS)
    shift = beta - mean * scale
    return scale, shift


def export_vgg16(weights):
    from torchvision.models import VGG16_Weights, vgg16

    model = vgg16(weights=VGG16_Weights.DEFAULT if weights == "default" else None)
    # Every parameter maps one-to-one; vgg16 has no batch-norms to fold.
    return dict(model.state_dict())


def export_resnet50(weights):
    from torchvision.models import ResNet50_Weights, resnet50

    model = resnet50(weights=ResNet50_Weights.DEFAULT if weights == "default" else None)
    state = model.state_dict()
    out = {}
    for name, tensor in state.items():
        if name.endswith("num_batches_tracked"):
            continue
        if name.endswith((".running_mean", ".running_var")):
            continue  # consumed by the fold below
        prefix, _, kind = name.rpartition(".")
        is_batchnorm = f"{prefix}.running_mean" in state
        if kind == "weight":
            if is_batchnorm:
                scale, shift = fold_batchnorm(state, prefix)
                out[f"{prefix}.scale"] = scale
                out[f"{prefix}.shift"] = shift
            elif tensor.dim() == 4:
                # Bias-free convolution: the loader expects a bias tensor.
                out[name] = tensor
                out[f"{prefix}.bias"] = torch.zeros(tensor.shape[0], dtype=tensor.dtype)
            else:
                out[name] = tensor  # the fully connected head
        elif kind == "bias" and not is_batchnorm:
            out[name] = tensor  # fc.bias; batch-norm biases are folded above
    return out


EXPORTERS = {"vgg16": export_vgg16, "resnet50": export_resnet50}
FINAL_FC = {"vgg16": "classifier.6.weight", "resnet50": "fc.weight"}


def main():
    parser = argparse.ArgumentParser(
        description="Export torchvision weights to an lcam-loadable safetensors archive."
    )
    parser.add_argument("model", choices=sorted(EXPORTERS))
    parser.add_argument("--out", type=Path, required=True, help="destination .safetensors path")
    parser.add_argument(
        "--weights",
        choices=["default", "none"],
        default="default",
        help="'default' downloads the pretrained weights; 'none' exports a random initialisation",
    )
    args = parser.parse_args()

    tensors = EXPORTERS[args.model](args.weights)
    tensors = {k: v.detach().to(torch.float32).contiguous() for k, v in tensors.items()}
    num_classes = tensors[FINAL_FC[args.model]].shape[0]
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_file(
        tensors,
        str(args.out),
        metadata={"model_id": args.model, "num_classes": str(num_classes)},
    )
    print(f"wrote {len(tensors)} tensors ({args.model}, {num_classes} classes) to {args.out}")


if __name__ == "__main__":
    main()
