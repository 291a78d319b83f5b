"""Write torchvision's ImageNet ResNet-50 weights as a safetensors file.

Usage: python scripts/export_resnet50.py weights/resnet50_imagenet.safetensors
Requires torch, torchvision and safetensors.
"""

import sys
from pathlib import Path

import torchvision
from safetensors.torch import save_file


def main() -> None:
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "weights/resnet50_imagenet.safetensors")
    out.parent.mkdir(parents=True, exist_ok=True)
    model = torchvision.models.resnet50(weights=torchvision.models.ResNet50_Weights.IMAGENET1K_V1)
    state = {k: v.contiguous() for k, v in model.state_dict().items()}
    save_file(state, str(out))
    print(f"wrote {len(state)} tensors to {out}")


if __name__ == "__main__":
    main()
