"""Export torchvision VGG-16/19 convolution weights to safetensors.

    python scripts/convert_vgg.py --arch vgg16 --out weights/vgg16_features.safetensors

Only the `features.N.weight` / `features.N.bias` tensors are kept, which is
what `loss.backbone = pretrained16 | pretrained19` reads.
"""

import argparse

import torchvision
from safetensors.torch import save_file


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--arch", choices=["vgg16", "vgg19"], default="vgg16")
    ap.add_argument("--out", required=True)
    args = ap.parse_args()
    weights = {"vgg16": "VGG16_Weights", "vgg19": "VGG19_Weights"}[args.arch]
    model = getattr(torchvision.models, args.arch)(weights=getattr(torchvision.models, weights).IMAGENET1K_V1)
    tensors = {k: v.contiguous() for k, v in model.state_dict().items() if k.startswith("features.")}
    save_file(tensors, args.out)
    print(f"wrote {len(tensors)} tensors to {args.out}")


if __name__ == "__main__":
    main()
