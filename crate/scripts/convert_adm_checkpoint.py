#!/usr/bin/env python3
"""Convert a guided-diffusion UNet state dict (.pt) to a diffprobe safetensors file.

Requires torch and safetensors:

    python scripts/convert_adm_checkpoint.py 256x256_diffusion_uncond.pt adm256.safetensors
"""

import argparse
import json

import numpy as np
import torch
from safetensors.numpy import save_file

ADM_256_UNCOND = {
    "image_size": 256,
    "in_channels": 3,
    "model_channels": 256,
    "out_channels": 6,
    "num_res_blocks": 2,
    "channel_mult": [1, 1, 2, 2, 4, 4],
    "attention_ds": [8, 16, 32],
    "middle_attention": True,
    "num_head_channels": 64,
    "num_heads": 4,
    "resblock_updown": True,
    "conv_resample": True,
    "use_scale_shift_norm": True,
    "norm_groups": 32,
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("state_dict")
    ap.add_argument("out")
    ap.add_argument("--config", help="JSON file with the UNet config (default: 256x256 unconditional)")
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--beta-start", type=float, default=1e-4)
    ap.add_argument("--beta-end", type=float, default=0.02)
    args = ap.parse_args()

    config = ADM_256_UNCOND
    if args.config:
        with open(args.config) as f:
            config = json.load(f)

    sd = torch.load(args.state_dict, map_location="cpu")
    if "state_dict" in sd:
        sd = sd["state_dict"]
    tensors = {k: v.detach().float().numpy().astype(np.float32) for k, v in sd.items()}

    betas = np.linspace(args.beta_start, args.beta_end, args.steps, dtype=np.float64)
    meta = {
        "format": "diffprobe-unet",
        "unet_config": json.dumps(config),
        "betas": json.dumps([float(b) for b in betas]),
    }
    save_file(tensors, args.out, metadata=meta)
    print(f"wrote {len(tensors)} tensors to {args.out}")


if __name__ == "__main__":
    main()
