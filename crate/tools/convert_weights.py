#!/usr/bin/env python3
"""Convert torchvision VGG-16 / AlexNet feature weights (and optional LPIPS
linear heads) into the VPRD container read by `vidpred eval --backbone
pretrained --weights <file>`.

    convert_weights.py --arch alexnet --features alexnet.pth --lin alex.pth --out alex.vprd
"""

import argparse
import hashlib
import json
import struct

import numpy as np
import torch

MAGIC = b"VPRD"
VERSION = 1


def write_container(path, meta, sections):
    payload = bytearray()
    infos = []
    for name, arr in sections:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        offset = len(payload)
        payload += arr.tobytes()
        infos.append({"name": name, "dtype": "f32", "shape": list(arr.shape), "offset": offset, "len": arr.nbytes})
    header = json.dumps(
        {"meta": meta, "sections": infos, "sha256": hashlib.sha256(payload).hexdigest()},
        separators=(",", ":"),
    ).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(payload)


def feature_sections(state):
    out = []
    for key, value in state.items():
        # Accept full-model state dicts as well as bare `features` ones, and
        # the `net.slice<k>.<i>` naming used by the LPIPS package.
        if key.startswith("net.slice"):
            key = "features." + key.split(".", 2)[2]
        if not key.startswith("features."):
            continue
        out.append((key, value.detach().cpu().numpy()))
    return out


def lin_sections(state):
    out = []
    k = 0
    while f"lin{k}.model.1.weight" in state:
        out.append((f"lin.{k}", state[f"lin{k}.model.1.weight"].detach().cpu().numpy().reshape(-1)))
        k += 1
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--arch", choices=["vgg16", "alexnet"], required=True)
    ap.add_argument("--features", required=True, help="state dict holding `features.<i>.weight/bias`")
    ap.add_argument("--lin", help="LPIPS state dict holding `lin<k>.model.1.weight`")
    ap.add_argument("--out", required=True)
    a = ap.parse_args()

    sections = feature_sections(torch.load(a.features, map_location="cpu"))
    if not sections:
        raise SystemExit(f"{a.features}: no `features.*` entries")
    if a.lin:
        sections += lin_sections(torch.load(a.lin, map_location="cpu"))
    write_container(a.out, {"arch": a.arch}, sections)
    print(f"wrote {a.out}: {len(sections)} arrays")


if __name__ == "__main__":
    main()
