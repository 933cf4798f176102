"""Batch encoding jobs: patches in, EMB1 file out."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from embed_bridge.emb1 import DIM, write_embeddings
from embed_bridge.encoder import load_encoder
from embed_bridge.preprocess import preprocess_patch


@dataclass
class BridgeJob:
    patch_dir: str
    encoder: str
    output: str
    batch_size: int = 16
    device: str = "cpu"


def _list_patches(patch_dir: Path) -> list[Path]:
    exts = (".png", ".jpg", ".jpeg", ".bmp")
    return sorted(p for p in patch_dir.iterdir() if p.suffix.lower() in exts)


def encode_batch(job: BridgeJob) -> Path:
    """Encode every patch in the job's directory into one EMB1 file.

    Case ids are the patch file stems. Fails before writing anything if the
    encoder's output dimension is not 1536.
    """
    patch_dir = Path(job.patch_dir)
    if not patch_dir.is_dir():
        raise FileNotFoundError(f"patch directory {patch_dir} does not exist")
    paths = _list_patches(patch_dir)
    if not paths:
        raise FileNotFoundError(f"no patch images found in {patch_dir}")
    model = load_encoder(job.encoder, device=job.device)

    records: list[tuple[str, np.ndarray]] = []
    with torch.no_grad():
        for start in range(0, len(paths), job.batch_size):
            chunk = paths[start : start + job.batch_size]
            tensors = []
            for p in chunk:
                arr = np.asarray(Image.open(p).convert("RGB"))
                tensors.append(torch.from_numpy(preprocess_patch(arr)))
            batch = torch.stack(tensors).to(job.device)
            out = model(batch)
            if out.ndim != 2 or out.shape[1] != DIM:
                raise ValueError(
                    f"encoder produced shape {tuple(out.shape)}, expected (N, {DIM})"
                )
            feats = out.cpu().numpy().astype(np.float32)
            for p, vec in zip(chunk, feats):
                records.append((p.stem, vec))
    out_path = Path(job.output)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_embeddings(out_path, records)
    return out_path
