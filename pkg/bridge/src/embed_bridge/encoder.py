"""Encoder loading.

Encoder identifiers:
  torchscript:<path>       a TorchScript archive (torch.jit.load)
  module:<pkg.mod:factory> import `pkg.mod` and call `factory()` for a module
  test-projection[:<dim>]  built-in deterministic linear projection, for
                           tests and dry runs (default dim 1536)

Whatever loads is frozen to eval mode and treated as a pure feature
extractor: (N, 3, 224, 224) float32 in, (N, D) float32 out.
"""

from __future__ import annotations

import importlib

import torch


class _TestProjection(torch.nn.Module):
    """Deterministic mean-pool + fixed random projection; no training."""

    def __init__(self, dim: int = 1536):
        super().__init__()
        gen = torch.Generator().manual_seed(1536)
        # Pool to 3*16*16 then project; weights fixed by the seed.
        self.pool = torch.nn.AdaptiveAvgPool2d((16, 16))
        self.proj = torch.nn.Linear(3 * 16 * 16, dim, bias=False)
        with torch.no_grad():
            self.proj.weight.copy_(
                torch.randn(dim, 3 * 16 * 16, generator=gen) / (3 * 16 * 16) ** 0.5
            )

    def forward(self, x):
        pooled = self.pool(x).flatten(1)
        return self.proj(pooled)


def load_encoder(identifier: str, device: str = "cpu") -> torch.nn.Module:
    if identifier.startswith("torchscript:"):
        model = torch.jit.load(identifier.split(":", 1)[1], map_location=device)
    elif identifier.startswith("module:"):
        spec = identifier.split(":", 1)[1]
        mod_name, _, attr = spec.rpartition(":")
        if not mod_name:
            raise ValueError(
                f"encoder spec {identifier!r} must look like module:pkg.mod:factory"
            )
        factory = getattr(importlib.import_module(mod_name), attr)
        model = factory()
    elif identifier.startswith("test-projection"):
        _, _, dim = identifier.partition(":")
        model = _TestProjection(int(dim) if dim else 1536)
    else:
        raise ValueError(f"unrecognized encoder identifier {identifier!r}")
    model = model.to(device)
    model.eval()
    return model
