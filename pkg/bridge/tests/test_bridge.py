"""Bridge: format round-trips, dimension enforcement, preprocessing goldens."""

import importlib.util
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from embed_bridge.cli import main
from embed_bridge.emb1 import DIM, read_embeddings, write_embeddings
from embed_bridge.encoder import load_encoder
from embed_bridge.job import BridgeJob, encode_batch
from embed_bridge.preprocess import preprocess_patch

HAVE_PRIMARY = importlib.util.find_spec("pathnav") is not None

PRIMARY_GOLDEN_DIR = Path(__file__).resolve().parents[2] / "tests" / "data"


def make_patches(tmp_path, n=10, size=256):
    rng = np.random.default_rng(1)
    pdir = tmp_path / "patches"
    pdir.mkdir()
    for i in range(n):
        arr = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
        Image.fromarray(arr).save(pdir / f"case-{i:02d}.png")
    return pdir


def test_encode_batch_counts_and_dim(tmp_path):
    pdir = make_patches(tmp_path, n=10)
    out = tmp_path / "emb.bin"
    encode_batch(BridgeJob(patch_dir=pdir, encoder="test-projection", output=out))
    records = read_embeddings(out)
    assert len(records) == 10
    assert all(v.shape == (DIM,) for _, v in records)
    assert [c for c, _ in records] == [f"case-{i:02d}" for i in range(10)]


def test_encoder_wrong_dimension_rejected(tmp_path):
    pdir = make_patches(tmp_path, n=2)
    out = tmp_path / "emb.bin"
    job = BridgeJob(patch_dir=pdir, encoder="test-projection:1024", output=out)
    with pytest.raises(ValueError, match="1536"):
        encode_batch(job)
    assert not out.exists()


def test_unknown_encoder_identifier():
    with pytest.raises(ValueError, match="unrecognized"):
        load_encoder("mystery-model")


def test_torchscript_encoder_round_trip(tmp_path):
    scripted = torch.jit.script(load_encoder("test-projection"))
    spath = tmp_path / "enc.pt"
    scripted.save(str(spath))
    pdir = make_patches(tmp_path, n=3)
    out = tmp_path / "emb.bin"
    encode_batch(BridgeJob(patch_dir=pdir, encoder=f"torchscript:{spath}", output=out))
    assert len(read_embeddings(out)) == 3


def test_batching_invariance(tmp_path):
    pdir = make_patches(tmp_path, n=7)
    a = tmp_path / "a.bin"
    b = tmp_path / "b.bin"
    encode_batch(BridgeJob(patch_dir=pdir, encoder="test-projection", output=a, batch_size=2))
    encode_batch(BridgeJob(patch_dir=pdir, encoder="test-projection", output=b, batch_size=7))
    ra, rb = read_embeddings(a), read_embeddings(b)
    for (ca, va), (cb, vb) in zip(ra, rb):
        assert ca == cb
        np.testing.assert_allclose(va, vb, atol=1e-5)


def test_cli_smoke(tmp_path, capsys):
    pdir = make_patches(tmp_path, n=2)
    out = tmp_path / "emb.bin"
    rc = main(["--patches", str(pdir), "--encoder", "test-projection", "--out", str(out)])
    assert rc == 0
    assert out.exists()


def test_cli_missing_patches(tmp_path):
    rc = main(
        [
            "--patches",
            str(tmp_path / "nope"),
            "--encoder",
            "test-projection",
            "--out",
            str(tmp_path / "emb.bin"),
        ]
    )
    assert rc == 1


def test_own_round_trip_exact_bits(tmp_path):
    rng = np.random.default_rng(4)
    records = [(f"id{i}", rng.normal(size=DIM).astype(np.float32)) for i in range(5)]
    path = tmp_path / "emb.bin"
    write_embeddings(path, records)
    back = read_embeddings(path)
    for (_, a), (_, b) in zip(records, back):
        assert a.tobytes() == b.tobytes()


def test_preprocess_matches_committed_goldens():
    for i in range(3):
        fixture = PRIMARY_GOLDEN_DIR / f"preprocess_fixture_{i}.png"
        golden = PRIMARY_GOLDEN_DIR / f"preprocess_golden_{i}.npy"
        if not fixture.exists():
            pytest.skip("primary golden fixtures not present")
        img = np.asarray(Image.open(fixture).convert("RGB"))
        want = np.load(golden)
        got = preprocess_patch(img)
        assert np.abs(got - want).max() <= 1e-5


@pytest.mark.skipif(not HAVE_PRIMARY, reason="primary package not installed")
def test_cross_component_parity(tmp_path):
    """Bridge output parses bit-exactly in the primary reader; preprocessing
    agrees with the primary implementation to 1e-5."""
    from pathnav.heads import preprocess as primary_preprocess
    from pathnav.heads import read_embeddings as primary_read

    rng = np.random.default_rng(9)
    for shape in ((300, 300), (480, 640), (256, 320)):
        arr = rng.integers(0, 256, size=(*shape, 3), dtype=np.uint8)
        mine = preprocess_patch(arr)
        theirs = primary_preprocess(arr)
        assert np.abs(mine - theirs).max() <= 1e-5

    pdir = make_patches(tmp_path, n=4)
    out = tmp_path / "emb.bin"
    encode_batch(BridgeJob(patch_dir=pdir, encoder="test-projection", output=out))
    ours = read_embeddings(out)
    theirs = primary_read(out)
    assert [c for c, _ in ours] == [c for c, _ in theirs]
    for (_, a), (_, b) in zip(ours, theirs):
        assert a.tobytes() == b.tobytes()
