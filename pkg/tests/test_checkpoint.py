import struct

import numpy as np
import pytest

from ren import autodiff as ad
from ren.autodiff import Adam
from ren.checkpoint import MAGIC, load_checkpoint, model_echo, restore_model, save_checkpoint
from ren.elbo import elbo_plain
from ren.utils import CheckpointError


@pytest.fixture
def trained(tiny_model, toy_batch):
    optimizer = Adam(tiny_model.vae_parameters(), lr=1e-2)
    for seed in range(3):
        ad.backward(-elbo_plain(tiny_model, toy_batch, np.random.default_rng(seed)).total)
        optimizer.step()
    tiny_model.current_alpha = np.array([0.25, 7.5])
    return tiny_model, {"vae": optimizer}


@pytest.fixture
def saved(trained, tmp_path):
    model, optimizers = trained
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(path, model, model_echo(model, 0, {"note": "tiny"}), optimizers)
    return path


def test_round_trip_is_bit_exact(trained, saved):
    model, optimizers = trained
    restored = restore_model(load_checkpoint(saved))
    original = model.named_parameters()
    for name, p in restored.named_parameters().items():
        np.testing.assert_array_equal(p.data, original[name].data, err_msg=name)
    np.testing.assert_array_equal(restored.current_alpha, [0.25, 7.5])
    assert restored.variant == model.variant


def test_optimizer_state_survives(trained, saved):
    model, optimizers = trained
    ckpt = load_checkpoint(saved)
    fresh = Adam(model.vae_parameters(), lr=1e-2)
    fresh.load_state_dict(ckpt.optimizer_state("vae"))
    assert fresh.state.step == optimizers["vae"].state.step == 3
    for name, m in optimizers["vae"].state.m.items():
        np.testing.assert_array_equal(fresh.state.m[name], m)
        np.testing.assert_array_equal(fresh.state.v[name], optimizers["vae"].state.v[name])


def test_config_echo(saved):
    config = load_checkpoint(saved).config
    assert config["family"] == "one_moon" and config["seed"] == 0 and config["note"] == "tiny"
    assert config["model"]["latent_dim"] == 2


def test_file_starts_with_magic(saved):
    with open(saved, "rb") as f:
        assert f.read(len(MAGIC)) == MAGIC


def test_bad_magic(saved):
    with open(saved, "r+b") as f:
        f.write(b"NOTACKPT")
    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(saved)


@pytest.mark.parametrize("keep", [4, 20, 200, -3])
def test_truncated_file(saved, keep):
    with open(saved, "rb") as f:
        payload = f.read()
    with open(saved, "wb") as f:
        f.write(payload[:keep])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(saved)


def test_corrupt_record_name(saved):
    with open(saved, "rb") as f:
        payload = bytearray(f.read())
    config_len = struct.unpack("<I", payload[len(MAGIC): len(MAGIC) + 4])[0]
    first_name = len(MAGIC) + 4 + config_len + 4 + 4
    payload[first_name] = 0xFF
    with open(saved, "wb") as f:
        f.write(bytes(payload))
    with pytest.raises(CheckpointError, match="corrupt record name"):
        load_checkpoint(saved)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / "absent.ckpt"))


def test_restore_rejects_mismatched_shapes(saved):
    ckpt = load_checkpoint(saved)
    ckpt.config["model"]["hidden"] = [8, 9]
    with pytest.raises(CheckpointError, match="shape"):
        restore_model(ckpt)


def test_restore_rejects_missing_parameters(saved):
    ckpt = load_checkpoint(saved)
    ckpt.arrays = {k: v for k, v in ckpt.arrays.items() if not k.startswith("param/flow.")}
    with pytest.raises(CheckpointError, match="lacks"):
        restore_model(ckpt)
