import json

import numpy as np
import pytest

from bambino_engine.core.checkpoint import (
    BLOB, MANIFEST, checkpoint_checksum, clear_checkpoints, latest_checkpoint, load_checkpoint,
    parameters_checksum, read_manifest, save_checkpoint, step_dir,
)
from bambino_engine.core.numerics import AdamState
from bambino_engine.core.training import TrainerState
from bambino_engine.errors import CheckpointError


@pytest.fixture
def state(toy_model):
    clm = AdamState.for_params(toy_model.params, lr=3e-4)
    ppo = AdamState.for_params(toy_model.params, lr=1e-4)
    clm.step, ppo.step = 7, 2
    for name in toy_model.params:
        clm.m[name] += 0.5
        ppo.v[name] += 0.25
    return TrainerState(step=9, epoch=1, iterator={"epoch": 1, "cursor": 4, "seed": 0},
                        clm_opt=clm, ppo_opt=ppo)


def test_round_trip_restores_everything(tmp_path, toy_model, state):
    path = save_checkpoint(step_dir(tmp_path, 9), toy_model, state, extra={"mode": "bambino"})
    model, loaded, extra = load_checkpoint(path)
    assert model.config == toy_model.config
    assert model.role == "baby"
    assert parameters_checksum(model.params) == parameters_checksum(toy_model.params)
    assert extra == {"mode": "bambino"}
    assert (loaded.step, loaded.epoch, loaded.iterator) == (9, 1, state.iterator)
    assert loaded.clm_opt.step == 7 and loaded.ppo_opt.lr == 1e-4
    for name in toy_model.params:
        np.testing.assert_array_equal(loaded.clm_opt.m[name], state.clm_opt.m[name])
        np.testing.assert_array_equal(loaded.ppo_opt.v[name], state.ppo_opt.v[name])


def test_model_only_checkpoint(tmp_path, toy_model):
    path = save_checkpoint(tmp_path / "plain", toy_model.clone(role="parent"))
    model, loaded, extra = load_checkpoint(path)
    assert loaded is None
    assert extra == {}
    assert model.role == "parent"


def test_loaded_parameters_are_trainable(tmp_path, toy_model):
    model, _, _ = load_checkpoint(save_checkpoint(tmp_path / "c", toy_model))
    model.params["wte"].data[0, 0] += 1.0
    assert all(p.requires_grad for _, p in model.params.items())


def test_save_is_byte_stable(tmp_path, toy_model, state):
    a = save_checkpoint(tmp_path / "a", toy_model, state)
    b = save_checkpoint(tmp_path / "b", toy_model, state)
    assert (a / BLOB).read_bytes() == (b / BLOB).read_bytes()
    assert (a / MANIFEST).read_bytes() == (b / MANIFEST).read_bytes()
    assert checkpoint_checksum(a) == checkpoint_checksum(b)
    assert not list(tmp_path.rglob("*.tmp"))


def test_corrupted_blob_is_rejected(tmp_path, toy_model):
    path = save_checkpoint(tmp_path / "c", toy_model)
    raw = bytearray((path / BLOB).read_bytes())
    raw[10] ^= 0xFF
    (path / BLOB).write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(path)


def test_config_mismatch_is_rejected(tmp_path, toy_model):
    path = save_checkpoint(tmp_path / "c", toy_model)
    other = toy_model.config.model_copy(update={"d_ff": 32})
    with pytest.raises(CheckpointError, match="config"):
        load_checkpoint(path, expected_config=other)


def test_unknown_format_is_rejected(tmp_path, toy_model):
    path = save_checkpoint(tmp_path / "c", toy_model)
    manifest = json.loads((path / MANIFEST).read_text())
    manifest["format"] = "something else"
    (path / MANIFEST).write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="unsupported format"):
        read_manifest(path)


def test_missing_manifest(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nothing")


def test_latest_checkpoint_picks_highest_complete_step(tmp_path, toy_model):
    assert latest_checkpoint(tmp_path / "absent") is None
    save_checkpoint(step_dir(tmp_path, 5), toy_model)
    save_checkpoint(step_dir(tmp_path, 40), toy_model)
    step_dir(tmp_path, 90).mkdir()
    (tmp_path / "notes").mkdir()
    assert latest_checkpoint(tmp_path) == tmp_path / "step-0000040"


def test_clear_checkpoints_keeps_other_entries(tmp_path, toy_model):
    assert clear_checkpoints(tmp_path / "absent") == []
    save_checkpoint(step_dir(tmp_path, 5), toy_model)
    step_dir(tmp_path, 90).mkdir()
    (tmp_path / "notes").mkdir()
    (tmp_path / "step-7.txt").write_text("x")
    removed = clear_checkpoints(tmp_path)
    assert [p.name for p in removed] == ["step-0000005", "step-0000090"]
    assert sorted(p.name for p in tmp_path.iterdir()) == ["notes", "step-7.txt"]
    assert latest_checkpoint(tmp_path) is None


def test_parameters_checksum_sees_changes(toy_model):
    before = parameters_checksum(toy_model.params)
    toy_model.params["ln_f.bias"].data[0] = 1e-12
    assert parameters_checksum(toy_model.params) != before
