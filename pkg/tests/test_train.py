import dataclasses

import numpy as np
import pytest

from hivit.config import ConfigError, make_config
from hivit.data import load_checkpoint, read_metrics, synth_corpus
from hivit.train import (RECIPES, Recipe, build_state, horizontal_flip, load_recipe, parse_recipe,
                         random_resized_crop, run_finetune, run_linprobe, run_pretrain, train)

TOY = make_config("toy")


@pytest.fixture(scope="module")
def blobs(tmp_path_factory):
    return synth_corpus(tmp_path_factory.mktemp("c") / "blobs.hvc", 16, 32, "gaussian-blobs", 0)


@pytest.fixture(scope="module")
def shapes(tmp_path_factory):
    return synth_corpus(tmp_path_factory.mktemp("c") / "shapes.hvc", 16, 32, "labeled-shapes", 0)


def _pre(**kw):
    return dataclasses.replace(Recipe(mode="pretrain", epochs=1, base_lr=1e-3, batch_size=8), **kw)


def test_one_epoch_on_eight_images_emits_one_row(tmp_path):
    c = synth_corpus(tmp_path / "e.hvc", 8, 32, "textures", 0)
    state = run_pretrain(c, TOY, _pre(), out_dir=tmp_path / "o")
    rows = read_metrics(tmp_path / "o" / "metrics.jsonl")
    assert len(rows) == 1 and rows[0]["split"] == "train" and rows[0]["step"] == 1
    assert state.step == 1 and (tmp_path / "o" / "checkpoint.hvck").exists()


def test_pretrain_two_epochs_decreasing_loss(blobs, tmp_path):
    run_pretrain(blobs, TOY, _pre(epochs=2, batch_size=4, base_lr=3e-3, augment=False, mask_ratio=0.5),
                 out_dir=tmp_path)
    rows = read_metrics(tmp_path / "metrics.jsonl")
    assert [r["epoch"] for r in rows] == [1.0, 2.0]
    assert rows[1]["loss"] < rows[0]["loss"]
    assert all(set(("step", "epoch", "split", "loss", "lr", "throughput_img_s", "wall_ms")) <= set(r) for r in rows)


@pytest.mark.parametrize("mode", ["pretrain", "finetune", "linprobe"])
def test_resume_is_bit_identical(mode, blobs, shapes, tmp_path):
    corpus = blobs if mode == "pretrain" else shapes
    recipe = Recipe(mode=mode, epochs=3, warmup=1, base_lr=1e-3, batch_size=4, drop_path=0.1, augment=True, seed=3)
    nc = None if mode == "pretrain" else 4
    full = build_state(TOY, recipe, num_classes=nc)
    train(full, corpus, stop_at=6)
    part = build_state(TOY, recipe, num_classes=nc)
    train(part, corpus, stop_at=5)
    part.save(tmp_path / "k.hvck")
    resumed = build_state(TOY, recipe, num_classes=nc)
    resumed.restore(tmp_path / "k.hvck")
    train(resumed, corpus, stop_at=6)
    a, b = full.arrays(), resumed.arrays()
    assert list(a) == list(b)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert full.step_losses[-1] == resumed.step_losses[-1]


def test_restore_rejects_mode_mismatch(blobs, tmp_path):
    s = build_state(TOY, _pre())
    s.save(tmp_path / "p.hvck")
    other = build_state(TOY, Recipe(mode="finetune"), num_classes=2)
    with pytest.raises(ConfigError, match="mode"):
        other.restore(tmp_path / "p.hvck")


def test_linprobe_changes_only_head(blobs, shapes, tmp_path):
    run_pretrain(blobs, TOY, _pre(), out_dir=tmp_path / "pt")
    ckpt = tmp_path / "pt" / "checkpoint.hvck"
    rec = Recipe(mode="linprobe", epochs=2, base_lr=0.1, batch_size=8)
    state = run_linprobe(shapes, TOY, rec, out_dir=tmp_path / "lp", init_from=ckpt, num_classes=4)
    _, before = load_checkpoint(ckpt)
    _, after = load_checkpoint(tmp_path / "lp" / "checkpoint.hvck")
    changed = set()
    for k, v in after.items():
        if k.startswith("param.") and not k.startswith("param.head."):
            assert np.array_equal(v, before["param.encoder." + k[6:]]), k
        elif k.startswith("param.head."):
            changed.add(k)
    assert changed == {"param.head.weight", "param.head.bias"}
    assert state.history[-1]["acc"] is not None


def test_finetune_loads_encoder_and_applies_layer_decay(blobs, shapes, tmp_path):
    run_pretrain(blobs, TOY, _pre(), out_dir=tmp_path / "pt")
    rec = Recipe(mode="finetune", epochs=1, base_lr=1e-3, batch_size=8, lwd=0.5)
    state = build_state(TOY, rec, init_from=tmp_path / "pt" / "checkpoint.hvck", num_classes=4)
    _, arrays = load_checkpoint(tmp_path / "pt" / "checkpoint.hvck")
    assert np.array_equal(state.model.patch_embed.proj.weight.data, arrays["param.encoder.patch_embed.proj.weight"])
    assert state.optimizer.lr_scale["patch_embed.proj.weight"] == pytest.approx(0.5 ** 7)
    run_finetune(shapes, TOY, rec, out_dir=tmp_path / "ft", num_classes=4)
    row = read_metrics(tmp_path / "ft" / "metrics.jsonl")[-1]
    assert 0.0 <= row["acc"] <= 1.0 and "acc_running" in row


def test_supervised_modes_need_labels_and_classes(blobs):
    with pytest.raises(ConfigError, match="labeled"):
        train(build_state(TOY, Recipe(mode="finetune"), num_classes=2), blobs)
    with pytest.raises(ConfigError, match="num_classes"):
        build_state(TOY, Recipe(mode="finetune"))


def test_corpus_config_mismatch(blobs):
    with pytest.raises(ConfigError, match="img_size"):
        train(build_state(make_config("small"), _pre()), blobs)


def test_max_steps_and_partial_row(blobs, tmp_path):
    state = run_pretrain(blobs, TOY, _pre(epochs=5, batch_size=4, max_steps=3), out_dir=tmp_path)
    rows = read_metrics(tmp_path / "metrics.jsonl")
    assert state.step == 3 and rows[-1]["epoch"] == 0.75


def test_periodic_checkpoint_survives_interruption(blobs, tmp_path):
    rec = _pre(epochs=4, batch_size=8, ckpt_every=1)
    state = build_state(TOY, rec)
    train(state, blobs, out_dir=tmp_path, stop_at=5)  # stop mid-epoch 3
    meta, _ = load_checkpoint(tmp_path / "checkpoint.hvck")
    assert meta["step"] == 5
    state = build_state(TOY, rec)
    train(state, blobs, out_dir=tmp_path, stop_at=3)
    meta, _ = load_checkpoint(tmp_path / "checkpoint.hvck")
    assert meta["step"] == 3 and meta["rng"]["kind"] == "counter"


# -- recipes ----------------------------------------------------------------
def test_recipe_parse_and_errors():
    r = parse_recipe("preset = finetune\nepochs = 3\nlwd = 0.7\n")
    assert r.mode == "finetune" and r.epochs == 3 and r.lwd == 0.7 and r.base_lr == RECIPES["finetune"].base_lr
    with pytest.raises(ConfigError, match="r:2"):
        parse_recipe("epochs = 1\nwarmpu = 3\n", "r")
    with pytest.raises(ConfigError, match="r:1"):
        parse_recipe("epochs = many\n", "r")
    with pytest.raises(ConfigError):
        parse_recipe("mask_ratio = 1.0\n")


def test_recipe_files_load():
    from pathlib import Path
    root = Path(__file__).parents[1] / "recipes"
    for f in sorted(root.glob("*.txt")):
        assert load_recipe(str(f)).mode in ("pretrain", "finetune", "linprobe")
    assert load_recipe("pretrain") is RECIPES["pretrain"]


def test_reference_recipe_values_recorded():
    assert RECIPES["pretrain"].reference_base_lr == 1.5e-4 and RECIPES["finetune"].lwd == 0.65


# -- augmentation -------------------------------------------------------------
def test_full_crop_without_flip_is_identity():
    x = np.random.default_rng(0).standard_normal((2, 3, 8, 8))
    out = random_resized_crop(x, np.random.default_rng(0), scale=(1.0, 1.0), ratio=(1.0, 1.0), flip=False)
    assert np.allclose(out, x)


def test_crop_shape_and_range():
    x = np.random.default_rng(0).uniform(0, 1, (4, 3, 16, 16))
    out = random_resized_crop(x, np.random.default_rng(1))
    assert out.shape == x.shape and out.min() >= 0 and out.max() <= 1


def test_flip_is_involution_per_sample():
    x = np.random.default_rng(0).standard_normal((6, 3, 4, 4))
    out = horizontal_flip(x, np.random.default_rng(2))
    for a, b in zip(x, out):
        assert np.array_equal(a, b) or np.array_equal(a[..., ::-1], b)
