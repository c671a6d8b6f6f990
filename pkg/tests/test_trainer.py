import dataclasses
import json

import numpy as np
import pytest
import torch

from tvp.config import LossWeights, TrainConfig
from tvp.errors import ConfigError, IntegrityError, MissingPrerequisite
from tvp.generator import param_digest
from tvp.trainer import (
    Trainer,
    build_variant,
    load_assembly,
    load_generator_artifact,
    save_generator_artifact,
)

from conftest import TINY, make_artifact, tiny_train_config


def _digest(trainer):
    return {name: param_digest(mod) for name, mod in trainer.model.groups().items()}


def _snapshot(mod):
    return {k: v.clone() for k, v in mod.state_dict().items()}


def test_schedule_trace(tiny_artifact, tiny_arrays, tiny_vocab):
    tr = Trainer(tiny_train_config(), tiny_artifact, tiny_arrays, len(tiny_vocab))
    tr.train(6)
    assert tr.trace == list("GGDGGD")
    for k in range(len(tr.trace) - 2):
        assert sorted(tr.trace[k : k + 3]) == ["D", "G", "G"]


def test_zero_lr_changes_nothing(tiny_artifact, tiny_arrays, tiny_vocab):
    tr = Trainer(tiny_train_config(lr=0.0), tiny_artifact, tiny_arrays, len(tiny_vocab))
    before = _digest(tr)
    hist = tr.train(3)
    assert _digest(tr) == before
    assert all(np.isfinite(hist[0][k]) for k in ("mse", "perc", "adv2d", "adv3d", "total"))
    assert np.isfinite(hist[2]["loss_DI"]) and np.isfinite(hist[2]["loss_DV"])


def test_generator_step_leaves_discriminators_and_generator(tiny_artifact, tiny_arrays, tiny_vocab):
    tr = Trainer(tiny_train_config(), tiny_artifact, tiny_arrays, len(tiny_vocab))
    d_before = (param_digest(tr.model.image_disc), param_digest(tr.model.video_disc))
    motion_before = param_digest(tr.model.motion)
    tr.generator_update(tr.next_batch())
    assert (param_digest(tr.model.image_disc), param_digest(tr.model.video_disc)) == d_before
    assert param_digest(tr.model.motion) != motion_before
    assert param_digest(tiny_artifact.generator) == tiny_artifact.digest


def test_discriminator_step_leaves_generator_side(tiny_artifact, tiny_arrays, tiny_vocab):
    tr = Trainer(tiny_train_config(), tiny_artifact, tiny_arrays, len(tiny_vocab))
    g_before = {k: param_digest(v) for k, v in tr.model.groups().items() if "disc" not in k}
    tr.discriminator_update(tr.next_batch())
    assert {k: param_digest(v) for k, v in tr.model.groups().items() if "disc" not in k} == g_before
    assert all(p.grad is None or torch.all(p.grad == 0) for p in tr.model.generator_params())


def test_logged_total_matches_weighted_sum(tiny_artifact, tiny_arrays, tiny_vocab, tmp_path):
    w = LossWeights(100, 1, 1, 1)
    tr = Trainer(tiny_train_config(weights=w), tiny_artifact, tiny_arrays, len(tiny_vocab))
    tr.train(3, log_path=tmp_path / "log.jsonl")
    recs = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["kind"] for r in recs] == ["G", "G", "D"]
    for r in recs[:2]:
        manual = 100 * r["mse"] + r["perc"] + r["adv2d"] + r["adv3d"]
        assert abs(manual - r["total"]) <= 1e-6 * abs(manual)


def test_determinism(tiny_arrays, tiny_vocab):
    runs = []
    for _ in range(2):
        tr = Trainer(tiny_train_config(variant="nvp"), make_artifact(), tiny_arrays, len(tiny_vocab))
        tr.train(6)
        runs.append(_digest(tr))
    assert runs[0] == runs[1]


def test_seed_streams_independent(tiny_artifact, tiny_arrays, tiny_vocab):
    a = Trainer(tiny_train_config(seed=1), tiny_artifact, tiny_arrays, len(tiny_vocab))
    b = Trainer(tiny_train_config(seed=1), tiny_artifact, tiny_arrays, len(tiny_vocab))
    # drawing noise does not perturb batch order
    torch.randn(5, generator=b.noise)
    assert all(np.array_equal(a.batch_indices(k), b.batch_indices(k)) for k in range(12))
    # consuming batches does not perturb noise
    fresh = Trainer(tiny_train_config(seed=1), tiny_artifact, tiny_arrays, len(tiny_vocab))
    for _ in range(4):
        a.next_batch()
    assert torch.equal(torch.randn(5, generator=a.noise), torch.randn(5, generator=fresh.noise))


def test_batch_order_is_epoch_permutation(tiny_artifact, tiny_arrays, tiny_vocab):
    tr = Trainer(tiny_train_config(batch_size=8), tiny_artifact, tiny_arrays, len(tiny_vocab))
    per_epoch = len(tiny_arrays) // 8
    seen = np.concatenate([tr.batch_indices(k) for k in range(per_epoch)])
    assert len(set(seen.tolist())) == len(seen) == per_epoch * 8


def test_zero_steps_checkpoint_is_init(tiny_arrays, tiny_vocab, tmp_path):
    art = make_artifact()
    tr = Trainer(tiny_train_config(), art, tiny_arrays, len(tiny_vocab))
    init = _digest(tr)
    tr.train(0)
    tr.save(tmp_path / "c.tvp")
    tr2 = Trainer(tiny_train_config(seed=99), art, tiny_arrays, len(tiny_vocab)).load(tmp_path / "c.tvp")
    assert _digest(tr2) == init


@pytest.mark.parametrize("variant", ["tvp", "nvp"])
def test_resume_equivalence(variant, tiny_arrays, tiny_vocab, tmp_path):
    art = make_artifact()
    cfg = tiny_train_config(variant=variant)
    straight = Trainer(cfg, art, tiny_arrays, len(tiny_vocab))
    straight.train(4)
    straight.train(10)

    first = Trainer(cfg, art, tiny_arrays, len(tiny_vocab))
    first.train(4)
    first.save(tmp_path / "mid.tvp")
    resumed = Trainer(cfg, art, tiny_arrays, len(tiny_vocab)).load(tmp_path / "mid.tvp")
    resumed.train(10)
    assert _digest(resumed) == _digest(straight)
    assert resumed.trace == straight.trace


def test_checkpoint_guards(tiny_artifact, tiny_arrays, tiny_vocab, tmp_path):
    tr = Trainer(tiny_train_config(), tiny_artifact, tiny_arrays, len(tiny_vocab))
    tr.train(3)
    path = tmp_path / "c.tvp"
    tr.save(path)
    raw = path.read_bytes()
    (tmp_path / "cut.tvp").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(IntegrityError):
        Trainer(tiny_train_config(), tiny_artifact, tiny_arrays, len(tiny_vocab)).load(tmp_path / "cut.tvp")
    flipped = bytearray(raw)
    flipped[100] ^= 1
    (tmp_path / "flip.tvp").write_bytes(bytes(flipped))
    with pytest.raises(IntegrityError):
        Trainer(tiny_train_config(), tiny_artifact, tiny_arrays, len(tiny_vocab)).load(tmp_path / "flip.tvp")
    with pytest.raises(IntegrityError, match="variant"):
        Trainer(tiny_train_config(variant="fvp"), tiny_artifact, tiny_arrays, len(tiny_vocab)).load(path)
    model = load_assembly(path, tiny_artifact, len(tiny_vocab))
    assert param_digest(model.motion) == param_digest(tr.model.motion)


def test_generator_artifact_roundtrip(tmp_path):
    art = make_artifact()
    save_generator_artifact(tmp_path / "g.tvp", art)
    back = load_generator_artifact(tmp_path / "g.tvp")
    assert back.digest == art.digest and back.generator.frozen
    with pytest.raises(MissingPrerequisite, match="pretrain-gen"):
        load_generator_artifact(tmp_path / "none.tvp")


def test_variant_wiring(tiny_artifact, tiny_vocab):
    cfg = tiny_train_config()
    V = len(tiny_vocab)
    m = TINY
    tvp = build_variant("tvp", cfg, V, tiny_artifact)
    fvp = build_variant("fvp", cfg, V, tiny_artifact)
    nvp = build_variant("nvp", cfg, V, tiny_artifact)
    wo_se = build_variant("wo_se", cfg, V, tiny_artifact)
    wo_rm = build_variant("wo_rm", cfg, V, tiny_artifact)
    assert fvp.text_encoder is None and fvp.tim is None
    assert fvp.motion.cell.input_size == m.n_layers * m.d_w
    for v in (tvp, nvp, wo_se, wo_rm):
        assert v.motion.cell.input_size == m.d_t
    assert nvp.text_encoder is None
    assert wo_se.tim is None and wo_rm.tim.refine is None and tvp.tim.refine is not None
    # frozen pieces stay out of the trainable registry
    names = {n for n, _ in tvp.named_parameters()}
    assert not any(n.startswith(("generator", "inverter", "features")) for n in names)
    ids = torch.randint(3, V, (2, m.max_len))
    mask = torch.zeros(2, m.max_len, dtype=torch.bool)
    mask[:, :5] = True
    ids[~mask] = 0
    cond = wo_se.conditioning(ids, mask)
    words = wo_se.text_encoder(ids, mask)
    assert torch.equal(cond, words.u_cls[:, None].expand(-1, m.n_frames - 1, -1))
    w = wo_rm.text_encoder(ids, mask)
    assert torch.equal(wo_rm.conditioning(ids, mask), wo_rm.tim.fusions(w.u, w.mask))
    g = torch.Generator().manual_seed(0)
    a, b = nvp.conditioning(ids, mask, g), nvp.conditioning(ids, mask, g)
    assert a.shape == (2, m.n_frames - 1, m.d_t) and not torch.equal(a, b)
    with pytest.raises(ConfigError):
        build_variant("xvp", cfg, V, tiny_artifact)
    with pytest.raises(ConfigError):
        TrainConfig(variant="xvp")


def test_fvp_feeds_previous_code(tiny_artifact, tiny_vocab):
    model = build_variant("fvp", tiny_train_config(), len(tiny_vocab), tiny_artifact)
    x1 = torch.rand(1, 3, 16, 16) * 2 - 1
    ids = torch.zeros(1, TINY.max_len, dtype=torch.long)
    with torch.no_grad():
        _, _, codes = model.predict(x1, ids, ids != 0)
        w1 = tiny_artifact.inverter(x1)
        state = model.motion.init_state(w1)
        prev, manual = w1, []
        for _ in range(TINY.n_frames - 1):
            state = model.motion.step(prev.flatten(1), state)
            prev = prev + state[0].view_as(prev)
            manual.append(prev)
    assert torch.allclose(codes, torch.stack(manual, 1), atol=1e-6)


def test_overfit_single_batch(tiny_arrays, tiny_vocab):
    art = make_artifact(seed=1)
    cfg = tiny_train_config(batch_size=4, lr=1e-3, weights=LossWeights(100, 0, 0, 0))
    tr = Trainer(cfg, art, tiny_arrays, len(tiny_vocab))
    batch = tr.next_batch()
    first = tr.generator_update(batch).mse.item()
    for _ in range(199):
        last = tr.generator_update(batch).mse.item()
    assert last <= 0.5 * first, (first, last)


def test_discriminator_learns_quickly(tiny_arrays, tiny_vocab):
    tr = Trainer(tiny_train_config(lr=1e-3), make_artifact(seed=2), tiny_arrays, len(tiny_vocab))
    batch = tr.next_batch()
    for _ in range(100):
        di, dv = tr.discriminator_update(batch)
    assert float(di) < np.log(4) and float(dv) < np.log(4)


def test_generator_mismatch_refused(tiny_arrays, tiny_vocab):
    other = make_artifact(dataclasses.replace(TINY, d_w=16))
    with pytest.raises(ConfigError):
        Trainer(tiny_train_config(), other, tiny_arrays, len(tiny_vocab))
