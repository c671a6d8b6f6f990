"""Variant assembly, the G/G/D training loop, and checkpoints."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import checkpoint as ck
from .config import ModelConfig, TrainConfig
from .discriminators import ImageDiscriminator, VideoDiscriminator
from .errors import ConfigError, IntegrityError, MissingPrerequisite, NumericError
from .generator import StyleGenerator, freeze, is_frozen, param_digest
from .motion import Inverter, MotionPredictor
from .objectives import (
    FeatureExtractor,
    LossBreakdown,
    adv_generator_losses,
    disc_loss,
    mse_loss,
    perceptual_loss,
    total_generator_loss,
)
from .textenc import TextEncoder
from .tim import TextInferenceModule

log = logging.getLogger(__name__)

SCHEDULE = ("G", "G", "D")
TEXT_VARIANTS = ("tvp", "wo_se", "wo_rm")
PARAM_GROUPS = ("text_encoder", "tim", "motion", "image_disc", "video_disc")


# ---------------------------------------------------------------- generator artifact


@dataclass
class GeneratorArtifact:
    generator: StyleGenerator
    inverter: Inverter
    model: ModelConfig
    digest: str
    recon_mse: float = float("nan")
    converged: bool = True


def save_generator_artifact(path, art: GeneratorArtifact) -> str:
    meta = {
        "kind": "generator",
        "model": dataclasses.asdict(art.model),
        "digest": art.digest,
        "recon_mse": art.recon_mse,
        "converged": art.converged,
    }
    return ck.write_container(path, {
        "meta": ck.json_bytes(meta),
        "generator": ck.pack_tensors(dict(art.generator.state_dict())),
        "inverter": ck.pack_tensors(dict(art.inverter.state_dict())),
    })


def load_generator_artifact(path) -> GeneratorArtifact:
    if not Path(path).is_file():
        raise MissingPrerequisite(f"no pretrained generator at {path}; run `tvp pretrain-gen` first")
    sections, _ = ck.read_container(path)
    meta = json.loads(sections["meta"])
    if meta.get("kind") != "generator":
        raise IntegrityError(f"{path} is not a generator artifact")
    m = ModelConfig(**meta["model"])
    gen = StyleGenerator(m.n_layers, m.d_w, m.gen_channels, m.height)
    inv = Inverter(m.n_layers, m.d_w, m.inv_channels, m.height)
    gen.load_state_dict(ck.unpack_tensors(sections["generator"]))
    inv.load_state_dict(ck.unpack_tensors(sections["inverter"]))
    freeze(gen)
    freeze(inv)
    digest = param_digest(gen)
    if digest != meta["digest"]:
        raise IntegrityError("generator parameters do not match their stored digest")
    return GeneratorArtifact(gen, inv, m, digest, meta.get("recon_mse", float("nan")), meta.get("converged", True))


# ---------------------------------------------------------------- assembly


def make_optimizer(params, lr: float, betas=(0.5, 0.999)) -> torch.optim.Adam:
    params = list(params)
    if any(is_frozen(p) for p in params):
        raise ConfigError("refusing to optimize frozen parameters")
    return torch.optim.Adam(params, lr=lr, betas=betas)


class ModelAssembly(nn.Module):
    """Text encoder + TIM + motion predictor + frozen generator/inverter +
    discriminators, wired per variant.

    tvp:   t_n = P([f_n, u_cls])
    wo_rm: t_n = f_n
    wo_se: t_n = u_cls for every n
    nvp:   t_n ~ N(0, I) of size d_t, fresh per call
    fvp:   no text; the motion cell reads the flattened previous code
    """

    def __init__(self, variant: str, model: ModelConfig, vocab_size: int, gen: StyleGenerator, inv: Inverter):
        super().__init__()
        if variant not in ("tvp", "fvp", "nvp", "wo_se", "wo_rm"):
            raise ConfigError(f"unknown variant {variant!r}")
        if (variant in ("wo_se", "wo_rm")) and model.d_t != model.d_u:
            raise ConfigError(f"variant {variant} needs d_t == d_u")
        self.variant, self.cfg = variant, model
        self.text_encoder = (
            TextEncoder(vocab_size, model.max_len, model.d_u, model.text_depth, model.text_heads)
            if variant in TEXT_VARIANTS else None
        )
        if self.text_encoder is not None and not model.text_trainable:
            freeze(self.text_encoder)
        self.tim = (
            TextInferenceModule(model.n_frames, model.d_u, model.d_t, use_refine=variant == "tvp")
            if variant in ("tvp", "wo_rm") else None
        )
        input_dim = model.n_layers * model.d_w if variant == "fvp" else model.d_t
        self.motion = MotionPredictor(model.n_layers, model.d_w, input_dim)
        self.image_disc = ImageDiscriminator(model.disc_channels, model.height)
        self.video_disc = VideoDiscriminator(model.disc_channels, model.height)
        # frozen parts are kept outside the module tree so state_dict / the
        # trainable registry never see them
        self.__dict__["generator"] = gen
        self.__dict__["inverter"] = inv
        self.__dict__["features"] = FeatureExtractor.from_inverter(inv)
        if not gen.frozen:
            raise ConfigError("generator must be frozen before TVP training")

    def generator_params(self):
        groups = [self.text_encoder, self.tim, self.motion]
        return [p for g in groups if g is not None for p in g.parameters() if p.requires_grad]

    def disc_params(self):
        return list(self.image_disc.parameters()) + list(self.video_disc.parameters())

    def groups(self) -> dict[str, nn.Module]:
        return {name: getattr(self, name) for name in PARAM_GROUPS if getattr(self, name) is not None}

    def conditioning(self, ids, mask, noise: torch.Generator | None = None):
        n_steps, B = self.cfg.n_frames - 1, ids.shape[0]
        if self.variant == "fvp":
            return n_steps
        if self.variant == "nvp":
            return torch.randn(B, n_steps, self.cfg.d_t, generator=noise)
        words = self.text_encoder(ids, mask)
        if self.variant == "wo_se":
            return words.u_cls.unsqueeze(1).expand(B, n_steps, -1)
        return self.tim(words.u, words.mask)

    def predict(self, x1, ids, mask, noise=None):
        """x1: (B, 3, H, W) in [-1, 1]. Returns (x1_hat, frames (B, N-1, 3, H, W), codes)."""
        with torch.no_grad():
            w1 = self.inverter(x1)
            x1_hat = self.generator(w1)
        cond = self.conditioning(ids, mask, noise)
        codes = self.motion.rollout(w1, cond, feed_previous=self.variant == "fvp")
        B, S = codes.shape[:2]
        frames = self.generator(codes.flatten(0, 1)).view(B, S, *x1.shape[1:])
        return x1_hat, frames, codes

    def structure_digest(self) -> str:
        blob = json.dumps({"variant": self.variant, "model": dataclasses.asdict(self.cfg),
                           "vocab": self.text_encoder.vocab_size if self.text_encoder else None},
                          sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def build_variant(variant: str, cfg: TrainConfig, vocab_size: int, art: GeneratorArtifact) -> ModelAssembly:
    if art.model.n_layers != cfg.model.n_layers or art.model.d_w != cfg.model.d_w or art.model.height != cfg.model.height:
        raise ConfigError("generator artifact dimensions do not match the training config")
    return ModelAssembly(variant, cfg.model, vocab_size, art.generator, art.inverter)


# ---------------------------------------------------------------- training


def _pair_scores(disc: ImageDiscriminator, x1, frames):
    B, S = frames.shape[:2]
    cond = x1.unsqueeze(1).expand_as(frames).flatten(0, 1)
    _, score = disc(cond, frames.flatten(0, 1))
    return score.view(B, S).mean(1)


class Trainer:
    """Runs the repeating [G, G, D] update schedule on in-memory clips.

    Randomness comes from three independent streams spawned from cfg.seed:
    parameter init, batch order, and NVP noise.
    """

    def __init__(self, cfg: TrainConfig, art: GeneratorArtifact, data, vocab_size: int,
                 run_dir: str | Path | None = None):
        self.cfg, self.art, self.data = cfg, art, data
        init_ss, data_ss, noise_ss = np.random.SeedSequence(cfg.seed).spawn(3)
        self.data_seed = int(data_ss.generate_state(1)[0])
        torch.manual_seed(int(init_ss.generate_state(1)[0]))
        self.model = build_variant(cfg.variant, cfg, vocab_size, art)
        self.noise = torch.Generator().manual_seed(int(noise_ss.generate_state(1)[0]))
        betas = (cfg.beta1, cfg.beta2)
        self.opt_g = make_optimizer(self.model.generator_params(), cfg.lr, betas)
        self.opt_d = make_optimizer(self.model.disc_params(), cfg.lr, betas)
        self.iteration = 0
        self.batches_used = 0
        self.trace: list[str] = []
        self.history: list[dict] = []
        self.run_dir = Path(run_dir) if run_dir else None
        self.generator_digest = art.digest
        self._x = torch.from_numpy(data.frames).permute(0, 1, 4, 2, 3).float() / 127.5 - 1.0
        self._ids = torch.from_numpy(data.ids)
        self._mask = torch.from_numpy(data.mask)
        if len(data) < cfg.batch_size:
            raise ConfigError(f"need at least batch_size={cfg.batch_size} clips, have {len(data)}")

    def batch_indices(self, k: int) -> np.ndarray:
        n, B = len(self.data), self.cfg.batch_size
        per_epoch = n // B
        epoch, pos = divmod(k, per_epoch)
        perm = np.random.default_rng([self.data_seed, epoch]).permutation(n)
        return perm[pos * B : (pos + 1) * B]

    def next_batch(self):
        idx = torch.from_numpy(self.batch_indices(self.batches_used))
        self.batches_used += 1
        return self._x[idx], self._ids[idx], self._mask[idx]

    def _set_disc_grad(self, flag: bool):
        for p in self.model.disc_params():
            p.requires_grad_(flag)

    def generator_update(self, batch) -> LossBreakdown:
        x, ids, mask = batch
        m = self.model
        self._set_disc_grad(False)
        x1_hat, pred, _ = m.predict(x[:, 0], ids, mask, self.noise)
        target = x[:, 1:]
        if self.cfg.include_first_in_mse:
            mse = mse_loss(torch.cat([x[:, :1], target], 1), torch.cat([x1_hat[:, None], pred], 1))
        else:
            mse = mse_loss(target, pred)
        terms = {"mse": mse}
        w = self.cfg.weights
        terms["perc"] = perceptual_loss(target, pred, m.features) if w.perc else mse.new_zeros(())
        if w.adv2d or w.adv3d:
            s_img = _pair_scores(m.image_disc, x1_hat, pred)
            _, s_vid = m.video_disc(x1_hat, pred)
            terms["adv2d"], terms["adv3d"] = adv_generator_losses(s_img, s_vid)
        try:
            out = total_generator_loss(terms, w)
        except NumericError:
            self._dump_diagnostics(terms)
            raise
        self.opt_g.zero_grad(set_to_none=True)
        out.total.backward()
        self.opt_g.step()
        self._set_disc_grad(True)
        return out

    def discriminator_update(self, batch):
        x, ids, mask = batch
        m = self.model
        with torch.no_grad():
            x1_hat, pred, _ = m.predict(x[:, 0], ids, mask, self.noise)
        x1, real = x[:, 0], x[:, 1:]
        loss_di = disc_loss(_pair_scores(m.image_disc, x1, real), _pair_scores(m.image_disc, x1_hat, pred))
        loss_dv = disc_loss(m.video_disc(x1, real)[1], m.video_disc(x1_hat, pred)[1])
        if not (torch.isfinite(loss_di) and torch.isfinite(loss_dv)):
            self._dump_diagnostics({"loss_DI": loss_di, "loss_DV": loss_dv})
            raise NumericError(f"discriminator loss is not finite: {float(loss_di)}, {float(loss_dv)}")
        self.opt_d.zero_grad(set_to_none=True)
        (loss_di + loss_dv).backward()
        self.opt_d.step()
        return loss_di.detach(), loss_dv.detach()

    def _dump_diagnostics(self, terms):
        if self.run_dir is None:
            return
        self.run_dir.mkdir(parents=True, exist_ok=True)
        info = {"iteration": self.iteration, "terms": {k: float(v) for k, v in terms.items()}}
        (self.run_dir / "numeric_failure.json").write_text(json.dumps(info, indent=1))

    def step(self) -> dict:
        kind = SCHEDULE[self.iteration % len(SCHEDULE)]
        batch = self.next_batch()
        if kind == "G":
            rec = self.generator_update(batch).as_floats()
        else:
            di, dv = self.discriminator_update(batch)
            rec = {"loss_DI": float(di), "loss_DV": float(dv)}
        rec = {"it": self.iteration, "kind": kind, **rec}
        self.trace.append(kind)
        self.history.append(rec)
        self.iteration += 1
        return rec

    def train(self, steps: int | None = None, log_path: str | Path | None = None, progress=None):
        steps = self.cfg.steps if steps is None else steps
        fh = open(log_path, "a", encoding="utf-8") if log_path else None
        try:
            for _ in range(steps):
                rec = self.step()
                if fh and self.cfg.log_every and rec["it"] % self.cfg.log_every == 0:
                    fh.write(json.dumps(rec) + "\n")
                if progress:
                    progress(rec)
                every = self.cfg.checkpoint_every
                if every and self.run_dir and self.iteration % every == 0:
                    self.save(self.run_dir / f"ckpt_{self.iteration:06d}.tvp")
        finally:
            if fh:
                fh.close()
        if param_digest(self.art.generator) != self.generator_digest:
            raise IntegrityError("frozen generator changed during training")
        return self.history

    # ------------------------------------------------------------ checkpoints

    def save(self, path) -> str:
        sections = {
            "config": ck.json_bytes(self.cfg.to_dict()),
            "meta": ck.json_bytes({
                "variant": self.cfg.variant,
                "structure": self.model.structure_digest(),
                "config_digest": self.cfg.digest(),
                "generator_digest": self.generator_digest,
                "iteration": self.iteration,
                "batches_used": self.batches_used,
                "trace": "".join(self.trace),
            }),
        }
        for name, mod in self.model.groups().items():
            sections[f"params/{name}"] = ck.pack_tensors(dict(mod.state_dict()))
        for name, opt in (("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            tensors, meta = ck.optimizer_tensors(opt)
            sections[f"optim/{name}"] = ck.pack_tensors(tensors)
            sections[f"optim/{name}/meta"] = ck.json_bytes(meta)
        sections["rng/noise"] = ck.pack_tensors({"state": self.noise.get_state()})
        return ck.write_container(path, sections)

    def load(self, path):
        sections, _ = ck.read_container(path)
        meta = json.loads(sections["meta"])
        if meta["structure"] != self.model.structure_digest():
            raise IntegrityError(
                f"checkpoint is for variant {meta['variant']!r} with a different structure; "
                f"this trainer is {self.cfg.variant!r}"
            )
        if meta["generator_digest"] != self.generator_digest:
            raise IntegrityError("checkpoint was trained against a different generator")
        for name, mod in self.model.groups().items():
            mod.load_state_dict(ck.unpack_tensors(sections[f"params/{name}"]))
        for name, opt in (("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            ck.load_optimizer(opt, ck.unpack_tensors(sections[f"optim/{name}"]),
                              json.loads(sections[f"optim/{name}/meta"]))
        self.noise.set_state(ck.unpack_tensors(sections["rng/noise"])["state"])
        self.iteration = meta["iteration"]
        self.batches_used = meta["batches_used"]
        self.trace = list(meta["trace"])
        return self


def read_checkpoint_config(path) -> TrainConfig:
    sections, _ = ck.read_container(path)
    if "config" not in sections:
        raise IntegrityError(f"{path} is not a training checkpoint")
    return TrainConfig.from_dict(json.loads(sections["config"]))


def load_assembly(path, art: GeneratorArtifact, vocab_size: int) -> ModelAssembly:
    """Rebuild a trained model (no optimizer state) from a checkpoint."""
    cfg = read_checkpoint_config(path)
    sections, _ = ck.read_container(path)
    model = build_variant(cfg.variant, cfg, vocab_size, art)
    meta = json.loads(sections["meta"])
    if meta["structure"] != model.structure_digest():
        raise IntegrityError("checkpoint structure does not match the rebuilt model")
    for name, mod in model.groups().items():
        mod.load_state_dict(ck.unpack_tensors(sections[f"params/{name}"]))
    model.eval()
    return model
