"""Training and generation.

Phases: VAE, dual encoder, lyric-conditioned diffusion pre-training and
description-conditioned fine-tuning. Both diffusion paths share the trunk:
``mudit`` trains epsilon prediction on the discrete schedule and samples with
DDIM, ``musit`` trains velocity prediction on the interpolant and samples
with the ODE or SDE integrators.

Diffusion runs on standardized VAE encoder means (per-dimension shift and
scale stored in the diffusion checkpoint). Songs are always used whole,
padded to the batch maximum and masked.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import audio, checkpoint
from .audio import MelConfig
from .backbone import Backbone, BackboneConfig, Condition, init_params
from .corpus import STEM_NAMES, TEMPLATES, CorpusEntry, read_manifest, theme_tokens
from .diffusion import DiscreteSchedule, SamplerConfig, ddpm_loss, sample, sit_velocity_loss
from .encoder import DualEncoder, EncoderConfig, contrastive_loss, embed_prompt
from .evaluation import alignment_score
from .lyrics import (LYRIC_SECTIONS, LyricVocab, PinyinTable, RhymeClassTable, StructuredLyrics,
                     generate_lyrics, parse_structured_lyrics, serialize, tokenize, validate_structure)
from .vae import MelVAE, VaeConfig, latent_length, vae_loss

log = logging.getLogger(__name__)

PATHS = {"mudit": "epsilon", "musit": "velocity"}
DEFAULT_SAMPLER = {"mudit": "ddim", "musit": "ode_heun"}
PROMPT_ROLES = STEM_NAMES + ("reference",)
PHASES = ("vae", "encoder", "diffusion_pretrain", "diffusion_finetune")
ADAM = {"name": "adam", "betas": [0.9, 0.999], "eps": 1e-8}


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "diffusion_pretrain"
    path: str = "musit"
    steps: int = 1000
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    float_mode: str = "f32"
    grad_clip: float = 1.0
    beta_kl: float = 1e-2
    prompt_prob: float = 0.25
    lyric_dropout: float = 0.0
    max_segments: int = 8

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.path not in PATHS:
            raise ValueError(f"unknown path {self.path!r}; expected mudit or musit")
        if self.float_mode not in ("f32", "f64"):
            raise ValueError(f"float_mode must be f32 or f64, got {self.float_mode!r}")
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0 or self.grad_clip <= 0:
            raise ValueError("steps must be >= 0; batch_size, lr and grad_clip positive")
        if not (0 <= self.prompt_prob <= 1 and 0 <= self.lyric_dropout <= 1):
            raise ValueError("probabilities must lie in [0, 1]")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.float_mode == "f64" else torch.float32


# ---------------------------------------------------------------------------
# data


@dataclass
class Song:
    id: str
    mel: np.ndarray
    stem_mels: dict[str, np.ndarray]
    lyrics: StructuredLyrics
    description_pro: str
    description_am: str


def songs_from_entries(entries: Sequence[CorpusEntry], mel_cfg: MelConfig = MelConfig()) -> list[Song]:
    return [Song(e.id, audio.mel_forward(e.waveform, mel_cfg),
                 {k: audio.mel_forward(e.stems[k], mel_cfg) for k in STEM_NAMES},
                 e.lyrics, e.description_pro, e.description_am) for e in entries]


def load_songs(corpus_dir: str | Path, mel_cfg: MelConfig = MelConfig()) -> list[Song]:
    root = Path(corpus_dir)
    if not (root / "manifest.jsonl").exists():
        raise checkpoint.CheckpointError(f"missing corpus manifest: {root / 'manifest.jsonl'}")
    songs = []
    for row in read_manifest(root):
        wav, rate = audio.read_wav(root / row["audio_path"])
        if rate != mel_cfg.rate:
            raise PipelineError(f"{row['audio_path']}: rate {rate} differs from mel rate {mel_cfg.rate}")
        stems = {k: audio.mel_forward(audio.read_wav(root / p)[0], mel_cfg) for k, p in row["stem_paths"].items()}
        lyrics = parse_structured_lyrics((root / row["lyrics_path"]).read_text(encoding="utf-8"))
        songs.append(Song(row["id"], audio.mel_forward(wav, mel_cfg), stems, lyrics,
                          row["description_pro"], row["description_am"]))
    return songs


def pad_and_mask(items: Sequence, dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack (T_i, d) arrays into (B, T_max, d) with zero rows after each item and a validity mask."""
    if not items:
        raise PipelineError("nothing to batch")
    items = [torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x, dtype=dtype) for x in items]
    t_max = max(x.shape[0] for x in items)
    batch = torch.zeros(len(items), t_max, *items[0].shape[1:], dtype=dtype)
    mask = torch.zeros(len(items), t_max, dtype=torch.bool)
    for i, x in enumerate(items):
        batch[i, :x.shape[0]] = x
        mask[i, :x.shape[0]] = True
    return batch, mask


def crop_latent(z: torch.Tensor, start: int, length: int) -> torch.Tensor:
    """Windowed latent slice. Not used by training or generation (whole songs only);
    kept as the seam tests patch to prove that."""
    return z[start:start + length]


# ---------------------------------------------------------------------------
# optimisation loop


def _write_log(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(rows[0]) if rows else ["step", "loss", "grad_norm", "seconds"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})


def _fit(params: list[torch.nn.Parameter], step_fn, cfg: TrainConfig, log_path: Path | None) -> list[dict]:
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=tuple(ADAM["betas"]), eps=ADAM["eps"])
    rows = []
    for step in range(cfg.steps):
        t0 = time.perf_counter()
        loss, info = step_fn(step)
        opt.zero_grad()
        loss.backward()
        grad_norm = torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        loss = loss.item()
        rows.append({"step": step, "loss": loss, "grad_norm": float(grad_norm),
                     "seconds": time.perf_counter() - t0, **info})
        if step % 100 == 0 or step == cfg.steps - 1:
            log.info("%s step %d loss %.4f", cfg.phase, step, loss)
    if log_path is not None:
        _write_log(log_path, rows)
    return rows


def _train_meta(cfg: TrainConfig) -> dict:
    return {"train": asdict(cfg), "optimizer": {**ADAM, "lr": cfg.lr, "grad_clip": cfg.grad_clip}}


def smoothed_ratio(losses: Sequence[float], window: int | None = None) -> tuple[float, float]:
    """(mean of the first window, mean of the last window) of a loss trace."""
    losses = np.asarray(losses, dtype=np.float64)
    if len(losses) == 0:
        raise PipelineError("empty loss trace")
    window = window or max(1, min(50, len(losses) // 10))
    return float(losses[:window].mean()), float(losses[-window:].mean())


# ---------------------------------------------------------------------------
# VAE and encoder phases


def train_vae(songs: Sequence[Song], vae_cfg: VaeConfig, mel_cfg: MelConfig, cfg: TrainConfig,
              ckpt_dir: str | Path | None = None) -> tuple[MelVAE, list[dict]]:
    """Fit the VAE on song mixes and their stems (stems become prompt audio later)."""
    if not songs:
        raise PipelineError("empty corpus")
    if vae_cfg.bins != mel_cfg.bins:
        raise PipelineError("VAE bins must equal mel bins")
    torch.manual_seed(cfg.seed)
    vae = MelVAE(vae_cfg).to(cfg.dtype)
    pool = [s.mel for s in songs] + [m for s in songs for m in s.stem_mels.values()]
    vae.fit_normalization(pool)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)

    def step_fn(step):
        idx = rng.choice(len(pool), size=min(cfg.batch_size, len(pool)), replace=False)
        mel, mask = pad_and_mask([pool[i] for i in idx], cfg.dtype)
        total, recon, kl = vae_loss(mel, vae, cfg.beta_kl, gen, mask)
        return total, {"recon": recon.item(), "kl": kl.item()}

    ckpt_dir = Path(ckpt_dir) if ckpt_dir else None
    rows = _fit(list(vae.parameters()), step_fn, cfg, ckpt_dir / "vae_log.csv" if ckpt_dir else None)
    if ckpt_dir:
        checkpoint.save(ckpt_dir / "vae", vae.state_dict(),
                        {"kind": "vae", "config": vae_cfg.to_dict(), "mel": asdict(mel_cfg), **_train_meta(cfg)})
    return vae, rows


def train_encoder(songs: Sequence[Song], enc_cfg: EncoderConfig, cfg: TrainConfig,
                  ckpt_dir: str | Path | None = None) -> tuple[DualEncoder, list[dict]]:
    """Contrastive training on (description, mix) pairs; the register is drawn per pair."""
    if len(songs) < 2:
        raise PipelineError("encoder training needs at least 2 songs")
    torch.manual_seed(cfg.seed)
    enc = DualEncoder(enc_cfg).to(cfg.dtype)
    enc.fit_normalization([s.mel for s in songs])
    rng = np.random.default_rng(cfg.seed)

    def step_fn(step):
        idx = rng.choice(len(songs), size=max(2, min(cfg.batch_size, len(songs))), replace=False)
        texts = [(songs[i].description_pro, songs[i].description_am)[int(rng.integers(0, 2))] for i in idx]
        loss = contrastive_loss(texts, [songs[i].mel for i in idx], enc, rng)
        return loss, {"temperature": enc.temperature.item()}

    ckpt_dir = Path(ckpt_dir) if ckpt_dir else None
    rows = _fit(list(enc.parameters()), step_fn, cfg, ckpt_dir / "encoder_log.csv" if ckpt_dir else None)
    if ckpt_dir:
        checkpoint.save(ckpt_dir / "encoder", enc.state_dict(),
                        {"kind": "encoder", "config": enc_cfg.to_dict(), **_train_meta(cfg)})
    return enc, rows


def load_vae(ckpt_dir: str | Path, dtype=torch.float32) -> tuple[MelVAE, MelConfig]:
    state, meta = checkpoint.load(Path(ckpt_dir) / "vae", dtype)
    vae = MelVAE(VaeConfig(**meta["config"])).to(dtype)
    vae.load_state_dict(state)
    return vae.eval(), MelConfig(**meta["mel"])


def load_encoder(ckpt_dir: str | Path, dtype=torch.float32) -> DualEncoder:
    state, meta = checkpoint.load(Path(ckpt_dir) / "encoder", dtype)
    c = dict(meta["config"])
    c["vocab"] = tuple(c["vocab"])
    enc = DualEncoder(EncoderConfig(**c)).to(dtype)
    enc.load_state_dict(state)
    return enc.eval()


# ---------------------------------------------------------------------------
# latents and conditions


@dataclass
class LatentSet:
    """Standardized VAE-mean latents of every song mix and stem."""

    mixes: list[torch.Tensor]
    stems: list[dict[str, torch.Tensor]]
    frames: list[int]
    shift: torch.Tensor
    scale: torch.Tensor


@torch.no_grad()
def encode_mean(mel, vae: MelVAE, dtype=torch.float32) -> torch.Tensor:
    mean, _ = vae.encode(torch.as_tensor(np.asarray(mel), dtype=dtype)[None])
    return mean[0]


@torch.no_grad()
def encode_latents(songs: Sequence[Song], vae: MelVAE, dtype=torch.float32,
                   shift=None, scale=None) -> LatentSet:
    mixes = [encode_mean(s.mel, vae, dtype) for s in songs]
    stems = [{k: encode_mean(m, vae, dtype) for k, m in s.stem_mels.items()} for s in songs]
    if shift is None:
        rows = torch.cat(mixes)
        shift, scale = rows.mean(0), rows.std(0).clamp_min(1e-6)
    shift, scale = torch.as_tensor(shift, dtype=dtype), torch.as_tensor(scale, dtype=dtype)
    return LatentSet([(z - shift) / scale for z in mixes],
                     [{k: (z - shift) / scale for k, z in d.items()} for d in stems],
                     [s.mel.shape[0] for s in songs], shift, scale)


def lyric_ids(lyrics: StructuredLyrics, vocab: LyricVocab) -> torch.Tensor:
    return torch.tensor(tokenize(lyrics, None, vocab), dtype=torch.long)


def pad_ids(seqs: Sequence[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    n = max(len(s) for s in seqs)
    ids = torch.zeros(len(seqs), n, dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
    return ids, ids != 0


def make_condition(latents: Sequence[torch.Tensor], lyrics: Sequence[torch.Tensor] | None,
                   prompts: Sequence[torch.Tensor] | None = None,
                   prompt_latents: Sequence[torch.Tensor | None] | None = None,
                   lyric_keep: Sequence[bool] | None = None,
                   dtype=torch.float32) -> tuple[torch.Tensor, Condition]:
    """Batch clean latents with their conditioning.

    ``prompt_latents[i]`` (P_i, d) occupies the leading P_i rows of item i.
    ``lyric_keep[i] = False`` hides item i's lyrics (every key masked).
    """
    x, mask = pad_and_mask(latents, dtype)
    b, t, d = x.shape
    cond = Condition(mask, d, dtype=dtype)
    if lyrics is not None:
        cond.lyrics, cond.lyric_mask = pad_ids(lyrics)
        if lyric_keep is not None:
            cond.lyric_mask = cond.lyric_mask & torch.tensor(list(lyric_keep))[:, None]
    if prompts is not None:
        cond.prompt_tokens, cond.prompt_token_mask = pad_and_mask(prompts, dtype)
    if prompt_latents is not None and any(p is not None for p in prompt_latents):
        region = torch.zeros(b, t, dtype=torch.bool)
        plat = torch.zeros(b, t, d, dtype=dtype)
        for i, p in enumerate(prompt_latents):
            if p is not None:
                region[i, :len(p)] = True
                plat[i, :len(p)] = p
        cond.prompt_region, cond.prompt_latent = region, plat
    return x, cond


def _draw_prompt(ls: LatentSet, i: int, rng: np.random.Generator, prob: float):
    if rng.random() >= prob:
        return None
    t = ls.mixes[i].shape[0]
    if t < 2:
        return None
    role = PROMPT_ROLES[int(rng.integers(0, len(PROMPT_ROLES)))]
    src = ls.mixes[i] if role == "reference" else ls.stems[i][role]
    rows = int(rng.integers(1, max(1, t // 4) + 1))
    return src[:rows]


# ---------------------------------------------------------------------------
# diffusion phases


def backbone_config(base: BackboneConfig, path: str, d_lat: int, d_e: int, vocab: LyricVocab) -> BackboneConfig:
    return replace(base, prediction_target=PATHS[path], d_lat=d_lat, d_e=d_e,
                   lyric_vocab_size=max(base.lyric_vocab_size, len(vocab)))


def diffusion_loss(model: Backbone, x, cond, path: str, gen: torch.Generator, schedule=None):
    if path == "mudit":
        return ddpm_loss(model, x, cond, schedule or DiscreteSchedule.linear(), gen)
    return sit_velocity_loss(model, x, cond, gen)


def _save_diffusion(ckpt_dir: Path, name: str, model: Backbone, path: str, ls: LatentSet,
                    phase: str, cfg: TrainConfig) -> None:
    checkpoint.save(ckpt_dir / name, model.state_dict(), {
        "kind": "diffusion", "config": model.cfg.to_dict(), "path": path, "phase": phase,
        "prediction_target": model.cfg.prediction_target,
        "latent_shift": ls.shift.tolist(), "latent_scale": ls.scale.tolist(), **_train_meta(cfg)})


def load_backbone(ckpt_dir: str | Path, dtype=torch.float32, name: str = "diffusion"):
    state, meta = checkpoint.load(Path(ckpt_dir) / name, dtype)
    model = Backbone(BackboneConfig(**meta["config"])).to(dtype)
    model.load_state_dict(state)
    return model.eval(), meta


def pretrain(songs: Sequence[Song], ckpt_dir: str | Path, bb_cfg: BackboneConfig, cfg: TrainConfig):
    """Whole-song, lyric-conditioned training with the learned null description token."""
    if not songs:
        raise PipelineError("empty corpus")
    ckpt_dir = Path(ckpt_dir)
    checkpoint.require(ckpt_dir / "vae", ckpt_dir / "encoder")
    vae, _ = load_vae(ckpt_dir, cfg.dtype)
    enc = load_encoder(ckpt_dir, cfg.dtype)
    ls = encode_latents(songs, vae, cfg.dtype)
    vocab = LyricVocab.from_table()
    lyr = [lyric_ids(s.lyrics, vocab) for s in songs]
    bcfg = backbone_config(bb_cfg, cfg.path, vae.cfg.d_lat, enc.cfg.d_e, vocab)
    model = init_params(bcfg, cfg.seed).to(cfg.dtype).train()
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    schedule = DiscreteSchedule.linear()

    def step_fn(step):
        idx = rng.choice(len(songs), size=min(cfg.batch_size, len(songs)), replace=False)
        plats = [_draw_prompt(ls, i, rng, cfg.prompt_prob) for i in idx]
        x, cond = make_condition([ls.mixes[i] for i in idx], [lyr[i] for i in idx],
                                 prompt_latents=plats, dtype=cfg.dtype)
        return diffusion_loss(model, x, cond, cfg.path, gen, schedule), {}

    rows = _fit(list(model.parameters()), step_fn, cfg, ckpt_dir / "pretrain_log.csv")
    _save_diffusion(ckpt_dir, "diffusion", model, cfg.path, ls, "pretrain", cfg)
    _save_diffusion(ckpt_dir, "diffusion_pretrain", model, cfg.path, ls, "pretrain", cfg)
    return model, rows


def finetune(songs: Sequence[Song], ckpt_dir: str | Path, cfg: TrainConfig):
    """Continue from the pretrained trunk with randomly segmented description tokens.

    Each sample draws the professional or the amateur description, splits it at
    random word boundaries and embeds every segment with the frozen encoder.
    All trunk parameters are trained.
    """
    if not songs:
        raise PipelineError("empty corpus")
    ckpt_dir = Path(ckpt_dir)
    checkpoint.require(ckpt_dir / "vae", ckpt_dir / "encoder", ckpt_dir / "diffusion_pretrain")
    vae, _ = load_vae(ckpt_dir, cfg.dtype)
    enc = load_encoder(ckpt_dir, cfg.dtype)
    model, meta = load_backbone(ckpt_dir, cfg.dtype, "diffusion_pretrain")
    if meta["path"] != cfg.path:
        raise PipelineError(f"pretrained checkpoint is {meta['path']}, finetune asked for {cfg.path}")
    model.train()
    ls = encode_latents(songs, vae, cfg.dtype, meta["latent_shift"], meta["latent_scale"])
    vocab = LyricVocab.from_table()
    lyr = [lyric_ids(s.lyrics, vocab) for s in songs]
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    schedule = DiscreteSchedule.linear()

    def step_fn(step):
        idx = rng.choice(len(songs), size=min(cfg.batch_size, len(songs)), replace=False)
        prompts, registers = [], 0
        with torch.no_grad():
            for i in idx:
                pro = rng.random() < 0.5
                registers += int(pro)
                desc = songs[i].description_pro if pro else songs[i].description_am
                prompts.append(embed_prompt(desc, enc, cfg.max_segments, rng))
        plats = [_draw_prompt(ls, i, rng, cfg.prompt_prob) for i in idx]
        keep = [bool(rng.random() >= cfg.lyric_dropout) for _ in idx]
        x, cond = make_condition([ls.mixes[i] for i in idx], [lyr[i] for i in idx], prompts, plats,
                                 keep, cfg.dtype)
        loss = diffusion_loss(model, x, cond, cfg.path, gen, schedule)
        return loss, {"prompt_tokens": sum(len(p) for p in prompts), "pro_register": registers}

    rows = _fit(list(model.parameters()), step_fn, cfg, ckpt_dir / "finetune_log.csv")
    _save_diffusion(ckpt_dir, "diffusion", model, cfg.path, ls, "finetune", cfg)
    return model, rows


# ---------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class GenerateConfig:
    max_duration: float = 16.0
    invert_iters: int = 64
    line_length: int = 4


@dataclass
class GenerationRequest:
    description: str
    lyrics: StructuredLyrics | None = None
    prompt_audio: np.ndarray | None = None
    prompt_role: str | None = None
    duration_s: float = 16.0
    seed: int = 0
    sampler: SamplerConfig | None = None

    def validate(self, max_duration: float) -> None:
        if not self.description.strip():
            raise PipelineError("description must be non-empty")
        if not 0 < self.duration_s <= max_duration:
            raise PipelineError(f"duration {self.duration_s} s outside (0, {max_duration}]")
        if self.prompt_audio is not None and self.prompt_role not in PROMPT_ROLES:
            raise PipelineError(f"unknown prompt role {self.prompt_role!r}; expected one of {PROMPT_ROLES}")


@dataclass
class GenerationResult:
    latent: np.ndarray
    mel: np.ndarray
    waveform: np.ndarray
    lyrics: StructuredLyrics
    report: dict = field(default_factory=dict)
    prompt_rows: int = 0


@dataclass
class Models:
    vae: MelVAE
    mel_cfg: MelConfig
    encoder: DualEncoder
    backbone: Backbone
    meta: dict

    @property
    def path(self) -> str:
        return self.meta["path"]


def load_models(ckpt_dir: str | Path, dtype=torch.float32, diffusion: str = "diffusion") -> Models:
    ckpt_dir = Path(ckpt_dir)
    checkpoint.require(ckpt_dir / "vae", ckpt_dir / "encoder", ckpt_dir / diffusion)
    vae, mel_cfg = load_vae(ckpt_dir, dtype)
    backbone, meta = load_backbone(ckpt_dir, dtype, diffusion)
    return Models(vae, mel_cfg, load_encoder(ckpt_dir, dtype), backbone, meta)


def request_lyrics(description: str, seed: int, line_length: int = 4) -> StructuredLyrics:
    """Lyrics for a request without any: template and rhyme class drawn from the seed."""
    rng = np.random.default_rng(seed)
    template = TEMPLATES[int(rng.integers(0, len(TEMPLATES)))]
    rt = RhymeClassTable.default()
    rhyme_class = int(rt.classes[int(rng.integers(0, len(rt.classes)))])
    grid = [(tag, bars if tag in LYRIC_SECTIONS else 0) for tag, bars in template]
    return generate_lyrics(theme_tokens(description), grid, rhyme_class, seed,
                           PinyinTable.default(), rt, line_length)


def sampler_nfe(s: SamplerConfig) -> int:
    return 2 * s.steps if s.kind == "ode_heun" else s.steps


@torch.no_grad()
def generate(req: GenerationRequest, models: Models, gen_cfg: GenerateConfig = GenerateConfig()) -> GenerationResult:
    """Whole-song generation in one pass: latent length is fixed by the duration."""
    req.validate(gen_cfg.max_duration)
    sampler = req.sampler or SamplerConfig(kind=DEFAULT_SAMPLER[models.path])
    want = PATHS[models.path]
    if (sampler.kind == "ddim") != (want == "epsilon"):
        raise PipelineError(f"sampler {sampler.kind} does not match a {want}-prediction checkpoint")
    dtype = next(models.backbone.parameters()).dtype
    mel_cfg = models.mel_cfg
    frames = audio.frame_count(int(round(req.duration_s * mel_cfg.rate)), mel_cfg)
    rows = latent_length(frames, models.vae.cfg.r)
    shift = torch.tensor(models.meta["latent_shift"], dtype=dtype)
    scale = torch.tensor(models.meta["latent_scale"], dtype=dtype)

    lyrics = req.lyrics or request_lyrics(req.description, req.seed, gen_cfg.line_length)
    vocab = LyricVocab.from_table()
    prompts = [embed_prompt(req.description, models.encoder, models.backbone.cfg.max_prompt_tokens)]

    plat = None
    if req.prompt_audio is not None:
        pmel = audio.mel_forward(np.asarray(req.prompt_audio, dtype=np.float64), mel_cfg)
        plat = (encode_mean(pmel, models.vae, dtype) - shift) / scale
        if len(plat) >= rows:
            raise PipelineError(f"prompt audio fills {len(plat)} of {rows} latent rows; no target left")
    zeros = torch.zeros(rows, models.vae.cfg.d_lat, dtype=dtype)
    _, cond = make_condition([zeros], [lyric_ids(lyrics, vocab)], prompts,
                             [plat] if plat is not None else None, dtype=dtype)
    z = sample(models.backbone, cond, sampler, seed=req.seed)[0]
    latent = z * scale + shift
    mel = models.vae.decode(latent[None], frames)[0].to(torch.float64).numpy()
    wave = audio.mel_invert(mel, mel_cfg, iters=gen_cfg.invert_iters, seed=req.seed)
    report = {
        "description": req.description,
        "seed": req.seed,
        "path": models.path,
        "duration_s": req.duration_s,
        "latent_rows": rows,
        "frames": frames,
        "prompt_rows": 0 if plat is None else len(plat),
        "prompt_role": req.prompt_role if plat is not None else None,
        "alignment_score": alignment_score(req.description, mel, models.encoder),
        "structure": validate_structure(lyrics).to_dict(),
        "lyrics": serialize(lyrics),
        "timing": {"sampler": sampler.kind, "steps": sampler.steps, "nfe": sampler_nfe(sampler),
                   "invert_iters": gen_cfg.invert_iters},
    }
    return GenerationResult(z.to(torch.float64).numpy(), mel, wave, lyrics, report,
                            0 if plat is None else len(plat))


def write_generation(result: GenerationResult, out_dir: str | Path, rate: int, figures: bool = True) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    audio.write_wav(out / "out.wav", result.waveform, rate)
    audio.write_pgm(out / "out_mel.pgm", result.mel)
    audio.write_matrix_csv(out / "out_latent.csv", result.latent)
    (out / "report.json").write_text(json.dumps(result.report, indent=2, sort_keys=True) + "\n")
    if figures:
        from .plotting import plot_mel
        plot_mel(result.mel, out / "out_mel.png", title=result.report.get("description", ""))


# ---------------------------------------------------------------------------
# evaluation run


def duration_for_frames(frames: int, mel_cfg: MelConfig) -> float:
    return ((frames - 1) * mel_cfg.hop + mel_cfg.n_fft) / mel_cfg.rate


def white_noise_mels(n: int, frames: Sequence[int], mel_cfg: MelConfig, seed: int, std: float = 0.1):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        f = frames[k % len(frames)]
        w = np.clip(rng.normal(0.0, std, (f - 1) * mel_cfg.hop + mel_cfg.n_fft), -1, 1)
        out.append(audio.mel_forward(w, mel_cfg))
    return out


@torch.no_grad()
def evaluate(songs: Sequence[Song], models: Models, n_generations: int = 16, seed: int = 0,
             sampler: SamplerConfig | None = None, gen_cfg: GenerateConfig = GenerateConfig(),
             out_dir: str | Path | None = None) -> tuple[dict, list[dict]]:
    """Generate from each song's amateur description (cycling over songs) and score.

    Generation k uses song ``k mod n`` and seed ``seed + k``; its shuffled
    baseline is the description of song ``(k + 1 + k // n) mod n``, never its own.
    Audio-side scores use the mel of the rendered waveform.
    """
    from .evaluation import fad, sign_test

    n = len(songs)
    if n < 2:
        raise PipelineError("evaluation needs at least 2 songs")
    enc = models.encoder
    rows, gen_emb, structure = [], [], []
    for k in range(n_generations):
        i = k % n
        j = (i + 1 + (k // n) % (n - 1)) % n
        song = songs[i]
        req = GenerationRequest(song.description_am, duration_s=duration_for_frames(song.mel.shape[0], models.mel_cfg),
                                seed=seed + k, sampler=sampler)
        res = generate(req, models, gen_cfg)
        mel = audio.mel_forward(res.waveform, models.mel_cfg)
        gen_emb.append(enc.encode_audio(mel).to(torch.float64).numpy())
        matched = alignment_score(song.description_am, mel, enc)
        shuffled = alignment_score(songs[j].description_am, mel, enc)
        structure.append(res.report["structure"]["score"])
        rows.append({"k": k, "song": song.id, "shuffled_song": songs[j].id, "seed": seed + k,
                     "matched": matched, "shuffled": shuffled, "structure": structure[-1]})
        if out_dir is not None:
            write_generation(res, Path(out_dir) / f"gen-{k:03d}", models.mel_cfg.rate, figures=False)
    train_emb = np.stack([enc.encode_audio(s.mel).to(torch.float64).numpy() for s in songs])
    noise = white_noise_mels(n_generations, [s.mel.shape[0] for s in songs], models.mel_cfg, seed)
    noise_emb = np.stack([enc.encode_audio(m).to(torch.float64).numpy() for m in noise])
    fad_gen, info = fad(np.stack(gen_emb), train_emb, return_info=True)
    fad_noise = fad(noise_emb, train_emb)
    matched = [r["matched"] for r in rows]
    shuffled = [r["shuffled"] for r in rows]
    metrics = {
        "fad": fad_gen,
        "fad_white_noise": fad_noise,
        "fad_diagonal_fallback": info["diagonal_fallback"],
        "alignment_mean_matched": float(np.mean(matched)),
        "alignment_mean_shuffled": float(np.mean(shuffled)),
        "sign_test": sign_test(matched, shuffled),
        "structure_mean": float(np.mean(structure)),
        "structure_all_valid": bool(all(s == 1.0 for s in structure)),
        "n": n_generations,
        "path": models.path,
    }
    return metrics, rows
