import numpy as np
import pytest
import torch

from musit import audio, pipeline
from musit.backbone import BackboneConfig
from musit.checkpoint import CheckpointError
from musit.corpus import write_corpus
from musit.diffusion import DiscreteSchedule, SamplerConfig, ddpm_loss, sit_velocity_loss
from musit.pipeline import (GenerateConfig, GenerationRequest, PipelineError, TrainConfig, evaluate, finetune,
                            generate, load_models, load_songs, make_condition, pad_and_mask, pretrain,
                            songs_from_entries, write_generation)

from conftest import TINY_BB, train_tiny

FAST = GenerateConfig(invert_iters=2)


def request(**kw):
    base = dict(description="lazy chill vibe, sad rainy mood", duration_s=4.0, seed=3,
                sampler=SamplerConfig(kind="ode_heun", steps=3))
    base.update(kw)
    return GenerationRequest(**base)


def test_pad_and_mask():
    x, m = pad_and_mask([np.ones((2, 3)), np.ones((4, 3))])
    assert x.shape == (2, 4, 3) and m.tolist() == [[True, True, False, False], [True] * 4]
    assert x[0, 2:].abs().max() == 0
    with pytest.raises(PipelineError):
        pad_and_mask([])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(path="other")
    with pytest.raises(ValueError):
        TrainConfig(lyric_dropout=1.5)


def test_checkpoints_written(tiny_ckpt):
    for stem in ("vae", "encoder", "diffusion", "diffusion_pretrain"):
        assert (tiny_ckpt / f"{stem}.bin").exists() and (tiny_ckpt / f"{stem}.json").exists()
    for log in ("vae_log.csv", "encoder_log.csv", "pretrain_log.csv", "finetune_log.csv"):
        assert (tiny_ckpt / log).read_text().startswith("step,loss,grad_norm,seconds")


def test_missing_checkpoint(tmp_path, songs3):
    with pytest.raises(CheckpointError, match="missing checkpoint file"):
        load_models(tmp_path)
    with pytest.raises(CheckpointError):
        pretrain(songs3, tmp_path, BackboneConfig(**TINY_BB), TrainConfig(steps=1))


def test_finetune_rejects_path_switch(tiny_ckpt, songs3):
    with pytest.raises(PipelineError, match="musit"):
        finetune(songs3, tiny_ckpt, TrainConfig(phase="diffusion_finetune", path="mudit", steps=1))


def test_generation_is_deterministic(tiny_ckpt, tmp_path):
    models = load_models(tiny_ckpt)
    a, b = generate(request(), models, FAST), generate(request(), models, FAST)
    assert a.waveform.tobytes() == b.waveform.tobytes()
    assert not np.array_equal(a.latent, generate(request(seed=4), models, FAST).latent)
    write_generation(a, tmp_path / "a", 16000)
    write_generation(b, tmp_path / "b", 16000)
    for name in ("out.wav", "out_mel.pgm", "out_latent.csv", "report.json", "out_mel.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_generation_report_and_shapes(tiny_ckpt):
    models = load_models(tiny_ckpt)
    res = generate(request(), models, FAST)
    frames = audio.frame_count(4 * 16000, models.mel_cfg)
    assert res.mel.shape == (frames, 64)
    assert res.latent.shape == (int(np.ceil(frames / 16)), 16)
    assert res.report["structure"]["score"] == 1.0
    assert res.report["timing"] == {"sampler": "ode_heun", "steps": 3, "nfe": 6, "invert_iters": 2}
    assert -1 <= res.report["alignment_score"] <= 1


@pytest.mark.parametrize("role", ["vocal", "drums", "chords", "bass", "reference"])
def test_prompt_rows_preserved(tiny_ckpt, corpus8, role):
    models = load_models(tiny_ckpt)
    e = corpus8[0]
    clip = (e.waveform if role == "reference" else e.stems[role])[:16000]
    res = generate(request(prompt_audio=clip, prompt_role=role), models, FAST)
    pmel = audio.mel_forward(clip, models.mel_cfg)
    z = pipeline.encode_mean(pmel, models.vae)
    shift = torch.tensor(models.meta["latent_shift"])
    scale = torch.tensor(models.meta["latent_scale"])
    expected = ((z - shift) / scale).numpy()
    assert res.prompt_rows == len(expected) > 0
    assert np.abs(res.latent[:len(expected)] - expected).max() < 1e-6


def test_request_validation(tiny_ckpt, tiny_ckpt_mudit):
    models = load_models(tiny_ckpt)
    with pytest.raises(PipelineError):
        generate(request(description="  "), models, FAST)
    with pytest.raises(PipelineError):
        generate(request(duration_s=20.0), models, FAST)
    with pytest.raises(PipelineError):
        generate(request(prompt_audio=np.zeros(4000), prompt_role="piano"), models, FAST)
    with pytest.raises(PipelineError):
        generate(request(prompt_audio=np.zeros(64000), prompt_role="vocal"), models, FAST)
    with pytest.raises(PipelineError, match="does not match"):
        generate(request(sampler=SamplerConfig(kind="ddim", steps=2)), models, FAST)
    mudit = load_models(tiny_ckpt_mudit)
    with pytest.raises(PipelineError):
        generate(request(), mudit, FAST)
    res = generate(request(sampler=SamplerConfig(kind="ddim", steps=3)), mudit, FAST)
    assert res.report["path"] == "mudit"


def test_whole_songs_only(monkeypatch, songs3, tmp_path):
    """Training and generation never take windowed crops of a latent."""
    def forbidden(*a, **k):
        raise AssertionError("crop_latent called")
    monkeypatch.setattr(pipeline, "crop_latent", forbidden)
    ckpt = train_tiny(songs3, tmp_path, "musit", steps=2)
    generate(request(), load_models(ckpt), FAST)


def test_finetune_varies_prompt_segmentation(tiny_ckpt, songs3):
    _, rows = finetune(songs3, tiny_ckpt, TrainConfig(phase="diffusion_finetune", path="musit", steps=12,
                                                       batch_size=3))
    assert len({r["prompt_tokens"] for r in rows}) > 1
    assert len({r["pro_register"] for r in rows}) > 1


@pytest.mark.parametrize("path", ["mudit", "musit"])
def test_diffusion_loss_ignores_latent_and_lyric_padding(path):
    from musit.backbone import Backbone
    from musit.gradcheck import randomize
    cfg = BackboneConfig(d_model=16, n_layers=1, n_heads=2, d_lat=4, d_e=8, lyric_vocab_size=30, time_freq_dim=16)
    model = randomize(Backbone(cfg).double(), 0)
    gen = torch.Generator().manual_seed(0)
    z = torch.randn(7, 4, generator=gen, dtype=torch.float64)
    lyr = torch.tensor([3, 5, 8, 2])
    prompt = torch.randn(2, 8, generator=gen, dtype=torch.float64)

    def loss(latents, lyrics):
        x, cond = make_condition(latents, lyrics, [prompt], [z[:2]], dtype=torch.float64)
        g = torch.Generator().manual_seed(5)
        if path == "mudit":
            return ddpm_loss(model, x, cond, DiscreteSchedule.linear(), g).item()
        return sit_velocity_loss(model, x, cond, g).item()
    base = loss([z], [lyr])
    assert abs(loss([z], [torch.cat([lyr, torch.zeros(5, dtype=torch.long)])]) - base) < 1e-12
    # latent padding: trailing rows appended and masked out
    padded = torch.cat([z, torch.zeros(5, 4, dtype=torch.float64)])
    xp, cp = make_condition([padded], [lyr], [prompt], [z[:2]], dtype=torch.float64)
    cp.latent_mask[0, 7:] = False
    g = torch.Generator().manual_seed(5)
    val = ddpm_loss(model, xp, cp, DiscreteSchedule.linear(), g) if path == "mudit" \
        else sit_velocity_loss(model, xp, cp, g)
    assert abs(val.item() - base) < 1e-5


def test_single_song_overfit_f64(songs3, tmp_path):
    """One song, float64, 300 steps: the velocity loss falls below half its start."""
    from musit.audio import MelConfig
    from musit.corpus import description_vocabulary
    from musit.encoder import EncoderConfig
    from musit.vae import VaeConfig
    from conftest import TINY_ENC, TINY_VAE
    one = songs3[:1] * 2
    pipeline.train_vae(one, VaeConfig(**TINY_VAE), MelConfig(), TrainConfig(phase="vae", steps=2), tmp_path)
    pipeline.train_encoder(one, EncoderConfig(vocab=tuple(description_vocabulary()), **TINY_ENC),
                           TrainConfig(phase="encoder", steps=2), tmp_path)
    _, rows = pretrain(songs3[:1], tmp_path, BackboneConfig(**TINY_BB),
                       TrainConfig(steps=300, batch_size=1, float_mode="f64", lr=2e-3, prompt_prob=0.0))
    first, last = pipeline.smoothed_ratio([r["loss"] for r in rows], 30)
    assert last < 0.5 * first


def test_load_songs_round_trip(tmp_path, corpus8):
    write_corpus(corpus8[:2], tmp_path)
    songs = load_songs(tmp_path)
    direct = songs_from_entries(corpus8[:2])
    assert [s.id for s in songs] == ["song-000", "song-001"]
    # PCM16 quantization moves the log-mel by a few hundredths at most
    assert np.abs(songs[0].mel - direct[0].mel).max() < 0.05
    assert songs[1].lyrics == direct[1].lyrics
    with pytest.raises(CheckpointError):
        load_songs(tmp_path / "nowhere")


def test_evaluate_plumbing(tiny_ckpt, songs3):
    metrics, rows = evaluate(songs3, load_models(tiny_ckpt), n_generations=4, seed=0,
                             sampler=SamplerConfig(kind="ode_heun", steps=2), gen_cfg=FAST)
    assert metrics["n"] == 4 and len(rows) == 4
    assert all(r["song"] != r["shuffled_song"] for r in rows)
    assert {"fad", "fad_white_noise", "alignment_mean_matched", "alignment_mean_shuffled", "structure_mean",
            "sign_test"} <= set(metrics)
    assert metrics["structure_all_valid"]
