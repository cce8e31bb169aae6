"""Fast invariant suite behind ``musit selfcheck``.

Every check is seeded and reports only values (no timings), so two runs
produce identical JSON.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from .backbone import Backbone, BackboneConfig, Condition
from .diffusion import (DiscreteSchedule, alpha_sigma, ddim_step, forward_diffuse_discrete, score_to_velocity,
                        velocity_to_score)
from .encoder import DualEncoder, EncoderConfig, contrastive_loss, info_nce
from .evaluation import fad
from .gradcheck import check_gradients, randomize
from .vae import MelVAE, VaeConfig, vae_loss


def _interpolant() -> dict:
    t = torch.linspace(0, 1, 1001, dtype=torch.float64)
    a, s, _, _ = alpha_sigma(t)
    err = float((a**2 + s**2 - 1).abs().max())
    a0, s0, _, _ = alpha_sigma(torch.tensor(0.0, dtype=torch.float64))
    a1, s1, _, _ = alpha_sigma(torch.tensor(1.0, dtype=torch.float64))
    endpoints = float(a0) == 1.0 and float(s0) == 0.0 and float(s1) == 1.0 and abs(float(a1)) < 1e-16
    return {"max_error": err, "pass": err < 1e-12 and endpoints}


def _velocity_score() -> dict:
    gen = torch.Generator().manual_seed(0)
    worst = 0.0
    for t in (0.1, 0.5, 0.9):
        x = torch.randn(64, dtype=torch.float64, generator=gen)
        s = torch.randn(64, dtype=torch.float64, generator=gen)
        tt = torch.tensor(t, dtype=torch.float64)
        back = velocity_to_score(score_to_velocity(s, x, tt), x, tt)
        worst = max(worst, float((back - s).abs().max()))
    return {"max_error": worst, "pass": worst < 1e-9}


def _ddim_inversion() -> dict:
    sched = DiscreteSchedule.linear()
    gen = torch.Generator().manual_seed(1)
    x0 = torch.randn(8, 4, dtype=torch.float64, generator=gen)
    eps = torch.randn(8, 4, dtype=torch.float64, generator=gen)
    worst = 0.0
    for i in (1, 10, 250, 500, 999, 1000):
        xi = forward_diffuse_discrete(x0, eps, i, sched)
        worst = max(worst, float((ddim_step(xi, eps, i, 0, sched, clip=None) - x0).abs().max()))
    return {"max_error": worst, "pass": worst < 1e-5}


def _gradients() -> dict:
    torch.manual_seed(0)
    gen = torch.Generator().manual_seed(2)
    out = {}
    cfg = BackboneConfig(d_model=8, n_layers=1, n_heads=2, d_lat=2, d_e=4, lyric_vocab_size=10,
                         time_freq_dim=8, max_prompt_tokens=4)
    bb = randomize(Backbone(cfg).double(), 0)
    x = torch.randn(1, 4, 2, generator=gen, dtype=torch.float64)
    cond = Condition(torch.tensor([[True, True, True, False]]), 2,
                     prompt_tokens=torch.randn(1, 2, 4, generator=gen, dtype=torch.float64),
                     lyrics=torch.tensor([[3, 4, 5]]), dtype=torch.float64)
    t = torch.tensor([0.4], dtype=torch.float64)
    out["backbone"] = max(check_gradients(bb, lambda: (bb(x, t, cond) ** 2).mean()).values())

    vae = randomize(MelVAE(VaeConfig(bins=4, d_lat=2, r=2, hidden=4)).double(), 1)
    mel = torch.randn(1, 2, 4, generator=gen, dtype=torch.float64)
    out["vae"] = max(check_gradients(
        vae, lambda: vae_loss(mel, vae, 0.1, torch.Generator().manual_seed(3))[0]).values())

    enc = randomize(DualEncoder(EncoderConfig(vocab=("a", "b", "c"), bins=4, width=8, layers=1, heads=2, d_e=4,
                                              patch=2, min_audio_frames=2)).double(), 2)
    mels = [np.random.default_rng(0).normal(size=(6, 4)), np.random.default_rng(1).normal(size=(4, 4))]
    out["encoder"] = max(check_gradients(
        enc, lambda: contrastive_loss(["a b", "c a"], mels, enc, np.random.default_rng(5))).values())
    return {"max_relative_error": out, "pass": all(v < 1e-4 for v in out.values())}


def _fad() -> dict:
    a = np.array([[-1.0], [1.0]])          # mean 0, unbiased variance 2
    cases = {
        "identity": fad(a, a),
        "mean_shift": fad(np.array([[-1.0], [0.0], [1.0]]), np.array([[2.0], [3.0], [4.0]])),
        "scale": fad(np.array([[-1.0], [0.0], [1.0]]), np.array([[-2.0], [0.0], [2.0]])),
    }
    expected = {"identity": 0.0, "mean_shift": 9.0, "scale": 1.0}
    ok = all(abs(cases[k] - expected[k]) < 1e-12 for k in cases)
    return {"values": cases, "pass": ok}


def _contrastive_uniform() -> dict:
    e = torch.nn.functional.normalize(torch.ones(4, 8, dtype=torch.float64), dim=-1)
    loss = float(info_nce(e, e, 0.07))
    return {"loss": loss, "expected": math.log(4), "pass": abs(loss - math.log(4)) < 1e-6}


def _lyrics() -> dict:
    from .lyrics import SectionTag, generate_lyrics, parse_structured_lyrics, serialize

    template = [(SectionTag.VERSE, 2), (SectionTag.CHORUS, 2), (SectionTag.BRIDGE, 1), (SectionTag.CHORUS, 2)]
    ok = True
    for seed in range(10):
        lyr = generate_lyrics(["sad", "rainy"], template, 0, seed)
        ok &= parse_structured_lyrics(serialize(lyr)) == lyr
    return {"round_trips": 10, "pass": bool(ok)}


CHECKS = {
    "interpolant_identity": _interpolant,
    "velocity_score_round_trip": _velocity_score,
    "ddim_exact_inversion": _ddim_inversion,
    "gradient_micro_checks": _gradients,
    "fad_closed_forms": _fad,
    "contrastive_uniform_batch": _contrastive_uniform,
    "lyric_round_trip": _lyrics,
}


def run() -> dict:
    results = {name: fn() for name, fn in CHECKS.items()}
    return {"checks": results, "pass": all(r["pass"] for r in results.values())}
