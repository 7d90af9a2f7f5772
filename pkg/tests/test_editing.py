import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from affedit.diffusion import build_schedule, decode_latent, encode_image, forward_noise, psnr
from affedit.editing import (EditRequest, Pipeline, edit, edit_masked, generate, generate_batch, latent_mask,
                             load_image, load_mask, quantize, save_image)
from affedit.errors import InvalidInputError, InvalidStepError, MissingArtifactError
from conftest import tiny_pipeline

TEXT = "a family by the lake feels peaceful and content"


@pytest.fixture(scope="module")
def trained_pipeline(trained_autoencoder):
    return tiny_pipeline(trained_autoencoder)


@pytest.fixture
def img(small_corpus):
    return small_corpus.images[3]


def round_trip(image, pipe):
    return decode_latent(encode_image(image, pipe.autoencoder), pipe.autoencoder)


def half_mask(size=64):
    m = torch.zeros(size, size)
    m[:, size // 2:] = 1
    return m


# ---------------------------------------------------------------------- edit


def test_edit_t0_is_exact_round_trip(pipeline, img):
    out = edit(EditRequest(img, TEXT, t=0, seed=1), pipeline).image
    assert torch.equal(out, round_trip(img, pipeline))


def test_edit_is_deterministic_for_fixed_seed(pipeline, img):
    a = edit(EditRequest(img, TEXT, t=20, seed=4), pipeline).image
    b = edit(EditRequest(img, TEXT, t=20, seed=4), pipeline).image
    c = edit(EditRequest(img, TEXT, t=20, seed=5), pipeline).image
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_edit_default_t_is_37():
    assert EditRequest(None, "x").t == 37


def test_edit_errors(pipeline, img):
    with pytest.raises(InvalidStepError):
        edit(EditRequest(img, TEXT, t=51), pipeline)
    with pytest.raises(InvalidInputError):
        edit(EditRequest(img, "   ", t=5), pipeline)
    with pytest.raises(InvalidInputError):
        edit(EditRequest(None, TEXT, t=5), pipeline)
    with pytest.raises(InvalidInputError):
        edit(EditRequest(img, TEXT, t=5, mask=half_mask()), pipeline)


def test_edit_output_dims_and_trace(pipeline, img):
    res = edit(EditRequest(img, TEXT, t=6, seed=0), pipeline)
    assert res.image.shape == img.shape
    assert [e["t"] for e in res.trace] == [6, 5, 4, 3, 2, 1, 0]


def test_edit_displacement_monotone_in_t(pipeline, img):
    z = encode_image(img, pipeline.autoencoder)
    means = []
    for t in (5, 15, 25, 35, 45):
        runs = [edit(EditRequest(img, TEXT, t=t, seed=s), pipeline, keep_latents=True) for s in range(8)]
        d = [float((r.trace[0]["z"][0] - z).norm()) for r in runs]
        means.append(np.mean(d))
    assert all(b > a for a, b in zip(means, means[1:])), means


def test_displacement_matches_closed_form_scaling():
    s = build_schedule(50)
    g = torch.Generator().manual_seed(0)
    z = torch.randn(4, 16, 16, generator=g, dtype=torch.float64)
    for t in (5, 15, 25, 35, 45):
        eps = torch.randn(400, 4, 16, 16, generator=g, dtype=torch.float64)
        sq = ((forward_noise(z.expand_as(eps), t, eps, s) - z) ** 2).sum(dim=(1, 2, 3)).mean()
        ab = s.alpha_bar[t]
        expected = (math.sqrt(ab) - 1) ** 2 * float((z ** 2).sum()) + (1 - ab) * z.numel()
        assert abs(float(sq) - expected) / expected <= 0.05


# --------------------------------------------------------------- edit_masked


def test_masked_all_ones_equals_edit_bitwise(pipeline, img):
    a = edit(EditRequest(img, TEXT, t=25, seed=9), pipeline).image
    b = edit_masked(EditRequest(img, TEXT, t=25, mask=torch.ones(64, 64), seed=9), pipeline).image
    assert torch.equal(a, b)


def test_masked_all_zeros_is_round_trip(trained_pipeline, img):
    out = edit_masked(EditRequest(img, TEXT, t=37, mask=torch.zeros(64, 64), seed=2), trained_pipeline).image
    rt = round_trip(img, trained_pipeline)
    assert psnr(out, rt) >= 25.0
    assert torch.equal(out, rt)


@given(st.integers(1, 50), st.integers(0, 1000), st.integers(0, 2**16 - 1))
def test_masked_unedited_latents_equal_z_in_every_step(t, seed, bits):
    pipe = tiny_pipeline(seed=1)
    # random 4x4 block mask, upsampled to image resolution
    blocks = torch.tensor([(bits >> i) & 1 for i in range(16)], dtype=torch.float32).view(4, 4)
    mask = blocks.repeat_interleave(16, 0).repeat_interleave(16, 1)
    image = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(seed))
    res = edit_masked(EditRequest(image, TEXT, t=t, mask=mask, seed=seed), pipe, keep_latents=True)
    keep = ~latent_mask(mask, (64, 64), (16, 16))
    assert len(res.trace) == t + 1
    for entry in res.trace:
        assert torch.equal(entry["z"][..., keep], entry["z_in"][..., keep])


def _decoder_reach(ae) -> int:
    """Pixel columns a change in one latent column can reach, measured by perturbation."""
    z = torch.zeros(1, *ae.latent_shape)
    base = ae.decode_raw(z)
    z[..., 8] = 10.0
    diff = (ae.decode_raw(z) - base).abs().amax(dim=(0, 1, 2))
    cols = torch.nonzero(diff > 0).flatten()
    return int(max(32 - int(cols.min()), int(cols.max()) + 1 - 36))


def test_masked_half_plane_preserves_unmasked_half(trained_pipeline, small_corpus):
    ae = trained_pipeline.autoencoder
    reach = _decoder_reach(ae)
    assert 0 < reach < 32
    ratios = []
    for i in range(4):
        image = small_corpus.images[i]
        rt = round_trip(image, trained_pipeline)
        tol = float((rt - image).abs().mean())
        out = edit_masked(EditRequest(image, TEXT, t=37, mask=half_mask(), seed=i), trained_pipeline).image
        d = (out - rt).abs()
        zero = d[..., : 32 - reach]  # pixels no editable latent can influence
        one = d[..., 32:]
        assert float(zero.mean()) <= tol
        ratios.append(float(one.mean()) / max(float(zero.mean()), tol))
    assert min(ratios) >= 5.0


def test_latent_mask_nearest_and_binary():
    m = torch.zeros(64, 64)
    m[:, 40:] = 1
    lm = latent_mask(m, (64, 64), (16, 16))
    assert lm.dtype == torch.bool
    assert lm[:, 10:].all() and not lm[:, :10].any()


def test_mask_validation(pipeline, img):
    bad = half_mask() * 0.5
    with pytest.raises(InvalidInputError):
        edit_masked(EditRequest(img, TEXT, t=5, mask=bad), pipeline)
    with pytest.raises(InvalidInputError):
        edit_masked(EditRequest(img, TEXT, t=5, mask=torch.ones(32, 32)), pipeline)
    with pytest.raises(InvalidInputError):
        edit_masked(EditRequest(img, TEXT, t=5), pipeline)


# ----------------------------------------------------------------- generate


def test_generate_deterministic_and_seed_sensitive(pipeline):
    a = generate(TEXT, 3, pipeline).image
    b = generate(TEXT, 3, pipeline).image
    c = generate(TEXT, 4, pipeline).image
    assert torch.equal(a, b)
    assert float((a - c).abs().mean()) > 0
    assert a.shape == (3, 64, 64)


def test_generate_batch_matches_single(pipeline):
    texts = [TEXT, "a family by the lake feels terrified and alone"]
    batch = generate_batch(texts, [0, 1], pipeline)
    for i, (t, s) in enumerate(zip(texts, [0, 1])):
        torch.testing.assert_close(batch[i], generate(t, s, pipeline).image, rtol=0, atol=1e-4)


def test_generate_batch_refuses_stochastic_schedule():
    with pytest.raises(InvalidInputError):
        generate_batch([TEXT], [0], tiny_pipeline(eta=1.0))


def test_generate_stochastic_schedule_still_seeded():
    pipe = tiny_pipeline(eta=1.0)
    assert torch.equal(generate(TEXT, 7, pipe).image, generate(TEXT, 7, pipe).image)


def test_generate_rejects_empty_text(pipeline):
    with pytest.raises(InvalidInputError):
        generate("", 0, pipeline)


# ---------------------------------------------------------------------- I/O


def test_image_png_round_trip(tmp_path, img):
    path = save_image(img, tmp_path / "a" / "img.png")
    back = load_image(path)
    assert torch.equal(quantize(back), quantize(img))
    assert float((back - img).abs().max()) <= 0.5 / 255 + 1e-6


def test_load_image_resizes(tmp_path):
    Image.fromarray(np.zeros((20, 30, 3), np.uint8)).save(tmp_path / "x.png")
    assert load_image(tmp_path / "x.png", 64).shape == (3, 64, 64)


def test_load_mask_accepts_only_0_255(tmp_path):
    arr = np.zeros((64, 64), np.uint8)
    arr[:, 32:] = 255
    Image.fromarray(arr).save(tmp_path / "m.png")
    assert torch.equal(load_mask(tmp_path / "m.png"), half_mask())
    arr[0, 0] = 128
    Image.fromarray(arr).save(tmp_path / "bad.png")
    with pytest.raises(InvalidInputError):
        load_mask(tmp_path / "bad.png")


# ----------------------------------------------------------------- pipeline


def test_pipeline_checkpoint_round_trip(tmp_path, pipeline, img):
    path = pipeline.save(tmp_path / "pipe.safetensors")
    loaded = Pipeline.load(path)
    assert loaded.config() == pipeline.config()
    req = EditRequest(img, TEXT, t=10, seed=0)
    assert torch.equal(edit(req, loaded).image, edit(req, pipeline).image)


def test_pipeline_missing_checkpoint_names_producer(tmp_path):
    with pytest.raises(MissingArtifactError, match="train-mapper"):
        Pipeline.load(tmp_path / "nope.safetensors")
