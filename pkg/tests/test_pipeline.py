import itertools
import sys
import textwrap

import numpy as np
import pytest

from tonestyle.augment import AugmentConfig, augment_content, desaturate, exposure_shift
from tonestyle.color import lab_histogram, srgb_to_lab
from tonestyle.imageio import quantize
from tonestyle.lut import apply_lut, identity_lut
from tonestyle.metrics import ConstantScorer, ExternalScorer
from tonestyle.pipeline import (
    HookError,
    Manifest,
    PipelineConfig,
    PipelineError,
    Preset,
    Triplet,
    aesthetic_filter,
    audit_manifest,
    build_triplets,
    dedup_presets,
    generate_candidates,
    load_preset_pool,
    normalize_content,
    read_manifest,
    save_preset_pool,
    tone_filter,
)
from tonestyle.scorer import ProjectionHead, ScorerConfig, tone_similarity, train_stage1
from tonestyle.synthetic import content_image, preset_lut, random_tone_params, separated_tone_params, tone_transform


def _q(img):
    return quantize(img).astype(float) / 255.0


@pytest.fixture
def script(tmp_path):
    def make(name, body):
        p = tmp_path / f"{name}.py"
        p.write_text("import sys\n" + textwrap.dedent(body))
        return [sys.executable, str(p)]

    return make


@pytest.fixture(scope="module")
def toy_world():
    """Two well separated presets, a head trained to tell them apart and three images."""
    rng = np.random.default_rng(0)
    params = separated_tone_params(4, rng, pool=60)
    contents = [content_image(rng, 16) for _ in range(12)]
    images, labels = [], []
    for pi, p in enumerate(params):
        for c in contents:
            images.append(tone_transform(c, p))
            labels.append(pi)
    head, _ = train_stage1(images, labels, ScorerConfig(epochs=25, seed=0, hidden=32, embed_dim=16))
    presets = [Preset(f"p{i}", "other", preset_lut(p, n=17)) for i, p in enumerate(params[:2])]
    toy_images = {f"img{i}": _q(content_image(rng, 16)) for i in range(3)}
    return head, presets, toy_images


# -- presets -----------------------------------------------------------------------


def test_preset_category_validated():
    with pytest.raises(ValueError):
        Preset("x", "underwater", identity_lut(3))


def _probes(seed=1, n=2):
    rng = np.random.default_rng(seed)
    return [content_image(rng, 12) for _ in range(n)]


def test_dedup_identical_presets():
    lut = preset_lut(random_tone_params(np.random.default_rng(2)), n=9)
    kept = dedup_presets([Preset("b", "food", lut), Preset("a", "food", lut)], _probes(), 0.1)
    assert [p.id for p in kept] == ["a"]


def test_dedup_threshold_zero_keeps_all():
    lut = identity_lut(5)
    pool = [Preset(f"p{i}", "other", lut) for i in range(4)]
    assert len(dedup_presets(pool, _probes(), 0.0)) == 4


def test_dedup_matches_pairwise_enumeration():
    rng = np.random.default_rng(3)
    probes = _probes(4)
    pool = [Preset(f"p{i}", "portrait", preset_lut(random_tone_params(rng, 0.3), n=9)) for i in range(5)]
    hists = [[lab_histogram(apply_lut(p.lut, x)).counts for x in probes] for p in pool]
    D = np.array([[np.mean([np.abs(a - b).sum(axis=1).mean() for a, b in zip(hi, hj)]) for hj in hists] for hi in hists])
    for thr in (0.02, 0.05, 0.1, 0.2, 0.4):
        kept = []
        for i in range(5):
            if all(D[i, j] >= thr for j in kept):
                kept.append(i)
        assert [p.id for p in dedup_presets(pool, probes, thr)] == [f"p{i}" for i in kept]


def test_dedup_probe_pixel_order_independent():
    rng = np.random.default_rng(5)
    probes = _probes(6)
    shuffled = [x.reshape(-1, 3)[rng.permutation(144)].reshape(x.shape) for x in probes]
    pool = [Preset(f"p{i}", "night", preset_lut(random_tone_params(rng, 0.4), n=9)) for i in range(6)]
    a = [p.id for p in dedup_presets(pool, probes, 0.1)]
    assert a == [p.id for p in dedup_presets(pool, shuffled, 0.1)]


def test_dedup_errors():
    with pytest.raises(PipelineError):
        dedup_presets([], _probes(), 0.1)
    with pytest.raises(PipelineError):
        dedup_presets([Preset("a", "food", identity_lut(3))], [], 0.1)


def test_preset_pool_round_trip(tmp_path):
    pool = [Preset("warm", "portrait", preset_lut(random_tone_params(np.random.default_rng(7)), n=5))]
    save_preset_pool(pool, tmp_path)
    back = load_preset_pool(tmp_path)
    assert back[0].id == "warm" and back[0].category == "portrait"
    np.testing.assert_allclose(back[0].lut.table, pool[0].lut.table, atol=5e-7)


# -- normalization hooks ------------------------------------------------------------


def test_normalize_without_hooks_is_identity():
    x = np.random.default_rng(8).random((4, 4, 3))
    out, warnings = normalize_content(x, PipelineConfig())
    assert out is x and warnings == []


def test_normalize_identity_copy_hook(script):
    x = _q(np.random.default_rng(9).random((5, 6, 3)))
    cp = script("copy", "import shutil; shutil.copyfile(sys.argv[1], sys.argv[2])")
    out, warnings = normalize_content(x, PipelineConfig(hooks=[cp, cp]))
    assert np.array_equal(out, x) and warnings == []


def test_normalize_failing_hook(script):
    x = _q(np.random.default_rng(10).random((3, 3, 3)))
    bad = script("bad", "sys.exit(4)")
    out, warnings = normalize_content(x, PipelineConfig(hooks=[bad]))
    assert out is x and len(warnings) == 1 and "status 4" in warnings[0]
    with pytest.raises(HookError):
        normalize_content(x, PipelineConfig(hooks=[bad], hook_fallback=False))
    out, warnings = normalize_content(x, PipelineConfig(hooks=[["/nonexistent/hook"]]))
    assert out is x and warnings


# -- candidates and filters ----------------------------------------------------------


def test_generate_candidates():
    rng = np.random.default_rng(11)
    images = {"a": rng.random((4, 4, 3)), "b": rng.random((4, 4, 3))}
    presets = [Preset(f"p{i}", "other", preset_lut(random_tone_params(rng), n=5)) for i in range(2)]
    presets.append(Preset("id", "other", identity_lut(5)))
    cands = generate_candidates(images, presets)
    assert len(cands) == 6
    assert {(c.image_id, c.preset_id) for c in cands} == set(itertools.product("ab", ["p0", "p1", "id"]))
    for c in cands:
        if c.preset_id == "id":
            np.testing.assert_allclose(c.image, images[c.image_id], atol=1e-12)
    par = generate_candidates(images, presets, workers=3)
    assert all(np.array_equal(x.image, y.image) for x, y in zip(cands, par))
    with pytest.raises(PipelineError):
        generate_candidates({}, presets)


def _angle_head(row1):
    # Black images embed to e0, white images to the direction of ``row1``.
    W1 = np.zeros((54, 2))
    W1[0, 0] = W1[15, 1] = 50.0
    W2 = np.array([[1.0, 0.0], row1])
    return ProjectionHead(54, 2, 2, params=[W1, np.zeros(2), W2, np.zeros(2)])


def test_tone_filter_boundary():
    black, white = np.zeros((2, 2, 3)), np.ones((2, 2, 3))
    keep, score = tone_filter(black, white, _angle_head([0.79, np.sqrt(1 - 0.79**2)]), 0.8)
    assert score == pytest.approx(0.79, abs=1e-12) and not keep
    keep, score = tone_filter(black, white, _angle_head([4.0, 3.0]), 0.8)
    assert score == 0.8 and keep
    keep, score = tone_filter(black, black, _angle_head([4.0, 3.0]), 0.8)
    assert keep and score == 1.0


def test_aesthetic_filter(script):
    # Scores an image by its first red value in hundredths.
    red = script("red", """
        from PIL import Image
        print(f"{Image.open(sys.argv[1]).convert('RGB').getpixel((0, 0))[0] / 255:.2f}")
    """)
    sc = ExternalScorer(red)
    a70, b70, a69 = (np.full((2, 2, 3), v / 255) for v in (179, 179, 176))
    assert aesthetic_filter(a70, b70, sc) == (True, 0.70, 0.70)
    assert aesthetic_filter(a70, a69, sc) == (False, 0.70, 0.69)
    assert aesthetic_filter(a70, np.zeros((2, 2, 3)), ConstantScorer(0.3))[0]


# -- augmentation ---------------------------------------------------------------------------


def test_augment_all_off_is_identity():
    x = np.random.default_rng(12).random((4, 4, 3))
    cfg = AugmentConfig(p_desaturate=0, p_exposure=0, p_lut=0)
    assert np.array_equal(augment_content(x, cfg, np.random.default_rng(0)), x)


def test_full_desaturation_is_neutral():
    x = np.random.default_rng(13).random((6, 6, 3))
    lab = srgb_to_lab(desaturate(x, 0.0))
    assert np.abs(lab[..., 1:]).max() <= 1e-3


def test_exposure_shift_darkens():
    x = np.random.default_rng(14).random((6, 6, 3))
    assert np.all(exposure_shift(x, -1.0) <= x + 1e-12)
    with pytest.raises(ValueError):
        AugmentConfig(exposure_ev=(-1.0, 0.5))


def test_augment_deterministic_and_pixelwise():
    x = np.random.default_rng(15).random((8, 8, 3))
    cfg = AugmentConfig(p_desaturate=1, p_exposure=1, p_lut=1)
    a = augment_content(x, cfg, np.random.default_rng(42))
    b = augment_content(x, cfg, np.random.default_rng(42))
    assert np.array_equal(a, b)
    # pixelwise: permuting pixels commutes with augmentation
    perm = np.random.default_rng(1).permutation(64)
    c = augment_content(x.reshape(-1, 3)[perm].reshape(x.shape), cfg, np.random.default_rng(42))
    np.testing.assert_allclose(c.reshape(-1, 3), a.reshape(-1, 3)[perm], atol=1e-12)


# -- triplet assembly -----------------------------------------------------------------------


def test_build_requires_scorer_policy(toy_world):
    head, presets, images = toy_world
    with pytest.raises(PipelineError):
        build_triplets(images, presets, head, None, PipelineConfig())


def test_build_identity_preset(toy_world):
    head, _, images = toy_world
    ident = [Preset("ident", "other", identity_lut(17))]
    m = build_triplets(images, ident, head, ConstantScorer(), PipelineConfig(tone_threshold=0.8))
    expected = {
        (a, b): tone_similarity(images[b], images[a], head)
        for a in images for b in images if a != b and tone_similarity(images[b], images[a], head) >= 0.8
    }
    assert {(r.content_id, r.reference_id): r.tone_sim for r in m.rows} == pytest.approx(expected, abs=1e-12)


def test_build_unreachable_threshold(toy_world):
    head, presets, images = toy_world
    m = build_triplets(images, presets, head, ConstantScorer(), PipelineConfig(tone_threshold=1.0))
    assert m.rows == []


def _warm_contrast(x):
    return float((x[..., 0] - x[..., 2]).mean() + 0.5 * x.std())


def test_build_matches_brute_force(toy_world, script):
    head, presets, images = toy_world
    scorer = ExternalScorer(script("warm", """
        import numpy as np
        from PIL import Image
        x = np.asarray(Image.open(sys.argv[1]).convert('RGB'), dtype=float) / 255.0
        print(repr(float((x[..., 0] - x[..., 2]).mean() + 0.5 * x.std())))
    """))
    manifest = build_triplets(images, presets, head, scorer, PipelineConfig(tone_threshold=0.98))
    expected = []
    for p in sorted(presets, key=lambda p: p.id):
        for a, b in itertools.permutations(sorted(images), 2):
            target, ref = _q(apply_lut(p.lut, images[a])), _q(apply_lut(p.lut, images[b]))
            if tone_similarity(ref, target, head) >= 0.98 and _warm_contrast(target) >= _warm_contrast(images[a]):
                expected.append((p.id, a, b))
    got = [(r.preset_id, r.content_id, r.reference_id) for r in manifest.rows]
    assert got == expected
    assert 0 < len(got) < 12  # both filters bite on this toy set


def test_build_deterministic_and_audited(toy_world, tmp_path):
    head, presets, images = toy_world
    cfg = PipelineConfig(tone_threshold=0.8, seed=3, aesthetic_policy="stub")
    m1 = build_triplets(images, presets, head, None, cfg, out_dir=tmp_path / "r1")
    build_triplets(images, presets, head, None, cfg, out_dir=tmp_path / "r2")
    files1 = sorted(p.relative_to(tmp_path / "r1") for p in (tmp_path / "r1").rglob("*") if p.is_file())
    files2 = sorted(p.relative_to(tmp_path / "r2") for p in (tmp_path / "r2").rglob("*") if p.is_file())
    assert files1 == files2 and len(files1) == 1 + 3 * len(m1.rows)
    for f in files1:
        assert (tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()
    back = read_manifest(tmp_path / "r1" / "manifest.jsonl")
    assert back.header["seed"] == 3 and back.rows == m1.rows
    assert audit_manifest(back) == []
    assert audit_manifest(back, head=head, root=tmp_path / "r1") == []


def test_threshold_monotone(toy_world):
    head, presets, images = toy_world
    counts = [
        len(build_triplets(images, presets, head, ConstantScorer(), PipelineConfig(tone_threshold=t)).rows)
        for t in (0.6, 0.7, 0.8, 0.9)
    ]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_audit_flags_violations():
    rows = [
        Triplet("p", "a", "b", "c", "r", "s", 0.79, 0.5, 0.6),
        Triplet("p", "a", "c", "c", "r", "s", 0.90, 0.7, 0.6),
        Triplet("p", "b", "a", "c", "r", "s", 0.95, None, None),
    ]
    problems = audit_manifest(Manifest({"tone_threshold": 0.8}, rows))
    assert len(problems) == 2


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(tone_threshold=0.0)
    with pytest.raises(ValueError):
        PipelineConfig(aesthetic_policy="maybe")
