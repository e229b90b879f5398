"""Acceptance criteria, one test per criterion.

Each test prints a single ``CRITERION n PASS|FAIL`` line; the lines are
repeated in the terminal summary.
"""

import sys
import textwrap
import time

import numpy as np
import pytest

from oracles import SHARMA_PAIRS, ciede2000_scalar, gradient_probe_errors
from tonestyle.color import LabColor, ciede2000, delta_e2000, mean_delta_e
from tonestyle.features import tone_features
from tonestyle.flow import (
    FlowModel,
    TrainSchedule,
    euler_trajectory,
    fm_loss,
    from_flow,
    make_canvas,
    refl_tone_loss,
    sample,
    to_flow,
    tone_reward_loss,
    train,
)
from tonestyle.lut import apply_lut, fit_lut_from_images, identity_lut, random_perturbation_lut
from tonestyle.metrics import ExternalScorer
from tonestyle.pipeline import PipelineConfig, Preset, audit_manifest, build_triplets, read_manifest, tone_filter
from tonestyle.scorer import (
    ProjectionHead,
    ScorerConfig,
    contrastive_loss,
    embed_batch,
    preference_accuracy,
    recall_at_k,
    tone_similarity,
    train_stage1,
    train_stage2,
    triplet_objective,
)
from tonestyle.synthetic import (
    content_image,
    content_images,
    flow_triplets,
    preset_lut,
    ranking_groups,
    retrieval_benchmark,
    separated_tone_params,
    tone_transform,
)

RESULTS: list[str] = []
SEEDS = (0, 1, 2)


def report(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    RESULTS.append(line)


# -- 1 -----------------------------------------------------------------------------------


def test_criterion_1_ciede2000_reference_pairs():
    t0 = time.perf_counter()
    rows = np.array(SHARMA_PAIRS)
    got = delta_e2000(rows[:, :3], rows[:, 3:6])
    scalar_api = np.array([ciede2000(LabColor(*r[:3]), LabColor(*r[3:6]))[0] for r in rows])
    published = rows[:, 6]
    oracle = np.array([ciede2000_scalar(r[:3], r[3:6]) for r in rows])
    elapsed = time.perf_counter() - t0
    err = max(np.abs(got - published).max(), np.abs(got - oracle).max(), np.abs(scalar_api - published).max())
    ok = err <= 1e-4 and elapsed < 1.0
    report(1, ok, f"{len(SHARMA_PAIRS)} pairs, max error {err:.2e}, {elapsed:.3f} s")
    assert ok


# -- 2 -----------------------------------------------------------------------------------


def test_criterion_2_lut_round_trip():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(10):
        truth = random_perturbation_lut(1000 + i, 0.2, 33)
        content = rng.random((128, 128, 3))
        lut, _ = fit_lut_from_images(content, apply_lut(truth, content))
        held = rng.random((64, 64, 3))
        worst = max(worst, mean_delta_e(apply_lut(lut, held), apply_lut(truth, held)))
    img = rng.random((128, 128, 3))
    ident, _ = fit_lut_from_images(img, img)
    ident_err = float(np.abs(ident.table - identity_lut(33).table).max())
    elapsed = time.perf_counter() - t0
    ok = worst <= 1.0 and ident_err <= 1e-3 and elapsed < 60.0
    report(2, ok, f"worst held-out mean dE {worst:.3f}, identity vertex error {ident_err:.1e}, {elapsed:.1f} s")
    assert ok


# -- 3 -----------------------------------------------------------------------------------


def _small_img(seed, p):
    return 0.1 + 0.8 * np.random.default_rng(seed).random((p, p, 3))


def test_criterion_3_gradients():
    rng = np.random.default_rng(33)
    probes = 24
    errs = {}

    head = ProjectionHead(54, 12, 6, rng=rng)
    F = np.stack([tone_features(_small_img(i, 4)) for i in range(6)])
    labels = [0, 0, 1, 1, 2, 2]
    _, g = contrastive_loss(F, labels, head, 0.1)
    errs["supcon"] = gradient_probe_errors(lambda: contrastive_loss(F, labels, head, 0.1)[0], head.params, g, probes, rng)

    Fa, Fp, Fn = (rng.standard_normal((5, 54)) for _ in range(3))
    _, g = triplet_objective(head, Fa, Fp, Fn, 1.5)
    errs["triplet"] = gradient_probe_errors(lambda: triplet_objective(head, Fa, Fp, Fn, 1.5)[0], head.params, g, probes, rng)

    gen, ref = _small_img(40, 2), _small_img(41, 2)
    _, g = tone_reward_loss(gen, ref, head)
    errs["tone reward (pixels)"] = gradient_probe_errors(lambda: tone_reward_loss(gen, ref, head)[0], [gen], [g], probes, rng)

    model = FlowModel(hidden=8, rng=rng)
    cv = make_canvas(_small_img(42, 3), _small_img(43, 3), 3, _small_img(44, 3))
    eps = rng.standard_normal((9, 3))
    K = 4
    frozen = euler_trajectory(model, cv, eps, K)[K - 1].copy()

    def last_step():
        v = model.velocity(frozen, cv, 1.0 / K)
        return tone_reward_loss(from_flow(frozen - v / K).reshape(3, 3, 3), cv.reference, head)[0]

    _, g = refl_tone_loss(model, cv, head, eps, K)
    errs["tone reward (params)"] = gradient_probe_errors(last_step, model.params, g, probes, rng)

    batch = [make_canvas(_small_img(50 + i, 3), _small_img(60 + i, 3), 3, _small_img(70 + i, 3)) for i in range(2)]
    ts, es = [0.3, 0.9], [rng.standard_normal((9, 3)) for _ in range(2)]
    _, g = fm_loss(model, batch, t=ts, eps=es)
    errs["flow matching"] = gradient_probe_errors(lambda: fm_loss(model, batch, t=ts, eps=es)[0], model.params, g, probes, rng)

    worst = {k: max(v) for k, v in errs.items()}
    ok = all(w <= 1e-4 for w in worst.values()) and all(len(v) >= 20 for v in errs.values())
    report(3, ok, ", ".join(f"{k} {w:.1e}" for k, w in worst.items()) + f" ({probes} probes each)")
    assert ok


# -- 4 -----------------------------------------------------------------------------------


def test_criterion_4_scorer_retrieval_and_preference():
    t0 = time.perf_counter()
    cfg = ScorerConfig()
    data = retrieval_benchmark(20, 50, 35, 32, seed=0)
    head, _ = train_stage1(data.train_images, data.train_labels, cfg)
    G = embed_batch(np.stack([tone_features(x) for x in data.train_images]), head)
    Q = embed_batch(np.stack([tone_features(x) for x in data.query_images]), head)
    r1 = recall_at_k(G, data.train_labels, Q, data.query_labels, 1)
    r5 = recall_at_k(G, data.train_labels, Q, data.query_labels, 5)
    groups = ranking_groups(500, np.random.default_rng(100))
    train_groups, test_groups = groups[:400], groups[400:]
    tuned, _ = train_stage2(head, train_groups, cfg)
    p1, p2 = preference_accuracy(test_groups, head), preference_accuracy(test_groups, tuned)
    elapsed = time.perf_counter() - t0
    ok = r1 >= 0.90 and r5 == 1.0 and p2 > p1 and elapsed < 300
    report(4, ok, f"R@1 {r1:.3f}, R@5 {r5:.3f}, PAcc {p1:.3f} -> {p2:.3f}, {elapsed:.0f} s")
    assert ok


# -- 5 and 6: toy flow model ------------------------------------------------------------------


P = 32
FLOW_STEPS = 3000


def _flow_world(seed):
    """Presets, a head trained on them, noisy training triplets and clean held-out triplets."""
    rng = np.random.default_rng(seed)
    presets = separated_tone_params(8, rng)
    contents = content_images(20, rng, P)
    images = [tone_transform(c, p) for c in contents for p in presets]
    labels = np.array([i for _ in contents for i in range(len(presets))])
    head, _ = train_stage1(images, labels, ScorerConfig(seed=seed))
    train_set = flow_triplets(200, presets, rng, P, mismatch=0.2)
    clean = flow_triplets(200, presets, np.random.default_rng([seed, 7]), P)
    held = flow_triplets(40, presets, rng, P)
    return head, train_set, clean, held


@pytest.fixture(scope="module")
def flow_worlds():
    return {s: _flow_world(s) for s in SEEDS}


def _fit_flow(triplets, seed, steps=FLOW_STEPS, reward_start=None, head=None):
    data = [make_canvas(t.content, t.reference, P, t.target) for t in triplets]
    model = FlowModel(rng=np.random.default_rng(seed + 10))
    schedule = TrainSchedule(total_steps=steps, reward_start_step=reward_start, learning_rate=3e-3, seed=seed)
    return train(model, data, schedule, head)[0]


def _evaluate(model, held, head):
    outs = [sample(model, t.content, t.reference, K=4, seed=i) for i, t in enumerate(held)]
    de = float(np.mean([mean_delta_e(o, t.target) for o, t in zip(outs, held)]))
    tone = float(np.mean([1.0 - tone_similarity(o, t.reference, head) for o, t in zip(outs, held)]))
    return de, tone


def test_criterion_5_filtering_beats_noise(flow_worlds):
    t0 = time.perf_counter()
    rows = []
    for seed in SEEDS:
        head, noisy, _, held = flow_worlds[seed]
        kept = [t for t in noisy if tone_filter(t.reference, t.target, head, 0.8)[0]]
        de_noisy = _evaluate(_fit_flow(noisy, seed, 2000), held, head)[0]
        de_filtered = _evaluate(_fit_flow(kept, seed, 2000), held, head)[0]
        rows.append((seed, len(kept), sum(t.mismatched for t in kept), de_filtered, de_noisy))
    elapsed = time.perf_counter() - t0
    ok = all(f < n for *_, f, n in rows) and elapsed < 900
    detail = "; ".join(f"seed {s}: kept {k} ({b} mismatched) dE {f:.2f} vs {n:.2f}" for s, k, b, f, n in rows)
    report(5, ok, f"{detail}; {elapsed:.0f} s")
    assert ok


def test_criterion_6_flow_efficacy_and_reward(flow_worlds):
    t0 = time.perf_counter()
    rows = []
    for seed in SEEDS:
        head, _, clean, held = flow_worlds[seed]
        base = float(np.mean([mean_delta_e(t.content, t.target) for t in held]))
        de0, tone0 = _evaluate(_fit_flow(clean, seed), held, head)
        de1, tone1 = _evaluate(_fit_flow(clean, seed, reward_start=2 * FLOW_STEPS // 3, head=head), held, head)
        rows.append((seed, base, de0, de1, tone0, tone1))
    elapsed = time.perf_counter() - t0
    efficacy = all(max(d0, d1) <= 0.5 * b for _, b, d0, d1, _, _ in rows)
    reward = all(t1 <= t0 for *_, t0, t1 in rows)
    ok = efficacy and reward and elapsed < 900
    detail = "; ".join(
        f"seed {s}: dE {d0:.2f}/{d1:.2f} vs baseline {b:.2f}, tone distance {t0:.4f} -> {t1:.4f}" for s, b, d0, d1, t0, t1 in rows
    )
    report(6, ok, f"{detail}; {elapsed:.0f} s")
    assert ok


# -- 7 -----------------------------------------------------------------------------------


SWEEP = (0.6, 0.9, 0.97, 0.995)
WARM_SCORER = """
    import sys
    import numpy as np
    from PIL import Image
    x = np.asarray(Image.open(sys.argv[1]).convert('RGB'), dtype=float) / 255.0
    print(repr(float((x[..., 0] - x[..., 2]).mean() + 0.5 * x.std())))
"""


def test_criterion_7_pipeline_invariants(tmp_path):
    rng = np.random.default_rng(7)
    params = separated_tone_params(4, rng, pool=60)
    contents = content_images(12, rng, 16)
    images = [tone_transform(c, p) for p in params for c in contents]
    labels = [i for i in range(len(params)) for _ in contents]
    head, _ = train_stage1(images, labels, ScorerConfig(epochs=25, hidden=32, embed_dim=16))
    presets = [Preset(f"p{i}", "other", preset_lut(p, n=17)) for i, p in enumerate(params[:3])]
    toy = {f"img{i}": content_image(rng, 16) for i in range(4)}
    script = tmp_path / "warm.py"
    script.write_text(textwrap.dedent(WARM_SCORER))
    scorer = ExternalScorer([sys.executable, str(script)])

    built = []
    for run in ("a", "b"):
        m = build_triplets(toy, presets, head, scorer, PipelineConfig(seed=3), tmp_path / run)
        built.append((tmp_path / run / "manifest.jsonl").read_bytes())
    manifest = read_manifest(tmp_path / "a" / "manifest.jsonl")
    problems = audit_manifest(manifest, head=head, root=tmp_path / "a")
    identical = built[0] == built[1]

    counts = [len(build_triplets(toy, presets, head, scorer, PipelineConfig(tone_threshold=t, seed=3)).rows) for t in SWEEP]
    monotone = all(a >= b for a, b in zip(counts, counts[1:])) and counts[0] > counts[-1]
    ok = not problems and identical and monotone and len(m.rows) > 0
    report(7, ok, f"{len(m.rows)} rows, {len(problems)} violations, byte-identical {identical}, sweep {counts}")
    assert ok


# -- 8 -----------------------------------------------------------------------------------


class _ConstantVelocity:
    def __init__(self, v):
        self.v = v

    def velocity(self, s, canvas, t):
        return self.v


def test_criterion_8_sampler_exactness():
    rng = np.random.default_rng(8)
    content, target, reference = (rng.random((P, P, 3)) for _ in range(3))
    s0 = to_flow(target).reshape(-1, 3)
    errs = {}
    for K in (1, 2, 4, 8):
        eps = rng.standard_normal(s0.shape)
        model = _ConstantVelocity(eps - s0)
        canvas = make_canvas(content, reference, P)
        final = euler_trajectory(model, canvas, eps, K)[-1]
        out = sample(model, content, reference, K=K, p=P, eps=eps)
        errs[K] = max(np.abs(final - s0).max(), np.abs(out - target).max())
    ok = all(e <= 1e-6 for e in errs.values())
    report(8, ok, ", ".join(f"K={k} {e:.1e}" for k, e in errs.items()))
    assert ok
