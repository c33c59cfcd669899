"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in pytest's terminal summary (see ``conftest.py``) and
also to stdout, so ``pytest -s tests/test_acceptance.py`` shows them inline.
"""

import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

from wico.cfi import (assign_instances_to_pixels, decode_enhanced, enhance_pixel_embeddings,
                      modulate_embeddings, run_cfi, update_topdown)
from wico.domain import (BinaryMask, InstanceTripletSet, LinearHead, PixelEmbeddings,
                         ProbabilityMap, binarize, decode_bottomup, dumps_corpus,
                         extract_topdown_result, loads_corpus)
from wico.evaluation import (baseline_integrate, classify_errors, corpus_iou, iou, kde_curve,
                             mutually_exclusive_rate)
from wico.gsi import (PerformanceDistribution, blend, differentiable_topdown, init_gsi_params,
                      predict_distribution_bottomup, predict_distribution_topdown,
                      sample_confidence, straight_through_select)
from wico.harness import ErrorProfile, SceneSpec, generate_corpus, run_pipeline, run_sample
from wico.model import ModelConfig, init_model
from wico.report import dumps_report, evaluation_report
from wico.tensor import Tensor, finite_difference_check
from wico.training import TrainConfig, batch_loss, dumps_checkpoint, fit, loads_checkpoint

from conftest import ACCEPTANCE_LINES, random_sample
from test_cfi import cfi_gradient_report
from test_tensor import OPS

GRAD_TOL = 1e-4
SEEDS = range(20)

# Criterion 6 corpus and training budget.
C6_COUNT, C6_SEED = 500, 42
C6_TRAIN = TrainConfig(learning_rate=3e-3, iterations=600, batch_size=8, seed=0)


@contextmanager
def criterion(number: int, title: str):
    info: dict = {}
    try:
        yield info
    except BaseException as exc:
        detail = str(exc).splitlines()[0][:160] if str(exc) else type(exc).__name__
        line = f"criterion {number} FAIL  {title}: {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        raise
    detail = ", ".join(f"{k}={v}" for k, v in info.items())
    line = f"criterion {number} PASS  {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES[number] = line
    print(line)


# -- 1. gradient suite --------------------------------------------------------

def _gsi_report(seed):
    rng = np.random.default_rng(seed)
    params = init_gsi_params(6, rng)
    embedding = Tensor(rng.normal(size=6))
    pixels = PixelEmbeddings(Tensor(rng.normal(size=(6, 4, 4))))
    prob = ProbabilityMap(rng.random((4, 4)))
    eps = rng.standard_normal(2)

    def f(p):
        td = predict_distribution_topdown(embedding, p)
        bu = predict_distribution_bottomup(pixels, prob, p)
        return (td.mu + td.sigma * eps[0]) * 1.3 + (bu.mu + bu.sigma * eps[1]) * 0.7

    return finite_difference_check(f, params, tolerance=GRAD_TOL, nonsmooth=True,
                                   rng=np.random.default_rng(seed))


def _total_loss_report(seed):
    rng = np.random.default_rng(seed)
    samples = [random_sample(rng, n=2, c=8, h=4, w=4, identifier=f"g{i}") for i in range(2)]
    cfg = ModelConfig(channels=8, use_cfi=True, num_layers=1, num_heads=2)
    params = init_model(cfg, seed)
    params["cfi.ext.w"] = Tensor(rng.normal(size=8) * 0.3)
    checked = {k: v for k, v in params.items() if k.startswith(("gsi.", "cfi.ext."))}
    tc = TrainConfig()

    def f(p):
        return batch_loss(samples, {**params, **p}, cfg, tc, np.random.default_rng(seed))[0]

    return finite_difference_check(f, checked, tolerance=GRAD_TOL, max_coords=4, nonsmooth=True,
                                   rng=np.random.default_rng(seed))


def test_criterion_1_gradient_suite():
    with criterion(1, "gradient suite at <= 1e-4 over 20 seeds per op, < 60 s") as info:
        start = time.perf_counter()
        worst, skipped, checked = 0.0, 0, 0
        for name, fn in sorted(OPS.items()):
            for seed in SEEDS:
                x = np.random.default_rng(seed).uniform(-2, 2, size=6)
                rep = finite_difference_check(fn, Tensor(x), tolerance=GRAD_TOL, nonsmooth=True)
                assert rep.passed, f"{name} seed {seed}: {rep.max_rel_error:.2e} at {rep.worst}"
                worst, skipped = max(worst, rep.max_rel_error), skipped + len(rep.skipped)
                checked += rep.coordinates
        for label, make in (("cfi", lambda s: cfi_gradient_report(s, max_coords=4)),
                            ("gsi", _gsi_report), ("total_loss", _total_loss_report)):
            for seed in SEEDS:
                rep = make(seed)
                assert rep.passed, f"{label} seed {seed}: {rep.max_rel_error:.2e} at {rep.worst}"
                worst, skipped = max(worst, rep.max_rel_error), skipped + len(rep.skipped)
                checked += rep.coordinates
        elapsed = time.perf_counter() - start
        assert skipped <= 0.01 * checked, f"{skipped} kink-straddling probes of {checked}"
        assert elapsed < 60, f"took {elapsed:.1f} s"
        info.update(worst=f"{worst:.2e}", coords=checked, kinks=skipped, secs=f"{elapsed:.1f}")


# -- 2. straight-through contract ---------------------------------------------

def test_criterion_2_straight_through():
    with criterion(2, "straight-through one-hot forward and identity Jacobian") as info:
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(1, 12))
            s = rng.random(n)
            lam = straight_through_select(Tensor(s)).data
            expected = np.zeros(n)
            expected[int(np.argmax(s))] = 1.0
            assert np.array_equal(lam, expected)
        worst = 0.0
        for n in range(1, 7):
            s = Tensor(rng.random(n), requires_grad=True)
            jac = np.zeros((n, n))
            for i in range(n):
                s.grad = None
                straight_through_select(s)[i].backward()
                jac[i] = s.grad
            worst = max(worst, float(np.abs(jac - np.eye(n)).max()))
            assert worst <= 1e-12
        info.update(vectors=1000, max_jac_dev=worst)


# -- 3. closed-form oracles -----------------------------------------------------

def _loop_sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def test_criterion_3_closed_form_oracles():
    with criterion(3, "top-down, modulation, assignment, extension, update, blend oracles") as info:
        rng = np.random.default_rng(3)
        worst = 0.0
        for size in range(1, 9):
            for _ in range(5):
                n, c = int(rng.integers(1, 5)), 4
                masks = tuple(BinaryMask(rng.random((size, size)) < 0.5) for _ in range(n))
                emb = rng.normal(size=(n, c))
                scores = rng.random(n)
                trip = InstanceTripletSet(masks, Tensor(emb), scores)

                # top-down extraction: argmax by linear scan, mask times its score
                best = 0
                for j in range(1, n):
                    if scores[j] > scores[best]:
                        best = j
                td = np.zeros((size, size))
                for y in range(size):
                    for x in range(size):
                        td[y, x] = scores[best] if masks[best].bits[y, x] else 0.0
                prob, j = extract_topdown_result(trip)
                assert j == best
                worst = max(worst, float(np.abs(prob.values - td).max()))

                # modulation by scores
                mod = modulate_embeddings(trip).data
                for a in range(n):
                    for k in range(c):
                        worst = max(worst, abs(mod[a, k] - emb[a, k] * scores[a]))

                # instance-to-pixel assignment
                assigned = assign_instances_to_pixels(Tensor(emb), masks).data
                loop = np.zeros((c, size, size))
                for a in range(n):
                    for y in range(size):
                        for x in range(size):
                            if masks[a].bits[y, x]:
                                for k in range(c):
                                    loop[k, y, x] += emb[a, k]
                worst = max(worst, float(np.abs(assigned - loop).max()))

                # extended bottom-up head: zero extension is the base head, bitwise
                pix = rng.normal(size=(c, size, size))
                head = LinearHead(Tensor(rng.normal(size=c)), Tensor([rng.normal()]))
                enhanced = enhance_pixel_embeddings(PixelEmbeddings(Tensor(pix)), Tensor(assigned))
                base = decode_bottomup(PixelEmbeddings(Tensor(pix)), head).values
                assert np.array_equal(decode_enhanced(enhanced, head, Tensor(np.zeros(c))).values,
                                      base)
                ext = rng.normal(size=c)
                got = decode_enhanced(enhanced, head, Tensor(ext)).values
                for y in range(size):
                    for x in range(size):
                        z = float(head.bias.data[0])
                        for k in range(c):
                            z += head.weight.data[k] * pix[k, y, x] + ext[k] * assigned[k, y, x]
                        worst = max(worst, abs(got[y, x] - _loop_sigmoid(z)))

                # top-down update with refined scores, and its differentiable form
                refined = rng.random(n)
                best = 0
                for a in range(1, n):
                    if refined[a] > refined[best]:
                        best = a
                upd, j = update_topdown(trip, refined)
                assert j == best
                loop = np.where(masks[best].bits, refined[best], 0.0)
                worst = max(worst, float(np.abs(upd.values - loop).max()))
                r = Tensor(refined)
                diff = differentiable_topdown(masks, straight_through_select(r), r).data
                assert np.array_equal(diff, upd.values)

                # confidence-weighted blend
                bu = rng.random((size, size))
                a_td, a_bu = rng.random(2)
                fused = blend(upd, ProbabilityMap(bu), a_td, a_bu).data
                for y in range(size):
                    for x in range(size):
                        want = (upd.values[y, x] * a_td + bu[y, x] * a_bu) / 2
                        worst = max(worst, abs(fused[y, x] - want))
        assert worst <= 1e-12, worst
        info.update(max_abs_dev=f"{worst:.1e}")


# -- 4. sampling moments ------------------------------------------------------------

def test_criterion_4_sampling_moments():
    with criterion(4, "reparameterised sampling moments over 1e5 draws") as info:
        rng = np.random.default_rng(4)
        n = 100_000
        for mu, sigma in [(0.7, 0.2), (0.3, 0.05)]:
            dist = PerformanceDistribution(Tensor(mu), Tensor(sigma))
            draws = np.array([float(sample_confidence(dist, "train", rng).data)
                              for _ in range(n)])
            se_mean = sigma / math.sqrt(n)
            se_std = sigma / math.sqrt(2 * (n - 1))
            assert abs(draws.mean() - mu) <= 3 * se_mean, (draws.mean(), mu)
            assert abs(draws.std(ddof=1) - sigma) <= 3 * se_std, (draws.std(ddof=1), sigma)
            info[f"z_mean({mu},{sigma})"] = f"{(draws.mean() - mu) / se_mean:+.2f}"
        dist = PerformanceDistribution(Tensor(0.42), Tensor(0.0))
        assert all(float(sample_confidence(dist, "train", rng).data) == 0.42 for _ in range(100))


# -- 5. safe start ------------------------------------------------------------------

def test_criterion_5_safe_start():
    with criterion(5, "untrained interaction leaves the average baseline unchanged") as info:
        corpus = generate_corpus(100, SceneSpec(), ErrorProfile(), seed=5)
        cfg = ModelConfig()
        params = init_model(cfg, 0)
        assert not np.any(params["cfi.ext.w"].data)
        head = LinearHead(params["bu_head.w"], params["bu_head.b"])
        max_score_dev = 0.0
        for s in corpus:
            out = run_cfi(s.triplet, s.pixel_embeddings, head, params, cfg.interaction)
            max_score_dev = max(max_score_dev,
                                float(np.abs(out.enhanced_scores.data - s.triplet.scores).max()))
            fused = baseline_integrate(out.updated_topdown, out.updated_bottomup, "average")
            assert fused == run_sample(s, "average").fused, s.identifier
        assert max_score_dev <= 1e-12
        info.update(samples=len(corpus), max_score_dev=f"{max_score_dev:.1e}")


# -- 6. ablation ordering -----------------------------------------------------------

@pytest.fixture(scope="module")
def c6():
    start = time.perf_counter()
    corpus = generate_corpus(C6_COUNT, SceneSpec(), ErrorProfile(p_pn=0.3, ip_erosion=0.3),
                             seed=C6_SEED)
    by_id = {s.identifier: s.ground_truth for s in corpus}
    out = {"corpus": corpus, "results": {}, "overall": {}}

    def record(mode, results):
        out["results"][mode] = results
        out["overall"][mode] = corpus_iou((r.fused, by_id[r.identifier]) for r in results)[0]

    for mode in ("intersection", "union", "average"):
        record(mode, run_pipeline(corpus, mode))
    for use_cfi in (False, True):
        cfg = ModelConfig(use_cfi=use_cfi)
        trained = fit(corpus, cfg, C6_TRAIN)
        record(cfg.mode_name, run_pipeline(corpus, cfg.mode_name, trained.params, cfg))
    out["seconds"] = time.perf_counter() - start
    return out


@pytest.mark.slow
def test_criterion_6_ablation_ordering(c6):
    with criterion(6, "intersection < average, gsi >= average + 1 pt, gsi+cfi >= gsi") as info:
        o = c6["overall"]
        info.update({k: f"{v:.4f}" for k, v in o.items()})
        info["iters"] = C6_TRAIN.iterations
        info["secs"] = f"{c6['seconds']:.0f}"
        assert C6_TRAIN.iterations <= 2000
        assert o["intersection"] < o["average"]
        assert o["gsi"] >= o["average"] + 0.01
        assert o["gsi+cfi"] >= o["gsi"]
        assert c6["seconds"] < 15 * 60


# -- 7. error taxonomy recovery ----------------------------------------------------

@pytest.mark.slow
def test_criterion_7_error_taxonomy(c6):
    with criterion(7, "PN rate recovered, eroded maps in IP bin, GSI cuts PN count") as info:
        corpus = generate_corpus(600, SceneSpec(), ErrorProfile(p_pn=0.3), seed=7)
        ious = [iou(s.triplet.masks[extract_topdown_result(s.triplet)[1]], s.ground_truth)
                for s in corpus]
        pn_rate = classify_errors(ious).rates["PolarNegative"]
        assert abs(pn_rate - 0.3) <= 0.05, pn_rate

        corpus = generate_corpus(500, SceneSpec(), ErrorProfile(ip_erosion=0.3, map_noise=0.0),
                                 seed=7)
        bu = [iou(binarize(s.bottom_up_map), s.ground_truth) for s in corpus]
        counts = classify_errors(bu).counts
        assert counts["InferiorPositive"] == len(bu), counts

        gsi = c6["results"]["gsi"]
        pn_fused = classify_errors([r.iou_fused for r in gsi]).counts["PolarNegative"]
        pn_td = classify_errors([r.iou_topdown for r in gsi]).counts["PolarNegative"]
        assert pn_fused < pn_td, (pn_fused, pn_td)
        info.update(pn_rate=f"{pn_rate:.3f}", bu_ip=f"{len(bu)}/{len(bu)}",
                    pn_topdown=pn_td, pn_gsi=pn_fused)


# -- 8. metric oracles -------------------------------------------------------------

def _m(rows):
    return BinaryMask(np.array(rows, bool))


def test_criterion_8_metric_oracles():
    with criterion(8, "metric worked examples and KDE oracle") as info:
        a = _m([[1, 1], [0, 0]])
        assert iou(a, a) == 1.0 and iou(a, _m([[0, 0], [1, 1]])) == 0.0
        assert iou(_m([[0, 1, 1, 1, 1]]), _m([[1, 1, 1, 0, 0]])) == 0.4
        assert corpus_iou([(a, a), (a, a)]) == (1.0, 1.0)
        assert corpus_iou([(_m([[1, 1, 0, 0]]), _m([[1, 1, 0, 0]])),
                           (_m([[1, 0, 0, 0]]), _m([[0, 1, 0, 0]]))]) == (0.5, 0.5)
        assert corpus_iou([(_m([[1, 1, 0, 0]]), _m([[1, 1, 0, 0]])),
                           (_m([[1, 1, 0, 0]]), _m([[0, 0, 1, 1]]))]) == (2 / 6, 0.5)
        assert classify_errors([0.0]).counts["PolarNegative"] == 1
        assert classify_errors([0.65]).counts["InferiorPositive"] == 1
        assert set(classify_errors([0.05, 0.3, 0.6, 0.9]).counts.values()) == {1}
        assert mutually_exclusive_rate([0.9], [0.9]) == 0.0
        assert mutually_exclusive_rate([0.9, 0.1], [0.1, 0.9]) == 1.0
        assert mutually_exclusive_rate([0.9, 0.9, 0.1, 0.1], [0.9, 0.1, 0.9, 0.1]) == 0.5

        g = np.linspace(0, 1, 257)
        worst = 0.0
        for points, h in [([0.5], 0.1), ([0.2, 0.7], 0.07), ([0.0, 0.4, 0.95], 0.03)]:
            _, dens = kde_curve(points, bandwidth=h, grid=g)
            oracle = np.array([
                sum(math.exp(-0.5 * ((t - p) / h) ** 2) for p in points)
                / (len(points) * h * math.sqrt(2 * math.pi)) for t in g])
            worst = max(worst, float(np.abs(dens - oracle).max()))
        assert worst <= 1e-10, worst
        wide = np.linspace(-2, 3, 20001)
        _, dens = kde_curve(np.random.default_rng(8).random(200), grid=wide)
        mass = float(np.trapezoid(dens, wide))
        assert abs(mass - 1.0) <= 1e-2, mass
        info.update(kde_dev=f"{worst:.1e}", kde_mass=f"{mass:.6f}")


# -- 9. determinism and persistence -------------------------------------------------

def test_criterion_9_determinism_and_persistence():
    with criterion(9, "bytewise-identical corpora, checkpoints and reports; exact round trips"):
        spec, profile = SceneSpec(height=16, width=16, embedding_dim=8), ErrorProfile()
        dump = dumps_corpus(generate_corpus(30, spec, profile, seed=9))
        assert dump == dumps_corpus(generate_corpus(30, spec, profile, seed=9))
        corpus = loads_corpus(dump)
        assert dumps_corpus(corpus) == dump

        cfg = ModelConfig(channels=8)
        tc = TrainConfig(learning_rate=1e-3, iterations=4, batch_size=4, seed=9)
        first = dumps_checkpoint(fit(corpus, cfg, tc).params, cfg, tc)
        assert first == dumps_checkpoint(fit(corpus, cfg, tc).params, cfg, tc)
        params, cfg2, tc2 = loads_checkpoint(first)
        assert dumps_checkpoint(params, cfg2, tc2) == first

        reports = []
        for _ in range(2):
            results = run_pipeline(corpus, cfg.mode_name, params, cfg2)
            reports.append(dumps_report(evaluation_report(results, corpus, cfg.mode_name)))
        assert reports[0] == reports[1]
