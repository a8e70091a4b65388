"""Acceptance gate: twelve property checks with pinned tolerances.

One test per criterion, numbered; each records a single PASS/FAIL line
that conftest prints after the pytest summary, then asserts. The light
checks certify numerics against the naive oracles; 9 and 10 run the real
training and evaluation paths on a generated corpus and are the slow part
of the suite (a few minutes and ~15 minutes respectively).
"""

import filecmp
import time

import numpy as np
import pytest

import oracles
from conftest import record_criterion
from suites import run_gradient_suite, run_kernel_suite

from fewseg.checkpoint import load_checkpoint, restore_model, save_checkpoint
from fewseg.config import Config
from fewseg.correlation import TopDownFuse, correlation_maps
from fewseg.data import (Dataset, Episode, SplitConfig,
                         generate_synthetic_dataset, sample_episode)
from fewseg.encoder import ClassEmbeddings, FeaturePyramid
from fewseg.evaluate import evaluate
from fewseg.kernels import resize_map_np
from fewseg.model import FewShotModel, predicted_mask
from fewseg.nn import SGD
from fewseg.prior import prior_mask
from fewseg.prototypes import (EmptyForegroundError, co_triplet_loss,
                               visual_text_align)
from fewseg.tensor import Tensor, add, eps_norm, no_grad
from fewseg.train import train

pytestmark = pytest.mark.acceptance

WINDOWS = ((5, 5), (7, 1), (1, 7))


# ---------------------------------------------------------------------------
# shared corpora and model shells
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def corpus_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_ds")
    generate_synthetic_dataset(root, n_classes=20, per_class=25,
                               resolution=64, seed=0)
    return root


@pytest.fixture(scope="module")
def corpus(corpus_root):
    return Dataset(corpus_root)


@pytest.fixture(scope="module")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_tiny_ds")
    generate_synthetic_dataset(root, n_classes=8, per_class=3, resolution=32,
                               seed=11, embedding_dim=8)
    return root


def _small_config(**over):
    base = dict(image_size=32, channels_low=4, channels_mid=6,
                channels_high=8, n1=1, n2=2, n3=1, d_text=8, d_scale=16,
                ffn_factor=2, n_hyper=5, decoder_width=4)
    base.update(over)
    return Config(**base)


def _toy_episode(rng, size=32, d_text=8):
    """Random images with disk masks; big enough to survive downsampling."""
    yy, xx = np.mgrid[0:size, 0:size]
    mask_q = (((yy - 11) ** 2 + (xx - 13) ** 2) <= 40).astype(np.float64)
    mask_s = (((yy - 19) ** 2 + (xx - 17) ** 2) <= 52).astype(np.float64)
    return Episode(class_id=0, class_name="toy",
                   supports=[(rng.uniform(0, 1, (size, size, 3)), mask_s)],
                   query_image=rng.uniform(0, 1, (size, size, 3)),
                   query_mask=mask_q, text=rng.normal(0.0, 1.0, d_text))


def _pyramid(rng, h=4, w=4, counts=(2, 3, 2), channels=(3, 4, 5)):
    levels = [[Tensor(rng.standard_normal((h, w, c))) for _ in range(n)]
              for n, c in zip(counts, channels)]
    return FeaturePyramid(low=levels[0], mid=levels[1], high=levels[2])


# ---------------------------------------------------------------------------
# 1: forward kernels against the naive-loop oracles
# ---------------------------------------------------------------------------

def test_criterion_1_forward_kernels_match_oracles():
    t0 = time.perf_counter()
    errs = run_kernel_suite(100, np.random.default_rng(101))
    dt = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst <= 1e-5 and dt < 30.0
    record_criterion(1, "forward kernels vs naive oracles", ok,
                     f"100 cases/op, max abs err {worst:.2e}, {dt:.1f}s")
    assert worst <= 1e-5, errs
    assert dt < 30.0


# ---------------------------------------------------------------------------
# 2: analytic gradients against central differences, ops and whole losses
# ---------------------------------------------------------------------------

def _loss_value(model, episode, which):
    with no_grad():
        out = model.forward_episode(episode)
    if which == "co":
        return float(out.loss_co.data)
    if which == "seg":
        return float(out.loss_inter.data) + float(out.loss_final.data)
    return float(out.loss_total.data)


def test_criterion_2_gradients_match_finite_differences():
    t0 = time.perf_counter()
    op_errs = run_gradient_suite(np.random.default_rng(202))
    worst_op = max(op_errs.values())

    # composed losses through the full float64 model, checked at the
    # parameters whose every path to the loss stays on the tape (the
    # prior and correlation channels are constants by design, so encoder
    # weights see them only through off-tape recomputation)
    cfg = _small_config(precision="float64")
    emb = ClassEmbeddings.random(["a", "b"], 8, seed=7)
    model = FewShotModel(cfg, emb, np.random.default_rng(7))
    episode = _toy_episode(np.random.default_rng(22))
    checked = ["align_q.query_proj", "align_q.ffn_w2", "align_s.key_w",
               "tdc.proj_mid_w", "tdc.merge_hi_w",
               "decoder.branch0.a_w", "decoder.trunk.head_w"]
    h = 1e-4
    worst_loss = 0.0
    for which in ("co", "seg", "total"):
        model.zero_grad()
        out = model.forward_episode(episode)
        root = {"co": out.loss_co,
                "seg": add(out.loss_inter, out.loss_final),
                "total": out.loss_total}[which]
        root.backward()
        params = model.named_parameters()
        for name in checked:
            p = params[name]
            flat = p.data.reshape(-1)
            grad = (np.zeros(flat.size) if p.grad is None
                    else p.grad.reshape(-1))
            for idx in np.linspace(0, flat.size - 1, 3).astype(int):
                orig = flat[idx]
                flat[idx] = orig + h
                fp = _loss_value(model, episode, which)
                flat[idx] = orig - h
                fm = _loss_value(model, episode, which)
                flat[idx] = orig
                num = (fp - fm) / (2 * h)
                worst_loss = max(worst_loss,
                                 oracles.rel_err(grad[idx], num))

    dt = time.perf_counter() - t0
    worst = max(worst_op, worst_loss)
    ok = worst <= 1e-4 and dt < 120.0
    record_criterion(2, "gradients vs central differences", ok,
                     f"ops {worst_op:.2e}, losses {worst_loss:.2e}, "
                     f"{dt:.1f}s")
    assert worst_op <= 1e-4, op_errs
    assert worst_loss <= 1e-4
    assert dt < 120.0


# ---------------------------------------------------------------------------
# 3: prior map equals the quadratic brute force; no parameters; scale-free
# ---------------------------------------------------------------------------

def test_criterion_3_prior_map_bruteforce():
    rng = np.random.default_rng(303)
    eps = eps_norm(np.float64)
    worst = 0.0
    for side in (4, 5, 6):
        for _ in range(20):
            sup = rng.standard_normal((side, side, 6))
            qry = rng.standard_normal((side, side, 6))
            mask = rng.random((side, side))
            got = prior_mask(sup, qry, mask, windows=WINDOWS)
            want_mean, want_win = oracles.prior_mask_naive(
                sup, qry, mask, WINDOWS, eps)
            worst = max(worst, float(np.max(np.abs(got.map - want_mean))))
            for g, w_ in zip(got.per_window, want_win):
                worst = max(worst, float(np.max(np.abs(g - w_))))

    import inspect

    import fewseg.prior as prior_module
    parameter_free = "requires_grad" not in inspect.getsource(prior_module)

    sup = rng.standard_normal((6, 6, 6))
    qry = rng.standard_normal((6, 6, 6))
    mask = rng.random((6, 6))
    base = prior_mask(sup, qry, mask, windows=WINDOWS)
    inv = max(float(np.max(np.abs(
        prior_mask(sup * s, qry, mask, windows=WINDOWS).map - base.map)))
        for s in (0.02, 9.0, 400.0))

    ok = worst <= 1e-5 and parameter_free and inv <= 1e-6
    record_criterion(3, "prior map brute force, no params, scale-free", ok,
                     f"oracle {worst:.2e}, scale {inv:.2e}")
    assert worst <= 1e-5
    assert parameter_free
    assert inv <= 1e-6


# ---------------------------------------------------------------------------
# 4: with query == support the prior concentrates on the object
# ---------------------------------------------------------------------------

def test_criterion_4_self_matching_prior_focus(corpus, corpus_root):
    model = FewShotModel(Config(dataset=str(corpus_root)), corpus.embeddings,
                         np.random.default_rng(0))
    rng = np.random.default_rng(404)
    hits = 0
    for _ in range(100):
        ep = sample_episode(corpus, list(range(corpus.n_classes)), 1, rng)
        with no_grad():
            pyr = model.encoder.encode(Tensor(ep.query_image,
                                              dtype=model.dtype))
        pm = prior_mask(pyr.high_top, pyr.high_top, ep.query_mask)
        gt = resize_map_np(ep.query_mask, pm.map.shape) > 0.5
        if gt.any() and (~gt).any() \
                and pm.map[gt].mean() > pm.map[~gt].mean():
            hits += 1
    ok = hits >= 95
    record_criterion(4, "self-matching prior focus", ok, f"{hits}/100")
    assert hits >= 95


# ---------------------------------------------------------------------------
# 5: with shared alignment parameters, swapping branch inputs swaps outputs
# ---------------------------------------------------------------------------

def test_criterion_5_alignment_swap_symmetry():
    cfg = _small_config(share_align_params=True, precision="float64")
    emb = ClassEmbeddings.random(["x", "y"], 8, seed=5)
    model = FewShotModel(cfg, emb, np.random.default_rng(5))
    assert model.align_query is model.align_support

    rng = np.random.default_rng(55)

    def branch_inputs():
        return (Tensor(rng.normal(0, 1, cfg.channels_mid), dtype=np.float64),
                Tensor(rng.normal(0, 1, cfg.d_text), dtype=np.float64),
                Tensor(rng.normal(0, 1, (8, 8, cfg.channels_mid)),
                       dtype=np.float64))

    a, b = branch_inputs(), branch_inputs()
    with no_grad():
        q_aug = visual_text_align(*a, model.align_query)
        s_aug = visual_text_align(*b, model.align_support)
        q_swp = visual_text_align(*b, model.align_query)
        s_swp = visual_text_align(*a, model.align_support)
    worst = max(float(np.max(np.abs(q_aug.data - s_swp.data))),
                float(np.max(np.abs(s_aug.data - q_swp.data))))
    ok = worst <= 1e-6
    record_criterion(5, "alignment swap symmetry (shared params)", ok,
                     f"max dev {worst:.2e}")
    assert worst <= 1e-6


# ---------------------------------------------------------------------------
# 6: triplet loss formula, satisfied margins, collapsed prototypes
# ---------------------------------------------------------------------------

def test_criterion_6_triplet_loss_contract():
    rng = np.random.default_rng(606)
    worst = 0.0
    for _ in range(100):
        vecs = [rng.normal(0.0, 1.0, 5) for _ in range(6)]
        got = float(co_triplet_loss(
            *[Tensor(v, dtype=np.float64) for v in vecs]).data)
        worst = max(worst, abs(got - oracles.co_triplet_naive(*vecs)))

    a = rng.normal(0.0, 1.0, 5)
    nearby = Tensor(a + 1e-3, dtype=np.float64)
    far = Tensor(a + 10.0, dtype=np.float64)
    anchor = Tensor(a, dtype=np.float64)
    satisfied = float(co_triplet_loss(anchor, nearby, far,
                                      anchor, nearby, far).data)
    collapsed = float(co_triplet_loss(
        *[Tensor(a, dtype=np.float64) for _ in range(6)]).data)

    ok = worst <= 1e-6 and satisfied == 0.0 and collapsed == 1.0
    record_criterion(6, "triplet loss oracle, zero and collapsed cases", ok,
                     f"oracle {worst:.2e}, sat {satisfied}, col {collapsed}")
    assert worst <= 1e-6
    assert satisfied == 0.0
    assert collapsed == 1.0


# ---------------------------------------------------------------------------
# 7: correlation maps equal the brute force; 13 maps in, 48 channels out
# ---------------------------------------------------------------------------

def test_criterion_7_correlation_bruteforce_and_census():
    rng = np.random.default_rng(707)
    eps = eps_norm(np.float64)
    worst = 0.0
    for _ in range(20):
        sup, qry = _pyramid(rng), _pyramid(rng)
        fg = rng.random((4, 4)) > 0.5
        stack = correlation_maps(sup, qry, fg)
        for level, sblocks, qblocks in ((stack.low, sup.low, qry.low),
                                        (stack.mid, sup.mid, qry.mid),
                                        (stack.high, sup.high, qry.high)):
            for i, (sb, qb) in enumerate(zip(sblocks, qblocks)):
                want = oracles.correlation_map_naive(qb.data, sb.data, fg,
                                                     eps)
                worst = max(worst,
                            float(np.max(np.abs(level[:, :, i] - want))))

    cfg = Config()
    sup = _pyramid(rng, counts=(cfg.n1, cfg.n2, cfg.n3), channels=(4, 4, 4))
    qry = _pyramid(rng, counts=(cfg.n1, cfg.n2, cfg.n3), channels=(4, 4, 4))
    stack = correlation_maps(sup, qry, np.ones((4, 4), bool))
    fuse = TopDownFuse(np.random.default_rng(77),
                       counts=(cfg.n1, cfg.n2, cfg.n3),
                       out_channels=cfg.n_hyper, dtype=np.float64)
    with no_grad():
        hyper = fuse(stack)

    ok = (worst <= 1e-5 and stack.total_maps == 13
          and hyper.shape[2] == 48 and cfg.n_hyper == 48)
    record_criterion(7, "correlation brute force, 13 maps, 48 channels", ok,
                     f"oracle {worst:.2e}, maps {stack.total_maps}, "
                     f"out {hyper.shape[2]}")
    assert worst <= 1e-5
    assert stack.total_maps == 13
    assert hyper.shape[2] == 48


# ---------------------------------------------------------------------------
# 8: K identical support shots reproduce the 1-shot prediction
# ---------------------------------------------------------------------------

def test_criterion_8_kshot_identity(corpus, corpus_root):
    model = FewShotModel(Config(dataset=str(corpus_root)), corpus.embeddings,
                         np.random.default_rng(8))
    rng = np.random.default_rng(808)
    while True:
        ep = sample_episode(corpus, list(range(corpus.n_classes)), 1, rng)
        ep3 = Episode(class_id=ep.class_id, class_name=ep.class_name,
                      supports=ep.supports * 3, query_image=ep.query_image,
                      query_mask=ep.query_mask, text=ep.text)
        try:
            with no_grad():
                out1 = model.forward_episode(ep, with_loss=False)
                out3 = model.forward_episode(ep3, with_loss=False)
        except EmptyForegroundError:
            continue
        break
    dev = float(np.max(np.abs(out1.predictions.final.data
                              - out3.predictions.final.data)))
    masks_equal = np.array_equal(predicted_mask(out1.predictions),
                                 predicted_mask(out3.predictions))
    ok = dev <= 1e-6 and masks_equal
    record_criterion(8, "three identical shots equal one shot", ok,
                     f"max logit dev {dev:.2e}")
    assert dev <= 1e-6
    assert masks_equal


# ---------------------------------------------------------------------------
# 9: one fixed episode is overfit within 300 steps
# ---------------------------------------------------------------------------

def test_criterion_9_single_episode_overfit(corpus, corpus_root):
    t0 = time.perf_counter()
    cfg = Config(dataset=str(corpus_root))
    model = FewShotModel(cfg, corpus.embeddings,
                         np.random.default_rng(cfg.seed))
    opt = SGD(model.named_parameters(), lr=cfg.lr, momentum=cfg.momentum,
              weight_decay=cfg.weight_decay)
    split = SplitConfig(corpus.n_classes, cfg.n_folds, cfg.test_fold)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 9]))

    episode = initial = None
    while initial is None:
        episode = sample_episode(corpus, split.train_classes(), 1, rng)
        try:
            model.zero_grad()
            out = model.forward_episode(episode)
            initial = float(out.loss_total.data)
        except EmptyForegroundError:
            continue
    out.loss_total.backward()
    opt.step()
    for _ in range(299):
        model.zero_grad()
        out = model.forward_episode(episode)
        out.loss_total.backward()
        opt.step()

    with no_grad():
        out = model.forward_episode(episode)
    final = float(out.loss_total.data)
    drop = 1.0 - final / initial
    iou = oracles.iou_naive(predicted_mask(out.predictions),
                            episode.query_mask > 0.5)
    dt = time.perf_counter() - t0
    ok = drop >= 0.90 and iou >= 0.90 and dt < 300.0
    record_criterion(9, "single-episode overfit in 300 steps", ok,
                     f"loss {initial:.3f}->{final:.4f} ({100 * drop:.1f}%), "
                     f"IoU {iou:.3f}, {dt:.0f}s")
    assert drop >= 0.90, (initial, final)
    assert iou >= 0.90
    assert dt < 300.0


# ---------------------------------------------------------------------------
# 10: training generalizes to held-out classes; ablations do not help
# ---------------------------------------------------------------------------

def test_criterion_10_generalization_and_ablations(corpus, corpus_root,
                                                   tmp_path):
    t0 = time.perf_counter()
    cfg = Config(dataset=str(corpus_root), steps=1000)
    result = train(cfg, tmp_path / "run")
    model, _ = restore_model(load_checkpoint(result.checkpoint_path))
    split = SplitConfig(corpus.n_classes, cfg.n_folds, cfg.test_fold)
    held_out = split.test_classes()
    kw = dict(k=1, rounds=5, episodes_per_round=200, base_seed=cfg.seed)

    trained = evaluate(model, corpus, held_out, **kw)
    baseline_model = FewShotModel(cfg, corpus.embeddings,
                                  np.random.default_rng(cfg.seed))
    baseline = evaluate(baseline_model, corpus, held_out, **kw)
    deltas = {}
    for flag in ("spm", "apa", "tdc"):
        ablated = evaluate(model, corpus, held_out, disable=(flag,), **kw)
        deltas[flag] = ablated.mean_miou - trained.mean_miou

    dt = time.perf_counter() - t0
    margin = trained.mean_miou - baseline.mean_miou
    worst_flag = max(deltas, key=deltas.get)
    ok = (trained.mean_miou >= 0.55 and margin >= 0.10
          and deltas[worst_flag] <= 0.02 and dt < 1800.0)
    record_criterion(10, "held-out generalization and ablation sweep", ok,
                     f"mIoU {trained.mean_miou:.3f}, margin {margin:+.3f}, "
                     f"worst ablation {worst_flag} "
                     f"{deltas[worst_flag]:+.3f}, {dt / 60:.1f}min")
    assert trained.mean_miou >= 0.55
    assert margin >= 0.10
    assert deltas[worst_flag] <= 0.02, deltas
    assert dt < 1800.0


# ---------------------------------------------------------------------------
# 11: checkpoints are bit-exact and resuming reproduces the loss trace
# ---------------------------------------------------------------------------

def test_criterion_11_persistence_roundtrip_and_resume(tiny_root, tmp_path):
    cfg = _small_config(dataset=str(tiny_root), steps=6, checkpoint_every=3,
                        seed=3)
    run_a = tmp_path / "a"
    result = train(cfg, run_a)

    ck = load_checkpoint(result.checkpoint_path)
    resaved = tmp_path / "resaved.symn"
    save_checkpoint(resaved, ck.config, ck.classes, ck.rng_state, ck.step,
                    ck.arrays)
    bit_exact = filecmp.cmp(result.checkpoint_path, resaved, shallow=False)
    ck2 = load_checkpoint(resaved)
    arrays_exact = (set(ck.arrays) == set(ck2.arrays) and all(
        np.array_equal(ck.arrays[k], ck2.arrays[k])
        and ck.arrays[k].dtype == ck2.arrays[k].dtype for k in ck.arrays))

    run_b = tmp_path / "b"
    train(cfg, run_b, resume=run_a / "checkpoint_000003.symn")
    rows_a = (run_a / "train_log.csv").read_text().splitlines()
    rows_b = (run_b / "train_log.csv").read_text().splitlines()
    trace_exact = rows_a[4:] == rows_b[1:] and len(rows_b) == 4

    ok = bit_exact and arrays_exact and trace_exact
    record_criterion(11, "checkpoint round-trip and resume equivalence", ok,
                     f"bytes {bit_exact}, arrays {arrays_exact}, "
                     f"trace {trace_exact}")
    assert bit_exact
    assert arrays_exact
    assert trace_exact


# ---------------------------------------------------------------------------
# 12: identical config and seed give identical metric logs
# ---------------------------------------------------------------------------

def test_criterion_12_determinism(tiny_root, tmp_path):
    cfg = _small_config(dataset=str(tiny_root), steps=10, seed=12)
    res_1 = train(cfg, tmp_path / "r1")
    res_2 = train(cfg, tmp_path / "r2")
    logs_equal = filecmp.cmp(res_1.log_path, res_2.log_path, shallow=False)

    ds = Dataset(tiny_root)
    split = SplitConfig(ds.n_classes, cfg.n_folds, cfg.test_fold)
    reports = []
    for path in (res_1.checkpoint_path, res_2.checkpoint_path):
        model, _ = restore_model(load_checkpoint(path))
        reports.append(evaluate(model, ds, split.test_classes(), k=1,
                                rounds=2, episodes_per_round=5,
                                base_seed=cfg.seed))
    evals_equal = (
        [r.seed for r in reports[0].rounds]
        == [r.seed for r in reports[1].rounds]
        and [repr(r.miou) for r in reports[0].rounds]
        == [repr(r.miou) for r in reports[1].rounds])

    ok = logs_equal and evals_equal
    record_criterion(12, "identical runs produce identical logs", ok,
                     f"train {logs_equal}, eval {evals_equal}")
    assert logs_equal
    assert evals_equal
