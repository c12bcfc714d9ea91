"""Acceptance suite: one test per criterion (A1-A8), each recorded as a
PASS/FAIL line in the terminal summary.  Expected values come from the
independent oracles in oracles.py / gradcheck.py."""

import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from promptseg import autodiff as ad
from promptseg.autodiff import Tensor
from promptseg.metrics import (
    _approx_p_two_sided,
    _exact_p_two_sided,
    _signed_ranks,
    dsc,
    nsd,
)
from promptseg.model import MemoryBank, ModelConfig, PromptableNet, load_checkpoint, save_checkpoint
from promptseg.preprocess import (
    enforce_axial_spacing,
    get_preset,
    percentile_bounds,
    percentile_normalize,
    window_ct,
)
from promptseg.propagate import bank_insert, segment_3d
from promptseg.server import create_app
from promptseg.synthetic import ellipsoid_volume, synthetic_cases
from promptseg.training import (
    TrainConfig,
    dice_loss,
    focal_loss,
    overfit_config,
    samples_from_cases,
    fine_tune,
    total_loss,
    train,
)
from promptseg.hitl import AnnotationRound, GroundTruthOracle, run_round
from promptseg.volume import (
    NORMALIZED_0_255,
    BoundingBox2D,
    LabelMask,
    SliceRange,
    VoxelGrid,
    tight_box_2d,
)
from promptseg.volume_io import pack_envelope, read_nifti1, unpack_envelope, write_nifti1
from promptseg.wire import mask_to_wire, wire_to_mask

from conftest import FakeModel, TINY_CONFIG, bright_threshold_logits, record_criterion
from gradcheck import check_grads, numeric_grad, rel_error
from oracles import brute_force_nsd, enumerate_wilcoxon_p, random_mask
from test_autodiff import CASES, INPUTS


def mid_box_prompt(mask: LabelMask):
    """Annotator-style prompt: tight box on the middle nonempty slice plus
    the mask's z extent as the propagation range."""
    zs = np.where(mask.labels.any(axis=(1, 2)))[0]
    z0 = int(zs[zs.size // 2])
    return tight_box_2d(mask.labels[z0], z0), SliceRange(int(zs.min()), int(zs.max()))


def mean_dsc(model, cases):
    scores = []
    for grid, mask, _ in cases:
        box, rng = mid_box_prompt(mask)
        result = segment_3d(grid, box, rng, model)
        scores.append(dsc(result.mask.binary(), mask.binary()))
    return float(np.mean(scores)), scores


@pytest.fixture(scope="session")
def overfit_bundle(tmp_path_factory):
    """Train the toy model from scratch on 5 synthetic volumes (A3 setup);
    A7 reuses the checkpoint as its round-1 model."""
    cases = synthetic_cases(5, seed=42)
    model = PromptableNet(ModelConfig(), seed=1)
    config = overfit_config(seed=3)
    start = time.time()
    train(model, samples_from_cases(cases), config)
    seconds = time.time() - start
    path = tmp_path_factory.mktemp("overfit") / "overfit.ckpt"
    save_checkpoint(model, path)
    return {"model": model, "cases": cases, "seconds": seconds,
            "config": config, "checkpoint": str(path)}


# ---------------------------------------------------------------------------


def test_a1_gradient_integrity():
    start = time.time()
    worst_op = 0.0
    for name in sorted(CASES):
        worst_op = max(worst_op, check_grads(CASES[name], INPUTS[name], tol=1e-5))

    rng = np.random.default_rng(13)
    target = (rng.random((6, 6)) < 0.5).astype(np.uint8)
    worst_loss = max(
        check_grads(lambda x: focal_loss(x, target), (rng.normal(size=(6, 6)),), tol=1e-5),
        check_grads(lambda x: dice_loss(x, target), (rng.normal(size=(6, 6)),), tol=1e-5),
    )

    # full-model spot check: 20 random parameters, float64, 2-frame unroll
    model = PromptableNet(TINY_CONFIG, seed=11)
    for p in model.params.values():
        p.data = p.data.astype(np.float64)
    frames = rng.uniform(0, 255, size=(2, 32, 32))
    targets = np.zeros((2, 32, 32), dtype=np.uint8)
    targets[:, 8:22, 10:24] = 1
    box = BoundingBox2D(0, 8, 6, 26, 24)
    cfg = TrainConfig(iou_weight=0.0)

    def forward_loss():
        bank = MemoryBank(capacity=4)
        logits0, iou0, e0 = model.forward_frame(frames[0], bank, prompt=box, frame_index=0)
        bank_insert(bank, e0)
        logits1, iou1, e1 = model.forward_frame(frames[1], bank, prompt=None, frame_index=1)
        l0, _, _ = total_loss(logits0, targets[0], None, cfg)
        l1, _, _ = total_loss(logits1, targets[1], None, cfg)
        # iou heads against a fixed target (the data-dependent true-IoU
        # constant is a step function of the logits, which central
        # differences cannot see)
        iou_term = ad.add(
            ad.mul(ad.sub(iou0, 0.5), ad.sub(iou0, 0.5)),
            ad.mul(ad.sub(iou1, 0.5), ad.sub(iou1, 0.5)),
        )
        return ad.add(ad.add(l0, l1), iou_term)

    loss = forward_loss()
    ad.backward(loss)
    grads = {n: p.grad.copy() for n, p in model.params.items() if p.grad is not None}
    names = sorted(grads)
    picks = []
    while len(picks) < 20:
        n = names[int(rng.integers(0, len(names)))]
        idx = int(rng.integers(0, model.params[n].data.size))
        picks.append((n, idx))

    worst_model = 0.0
    step = 1e-4
    for n, idx in picks:
        flat = model.params[n].data.reshape(-1)
        orig = flat[idx]
        with ad.no_grad():
            flat[idx] = orig + step
            f_plus = float(forward_loss().data)
            flat[idx] = orig - step
            f_minus = float(forward_loss().data)
        flat[idx] = orig
        numeric = (f_plus - f_minus) / (2 * step)
        analytic = grads[n].reshape(-1)[idx]
        worst_model = max(worst_model, abs(analytic - numeric) / max(1.0, abs(numeric)))

    seconds = time.time() - start
    record_criterion(
        "A1",
        worst_op < 1e-5 and worst_loss < 1e-5 and worst_model < 1e-3 and seconds < 120,
        f"op rel err {worst_op:.2e}, loss {worst_loss:.2e}, "
        f"model 20-param {worst_model:.2e}, {seconds:.0f}s",
    )


def test_a2_metric_oracle_equivalence():
    start = time.time()
    rng = np.random.default_rng(17)
    spacings = [(1, 1, 1), (0.5, 0.75, 2.5), (1.25, 1.0, 3.0), (2.0, 0.5, 1.5)]
    worst_nsd = 0.0
    dsc_exact = True
    for i in range(500):
        p = random_mask(rng, (12, 12, 12), p=float(rng.uniform(0.05, 0.5)))
        r = random_mask(rng, (12, 12, 12), p=float(rng.uniform(0.05, 0.5)))
        spacing = spacings[i % len(spacings)]
        tol = float(rng.uniform(0.5, 4.0))
        ours = nsd(p, r, spacing=spacing, tolerance_mm=tol)
        worst_nsd = max(worst_nsd, abs(ours - brute_force_nsd(p, r, spacing, tol)))
        np_, nr = int(p.sum()), int(r.sum())
        inter = int(np.logical_and(p, r).sum())
        expect = 1.0 if np_ == nr == 0 else (0.0 if np_ == 0 or nr == 0 else 2.0 * inter / (np_ + nr))
        dsc_exact = dsc_exact and dsc(p, r) == expect

    monotone = True
    for _ in range(50):
        p = random_mask(rng, (10, 10, 10), p=0.3)
        r = random_mask(rng, (10, 10, 10), p=0.3)
        scores = [nsd(p, r, spacing=(1, 1, 2), tolerance_mm=t) for t in (0.5, 1, 2, 4, 8)]
        monotone = monotone and all(a <= b + 1e-15 for a, b in zip(scores, scores[1:]))

    seconds = time.time() - start
    record_criterion(
        "A2",
        dsc_exact and worst_nsd <= 1e-12 and monotone and seconds < 300,
        f"500 pairs: dsc exact={dsc_exact}, max |nsd err|={worst_nsd:.1e}, "
        f"monotone={monotone}, {seconds:.0f}s",
    )


def test_a3_end_to_end_overfit(overfit_bundle):
    start = time.time()
    mean, scores = mean_dsc(overfit_bundle["model"], overfit_bundle["cases"])
    seconds = overfit_bundle["seconds"] + (time.time() - start)
    record_criterion(
        "A3",
        mean >= 0.90 and seconds < 900,
        f"mean 3D DSC {mean:.4f} over 5 volumes "
        f"(per-case {[round(s, 3) for s in scores]}), train+eval {seconds:.0f}s",
    )


def test_a4_propagation_invariants(tiny_model):
    rng = np.random.default_rng(19)
    vals = np.clip(rng.uniform(0, 255, size=(9, 32, 32)), 0, 255).astype(np.float32)
    vol = VoxelGrid(vals, (1, 1, 1), NORMALIZED_0_255)
    box = BoundingBox2D(4, 6, 6, 26, 26)
    srange = SliceRange(1, 7)

    a = segment_3d(vol, box, srange, tiny_model)
    b = segment_3d(vol, box, srange, tiny_model)
    deterministic = np.array_equal(a.mask.labels, b.mask.labels)

    rvol = VoxelGrid(vals[::-1].copy(), (1, 1, 1), NORMALIZED_0_255)
    rbox = BoundingBox2D(8 - 4, 6, 6, 26, 26)
    rrange = SliceRange(8 - 7, 8 - 1)
    rev = segment_3d(rvol, rbox, rrange, tiny_model)
    reversal = np.array_equal(a.mask.labels, rev.mask.labels[::-1])

    scribble = np.zeros((32, 32), dtype=np.uint8)
    scribble[1:4, 2:5] = 1
    refined = segment_3d(vol, box, srange, tiny_model, refined_masks={6: scribble})
    verbatim = np.array_equal(refined.mask.labels[6], scribble)

    from promptseg.model import MemoryEntry

    bank = MemoryBank(capacity=8)
    sizes_ok = True
    prompt_kept = True
    for k in range(1, 21):
        entry = MemoryEntry(k - 1, Tensor(np.zeros((4, 2), dtype=np.float32)), k == 1)
        bank_insert(bank, entry)
        sizes_ok = sizes_ok and len(bank) == min(k, 8)
        prompt_kept = prompt_kept and any(
            e.is_prompted and e.frame_index == 0 for e in bank.entries
        )

    record_criterion(
        "A4",
        deterministic and reversal and verbatim and sizes_ok and prompt_kept,
        f"determinism={deterministic}, reversal={reversal}, refined-verbatim={verbatim}, "
        f"bank sizes min(k,8)={sizes_ok}, prompt retained={prompt_kept}",
    )


def test_a5_preprocessing_bit_exactness():
    g = VoxelGrid(np.array([[[-160.0, 40.0, 240.0]]], dtype=np.float32), (1, 1, 1))
    out = window_ct(g, get_preset("abdomen")).values.reshape(-1)
    window_ok = out[0] == 0.0 and out[1] == 127.5 and out[2] == 255.0

    rng = np.random.default_rng(23)
    g3, m3 = _pair(rng, nz=12, sz=3.0)
    g1, m1 = _pair(rng, nz=30, sz=1.0)
    keep3 = enforce_axial_spacing(g3, m3)
    to3 = enforce_axial_spacing(g1, m1)
    spacing_ok = (
        keep3[0] is g3 and keep3[1] is m3
        and to3[0].spacing[2] == 3.0 and to3[0].dims[2] == 10
        and to3[1].spacing[2] == 3.0 and to3[1].dims[2] == 10
    )

    worst = 0.0
    for _ in range(100):
        vals = rng.normal(loc=60, scale=45, size=(8, 9, 10)).astype(np.float32)
        grid = VoxelGrid(vals, (1, 1, 1))
        fg = np.sort(vals[vals > 0].astype(np.float64))
        if fg.size < 2:
            continue
        lo_o = _sorted_percentile(fg, 0.5)
        hi_o = _sorted_percentile(fg, 99.5)
        lo, hi = percentile_bounds(grid)
        worst = max(worst, abs(lo - lo_o), abs(hi - hi_o))
        ours = percentile_normalize(grid).values
        expect = (np.clip(vals.astype(np.float64), lo_o, hi_o) - lo_o) / (hi_o - lo_o) * 255.0
        worst = max(worst, float(np.abs(ours - expect).max()))

    record_criterion(
        "A5",
        window_ok and spacing_ok and worst < 1e-9,
        f"abdomen endpoints exact={window_ok}, spacing rule={spacing_ok}, "
        f"percentile max |err|={worst:.1e} over 100 volumes",
    )


def _pair(rng, nz, sz):
    g = VoxelGrid(rng.normal(size=(nz, 6, 6)).astype(np.float32), (1, 1, sz))
    labels = np.zeros((nz, 6, 6), dtype=np.uint8)
    labels[nz // 2, 2:4, 2:4] = 1
    return g, LabelMask(labels, (1, 1, sz))


def _sorted_percentile(sorted_vals, q):
    pos = q / 100.0 * (sorted_vals.size - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, sorted_vals.size - 1)
    frac = pos - lo
    return sorted_vals[lo] * (1 - frac) + sorted_vals[hi] * frac


def test_a6_wilcoxon_correctness():
    rng = np.random.default_rng(29)
    exact_ok = True
    checked = 0
    while checked < 100:
        n = int(rng.integers(5, 13))
        a = rng.normal(size=n)
        if checked % 2:
            b = a - rng.integers(-3, 4, size=n).astype(float)  # integer diffs force ties
        else:
            b = a + rng.normal(size=n)
        d, ranks, w_plus, w_minus = _signed_ranks(a, b)
        if d.size < 5:
            continue
        w = min(w_plus, w_minus)
        exact_ok = exact_ok and abs(
            _exact_p_two_sided(w, ranks) - enumerate_wilcoxon_p(ranks, w)
        ) < 1e-12
        checked += 1

    agree = True
    worst_gap = 0.0
    trials = 0
    while trials < 30:
        a = rng.normal(size=20)
        b = a + rng.normal(scale=0.7, size=20)
        d, ranks, w_plus, w_minus = _signed_ranks(a, b)
        if d.size != 20:
            continue
        w = min(w_plus, w_minus)
        gap = abs(_exact_p_two_sided(w, ranks) - _approx_p_two_sided(w, ranks))
        worst_gap = max(worst_gap, gap)
        agree = agree and gap < 0.01
        trials += 1

    record_criterion(
        "A6",
        exact_ok and agree,
        f"exact==enumeration on 100 samples (n<=12): {exact_ok}; "
        f"exact-vs-approx max gap at n=20: {worst_gap:.4f}",
    )


def test_a7_hitl_loop(overfit_bundle):
    start = time.time()
    model = load_checkpoint(overfit_bundle["checkpoint"])  # private copy
    # dimmer, noisier lesions than the pretraining distribution, so the
    # rounds have real headroom to close
    lesions = synthetic_cases(24, seed=7, fg=130.0, noise=16.0)
    volumes = {f"c{i:02d}": grid for i, (grid, _, _) in enumerate(lesions)}
    truths = {f"c{i:02d}": mask for i, (_, mask, _) in enumerate(lesions)}
    prompts = {}
    for cid in volumes:
        box, _ = mid_box_prompt(truths[cid])
        prompts[cid] = box
    config = overfit_bundle["config"]
    oracle = GroundTruthOracle(truths)

    round_scores = {}
    for round_index in (1, 2, 3):
        mean, _ = mean_dsc(model, lesions)
        round_scores[round_index] = mean
        if round_index == 3:
            break
        rnd = AnnotationRound(round_index, sorted(volumes), model.checkpoint_id)
        accepted = run_round(rnd, volumes, prompts, model, oracle)
        dataset = samples_from_cases(
            [(volumes[cid], accepted[cid], "CT") for cid in sorted(accepted)]
        )
        fine_tune(model, dataset, round_index + 1, config)

    seconds = time.time() - start
    increased = round_scores[3] > round_scores[1]
    record_criterion(
        "A7",
        increased and seconds < 1800,
        f"round-start mean DSC {round_scores[1]:.4f} -> {round_scores[2]:.4f} -> "
        f"{round_scores[3]:.4f} over 24 lesions, {seconds:.0f}s",
    )


# ---------------------------------------------------------------------------
# A8: server protocol


SIZE = 16


def _volume(normalized=True, seed=0, nz=8):
    rng = np.random.default_rng(seed)
    vals = np.clip(rng.normal(40, 5, size=(nz, SIZE, SIZE)), 0, 255).astype(np.float32)
    vals[2:6, 5:11, 4:12] = 215.0
    if not normalized:
        vals = vals * 4.0 - 200.0  # plainly raw HU-ish values
    return VoxelGrid(vals, (1, 1, 1), NORMALIZED_0_255 if normalized else "raw")


ROI = {"start_slice": 1, "end_slice": 6,
       "box": {"slice_index": 4, "x_min": 3, "y_min": 4, "x_max": 13, "y_max": 12}}


def _drive(client, steps):
    """Run a step list against one fresh session; return observed codes."""
    sid = None
    codes = []
    for step in steps:
        if step == "upload":
            resp = client.post("/sessions", content=pack_envelope(_volume()))
            sid = resp.json().get("session_id") if resp.status_code == 201 else sid
        elif step == "upload_raw":
            resp = client.post("/sessions", content=pack_envelope(_volume(normalized=False)))
            sid = resp.json().get("session_id") if resp.status_code == 201 else sid
        elif step == "preprocess":
            resp = client.post(f"/sessions/{sid}/preprocess", json={"preset": "abdomen"})
        elif step == "percentile":
            resp = client.post(f"/sessions/{sid}/preprocess", json={"percentile": True})
        elif step == "roi":
            resp = client.post(f"/sessions/{sid}/roi", json=ROI)
        elif step == "roi_bad_box_slice":
            bad = {**ROI, "box": {**ROI["box"], "slice_index": 7}}
            resp = client.post(f"/sessions/{sid}/roi", json=bad)
        elif step == "roi_box_out_of_bounds":
            bad = {**ROI, "box": {**ROI["box"], "x_max": 99}}
            resp = client.post(f"/sessions/{sid}/roi", json=bad)
        elif step == "middle":
            resp = client.post(f"/sessions/{sid}/segment-middle")
        elif step == "refine":
            mask = np.zeros((SIZE, SIZE), dtype=np.uint8)
            mask[2:6, 2:6] = 1
            resp = client.post(f"/sessions/{sid}/refine",
                               json={"slice_index": 3, "mask": mask_to_wire(mask, (SIZE, SIZE))})
        elif step == "refine_outside":
            mask = np.zeros((SIZE, SIZE), dtype=np.uint8)
            resp = client.post(f"/sessions/{sid}/refine",
                               json={"slice_index": 7, "mask": mask_to_wire(mask, (SIZE, SIZE))})
        elif step == "propagate":
            resp = client.post(f"/sessions/{sid}/propagate")
        elif step == "result":
            resp = client.get(f"/sessions/{sid}/result")
        else:
            raise AssertionError(step)
        codes.append(resp.status_code)
    return codes


LEGAL_PATHS = [
    ["upload", "roi", "middle", "propagate", "result"],
    ["upload_raw", "preprocess", "roi", "middle", "propagate", "result"],
    ["upload_raw", "percentile", "roi", "middle", "propagate", "result"],
    ["upload", "roi", "roi", "middle", "refine", "propagate", "result"],
    ["upload", "roi", "middle", "refine", "propagate", "refine", "propagate", "result"],
    ["upload", "roi", "middle", "propagate", "result", "result"],
]

ILLEGAL_PATHS = [
    (["upload", "propagate"], 409),
    (["upload", "middle"], 409),
    (["upload", "refine"], 409),
    (["upload", "roi", "refine"], 409),
    (["upload", "roi", "propagate"], 409),
    (["upload", "roi", "middle", "roi"], 409),
    (["upload_raw", "preprocess", "preprocess"], 409),
    (["upload", "preprocess"], 409),
    (["upload_raw", "roi", "middle"], 409),
    (["upload", "roi", "middle", "propagate", "preprocess"], 409),
    (["upload", "roi_bad_box_slice"], 422),
    (["upload", "roi_box_out_of_bounds"], 422),
    (["upload", "roi", "middle", "refine_outside"], 422),
    (["upload", "roi", "middle", "result"], 409),
]


def test_a8_server_protocol():
    app = create_app(model=FakeModel(bright_threshold_logits), cache_capacity=2)
    client = TestClient(app)

    legal_ok = True
    for path in LEGAL_PATHS:
        codes = _drive(client, path)
        legal_ok = legal_ok and all(c in (200, 201) for c in codes)

    illegal_ok = True
    for path, expected in ILLEGAL_PATHS:
        codes = _drive(client, path)
        illegal_ok = illegal_ok and all(c in (200, 201) for c in codes[:-1]) and codes[-1] == expected

    # 423: concurrent inference on one session
    import threading

    slow_app = create_app(model=FakeModel(bright_threshold_logits, delay=0.15), cache_capacity=2)
    slow = TestClient(slow_app)
    sid = slow.post("/sessions", content=pack_envelope(_volume())).json()["session_id"]
    slow.post(f"/sessions/{sid}/roi", json=ROI)
    slow.post(f"/sessions/{sid}/segment-middle")
    codes = []
    threads = [
        threading.Thread(target=lambda: codes.append(slow.post(f"/sessions/{sid}/propagate").status_code))
        for _ in range(2)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    lock_ok = sorted(codes) == [200, 423]

    # MRU trace: completion inserts at the front, access promotes
    sids = []
    for _ in range(3):
        s = client.post("/sessions", content=pack_envelope(_volume())).json()["session_id"]
        client.post(f"/sessions/{s}/roi", json=ROI)
        client.post(f"/sessions/{s}/segment-middle")
        client.post(f"/sessions/{s}/propagate")
        sids.append(s)
    a, b, c = sids
    trace_ok = client.get("/admin/cache").json()["order"] == [c, b]
    client.get(f"/sessions/{b}/result")
    trace_ok = trace_ok and client.get("/admin/cache").json()["order"] == [b, c]
    s = client.post("/sessions", content=pack_envelope(_volume())).json()["session_id"]
    client.post(f"/sessions/{s}/roi", json=ROI)
    client.post(f"/sessions/{s}/segment-middle")
    client.post(f"/sessions/{s}/propagate")
    trace_ok = trace_ok and client.get("/admin/cache").json()["order"] == [s, b]
    recompute_ok = client.get(f"/sessions/{a}/result").status_code == 200

    # round-trips: NIfTI and interchange bit-exact
    rng = np.random.default_rng(31)
    rt_ok = True
    for _ in range(20):
        dims = tuple(int(d) for d in rng.integers(1, 17, size=3))
        vals = (rng.normal(size=(dims[2], dims[1], dims[0])) * 500).astype(np.float32)
        g = VoxelGrid(vals, (0.5, 1.0, 3.0))
        back = read_nifti1(write_nifti1(g))
        rt_ok = rt_ok and back.values.tobytes() == g.values.tobytes() and back.spacing == g.spacing
        env = unpack_envelope(pack_envelope(g))
        rt_ok = rt_ok and env.values.tobytes() == g.values.tobytes()
    # RLE wire round-trip over the server path
    mask3d = (rng.random((8, SIZE, SIZE)) < 0.4).astype(np.uint8)
    rt_ok = rt_ok and np.array_equal(wire_to_mask(mask_to_wire(mask3d, (SIZE, SIZE, 8))), mask3d)

    record_criterion(
        "A8",
        legal_ok and illegal_ok and lock_ok and trace_ok and recompute_ok and rt_ok,
        f"{len(LEGAL_PATHS)} legal paths={legal_ok}, {len(ILLEGAL_PATHS)} illegal paths={illegal_ok}, "
        f"in-flight 423={lock_ok}, MRU trace={trace_ok}, recompute={recompute_ok}, round-trips={rt_ok}",
    )
