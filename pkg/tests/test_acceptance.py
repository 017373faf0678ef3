"""Acceptance criteria, one test (and one summary line) per criterion.

Run ``pytest tests/test_acceptance.py -v`` for the summary block, or run this
file directly to print the lines without pytest.
"""
import math
import os
import time

import numpy as np
import pytest
import torch

from dmmi.checkpoint import model_tensors
from dmmi.config import tiny_config
from dmmi.gradcheck import model_gradcheck, tiny_setup
from dmmi.losses import loss_ce, loss_con, loss_sim
from dmmi.mba import MBA, baseline_cross_attention
from dmmi.metrics import evaluate
from dmmi.synthetic import generate_split
from dmmi.text import template_vocab
from dmmi.training import Dataset, Trainer, evaluate_model, loss_is_finite

from learning import ablation_study, learning_run


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


# ---- 1: MBA vs naive loops -----------------------------------------------------

def _np_linear(layer, x):
    return layer.weight.detach().numpy() @ x + layer.bias.detach().numpy()


def _np_softmax(z, valid):
    out = np.zeros_like(z)
    if valid.any():
        m = z[valid].max()
        ez = np.exp(z[valid] - m)
        out[valid] = ez / ez.sum()
    return out


def naive_mba(m: MBA, v, e, valid):
    """Direct per-pixel / per-token loops over windows, runs and keys."""
    c, h, w = v.shape
    L = e.shape[0]
    d = m.attn_dim
    q_img = {(y, x): _np_linear(m.q_img, v[:, y, x]) for y in range(h) for x in range(w)}
    k_txt = [_np_linear(m.k_txt, e[l]) for l in range(L)]
    q_txt = [_np_linear(m.q_txt, e[l]) for l in range(L)]
    k_img = {(y, x): _np_linear(m.k_img, v[:, y, x]) for y in range(h) for x in range(w)}
    val_txt = [_np_linear(m.v_txt, e[l]) for l in range(L)]
    val_img = {(y, x): _np_linear(m.v_img, v[:, y, x]) for y in range(h) for x in range(w)}
    lam_i = m.lambda_img.detach().numpy()
    lam_t = m.lambda_txt.detach().numpy()

    v_out = v.copy()
    g_v = m.gamma_v.detach().numpy()
    for y in range(h):
        for x in range(w):
            weights = np.zeros(L)
            for lam, r in zip(lam_i, m.region_sizes):
                logits = np.zeros(L)
                for yy in range(y - r // 2, y + r // 2 + 1):
                    for xx in range(x - r // 2, x + r // 2 + 1):
                        if 0 <= yy < h and 0 <= xx < w:
                            for l in range(L):
                                logits[l] += float(np.dot(q_img[yy, xx], k_txt[l])) / math.sqrt(d)
                weights += lam * _np_softmax(logits, valid)
            align = sum(weights[l] * val_txt[l] for l in range(L))
            v_out[:, y, x] += g_v * align

    e_out = e.copy()
    g_e = m.gamma_e.detach().numpy()
    pixels = [(y, x) for y in range(h) for x in range(w)]
    for i in range(L):
        weights = np.zeros(len(pixels))
        for lam, r in zip(lam_t, m.run_lengths):
            logits = np.zeros(len(pixels))
            for j in range(i, min(i + r, L)):
                if valid[j]:
                    for n, p in enumerate(pixels):
                        logits[n] += float(np.dot(q_txt[j], k_img[p])) / math.sqrt(d)
            weights += lam * _np_softmax(logits, np.ones(len(pixels), bool))
        align = sum(weights[n] * val_img[p] for n, p in enumerate(pixels))
        e_out[i] += g_e * align
    return v_out, e_out


def criterion_1(n_instances=100):
    rng = np.random.default_rng(2024)
    worst = 0.0
    start = time.perf_counter()
    for _ in range(n_instances):
        h, w = (int(s) for s in rng.integers(1, 5, size=2))
        L = int(rng.integers(1, 9))
        n_valid = int(rng.integers(1, L + 1))
        c, ct, d = (int(s) for s in rng.integers(1, 9, size=3))
        torch.manual_seed(int(rng.integers(1 << 30)))
        m = MBA(c, ct, d)
        with torch.no_grad():
            for p in (m.lambda_img, m.lambda_txt, m.gamma_v, m.gamma_e):
                p.copy_(torch.from_numpy(rng.normal(size=p.shape)))
        v = rng.normal(size=(c, h, w))
        e = rng.normal(size=(L, ct))
        valid = np.arange(L) < n_valid
        with torch.no_grad():
            vs, es = m(torch.from_numpy(v)[None], torch.from_numpy(e)[None], torch.from_numpy(valid)[None])
        rv, re_ = naive_mba(m, v, e, valid)
        worst = max(worst, np.abs(vs[0].numpy() - rv).max(), np.abs(es[0].numpy() - re_).max())
    elapsed = time.perf_counter() - start
    return worst < 1e-6 and elapsed < 10, f"{n_instances} instances, max |diff| {worst:.2e} (< 1e-6), {elapsed:.1f}s (< 10s)"


def test_criterion_1_mba_oracle(float64, acceptance_line):
    ok, detail = criterion_1()
    assert acceptance_line(1, ok, detail), detail


# ---- 2: single-scale reduction ---------------------------------------------------

def criterion_2():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        h, w, L = 3, 4, 6
        torch.manual_seed(int(rng.integers(1 << 30)))
        m = MBA(5, 6, 4)
        with torch.no_grad():
            m.lambda_img.copy_(torch.tensor([1.0, 0.0, 0.0]))
            m.gamma_v.fill_(1.0)
        v = torch.from_numpy(rng.normal(size=(1, 5, h, w)))
        e = torch.from_numpy(rng.normal(size=(1, L, 6)))
        valid = torch.arange(L)[None] < int(rng.integers(1, L + 1))
        with torch.no_grad():
            v_out, _ = m(v, e, valid)
            base = baseline_cross_attention(v, e, valid, m.q_img, m.k_txt, m.v_txt)
        worst = max(worst, (v_out - v - base).abs().max().item())
    return worst <= 1e-12, f"max |MBA(r=1, lambda=[1,0,0]) - baseline| {worst:.1e} (<= 1e-12)"


def test_criterion_2_single_scale_reduction(float64, acceptance_line):
    ok, detail = criterion_2()
    assert acceptance_line(2, ok, detail), detail


# ---- 3: gradient check -------------------------------------------------------------

def criterion_3():
    start = time.perf_counter()
    report = model_gradcheck()
    elapsed = time.perf_counter() - start
    worst_name = max(report, key=report.get)
    worst = report[worst_name]
    ok = worst < 1e-3 and elapsed < 120
    return ok, (f"{len(report)} parameter groups, max rel err {worst:.1e} ({worst_name}) (< 1e-3), "
                f"{elapsed:.0f}s (< 120s)")


def test_criterion_3_gradient_check(acceptance_line):
    ok, detail = criterion_3()
    assert acceptance_line(3, ok, detail), detail


# ---- 4: stop-gradient and delta gating ---------------------------------------------

def criterion_4():
    cfg, model, batch = tiny_setup()
    delta = batch.delta
    assert delta[-1] == 0 and delta[0] == 1
    out = model(batch.images, batch.ids, batch.valid, erased_ids=batch.erased_ids)
    out.e_hat.retain_grad()
    # E*4 also conditions E-hat through the decoder (V_g), which is a live path.
    # The stop-gradient concerns the target argument, so that argument is a
    # separate leaf here.
    target = out.e4.detach().clone().requires_grad_(True)
    l_sim = loss_sim(out.e_hat, target, batch.valid, delta)
    l_sim.backward(retain_graph=True)
    e4_grad_zero = target.grad is None or bool(torch.all(target.grad == 0))
    zero_row_grad = bool(torch.all(out.e_hat.grad[-1] == 0))

    # value: dropping the delta=0 sample's term changes nothing
    keep = delta == 1
    l_only = loss_sim(out.e_hat[keep], out.e4[keep], batch.valid[keep], delta[keep]) * keep.sum() / len(delta)
    value_ok = abs(l_sim.item() - l_only.item()) < 1e-12

    # contrastive numerators: perturbing a delta=0 sample's own pair moves only denominators
    v_o = out.pooled.v_o.detach().clone().requires_grad_(True)
    e_o = out.pooled.e_o.detach().clone().requires_grad_(True)
    con_zero = loss_con(v_o, e_o, torch.zeros_like(delta), cfg.tau)
    sims = v_o @ e_o.T / cfg.tau
    direct = -(delta * (torch.diagonal(torch.log_softmax(sims, 1)) +
                        torch.diagonal(torch.log_softmax(sims, 0)))).sum() / len(delta)
    con = loss_con(v_o, e_o, delta, cfg.tau)
    con_ok = con_zero.item() == 0 and abs(con.item() - direct.item()) < 1e-12
    con_zero.backward()
    con_grad_ok = bool(torch.all(v_o.grad == 0) and torch.all(e_o.grad == 0))
    ok = e4_grad_zero and zero_row_grad and value_ok and con_ok and con_grad_ok
    return ok, (f"dL_sim/dE*4 == 0: {e4_grad_zero}; delta=0 row grad == 0: {zero_row_grad}; "
                f"delta=0 value share == 0: {value_ok}; numerators gated: {con_ok and con_grad_ok}")


def test_criterion_4_detach_and_delta(float64, acceptance_line):
    ok, detail = criterion_4()
    assert acceptance_line(4, ok, detail), detail


# ---- 5: loss identities --------------------------------------------------------------

def criterion_5():
    ce = loss_ce(torch.zeros(2, 2, 5, 5), torch.randint(0, 2, (2, 5, 5))).item()
    e = torch.randn(3, 7, 16)
    valid = torch.arange(7)[None].expand(3, -1) < torch.tensor([[3], [7], [5]])
    sim = loss_sim(e, e, valid, [1, 1, 1]).item()
    u = torch.nn.functional.normalize(torch.randn(1, 8), dim=-1)
    con1 = loss_con(u, torch.nn.functional.normalize(torch.randn(1, 8), dim=-1), [1]).item()
    con2 = loss_con(torch.eye(2), torch.eye(2), [1, 1], tau=1.0).item()
    target = 2 * math.log(1 + math.exp(-1))
    ok = (abs(ce - math.log(2)) <= 1e-6 and abs(sim) <= 1e-12 and abs(con1) <= 1e-12
          and abs(con2 - target) <= 1e-6)
    return ok, (f"CE {ce:.7f} vs ln2; L_sim(E,E) {sim:.1e}; L_con(B=1) {con1:.1e}; "
                f"L_con(I, tau=1) {con2:.7f} vs {target:.7f}")


def test_criterion_5_loss_identities(float64, acceptance_line):
    ok, detail = criterion_5()
    assert acceptance_line(5, ok, detail), detail


# ---- 6: metric oracle ------------------------------------------------------------------

def criterion_6(n_pairs=1000):
    from fractions import Fraction
    rng = np.random.default_rng(6)
    preds, gts, settings = [], [], []
    for _ in range(n_pairs):
        h, w = (int(s) for s in rng.integers(1, 7, size=2))
        setting = ["one_to_one", "one_to_many", "one_to_zero"][int(rng.integers(3))]
        p = rng.random((h, w)) < rng.random()
        g = np.zeros((h, w), bool) if setting == "one_to_zero" else rng.random((h, w)) < rng.random()
        if setting != "one_to_zero" and not g.any():
            g[int(rng.integers(h)), int(rng.integers(w))] = True
        preds.append(p)
        gts.append(g)
        settings.append(setting)
    rep = evaluate(preds, gts, settings)
    inter = union = hits = zeros = 0
    ious = []
    for p, g, s in zip(preds, gts, settings):
        if s == "one_to_zero":
            zeros += 1
            hits += int(sum(int(x) for x in p.flat) == 0)
            continue
        i = sum(1 for a, b in zip(p.flat, g.flat) if a and b)
        u = sum(1 for a, b in zip(p.flat, g.flat) if a or b)
        inter, union = inter + i, union + u
        ious.append(Fraction(i, u))
    ref_prec = {x: float(Fraction(sum(v > Fraction(str(x)) for v in ious), len(ious))) for x in (0.5, 0.7, 0.9)}
    exact = (rep.oiou == float(Fraction(inter, union)) and rep.miou == float(sum(ious) / len(ious))
             and rep.prec == ref_prec and rep.acc == float(Fraction(hits, zeros)))
    g8 = np.zeros((2, 8), bool)
    g8[0] = True
    p1 = np.zeros((2, 8), bool)
    p1[0, 4:] = True
    p1[1, :4] = True
    hand = evaluate([p1, g8], [g8, g8], ["one_to_one", "one_to_one"])
    hand_ok = abs(hand.oiou - 0.6) < 1e-12 and abs(hand.miou - 2 / 3) < 1e-12
    return exact and hand_ok, (f"{n_pairs} random pairs exact: {exact}; hand case oIoU {hand.oiou:.4f} "
                               f"mIoU {hand.miou:.4f}")


def test_criterion_6_metric_oracle(acceptance_line):
    ok, detail = criterion_6()
    assert acceptance_line(6, ok, detail), detail


# ---- 7: end-to-end learning -----------------------------------------------------------

def criterion_7():
    r = learning_run(seed=0)
    rep = r["report"]
    drop = 1 - r["records"][-1]["total"] / r["records"][0]["total"]
    finite = loss_is_finite(r["records"])
    ok = (rep.miou >= 0.60 and rep.acc >= 0.80 and finite and drop >= 0.5
          and r["steps"] <= 5000 and r["train_seconds"] <= 1800)
    return ok, (f"mIoU {rep.miou:.3f} (>= 0.60), acc {rep.acc:.3f} (>= 0.80), oIoU {rep.oiou:.3f}, "
                f"loss drop {drop:.0%} (>= 50%), finite {finite}, {r['steps']} steps in "
                f"{r['train_seconds'] / 60:.1f} min (<= 30)")


training = pytest.mark.skipif(bool(os.environ.get("DMMI_SKIP_TRAINING")),
                              reason="DMMI_SKIP_TRAINING is set")


@training
def test_criterion_7_end_to_end_learning(acceptance_line):
    ok, detail = criterion_7()
    assert acceptance_line(7, ok, detail), detail


# ---- 8: ablation direction (soft) ----------------------------------------------------------

def criterion_8():
    res = ablation_study()
    full, ablated = np.mean(res["full"]), np.mean(res["ablated"])
    return ablated <= full, (f"one-to-zero acc over seeds {res['seeds']}: full {full:.3f} "
                             f"{[round(a, 3) for a in res['full']]}, without L_sim/L_con {ablated:.3f} "
                             f"{[round(a, 3) for a in res['ablated']]} ({res['steps']} steps each; soft)")


@training
def test_criterion_8_ablation_direction(acceptance_line):
    ok, detail = criterion_8()
    acceptance_line(8, ok, detail)
    if not ok:
        pytest.xfail("soft, non-gating criterion: " + detail)


# ---- 9: determinism and resume ---------------------------------------------------------------

def criterion_9(tmp_path):
    vocab = template_vocab()
    cfg = tiny_config(total_steps=10, lr0=1e-3)
    data = Dataset.from_samples(generate_split(cfg.data, "train"), vocab, cfg.max_len)
    a = Trainer(cfg, data, vocab, tmp_path / "a")
    b = Trainer(cfg, data, vocab, tmp_path / "b")
    a.run()
    b.run()
    logs_equal = (tmp_path / "a" / "loss_log.jsonl").read_bytes() == (tmp_path / "b" / "loss_log.jsonl").read_bytes()
    part = Trainer(cfg, data, vocab, tmp_path / "c")
    part.run(until=4)
    ckpt = part.save()
    resumed = Trainer(cfg, data, vocab, tmp_path / "c").resume(ckpt)
    resumed.run()
    ta, tr = model_tensors(a.model), model_tensors(resumed.model)
    params_equal = ta.keys() == tr.keys() and all(np.array_equal(ta[k], tr[k]) for k in ta)
    return logs_equal and params_equal, (f"same-seed loss logs identical: {logs_equal}; "
                                         f"resume at 4/10 == straight run (bitwise, float32): {params_equal}")


def test_criterion_9_determinism_and_resume(tmp_path, acceptance_line):
    ok, detail = criterion_9(tmp_path)
    assert acceptance_line(9, ok, detail), detail


if __name__ == "__main__":
    import tempfile
    torch.set_default_dtype(torch.float64)
    fast = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6]
    for n, fn in enumerate(fast, 1):
        ok, detail = fn()
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}", flush=True)
    torch.set_default_dtype(torch.float32)
    with tempfile.TemporaryDirectory() as d:
        from pathlib import Path
        ok, detail = criterion_9(Path(d))
        print(f"criterion 9: {'PASS' if ok else 'FAIL'}  {detail}", flush=True)
    if not os.environ.get("DMMI_SKIP_TRAINING"):
        for n, fn in ((7, criterion_7), (8, criterion_8)):
            ok, detail = fn()
            print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}", flush=True)
