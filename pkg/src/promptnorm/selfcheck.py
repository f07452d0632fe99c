"""Fast gradient and invariant checks behind ``promptnorm selfcheck``."""

from __future__ import annotations

import math
import tempfile
from collections.abc import Callable
from pathlib import Path

import numpy as np

from promptnorm import autodiff as ad
from promptnorm.encoders import build_encoders, encode_images, encode_texts, generate_task
from promptnorm.losses import (AlphaVector, OmegaSchedule, PredictionMatrix, PUNConfig,
                               ce_loss, omega_at_epoch, pan_alphas, pan_loss,
                               prediction_probabilities, pun_loss, total_loss)
from promptnorm.persist import Checkpoint, load_checkpoint, save_checkpoint
from promptnorm.prompt import SoftPrompt, prompt_norms, replace, rescale
from promptnorm.rng import stream

Check = Callable[[], tuple[bool, str]]


def _rng(i: int = 0) -> np.random.Generator:
    return stream(0, "selfcheck", i)


def check_primitive_gradients() -> tuple[bool, str]:
    rng = _rng(1)
    A = rng.uniform(-2, 2, (3, 4))
    B = rng.uniform(-2, 2, (4, 2))
    w = rng.uniform(-2, 2, 5)
    fns = {
        "matmul": (lambda x: ad.sum(ad.tanh(ad.matmul(x, B))), A),
        "pnorm-two": (lambda x: ad.vector_pnorm(x, "two"), w),
        "cosine": (lambda x: ad.cosine_similarity(x, ad.Tensor(w[::-1].copy())), w),
        "softmax": (lambda x: ad.dot(ad.softmax(x), ad.Tensor(np.arange(5.0))), w),
        "cross-entropy": (lambda x: ad.cross_entropy(x, [0, 3, 1]), A),
    }
    worst = {k: ad.finite_difference_check(f, x) for k, (f, x) in fns.items()}
    name, err = max(worst.items(), key=lambda kv: kv[1])
    return err <= 1e-6, f"max rel err {err:.2e} ({name})"


def check_loss_gradients() -> tuple[bool, str]:
    enc = build_encoders(3, 6, 8, 5, 10)
    task = generate_task(3, C=3, D=8, Dx=5, shots=2)
    f = encode_images(enc, task.train_x)
    V0 = _rng(2).uniform(-2, 2, (6, 8))
    alphas = AlphaVector((2, 5), (1.5, 1.5))
    errs = [
        ad.finite_difference_check(
            lambda v: ce_loss(f, encode_texts(enc, v, task.class_embeddings), task.train_y, 1.0),
            V0),
        ad.finite_difference_check(lambda v: pun_loss(v, PUNConfig(2.0, "two")), V0),
        ad.finite_difference_check(lambda v: pan_loss(v, alphas, "two"), V0),
    ]
    return max(errs) <= 1e-6, f"max rel err {max(errs):.2e}"


def check_softmax() -> tuple[bool, str]:
    x = _rng(3).uniform(-5, 5, 7)
    s = ad.softmax(x).data
    shifted = ad.softmax(x + 3.25).data
    ok = abs(s.sum() - 1) <= 1e-12 and np.max(np.abs(s - shifted)) <= 1e-12
    return ok, f"sum-1 = {s.sum() - 1:.1e}"


def check_homogeneity() -> tuple[bool, str]:
    v = _rng(4).uniform(-2, 2, 6)
    worst = 0.0
    for p in ("one", "two", "inf"):
        for s in (-3.0, 0.5, 7.0):
            lhs = ad.vector_pnorm(v * s, p).item()
            rhs = abs(s) * ad.vector_pnorm(v, p).item()
            worst = max(worst, abs(lhs - rhs))
    return worst <= 1e-12, f"max deviation {worst:.1e}"


def check_tape_replay() -> tuple[bool, str]:
    tape = ad.GradientTape()
    v = tape.watch(_rng(5).uniform(-2, 2, (4, 3)))
    loss = pun_loss(v, PUNConfig(1.0))
    g1 = ad.backward(tape, loss)[v].data
    g2 = ad.backward(tape, loss)[v].data
    return g1.tobytes() == g2.tobytes(), "two sweeps bitwise equal"


def check_pun_closed_form() -> tuple[bool, str]:
    V = _rng(6).uniform(-2, 2, (5, 4))
    omega = 3.0
    tape = ad.GradientTape()
    v = tape.watch(V)
    g = ad.backward(tape, pun_loss(v, PUNConfig(omega)))[v].data
    expected = omega / 5 * V / np.linalg.norm(V, axis=1, keepdims=True)
    err = float(np.max(np.abs(g - expected)))
    return err <= 1e-9, f"max deviation {err:.1e}"


def check_alpha_selection() -> tuple[bool, str]:
    rng = _rng(7)
    for _ in range(200):
        n, b, c = rng.integers(1, 5), rng.integers(1, 12), rng.integers(2, 5)
        preds = rng.integers(0, c, size=(n + 1, b))
        labels = rng.integers(0, c, size=b)
        positions = tuple(int(p) + 1 for p in rng.choice(16, size=n, replace=False))
        got = pan_alphas(PredictionMatrix(preds, positions), labels, 2.0)
        base = sum(int(preds[0, i] == labels[i]) for i in range(b))
        want = tuple(2.0 if sum(int(preds[k, i] == labels[i]) for i in range(b)) > base else 0.0
                     for k in range(1, n + 1))
        if got.values != want:
            return False, f"mismatch on {preds.tolist()}"
    return True, "200 random matrices agree with recount"


def check_corruptions() -> tuple[bool, str]:
    P = SoftPrompt(_rng(8).uniform(-1, 1, (6, 4)))
    same = rescale(P, 3, 1.0)
    zeroed = replace(P, 2, 0.0, 0.0, _rng(9))
    scaled = rescale(P, 4, -2.5)
    homo = abs(prompt_norms(scaled).per_position[3] - 2.5 * prompt_norms(P).per_position[3])
    others = all(np.array_equal(np.delete(x.rows, j - 1, 0), np.delete(P.rows, j - 1, 0))
                 for x, j in ((zeroed, 2), (scaled, 4)))
    ok = same.equals(P) and prompt_norms(zeroed).per_position[1] == 0.0 and homo <= 1e-12 \
        and others
    return ok, "identity, zero-row, homogeneity, locality"


def check_rescale_identity_predictions() -> tuple[bool, str]:
    enc = build_encoders(1)
    task = generate_task(1)
    P = SoftPrompt(_rng(10).normal(0, 0.3, (16, 32)))
    f = encode_images(enc, task.test_x)
    p0 = prediction_probabilities(f, encode_texts(enc, P.rows, task.class_embeddings).data, 0.07)
    p1 = prediction_probabilities(
        f, encode_texts(enc, rescale(P, 7, 1.0).rows, task.class_embeddings).data, 0.07)
    err = float(np.max(np.abs(p0 - p1)))
    return err <= 1e-12, f"max deviation {err:.1e}"


def check_uniform_ce() -> tuple[bool, str]:
    f = np.ones((4, 3))
    g = np.ones((5, 3))
    loss = ce_loss(f, g, [0, 1, 2, 4], 0.07).item()
    err = abs(loss - 4 * math.log(5))
    return err <= 1e-12, f"|loss - B ln C| = {err:.1e}"


def check_schedule() -> tuple[bool, str]:
    sched = OmegaSchedule(0.2, 200, True)
    vals = [omega_at_epoch(e, sched) for e in range(201)]
    ok = vals[100] == 0.5 and all(a > b for a, b in zip(vals, vals[1:]))
    return ok, f"midpoint {vals[100]}, strictly decreasing over 0..200"


def check_total_loss_endpoints() -> tuple[bool, str]:
    tape = ad.GradientTape()
    v = tape.watch(_rng(11).uniform(-1, 1, (4, 3)))
    ce = ad.sum(ad.tanh(v))
    pun = pun_loss(v, PUNConfig(1.0))
    a = total_loss(ce, pun, ad.scale(ad.sum(v), 5.0), 1.0).item()
    b = total_loss(ce, pun, ad.scale(ad.sum(v), -9.0), 1.0).item()
    return a == b, "beta=1 ignores the PAN term"


def check_checkpoint_round_trip() -> tuple[bool, str]:
    P = SoftPrompt(_rng(12).normal(0, 1, (16, 32)) * 10.0 ** _rng(13).integers(-30, 30, (16, 32)))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "ckpt.json"
        save_checkpoint(path, Checkpoint(P, 1, 2, 3, "pun"))
        back = load_checkpoint(path)
    return back.prompt.equals(P), "bitwise round trip"


CHECKS: dict[str, Check] = {
    "primitive-gradients": check_primitive_gradients,
    "loss-gradients": check_loss_gradients,
    "softmax-normalization": check_softmax,
    "pnorm-homogeneity": check_homogeneity,
    "tape-replay": check_tape_replay,
    "pun-closed-form": check_pun_closed_form,
    "alpha-selection": check_alpha_selection,
    "corruption-identities": check_corruptions,
    "rescale-identity-predictions": check_rescale_identity_predictions,
    "uniform-cross-entropy": check_uniform_ce,
    "omega-schedule": check_schedule,
    "total-loss-endpoints": check_total_loss_endpoints,
    "checkpoint-round-trip": check_checkpoint_round_trip,
}


def run_all(echo: Callable[[str], None] = print) -> bool:
    all_ok = True
    for name, check in CHECKS.items():
        try:
            ok, detail = check()
        except Exception as exc:  # noqa: BLE001 - a crashing check is a failing check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        all_ok &= ok
        echo(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return all_ok
