"""Acceptance criteria 1-11, one PASS/FAIL line each.

Lines are printed as the tests run and repeated in the pytest terminal
summary (see ``conftest.pytest_terminal_summary``).
"""

import json
import time

import numpy as np
import pytest
import torch
from torch.optim.optimizer import register_optimizer_step_pre_hook

from conftest import make_bundle
from fscil_prompts import (
    ClassRegistry,
    OptimizerConfig,
    RegularizerState,
    alpha,
    build_session_stream,
    compile_plan,
    count_parameters,
    encode_image,
    encode_text,
    finite_difference_check,
    init_prompts,
    summarize,
    synthesize_dataset,
    train_session,
    validate_stream,
)
from fscil_prompts.cli import main
from fscil_prompts.protocol import Session, SessionStream
from oracles import hand_alpha, reference_image_forward, reference_text_forward

RESULTS = []


def verdict(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


PUBLISHED = {
    "cifar100": ([87.83, 85.86, 84.93, 82.85, 82.64, 82.42, 82.27, 81.44, 80.52], 83.42, 7.31),
    "mini_imagenet": ([90.23, 89.56, 87.42, 86.80, 86.51, 85.08, 83.43, 83.38, 82.77], 86.13, 7.46),
    "cub200": ([81.58, 78.52, 76.68, 71.86, 71.52, 70.23, 67.66, 66.52, 65.09, 64.47, 64.60], 70.79, 16.98),
}


def test_01_metric_oracle():
    start = time.perf_counter()
    details, ok = [], True
    for name, (accs, avg, pd) in PUBLISHED.items():
        m = summarize(accs)
        good = abs(m.avg - avg) <= 0.01 and abs(m.pd - pd) <= 0.01
        ok &= good
        details.append(f"{name} Avg {m.avg:.2f} PD {m.pd:.2f}")
    elapsed = time.perf_counter() - start
    verdict(1, ok and elapsed < 1, "; ".join(details) + f" ({elapsed * 1e3:.1f} ms)")


def test_02_parameter_count():
    transformers = pytest.importorskip("transformers")
    start = time.perf_counter()
    bank = init_prompts(2, 12, 512, 768)
    n_prompts, n_proj = bank.prompts.numel(), bank.projection.numel()
    with torch.device("meta"):
        clip = transformers.CLIPModel(transformers.CLIPConfig(vision_config=dict(patch_size=16, image_size=224)))
    from fscil_prompts.adapters import bundle_from_hf_clip

    frozen, learnable, fraction = count_parameters(bundle_from_hf_clip(clip), bank)
    elapsed = time.perf_counter() - start
    ok = (n_prompts, n_proj, learnable) == (12_288, 393_216, 405_504) and fraction < 0.003
    verdict(
        2, ok,
        f"learnable {learnable:,} = {n_prompts:,} + {n_proj:,}; frozen {frozen:,}; "
        f"fraction {100 * fraction:.3f}% ({elapsed:.2f} s, CLIP-B/16 built on the meta device)",
    )


def test_03_gradient_scaling():
    start = time.perf_counter()
    assert alpha(1, RegularizerState([100, 10])) == 10 / 110
    assert alpha(1, RegularizerState([95, 5])) == 5 / 100
    rng = np.random.default_rng(0)
    worst, checks = 0.0, 0
    captured = {}

    def grab_visible(optimizer, args, kwargs):
        captured["visible"] = [p.grad.detach().clone() for g in optimizer.param_groups for p in g["params"]]

    handle = register_optimizer_step_pre_hook(grab_visible)
    try:
        for config in range(20):
            K = int(rng.integers(1, 4))
            d_nlp = int(rng.choice([8, 16]))
            bundle = make_bundle(K=K, d_nlp=d_nlp, d_cv=d_nlp + 8, seed=config).freeze()
            L, D = int(rng.integers(1, 4)), int(rng.integers(1, K + 1))
            counts = [int(rng.integers(4, 9))] + [int(rng.integers(1, 4)) for _ in range(3)]
            names = synthesize_dataset(sum(counts), 1, 16, seed=config).class_names
            registry = ClassRegistry()
            for t, c in enumerate(counts):
                registry.register(names[sum(counts[:t]) : sum(counts[: t + 1])], t)
            for t in (1, 2, 3):
                bank = init_prompts(L, D, bundle.d_nlp, bundle.d_cv, seed=config)
                raw = {}
                hooks = [
                    p.register_hook(lambda g, k=k: raw.__setitem__(k, g.detach().clone()))
                    for k, p in enumerate(bank.parameters())
                ]
                X = torch.randn(4, 3, 16, 16, generator=torch.Generator().manual_seed(config))
                y = torch.as_tensor(rng.integers(0, sum(counts[: t + 1]), size=4))
                a_t = hand_alpha(counts, t)
                # only the first t+1 sessions are in play at session t
                reg = ClassRegistry(registry.entries[: sum(counts[: t + 1])])
                train_session(bundle, bank, reg, X, y, OptimizerConfig(learning_rate=0.1), RegularizerState(counts), t,
                              max_steps=1)
                for h in hooks:
                    h.remove()
                for k, vis in enumerate(captured["visible"]):
                    want = a_t * raw[k]
                    denom = want.abs().clamp_min(1e-30)
                    rel = ((vis - want).abs() / denom)[want != 0]
                    assert torch.all(vis[want == 0] == 0)
                    worst = max(worst, float(rel.max()) if rel.numel() else 0.0)
                checks += 1
    finally:
        handle.remove()
    elapsed = time.perf_counter() - start
    verdict(
        3, worst <= 1e-6 and elapsed < 60,
        f"{checks} (config, session) pairs; max relative deviation from alpha_t x raw = {worst:.2e}; "
        f"alpha(100,10)=10/110, alpha(95,5)=5/100 ({elapsed:.1f} s)",
    )


def test_04_finite_differences(aligned_bundle, small_data):
    start = time.perf_counter()
    names = small_data.class_names[:4]
    idx = np.concatenate([np.flatnonzero(small_data.labels == c)[:2] for c in range(4)])
    bank = init_prompts(2, 2, aligned_bundle.d_nlp, aligned_bundle.d_cv, seed=1)
    err = finite_difference_check(
        aligned_bundle, bank, (small_data.images[idx], small_data.labels[idx], names),
        epsilon=1e-4, sample_size=50, seed=0,
    )
    elapsed = time.perf_counter() - start
    verdict(4, err < 1e-3 and elapsed < 120, f"50 coordinates, eps 1e-4, float64: max relative error {err:.2e} ({elapsed:.1f} s)")


def test_05_frozen_backbone(experiment):
    start = time.perf_counter()
    before = experiment.bundle.weight_checksums()
    cfg = experiment.config
    s = cfg.stream
    stream = build_session_stream(experiment.dataset, s.base_classes, s.way, s.shot, s.sessions, 0)
    from fscil_prompts import PromptTunedClassifier

    init = init_prompts(cfg.L, cfg.D, experiment.bundle.d_nlp, experiment.bundle.d_cv, 0)
    model = PromptTunedClassifier(bundle=experiment.bundle, init_bank=init, random_state=0, **vars(cfg.optimizer))
    names = np.asarray(experiment.dataset.class_names, dtype=object)
    for t, session in enumerate(stream.sessions):
        X, y = experiment.dataset.images[session.train_idx], names[experiment.dataset.labels[session.train_idx]]
        model.fit(X, y) if t == 0 else model.partial_fit(X, y)
    after = experiment.bundle.weight_checksums()
    moved = [n for n, p in (("prompts", model.bank_.prompts), ("projection", model.bank_.projection))
             if not torch.equal(p, getattr(init, n))]
    elapsed = time.perf_counter() - start
    verdict(
        5, before == after and moved == ["prompts", "projection"] and elapsed < 600,
        f"{len(after)} backbone tensors bit-identical after {stream.num_sessions} sessions; "
        f"changed: {', '.join(moved)} ({elapsed:.1f} s)",
    )


def test_06_forward_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    worst = 0.0
    for seed in range(100):
        K = int(rng.integers(1, 5))
        heads = int(rng.choice([1, 2, 4]))
        d_nlp = int(rng.choice([8, 16, 24]))
        d_cv = int(rng.choice([d for d in (16, 24, 32) if d > d_nlp]))
        L, D = int(rng.integers(1, 4)), int(rng.integers(1, K + 1))
        bundle = make_bundle(K=K, d_nlp=d_nlp, d_cv=d_cv, heads=heads, seed=seed).freeze()
        bank = init_prompts(L, D, d_nlp, d_cv, seed=seed)
        tokens = bundle.tokenize(["red fine level", "a photo of a blue coarse rising", "green"])
        images = torch.randn(2, 3, 16, 16, generator=torch.Generator().manual_seed(seed))
        with torch.no_grad():
            plan = compile_plan(bank)
            diffs = [
                encode_text(bundle, tokens, plan.language_hooks)
                - reference_text_forward(bundle, tokens.ids, tokens.eos_index, bank.prompts),
                encode_image(bundle, images, plan.vision_hooks)
                - reference_image_forward(bundle, images, bank.prompts, bank.projection),
                encode_image(bundle, images, compile_plan(bank, "no_accumulation").vision_hooks)
                - reference_image_forward(bundle, images, bank.prompts, bank.projection, accumulate=False),
            ]
        worst = max(worst, max(float(d.abs().max()) for d in diffs))
    elapsed = time.perf_counter() - start
    verdict(6, worst < 1e-5 and elapsed < 300, f"100 configs (K<=4, d<=32): max abs diff {worst:.2e} ({elapsed:.1f} s)")


def test_07_shape_law():
    failures = []
    for L in (1, 2, 4):
        for D in (1, 2, 3):
            bundle = make_bundle(K=D, seed=D).freeze()
            bank = init_prompts(L, D, bundle.d_nlp, bundle.d_cv)
            record = []
            encode_image(bundle, torch.zeros(1, 3, 16, 16), compile_plan(bank).vision_hooks, record)
            if record != [i * L for i in range(1, D + 1)] or record[-1] != L * D:
                failures.append((L, D, record))
    verdict(7, not failures, f"9 cells L in (1,2,4) x D in (1,2,3): layer i holds i*L, pooled L*D; failures {failures}")


def test_08_protocol_validation():
    def stream(groups, shots):
        return SessionStream(
            [Session(t, g, np.arange(k * max(len(g), 1)), np.arange(1)) for t, (g, k) in enumerate(zip(groups, shots))],
            2, 3,
        )

    cases = {
        "disjoint_classes": stream([[0, 1, 2, 3], [3, 4], [5, 6]], [5, 3, 3]),
        "base_larger": stream([[0, 1], [2, 3], [4, 5]], [5, 3, 3]),
        "uniform_sessions": stream([[0, 1, 2, 3], [4, 5], [6, 7, 8]], [5, 3, 3]),
    }
    named = {req: [v.requirement for v in validate_stream(s)] for req, s in cases.items()}
    rejected = all(req in found for req, found in named.items())
    data = synthesize_dataset(10, 12, 8, seed=0)
    bad_seeds = [seed for seed in range(100) if validate_stream(build_session_stream(data, 6, 2, 3, 2, seed))]
    verdict(
        8, rejected and not bad_seeds,
        f"violations named {named}; generated streams over 100 seeds rejected: {len(bad_seeds)}",
    )


def test_09_learning_signal(experiment):
    start = time.perf_counter()
    zero, _ = experiment.run_seed(0, ablation="zero_shot")
    tuned, _ = experiment.run_seed(0)
    gain = tuned.session_accuracies[0] - zero.session_accuracies[0]
    chance = 100.0 / experiment.config.stream.num_classes
    final = tuned.session_accuracies[-1]
    elapsed = time.perf_counter() - start
    verdict(
        9, gain >= 10 and final > 3 * chance and elapsed < 600,
        f"base {tuned.session_accuracies[0]:.2f} vs zero-shot {zero.session_accuracies[0]:.2f} (+{gain:.2f} pp); "
        f"final {final:.2f} vs 3x chance {3 * chance:.1f} ({elapsed:.1f} s)",
    )


def test_10_ablation_harness(tmp_path, capsys):
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [main(["ablation", "--output", str(o)]) for o in outs]
    same = (outs[0] / "ablation.csv").read_bytes() == (outs[1] / "ablation.csv").read_bytes()
    lines = (outs[0] / "ablation.csv").read_text().splitlines()[1:]
    variants = sorted({row.split(",")[0] for row in lines})

    def base_log(variant):
        rows = [json.loads(r) for r in (outs[0] / variant / "train_log_seed0.jsonl").read_text().splitlines()]
        return [r for r in rows if r["session"] == 0]

    full_rows = [r for r in lines if r.startswith("full,base")]
    noreg_rows = [r for r in lines if r.startswith("no_regularization,base")]
    base_equal = base_log("full") == base_log("no_regularization") and full_rows[0].split(",")[1:] == noreg_rows[0].split(",")[1:]
    verdict(
        10, codes == [0, 0] and same and len(variants) == 4 and len(lines) == 4 * 3 and base_equal,
        f"{len(variants)} curves x 3 sessions, rerun byte-identical: {same}; "
        f"no_regularization base-session losses and accuracy identical to full: {base_equal}",
    )


def test_11_determinism(tmp_path, capsys):
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [main(["run", "--output", str(o), "--seed", "0,1"]) for o in outs]
    a, b = [(o / "metrics.csv").read_bytes() for o in outs]
    verdict(11, codes == [0, 0] and a == b, f"two identical runs: metrics.csv byte-identical ({len(a)} bytes)")
