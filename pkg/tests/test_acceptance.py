"""Acceptance criteria, one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines.  The overfit and ablation experiments (criteria 7 and 8) train real
networks and together take several minutes on a laptop CPU.
"""
import time

import numpy as np

from omeganet import blocks, verify
from omeganet.data import SyntheticDataset, SyntheticSpec
from omeganet.net import ModelConfig, OmegaNet, dual_loss
from omeganet.tensor import Tensor, no_grad, softmax_rows
from omeganet.train import AdamState, TrainLoopConfig, accumulate_gradients, evaluate, train
from omeganet.reference import relative_error


def report(name, ok, detail):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def test_criterion_1_gradient_correctness():
    start = time.time()
    results = verify.grad_suite(include_end_to_end=True)
    elapsed = time.time() - start
    worst_block = max(r.worst for r in results if r.name != "end_to_end")
    e2e = next(r for r in results if r.name == "end_to_end")
    ok = worst_block < 1e-4 and e2e.worst < 1e-3 and elapsed < 300
    report("criterion 1 (gradient correctness)", ok,
           f"per-block worst {worst_block:.2e} (<1e-4), end-to-end {e2e.worst:.2e}"
           f" (<1e-3), {elapsed:.0f}s (<300s)")


def test_criterion_2_oracle_equivalence():
    start = time.time()
    results = verify.oracle_suite(instances=100)
    elapsed = time.time() - start
    ok = all(r.passed for r in results) and elapsed < 120
    detail = ", ".join(f"{r.name} {r.worst:.1e}" for r in results)
    report("criterion 2 (oracle equivalence, 100 instances each)", ok,
           f"{detail}; {elapsed:.0f}s (<120s)")


def test_criterion_3_attention_invariants():
    rng = np.random.default_rng(15)
    worst_sum = 0.0
    for _ in range(20):
        c = int(rng.integers(2, 9))
        h = int(rng.integers(2, 7))
        x = Tensor((rng.normal(size=(2, c, h, h)) * 3).astype(np.float32))
        p = blocks.init_dspa(rng, c, k=min(6, h * h))
        _, a = blocks.dspa(x, p, return_attention=True)
        worst_sum = max(worst_sum, float(np.abs(a.data.sum(-1) - 1.0).max()))
        _, a2 = blocks.channel_attention(x, return_attention=True)
        worst_sum = max(worst_sum, float(np.abs(a2.data.sum(-1) - 1.0).max()))

    # grid-valued logits keep x + c exactly representable, so max-subtraction
    # must reproduce identical bits under constant shifts
    shifts_exact = True
    for c in (1.0, 64.0, 700.0):
        x = np.round(rng.uniform(0, 1, size=(64, 10)) * 1024) / 1024
        a = softmax_rows(Tensor(x, dtype=np.float64)).data
        b = softmax_rows(Tensor(x + c, dtype=np.float64)).data
        shifts_exact = shifts_exact and np.array_equal(a, b)

    ok = worst_sum < 1e-6 and shifts_exact
    report("criterion 3 (attention invariants)", ok,
           f"worst row-sum error {worst_sum:.2e} (<1e-6),"
           f" shift bit-exactness {shifts_exact}")


def test_criterion_4_shape_fidelity_paper_scale():
    cfg = ModelConfig()  # depth 5, channels 64..1024, input 512
    net = OmegaNet(cfg, seed=0)
    x = Tensor(np.zeros((1, 1, 512, 512), dtype=np.float32))
    start = time.time()
    with no_grad():
        encs = net.encode(x)
        msc_outs = net.msc_skips(encs)
        aux = net.decode_additional(encs, msc_outs)
        main = net.decode_original(encs, aux, msc_outs)
        main_logits = blocks.apply_conv(main[-1], net.head_main)
        aux_logits = blocks.apply_conv(aux[-1], net.head_aux)
    elapsed = time.time() - start
    bottleneck = encs[-1].shape
    decoder_ok = (aux[0].shape == (1, 512, 64, 64)
                  and aux[-1].shape == (1, 64, 512, 512)
                  and main[-1].shape == (1, 64, 512, 512))
    ok = (bottleneck == (1, 1024, 32, 32)
          and decoder_ok
          and main_logits.shape == (1, 2, 512, 512)
          and aux_logits.shape == (1, 2, 512, 512))
    report("criterion 4 (paper-scale shape fidelity)", ok,
           f"bottleneck {bottleneck} == (1, 1024, 32, 32), decoder stages ok"
           f" {decoder_ok}, outputs {main_logits.shape} / {aux_logits.shape};"
           f" forward {elapsed:.0f}s")


def test_criterion_5_dual_supervision_wiring():
    rng = np.random.default_rng(21)
    net = OmegaNet(verify.tiny_config(), seed=2, dtype=np.float64)
    x = Tensor(rng.normal(size=(1, 1, 16, 16)), dtype=np.float64)
    mask = Tensor((rng.uniform(size=(1, 2, 16, 16)) > 0.5).astype(np.float64))

    net.zero_grad()
    dual_loss(net.forward(x), mask, lambda_s=0.0, lambda_a=1.0).backward()
    grads = {n: p.grad for n, p in net.named_parameters()}
    main_silent = (not grads["head.main.weight"].any()
                   and not grads["head.main.bias"].any())
    encoder_alive = all(np.abs(grads[f"enc.{i}.conv1.weight"]).max() > 0
                        for i in (1, 2, 3))

    net.zero_grad()
    dual_loss(net.forward(x), mask, lambda_s=1.0, lambda_a=0.0).backward()
    grads = {n: p.grad for n, p in net.named_parameters()}
    aux_silent = (not grads["head.aux.weight"].any()
                  and not grads["head.aux.bias"].any())

    ok = main_silent and encoder_alive and aux_silent
    report("criterion 5 (dual-supervision wiring)", ok,
           f"lambda_s=0 silences main head ({main_silent}) with live encoder"
           f" ({encoder_alive}); lambda_a=0 silences aux head ({aux_silent})")


def test_criterion_6_accumulation_equals_big_batch():
    net = OmegaNet(verify.tiny_config(), seed=3, dtype=np.float64)
    ds = SyntheticDataset(SyntheticSpec(image_size=16, n_samples=4, seed=6))
    from omeganet.data import stack_samples
    micro = [stack_samples([ds[0], ds[1]], dtype=np.float64),
             stack_samples([ds[2], ds[3]], dtype=np.float64)]
    grads_acc, _ = accumulate_gradients(net, micro)
    big = [stack_samples([ds[0], ds[1], ds[2], ds[3]], dtype=np.float64)]
    grads_big, _ = accumulate_gradients(net, big)
    worst = max(relative_error(grads_acc[n], grads_big[n]) for n in grads_big)
    report("criterion 6 (G=2 accumulation == concatenated batch)", worst < 1e-6,
           f"worst relative gradient difference {worst:.2e} (<1e-6)")


OVERFIT_STEPS = 500
OVERFIT_LR = 7e-4
OVERFIT_DATA_SEED = 19
OVERFIT_NET_SEED = 2


def test_criterion_7_overfit_experiment():
    spec = SyntheticSpec(image_size=64, n_samples=8, noise_sigma=0.05,
                         seed=OVERFIT_DATA_SEED)
    ds = SyntheticDataset(spec)
    cfg = ModelConfig(depth=3, encoder_channels=[8, 16, 32], out_channels=2, k=10,
                      lambda_s=10.0, lambda_a=1.0, input_size=64)
    net = OmegaNet(cfg, seed=OVERFIT_NET_SEED)
    loop = TrainLoopConfig(epochs=OVERFIT_STEPS, micro_batch_size=4,
                           accumulation_steps=2, eval_interval=100,
                           threshold=0.5, seed=0)
    start = time.time()
    history = train(net, ds, loop, adam=AdamState(lr=OVERFIT_LR, weight_decay=0.00015))
    elapsed = time.time() - start

    final = evaluate(net, ds)
    organ, tumor = final.channels[0].dsc, final.channels[1].dsc
    losses = np.array([e.loss for e in history])
    ma = np.convolve(losses, np.ones(50) / 50, mode="valid")
    # non-increasing up to float/optimizer jitter: 1% relative slack per step
    upticks = np.diff(ma) - (1e-6 + 0.01 * ma[:-1])
    monotone = bool((upticks <= 0).all())

    ok = organ >= 0.95 and tumor >= 0.95 and monotone and elapsed < 600
    report("criterion 7 (toy overfit, 500 steps)", ok,
           f"train DSC organ {organ:.4f} / tumor {tumor:.4f} (>=0.95),"
           f" 50-step loss MA non-increasing {monotone},"
           f" {elapsed:.0f}s (<600s)")


ABLATION_EPOCHS = 40  # 44 train samples / batch 4 -> 11 steps per epoch
ABLATION_LR = 7e-4
ABLATION_SEEDS = (0, 1, 2)


def _ablation_run(mdsa_enabled, seed, ds, train_idx, val_idx):
    cfg = ModelConfig(depth=3, encoder_channels=[8, 16, 32], out_channels=2, k=10,
                      lambda_s=10.0, lambda_a=1.0, input_size=64,
                      mdsa_enabled=mdsa_enabled)
    net = OmegaNet(cfg, seed=seed)
    loop = TrainLoopConfig(epochs=ABLATION_EPOCHS, micro_batch_size=4,
                           accumulation_steps=1, eval_interval=10 ** 9,
                           threshold=0.5, seed=seed)
    train(net, ds, loop, adam=AdamState(lr=ABLATION_LR, weight_decay=0.00015),
          indices=train_idx)
    return evaluate(net, ds, indices=val_idx).channels[1].dsc


def test_criterion_8_ablation_direction():
    from omeganet.data import split_ranges
    # slightly larger tumors and less noise than the generator defaults keep
    # both variants past their breakthrough phase at this horizon, so the
    # comparison measures the converged plateau rather than breakthrough luck
    spec = SyntheticSpec(image_size=64, n_samples=64, noise_sigma=0.03, seed=5,
                         tumor_radius=(0.04, 0.08))
    ds = SyntheticDataset(spec)
    splits = split_ranges(64)
    train_idx, val_idx = list(splits["train"]), list(splits["val"])
    start = time.time()
    full = [_ablation_run(True, s, ds, train_idx, val_idx) for s in ABLATION_SEEDS]
    ablated = [_ablation_run(False, s, ds, train_idx, val_idx) for s in ABLATION_SEEDS]
    elapsed = time.time() - start
    mean_full, mean_ablated = float(np.mean(full)), float(np.mean(ablated))
    ok = mean_full >= mean_ablated - 0.02
    report("criterion 8 (ablation direction, tumor val DSC)", ok,
           f"full {mean_full:.4f} (runs {[round(v, 3) for v in full]}) vs"
           f" ablated {mean_ablated:.4f} (runs {[round(v, 3) for v in ablated]});"
           f" margin -0.02; {elapsed:.0f}s")


def test_criterion_9_determinism_and_persistence(tmp_path):
    from omeganet.cli import main
    import json

    cfg = {
        "model": {"depth": 3, "encoder_channels": [4, 8, 16], "out_channels": 2,
                  "k": 4, "lambda_s": 10.0, "lambda_a": 1.0, "input_size": 16},
        "train": {"epochs": 2, "micro_batch_size": 2, "accumulation_steps": 2,
                  "eval_interval": 2, "threshold": 0.5, "seed": 0,
                  "lr": 0.001, "weight_decay": 0.00015},
        "data": {"image_size": 16, "n_samples": 12, "noise_sigma": 0.05, "seed": 2},
        "paths": {"data_dir": "", "checkpoint": "", "metrics_csv": ""},
    }

    def run(tag):
        root = tmp_path / tag
        cfg["paths"] = {"data_dir": str(root / "data"),
                        "checkpoint": str(root / "ckpt.otf"),
                        "metrics_csv": str(root / "metrics.csv")}
        config = root / "run.json"
        root.mkdir()
        config.write_text(json.dumps(cfg))
        assert main(["gen-data", "--config", str(config)]) == 0
        assert main(["train", "--config", str(config)]) == 0
        data_bytes = {str(p.relative_to(root)): p.read_bytes()
                      for p in sorted((root / "data").rglob("*")) if p.is_file()}
        return (data_bytes, (root / "ckpt.otf").read_bytes(),
                (root / "metrics.csv").read_bytes())

    a, b = run("a"), run("b")
    datasets_equal = a[0] == b[0]
    checkpoints_equal = a[1] == b[1]
    histories_equal = a[2] == b[2]

    # OTF round-trip fuzz
    from omeganet.data import read_otf, write_otf
    rng = np.random.default_rng(99)
    fuzz_ok = True
    for case in range(20):
        tensors = {}
        for t in range(int(rng.integers(1, 5))):
            name = f"n{case}_{t}_" + "".join(chr(int(c)) for c in rng.integers(97, 123, 4))
            shape = tuple(int(s) for s in rng.integers(1, 6, size=int(rng.integers(1, 5))))
            tensors[name] = rng.normal(size=shape).astype(np.float32)
        p = tmp_path / f"fz{case}.otf"
        write_otf(p, tensors)
        back = read_otf(p)
        fuzz_ok = fuzz_ok and list(back) == list(tensors) and all(
            back[n].tobytes() == tensors[n].tobytes() and back[n].shape == tensors[n].shape
            for n in tensors)

    ok = datasets_equal and checkpoints_equal and histories_equal and fuzz_ok
    report("criterion 9 (determinism & persistence)", ok,
           f"datasets byte-identical {datasets_equal}, checkpoints {checkpoints_equal},"
           f" histories {histories_equal}, OTF fuzz round-trip {fuzz_ok}")
