"""Training-loop tests: determinism, divergence handling, optimizer sanity,
dense-equivalence of two-expert routing, and balance under a heavy penalty."""

import numpy as np
import pytest

from moeformer import ConfigError, TrainingDiverged
from moeformer.presets import desk_encoder
from moeformer.synth import SyntheticTaskSpec
from moeformer.training import (
    TrainConfig,
    build_model,
    metrics_line,
    train,
    write_metrics,
)


def micro_encoder(**overrides):
    kwargs = dict(
        causal_layers=1, causal_dim=16, non_causal_layers=2, non_causal_dim=24,
        heads=2, feature_dim=8, ffn_mult=2, num_experts=2,
    )
    kwargs.update(overrides)
    return desk_encoder(**kwargs)


def micro_task(**overrides):
    kwargs = dict(
        num_languages=2, feature_dim=8, tokens_per_language=4, shared_tokens=1,
        min_tokens=4, max_tokens=6, frames_per_token=4, noise_scale=0.2, seed=0,
    )
    kwargs.update(overrides)
    return SyntheticTaskSpec(**kwargs)


def test_metrics_deterministic_across_runs(tmp_path):
    cfg = TrainConfig(steps=8, batch_size=2, seed=7)
    _, m1 = train(micro_encoder(), micro_task(), cfg)
    _, m2 = train(micro_encoder(), micro_task(), cfg)
    lines1 = [metrics_line(m) for m in m1]
    lines2 = [metrics_line(m) for m in m2]
    assert lines1 == lines2

    write_metrics(m1, tmp_path / "a.txt")
    write_metrics(m2, tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()


def test_prefetch_queue_matches_synchronous_batching():
    sync = TrainConfig(steps=8, batch_size=2, seed=3, prefetch=0)
    queued = TrainConfig(steps=8, batch_size=2, seed=3, prefetch=3)
    _, m1 = train(micro_encoder(), micro_task(), sync)
    _, m2 = train(micro_encoder(), micro_task(), queued)
    assert [metrics_line(m) for m in m1] == [metrics_line(m) for m in m2]


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_divergence_aborts_with_diagnostic():
    cfg = TrainConfig(steps=60, batch_size=2, lr=1e9, warmup_steps=1, seed=0)
    with pytest.raises(TrainingDiverged, match="step"):
        train(micro_encoder(), micro_task(), cfg)


def test_single_language_single_pair_learns_below_uniform_loss():
    # two experts on one language: loss must beat ln(num_labels) well inside
    # the 500-step budget
    task = micro_task(num_languages=1)
    cfg = TrainConfig(steps=300, batch_size=4, lr=3e-3, warmup_steps=50,
                      aux_weight=0.0, seed=1)
    _, metrics = train(micro_encoder(), task, cfg)
    uniform = float(np.log(task.num_labels))
    assert metrics[-1]["loss"] < uniform
    assert min(m["step"] for m in metrics if m["loss"] < uniform) <= 500


def test_two_expert_routing_equals_dense_mixture_training():
    # identical seeds, one model on the sparse path and one on the dense path:
    # per-step losses agree to 1e-5 (64-bit run keeps drift out of the check)
    task = micro_task()
    enc = micro_encoder()
    steps = 60

    def run(execution):
        cfg = TrainConfig(steps=steps, batch_size=2, seed=5, dtype="float64",
                          aux_weight=0.0)
        model = None
        losses = []

        # train() builds its own model, so hook execution mode via a wrapper
        from moeformer import training as tr

        original_build = tr.build_model

        def patched(config, num_labels, seed, dtype=np.float32):
            m = original_build(config, num_labels, seed, dtype)
            for layer in m.encoder.non_causal_layers:
                for block in layer.moe_blocks():
                    block.execution = execution
            return m

        tr.build_model = patched
        try:
            model, metrics = tr.train(enc, task, cfg)
        finally:
            tr.build_model = original_build
        return [m["loss"] for m in metrics]

    sparse_losses = run("sparse")
    dense_losses = run("dense")
    for a, b in zip(sparse_losses, dense_losses):
        assert abs(a - b) < 1e-5


def test_large_aux_weight_drives_balance():
    enc = micro_encoder(num_experts=4, non_causal_layers=1)
    task = micro_task()
    cfg = TrainConfig(steps=250, batch_size=4, lr=3e-3, warmup_steps=50,
                      aux_weight=10.0, seed=2)
    _, metrics = train(enc, task, cfg)
    # per-batch loads fluctuate with tiny batches; judge the routing itself by
    # the mean load over the tail of training
    tail = metrics[-100:]
    loads = [np.mean([m[f"load0_{e}"] for m in tail]) for e in range(4)]
    # max load approaches the 2/N fair share within 20%
    assert max(loads) <= (2 / 4) * 1.2


def test_task_encoder_mismatches_rejected():
    with pytest.raises(ConfigError, match="feature_dim"):
        train(micro_encoder(), micro_task(feature_dim=12), TrainConfig(steps=1))
    with pytest.raises(ConfigError, match="downsample"):
        train(micro_encoder(), micro_task(frames_per_token=2), TrainConfig(steps=1))


def test_adapter_group_count_must_match_languages():
    from moeformer.config import AdapterConfig

    enc = micro_encoder(moe_placement="none", num_experts=0,
                        adapters=AdapterConfig(dim=8, num_groups=3))
    with pytest.raises(ConfigError, match="adapter groups"):
        train(enc, micro_task(num_languages=2), TrainConfig(steps=1))


def test_warmup_schedule():
    from moeformer.training import Adam
    from moeformer.tensor import Tensor

    p = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    opt = Adam([("p", p)], lr=1.0, warmup_steps=4)
    lrs = []
    for _ in range(6):
        p.grad = np.ones(3, dtype=np.float32)
        lrs.append(opt.step())
    assert lrs == [0.25, 0.5, 0.75, 1.0, 1.0, 1.0]
