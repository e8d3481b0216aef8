import math
import numpy as np
import pytest

from saluda import nn
from saluda.data import named_rng
from saluda.geometry import IGNORE_ID
from saluda.model import ModelConfig, Network, stack_frames
from saluda.nn import BNMode
from saluda.training import (
    BatchStream,
    BnAdaptConfig,
    ConfigError,
    SelfTrainConfig,
    TrainConfig,
    _rotations,
    adapt_bn,
    self_train_step2,
    train_min_ent,
    train_mixed_bn,
    train_source_only,
    train_step1,
    write_trace_csv,
)

CFG = ModelConfig(latent_dim=8, widths=(8, 8), radii=(0.5, 1.0), surf_hidden=8)


def fresh(seed=0):
    return Network(CFG, seed=seed)


def quick(**kw):
    base = dict(total_iterations=12, base_lr=5e-3, anchors_per_frame=32, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def unlabeled(frames):
    return [f.unlabeled() for f in frames]


def same_state(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(sa[k].tobytes() == sb[k].tobytes() for k in sa)


def test_config_errors():
    for bad in (dict(lam=-1.0), dict(mode="nope"), dict(total_iterations=0), dict(delta=0.0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()
    with pytest.raises(ConfigError):
        SelfTrainConfig(ema_decay=1.0).validate()
    with pytest.raises(ConfigError):
        BnAdaptConfig(omega=0.0).validate()


def test_saluda_lambda0_frozen_equals_source_only(tiny_source, tiny_target):
    a, b = fresh(), fresh()
    train_source_only(tiny_source, quick(), a)
    train_step1(tiny_source, unlabeled(tiny_target), quick(mode="saluda", lam=0.0, target_bn_update=False), b)
    assert same_state(a, b)


def test_source_only_equals_step1_without_target(tiny_source):
    a, b = fresh(), fresh()
    train_source_only(tiny_source, quick(), a)
    train_step1(tiny_source, [], quick(mode="saluda", lam=0.0), b)
    assert same_state(a, b)


def test_mixed_bn_frozen_equals_source_only(tiny_source, tiny_target):
    a, b = fresh(), fresh()
    ra = train_source_only(tiny_source, quick(), a)
    rb = train_mixed_bn(tiny_source, unlabeled(tiny_target), quick(target_bn_update=False), b)
    assert same_state(a, b)
    assert [r["l_sem"] for r in ra.trace] == [r["l_sem"] for r in rb.trace if r["domain"] == "source"]


def test_min_ent_zero_equals_mixed_bn(tiny_source, tiny_target):
    a, b = fresh(), fresh()
    train_mixed_bn(tiny_source, unlabeled(tiny_target), quick(), a)
    train_min_ent(tiny_source, unlabeled(tiny_target), quick(min_ent_weight=0.0), b)
    assert same_state(a, b)


def test_saluda_lambda0_equals_mixed_bn(tiny_source, tiny_target):
    a, b = fresh(), fresh()
    train_mixed_bn(tiny_source, unlabeled(tiny_target), quick(), a)
    train_step1(tiny_source, unlabeled(tiny_target), quick(mode="saluda", lam=0.0), b)
    assert same_state(a, b)


def test_mixed_bn_target_only_moves_statistics(tiny_source, tiny_target):
    a, b = fresh(), fresh()
    train_source_only(tiny_source, quick(total_iterations=2), a)
    train_mixed_bn(tiny_source, unlabeled(tiny_target), quick(total_iterations=2), b)
    assert a.checksum() == b.checksum()  # the target iteration contributes no gradient
    assert not np.allclose(a.bn["backbone.0.bn"].running_mean, b.bn["backbone.0.bn"].running_mean)


def test_mixed_bn_statistics_same_data_in_distribution(tiny_source):
    # target == source: the mixed running mean stays within the spread of source-only's across seeds
    gaps, spread = [], []
    for seed in range(4):
        a, b = fresh(seed), fresh(seed)
        train_source_only(tiny_source, quick(seed=seed, total_iterations=8), a)
        train_mixed_bn(tiny_source, unlabeled(tiny_source), quick(seed=seed, total_iterations=8), b)
        gaps.append(np.abs(a.bn["backbone.0.bn"].running_mean - b.bn["backbone.0.bn"].running_mean).mean())
        spread.append(np.abs(a.bn["backbone.0.bn"].running_mean).mean())
    assert np.mean(gaps) < np.mean(spread)


def test_saluda_trace_deterministic_and_targets_unread(tiny_source, tiny_target, tmp_path):
    cfg = quick(mode="saluda", lam=0.5)
    r1 = train_step1(tiny_source, unlabeled(tiny_target), cfg, fresh())
    r2 = train_step1(tiny_source, tiny_target, cfg, fresh())  # labels present but never read
    assert r1.trace == r2.trace
    assert r1.net.checksum() == r2.net.checksum()
    assert [r["domain"] for r in r1.trace] == ["source", "target"] * 6
    assert all(r["l_occ"] is not None for r in r1.trace)
    write_trace_csv(r1.trace, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "iteration,domain,l_sem,l_occ,lr" and len(lines) == 13


def test_lr_follows_cosine(tiny_source):
    r = train_source_only(tiny_source, quick(total_iterations=10), fresh())
    assert [row["lr"] for row in r.trace] == [nn.cosine_lr(5e-3, i, 10) for i in range(0, 10, 2)]


def test_smoke_run_loss_decreases(tiny_source):
    r = train_source_only(tiny_source, quick(total_iterations=400, base_lr=1e-2), fresh())
    sem = np.array([row["l_sem"] for row in r.trace])
    assert np.all(np.isfinite(sem))
    windows = sem.reshape(-1, 50).mean(axis=1)
    assert windows[-1] < windows[0]
    assert np.all(np.diff(windows) < 0.05)


def test_nonfinite_loss_aborts(tiny_source):
    net = fresh()
    net.params["cls.bias"][0] = np.nan
    with pytest.raises(nn.NumericalError):
        train_source_only(tiny_source, quick(total_iterations=1), net)


def test_augment_rotation_streams_independent(tiny_source):
    rng1, rng2 = named_rng(0, "a"), named_rng(0, "a")
    r1 = _rotations(tiny_source[:2], rng1, True)
    r2 = _rotations(tiny_source[:2], rng2, True)
    assert all(np.array_equal(a, b) for a, b in zip(r1, r2))
    for r in r1:
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert r[2, 2] == 1.0
    assert _rotations(tiny_source[:2], rng1, False) == [None, None]


def test_batch_stream_epochs():
    stream = BatchStream(list(range(5)), 2, np.random.default_rng(0))
    seen = [x for _ in range(5) for x in stream.next()]
    assert sorted(seen) == sorted(list(range(5)) * 2)


# ------------------------------------------------------------------ BN adaptation


def test_adapt_bn_keeps_parameters(tiny_source, tiny_target):
    net = fresh()
    train_source_only(tiny_source, quick(), net)
    for method in ("adabn", "dua"):
        other = net.copy()
        adapt_bn(other, unlabeled(tiny_target), BnAdaptConfig(method=method))
        assert other.checksum() == net.checksum()
        assert not np.allclose(other.bn["backbone.0.bn"].running_mean, net.bn["backbone.0.bn"].running_mean)


def test_adabn_normalisation_identity(tiny_target):
    net = fresh()
    net.params["backbone.0.bn.weight"][:] = np.linspace(0.5, 2.0, 8)
    net.params["backbone.0.bn.bias"][:] = np.linspace(-1, 1, 8)
    frame = tiny_target[0]
    adapt_bn(net, [frame.unlabeled()], BnAdaptConfig(method="adabn"))
    g = frame.graph(CFG)
    t = net.tensors(requires_grad=False)
    h = nn.sparse_matmul(g.aggregators[0], nn.linear(nn.Tensor(g.features), t["backbone.0.mlp.weight"],
                                                      t["backbone.0.mlp.bias"]))
    out = nn.batchnorm(h, t["backbone.0.bn.weight"], t["backbone.0.bn.bias"], net.bn["backbone.0.bn"],
                       BNMode.EVAL_FROZEN).data
    np.testing.assert_allclose(out.mean(axis=0), net.params["backbone.0.bn.bias"], atol=1e-9)
    np.testing.assert_allclose(out.var(axis=0), net.params["backbone.0.bn.weight"] ** 2, rtol=1e-3)


def test_adabn_on_source_data_is_stable(tiny_source):
    # statistics re-estimated on the data they came from stay put
    cum = fresh()
    for s in cum.bn.values():
        s.reset()
    for k, f in enumerate(tiny_source):
        cum.backbone(f.graph(CFG), BNMode.TRAIN_UPDATE, bn_momentum=1.0 / (k + 1))
    again = cum.copy()
    adapt_bn(again, unlabeled(tiny_source), BnAdaptConfig(method="adabn"))
    for k in cum.bn:
        np.testing.assert_allclose(again.bn[k].running_mean, cum.bn[k].running_mean, rtol=1e-12)


def test_dua_momentum_schedule(tiny_target):
    # replay the documented recurrence by hand
    net = fresh()
    ref = net.copy()
    cfg = BnAdaptConfig(method="dua", omega=0.5, zeta=0.02, initial_momentum=0.1)
    adapt_bn(net, unlabeled(tiny_target), cfg)
    for k, f in enumerate(tiny_target):
        ref.backbone(f.graph(CFG), BNMode.TRAIN_UPDATE, bn_momentum=max(0.1 * 0.5 ** k, 0.02))
    assert same_state(net, ref)


def test_adapt_bn_empty_target_is_noop(caplog):
    net = fresh()
    adapt_bn(net, [], BnAdaptConfig())
    assert same_state(net, fresh())
    assert "empty target" in caplog.text


# ------------------------------------------------------------------ self-training


def st_cfg(**kw):
    base = dict(epochs=1, ema_decay=0.9, confidence_threshold=0.0, seed=1, base_lr=5e-3, augment=False)
    base.update(kw)
    return SelfTrainConfig(**base)


def test_self_training_alpha0_teacher_tracks_student(tiny_source, tiny_target):
    net = fresh()
    r = self_train_step2(net, tiny_source, unlabeled(tiny_target), st_cfg(ema_decay=0.0))
    assert same_state(r.teacher, r.net)
    assert r.skipped_targets == 0
    assert same_state(net, fresh())  # the initial net is not mutated


def test_self_training_teacher_convex_combination(tiny_source, tiny_target, monkeypatch):
    net = fresh()
    snapshots = [dict((k, v.copy()) for k, v in net.params.items())]
    original = nn.ema_update

    def recording(teacher, student, decay):
        snapshots.append({k: student[k].copy() for k in net.params})
        return original(teacher, student, decay)

    monkeypatch.setattr(nn, "ema_update", recording)
    r = self_train_step2(net, tiny_source, unlabeled(tiny_target), st_cfg(ema_decay=0.7))
    assert len(snapshots) == 1 + len(r.trace) - r.skipped_targets
    for k in net.params:
        lo = np.minimum.reduce([s[k] for s in snapshots])
        hi = np.maximum.reduce([s[k] for s in snapshots])
        t = r.teacher.params[k]
        assert np.all(t >= lo - 1e-12) and np.all(t <= hi + 1e-12)
    assert not same_state(r.teacher, r.net)


def test_confidence_threshold_one_skips_targets(tiny_source, tiny_target):
    r = self_train_step2(fresh(), tiny_source, unlabeled(tiny_target), st_cfg(confidence_threshold=1.0))
    assert r.skipped_targets == len(tiny_target)
    assert all(row["domain"] == "source" or row["l_sem"] is None for row in r.trace)


def _supervised_reference(net_init, source, target, cfg):
    """Plain supervised fine-tuning with the self-training schedule."""
    student = net_init.copy()
    opt = nn.AdamW(cfg.base_lr, cfg.weight_decay)
    src = BatchStream(source, cfg.batch_size, named_rng(cfg.seed, "selftrain/source_order"))
    tgt = BatchStream(target, cfg.batch_size, named_rng(cfg.seed, "selftrain/target_order"))
    total = 2 * cfg.epochs * math.ceil(len(target) / cfg.batch_size)
    for i in range(1, total + 1):
        frames = src.next() if i % 2 == 1 else tgt.next()
        graph, _ = stack_frames([f.graph(student.config) for f in frames])
        labels = np.concatenate([f.rep.labels for f in frames])
        t = student.tensors()
        z = student.backbone(graph, BNMode.TRAIN_UPDATE, t)
        loss = nn.softmax_cross_entropy(student.cls_logits(z, t), labels, IGNORE_ID)
        loss.backward()
        opt.step(student.params, {k: v.grad for k, v in t.items()}, nn.cosine_lr(cfg.base_lr, i - 1, total))
    return student


def test_oracle_teacher_equals_supervised_finetuning(tiny_source, tiny_target):
    net = fresh()
    train_source_only(tiny_source, quick(), net)
    by_id = {f.frame_id: f.rep.labels for f in tiny_target}

    def oracle(frames, graph):
        return np.concatenate([by_id[f.frame_id] for f in frames])

    cfg = st_cfg()
    r = self_train_step2(net, tiny_source, unlabeled(tiny_target), cfg, pseudo_labeler=oracle)
    ref = _supervised_reference(net, tiny_source, tiny_target, cfg)
    assert same_state(r.net, ref)


def test_self_training_needs_both_domains(tiny_source):
    with pytest.raises(ConfigError):
        self_train_step2(fresh(), tiny_source, [], st_cfg())


def test_unsupported_queries_do_not_change_loss(tiny_source):
    from saluda.queries import QuerySet, sample_visibility_queries

    net = fresh()
    f = tiny_source[0]
    g = f.graph(CFG)
    q = sample_visibility_queries(f.rep, 0.1, 0, 16)
    far = QuerySet(np.vstack([q.positions, [[500.0, 500.0, 0.0]]]), np.append(q.labels, 1),
                   np.append(q.anchor_index, 0), np.append(q.roles, 2), 0.1)

    def loss(queries, t):
        z = net.backbone(g, BNMode.EVAL_FROZEN, t)
        lo, mask = net.surf_logits(z, f.rep.positions, queries, tensors=t)
        return nn.sigmoid_bce(lo, queries.labels[mask])

    ta, tb = net.tensors(), net.tensors()
    la, lb = loss(q, ta), loss(far, tb)
    la.backward()
    lb.backward()
    assert la.item() == lb.item()
    for k in ta:
        np.testing.assert_array_equal(ta[k].grad, tb[k].grad)
