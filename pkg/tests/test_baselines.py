import numpy as np
import pytest
import torch
import torch.nn.functional as F

from trusformer.backbone import BackboneConfig, ResNetBackbone
from trusformer.baselines import (
    KINDS,
    AttentionMIL,
    BaselineSchedule,
    aggregate_mean,
    attention_mil_forward,
    predict_baseline,
    train_baseline,
)
from trusformer.transformer import CoreSample

TINY = BackboneConfig(stem_channels=4, stage_channels=(4, 4, 8, 8), input_size_px=(16, 16))
FAST = BaselineSchedule(epochs=2, warmup_epochs=1, batch_size=16, cores_per_batch=4)


def toy_cores(n, seed=0):
    rng = np.random.default_rng(seed)
    cores = []
    for i in range(n):
        label = i % 2
        k = int(rng.integers(3, 7))
        rois = (rng.random((k, 16, 16)) * (0.5 + 0.5 * label)).astype(np.float32)
        cores.append(CoreSample(f"c{i}", rois, np.zeros((k, 2), int), label))
    return cores


def test_aggregate_mean():
    assert aggregate_mean([0.2, 0.4, 0.9]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        aggregate_mean([])


@pytest.mark.parametrize("gated", [False, True])
def test_mil_matches_direct_formula(gated):
    torch.manual_seed(0)
    head = AttentionMIL(in_dim=6, hidden=4, gated=gated).double()
    h = torch.randn(5, 6, dtype=torch.float64)
    logits, a = attention_mil_forward(h, head)

    H = h.numpy()
    V, bV = head.V.weight.detach().numpy(), head.V.bias.detach().numpy()
    w, bw = head.w.weight.detach().numpy()[0], head.w.bias.detach().numpy()[0]
    scores = []
    for i in range(5):
        e = np.tanh(V @ H[i] + bV)
        if gated:
            U, bU = head.U.weight.detach().numpy(), head.U.bias.detach().numpy()
            e = e / (1 + np.exp(-(U @ H[i] + bU)))
        scores.append(w @ e + bw)
    want_a = np.exp(scores) / np.sum(np.exp(scores))
    pooled = want_a @ H
    want_logits = head.classifier.weight.detach().numpy() @ pooled + head.classifier.bias.detach().numpy()
    np.testing.assert_allclose(a.detach().numpy(), want_a, atol=1e-12)
    np.testing.assert_allclose(logits.detach().numpy(), want_logits, atol=1e-12)


@pytest.mark.parametrize("gated", [False, True])
def test_mil_finds_the_needle(gated):
    """Positive bags hide one instance carrying the signal; attention should find it."""
    rng = np.random.default_rng(0)
    d, n_bags, bag = 16, 200, 20
    signal = rng.standard_normal(d)
    bags, labels, where = [], [], []
    for i in range(n_bags):
        x = rng.standard_normal((bag, d))
        label = i % 2
        j = int(rng.integers(bag))
        if label:
            x[j] += 3 * signal
        bags.append(torch.tensor(x, dtype=torch.float32))
        labels.append(label)
        where.append(j)
    torch.manual_seed(0)
    head = AttentionMIL(in_dim=d, hidden=32, gated=gated)
    opt = torch.optim.Adam(head.parameters(), lr=1e-2)
    for _ in range(30):
        for i in rng.permutation(n_bags):
            loss = F.cross_entropy(head(bags[i])[0][None], torch.tensor([labels[i]]))
            opt.zero_grad()
            loss.backward()
            opt.step()
    with torch.no_grad():
        hits = [head(bags[i])[1].argmax().item() == where[i] for i in range(n_bags) if labels[i]]
    assert np.mean(hits) >= 0.8


@pytest.mark.parametrize("kind", KINDS)
def test_every_kind_trains_and_predicts(kind):
    train, val = toy_cores(8), toy_cores(6, seed=1)
    stage1 = ResNetBackbone(TINY).state_dict() if kind.startswith("ssl") else None
    res = train_baseline(kind, train, val, FAST, backbone_config=TINY, stage1_backbone=stage1, seed=0)
    assert len(res.history) == 2 and res.best_state is not None
    p = predict_baseline(kind, res.model, val)
    assert p.shape == (6,) and ((p >= 0) & (p <= 1)).all()


def test_linear_probe_keeps_backbone_frozen():
    torch.manual_seed(5)
    stage1 = ResNetBackbone(TINY).state_dict()
    frozen = {k: v.clone() for k, v in stage1.items()}
    res = train_baseline("ssl_linear", toy_cores(8), toy_cores(6, 1), FAST, backbone_config=TINY, stage1_backbone=stage1)
    for k, v in res.model.backbone.state_dict().items():
        assert torch.equal(v, frozen[k]), k


def test_finetune_moves_backbone():
    torch.manual_seed(5)
    stage1 = ResNetBackbone(TINY).state_dict()
    frozen = {k: v.clone() for k, v in stage1.items()}
    res = train_baseline("ssl_finetune", toy_cores(8), toy_cores(6, 1), FAST, backbone_config=TINY, stage1_backbone=stage1)
    assert not torch.equal(res.model.backbone.stem[0].weight, frozen["stem.0.weight"])


def test_roi_kind_prediction_is_mean_of_roi_probabilities():
    res = train_baseline("supervised_roi", toy_cores(8), [], FAST, backbone_config=TINY)
    core = toy_cores(1)[0]
    res.model.eval()
    with torch.no_grad():
        probs = torch.softmax(res.model(torch.from_numpy(core.rois)), 1)[:, 1].numpy()
    assert predict_baseline("supervised_roi", res.model, [core])[0] == pytest.approx(probs.mean())


def test_unknown_kind():
    with pytest.raises(ValueError):
        train_baseline("random_forest", toy_cores(4), [], FAST, backbone_config=TINY)


def test_ssl_kind_needs_checkpoint():
    with pytest.raises(ValueError):
        train_baseline("ssl_linear", toy_cores(4), [], FAST, backbone_config=TINY)
