import math

import numpy as np
import pytest

from gmmcomet.core.errors import ContractViolation, NonFiniteLossError, NumericalError
from gmmcomet.schemas.config_schemas import LossWeights
from gmmcomet.services import losses
from gmmcomet.services.meanteacher import init_pair
from gmmcomet.services.netcore import Architecture, OutputGrads, backward, forward, init_params, softmax


def _numeric_grad(fn, x, eps=1e-5):
    grad = np.zeros_like(x)
    flat, out = x.reshape(-1), grad.reshape(-1)
    for j in range(flat.size):
        original = flat[j]
        flat[j] = original + eps
        plus = fn(x)
        flat[j] = original - eps
        minus = fn(x)
        flat[j] = original
        out[j] = (plus - minus) / (2.0 * eps)
    return grad


def _instance(rng, n=5, d=3, num_classes=3):
    """Random embeddings with mixed known / unknown / ignored labels."""
    labels = rng.integers(-1, num_classes + 1, size=n)
    labels[0] = 0
    emb = losses.LabeledEmbeddings(
        reduced=rng.standard_normal((2 * n, d)),
        labels=np.concatenate([labels, labels]),
        means=rng.standard_normal((num_classes, d)),
    )
    return emb


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def _brute_force_contrastive(emb, temperature, exclude_self_pairs=True):
    z, labels, means = emb.reduced, emb.labels, emb.means
    c = means.shape[0]
    anchors = [i for i in range(z.shape[0]) if 0 <= labels[i] < c]
    total = 0.0
    for i in anchors:
        others = [l for l in range(z.shape[0]) if l != i or not exclude_self_pairs]
        denominator = sum(math.exp(_cos(z[l], z[i]) / temperature) for l in others)
        positives = [j for j in others if labels[j] == labels[i]]
        for j in positives:
            total -= math.log(math.exp(_cos(z[j], z[i]) / temperature) / denominator) / len(positives)
        mean_denominator = sum(math.exp(_cos(means[k], z[i]) / temperature) for k in range(c))
        total -= math.log(math.exp(_cos(means[labels[i]], z[i]) / temperature) / mean_denominator)
    return total / len(anchors)


def test_contrastive_matches_brute_force_double_loop():
    rng = np.random.default_rng(11)
    for _ in range(50):
        emb = _instance(rng, n=int(rng.integers(2, 7)))
        value, _ = losses.contrastive_loss(emb, 0.1)
        assert value == pytest.approx(_brute_force_contrastive(emb, 0.1), rel=1e-10, abs=1e-10)


def test_contrastive_with_self_pairs_adds_the_self_term():
    """Keeping self pairs adds sim(i, i) = 1/T to every denominator and i to its own positives."""
    rng = np.random.default_rng(12)
    for _ in range(20):
        emb = _instance(rng, n=int(rng.integers(2, 7)))
        with_self, _ = losses.contrastive_loss(emb, 0.5, exclude_self_pairs=False)
        without_self, _ = losses.contrastive_loss(emb, 0.5)
        assert with_self == pytest.approx(_brute_force_contrastive(emb, 0.5, exclude_self_pairs=False),
                                          rel=1e-10, abs=1e-10)
        assert with_self != pytest.approx(without_self, rel=1e-6)


@pytest.mark.parametrize("exclude_self_pairs", [True, False])
def test_contrastive_gradient(exclude_self_pairs):
    rng = np.random.default_rng(5)
    for _ in range(20):
        emb = _instance(rng, n=int(rng.integers(2, 6)))

        def value_of(z):
            shifted = losses.LabeledEmbeddings(z, emb.labels, emb.means)
            return losses.contrastive_loss(shifted, 0.1, exclude_self_pairs)[0]

        _, analytic = losses.contrastive_loss(emb, 0.1, exclude_self_pairs)
        numeric = _numeric_grad(value_of, emb.reduced.copy())
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-6)


def test_contrastive_is_rotation_invariant():
    rng = np.random.default_rng(14)
    for _ in range(20):
        emb = _instance(rng, n=5, d=4)
        rotation, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        rotated = losses.LabeledEmbeddings(emb.reduced @ rotation.T, emb.labels, emb.means @ rotation.T)
        value, grad = losses.contrastive_loss(emb, 0.1)
        rotated_value, rotated_grad = losses.contrastive_loss(rotated, 0.1)
        assert rotated_value == pytest.approx(value, rel=1e-10, abs=1e-10)
        np.testing.assert_allclose(rotated_grad, grad @ rotation.T, atol=1e-10)


def test_contrastive_without_known_labels_is_zero():
    rng = np.random.default_rng(0)
    labels = np.array([-1, 3, -1, 3])
    emb = losses.LabeledEmbeddings(rng.standard_normal((8, 2)), np.concatenate([labels, labels]),
                                   rng.standard_normal((3, 2)))
    value, grad = losses.contrastive_loss(emb, 0.1)
    assert value == 0.0
    assert not grad.any()


def test_contrastive_rejects_zero_embedding_and_label_mismatch():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((4, 2))
    z[1] = 0.0
    with pytest.raises(NumericalError):
        losses.contrastive_loss(losses.LabeledEmbeddings(z, np.array([0, 1, 0, 1]), np.eye(2)), 0.1)
    with pytest.raises(ContractViolation):
        losses.LabeledEmbeddings(z, np.array([0, 1, 1, 1]), np.eye(2))


def test_entropy_loss_value():
    rng = np.random.default_rng(2)
    logits = rng.standard_normal((6, 4))
    labels = np.array([0, 4, -1, 2, 4, 1])
    value, _ = losses.entropy_loss(softmax(logits), labels)

    entropies = [losses.normalized_entropy(p) for p in softmax(logits)]
    expected = (entropies[0] + entropies[3] + entropies[5] - entropies[1] - entropies[4]) / 6
    assert value == pytest.approx(expected, abs=1e-12)


def test_entropy_loss_gradient():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n, c = int(rng.integers(2, 8)), int(rng.integers(2, 6))
        logits = 2.0 * rng.standard_normal((n, c))
        labels = rng.integers(-1, c + 1, size=n)
        _, d_logits = losses.entropy_loss(softmax(logits), labels)
        numeric = _numeric_grad(lambda x: losses.entropy_loss(softmax(x), labels)[0], logits.copy())
        np.testing.assert_allclose(d_logits, numeric, rtol=1e-4, atol=1e-8)


def test_entropy_loss_all_ignored_is_zero():
    value, grad = losses.entropy_loss(np.full((3, 2), 0.5), np.array([-1, -1, -1]))
    assert value == 0.0
    assert not grad.any()


def test_consistency_losses():
    student = np.array([[3.0, 4.0], [0.0, 0.0]])
    other = np.zeros((2, 2))
    value, grad = losses.consistency_src(student, other)
    assert value == pytest.approx(2.5)
    np.testing.assert_allclose(grad, [[0.3, 0.4], [0.0, 0.0]])
    value, grad = losses.consistency_mt(other, other)
    assert value == 0.0 and not grad.any()


@pytest.mark.parametrize("term", [losses.consistency_src, losses.consistency_mt])
def test_consistency_gradient(term):
    rng = np.random.default_rng(4)
    for _ in range(20):
        n, d = int(rng.integers(1, 7)), int(rng.integers(1, 5))
        a, b = rng.standard_normal((n, d)), rng.standard_normal((n, d))
        numeric = _numeric_grad(lambda x: term(x, b)[0], a.copy())
        np.testing.assert_allclose(term(a, b)[1], numeric, rtol=1e-4, atol=1e-8)


def test_total_loss_weights_and_non_finite_terms():
    parts = {"contrastive": 1.0, "entropy": 2.0, "consistency_src": 3.0, "consistency_mt": 4.0}
    assert losses.total_loss(parts, LossWeights()) == pytest.approx(1.0 + 2.0 + 6.0 + 4.0)
    parts["entropy"] = float("nan")
    with pytest.raises(NonFiniteLossError) as err:
        losses.total_loss(parts, LossWeights())
    assert err.value.term == "entropy"


def test_total_objective_gradient_through_the_network():
    """All four terms chained through one student network; labels and means are constants."""
    rng = np.random.default_rng(21)
    arch = Architecture(input_dim=8, hidden_dims=(6,), feature_dim=5, reduced_dim=3, num_classes=3)
    weights = LossWeights()
    for _ in range(20):
        pair = init_pair(init_params(arch, rng), 0.99)
        for array in pair.student.arrays():
            array += 0.1 * rng.standard_normal(array.shape)
        for array in pair.teacher.arrays():
            array += 0.1 * rng.standard_normal(array.shape)
        x = rng.standard_normal((4, 8))
        x_aug = x + 0.1 * rng.standard_normal(x.shape)
        labels = rng.integers(-1, 4, size=4)
        means = rng.standard_normal((3, 3))
        source_feats = forward(pair.source, x).features
        teacher_feats = forward(pair.teacher, x).features

        def loss_fn(params):
            trace = forward(params, np.vstack([x, x_aug]))
            emb = losses.LabeledEmbeddings(trace.reduced, np.concatenate([labels, labels]), means)
            l_c, d_red = losses.contrastive_loss(emb, weights.temperature)
            l_e, d_log = losses.entropy_loss(trace.probs[:4], labels)
            l_s, d_fs = losses.consistency_src(trace.features[:4], source_feats)
            l_m, d_fm = losses.consistency_mt(trace.features[:4], teacher_feats)
            total = losses.total_loss(
                {"contrastive": l_c, "entropy": l_e, "consistency_src": l_s, "consistency_mt": l_m}, weights)
            d_logits = np.zeros_like(trace.logits)
            d_logits[:4] = weights.lambda_entropy * d_log
            d_feats = np.zeros_like(trace.features)
            d_feats[:4] = weights.lambda_src * d_fs + weights.lambda_mt * d_fm
            return total, backward(params, trace, OutputGrads(total, d_feats, d_red, d_logits))

        params = pair.student
        _, analytic = loss_fn(params)
        for array, grad in zip(params.arrays(), analytic.arrays()):
            numeric = _numeric_grad(lambda _: loss_fn(params)[0], array)
            np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-6)


def test_smoothed_cross_entropy_gradient():
    rng = np.random.default_rng(9)
    for _ in range(20):
        n, c = int(rng.integers(1, 7)), int(rng.integers(2, 6))
        logits = rng.standard_normal((n, c))
        targets = rng.integers(0, c, size=n)
        _, grad = losses.smoothed_cross_entropy(logits, targets, 0.1)
        numeric = _numeric_grad(lambda x: losses.smoothed_cross_entropy(x, targets, 0.1)[0], logits.copy())
        np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-8)
