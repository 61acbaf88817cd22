import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.models import (
    Conv2d,
    Discriminator,
    DiscriminatorSpec,
    DomainAdversarialNet,
    Mlp,
    MlpSpec,
    ModelCheckpoint,
    dann_lambda,
    discriminator_forward,
    gradient_reversal,
    mlp_forward,
)
from src.norms import make_normalizer
from src.numerics import InvalidInputError, Tensor, backward, conv2d, cross_entropy, finite_diff_grad, grad_check
from src.train import ProjectedSGD


def two_batches(features=3, n=6, seed=0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(size=(n, features))), Tensor(rng.normal(1.0, 2.0, size=(n, features)))


# ----------------------------------------------------------------------
# gradient reversal
# ----------------------------------------------------------------------


def test_gradient_reversal_is_identity_forward():
    x = Tensor([1.0, -2.0], requires_grad=True)
    assert_array_equal(gradient_reversal(x, 0.7).data, x.data)


@pytest.mark.parametrize("lam, expected", [(1.0, [-1.0, -2.0]), (0.0, [0.0, 0.0]), (0.5, [-0.5, -1.0])])
def test_gradient_reversal_backward(lam, expected):
    x = Tensor([3.0, 4.0], requires_grad=True)
    backward((gradient_reversal(x, lam) * np.array([1.0, 2.0])).sum())
    assert_allclose(x.grad, expected)


def test_gradient_reversal_negates_a_downstream_gradient():
    x = np.random.default_rng(1).normal(size=4)

    def downstream(t: Tensor) -> Tensor:
        return (t.exp() * t).sum()

    leaf = Tensor(x, requires_grad=True)
    backward(downstream(gradient_reversal(leaf, 0.3)))
    assert_allclose(leaf.grad, -0.3 * finite_diff_grad(downstream, x), rtol=1e-6)


def test_gradient_reversal_rejects_negative_coefficient():
    with pytest.raises(InvalidInputError):
        gradient_reversal(Tensor([1.0]), -0.1)


def test_dann_lambda_schedule():
    assert dann_lambda(0.0) == 0.0
    assert dann_lambda(1.0) == pytest.approx(2.0 / (1.0 + math.exp(-10.0)) - 1.0)
    assert dann_lambda(0.5, scale=0.1) == pytest.approx(0.1 * (2.0 / (1.0 + math.exp(-5.0)) - 1.0))
    assert dann_lambda(0.2) < dann_lambda(0.4) < dann_lambda(0.6)


# ----------------------------------------------------------------------
# MLP
# ----------------------------------------------------------------------


def zero_weights(model: Mlp) -> None:
    for layer in [*model.hidden, model.head]:
        layer.weight.data = np.zeros_like(layer.weight.data)
        layer.bias.data = np.zeros_like(layer.bias.data)


@pytest.mark.parametrize("normalizer", ["rn", "bn", "dsbn", "tn", "autodial"])
def test_zero_weights_give_zero_logits(normalizer):
    model = Mlp(MlpSpec(widths=[3, 4, 2], normalizer=normalizer), np.random.default_rng(0))
    zero_weights(model)
    out = mlp_forward(model, *two_batches())
    assert_array_equal(out.logits_s.data, np.zeros((6, 2)))
    assert_array_equal(out.logits_t.data, np.zeros((6, 2)))


def test_identity_normalizer_is_a_plain_network():
    model = Mlp(MlpSpec(widths=[3, 4, 2], normalizer="identity"), np.random.default_rng(2))
    x_s, x_t = two_batches()
    out = model.forward(x_s, x_t)
    hidden, head = model.hidden[0], model.head
    h = np.maximum(x_s.data @ hidden.weight.data + hidden.bias.data, 0.0)
    assert_allclose(out.logits_s.data, h @ head.weight.data + head.bias.data, atol=1e-12)
    assert_allclose(out.features_s.data, h, atol=1e-12)


def test_identical_domains_give_identical_logits():
    model = Mlp(MlpSpec(widths=[3, 5, 4, 2], normalizer="rn", norm_options={"fixed_gate": 0.75}), np.random.default_rng(3))
    x, _ = two_batches()
    out = model.forward(x, Tensor(x.data.copy()))
    assert_allclose(out.logits_s.data, out.logits_t.data, atol=1e-12)


def test_eval_mode_does_not_mutate():
    model = Mlp(MlpSpec(widths=[3, 5, 2], normalizer="rn"), np.random.default_rng(4))
    x_s, x_t = two_batches()
    model.forward(x_s, x_t, "train")
    before = [norm.state().model_dump() for norm in model.norms]
    first = model.forward(x_s, x_t, "eval")
    second = model.forward(x_s, x_t, "eval")
    assert [norm.state().model_dump() for norm in model.norms] == before
    assert_array_equal(first.logits_t.data, second.logits_t.data)


def test_eval_accepts_one_domain():
    model = Mlp(MlpSpec(widths=[3, 5, 2], normalizer="dsbn"), np.random.default_rng(5))
    out = model.forward(None, two_batches()[1], "eval")
    assert out.logits_s is None
    assert out.logits_t.shape == (6, 2)


def test_train_mode_needs_both_domains():
    model = Mlp(MlpSpec(widths=[3, 5, 2]), np.random.default_rng(6))
    with pytest.raises(InvalidInputError):
        model.forward(two_batches()[0], None, "train")


def test_input_width_mismatch_raises():
    model = Mlp(MlpSpec(widths=[3, 5, 2]), np.random.default_rng(7))
    with pytest.raises(InvalidInputError):
        model.forward(Tensor(np.zeros((4, 2))), Tensor(np.zeros((4, 2))))


def test_per_layer_normalizer_kinds():
    spec = MlpSpec(widths=[3, 5, 4, 2], normalizer=["bn", "rn"])
    model = Mlp(spec, np.random.default_rng(8))
    assert [norm.KIND for norm in model.norms] == ["bn", "rn"]
    with pytest.raises(InvalidInputError):
        MlpSpec(widths=[3, 5, 4, 2], normalizer=["bn"]).kinds()


def test_rn_options_reach_only_rn_layers():
    spec = MlpSpec(widths=[3, 5, 4, 2], normalizer=["autodial", "rn"],
                   norm_options={"measure": "neg_l1", "group_size": 2, "mix_init": 0.8})
    model = Mlp(spec, np.random.default_rng(9))
    assert_allclose(model.norms[0].mix.data, np.full(5, 0.8))
    assert model.norms[1].measure == "neg_l1"
    assert model.norms[1].group_size == 2


def test_mlp_gradients():
    spec = MlpSpec(widths=[3, 4, 2], normalizer="rn", norm_options={"fixed_gate": 0.6})
    rng = np.random.default_rng(10)
    model = Mlp(spec, rng)
    x_s, x_t = two_batches(seed=10)
    labels = np.array([0, 1, 0, 1, 1, 0])

    def loss_fn(t):
        model.hidden[0].weight = t["w"]
        out = model.forward(t["x_s"], t["x_t"])
        return cross_entropy(out.logits_s, labels) + (out.logits_t * out.logits_t).mean()

    result = grad_check(loss_fn, {"w": model.hidden[0].weight.data.copy(), "x_s": x_s.data, "x_t": x_t.data})
    assert result.passed, result.describe()


def test_normalizer_on_convolution_maps():
    rng = np.random.default_rng(11)
    conv = Conv2d(2, 3, 2, rng)
    projection = rng.normal(size=(4, 3, 3, 3))

    def loss_fn(t):
        layer = make_normalizer("rn", 3, fixed_gate=0.8)
        out_s, out_t = layer.forward_train(conv2d(t["x_s"], t["w"]), conv2d(t["x_t"], t["w"]))
        return (out_s * projection).sum() + (out_t * projection * 0.5).sum()

    result = grad_check(loss_fn, {
        "x_s": rng.normal(size=(4, 2, 4, 4)),
        "x_t": rng.normal(0.5, 1.5, size=(4, 2, 4, 4)),
        "w": conv.weight.data,
    })
    assert result.passed, result.describe()
    assert conv(Tensor(np.zeros((1, 2, 4, 4)))).shape == (1, 3, 3, 3)


# ----------------------------------------------------------------------
# discriminator and the full network
# ----------------------------------------------------------------------


def test_zero_discriminator_is_undecided():
    model = Discriminator(DiscriminatorSpec(features=3), np.random.default_rng(0))
    for p in model.parameters():
        p.data = np.zeros_like(p.data)
    logits = discriminator_forward(model, Tensor(np.random.default_rng(1).normal(size=(5, 3))))
    assert_array_equal(logits.data[:, 0], logits.data[:, 1])


def test_discriminator_separates_separated_domains():
    rng = np.random.default_rng(12)
    x = np.concatenate([rng.normal(-1.0, 0.1, size=(100, 2)), rng.normal(1.0, 0.1, size=(100, 2))])
    y = np.repeat([0, 1], 100)
    model = Discriminator(DiscriminatorSpec(features=2), rng)
    optimizer = ProjectedSGD(model.parameters(), lr=0.05, momentum=0.9)
    for _ in range(30):
        order = rng.permutation(200)
        for start in range(0, 200, 20):
            idx = order[start : start + 20]
            optimizer.step(backward(cross_entropy(model(Tensor(x[idx])), y[idx])))
    accuracy = np.mean(np.argmax(model(Tensor(x)).data, axis=1) == y)
    assert accuracy == 1.0


def test_network_construction_is_seeded():
    spec = MlpSpec(widths=[4, 6, 3], normalizer="rn")
    first, second = DomainAdversarialNet(spec, seed=5), DomainAdversarialNet(spec, seed=5)
    for a, b in zip(first.parameters(), second.parameters()):
        assert_array_equal(a.data, b.data)
    other = DomainAdversarialNet(spec, seed=6)
    assert not np.array_equal(first.parameters()[0].data, other.parameters()[0].data)


def test_domain_logits_reverse_feature_gradients():
    spec = MlpSpec(widths=[3, 4, 2], normalizer="bn")
    net = DomainAdversarialNet(spec, seed=0)
    f_s = Tensor(np.random.default_rng(0).uniform(0.1, 1.0, size=(5, 4)), requires_grad=True)
    f_t = Tensor(np.random.default_rng(1).uniform(0.1, 1.0, size=(5, 4)), requires_grad=True)
    labels = np.repeat([0, 1], 5)
    backward(cross_entropy(net.domain_logits(f_s, f_t, 1.0), labels))
    reversed_grad = f_s.grad.copy()

    joint = Tensor(np.concatenate([f_s.data, f_t.data]), requires_grad=True)
    backward(cross_entropy(net.discriminator(joint), labels))
    assert_allclose(reversed_grad, -joint.grad[:5], atol=1e-12)


def test_checkpoint_round_trip():
    spec = MlpSpec(widths=[3, 5, 4, 2], normalizer=["tn", "rn"])
    net = DomainAdversarialNet(spec, seed=1, discriminator_hidden=7)
    x_s, x_t = two_batches(seed=3)
    net.backbone.forward(x_s, x_t, "train")
    restored = DomainAdversarialNet.from_checkpoint(
        ModelCheckpoint.model_validate_json(net.checkpoint().model_dump_json())
    )
    assert restored.discriminator.spec.hidden == 7
    ours = net.backbone.forward(x_s, x_t, "eval")
    theirs = restored.backbone.forward(x_s, x_t, "eval")
    assert_array_equal(ours.logits_s.data, theirs.logits_s.data)
    assert_array_equal(ours.logits_t.data, theirs.logits_t.data)
    features = Tensor(np.ones((2, 4)))
    assert_array_equal(net.discriminator(features).data, restored.discriminator(features).data)
