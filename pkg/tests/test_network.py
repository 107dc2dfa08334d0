import numpy as np
import pytest

from carprune.network import (
    Affine,
    Conv,
    Dataset,
    Flatten,
    Network,
    ReLU,
    SgdConfig,
    TrainingDiverged,
    build_network,
    evaluate_accuracy,
    load_preset,
    parse_architecture,
    per_class_accuracy,
    predict,
    train_sgd,
)
from carprune.tensor import DimensionError

from oracles import masked_logits
from toynets import random_toy_net

f32 = np.float32


def constant_class_net(class_count=3, winner=0):
    """1x2x2 input -> 1x1 conv -> flatten -> affine whose bias always favours ``winner``."""
    conv = Conv("c", np.ones((1, 1, 1, 1), f32), np.zeros(1, f32))
    bias = np.zeros(class_count, f32)
    bias[winner] = 1
    fc = Affine("fc", np.zeros((class_count, 4), f32), bias)
    return Network([conv, Flatten("f"), fc], (1, 2, 2), class_count)


def dataset(labels, class_count=3):
    labels = np.asarray(labels)
    return Dataset(np.zeros((len(labels), 1, 2, 2), f32), labels, class_count, "test")


def test_zero_conv_weights_give_input_independent_logits(rng):
    net = build_network("lenet-desk", 0)
    for layer in net.parameterized():
        if isinstance(layer, Conv):
            layer.weights[:] = 0
            layer.bias[:] = rng.normal(size=layer.bias.shape)
    out = net.forward(rng.normal(size=(5, 1, 28, 28)).astype(f32))
    assert np.array_equal(out, np.broadcast_to(out[0], out.shape))


def test_one_by_one_conv_is_a_per_pixel_linear_map():
    conv = Conv("c", np.array([[[[3.0]]]], f32), np.array([0.5], f32))
    net = Network([conv, Flatten("f"), Affine("fc", np.eye(4, dtype=f32), np.zeros(4, f32))], (1, 2, 2), 4)
    x = np.array([[[1, 2], [3, 4]]], f32)
    assert net.forward(x).tolist() == [3.5, 6.5, 9.5, 12.5]


def test_lenet_forward_matches_layerwise_oracle(rng):
    net = build_network("lenet-desk", 3)
    x = rng.normal(size=(4, 1, 28, 28)).astype(f32)
    assert np.abs(net.forward(x) - masked_logits(net, x, None, None)).max() < 1e-4


def test_random_toy_nets_match_oracle(rng):
    for _ in range(10):
        net, _ = random_toy_net(rng)
        x = rng.normal(size=(3, *net.input_shape)).astype(f32)
        assert np.abs(net.forward(x) - masked_logits(net, x, None, None)).max() < 1e-5


def test_residual_with_zero_branch_is_relu_of_identity(rng):
    net = build_network("resnet-desk", 0)
    block = net.layer("res1")
    for layer in block.branch:
        if isinstance(layer, Conv):
            layer.weights[:] = 0
    x = rng.normal(size=(3, 8, 14, 14)).astype(f32)
    assert np.array_equal(block.forward(x), np.maximum(x, 0))


def test_forward_shape_error_names_layer():
    net = build_network("lenet-desk", 0)
    with pytest.raises(DimensionError, match="conv1"):
        net.forward(np.zeros((1, 2, 28, 28), f32))


def test_architecture_text_round_trip():
    for name in ("lenet-desk", "resnet-desk", "plain-desk"):
        arch = load_preset(name)
        text = arch.to_text()
        assert parse_architecture(text).to_text() == text
        assert build_network(arch, 0).architecture().to_text() == text


@pytest.mark.parametrize("text,match", [
    ("name = x\ninput = 1x4x4\nclasses = 2\n", "schema"),
    ("schema = carprune-arch/1\ninput = 1x4x4\nclasses = 2\nlayer a softmax\n", "unknown layer kind"),
    ("schema = carprune-arch/1\ninput = 1x4x4\nclasses = 2\nlayer a conv size=3\n", "bad attribute"),
    ("schema = carprune-arch/1\ninput = 1x4x4\nclasses = 2\ncolour = red\n", "unknown architecture keys"),
    ("schema = carprune-arch/1\ninput = 1x4x4\nclasses = 2\nblock b\n", "not closed"),
])
def test_architecture_errors(text, match):
    with pytest.raises(ValueError, match=match):
        parse_architecture(text)


def test_duplicate_ids_rejected():
    with pytest.raises(ValueError, match="duplicate"):
        Network([ReLU("a"), ReLU("a"), Flatten("f"), Affine("fc", np.zeros((2, 4), f32), np.zeros(2, f32))],
                (1, 2, 2), 2)


def test_accuracy_constant_predictor():
    net = constant_class_net()
    assert evaluate_accuracy(net, dataset([0, 0, 0, 0])) == 1.0
    assert evaluate_accuracy(net, dataset([0, 0, 1, 2])) == 0.5


def test_accuracy_ties_go_to_lowest_class():
    net = constant_class_net()
    net.layers[-1].bias[:] = 0
    assert predict(net, dataset([2, 1])).tolist() == [0, 0]


def test_accuracy_empty_dataset_is_an_error():
    with pytest.raises(ValueError, match="empty"):
        evaluate_accuracy(constant_class_net(), dataset([]))


def test_per_class_constant_predictor_and_absent_class():
    net = constant_class_net(class_count=4)
    data = dataset([0, 1, 2, 0, 1, 2], class_count=4)
    assert per_class_accuracy(net, data) == {0: 1.0, 1: 0.0, 2: 0.0, 3: None}


def test_per_class_perfect_predictions():
    data = dataset(np.arange(10) % 3)
    assert set(per_class_accuracy(None, data, preds=data.labels.copy()).values()) == {1.0}


def test_per_class_weighted_mean_identity(rng):
    for _ in range(5):
        net, _ = random_toy_net(rng)
        x = rng.normal(size=(40, *net.input_shape)).astype(f32)
        data = Dataset(x, rng.integers(0, 3, 40), 3)
        pc = per_class_accuracy(net, data)
        counts = np.bincount(data.labels, minlength=3)
        weighted = sum(counts[c] * a for c, a in pc.items() if a is not None) / len(data)
        acc = evaluate_accuracy(net, data)
        assert abs(weighted - acc) < 1e-9
        assert 0 <= acc <= 1
        assert abs(acc - (1 - float((predict(net, data) != data.labels).mean()))) < 1e-12


def _two_class_toy(rng, n=40):
    x = rng.normal(0, 0.1, size=(n, 1, 4, 4)).astype(f32)
    y = np.arange(n) % 2
    x[y == 1, :, :2] += 1.0
    return Dataset(x, y, 2)


def _small_net(seed=0):
    text = ("schema = carprune-arch/1\ninput = 1x4x4\nclasses = 2\n"
            "layer c conv filters=2 kernel=3\nlayer r relu\nlayer f flatten\nlayer fc affine out=2\n")
    return parse_architecture(text).build(seed)


def test_zero_learning_rate_keeps_weights(rng):
    net = _small_net()
    out, log = train_sgd(net, _two_class_toy(rng), SgdConfig(0.0, 0.9, 8, 2, 0))
    for a, b in zip(net.parameterized(), out.parameterized()):
        assert np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)
    assert len(log) == 2


def test_separable_toy_reaches_full_training_accuracy(rng):
    data = _two_class_toy(rng)
    net, log = train_sgd(_small_net(), data, SgdConfig(0.05, 0.9, 8, 30, 0))
    assert evaluate_accuracy(net, data) == 1.0
    assert log[-1] < log[0]


def test_training_is_reproducible(rng):
    data = _two_class_toy(rng)
    a, _ = train_sgd(_small_net(1), data, SgdConfig(0.05, 0.9, 8, 3, 7))
    b, _ = train_sgd(_small_net(1), data, SgdConfig(0.05, 0.9, 8, 3, 7))
    for la, lb in zip(a.parameterized(), b.parameterized()):
        assert la.weights.tobytes() == lb.weights.tobytes()


def test_training_does_not_mutate_input(rng):
    net = _small_net()
    before = [l.weights.copy() for l in net.parameterized()]
    train_sgd(net, _two_class_toy(rng), SgdConfig(0.05, 0.9, 8, 1, 0))
    assert all(np.array_equal(b, l.weights) for b, l in zip(before, net.parameterized()))


def test_divergence_reports_epoch_and_batch(rng):
    data = _two_class_toy(rng)
    data.images *= 1e30
    with pytest.raises(TrainingDiverged) as info:
        train_sgd(_small_net(), data, SgdConfig(1e30, 0.9, 8, 3, 0))
    assert info.value.epoch == 0
    assert info.value.batch >= 0


def test_masked_training_holds_zeros(rng):
    net = _small_net()
    mask = np.ones_like(net.layer("c").weights, dtype=bool)
    mask[0] = False
    out, _ = train_sgd(net, _two_class_toy(rng), SgdConfig(0.05, 0.9, 8, 2, 0), masks={"c": mask})
    assert not out.layer("c").weights[0].any()
    assert out.layer("c").weights[1].all()
