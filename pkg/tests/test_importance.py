import csv

import numpy as np
import pytest

from carprune.formats import model_bytes
from carprune.importance import (
    SCORE_COLUMNS,
    avg_weight_index,
    car_all,
    car_index,
    random_index,
    score_layer,
    write_scores_csv,
)
from carprune.network import Affine, Conv, Dataset, Flatten, Network, ReLU, parse_architecture
from carprune.surgery import FilterRef, PruneError, prune_surgery, successor

from oracles import masked_logits
from toynets import labelled, random_inputs, random_toy_net

f32 = np.float32


def test_zero_outgoing_gives_exactly_zero_car(rng):
    for _ in range(10):
        net, prunable = random_toy_net(rng)
        lid = prunable[0]
        i = int(rng.integers(net.layer(lid).n_filters))
        succ = successor(net, lid)
        if isinstance(succ.layer, Conv):
            succ.layer.weights[:, i] = 0
        else:
            hw = succ.columns_per_channel
            succ.layer.weights[:, i * hw : (i + 1) * hw] = 0
        data = Dataset(random_inputs(rng, net, 50), rng.integers(0, 3, 50), 3)
        assert car_index(net, FilterRef(lid, i), data).value == 0.0


TWO_FILTER = ("schema = carprune-arch/1\ninput = 1x6x6\nclasses = 3\n"
              "layer c1 conv filters={n} kernel=3\nlayer r1 relu\nlayer p1 maxpool window=2 stride=2\n"
              "layer f flatten\nlayer fc affine out=3\n")


def test_car_matches_rebuilt_networks(rng):
    net = parse_architecture(TWO_FILTER.format(n=2)).build(11)
    x = random_inputs(rng, net, 20)
    data = Dataset(x, rng.integers(0, 3, 20), 3)

    def oracle_acc(model):
        return float((masked_logits(model, x, None, None).argmax(axis=1) == data.labels).mean())

    base = oracle_acc(net)
    for i in range(2):
        # rebuild the one-filter network from its architecture text, then copy weights over
        rebuilt = parse_architecture(TWO_FILTER.format(n=1)).build(0)
        keep = 1 - i
        rebuilt.layer("c1").weights = net.layer("c1").weights[keep : keep + 1].copy()
        rebuilt.layer("c1").bias = net.layer("c1").bias[keep : keep + 1].copy()
        fc = net.layer("fc").weights.reshape(3, 2, 4)
        rebuilt.layer("fc").weights = fc[:, keep].copy()
        rebuilt.layer("fc").bias = net.layer("fc").bias.copy()
        assert car_index(net, FilterRef("c1", i), data).value == pytest.approx(base - oracle_acc(rebuilt), abs=1e-12)


def _duplicate_net():
    """Constant images of value u; class 1 wins when the duplicated pair's signal exceeds 2."""
    conv = Conv("c", np.array([1, 1, 0], f32).reshape(3, 1, 1, 1), np.zeros(3, f32))
    w = np.zeros((2, 12), f32)
    w[1, :8] = 1  # both duplicate channels, four pixels each
    fc = Affine("fc", w, np.array([2, 0], f32))
    return Network([conv, ReLU("r"), Flatten("f"), fc], (1, 2, 2), 2)


def test_duplicate_filters():
    net = _duplicate_net()
    u = (np.arange(40, dtype=f32) + 0.5) / 40
    x = np.broadcast_to(u[:, None, None, None], (40, 1, 2, 2)).copy()
    data = labelled(net, x)
    with_pair = car_index(net, FilterRef("c", 0), data).value
    assert with_pair == car_index(net, FilterRef("c", 1), data).value
    without_j = prune_surgery(net, FilterRef("c", 1))
    alone = car_index(without_j, FilterRef("c", 0), data).value
    assert 0 < with_pair <= alone


def test_car_all_matches_elementwise_and_is_schedule_invariant(trained, mnist):
    net = trained("lenet-desk", 0)
    data = mnist["validation"].sample(200, 0)
    before = model_bytes(net)
    seq = car_all(net, "conv1", data)
    par = car_all(net, "conv1", data, workers=4)
    single = [car_index(net, FilterRef("conv1", i), data) for i in range(8)]
    assert [s.value for s in seq] == [s.value for s in par] == [s.value for s in single]
    assert [s.filter.index for s in seq] == list(range(8))
    assert model_bytes(net) == before


def test_single_filter_layer(rng):
    net = parse_architecture(TWO_FILTER.format(n=1)).build(3)
    data = labelled(net, random_inputs(rng, net, 30))
    scores = car_all(net, "c1", data)
    assert len(scores) == 1
    assert scores[0] == car_index(net, FilterRef("c1", 0), data)


def test_car_rejects_non_conv(rng):
    net = parse_architecture(TWO_FILTER.format(n=2)).build(3)
    data = labelled(net, random_inputs(rng, net, 5))
    with pytest.raises(PruneError):
        car_index(net, FilterRef("fc", 0), data)


@pytest.mark.parametrize("scale", [2.0, 0.25, 3.0])
def test_relu_positive_homogeneity(rng, scale):
    text = ("schema = carprune-arch/1\ninput = 1x8x8\nclasses = 3\n"
            "layer c1 conv filters=4 kernel=3\nlayer r1 relu\nlayer p1 maxpool window=2 stride=2\n"
            "layer c2 conv filters=3 kernel=2\nlayer r2 relu\nlayer f flatten\nlayer fc affine out=3\n")
    for seed in range(5):
        net = parse_architecture(text).build(seed)
        data = Dataset(random_inputs(rng, net, 60), rng.integers(0, 3, 60), 3)
        base = [s.value for s in car_all(net, "c1", data)]
        i = seed % 4
        scaled = net.copy()
        s = f32(scale)
        scaled.layer("c1").weights[i] *= s
        scaled.layer("c1").bias[i] *= s
        scaled.layer("c2").weights[:, i] /= s
        got = [s.value for s in car_all(scaled, "c1", data)]
        assert np.abs(np.array(got) - base).max() <= 1e-5


def test_incoming_index_examples(rng):
    net = parse_architecture(TWO_FILTER.format(n=2)).build(0)
    net.layer("c1").weights[0] = -0.75
    assert avg_weight_index(net, FilterRef("c1", 0), "incoming").value == 0.75
    net.layer("c1").weights[1] = 0
    scores = score_layer(net, "c1", "incoming")
    assert scores[1].value == 0.0
    assert int(np.argmin([s.value for s in scores])) == 1


def test_incoming_is_permutation_invariant(rng):
    net, prunable = random_toy_net(rng)
    lid = prunable[0]
    before = avg_weight_index(net, FilterRef(lid, 0), "incoming").value
    w = net.layer(lid).weights
    w[0] = rng.permutation(w[0].ravel()).reshape(w[0].shape)
    assert abs(avg_weight_index(net, FilterRef(lid, 0), "incoming").value - before) < 1e-12


def test_outgoing_index_reads_successor_slice(rng):
    net = parse_architecture(TWO_FILTER.format(n=2)).build(4)
    fc = net.layer("fc").weights
    want = float(np.abs(fc[:, 4:8].astype(np.float64)).mean())
    assert avg_weight_index(net, FilterRef("c1", 1), "outgoing").value == want


def test_outgoing_without_successor_is_an_error():
    conv = Conv("c", np.ones((3, 1, 1, 1), f32), np.zeros(3, f32))
    net = Network([conv, Flatten("f")], (1, 1, 1), 3)
    assert avg_weight_index(net, FilterRef("c", 0), "incoming").value == 1.0
    with pytest.raises(PruneError, match="no parameterized successor"):
        avg_weight_index(net, FilterRef("c", 0), "outgoing")


def test_random_index_determinism_and_single_filter():
    a = random_index("c", 6, 17)
    assert a == random_index("c", 6, 17)
    assert sorted(s.value for s in a) == list(range(6))
    assert all(random_index("c", 1, s)[0].filter == FilterRef("c", 0) for s in range(5))


def test_random_index_is_uniform():
    counts = np.zeros(4)
    for seed in range(10_000):
        counts[int(np.argmin([s.value for s in random_index("c", 4, seed)]))] += 1
    assert np.abs(counts / 10_000 - 0.25).max() <= 0.02


def test_scores_csv(tmp_path, rng):
    net = parse_architecture(TWO_FILTER.format(n=2)).build(0)
    write_scores_csv(tmp_path / "s.csv", score_layer(net, "c1", "incoming"), "validation", 20, 0)
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == SCORE_COLUMNS
    assert [r[1] for r in rows[1:]] == ["0", "1"]
