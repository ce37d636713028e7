import numpy as np
import pytest
from scipy.special import logsumexp

from autodiff import BCE_CLAMP, Graph, SgdState, Tensor, sgd_step
from conftest import numerical_grad, relative_error
from errors import ContractError, DimensionError, GraphError, LabelIndexError, ParameterError

TRIALS = 20
TOLERANCE = 1e-4


def check_gradients(build, arrays, tolerance=TOLERANCE):
    """Compare backward() against central differences for every input array."""
    tensors = {name: Tensor(values, requires_grad=True) for name, values in arrays.items()}
    graph = Graph()
    graph.backward(build(graph, tensors))

    def value():
        return build(Graph(record=False), {name: Tensor(values) for name, values in arrays.items()}).item()

    for name, values in arrays.items():
        numeric = numerical_grad(value, values)
        assert relative_error(tensors[name].grad, numeric) < tolerance, name


def projected(graph, out, projection):
    return graph.sum(graph.multiply(out, Tensor(projection)))


@pytest.mark.parametrize('trial', range(TRIALS))
def test_dense_gradients(trial):
    rng = np.random.default_rng(trial)
    projection = rng.normal(size=(4, 3))
    check_gradients(lambda g, t: projected(g, g.dense(t['x'], t['w'], t['b']), projection),
                    {'x': rng.normal(size=(4, 5)), 'w': rng.normal(size=(5, 3)), 'b': rng.normal(size=3)})


@pytest.mark.parametrize('trial', range(TRIALS))
def test_conv2d_gradients(trial):
    rng = np.random.default_rng(trial)
    projection = rng.normal(size=(2, 3, 4, 4))
    check_gradients(lambda g, t: projected(g, g.conv2d(t['x'], t['k'], bias=t['b']), projection),
                    {'x': rng.normal(size=(2, 2, 6, 6)), 'k': rng.normal(size=(3, 2, 3, 3)),
                     'b': rng.normal(size=3)})


@pytest.mark.parametrize('trial', range(TRIALS))
def test_strided_conv2d_gradients(trial):
    rng = np.random.default_rng(100 + trial)
    projection = rng.normal(size=(2, 3, 3, 3))
    check_gradients(lambda g, t: projected(g, g.conv2d(t['x'], t['k'], stride=2), projection),
                    {'x': rng.normal(size=(2, 2, 7, 7)), 'k': rng.normal(size=(3, 2, 3, 3))})


@pytest.mark.parametrize('trial', range(TRIALS))
def test_relu_pool_and_average_gradients(trial):
    rng = np.random.default_rng(200 + trial)
    projection = rng.normal(size=(2, 3))
    check_gradients(lambda g, t: projected(g, g.global_avg_pool(g.max_pool2d(g.relu(t['x']), 2)), projection),
                    {'x': rng.normal(size=(2, 3, 4, 4))})


@pytest.mark.parametrize('trial', range(TRIALS))
def test_softmax_and_sigmoid_gradients(trial):
    rng = np.random.default_rng(300 + trial)
    projection = rng.normal(size=(4, 5))
    check_gradients(lambda g, t: projected(g, g.softmax(t['z']), projection), {'z': rng.normal(size=(4, 5))})
    check_gradients(lambda g, t: projected(g, g.sigmoid(t['z']), projection), {'z': rng.normal(size=(4, 5))})


@pytest.mark.parametrize('trial', range(TRIALS))
def test_elementwise_gradients(trial):
    rng = np.random.default_rng(400 + trial)
    projection = rng.normal(size=(3, 4))
    arrays = {'a': rng.normal(size=(3, 4)), 'b': rng.normal(size=(3, 4))}
    check_gradients(lambda g, t: projected(g, g.add(t['a'], t['b']), projection), arrays)
    check_gradients(lambda g, t: projected(g, g.multiply(t['a'], t['b']), projection), arrays)
    check_gradients(lambda g, t: g.sum(g.scale(t['a'], -1.7)), {'a': arrays['a']})


@pytest.mark.parametrize('trial', range(TRIALS))
def test_cross_entropy_gradients(trial):
    rng = np.random.default_rng(500 + trial)
    labels = rng.integers(0, 5, size=4)
    weights = rng.uniform(0.0, 1.0, size=4)
    check_gradients(lambda g, t: g.softmax_cross_entropy(t['z'], labels, weights=weights),
                    {'z': rng.normal(size=(4, 5))})


@pytest.mark.parametrize('trial', range(TRIALS))
def test_entropy_gradients_through_softmax(trial):
    rng = np.random.default_rng(600 + trial)
    weights = rng.uniform(0.0, 1.0, size=4)
    class_weights = rng.uniform(0.0, 1.0, size=5)
    check_gradients(lambda g, t: g.entropy_loss(g.softmax(t['z']), weights=weights, class_weights=class_weights),
                    {'z': rng.normal(size=(4, 5))})


@pytest.mark.parametrize('trial', range(TRIALS))
def test_binary_cross_entropy_gradients_through_sigmoid(trial):
    rng = np.random.default_rng(700 + trial)
    weights = rng.uniform(0.0, 1.0, size=4)
    check_gradients(lambda g, t: g.binary_cross_entropy(g.sigmoid(t['z']), [1, 0, 1, 0], weights=weights),
                    {'z': rng.normal(size=(4, 1))})


@pytest.mark.parametrize('lam', [0.0, 0.3, 1.0, 2.5])
def test_gradient_reversal_negates_and_scales(lam, rng):
    x = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    projection = rng.normal(size=(3, 2))
    graph = Graph()
    out = graph.gradient_reversal(x, lam)
    np.testing.assert_array_equal(out.data, x.data)
    graph.backward(projected(graph, out, projection))
    np.testing.assert_allclose(x.grad, -lam * projection, rtol=0, atol=1e-15)


def test_gradient_reversal_rejects_negative_coefficient():
    with pytest.raises(ParameterError):
        Graph().gradient_reversal(Tensor(np.ones((1, 1)), requires_grad=True), -0.1)


@pytest.mark.parametrize('lam', [0.1, 0.5, 2.0])
def test_reversal_flips_only_the_feature_side(lam):
    # feature f = a * x, discriminator p = sigmoid(b * f), loss = -ln p
    x, a_value, b_value = 0.7, 1.3, -0.4

    def run(reverse):
        a = Tensor([[a_value]], requires_grad=True)
        b = Tensor([[b_value]], requires_grad=True)
        zero = Tensor([0.0])
        graph = Graph()
        feature = graph.dense(Tensor([[x]]), a, zero)
        if reverse:
            feature = graph.gradient_reversal(feature, lam)
        prob = graph.sigmoid(graph.dense(feature, b, zero))
        graph.backward(graph.binary_cross_entropy(prob, [1.0]))
        return a.grad.item(), b.grad.item()

    p = 1.0 / (1.0 + np.exp(-b_value * a_value * x))
    plain_a, plain_b = run(reverse=False)
    reversed_a, reversed_b = run(reverse=True)
    assert plain_a == pytest.approx(-(1.0 - p) * b_value * x, rel=1e-12)
    assert plain_b == pytest.approx(-(1.0 - p) * a_value * x, rel=1e-12)
    assert reversed_a == pytest.approx(-lam * plain_a, rel=1e-12)
    assert np.sign(reversed_a) == -np.sign(plain_a)
    assert reversed_b == plain_b


def test_backward_runs_once():
    x = Tensor([1.0, 2.0], requires_grad=True)
    graph = Graph()
    loss = graph.sum(x)
    graph.backward(loss)
    with pytest.raises(GraphError):
        graph.backward(loss)
    with pytest.raises(GraphError):
        graph.sum(x)


def test_backward_needs_a_scalar_that_depends_on_parameters():
    graph = Graph()
    with pytest.raises(DimensionError):
        graph.backward(graph.scale(Tensor([1.0, 2.0], requires_grad=True), 2.0))
    graph = Graph()
    with pytest.raises(GraphError):
        graph.backward(graph.sum(Tensor([1.0, 2.0])))


def test_unrecorded_graph_stores_nothing():
    graph = Graph(record=False)
    out = graph.sum(graph.relu(Tensor([-1.0, 2.0], requires_grad=True)))
    assert graph.nodes == []
    assert not out.requires_grad
    assert out.item() == 2.0


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor([0.0, 1.0], requires_grad=True)
    graph = Graph()
    graph.backward(graph.sum(graph.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_cross_entropy_rejects_bad_labels_and_values():
    logits = Tensor(np.zeros((2, 3)), requires_grad=True)
    with pytest.raises(LabelIndexError):
        Graph().softmax_cross_entropy(logits, [0, 3])
    with pytest.raises(LabelIndexError):
        Graph().softmax_cross_entropy(logits, [-1, 0])
    with pytest.raises(ContractError):
        Graph().softmax_cross_entropy(Tensor([[np.nan, 0.0, 0.0]]), [0])
    with pytest.raises(DimensionError):
        Graph().softmax_cross_entropy(logits, [0, 1, 2])


def test_uniform_logits_cross_entropy_is_log_classes():
    loss = Graph().softmax_cross_entropy(Tensor(np.zeros((4, 5))), [0, 1, 2, 3])
    assert loss.item() == pytest.approx(np.log(5.0), rel=1e-15)


def test_entropy_of_one_hot_rows_is_zero_and_uniform_is_log_classes():
    graph = Graph(record=False)
    assert graph.entropy_loss(Tensor(np.eye(3))).item() == 0.0
    assert graph.entropy_loss(Tensor(np.full((2, 4), 0.25))).item() == pytest.approx(np.log(4.0))


def test_entropy_requires_normalized_rows():
    with pytest.raises(ContractError):
        Graph().entropy_loss(Tensor([[0.5, 0.6]]))
    with pytest.raises(ContractError):
        Graph().entropy_loss(Tensor([[1.5, -0.5]]))


def test_binary_cross_entropy_is_clamped():
    loss = Graph().binary_cross_entropy(Tensor([[0.0], [1.0]]), [1, 0])
    assert loss.item() == pytest.approx(-np.log(BCE_CLAMP))
    with pytest.raises(LabelIndexError):
        Graph().binary_cross_entropy(Tensor([[0.5]]), [2])


def test_sigmoid_output_stays_strictly_inside_unit_interval():
    out = Graph().sigmoid(Tensor([[-1e4], [0.0], [1e4]]))
    assert np.all(out.data > 0.0) and np.all(out.data < 1.0)


def test_conv_and_pool_shape_errors():
    graph = Graph()
    with pytest.raises(DimensionError):
        graph.conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((3, 1, 3, 3))))
    with pytest.raises(DimensionError):
        graph.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(ParameterError):
        graph.conv2d(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)
    with pytest.raises(DimensionError):
        graph.max_pool2d(Tensor(np.zeros((1, 1, 5, 5))), 2)
    with pytest.raises(DimensionError):
        graph.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))


def test_conv2d_matches_direct_correlation(rng):
    x = rng.normal(size=(1, 2, 5, 5))
    kernels = rng.normal(size=(3, 2, 3, 3))
    out = Graph(record=False).conv2d(Tensor(x), Tensor(kernels)).data
    expected = np.zeros((1, 3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                expected[0, o, i, j] = np.sum(x[0, :, i:i + 3, j:j + 3] * kernels[o])
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_sgd_step_matches_hand_computation():
    params = {'w': Tensor([1.0], requires_grad=True)}
    state = SgdState(learning_rate=0.1, momentum=0.9, weight_decay=0.0005)
    sgd_step(params, {'w': np.array([0.5])}, state)
    assert params['w'].data[0] == pytest.approx(0.94995, abs=1e-12)
    sgd_step(params, {'w': np.array([0.5])}, state)
    assert state.velocity['w'][0] == pytest.approx(0.950924975, abs=1e-12)
    assert params['w'].data[0] == pytest.approx(0.8548575025, abs=1e-12)


def test_sgd_step_with_zero_rate_keeps_parameters(rng):
    values = rng.normal(size=(3, 3))
    params = {'w': Tensor(values, requires_grad=True)}
    sgd_step(params, {'w': rng.normal(size=(3, 3))}, SgdState(learning_rate=0.0))
    np.testing.assert_array_equal(params['w'].data, values)


def test_sgd_step_rejects_mismatched_gradients():
    params = {'w': Tensor(np.zeros(3), requires_grad=True)}
    with pytest.raises(DimensionError):
        sgd_step(params, {'w': np.zeros(4)}, SgdState(learning_rate=0.1))
    with pytest.raises(DimensionError):
        sgd_step(params, {}, SgdState(learning_rate=0.1))
    with pytest.raises(ParameterError):
        SgdState(learning_rate=-1.0)


####### hand-computed values

def test_layer_values_match_hand_arithmetic():
    graph = Graph(record=False)
    dense = graph.dense(Tensor([[1.0, 1.0]]), Tensor([[2.0, 3.0], [4.0, 5.0]]), Tensor([1.0, 1.0]))
    np.testing.assert_array_equal(dense.data, [[7.0, 9.0]])
    identity = graph.dense(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(identity.data, [[1.0, 2.0]])
    np.testing.assert_array_equal(graph.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    block = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert graph.max_pool2d(block, 2).data.ravel().tolist() == [4.0]
    assert graph.global_avg_pool(block).data.ravel().tolist() == [2.5]
    ones = graph.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert ones.data.ravel().tolist() == [9.0]


def test_saturated_logits_do_not_overflow():
    graph = Graph(record=False)
    logits = Tensor([[1000.0, 0.0]])
    confident = graph.softmax_cross_entropy(logits, [0]).item()
    assert np.isfinite(confident) and confident == pytest.approx(0.0, abs=1e-12)
    assert graph.softmax_cross_entropy(logits, [1]).item() == pytest.approx(1000.0, rel=1e-12)


def test_cross_entropy_value_matches_log_sum_exp(rng):
    logits = rng.normal(size=(3, 5)) * 4.0
    labels = [4, 0, 2]
    expected = np.mean(logsumexp(logits, axis=1) - logits[np.arange(3), labels])
    loss = Graph(record=False).softmax_cross_entropy(Tensor(logits), labels)
    assert abs(loss.item() - expected) < 1e-10


def test_entropy_and_binary_cross_entropy_literals():
    graph = Graph(record=False)
    assert graph.entropy_loss(Tensor([[0.7, 0.3]])).item() == pytest.approx(0.610864, abs=1e-6)
    half = Tensor([[0.5], [0.5]])
    assert graph.binary_cross_entropy(half, [1, 0]).item() == pytest.approx(np.log(2.0), rel=1e-12)
    assert graph.binary_cross_entropy(Tensor([[0.8]]), [0]).item() == pytest.approx(1.609438, abs=1e-6)
    assert graph.binary_cross_entropy(Tensor([[1.0 - 1e-7]]), [1]).item() == pytest.approx(1e-7, rel=1e-6)


@pytest.mark.parametrize('trial', range(TRIALS))
def test_losses_stay_in_range(trial):
    rng = np.random.default_rng(900 + trial)
    classes = int(rng.integers(2, 7))
    logits = rng.normal(size=(6, classes)) * rng.uniform(0.1, 20.0)
    graph = Graph(record=False)
    assert graph.softmax_cross_entropy(Tensor(logits), rng.integers(0, classes, size=6)).item() >= 0.0
    entropy = graph.entropy_loss(graph.softmax(Tensor(logits))).item()
    assert -1e-12 <= entropy <= np.log(classes) + 1e-12
    prob = Tensor(rng.uniform(0.0, 1.0, size=(6, 1)))
    assert graph.binary_cross_entropy(prob, rng.integers(0, 2, size=6)).item() >= 0.0


def test_reversed_gradient_of_a_square():
    x = Tensor([[3.0]], requires_grad=True)
    graph = Graph()
    reversed_x = graph.gradient_reversal(x, 0.5)
    graph.backward(graph.sum(graph.multiply(reversed_x, reversed_x)))
    assert x.grad.item() == pytest.approx(-3.0, rel=1e-15)


def test_sgd_recurrence_examples():
    params = {'w': Tensor([1.0], requires_grad=True)}
    sgd_step(params, {'w': np.array([0.5])}, SgdState(learning_rate=1.0, momentum=0.0, weight_decay=0.0))
    assert params['w'].data[0] == pytest.approx(0.5, abs=1e-15)

    params = {'w': Tensor([0.0], requires_grad=True)}
    state = SgdState(learning_rate=0.1, momentum=0.9, weight_decay=0.0)
    sgd_step(params, {'w': np.array([1.0])}, state)
    assert params['w'].data[0] == pytest.approx(-0.1, abs=1e-15)
    sgd_step(params, {'w': np.array([1.0])}, state)
    assert params['w'].data[0] == pytest.approx(-0.29, abs=1e-15)

    params = {'w': Tensor([1.0], requires_grad=True)}
    sgd_step(params, {'w': np.array([0.0])}, SgdState(learning_rate=0.0005, momentum=0.0, weight_decay=0.0005))
    assert params['w'].data[0] == pytest.approx(0.99999975, abs=1e-15)
