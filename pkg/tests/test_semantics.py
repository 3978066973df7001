"""Word-vector loading, soft-target construction, and the auxiliary losses,
checked against scalar oracles and the distribution invariants."""

import logging

import numpy as np
import pytest

import semcross.tensor as T
from semcross.errors import DimensionError, FormatError, MissingTokenError, ParameterError
from semcross.semantics import (
    SoftLabel,
    aux_loss,
    load_word_vectors,
    normalize_label,
    soft_target,
)
from semcross.tensor import Tensor

from oracles import naive_kl, naive_mse


@pytest.fixture(autouse=True)
def float64_mode():
    with T.precision("float64"):
        yield


def write_vectors(tmp_path, text, name="vecs.txt"):
    path = tmp_path / name
    path.write_text(text)
    return path


def softmax_np(v, tau=1.0):
    z = v / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


# ---------------------------------------------------------------------------
# loader


def test_two_line_file(tmp_path):
    table = load_word_vectors(write_vectors(tmp_path, "cat 1.0 2.0 3.0\ndog 4.0 5.0 6.0\n"))
    assert len(table) == 2
    assert table.dim == 3
    assert np.array_equal(table.get("dog"), [4.0, 5.0, 6.0])


def test_empty_file_rejected(tmp_path):
    with pytest.raises(FormatError, match="empty"):
        load_word_vectors(write_vectors(tmp_path, ""))


def test_dimension_mismatch_names_line(tmp_path):
    path = write_vectors(tmp_path, "a 1.0 2.0 3.0\nb 1.0 2.0\n")
    with pytest.raises(FormatError, match=":2:"):
        load_word_vectors(path)


def test_unparseable_float_rejected(tmp_path):
    with pytest.raises(FormatError, match=":1:"):
        load_word_vectors(write_vectors(tmp_path, "a 1.0 oops 3.0\n"))


def test_blank_lines_are_skipped(tmp_path):
    table = load_word_vectors(write_vectors(tmp_path, "a 1.0 2.0\n\nb 3.0 4.0\n"))
    assert len(table) == 2


# ---------------------------------------------------------------------------
# soft targets


def test_label_normalization():
    assert normalize_label("crossword_puzzle") == ["crossword", "puzzle"]
    assert normalize_label("Great White-Shark") == ["great", "white", "shark"]
    assert normalize_label("  cat ") == ["cat"]


def test_single_word_target(tmp_path):
    table = load_word_vectors(write_vectors(tmp_path, "cat 0.5 -1.0 2.0\n"))
    out = soft_target("cat", table, tau_t=1.0)
    assert np.allclose(out.probs, softmax_np(np.array([0.5, -1.0, 2.0])), atol=1e-12)
    assert out.label == "cat"


def test_two_word_target_averages(tmp_path):
    table = load_word_vectors(write_vectors(tmp_path, "snow 1.0 0.0\nleopard 0.0 2.0\n"))
    out = soft_target("snow_leopard", table, tau_t=1.0)
    assert np.allclose(out.probs, softmax_np(np.array([0.5, 1.0])), atol=1e-12)


def test_target_temperature(tmp_path):
    table = load_word_vectors(write_vectors(tmp_path, "cat 2.0 0.0\n"))
    hot = soft_target("cat", table, tau_t=10.0)
    cold = soft_target("cat", table, tau_t=0.5)
    assert cold.probs[0] > hot.probs[0] > 0.5
    with pytest.raises(ParameterError):
        soft_target("cat", table, tau_t=0.0)


def test_missing_word_skipped_with_warning(tmp_path, caplog):
    table = load_word_vectors(write_vectors(tmp_path, "puzzle 1.0 0.0\n"))
    with caplog.at_level(logging.WARNING):
        out = soft_target("crossword_puzzle", table)
    assert "crossword" in caplog.text
    assert np.allclose(out.probs, softmax_np(np.array([1.0, 0.0])))


def test_fully_missing_label_raises(tmp_path):
    table = load_word_vectors(write_vectors(tmp_path, "puzzle 1.0 0.0\n"))
    with pytest.raises(MissingTokenError, match="zebra"):
        soft_target("zebra", table)


def test_soft_target_is_distribution(tmp_path):
    rng = np.random.default_rng(11)
    lines = [f"w{i} " + " ".join(f"{v:.6f}" for v in rng.normal(size=8) * 5) for i in range(20)]
    table = load_word_vectors(write_vectors(tmp_path, "\n".join(lines) + "\n"))
    for i in range(20):
        probs = soft_target(f"w{i}", table).probs
        assert probs.min() >= 0
        assert abs(probs.sum() - 1.0) < 1e-6


def test_word_order_does_not_matter(tmp_path):
    table = load_word_vectors(write_vectors(tmp_path, "a 1.0 2.0\nb -1.0 0.5\nc 3.0 0.0\n"))
    assert np.array_equal(
        soft_target("a_b_c", table).probs, soft_target("c_a_b", table).probs
    )


def test_soft_label_validates_itself():
    with pytest.raises(ParameterError):
        SoftLabel(probs=np.array([0.9, 0.9]), label="bad")


# ---------------------------------------------------------------------------
# aux losses


def rand_dist(rng, n):
    p = rng.uniform(0.05, 1.0, size=n)
    return p / p.sum()


def test_kl_of_identical_is_zero():
    rng = np.random.default_rng(0)
    p = rand_dist(rng, 10)
    assert abs(aux_loss(p, p, "kl").item()) < 1e-9


def test_mse_of_identical_is_zero():
    p = rand_dist(np.random.default_rng(1), 6)
    assert aux_loss(p, p, "mse").item() == 0.0


def test_kl_known_value():
    got = aux_loss(pred=np.array([0.9, 0.1]), target=np.array([0.5, 0.5]), kind="kl").item()
    expected = 0.5 * np.log(0.5 / 0.9) + 0.5 * np.log(0.5 / 0.1)
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(0.51083, abs=1e-5)


def test_kl_matches_naive_oracle():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(2, 12))
        t, p = rand_dist(rng, n), rand_dist(rng, n)
        assert aux_loss(p, t, "kl").item() == pytest.approx(naive_kl(t, p), abs=1e-12)


def test_mse_matches_naive_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(2, 12))
        t, p = rand_dist(rng, n), rand_dist(rng, n)
        assert aux_loss(p, t, "mse").item() == pytest.approx(naive_mse(p, t), abs=1e-14)


def test_kl_nonnegative_over_1000_pairs():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        n = int(rng.integers(2, 20))
        t, p = rand_dist(rng, n), rand_dist(rng, n)
        assert aux_loss(p, t, "kl").item() >= -1e-12


def test_batched_loss_is_mean_of_rows():
    rng = np.random.default_rng(5)
    preds = np.stack([rand_dist(rng, 7) for _ in range(4)])
    targets = np.stack([rand_dist(rng, 7) for _ in range(4)])
    for kind in ("kl", "mse"):
        batched = aux_loss(preds, targets, kind).item()
        rows = [aux_loss(preds[i], targets[i], kind).item() for i in range(4)]
        assert batched == pytest.approx(np.mean(rows), abs=1e-12)


def test_dimension_mismatch_rejected():
    with pytest.raises(DimensionError):
        aux_loss(np.array([0.5, 0.5]), np.array([0.2, 0.3, 0.5]), "kl")


def test_unknown_kind_rejected():
    with pytest.raises(ParameterError):
        aux_loss(np.array([1.0]), np.array([1.0]), "hellinger")


def test_kl_gradient_through_logits_matches_fd():
    # the training-path composition: logits -> softmax -> KL against a target
    rng = np.random.default_rng(6)
    target = rand_dist(rng, 6)
    logits = Tensor(rng.normal(size=6), requires_grad=True)
    loss = aux_loss(T.softmax(logits, axis=-1), target, "kl")
    loss.backward()
    analytic = logits.grad.copy()

    from semcross.gradcheck import finite_difference_gradient, relative_error

    def f(theta):
        return aux_loss(T.softmax(Tensor(theta.data), axis=-1), target, "kl").item()

    fd = finite_difference_gradient(f, Tensor(logits.data.copy()))
    assert relative_error(analytic, fd) < 1e-4


def test_kl_gradient_flows_batched():
    rng = np.random.default_rng(7)
    targets = np.stack([rand_dist(rng, 5) for _ in range(3)])
    logits = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    aux_loss(T.softmax(logits, axis=-1), targets, "kl").backward()
    assert logits.grad.shape == (3, 5)
    assert np.abs(logits.grad).max() > 0
