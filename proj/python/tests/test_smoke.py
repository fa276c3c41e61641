import json
from pathlib import Path

import numpy as np
import pytest

import lsc

DATA = Path(__file__).resolve().parents[2] / "tests" / "data"


def block_affinity(sizes):
    n = sum(sizes)
    a = np.zeros((n, n))
    start = 0
    for s in sizes:
        a[start : start + s, start : start + s] = 1.0
        start += s
    return a


def test_block_graph_recovery():
    a = block_affinity([5, 7, 4])
    values, final, history = lsc.optimize([(a, (1, 16))], channels=3, iterations=1500)
    assert values.shape == (16, 3)
    assert final["total"] < 1e-3
    assert len(history) == 1500
    labels, k = lsc.segment(values, (1, 16), k=3)
    truth = [0] * 5 + [1] * 7 + [2] * 4
    assert k == 3
    assert lsc.adjusted_rand_index(labels, truth) == pytest.approx(1.0)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    q, k = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    graphs = [(lsc.qk_affinity(q, k, 3, (2, 3)), (2, 3))]
    x = 0.4 * rng.normal(size=(6, 2))
    grad = lsc.loss_grad(x, (2, 3), graphs)
    fd = np.zeros_like(x)
    h = 1e-6
    for idx in np.ndindex(*x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += h
        down[idx] -= h
        fd[idx] = (lsc.loss(up, (2, 3), graphs)["total"] - lsc.loss(down, (2, 3), graphs)["total"]) / (2 * h)
    assert np.abs(grad - fd).max() / np.abs(fd).max() < 1e-4


def test_ncut_matches_numpy():
    rng = np.random.default_rng(1)
    a = rng.uniform(size=(12, 12))
    a = (a + a.T) / 2
    values, vectors = lsc.solve_ncut(a, 4)
    d = a.sum(axis=1)
    lap = np.diag(d) - a
    dinv = np.diag(d**-0.5)
    expected = np.linalg.eigvalsh(dinv @ lap @ dinv)[:4]
    np.testing.assert_allclose(values, expected, atol=1e-10)
    for i in range(4):
        r = lap @ vectors[:, i] - values[i] * d * vectors[:, i]
        assert np.linalg.norm(r) < 1e-8


def test_orthogonalize_gives_orthogonal_channels():
    rng = np.random.default_rng(2)
    values, eig = lsc.orthogonalize(rng.normal(size=(20, 4)))
    gram = values.T @ values
    np.testing.assert_allclose(gram, np.diag(eig), atol=1e-10)
    assert list(eig) == sorted(eig, reverse=True)


def test_matching_metrics():
    gt = [0, 0, 1, 1, 2, 2]
    pred = [2, 2, 0, 0, 1, 1]
    for match in ("greedy", "hungarian"):
        assert lsc.matched_miou(pred, 3, gt, match) == pytest.approx(1.0)
    counts = np.array([[0, 5], [7, 1]], dtype=np.int64)
    assert lsc.hungarian_match(counts) == [1, 0]


def test_errors_map_to_python_exceptions():
    with pytest.raises(lsc.InputError):
        lsc.matched_miou([0, 1], 2, [0, 1], "nearest")
    a = np.zeros((3, 3))
    a[0, 1] = a[1, 0] = 1.0
    with pytest.raises(lsc.ComputeError):
        lsc.solve_ncut(a, 2)
    assert issubclass(lsc.InputError, ValueError)


def test_cli_round_trip(tmp_path):
    out = tmp_path / "run"
    code, stdout, stderr = lsc.run_cli(
        ["eigs-image", "--manifest", str(DATA / "blocks" / "manifest.json"), "--channels", "2",
         "--iters", "300", "--lr", "1e-2", "--out", str(out)]
    )
    assert code == 0, stderr
    assert "final loss" in stdout
    report = json.loads((out / "report.json").read_text())
    assert report["command"] == "eigs-image"
    assert report["grid"] == [16, 16]

    code, _, stderr = lsc.run_cli(["eigs-image", "--manifest", str(tmp_path / "missing.json"), "--out", str(tmp_path / "err")])
    assert code == 2
    assert "missing.json" in stderr
