import numpy as np

from vreg.study import CompareResult, HierarchyTask, ToyTask, evaluate, hierarchy_study


def test_toy_task_shapes():
    task = ToyTask(n_phantoms=2, n_per_phantom=3)
    X, Y, V = task.arrays()
    assert X.shape == (6, 1, 32, 32) and Y.shape == (6, 6)
    assert np.all(np.abs(V[:, [2, 3, 4]]) == 0)
    assert task.network(0).arity == 6
    starts = task.eval_starts(5)
    assert all(task.coarse.contains(v) for v in starts)
    np.testing.assert_array_equal(starts[0], task.eval_starts(5)[0])


def test_evaluate_round_robin():
    task = ToyTask(n_phantoms=2)
    rate, d = evaluate(task.network(0), task, task.pairs(), n_cases=4, n_steps=2)
    assert d.shape == (4,) and 0 <= rate <= 1


def test_compare_result_helpers():
    r = CompareResult([10, 20], {0: [0.5, 0.9], 1: [0.7, 0.7]}, {0: [0.0, 0.2], 1: [0.0, 0.4]})
    assert r.mean_curve("dsl") == [(10, 0.6), (20, 0.8)]
    assert CompareResult.steps_to(r.mean_curve("dsl"), 0.8) == 20
    assert CompareResult.steps_to(r.mean_curve("drl"), 0.8) is None


def test_hierarchy_task_arrays():
    task = HierarchyTask(n_phantoms=1, n_per_phantom=4)
    pairs = task.pairs()
    Xc, Yc = task.coarse_arrays(pairs)
    Xf, Yf = task.fine_arrays(pairs)
    assert Xc.shape == (4, 1, 16, 16) and Xf.shape == (4, 1, 48, 48)
    assert Yc.shape == Yf.shape == (4, 6)
    assert np.all(np.isfinite(Yf)) and np.all(np.isfinite(Xf))


def test_hierarchy_study_runs():
    task = HierarchyTask(n_phantoms=1)
    coarse, fine = task._network(16, 0), task._network(48, 1)
    dc, df = hierarchy_study(task, coarse, fine, task.pairs(), n_cases=2, n1=2, n2=2)
    assert dc.shape == df.shape == (2,)
