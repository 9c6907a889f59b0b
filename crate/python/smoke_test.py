"""Smoke test for the spherediffeo extension.

Build and install first:
    pip install --no-build-isolation -e crates/python
"""

import math
import os
import tempfile

import spherediffeo as sd


def close(a, b, tol):
    return all(abs(u - v) <= tol for p, q in zip(a, b) for u, v in zip(p, q))


def main():
    x_tr, y_tr, x_te, y_te = sd.simulate(seed=1, n_train=120, n_test=60)
    assert len(x_tr) == 120 and len(x_te) == 60
    assert all(abs(math.hypot(*p) - 1.0) < 1e-12 for p in x_tr + y_tr)

    truth_mse = sd.mse(y_te, sd.apply_map("composite", x_te, seed=1))
    assert 0.005 < truth_mse < 0.05, truth_mse

    model, trace = sd.fit(x_tr, y_tr, lam=1e-3, degree=3, step=2.0, gradient="adjoint", max_iters=200, seed=1)
    assert model.variant == "diffeo" and model.degree == 3 and model.n_steps > 0
    assert trace[-1][1] >= trace[0][1], "objective must not decrease"
    ours = sd.mse(y_te, model.predict(x_te))
    rr = sd.mse(y_te, sd.fit_rotation(x_tr, y_tr).predict(x_te))
    plt = sd.mse(y_te, sd.fit_projective(x_tr, y_tr).predict(x_te))
    print(f"test MSE  TRUE {truth_mse:.4f}  OURS {ours:.4f}  RR {rr:.4f}  PLT {plt:.4f}")
    assert ours < rr

    q, r = sd.fit_rotation(x_tr, y_tr).roughness(m_grid=50)
    assert q < 1e-8 and r < 1e-8

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.json")
        model.save(path)
        again = sd.Model.load(path)
        assert again.predict(x_te) == model.predict(x_te)
        data = os.path.join(d, "train.csv")
        sd.write_dataset(data, x_tr, y_tr)
        xs, ys = sd.read_dataset(data)
        assert xs == x_tr and ys == y_tr

    try:
        sd.mse([[1.0, 0.0, 0.0]], [])
    except ValueError as e:
        assert "length mismatch" in str(e)
    else:
        raise AssertionError("expected a length mismatch")

    lam, degree, table = sd.cross_validate(
        x_tr, y_tr, [1e-3, 1e-2], [3], seed=1, step=2.0, gradient="adjoint", max_iters=100
    )
    assert len(table) == 2 and (lam, degree) in [(c[0], c[1]) for c in table]
    print(f"cv selected lambda={lam:g} l={degree}")
    print("smoke test passed")


if __name__ == "__main__":
    main()
